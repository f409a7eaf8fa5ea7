import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stablevsr.alignment import (
    AlignmentError,
    FlowCache,
    block_matching,
    compute_guidance,
    estimate_flow,
    guidance_from_latent,
    upscale_flow,
    warp,
)
from stablevsr.codec import LatentCodec
from stablevsr.dataio import SyntheticSceneConfig, degrade, downscale_flow, generate_synthetic
from stablevsr.schedule import build_schedule, forward_diffuse, project_x0

S2D = LatentCodec("space_to_depth")
SCHED = build_schedule(1000)


def bilinear_upscale_oracle(plane, f):
    """Half-pixel bilinear upsampling with clamped source coordinates, one pixel at a time."""
    h, w = plane.shape
    out = np.zeros((h * f, w * f))
    for Y in range(h * f):
        sy = min(max((Y + 0.5) / f - 0.5, 0.0), h - 1)
        y0 = int(np.floor(sy))
        y1 = min(y0 + 1, h - 1)
        for X in range(w * f):
            sx = min(max((X + 0.5) / f - 0.5, 0.0), w - 1)
            x0 = int(np.floor(sx))
            x1 = min(x0 + 1, w - 1)
            ax, ay = sx - x0, sy - y0
            top = (1 - ax) * plane[y0, x0] + ax * plane[y0, x1]
            bot = (1 - ax) * plane[y1, x0] + ax * plane[y1, x1]
            out[Y, X] = (1 - ay) * top + ay * bot
    return out


def shifted_pair(dx, dy, texture="noise_texture", size=64, seed=0):
    seq = generate_synthetic(
        SyntheticSceneConfig(height=size, width=size, num_frames=2, texture=texture, velocity=(dx, dy), seed=seed)
    )
    return seq.frames[0], seq.frames[1], seq.flows[0]


# ---------------------------------------------------------------------------
# motion estimation


def test_identical_frames_give_zero_flow():
    img = np.random.default_rng(0).uniform(size=(3, 32, 32))
    assert not block_matching(img, img).any()
    assert not block_matching(np.zeros((3, 16, 16)), np.zeros((3, 16, 16))).any()


def test_block_matching_recovers_example_shift():
    ref, tgt, _ = shifted_pair(3, -2)
    flow = block_matching(ref, tgt, block=8, radius=4)
    assert flow.shape == (2, 64, 64)
    assert np.all(flow[0, 8:-8, 8:-8] == 3) and np.all(flow[1, 8:-8, 8:-8] == -2)


@pytest.mark.parametrize("texture", ["checker", "noise_texture", "gradient_shapes"])
@pytest.mark.parametrize("dx,dy", [(0, 0), (1, 0), (0, -1), (4, 4), (-4, 2), (-3, -4), (2, 3)])
def test_block_matching_global_integer_shifts(texture, dx, dy):
    ref, tgt, _ = shifted_pair(dx, dy, texture, seed=3)
    flow = block_matching(ref, tgt)
    inner = (slice(8, -8), slice(8, -8))
    if texture == "checker" and (dx, dy) != (0, 0):
        # periodic textures alias; still every interior block must warp exactly
        np.testing.assert_array_equal(warp(ref, flow)[:, 8:-8, 8:-8], tgt[:, 8:-8, 8:-8])
        return
    assert np.all(flow[0][inner] == dx) and np.all(flow[1][inner] == dy)


def test_block_matching_tie_prefers_small_then_raster():
    x = np.arange(32)
    ref = np.broadcast_to((x % 2).astype(float), (1, 32, 32)).copy()
    tgt = 1.0 - ref
    flow = block_matching(ref, tgt, block=8, radius=4)
    # dx = +-1, +-3 all match exactly and any dy ties; the smallest is (+-1, 0) and raster order picks -1
    assert np.all(flow[0, :, 8:-8] == -1) and np.all(flow[1, :, 8:-8] == 0)


def test_block_matching_ragged_frame():
    ref, tgt, _ = shifted_pair(2, 1, size=64)
    flow = block_matching(ref[:, :44, :36], tgt[:, :44, :36])
    assert flow.shape == (2, 44, 36)
    assert np.all(flow[0, 8:-8, 8:-8] == 2)


def test_oracle_backend_passthrough():
    seq = generate_synthetic(SyntheticSceneConfig(motion="per_object_translate", seed=1))
    flow = estimate_flow(seq.frames[0], seq.frames[1], "oracle", seq.flows[0])
    assert np.array_equal(flow, seq.flows[0])


def test_estimate_flow_errors():
    img = np.zeros((3, 8, 8))
    with pytest.raises(AlignmentError, match="ground-truth"):
        estimate_flow(img, img, "oracle")
    with pytest.raises(AlignmentError):
        estimate_flow(img, img, "raft")
    with pytest.raises(AlignmentError):
        estimate_flow(img, np.zeros((3, 8, 16)))


# ---------------------------------------------------------------------------
# flow upscaling


def test_upscale_zero_and_constant():
    assert not upscale_flow(np.zeros((2, 4, 5), np.float32), 4).any()
    assert upscale_flow(np.zeros((2, 4, 5), np.float32), 4).shape == (2, 16, 20)
    flow = np.zeros((2, 4, 4), np.float32)
    flow[0] = 1
    up = upscale_flow(flow, 4)
    assert np.all(up[0] == 4) and np.all(up[1] == 0)


@pytest.mark.parametrize("factor", [2, 4])
def test_upscale_ramp_matches_bilinear_oracle(factor):
    yy, xx = np.mgrid[0:5, 0:6]
    flow = np.stack([0.5 * xx - 1.0, 0.25 * yy + 0.1 * xx]).astype(np.float64)
    up = upscale_flow(flow, factor)
    for c in range(2):
        np.testing.assert_allclose(up[c], factor * bilinear_upscale_oracle(flow[c], factor), atol=1e-12)


def test_upscale_rejects_bad_factor():
    for f in (0, -4):
        with pytest.raises(AlignmentError):
            upscale_flow(np.zeros((2, 4, 4)), f)


def test_upscale_torch_batched():
    flow = torch.randn(3, 2, 4, 4)
    up = upscale_flow(flow, 4)
    assert isinstance(up, torch.Tensor) and up.shape == (3, 2, 16, 16)
    torch.testing.assert_close(up[1], upscale_flow(flow[1], 4))


# ---------------------------------------------------------------------------
# warping


@settings(max_examples=30, deadline=None)
@given(c=st.integers(1, 48), h=st.integers(1, 20), w=st.integers(1, 20), seed=st.integers(0, 2**16))
def test_zero_flow_warp_is_identity(c, h, w, seed):
    img = np.random.default_rng(seed).normal(size=(c, h, w)).astype(np.float32)
    assert np.array_equal(warp(img, np.zeros((2, h, w), np.float32)), img)


def test_integer_flow_is_a_gather():
    img = np.tile(np.arange(10, dtype=np.float32), (2, 6, 1))
    flow = np.zeros((2, 6, 10), np.float32)
    flow[0] = 1
    out = warp(img, flow)
    assert np.array_equal(out[:, :, :-1], img[:, :, 1:])
    assert np.array_equal(out[:, :, -1], img[:, :, -1])  # border replicated
    flow[0], flow[1] = 0, -2
    out = warp(img + np.arange(6, dtype=np.float32)[:, None], flow)
    assert np.array_equal(out[:, 2:], (img + np.arange(6, dtype=np.float32)[:, None])[:, :-2])


def test_fractional_flow_interpolates():
    img = np.tile(np.arange(8, dtype=np.float64) ** 2, (1, 4, 1))
    flow = np.zeros((2, 4, 8))
    flow[0] = 0.25
    out = warp(img, flow)
    expected = 0.75 * img[..., :-1] + 0.25 * img[..., 1:]
    np.testing.assert_allclose(out[..., :-1], expected, rtol=1e-14)


def test_warp_torch_shared_flow_and_errors():
    x = torch.randn(2, 4, 3, 8, 8)
    flow = torch.full((2, 8, 8), 0.5)
    out = warp(x, flow)
    assert out.shape == x.shape
    torch.testing.assert_close(out[1, 2], warp(x[1, 2], flow))
    with pytest.raises(AlignmentError):
        warp(np.zeros((3, 8, 8)), np.zeros((2, 8, 4)))
    with pytest.raises(AlignmentError):
        warp(np.zeros((3, 8, 8)), np.zeros((3, 8, 8)))


@pytest.mark.parametrize("velocity", [(3, -2), (-4, 1), (1, 1)])
def test_oracle_warp_reproduces_next_frame(velocity):
    seq = generate_synthetic(SyntheticSceneConfig(texture="gradient_shapes", velocity=velocity, seed=5))
    m = max(map(abs, velocity))
    for i in range(1, len(seq)):
        out = warp(seq.frames[i - 1], seq.flows[i - 1])
        assert np.abs(out - seq.frames[i])[:, m:-m, m:-m].mean() < 1e-3


# ---------------------------------------------------------------------------
# guidance


def latent_pair(velocity, t=400, seed=0):
    seq = generate_synthetic(SyntheticSceneConfig(texture="gradient_shapes", velocity=velocity, num_frames=2, seed=seed))
    hr = torch.from_numpy(seq.frames).float()
    x0 = S2D.encode(hr[0] * 2 - 1)
    eps = torch.from_numpy(np.random.default_rng(seed).normal(size=x0.shape)).float()
    x_t = forward_diffuse(x0, t, eps, SCHED)
    lr = degrade(seq.frames)
    lr_flow = downscale_flow(seq.flows[0], 4)
    return seq, lr, lr_flow, x0, eps, x_t


def test_guidance_zero_motion_true_noise():
    _, lr, _, x0, eps, x_t = latent_pair((0, 0))
    g = compute_guidance(lr[0], lr[1], x_t, eps, 400, S2D, SCHED, backend="block_matching")
    assert g.shape == (3, 64, 64)
    torch.testing.assert_close(g, S2D.decode(x0), atol=1e-5, rtol=0)
    # bit-exact against the projection itself
    assert torch.equal(g, S2D.decode(project_x0(x_t, 400, eps, SCHED)))


def test_guidance_equals_manual_composition():
    _, lr, lr_flow, _, eps, x_t = latent_pair((3, -2))
    noisy_eps = eps + 0.3 * torch.randn_like(eps)
    g = compute_guidance(lr[0], lr[1], x_t, noisy_eps, 250, S2D, SCHED, backend="oracle", gt_flow=lr_flow)
    manual = warp(
        S2D.decode(project_x0(x_t, 250, noisy_eps, SCHED)),
        upscale_flow(torch.from_numpy(lr_flow).float(), 4),
    )
    assert torch.equal(g, manual)


@pytest.mark.parametrize("t", [1, 200, 999])
def test_perfect_noise_guidance_is_warped_previous_frame(t):
    seq, lr, lr_flow, x0, eps, _ = latent_pair((3, -2), t=t)
    x_t = forward_diffuse(x0, t, eps, SCHED)
    g = compute_guidance(lr[0], lr[1], x_t, eps, t, S2D, SCHED, backend="oracle", gt_flow=lr_flow)
    target = seq.frames[1] * 2 - 1
    assert np.abs(g.numpy() - target)[:, 3:-3, 3:-3].mean() < 1e-3


@pytest.mark.parametrize("velocity", [(3, -2), (4, 0), (-1, 2)])
def test_warp_order_matters(velocity):
    _, _, lr_flow, _, eps, x_t = latent_pair(velocity)
    flow = torch.from_numpy(lr_flow).float()
    proposed = guidance_from_latent(x_t, eps, 400, flow, S2D, SCHED, "proposed")
    latent_first = guidance_from_latent(x_t, eps, 400, flow, S2D, SCHED, "no_latent_to_rgb")
    assert torch.sum((proposed - latent_first) ** 2) > 0


def test_guidance_modes_shapes_and_sources():
    _, _, lr_flow, _, eps, x_t = latent_pair((2, 2))
    flow = torch.from_numpy(lr_flow).float()
    for mode in ("proposed", "x_t", "no_motion_comp", "no_latent_to_rgb"):
        assert guidance_from_latent(x_t, eps, 400, flow, S2D, SCHED, mode).shape == (3, 64, 64)
    assert torch.equal(guidance_from_latent(x_t, eps, 400, flow, S2D, SCHED, "x_t"), warp(S2D.decode(x_t), upscale_flow(flow, 4)))
    nm = guidance_from_latent(x_t, eps, 400, flow, S2D, SCHED, "no_motion_comp")
    assert torch.equal(nm, S2D.decode(project_x0(x_t, 400, eps, SCHED)))
    with pytest.raises(AlignmentError):
        guidance_from_latent(x_t, eps, 400, flow, S2D, SCHED, "rgb_first")


def test_pixel_codec_guidance_shape():
    pix = LatentCodec("pixel")
    x = torch.randn(3, 64, 64)
    g = guidance_from_latent(x, torch.zeros_like(x), 10, torch.ones(2, 16, 16), pix, SCHED)
    assert g.shape == (3, 64, 64)


# ---------------------------------------------------------------------------
# flow cache


def test_flow_cache_memory(monkeypatch):
    monkeypatch.delenv("STABLEVSR_CACHE", raising=False)
    ref, tgt, _ = shifted_pair(1, 1, size=32)
    cache = FlowCache()
    a = cache.get(("s", 0, 1), ref, tgt, "block_matching")
    b = cache.get(("s", 0, 1), np.zeros_like(ref), tgt, "block_matching")
    assert a is b and len(cache) == 1
    cache.get(None, ref, tgt, "block_matching")
    assert len(cache) == 1


def test_flow_cache_disk_roundtrip(tmp_path, monkeypatch):
    monkeypatch.setenv("STABLEVSR_CACHE", str(tmp_path))
    ref, tgt, _ = shifted_pair(-2, 3, size=32)
    first = FlowCache().get("k", ref, tgt, "block_matching")
    assert len(list(tmp_path.glob("*.flw"))) == 1
    second = FlowCache().get("k", ref, tgt, "block_matching")
    assert np.array_equal(first, second)
    assert np.all(second[0, 8:-8, 8:-8] == -2)
