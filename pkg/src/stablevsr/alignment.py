"""Motion estimation, backward warping and Temporal Texture Guidance.

Flows are backward fields: ``warp(img, flow)(p) = img(p + flow(p))``; a flow
estimated from ``ref`` to ``tgt`` satisfies ``warp(ref, flow) ~= tgt``.
Channel 0 is the horizontal component ``u``, channel 1 the vertical ``v``.
"""

from __future__ import annotations

import hashlib
import os
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .codec import LatentCodec
from .dataio import read_flow, write_flow
from .schedule import NoiseSchedule, project_x0

FLOW_BACKENDS = ("oracle", "block_matching")
GUIDANCE_MODES = ("proposed", "x_t", "no_motion_comp", "no_latent_to_rgb")


class AlignmentError(ValueError):
    pass


def _as_tensor(x):
    if isinstance(x, np.ndarray):
        return torch.from_numpy(np.ascontiguousarray(x)), True
    return x, False


# ---------------------------------------------------------------------------
# motion estimation


def _displacements(radius: int) -> list[tuple[int, int]]:
    """All (dx, dy) in the search window, smallest magnitude first, then raster order."""
    cand = [(dx, dy) for dy in range(-radius, radius + 1) for dx in range(-radius, radius + 1)]
    return sorted(cand, key=lambda d: (d[0] ** 2 + d[1] ** 2, d[1], d[0]))


def block_matching(ref: np.ndarray, tgt: np.ndarray, block: int = 8, radius: int = 4) -> np.ndarray:
    """Exhaustive integer block search; returns a per-pixel (2, H, W) flow.

    For every ``block x block`` tile of ``tgt`` the displacement ``d`` minimising
    the SAD between the tile and ``ref`` sampled at ``p + d`` (border
    replicated) is chosen.
    """
    ref = np.asarray(ref, dtype=np.float64)
    tgt = np.asarray(tgt, dtype=np.float64)
    if ref.shape != tgt.shape:
        raise AlignmentError(f"frame shapes differ: {ref.shape} vs {tgt.shape}")
    if ref.ndim == 2:
        ref, tgt = ref[None], tgt[None]
    _, H, W = ref.shape
    nby, nbx = -(-H // block), -(-W // block)
    padded = np.pad(ref, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    by = np.arange(H) // block
    bx = np.arange(W) // block
    best = np.full((nby, nbx), np.inf)
    best_d = np.zeros((nby, nbx, 2))
    # ragged edge tiles: zero-pad the error map up to whole tiles
    err = np.zeros((nby * block, nbx * block))
    for dx, dy in _displacements(radius):
        shifted = padded[:, radius + dy : radius + dy + H, radius + dx : radius + dx + W]
        err[:H, :W] = np.abs(tgt - shifted).sum(axis=0)
        sad = err.reshape(nby, block, nbx, block).sum(axis=(1, 3))
        better = sad < best
        best[better] = sad[better]
        best_d[better] = (dx, dy)
    flow = best_d[by[:, None], bx[None, :]]  # (H, W, 2)
    return flow.transpose(2, 0, 1).astype(np.float32)


def estimate_flow(
    ref: np.ndarray,
    tgt: np.ndarray,
    backend: str = "block_matching",
    gt_flow: np.ndarray | None = None,
    block: int = 8,
    radius: int = 4,
) -> np.ndarray:
    if backend == "oracle":
        if gt_flow is None:
            raise AlignmentError("oracle flow backend needs ground-truth flow, but none is available")
        return np.asarray(gt_flow, dtype=np.float32)
    if backend == "block_matching":
        return block_matching(ref, tgt, block, radius)
    raise AlignmentError(f"unknown flow backend {backend!r}; expected one of {FLOW_BACKENDS}")


class FlowCache:
    """Flow per (sequence, src, dst) pair, optionally persisted to ``directory``.

    The on-disk cache is keyed on frame content, so it survives across runs;
    ``STABLEVSR_CACHE`` supplies the default directory.
    """

    def __init__(self, directory: str | Path | None = None):
        if directory is None:
            directory = os.environ.get("STABLEVSR_CACHE") or None
        self.directory = Path(directory) if directory else None
        self._mem: dict = {}

    def get(self, key, ref, tgt, backend, gt_flow=None, block=8, radius=4) -> np.ndarray:
        if key is not None and key in self._mem:
            return self._mem[key]
        path = None
        if self.directory is not None and backend != "oracle":
            h = hashlib.sha256()
            h.update(f"{backend}:{block}:{radius}:{ref.shape}".encode())
            h.update(np.ascontiguousarray(ref, dtype=np.float32).tobytes())
            h.update(np.ascontiguousarray(tgt, dtype=np.float32).tobytes())
            path = self.directory / f"{h.hexdigest()}.flw"
            if path.exists():
                flow = read_flow(path)[0]
                if key is not None:
                    self._mem[key] = flow
                return flow
        flow = estimate_flow(ref, tgt, backend, gt_flow, block, radius)
        if path is not None:
            self.directory.mkdir(parents=True, exist_ok=True)
            write_flow(path, flow, "LR")
        if key is not None:
            self._mem[key] = flow
        return flow

    def __len__(self) -> int:
        return len(self._mem)


# ---------------------------------------------------------------------------
# motion compensation


def upscale_flow(flow, factor: int):
    """Bilinear (half-pixel) upsampling of ``(..., 2, h, w)`` with magnitudes scaled."""
    if factor <= 0:
        raise AlignmentError(f"flow upscale factor must be positive, got {factor}")
    t, was_np = _as_tensor(flow)
    if factor == 1:
        out = t.clone()
    else:
        lead = t.shape[:-3]
        flat = t.reshape(-1, *t.shape[-3:])
        out = F.interpolate(flat, scale_factor=factor, mode="bilinear", align_corners=False) * factor
        out = out.reshape(*lead, *out.shape[-3:])
    return out.numpy() if was_np else out


def warp(img, flow):
    """Backward bilinear warp with border replication.

    ``img``: (..., C, H, W); ``flow``: (..., 2, H, W) with matching leading dims
    (or none, to share one flow across a batch).
    """
    x, was_np = _as_tensor(img)
    f, _ = _as_tensor(flow)
    H, W = x.shape[-2:]
    if tuple(f.shape[-2:]) != (H, W) or f.shape[-3] != 2:
        raise AlignmentError(f"flow shape {tuple(f.shape)} does not match image size {H}x{W}")
    f = f.to(x.dtype)
    lead = x.shape[:-3]
    C = x.shape[-3]
    xb = x.reshape(-1, C, H * W)
    fb = f.expand(*lead, 2, H, W).reshape(-1, 2, H, W)
    ys = torch.arange(H, dtype=x.dtype).view(1, H, 1)
    xs = torch.arange(W, dtype=x.dtype).view(1, 1, W)
    sx = (xs + fb[:, 0]).clamp(0, W - 1)
    sy = (ys + fb[:, 1]).clamp(0, H - 1)
    x0 = sx.floor()
    y0 = sy.floor()
    wx = (sx - x0).unsqueeze(1)
    wy = (sy - y0).unsqueeze(1)
    x0 = x0.long()
    y0 = y0.long()
    x1 = (x0 + 1).clamp(max=W - 1)
    y1 = (y0 + 1).clamp(max=H - 1)

    def gather(yi, xi):
        idx = (yi * W + xi).reshape(xb.shape[0], 1, H * W).expand(-1, C, -1)
        return xb.gather(2, idx).reshape(-1, C, H, W)

    top = (1 - wx) * gather(y0, x0) + wx * gather(y0, x1)
    bot = (1 - wx) * gather(y1, x0) + wx * gather(y1, x1)
    out = ((1 - wy) * top + wy * bot).reshape(*lead, C, H, W)
    return out.numpy() if was_np else out


# ---------------------------------------------------------------------------
# Temporal Texture Guidance


def guidance_from_latent(
    x_prev_t: torch.Tensor,
    eps_hat_prev: torch.Tensor,
    t: int,
    lr_flow: torch.Tensor,
    codec: LatentCodec,
    sched: NoiseSchedule,
    mode: str = "proposed",
) -> torch.Tensor:
    """HR guidance frame from an adjacent frame's noisy latent and noise estimate.

    ``lr_flow`` is the (cached) flow from the adjacent LR frame to the current
    one. ``mode`` selects the proposed pipeline (project, decode, warp) or one
    of the ablated variants.
    """
    if mode not in GUIDANCE_MODES:
        raise AlignmentError(f"unknown guidance mode {mode!r}; expected one of {GUIDANCE_MODES}")
    lr_h = lr_flow.shape[-2]
    hr_h = x_prev_t.shape[-2] * codec.scale
    if mode == "x_t":
        source = x_prev_t
    else:
        source = project_x0(x_prev_t, t, eps_hat_prev, sched)
    if mode == "no_motion_comp":
        return codec.decode(source)
    if mode == "no_latent_to_rgb":
        latent_flow = upscale_flow(lr_flow, x_prev_t.shape[-2] // lr_h)
        return codec.decode(warp(source, latent_flow))
    return warp(codec.decode(source), upscale_flow(lr_flow, hr_h // lr_h))


def compute_guidance(
    lr_prev: np.ndarray,
    lr_cur: np.ndarray,
    x_prev_t: torch.Tensor,
    eps_hat_prev: torch.Tensor,
    t: int,
    codec: LatentCodec,
    sched: NoiseSchedule,
    backend: str = "block_matching",
    flow_cache: FlowCache | None = None,
    key=None,
    gt_flow: np.ndarray | None = None,
    mode: str = "proposed",
) -> torch.Tensor:
    """Estimate LR motion (cached per pair), then build the guidance frame."""
    if flow_cache is None:
        flow = estimate_flow(lr_prev, lr_cur, backend, gt_flow)
    else:
        flow = flow_cache.get(key, lr_prev, lr_cur, backend, gt_flow)
    flow_t = torch.from_numpy(np.ascontiguousarray(flow)).to(x_prev_t.dtype)
    return guidance_from_latent(x_prev_t, eps_hat_prev, t, flow_t, codec, sched, mode)
