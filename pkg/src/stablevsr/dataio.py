"""Synthetic video scenes with exact flow, bicubic degradation, and on-disk
dataset layout.

Flow convention used across the package: a flow field ``f`` between frames
``a -> b`` is a *backward* field, ``b(p) ~= a(p + f(p))``. Synthetic
velocities are expressed in the same convention, so the stored flow of a
``global_translate`` scene is the velocity itself.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy.ndimage import gaussian_filter

TEXTURES = ("checker", "noise_texture", "gradient_shapes")
MOTIONS = ("global_translate", "per_object_translate")
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")
FLOW_MAGIC = b"FLW1"


class DataError(ValueError):
    pass


@dataclass
class VideoSequence:
    """Ordered frames of one clip.

    ``frames``: (N, 3, H, W) float32 in [0, 1]. ``flows[i]`` is the backward
    flow for the pair (i -> i+1), i.e. ``frames[i+1](p) ~= frames[i](p + f)``;
    ``back_flows[i]`` is the flow for (i+1 -> i).
    """

    frames: np.ndarray
    flows: np.ndarray | None = None
    id: str = ""
    back_flows: np.ndarray | None = None

    def __post_init__(self):
        self.frames = np.asarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise DataError(f"frames must be (N, C, H, W), got shape {self.frames.shape}")
        n = len(self.frames)
        for name in ("flows", "back_flows"):
            f = getattr(self, name)
            if f is None:
                continue
            f = np.asarray(f, dtype=np.float32)
            if f.shape != (n - 1, 2, *self.frames.shape[-2:]):
                raise DataError(
                    f"{name} shape {f.shape} inconsistent with {n} frames of size {self.frames.shape[-2:]}"
                )
            setattr(self, name, f)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.frames.shape[-2:])


# ---------------------------------------------------------------------------
# bicubic resampling


def cubic_kernel(x: np.ndarray, a: float = -0.5) -> np.ndarray:
    x = np.abs(x)
    out = np.zeros_like(x, dtype=np.float64)
    m1 = x <= 1
    m2 = (x > 1) & (x < 2)
    out[m1] = (a + 2) * x[m1] ** 3 - (a + 3) * x[m1] ** 2 + 1
    out[m2] = a * x[m2] ** 3 - 5 * a * x[m2] ** 2 + 8 * a * x[m2] - 4 * a
    return out


def resize_weights(in_len: int, out_len: int) -> np.ndarray:
    """(out_len, in_len) bicubic resampling matrix.

    Half-pixel centres, kernel stretched by the downscale factor
    (antialiasing), border replication, rows normalised to sum to one.
    """
    scale = out_len / in_len
    stretch = min(scale, 1.0)
    support = 2.0 / stretch
    W = np.zeros((out_len, in_len), dtype=np.float64)
    for j in range(out_len):
        centre = (j + 0.5) / scale - 0.5
        taps = np.arange(int(np.floor(centre - support)), int(np.ceil(centre + support)) + 1)
        w = cubic_kernel((taps - centre) * stretch)
        np.add.at(W[j], np.clip(taps, 0, in_len - 1), w)
        W[j] /= W[j].sum()
    return W


def resize_bicubic(img: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Resize ``(..., H, W)`` with the separable bicubic kernel (no clipping)."""
    h, w = img.shape[-2:]
    Wy = resize_weights(h, out_h)
    Wx = resize_weights(w, out_w)
    out = np.einsum("oh,...hw,pw->...op", Wy, img.astype(np.float64), Wx)
    return out.astype(np.float32)


def degrade(hr: np.ndarray, factor: int = 4) -> np.ndarray:
    """Bicubic x``factor`` downscale, clipped to [0, 1]."""
    h, w = hr.shape[-2:]
    if h % factor or w % factor:
        raise DataError(f"frame size {h}x{w} not divisible by {factor}")
    return np.clip(resize_bicubic(hr, h // factor, w // factor), 0.0, 1.0)


def upscale_bicubic(lr: np.ndarray, factor: int = 4) -> np.ndarray:
    h, w = lr.shape[-2:]
    return resize_bicubic(lr, h * factor, w * factor)


# ---------------------------------------------------------------------------
# synthetic scenes


@dataclass
class SyntheticSceneConfig:
    height: int = 64
    width: int = 64
    num_frames: int = 8
    texture: str = "noise_texture"
    motion: str = "global_translate"
    # fixed per-frame velocity (vx, vy) in pixels; drawn from max_speed if None
    velocity: tuple[int, int] | None = None
    max_speed: int = 4
    num_objects: int = 3
    seed: int = 0


def make_texture(kind: str, h: int, w: int, rng: np.random.Generator) -> np.ndarray:
    """(3, h, w) texture in [0, 1]."""
    if kind == "checker":
        cell = int(rng.integers(2, 6))
        c0, c1 = rng.uniform(0.1, 0.9, size=(2, 3, 1, 1))
        oy, ox = rng.integers(0, cell, size=2)
        yy, xx = np.mgrid[0:h, 0:w]
        mask = (((yy + oy) // cell + (xx + ox) // cell) % 2).astype(np.float64)
        jitter = gaussian_filter(rng.normal(0, 0.08, size=(h, w)), 3.0)
        return np.clip(c0 * (1 - mask) + c1 * mask + jitter, 0, 1)
    if kind == "noise_texture":
        out = np.zeros((3, h, w))
        for sigma, amp in ((0.7, 0.6), (2.0, 1.0), (5.0, 1.5)):
            base = gaussian_filter(rng.normal(size=(h, w)), sigma, mode="wrap")
            base /= base.std() + 1e-12
            tint = rng.uniform(0.3, 1.0, size=(3, 1, 1))
            out += amp * tint * base
        lo, hi = np.percentile(out, [1, 99])
        return np.clip((out - lo) / (hi - lo + 1e-12), 0, 1)
    if kind == "gradient_shapes":
        yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
        c0, c1 = rng.uniform(0, 1, size=(2, 3, 1, 1))
        angle = rng.uniform(0, 2 * np.pi)
        ramp = np.clip(0.5 + 0.5 * (np.cos(angle) * xx + np.sin(angle) * yy), 0, 1)
        out = c0 * (1 - ramp) + c1 * ramp
        yy, xx = np.mgrid[0:h, 0:w]
        for _ in range(max(1, h * w // 120)):
            colour = rng.uniform(0, 1, size=(3, 1))
            cy, cx = rng.uniform(0, h), rng.uniform(0, w)
            r = rng.uniform(1.5, 6.0)
            if rng.random() < 0.5:
                m = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
            else:
                m = (np.abs(yy - cy) <= r) & (np.abs(xx - cx) <= r * rng.uniform(0.3, 1.5))
            out[:, m] = colour
        return out
    raise DataError(f"unknown texture {kind!r}; expected one of {TEXTURES}")


def _draw_velocity(cfg: SyntheticSceneConfig, rng: np.random.Generator) -> tuple[int, int]:
    return tuple(int(v) for v in rng.integers(-cfg.max_speed, cfg.max_speed + 1, size=2))


def _check_velocity(v, cfg: SyntheticSceneConfig) -> None:
    vx, vy = v
    if abs(vx) * (cfg.num_frames - 1) >= cfg.width or abs(vy) * (cfg.num_frames - 1) >= cfg.height:
        raise DataError(
            f"velocity {tuple(v)} over {cfg.num_frames} frames exceeds the {cfg.height}x{cfg.width} canvas"
        )


def _translated_background(tex_kind, v, cfg, rng):
    vx, vy = v
    n, H, W = cfg.num_frames, cfg.height, cfg.width
    ch, cw = H + (n - 1) * abs(vy), W + (n - 1) * abs(vx)
    tex = make_texture(tex_kind, ch, cw, rng)
    oy, ox = (n - 1) * max(-vy, 0), (n - 1) * max(-vx, 0)
    frames = np.stack(
        [tex[:, oy + k * vy : oy + k * vy + H, ox + k * vx : ox + k * vx + W] for k in range(n)]
    )
    return frames


def generate_synthetic(cfg: SyntheticSceneConfig) -> VideoSequence:
    """Textured translating scene with its exact backward flow."""
    if cfg.texture not in TEXTURES:
        raise DataError(f"unknown texture {cfg.texture!r}; expected one of {TEXTURES}")
    if cfg.motion not in MOTIONS:
        raise DataError(f"unknown motion {cfg.motion!r}; expected one of {MOTIONS}")
    if cfg.num_frames < 1:
        raise DataError("num_frames must be >= 1")
    rng = np.random.default_rng(cfg.seed)
    v = tuple(cfg.velocity) if cfg.velocity is not None else _draw_velocity(cfg, rng)
    _check_velocity(v, cfg)
    n, H, W = cfg.num_frames, cfg.height, cfg.width
    frames = _translated_background(cfg.texture, v, cfg, rng)
    flows = np.empty((n - 1, 2, H, W))
    flows[:, 0], flows[:, 1] = v
    back = -flows

    if cfg.motion == "per_object_translate":
        yy, xx = np.mgrid[0:H, 0:W]
        for _ in range(cfg.num_objects):
            vo = _draw_velocity(cfg, rng)
            _check_velocity(vo, cfg)
            oh, ow = (int(s) for s in rng.integers(max(4, H // 6), max(5, H // 2), size=2))
            sprite = make_texture(TEXTURES[int(rng.integers(len(TEXTURES)))], oh, ow, rng)
            # top-left at frame 0; content moves by -vo per frame
            py, px = int(rng.integers(0, H - oh + 1)), int(rng.integers(0, W - ow + 1))
            for k in range(n):
                ty, tx = py - k * vo[1], px - k * vo[0]
                m = (yy >= ty) & (yy < ty + oh) & (xx >= tx) & (xx < tx + ow)
                frames[k][:, m] = sprite[:, yy[m] - ty, xx[m] - tx]
                if k > 0:
                    flows[k - 1, 0][m], flows[k - 1, 1][m] = vo
                if k < n - 1:
                    back[k, 0][m], back[k, 1][m] = -vo[0], -vo[1]
    if n == 1:
        flows = back = None
    return VideoSequence(frames=frames, flows=flows, id=f"synthetic-{cfg.seed}", back_flows=back)


def downscale_flow(flow: np.ndarray, factor: int = 4) -> np.ndarray:
    """Average-pool an HR flow ``(..., 2, H, W)`` to LR and rescale magnitudes."""
    *lead, c, h, w = flow.shape
    pooled = flow.reshape(*lead, c, h // factor, factor, w // factor, factor).mean(axis=(-3, -1))
    return (pooled / factor).astype(np.float32)


def quantize(frames: np.ndarray) -> np.ndarray:
    return np.round(np.clip(frames, 0, 1) * 255.0).astype(np.float32) / 255.0


# ---------------------------------------------------------------------------
# file formats


def save_frame(path: str | Path, frame: np.ndarray) -> None:
    arr = np.round(np.clip(np.asarray(frame, dtype=np.float64), 0, 1) * 255.0).astype(np.uint8)
    Image.fromarray(np.ascontiguousarray(arr.transpose(1, 2, 0))).save(path, format="PNG")


def load_frame(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return arr.transpose(2, 0, 1).copy()


def load_sequence_folder(path: str | Path) -> VideoSequence:
    """Load lexicographically ordered image files from one directory."""
    path = Path(path)
    if not path.is_dir():
        raise DataError(f"{path}: not a directory")
    files = sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    if not files:
        raise DataError(f"{path}: no frames")
    loaded, problems = [], []
    for f in files:
        try:
            loaded.append((f.name, load_frame(f)))
        except Exception as exc:  # PIL raises a zoo of types
            problems.append(f"{f.name}: unreadable ({exc})")
    shapes = [fr.shape for _, fr in loaded]
    if shapes:
        majority = max(set(shapes), key=shapes.count)
        problems += [
            f"{name}: size {fr.shape[1]}x{fr.shape[2]} != {majority[1]}x{majority[2]}"
            for name, fr in loaded
            if fr.shape != majority
        ]
    if problems:
        raise DataError(f"{path}: {len(problems)} bad frame file(s):\n  " + "\n  ".join(problems))
    frames = [fr for _, fr in loaded]
    return VideoSequence(frames=np.stack(frames), id=path.name)


def save_sequence_folder(path: str | Path, seq: VideoSequence) -> list[Path]:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    out = []
    for i, fr in enumerate(seq.frames):
        p = path / f"{i:04d}.png"
        save_frame(p, fr)
        out.append(p)
    return out


def write_flow(path: str | Path, flow: np.ndarray, resolution: str = "HR") -> None:
    """``FLW1`` | uint32 header length | JSON header | u plane | v plane (float32 LE)."""
    flow = np.asarray(flow, dtype="<f4")
    if flow.ndim != 3 or flow.shape[0] != 2:
        raise DataError(f"flow must be (2, H, W), got {flow.shape}")
    header = json.dumps(
        {"height": flow.shape[1], "width": flow.shape[2], "resolution": resolution}, sort_keys=True
    ).encode()
    with open(path, "wb") as fh:
        fh.write(FLOW_MAGIC)
        fh.write(struct.pack("<I", len(header)))
        fh.write(header)
        fh.write(flow.tobytes(order="C"))


def read_flow(path: str | Path) -> tuple[np.ndarray, str]:
    data = Path(path).read_bytes()
    if data[:4] != FLOW_MAGIC:
        raise DataError(f"{path}: not a flow file (bad magic {data[:4]!r})")
    (n,) = struct.unpack("<I", data[4:8])
    header = json.loads(data[8 : 8 + n])
    h, w = header["height"], header["width"]
    body = np.frombuffer(data[8 + n :], dtype="<f4")
    if body.size != 2 * h * w:
        raise DataError(f"{path}: expected {2 * h * w} floats, found {body.size}")
    return body.reshape(2, h, w).astype(np.float32), header["resolution"]


# ---------------------------------------------------------------------------
# datasets


@dataclass
class DataConfig:
    path: str = ""
    num_train: int = 16
    num_test: int = 4
    num_frames: int = 8
    hr_size: int = 64
    scale: int = 4
    textures: list[str] = field(default_factory=lambda: list(TEXTURES))
    motions: list[str] = field(default_factory=lambda: list(MOTIONS))
    max_speed: int = 4
    seed: int = 0


@dataclass
class SequencePair:
    """Aligned HR/LR views of one clip; ``lr.flows`` are derived from ``hr.flows``."""

    hr: VideoSequence
    lr: VideoSequence


def make_pair(hr: VideoSequence, scale: int = 4) -> SequencePair:
    hr = VideoSequence(quantize(hr.frames), hr.flows, hr.id, hr.back_flows)
    lr = quantize(degrade(hr.frames, scale))
    return SequencePair(hr=hr, lr=_lr_view(lr, hr, scale))


def _lr_view(lr_frames: np.ndarray, hr: VideoSequence, scale: int) -> VideoSequence:
    def down(f):
        return downscale_flow(f, scale) if f is not None else None

    return VideoSequence(lr_frames, down(hr.flows), hr.id, down(hr.back_flows))


def generate_dataset(cfg: DataConfig) -> dict[str, list[SequencePair]]:
    ss = np.random.SeedSequence(cfg.seed)
    splits = {}
    for split, count in (("train", cfg.num_train), ("test", cfg.num_test)):
        pairs = []
        for k, child in enumerate(ss.spawn(count)):
            rng = np.random.default_rng(child)
            scene = SyntheticSceneConfig(
                height=cfg.hr_size,
                width=cfg.hr_size,
                num_frames=cfg.num_frames,
                texture=cfg.textures[int(rng.integers(len(cfg.textures)))],
                motion=cfg.motions[int(rng.integers(len(cfg.motions)))],
                max_speed=cfg.max_speed,
                seed=int(rng.integers(2**31)),
            )
            seq = generate_synthetic(scene)
            seq.id = f"{split}_{k:03d}"
            pairs.append(make_pair(seq, cfg.scale))
        splits[split] = pairs
    return splits


def save_dataset(root: str | Path, splits: dict[str, list[SequencePair]], cfg: DataConfig) -> Path:
    root = Path(root)
    manifest = {"schema_version": 1, "config": asdict(cfg), "splits": {}}
    for split, pairs in splits.items():
        manifest["splits"][split] = []
        for pair in pairs:
            d = root / split / pair.hr.id
            save_sequence_folder(d / "hr", pair.hr)
            save_sequence_folder(d / "lr", pair.lr)
            for sub, flows in (("flows", pair.hr.flows), ("back_flows", pair.hr.back_flows)):
                if flows is None:
                    continue
                (d / sub).mkdir(parents=True, exist_ok=True)
                for i, f in enumerate(flows):
                    write_flow(d / sub / f"{i:04d}.flw", f, "HR")
            manifest["splits"][split].append(pair.hr.id)
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return root


def load_dataset(root: str | Path) -> tuple[dict[str, list[SequencePair]], dict]:
    root = Path(root)
    mpath = root / "manifest.json"
    if not mpath.exists():
        raise DataError(f"{root}: no dataset manifest.json (run gen-data first)")
    manifest = json.loads(mpath.read_text())
    scale = manifest["config"]["scale"]
    splits = {}
    for split, ids in manifest["splits"].items():
        pairs = []
        for sid in ids:
            d = root / split / sid
            hr = load_sequence_folder(d / "hr")
            lr = load_sequence_folder(d / "lr")
            flows = _read_flow_dir(d / "flows")
            back = _read_flow_dir(d / "back_flows")
            hr = VideoSequence(hr.frames, flows, sid, back)
            pairs.append(SequencePair(hr=hr, lr=_lr_view(lr.frames, hr, scale)))
        splits[split] = pairs
    return splits, manifest


def _read_flow_dir(d: Path) -> np.ndarray | None:
    files = sorted(d.glob("*.flw")) if d.is_dir() else []
    return np.stack([read_flow(f)[0] for f in files]) if files else None
