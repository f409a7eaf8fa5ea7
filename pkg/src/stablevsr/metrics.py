"""Reconstruction and temporal-consistency metrics.

tLP uses a pluggable frame distance. The default is a fixed Laplacian-pyramid
L1 distance, a non-learned stand-in for LPIPS; values are therefore only
comparable with each other, never with published LPIPS-based tLP numbers.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.ndimage import gaussian_filter

from .alignment import block_matching
from .dataio import VideoSequence

PSNR_SENTINEL = 100.0
REC601 = np.array([0.299, 0.587, 0.114])


class MetricError(ValueError):
    pass


def _same_shape(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(ref, out, peak: float = 1.0) -> float:
    """PSNR in dB; identical inputs give the 100 dB sentinel."""
    a, b = _same_shape(ref, out)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return PSNR_SENTINEL
    return min(PSNR_SENTINEL, 10.0 * np.log10(peak**2 / mse))


def luminance(frame: np.ndarray) -> np.ndarray:
    frame = np.asarray(frame, dtype=np.float64)
    if frame.ndim == 2:
        return frame
    if frame.shape[0] == 3:
        return np.tensordot(REC601, frame, axes=1)
    if frame.shape[0] == 1:
        return frame[0]
    raise MetricError(f"expected (3, H, W), (1, H, W) or (H, W), got {frame.shape}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-(x**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def _filter_valid(img: np.ndarray, win: np.ndarray) -> np.ndarray:
    return np.einsum("ijkl,kl->ij", sliding_window_view(img, win.shape), win)


def ssim(ref, out, peak: float = 1.0, win_size: int = 11, sigma: float = 1.5, k1: float = 0.01, k2: float = 0.03) -> float:
    """Mean local SSIM on Rec.601 luminance, Gaussian window, valid region."""
    a, b = _same_shape(ref, out)
    x, y = luminance(a), luminance(b)
    if min(x.shape) < win_size:
        raise MetricError(f"frame {x.shape} smaller than the {win_size}x{win_size} SSIM window")
    win = gaussian_window(win_size, sigma)
    c1, c2 = (k1 * peak) ** 2, (k2 * peak) ** 2
    mx, my = _filter_valid(x, win), _filter_valid(y, win)
    sxx = _filter_valid(x * x, win) - mx * mx
    syy = _filter_valid(y * y, win) - my * my
    sxy = _filter_valid(x * y, win) - mx * my
    smap = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
    return float(smap.mean())


# ---------------------------------------------------------------------------
# temporal metrics

FlowFn = Callable[[np.ndarray, np.ndarray], np.ndarray]
DistanceFn = Callable[[np.ndarray, np.ndarray], float]


def make_flow_fn(backend: str | FlowFn = "block_matching", block: int = 8, radius: int = 8) -> FlowFn:
    if callable(backend):
        return backend
    if backend == "block_matching":
        return lambda a, b: block_matching(a, b, block, radius)
    raise MetricError(
        f"flow backend {backend!r} cannot be used for tOF; output frames have no ground-truth flow"
    )


def _check_pair(ref_seq, out_seq):
    ref = ref_seq.frames if isinstance(ref_seq, VideoSequence) else np.asarray(ref_seq)
    out = out_seq.frames if isinstance(out_seq, VideoSequence) else np.asarray(out_seq)
    if len(ref) != len(out):
        raise MetricError(f"sequence lengths differ: {len(ref)} vs {len(out)}")
    if len(ref) < 2:
        raise MetricError("temporal metrics need at least two frames")
    if ref.shape != out.shape:
        raise MetricError(f"sequence shapes differ: {ref.shape} vs {out.shape}")
    return ref, out


def tof_pairs(ref_seq, out_seq, flow_backend: str | FlowFn = "block_matching", **kw) -> list[float]:
    ref, out = _check_pair(ref_seq, out_seq)
    flow = make_flow_fn(flow_backend, **kw)
    vals = []
    for i in range(1, len(ref)):
        fr = flow(ref[i - 1], ref[i])
        fo = flow(out[i - 1], out[i])
        vals.append(float(np.mean(np.abs(np.asarray(fr, np.float64) - np.asarray(fo, np.float64)))))
    return vals


def tof(ref_seq, out_seq, flow_backend: str | FlowFn = "block_matching", **kw) -> float:
    """Mean absolute difference between reference and output flows of consecutive frames."""
    return float(np.mean(tof_pairs(ref_seq, out_seq, flow_backend, **kw)))


def laplacian_pyramid_l1(a: np.ndarray, b: np.ndarray, levels: int = 4, sigma: float = 1.0) -> float:
    """Mean L1 distance between Laplacian-pyramid bands (plus low-pass residual)."""
    a, b = _same_shape(a, b)
    total = 0.0
    for _ in range(levels):
        ga = gaussian_filter(a, sigma=(0, sigma, sigma), mode="nearest")
        gb = gaussian_filter(b, sigma=(0, sigma, sigma), mode="nearest")
        total += float(np.mean(np.abs((a - ga) - (b - gb))))
        a, b = ga[:, ::2, ::2], gb[:, ::2, ::2]
        if min(a.shape[-2:]) < 2:
            break
    total += float(np.mean(np.abs(a - b)))
    return total


def mse_distance(a: np.ndarray, b: np.ndarray) -> float:
    a, b = _same_shape(a, b)
    return float(np.mean((a - b) ** 2))


DISTANCES: dict[str, DistanceFn] = {"laplacian_pyramid_l1": laplacian_pyramid_l1, "mse": mse_distance}


def tlp_pairs(ref_seq, out_seq, distance: DistanceFn | str = "laplacian_pyramid_l1") -> list[float]:
    ref, out = _check_pair(ref_seq, out_seq)
    d = DISTANCES[distance] if isinstance(distance, str) else distance
    return [
        100.0 * abs(d(ref[i], ref[i - 1]) - d(out[i], out[i - 1]))
        for i in range(1, len(ref))
    ]


def tlp(ref_seq, out_seq, distance: DistanceFn | str = "laplacian_pyramid_l1") -> float:
    """x100-scaled mean gap between reference and output consecutive-frame distances."""
    return float(np.mean(tlp_pairs(ref_seq, out_seq, distance)))


def temporal_profile(seq, row: int) -> np.ndarray:
    """Row ``row`` of every frame stacked over time: (3, N, W)."""
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq)
    H = frames.shape[-2]
    if not 0 <= row < H:
        raise MetricError(f"row {row} outside [0, {H})")
    return np.ascontiguousarray(frames[:, :, row, :].transpose(1, 0, 2))


# ---------------------------------------------------------------------------
# reports


@dataclass
class MetricReport:
    per_frame: dict[str, list[float]] = field(default_factory=dict)
    means: dict[str, float] = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def add(self, name: str, values: list[float]) -> None:
        self.per_frame.setdefault(name, []).extend(float(v) for v in values)
        self.means[name] = float(np.mean(self.per_frame[name]))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_json())


def evaluate_sequences(
    refs: list,
    outs: list,
    flow_backend: str | FlowFn = "block_matching",
    distance: str = "laplacian_pyramid_l1",
    tof_block: int = 8,
    tof_radius: int = 8,
) -> MetricReport:
    """PSNR/SSIM per frame and tLP/tOF per frame pair, pooled over all sequences."""
    if len(refs) != len(outs):
        raise MetricError(f"{len(refs)} reference sequences but {len(outs)} outputs")
    report = MetricReport(
        metadata={
            "flow_backend": flow_backend if isinstance(flow_backend, str) else getattr(flow_backend, "__name__", "custom"),
            "tlp_distance": distance,
            "tlp_distance_note": "non-learned surrogate; not comparable to LPIPS-based tLP",
            "tof_block": tof_block,
            "tof_radius": tof_radius,
            "num_sequences": len(refs),
        }
    )
    for ref, out in zip(refs, outs):
        ref_f = ref.frames if isinstance(ref, VideoSequence) else np.asarray(ref)
        out_f = out.frames if isinstance(out, VideoSequence) else np.asarray(out)
        report.add("psnr", [psnr(a, b) for a, b in zip(ref_f, out_f)])
        report.add("ssim", [ssim(a, b) for a, b in zip(ref_f, out_f)])
        if len(ref_f) >= 2:
            report.add("tlp", tlp_pairs(ref_f, out_f, distance))
            report.add("tof", tof_pairs(ref_f, out_f, flow_backend, block=tof_block, radius=tof_radius))
    return report
