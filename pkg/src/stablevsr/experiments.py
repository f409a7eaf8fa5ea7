"""Experiment drivers shared by the CLI and the acceptance suite.

Everything here is deterministic given a RunConfig: no timestamps, stable key order,
and plot files written without creator metadata.
"""

from __future__ import annotations

import csv
import hashlib
import json
from pathlib import Path

import numpy as np

from .config import RunConfig
from .dataio import SequencePair, VideoSequence, generate_dataset, load_dataset, quantize
from .denoiser import Denoiser
from .metrics import MetricReport, evaluate_sequences, temporal_profile
from .sampler import STRATEGIES, sample_batch
from .schedule import build_schedule
from .training import pretrain_base, train_tcm

ABLATION_VARIANTS = ("proposed", "x_t", "no_motion_comp", "no_latent_to_rgb")
TABLE_METRICS = ("tlp", "tof", "psnr", "ssim")


# ---------------------------------------------------------------------------
# checksums and manifests


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def tree_checksums(root: str | Path, exclude: tuple[str, ...] = ()) -> dict[str, str]:
    root = Path(root)
    if root.is_file():
        return {root.name: file_sha256(root)}
    return {
        p.relative_to(root).as_posix(): file_sha256(p)
        for p in sorted(root.rglob("*"))
        if p.is_file() and p.relative_to(root).as_posix() not in exclude
    }


def tree_digest(root: str | Path) -> str:
    """One digest over relative paths and file contents."""
    h = hashlib.sha256()
    for rel, digest in tree_checksums(root).items():
        h.update(f"{rel}\0{digest}\n".encode())
    return h.hexdigest()


def write_manifest(out: Path, command: str, cfg: RunConfig, inputs: dict[str, str | Path | None]) -> Path:
    """``run.json``: command, resolved config, input digests and output checksums."""
    manifest = {
        "schema_version": 1,
        "command": command,
        "seed": cfg.seed,
        "config": cfg.to_dict(),
        "inputs": {k: {"path": str(v), "sha256": tree_digest(v)} for k, v in sorted(inputs.items()) if v is not None},
        "outputs": tree_checksums(out, exclude=("run.json",)),
    }
    path = out / "run.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def write_json(path: Path, obj, sort_keys: bool = True) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=sort_keys) + "\n")


# ---------------------------------------------------------------------------
# data and training


def get_splits(cfg: RunConfig, data: str | Path | None = None) -> dict[str, list[SequencePair]]:
    """Load a dataset directory, or regenerate the configured synthetic one."""
    if data is not None:
        return load_dataset(data)[0]
    return generate_dataset(cfg.data)


def write_train_log(path: Path, log: list[dict]) -> None:
    cols = ["step", "loss", "lr_rate"] + (["wall_time"] if log and "wall_time" in log[0] else [])
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=cols, lineterminator="\n")
        w.writeheader()
        for row in log:
            w.writerow({k: repr(float(row[k])) if k != "step" else row[k] for k in cols})


def run_pretrain(cfg: RunConfig, pairs: list[SequencePair]) -> tuple[Denoiser, list[dict]]:
    return pretrain_base(pairs, cfg.train_config("base"), cfg.denoiser_config())


def run_train_tcm(cfg: RunConfig, pairs: list[SequencePair], base: Denoiser, guidance_mode: str | None = None):
    return train_tcm(pairs, base, cfg.train_config("tcm", guidance_mode))


# ---------------------------------------------------------------------------
# sampling and evaluation


def upscale(model: Denoiser, lr_seqs: list[VideoSequence], cfg: RunConfig, **overrides):
    """Quantised HR frames ``(B, N, 3, H, W)`` and the sampling trace."""
    sched = build_schedule(cfg.schedule.T, cfg.schedule.beta_start, cfg.schedule.beta_end, cfg.schedule.sigma_mode)
    hr, trace = sample_batch(lr_seqs, model, sched, cfg.sampler_config(**overrides))
    return quantize(hr), trace


def evaluate(cfg: RunConfig, refs: list, outs: list) -> MetricReport:
    return evaluate_sequences(
        refs,
        outs,
        flow_backend="block_matching",
        distance=cfg.eval.distance,
        tof_block=cfg.eval.tof_block,
        tof_radius=cfg.eval.tof_radius,
    )


def _rows(results: dict[str, dict[int, dict]]) -> dict:
    """Per-seed means plus a seed-averaged row for every variant."""
    table = {}
    for name, per_seed in results.items():
        mean = {m: float(np.mean([per_seed[s][m] for s in per_seed])) for m in TABLE_METRICS}
        table[name] = {"per_seed": {str(s): v for s, v in per_seed.items()}, "mean": mean}
    return table


def ablate_sampling(model: Denoiser, test: list[SequencePair], cfg: RunConfig, strategies=STRATEGIES) -> dict:
    lr = [p.lr for p in test]
    refs = [p.hr for p in test]
    results: dict[str, dict[int, dict]] = {s: {} for s in strategies}
    for seed in cfg.sample.ablation_seeds:
        for strategy in strategies:
            hr, _ = upscale(model, lr, cfg, strategy=strategy, seed=seed)
            results[strategy][seed] = evaluate(cfg, refs, list(hr)).means
    return _rows(results)


def ablate_guidance(
    base: Denoiser,
    train: list[SequencePair],
    test: list[SequencePair],
    cfg: RunConfig,
    variants=ABLATION_VARIANTS,
    trained: dict | None = None,
):
    """Train one TCM per guidance variant and sample each bidirectionally.

    ``trained`` maps variants to already trained ``(model, log)`` pairs.
    """
    lr = [p.lr for p in test]
    refs = [p.hr for p in test]
    results: dict[str, dict[int, dict]] = {}
    models = {}
    for variant in variants:
        if trained and variant in trained:
            model, log = trained[variant]
        else:
            model, log = run_train_tcm(cfg, train, base, guidance_mode=variant)
        models[variant] = (model, log)
        results[variant] = {}
        for seed in cfg.sample.ablation_seeds:
            hr, _ = upscale(model, lr, cfg, strategy="bidirectional", guidance_mode=variant, seed=seed)
            results[variant][seed] = evaluate(cfg, refs, list(hr)).means
    return _rows(results), models


def sweep_steps(model: Denoiser, test: list[SequencePair], cfg: RunConfig) -> dict:
    lr = [p.lr for p in test]
    refs = [p.hr for p in test]
    series: dict[str, list[float]] = {m: [] for m in TABLE_METRICS}
    for steps in cfg.sample.sweep_steps:
        hr, _ = upscale(model, lr, cfg, T_inference=steps)
        means = evaluate(cfg, refs, list(hr)).means
        for m in TABLE_METRICS:
            series[m].append(means[m])
    return {"steps": list(cfg.sample.sweep_steps), "strategy": cfg.sample.strategy, "series": series}


def markdown_table(table: dict, label: str) -> str:
    names = {"tlp": "tLP", "tof": "tOF", "psnr": "PSNR", "ssim": "SSIM"}
    lines = [f"| {label} | " + " | ".join(names[m] for m in TABLE_METRICS) + " |", "|" + "---|" * (len(TABLE_METRICS) + 1)]
    for name, row in table.items():
        lines.append(f"| {name} | " + " | ".join(f"{row['mean'][m]:.4f}" for m in TABLE_METRICS) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# plots


def _pyplot():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


def save_figure(fig, path: Path) -> None:
    # no creator or date metadata, so reruns are byte-identical
    fig.savefig(path, format="png", dpi=100, metadata={"Software": None})
    _pyplot().close(fig)


def plot_loss(path: Path, log: list[dict], title: str) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3))
    ax.plot([r["step"] for r in log], [r["loss"] for r in log], lw=0.8)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_yscale("log")
    ax.set_title(title)
    fig.tight_layout()
    save_figure(fig, path)


def plot_sweep(path: Path, sweep: dict) -> None:
    plt = _pyplot()
    fig, axes = plt.subplots(1, len(TABLE_METRICS), figsize=(3 * len(TABLE_METRICS), 3))
    for ax, m in zip(axes, TABLE_METRICS):
        ax.plot(sweep["steps"], sweep["series"][m], marker="o")
        ax.set_xlabel("sampling steps")
        ax.set_title(m)
    fig.tight_layout()
    save_figure(fig, path)


def flow_to_rgb(flow: np.ndarray, max_mag: float | None = None) -> np.ndarray:
    """HSV flow colouring: hue is direction, value is magnitude. Returns uint8 (H, W, 3)."""
    from PIL import Image

    u, v = np.asarray(flow, dtype=np.float64)
    mag = np.hypot(u, v)
    scale = max_mag if max_mag else max(float(mag.max()), 1e-12)
    hue = ((np.arctan2(v, u) + np.pi) / (2 * np.pi) * 255).astype(np.uint8)
    val = (np.clip(mag / scale, 0, 1) * 255).astype(np.uint8)
    hsv = np.stack([hue, np.full_like(hue, 255), val], axis=-1)
    return np.asarray(Image.fromarray(hsv, mode="HSV").convert("RGB"))


def save_rgb(path: Path, arr: np.ndarray) -> None:
    from PIL import Image

    Image.fromarray(arr).save(path, format="PNG")


def profile_image(seq, row: int) -> np.ndarray:
    frames = seq.frames if isinstance(seq, VideoSequence) else np.asarray(seq)
    row = frames.shape[-2] // 2 if row < 0 else row
    prof = temporal_profile(frames, row)  # (3, N, W)
    return np.round(np.clip(prof, 0, 1) * 255).astype(np.uint8).transpose(1, 2, 0)
