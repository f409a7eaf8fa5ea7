"""Command-line entry point: ``stablevsr <command> --out DIR [options]``.

Every command writes its artifacts under ``--out`` together with ``run.json``
(command, resolved config, seed, input digests, output checksums).
Exit status: 0 on success, 2 for config or missing-prerequisite errors,
1 for any other contract violation.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import experiments as ex
from .alignment import AlignmentError, estimate_flow
from .codec import CodecError
from .config import ConfigError, RunConfig, load_config, section_defaults
from .dataio import (
    IMAGE_SUFFIXES,
    DataError,
    VideoSequence,
    generate_dataset,
    load_dataset,
    load_sequence_folder,
    save_dataset,
    save_sequence_folder,
)
from .denoiser import DenoiserError, load_checkpoint, save_checkpoint
from .metrics import MetricError
from .sampler import SamplerError
from .schedule import ScheduleError
from .training import TrainingError

CONTRACT_ERRORS = (
    AlignmentError, CodecError, DataError, DenoiserError, MetricError, SamplerError, ScheduleError, TrainingError,
)  # fmt: skip


class PrerequisiteError(RuntimeError):
    pass


def require(path: str | None, command: str, flag: str, hint: str) -> Path:
    if path is None:
        raise PrerequisiteError(f"{command} needs {flag} ({hint})")
    p = Path(path)
    if not p.exists():
        raise PrerequisiteError(f"{command}: {flag} {p} does not exist ({hint})")
    return p


# ---------------------------------------------------------------------------
# sequence folders


def _has_frames(d: Path) -> bool:
    return d.is_dir() and any(p.suffix.lower() in IMAGE_SUFFIXES for p in d.iterdir() if p.is_file())


def load_sequences(path: Path, role: str = "hr", split: str = "test") -> dict[str, VideoSequence]:
    """Sequences keyed by id from a dataset root, one frame folder, or a folder of frame folders.

    A sequence folder from gen-data (frames under ``<role>/``) counts as a frame folder.
    """
    if (path / "manifest.json").exists():
        splits, _ = load_dataset(path)
        if split not in splits:
            raise DataError(f"{path}: dataset has no {split!r} split")
        return {p.hr.id: getattr(p, role) for p in splits[split]}
    if not path.is_dir():
        raise DataError(f"{path}: not a directory")

    def frames_dir(d: Path) -> Path | None:
        return d if _has_frames(d) else d / role if _has_frames(d / role) else None

    if frames_dir(path) is not None:
        return {path.name: load_sequence_folder(frames_dir(path))}
    subdirs = sorted(d for d in path.iterdir() if d.is_dir() and frames_dir(d) is not None)
    if not subdirs:
        raise DataError(f"{path}: no frames and no sequence subfolders")
    return {d.name: load_sequence_folder(frames_dir(d)) for d in subdirs}


def match_sequences(refs: dict, preds: dict) -> list[tuple[str, VideoSequence, VideoSequence]]:
    if len(refs) == 1 and len(preds) == 1:
        (rid, r), (_, p) = next(iter(refs.items())), next(iter(preds.items()))
        return [(rid, r, p)]
    missing = sorted(set(refs) - set(preds))
    extra = sorted(set(preds) - set(refs))
    if missing or extra:
        raise DataError(f"sequence ids differ: missing predictions {missing}, unexpected {extra}")
    return [(k, refs[k], preds[k]) for k in sorted(refs)]


def data_arg(args, cfg: RunConfig, command: str) -> Path | None:
    """``--data`` wins over ``data.path``; neither means regenerate from the data section."""
    path = args.data or cfg.data.path or None
    return require(path, command, "--data", "a dataset from gen-data") if path else None


def _load_model(path: Path, command: str, need_tcm: bool):
    model, manifest = load_checkpoint(path)
    if need_tcm and model.tcm is None:
        raise PrerequisiteError(
            f"{command}: checkpoint {path} has no temporal conditioning module (train one with train-tcm)"
        )
    return model, manifest


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args, cfg: RunConfig, out: Path) -> dict:
    save_dataset(out, generate_dataset(cfg.data), cfg.data)
    return {}


def cmd_pretrain(args, cfg: RunConfig, out: Path) -> dict:
    data = data_arg(args, cfg, "pretrain")
    pairs = ex.get_splits(cfg, data)["train"]
    model, log = ex.run_pretrain(cfg, pairs)
    save_checkpoint(out / "checkpoint", model, training_phase="base", step_count=cfg.train.base_steps, rng_seed=cfg.seed)
    ex.write_train_log(out / "train_log.csv", log)
    if log:
        ex.plot_loss(out / "loss.png", log, "base pretraining")
    return {"data": data}


def cmd_train_tcm(args, cfg: RunConfig, out: Path) -> dict:
    base_path = require(args.base, "train-tcm", "--base", "a base checkpoint from pretrain")
    data = data_arg(args, cfg, "train-tcm")
    base, _ = load_checkpoint(base_path, with_tcm=False)
    pairs = ex.get_splits(cfg, data)["train"]
    model, log = ex.run_train_tcm(cfg, pairs, base)
    save_checkpoint(out / "checkpoint", model, training_phase="tcm", step_count=cfg.train.tcm_steps, rng_seed=cfg.seed)
    ex.write_train_log(out / "train_log.csv", log)
    if log:
        ex.plot_loss(out / "loss.png", log, "temporal conditioning training")
    return {"base": base_path, "data": data}


def cmd_upscale(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = require(args.checkpoint, "upscale", "--checkpoint", "a checkpoint from pretrain or train-tcm")
    inp = require(args.input, "upscale", "--input", "LR frames, a folder of sequences, or a dataset")
    model, _ = _load_model(ckpt, "upscale", cfg.sample.strategy != "single_frame")
    seqs = load_sequences(inp, role="lr")
    ids = sorted(seqs)
    # equally sized sequences are sampled jointly, others one by one
    groups: dict[tuple, list[str]] = {}
    for sid in ids:
        groups.setdefault((len(seqs[sid]), seqs[sid].size), []).append(sid)
    traces = {}
    for key in sorted(groups):
        group = groups[key]
        hr, trace = ex.upscale(model, [seqs[s] for s in group], cfg)
        for sid, frames in zip(group, hr):
            save_sequence_folder(out / "frames" / sid, VideoSequence(frames, id=sid))
        traces[key] = trace
    # the trace depends only on (N, steps, strategy): one file per distinct length
    for (n, _), trace in sorted(traces.items()):
        name = "trace.jsonl" if len({k[0] for k in traces}) == 1 else f"trace_n{n}.jsonl"
        trace.write(out / name)
    if (inp / "manifest.json").exists():
        refs = load_sequences(inp, role="hr")
        outs = load_sequences(out / "frames")
        matched = match_sequences(refs, outs)
        ex.evaluate(cfg, [r for _, r, _ in matched], [p for _, _, p in matched]).write(out / "metrics.json")
    return {"checkpoint": ckpt, "input": inp}


def cmd_evaluate(args, cfg: RunConfig, out: Path) -> dict:
    ref = require(args.ref, "evaluate", "--ref", "reference frames or a dataset")
    pred = require(args.pred, "evaluate", "--pred", "upscaled frames, e.g. <upscale out>/frames")
    matched = match_sequences(load_sequences(ref, "hr"), load_sequences(pred, "hr"))
    report = ex.evaluate(cfg, [r for _, r, _ in matched], [p for _, _, p in matched])
    report.metadata["sequence_ids"] = [k for k, _, _ in matched]
    report.write(out / "metrics.json")
    print(json.dumps(report.means, sort_keys=True))
    return {"ref": ref, "pred": pred}


def _write_table(out: Path, table: dict, label: str) -> None:
    # rows keep their presentation order
    ex.write_json(out / "table.json", table, sort_keys=False)
    (out / "table.md").write_text(ex.markdown_table(table, label))
    print(ex.markdown_table(table, label), end="")


def cmd_ablate_sampling(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = require(args.checkpoint, "ablate-sampling", "--checkpoint", "a checkpoint from train-tcm")
    data = data_arg(args, cfg, "ablate-sampling")
    model, _ = _load_model(ckpt, "ablate-sampling", True)
    table = ex.ablate_sampling(model, ex.get_splits(cfg, data)["test"], cfg)
    _write_table(out, table, "strategy")
    return {"checkpoint": ckpt, "data": data}


def cmd_ablate_guidance(args, cfg: RunConfig, out: Path) -> dict:
    base_path = require(args.base, "ablate-guidance", "--base", "a base checkpoint from pretrain")
    data = data_arg(args, cfg, "ablate-guidance")
    base, _ = load_checkpoint(base_path, with_tcm=False)
    splits = ex.get_splits(cfg, data)
    table, models = ex.ablate_guidance(base, splits["train"], splits["test"], cfg)
    for variant, (model, log) in models.items():
        save_checkpoint(out / "checkpoints" / variant, model, training_phase="tcm", guidance_mode=variant, rng_seed=cfg.seed)
        ex.write_train_log(out / f"train_log_{variant}.csv", log)
    _write_table(out, table, "guidance")
    return {"base": base_path, "data": data}


def cmd_sweep_steps(args, cfg: RunConfig, out: Path) -> dict:
    ckpt = require(args.checkpoint, "sweep-steps", "--checkpoint", "a checkpoint from train-tcm")
    data = data_arg(args, cfg, "sweep-steps")
    model, _ = _load_model(ckpt, "sweep-steps", cfg.sample.strategy != "single_frame")
    sweep = ex.sweep_steps(model, ex.get_splits(cfg, data)["test"], cfg)
    ex.write_json(out / "sweep.json", sweep)
    ex.plot_sweep(out / "sweep.png", sweep)
    return {"checkpoint": ckpt, "data": data}


def cmd_profile(args, cfg: RunConfig, out: Path) -> dict:
    inp = require(args.input, "profile", "--input", "frames, a folder of sequences, or a dataset")
    pred = require(args.pred, "profile", "--pred", "upscaled frames") if args.pred else None
    seqs = load_sequences(inp, "hr")
    preds = {k: p for k, _, p in match_sequences(seqs, load_sequences(pred, "hr"))} if pred else {}
    (out / "profiles").mkdir(parents=True, exist_ok=True)
    for sid, seq in sorted(seqs.items()):
        ex.save_rgb(out / "profiles" / f"{sid}.png", ex.profile_image(seq, cfg.eval.profile_row))
        if sid in preds:
            ex.save_rgb(out / "profiles" / f"{sid}_pred.png", ex.profile_image(preds[sid], cfg.eval.profile_row))
        flows = seq.flows
        if flows is None:
            flows = np.stack([
                estimate_flow(seq.frames[i], seq.frames[i + 1], "block_matching", block=cfg.sample.block, radius=cfg.sample.radius)
                for i in range(len(seq) - 1)
            ])  # fmt: skip
        fdir = out / "flows" / sid
        fdir.mkdir(parents=True, exist_ok=True)
        peak = max(float(np.hypot(*np.moveaxis(flows, 1, 0)).max()), 1e-12) if len(flows) else 1.0
        for i, f in enumerate(flows):
            ex.save_rgb(fdir / f"{i:04d}.png", ex.flow_to_rgb(f, peak))
    return {"input": inp, "pred": pred}


COMMANDS = {
    "gen-data": (cmd_gen_data, "generate the synthetic dataset"),
    "pretrain": (cmd_pretrain, "train the single-image base denoiser"),
    "train-tcm": (cmd_train_tcm, "train the temporal conditioning module on a frozen base"),
    "upscale": (cmd_upscale, "upscale LR sequences with the configured sampling strategy"),
    "evaluate": (cmd_evaluate, "PSNR, SSIM, tLP and tOF of predictions against references"),
    "ablate-guidance": (cmd_ablate_guidance, "train and compare the four guidance variants"),
    "ablate-sampling": (cmd_ablate_sampling, "compare the four sampling strategies"),
    "sweep-steps": (cmd_sweep_steps, "metrics against the number of sampling steps"),
    "profile": (cmd_profile, "temporal profiles and flow visualisations"),
}

PATH_FLAGS = {
    "pretrain": ("data",),
    "train-tcm": ("base", "data"),
    "upscale": ("checkpoint", "input"),
    "evaluate": ("ref", "pred"),
    "ablate-guidance": ("base", "data"),
    "ablate-sampling": ("checkpoint", "data"),
    "sweep-steps": ("checkpoint", "data"),
    "profile": ("input", "pred"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stablevsr", description=__doc__.splitlines()[0])
    parser.add_argument("--print-defaults", action="store_true", help="print the default config and exit")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--seed", type=int, help="overrides the config seed")
        p.add_argument("--out", required=True, help="run directory")
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="config override, repeatable")
        for flag in PATH_FLAGS.get(name, ()):
            p.add_argument(f"--{flag}")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.print_defaults:
        print(json.dumps(section_defaults(), indent=2, sort_keys=True))
        return 0
    if args.command is None:
        parser.print_help(sys.stderr)
        return 2
    try:
        cfg = load_config(args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        inputs = COMMANDS[args.command][0](args, cfg, out)
        if args.config:
            inputs["config"] = args.config
        ex.write_manifest(out, args.command, cfg, inputs)
    except (ConfigError, PrerequisiteError) as exc:
        print(f"stablevsr {args.command}: {exc}", file=sys.stderr)
        return 2
    except CONTRACT_ERRORS as exc:
        print(f"stablevsr {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
