"""Frame-wise sampling strategies and their verifiable traces.

``bidirectional`` takes one reverse step on every frame before moving to the
next step, flipping the processing order after each step so guidance
alternates between the previous and the next frame. ``unidirectional``
keeps the forward order, ``autoregressive`` finishes each frame before
starting the next, and ``single_frame`` never uses guidance.

Frame indices are 0-based; step ``t`` counts inference steps ``T .. 1``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .alignment import FlowCache, guidance_from_latent
from .codec import LatentCodec, condition_lr
from .dataio import VideoSequence
from .denoiser import Denoiser, predict_noise
from .schedule import NoiseSchedule, reverse_step

STRATEGIES = ("single_frame", "autoregressive", "unidirectional", "bidirectional")


class SamplerError(ValueError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    t: int
    frame: int
    guidance_source: int | None
    direction: str


@dataclass
class SamplingTrace:
    entries: list[TraceEntry] = field(default_factory=list)
    denoiser_eval_count: int = 0

    def append(self, entry: TraceEntry) -> None:
        self.entries.append(entry)
        self.denoiser_eval_count += 1

    def to_jsonl(self) -> str:
        return "".join(json.dumps(asdict(e), sort_keys=True) + "\n" for e in self.entries)

    def write(self, path: str | Path) -> None:
        Path(path).write_text(self.to_jsonl())

    @classmethod
    def read(cls, path: str | Path) -> "SamplingTrace":
        trace = cls()
        for line in Path(path).read_text().splitlines():
            if line.strip():
                trace.append(TraceEntry(**json.loads(line)))
        return trace


@dataclass
class SamplerConfig:
    strategy: str = "bidirectional"
    T_inference: int = 50
    seed: int = 0
    flow_backend: str = "block_matching"
    codec_mode: str = "space_to_depth"
    guidance_mode: str = "proposed"
    block: int = 8
    radius: int = 4

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise SamplerError(f"unknown strategy {self.strategy!r}; expected one of {STRATEGIES}")


def plan_schedule(N: int, T: int, strategy: str) -> SamplingTrace:
    """The exact (step, frame, guidance source, direction) sequence a run will follow."""
    if strategy not in STRATEGIES:
        raise SamplerError(f"unknown strategy {strategy!r}; expected one of {STRATEGIES}")
    if N < 1 or T < 1:
        raise SamplerError(f"need N >= 1 and T >= 1, got N={N}, T={T}")
    trace = SamplingTrace()
    if strategy == "autoregressive":
        for i in range(N):
            for t in range(T, 0, -1):
                trace.append(TraceEntry(t, i, i - 1 if i > 0 else None, "forward"))
        return trace
    order = list(range(N))
    for t in range(T, 0, -1):
        direction = "forward" if order[0] <= order[-1] else "backward"
        for pos, i in enumerate(order):
            src = order[pos - 1] if pos > 0 and strategy != "single_frame" else None
            trace.append(TraceEntry(t, i, src, direction))
        if strategy == "bidirectional":
            order.reverse()
    return trace


def frame_seed(seed: int, sequence: int, frame: int) -> int:
    return int(np.random.SeedSequence([seed, sequence, frame]).generate_state(1)[0])


def _oracle_flow(seq: VideoSequence, src: int, dst: int):
    flows = seq.flows if dst == src + 1 else seq.back_flows
    if flows is None:
        return None
    return flows[min(src, dst)]


def pair_flows(
    lr_seqs: list[VideoSequence],
    pairs,
    backend: str,
    cache: FlowCache | None = None,
    block: int = 8,
    radius: int = 4,
) -> dict[tuple[int, int], torch.Tensor]:
    """LR flow (src -> dst) for every requested pair, stacked over the batch."""
    cache = cache if cache is not None else FlowCache()
    out = {}
    for src, dst in sorted(set(pairs)):
        flows = []
        for b, seq in enumerate(lr_seqs):
            f = cache.get(
                (seq.id, b, src, dst),
                seq.frames[src],
                seq.frames[dst],
                backend,
                _oracle_flow(seq, src, dst),
                block,
                radius,
            )
            flows.append(torch.from_numpy(np.ascontiguousarray(f)))
        out[(src, dst)] = torch.stack(flows)
    return out


@torch.no_grad()
def sample_batch(
    lr_seqs: list[VideoSequence],
    model: Denoiser,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    frame_seeds: np.ndarray | None = None,
    flow_cache: FlowCache | None = None,
) -> tuple[np.ndarray, SamplingTrace]:
    """Upscale ``B`` equally sized sequences jointly; returns (B, N, 3, H, W) in [0, 1]."""
    codec = LatentCodec(cfg.codec_mode)
    if codec.latent_channels != model.cfg.latent_channels:
        raise SamplerError(
            f"codec {cfg.codec_mode!r} has {codec.latent_channels} latent channels but the model "
            f"expects {model.cfg.latent_channels}"
        )
    if sched.T != cfg.T_inference:
        sched = sched.respace(cfg.T_inference)
    if int(sched.timesteps.max()) > model.cfg.num_train_steps:
        raise SamplerError("schedule steps exceed the model's training schedule")
    trained = model.alpha_bars.cpu().numpy()[sched.timesteps - 1]
    if not np.allclose(trained, sched.alpha_bars, rtol=1e-9, atol=0):
        raise SamplerError("noise schedule does not match the one the model was trained with")
    B = len(lr_seqs)
    N = len(lr_seqs[0])
    if any(len(s) != N or s.size != lr_seqs[0].size for s in lr_seqs):
        raise SamplerError("all sequences in a batch need the same length and frame size")
    plan = plan_schedule(N, sched.T, cfg.strategy)
    needs_guidance = any(e.guidance_source is not None for e in plan.entries)
    if needs_guidance and model.tcm is None:
        raise SamplerError(f"strategy {cfg.strategy!r} needs a temporal conditioning module; model has none")

    dtype = next(model.parameters()).dtype
    lr = torch.from_numpy(np.stack([s.frames for s in lr_seqs]))  # (B, N, 3, h, w)
    cond = condition_lr(lr * 2.0 - 1.0, codec).to(dtype)
    latent_shape = (codec.latent_channels, *cond.shape[-2:])

    if frame_seeds is None:
        frame_seeds = np.array([[frame_seed(cfg.seed, b, i) for i in range(N)] for b in range(B)])
    gens = [[torch.Generator().manual_seed(int(frame_seeds[b][i])) for i in range(N)] for b in range(B)]

    def noise(i):
        return torch.stack([torch.randn(latent_shape, generator=gens[b][i], dtype=torch.float64) for b in range(B)]).to(dtype)

    flows = {}
    if needs_guidance:
        pairs = {(e.guidance_source, e.frame) for e in plan.entries if e.guidance_source is not None}
        flows = {k: v.to(dtype) for k, v in pair_flows(lr_seqs, pairs, cfg.flow_backend, flow_cache, cfg.block, cfg.radius).items()}

    x = [noise(i) for i in range(N)]
    # last denoiser input per frame: (x_t, eps_hat, t)
    last: list[tuple | None] = [None] * N
    trace = SamplingTrace()
    for entry in plan.entries:
        t, i, src = entry.t, entry.frame, entry.guidance_source
        guidance = None
        if src is not None:
            xs, es, ts = last[src]
            guidance = guidance_from_latent(xs, es, ts, flows[(src, i)], codec, sched, cfg.guidance_mode)
        eps_hat = predict_noise(model, x[i], sched.model_timestep(t), cond[:, i], guidance)
        z = noise(i) if t > 1 else None
        last[i] = (x[i], eps_hat, t)
        x[i] = reverse_step(x[i], t, eps_hat, z, sched)
        trace.append(entry)

    hr = torch.stack([codec.decode(xi) for xi in x], dim=1)
    hr = ((hr.to(torch.float64) + 1.0) / 2.0).clamp(0.0, 1.0)
    return hr.numpy().astype(np.float32), trace


def sample_sequence(
    lr_seq: VideoSequence,
    model: Denoiser,
    sched: NoiseSchedule,
    cfg: SamplerConfig,
    frame_seeds=None,
    flow_cache: FlowCache | None = None,
) -> tuple[VideoSequence, SamplingTrace]:
    seeds = None if frame_seeds is None else np.asarray(frame_seeds)[None]
    hr, trace = sample_batch([lr_seq], model, sched, cfg, seeds, flow_cache)
    return VideoSequence(hr[0], id=lr_seq.id), trace

