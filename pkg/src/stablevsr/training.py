"""Two-phase optimisation.

Phase ``base`` trains the single-image denoiser on the plain noise-prediction
objective. Phase ``tcm`` freezes it and trains only the temporal
conditioning module: for a pair of consecutive frames the previous frame is
noised, denoised by the (frozen, gradient-free) base model, projected to a
clean estimate, decoded and motion compensated; that guidance then
conditions the noise prediction for the current frame.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .alignment import FlowCache, guidance_from_latent
from .codec import LatentCodec, condition_lr
from .dataio import SequencePair
from .denoiser import Denoiser, DenoiserConfig, predict_noise, set_trainable, state_checksum
from .schedule import NoiseSchedule, build_schedule, forward_diffuse

PHASES = ("base", "tcm")
TRAIN_GUIDANCE_MODES = ("proposed", "x_t", "no_motion_comp", "no_latent_to_rgb", "zeros")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    phase: str = "base"
    batch_size: int = 8
    lr_rate: float = 2e-4
    grad_clip: float = 1.0
    max_steps: int = 2000
    patch: int = 64
    flip_prob: float = 0.5
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    seed: int = 0
    flow_backend: str = "oracle"
    guidance_mode: str = "proposed"
    codec_mode: str = "space_to_depth"
    log_every: int = 1
    log_wall_time: bool = False
    base_checkpoint: str = ""

    def __post_init__(self):
        if self.phase not in PHASES:
            raise TrainingError(f"unknown phase {self.phase!r}; expected one of {PHASES}")
        if self.guidance_mode not in TRAIN_GUIDANCE_MODES:
            raise TrainingError(f"unknown guidance_mode {self.guidance_mode!r}")


# The published training profile, kept for reference runs.
PAPER_PROFILE = {"patch": 256, "batch_size": 32, "lr_rate": 1e-5, "max_steps": 20000, "T": 1000}


@dataclass
class Streams:
    """Independent RNG streams derived from one master seed."""

    pairs: np.random.Generator
    crop: np.random.Generator
    flip: np.random.Generator
    t: torch.Generator
    eps: torch.Generator
    eps_prev: torch.Generator

    @classmethod
    def from_seed(cls, seed: int) -> "Streams":
        kids = np.random.SeedSequence(seed).spawn(6)
        torch_gen = [torch.Generator().manual_seed(int(k.generate_state(1)[0])) for k in kids[3:]]
        return cls(*(np.random.default_rng(k) for k in kids[:3]), *torch_gen)


@dataclass
class Batch:
    """Consecutive-frame pairs in model units ([-1, 1])."""

    lr_prev: torch.Tensor
    hr_prev: torch.Tensor
    lr_cur: torch.Tensor
    hr_cur: torch.Tensor
    flow: torch.Tensor  # LR flow prev -> cur


class PairDataset:
    """All (i-1, i) frame pairs of a set of clips; ``backend=None`` skips flow."""

    def __init__(self, pairs: list[SequencePair], backend: str | None = "oracle", cache: FlowCache | None = None):
        if not pairs:
            raise TrainingError("empty training set")
        if any(len(p.hr) < 2 for p in pairs):
            raise TrainingError("training sequences need at least two frames")
        self.hr = [torch.from_numpy(p.hr.frames) * 2 - 1 for p in pairs]
        self.lr = [torch.from_numpy(p.lr.frames) * 2 - 1 for p in pairs]
        cache = cache if cache is not None else FlowCache()
        self.flows = []
        for k, p in enumerate(pairs):
            if backend is None:
                self.flows.append(torch.zeros(len(p.lr) - 1, 2, *p.lr.size))
                continue
            fl = [
                cache.get(
                    (p.lr.id, k, i - 1, i),
                    p.lr.frames[i - 1],
                    p.lr.frames[i],
                    backend,
                    None if p.lr.flows is None else p.lr.flows[i - 1],
                )
                for i in range(1, len(p.lr))
            ]
            self.flows.append(torch.from_numpy(np.stack(fl)))
        self.index = [(s, i) for s, p in enumerate(pairs) for i in range(1, len(p.hr))]
        self.scale = self.hr[0].shape[-1] // self.lr[0].shape[-1]

    def sample(self, streams: Streams, batch_size: int, patch: int, flip_prob: float) -> Batch:
        picks = streams.pairs.integers(len(self.index), size=batch_size)
        cols = {k: [] for k in ("lr_prev", "hr_prev", "lr_cur", "hr_cur", "flow")}
        for pick in picks:
            s, i = self.index[int(pick)]
            hr, lr, flow = self.hr[s][i - 1 : i + 1], self.lr[s][i - 1 : i + 1], self.flows[s][i - 1]
            H = hr.shape[-2]
            if patch < H:
                lp = patch // self.scale
                oy, ox = (int(v) for v in streams.crop.integers(0, lr.shape[-1] - lp + 1, size=2))
                lr = lr[..., oy : oy + lp, ox : ox + lp]
                flow = flow[..., oy : oy + lp, ox : ox + lp]
                so, sx = oy * self.scale, ox * self.scale
                hr = hr[..., so : so + patch, sx : sx + patch]
            if streams.flip.random() < flip_prob:
                hr, lr = hr.flip(-1), lr.flip(-1)
                flow = flow.flip(-1) * torch.tensor([-1.0, 1.0]).view(2, 1, 1)
            cols["lr_prev"].append(lr[0])
            cols["lr_cur"].append(lr[1])
            cols["hr_prev"].append(hr[0])
            cols["hr_cur"].append(hr[1])
            cols["flow"].append(flow)
        return Batch(**{k: torch.stack(v) for k, v in cols.items()})


def loss_step(
    batch: Batch,
    model: Denoiser,
    sched: NoiseSchedule,
    codec: LatentCodec,
    streams: Streams,
    phase: str = "tcm",
    guidance_mode: str = "proposed",
    eps_model=None,
) -> torch.Tensor:
    """Noise-prediction loss on the current frame of each pair.

    ``eps_model`` (defaults to the denoiser) lets tests plug in an oracle.
    """
    B = batch.hr_cur.shape[0]
    x0 = codec.encode(batch.hr_cur)
    t = torch.randint(1, sched.T + 1, (B,), generator=streams.t)
    eps = torch.randn(x0.shape, generator=streams.eps, dtype=torch.float64).to(x0.dtype)
    eps_prev = torch.randn(x0.shape, generator=streams.eps_prev, dtype=torch.float64).to(x0.dtype)
    x_t = torch.stack([forward_diffuse(x0[b], int(t[b]), eps[b], sched) for b in range(B)])
    lr_cur = condition_lr(batch.lr_cur, codec)
    call = eps_model or (lambda *a: predict_noise(model, *a))

    guidance = None
    if phase == "tcm":
        with torch.no_grad():
            x0_prev = codec.encode(batch.hr_prev)
            x_prev_t = torch.stack([forward_diffuse(x0_prev[b], int(t[b]), eps_prev[b], sched) for b in range(B)])
            eps_hat_prev = predict_noise(model, x_prev_t, t, condition_lr(batch.lr_prev, codec))
            if guidance_mode == "zeros":
                guidance = torch.zeros_like(batch.hr_cur)
            else:
                guidance = torch.stack(
                    [
                        guidance_from_latent(
                            x_prev_t[b], eps_hat_prev[b], int(t[b]), batch.flow[b].to(x0.dtype), codec, sched, guidance_mode
                        )
                        for b in range(B)
                    ]
                )
    elif phase != "base":
        raise TrainingError(f"unknown phase {phase!r}")
    pred = call(x_t, t, lr_cur, guidance)
    return F.mse_loss(pred, eps)


def _check_finite(loss: torch.Tensor, step: int, history: list[float]) -> None:
    if not math.isfinite(loss.item()):
        raise TrainingError(
            f"loss became {loss.item()} at step {step}; last losses: {history[-5:]} "
            "(lower lr_rate or check the data range)"
        )


def _make_optimizer(params, cfg: TrainConfig):
    return torch.optim.Adam(params, lr=cfg.lr_rate)


def _log_row(step, loss, cfg, t0):
    row = {"step": step, "loss": loss.item(), "lr_rate": cfg.lr_rate}
    if cfg.log_wall_time:
        row["wall_time"] = time.perf_counter() - t0
    return row


def _check_patch(cfg: TrainConfig, model_cfg: DenoiserConfig, codec: LatentCodec, pairs) -> None:
    # LR crops must stay on the codec grid and the latent must survive the UNet downsampling
    hr = pairs[0].hr.size
    unit = math.lcm(hr[0] // pairs[0].lr.size[0], codec.scale * 2**model_cfg.depth)
    if cfg.patch % unit or cfg.patch > min(hr):
        raise TrainingError(f"patch {cfg.patch} must be a multiple of {unit} and at most the HR size {hr}")


def pretrain_base(
    pairs: list[SequencePair],
    cfg: TrainConfig,
    model_cfg: DenoiserConfig | None = None,
    init_seed: int | None = None,
) -> tuple[Denoiser, list[dict]]:
    """Train the single-image denoiser; returns (model, per-step log)."""
    if cfg.phase != "base":
        raise TrainingError(f"pretrain_base needs phase='base', got {cfg.phase!r}")
    codec = LatentCodec(cfg.codec_mode)
    model_cfg = model_cfg or DenoiserConfig(latent_channels=codec.latent_channels, guidance_scale=codec.scale)
    model_cfg.num_train_steps = cfg.T
    model_cfg.beta_start, model_cfg.beta_end = cfg.beta_start, cfg.beta_end
    _check_patch(cfg, model_cfg, codec, pairs)
    torch.manual_seed(cfg.seed if init_seed is None else init_seed)
    model = Denoiser(model_cfg, with_tcm=False)
    set_trainable(model, "base_only")
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    data = PairDataset(pairs, backend=None)
    streams = Streams.from_seed(cfg.seed)
    opt = _make_optimizer(model.base.parameters(), cfg)
    log, history, t0 = [], [], time.perf_counter()
    model.train()
    for step in range(1, cfg.max_steps + 1):
        batch = data.sample(streams, cfg.batch_size, cfg.patch, cfg.flip_prob)
        loss = loss_step(batch, model, sched, codec, streams, phase="base")
        _check_finite(loss, step, history)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(opt.param_groups[0]["params"], cfg.grad_clip)
        opt.step()
        history.append(loss.item())
        if step % cfg.log_every == 0:
            log.append(_log_row(step, loss, cfg, t0))
    model.eval()
    return model, log


def base_parameter_checksum(model: Denoiser) -> str:
    return state_checksum(model.base.state_dict())


def train_tcm(
    pairs: list[SequencePair],
    base_model: Denoiser,
    cfg: TrainConfig,
    flow_cache: FlowCache | None = None,
) -> tuple[Denoiser, list[dict]]:
    """Train only the temporal conditioning module on top of a frozen base."""
    if cfg.phase != "tcm":
        raise TrainingError(f"train_tcm needs phase='tcm', got {cfg.phase!r}")
    codec = LatentCodec(cfg.codec_mode)
    torch.manual_seed(cfg.seed)
    _check_patch(cfg, base_model.cfg, codec, pairs)
    mc = base_model.cfg
    if (mc.num_train_steps, mc.beta_start, mc.beta_end) != (cfg.T, cfg.beta_start, cfg.beta_end):
        raise TrainingError(
            f"noise schedule T={cfg.T}, beta=[{cfg.beta_start}, {cfg.beta_end}] does not match the base model's "
            f"T={mc.num_train_steps}, beta=[{mc.beta_start}, {mc.beta_end}]"
        )
    model = Denoiser(base_model.cfg, with_tcm=True)
    model.base.load_state_dict(base_model.base.state_dict())
    model.tcm.load_from_base(model.base)
    set_trainable(model, "tcm_only")
    before = base_parameter_checksum(model)
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    data = PairDataset(pairs, cfg.flow_backend, flow_cache)
    streams = Streams.from_seed(cfg.seed)
    opt = _make_optimizer(model.tcm.parameters(), cfg)
    log, history, t0 = [], [], time.perf_counter()
    model.train()
    for step in range(1, cfg.max_steps + 1):
        batch = data.sample(streams, cfg.batch_size, cfg.patch, cfg.flip_prob)
        loss = loss_step(batch, model, sched, codec, streams, phase="tcm", guidance_mode=cfg.guidance_mode)
        _check_finite(loss, step, history)
        opt.zero_grad(set_to_none=True)
        loss.backward()
        leaked = [n for n, p in model.base.named_parameters() if p.grad is not None and bool(p.grad.abs().sum() > 0)]
        if leaked:
            raise TrainingError(f"base parameters received gradient during TCM training: {leaked[:3]}")
        if cfg.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(opt.param_groups[0]["params"], cfg.grad_clip)
        opt.step()
        history.append(loss.item())
        if step % cfg.log_every == 0:
            log.append(_log_row(step, loss, cfg, t0))
    model.eval()
    if base_parameter_checksum(model) != before:
        raise TrainingError("base parameters changed during TCM training")
    return model, log


@torch.no_grad()
def evaluate_loss(
    model: Denoiser,
    pairs: list[SequencePair],
    cfg: TrainConfig,
    num_batches: int = 8,
    seed: int = 12345,
    phase: str | None = None,
    flow_cache: FlowCache | None = None,
) -> float:
    """Mean loss over a fixed, seeded set of held-out batches."""
    codec = LatentCodec(cfg.codec_mode)
    sched = build_schedule(cfg.T, cfg.beta_start, cfg.beta_end)
    data = PairDataset(pairs, cfg.flow_backend, flow_cache)
    streams = Streams.from_seed(seed)
    was_training = model.training
    model.eval()
    total = 0.0
    for _ in range(num_batches):
        batch = data.sample(streams, cfg.batch_size, cfg.patch, 0.0)
        total += float(loss_step(batch, model, sched, codec, streams, phase or cfg.phase, cfg.guidance_mode))
    model.train(was_training)
    return total / num_batches


def smoothed(values: list[float], window: int = 50) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()])
    return np.convolve(v, np.ones(window) / window, mode="valid")
