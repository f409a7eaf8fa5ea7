"""Noise predictor: a small UNet conditioned on the LR frame by channel
concatenation, plus a ControlNet-style Temporal Conditioning Module (TCM).

The TCM is a trainable copy of the UNet encoder that additionally sees the
HR guidance frame (reduced to latent resolution by strided convolutions).
Its per-stage features enter the UNet decoder through zero-initialised 1x1
convolutions, so a fresh TCM leaves the base model's output unchanged.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .schedule import build_schedule

TRAINABLE_SCOPES = ("base_only", "tcm_only", "all")
CHECKPOINT_SCHEMA = 1


class DenoiserError(ValueError):
    pass


@dataclass
class DenoiserConfig:
    latent_channels: int = 48
    lr_channels: int = 3
    base_channels: int = 64
    depth: int = 3
    channel_mult: list[int] = field(default_factory=lambda: [1, 1, 2, 2])
    step_embed_dim: int = 128
    num_train_steps: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    # assumed latent std for input/output scaling; 0 disables it
    sigma_data: float = 0.5
    # HR guidance size / latent size (the codec's decode scale)
    guidance_scale: int = 4
    groups: int = 8

    @property
    def in_channels(self) -> int:
        return self.latent_channels + self.lr_channels

    def channels(self, level: int) -> int:
        return self.base_channels * self.channel_mult[min(level, len(self.channel_mult) - 1)]


def sinusoidal_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class StepEmbedding(nn.Module):
    def __init__(self, base: int, dim: int):
        super().__init__()
        self.base = base
        self.proj = nn.Sequential(nn.Linear(base, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t: torch.Tensor) -> torch.Tensor:
        dtype = self.proj[0].weight.dtype
        return self.proj(sinusoidal_embedding(t, self.base).to(dtype))


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, emb_dim: int, groups: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(min(groups, cin), cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.emb = nn.Linear(emb_dim, cout)
        self.norm2 = nn.GroupNorm(min(groups, cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, emb):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return self.skip(x) + h


class Encoder(nn.Module):
    """Input conv, ``depth`` (ResBlock, stride-2 conv) stages and a middle block."""

    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.in_conv = nn.Conv2d(cfg.in_channels, cfg.channels(0), 3, padding=1)
        self.blocks = nn.ModuleList()
        self.downs = nn.ModuleList()
        for level in range(cfg.depth):
            c, cn = cfg.channels(level), cfg.channels(level + 1)
            self.blocks.append(ResBlock(c, c, cfg.step_embed_dim, cfg.groups))
            self.downs.append(nn.Conv2d(c, cn, 3, stride=2, padding=1))
        c = cfg.channels(cfg.depth)
        self.mid = ResBlock(c, c, cfg.step_embed_dim, cfg.groups)

    def forward(self, x, emb, hint=None):
        h = self.in_conv(x)
        if hint is not None:
            h = h + hint
        skips = []
        for block, down in zip(self.blocks, self.downs):
            h = block(h, emb)
            skips.append(h)
            h = down(h)
        return skips, self.mid(h, emb)


class UNet(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        self.time_embed = StepEmbedding(cfg.base_channels, cfg.step_embed_dim)
        self.encoder = Encoder(cfg)
        self.ups = nn.ModuleList()
        self.dec_blocks = nn.ModuleList()
        for level in reversed(range(cfg.depth)):
            c, cn = cfg.channels(level), cfg.channels(level + 1)
            self.ups.append(nn.Conv2d(cn, c, 3, padding=1))
            self.dec_blocks.append(ResBlock(2 * c, c, cfg.step_embed_dim, cfg.groups))
        c0 = cfg.channels(0)
        self.out_norm = nn.GroupNorm(min(cfg.groups, c0), c0)
        self.out_conv = nn.Conv2d(c0, cfg.latent_channels, 3, padding=1)

    def forward(self, x, t, injections=None):
        emb = self.time_embed(t)
        skips, h = self.encoder(x, emb)
        if injections is not None:
            *inj_skips, inj_mid = injections
            h = h + inj_mid
            skips = [s + i for s, i in zip(skips, inj_skips)]
        for up, block, skip in zip(self.ups, self.dec_blocks, reversed(skips)):
            h = up(F.interpolate(h, scale_factor=2, mode="nearest"))
            h = block(torch.cat([h, skip], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h)))


def zero_module(m: nn.Module) -> nn.Module:
    for p in m.parameters():
        nn.init.zeros_(p)
    return m


class TemporalConditioningModule(nn.Module):
    def __init__(self, cfg: DenoiserConfig):
        super().__init__()
        self.cfg = cfg
        n_down = int(round(math.log2(cfg.guidance_scale)))
        if 2**n_down != cfg.guidance_scale:
            raise DenoiserError(f"guidance_scale must be a power of two, got {cfg.guidance_scale}")
        hidden = max(16, cfg.base_channels // 2)
        layers: list[nn.Module] = [nn.Conv2d(3, hidden, 3, padding=1), nn.SiLU()]
        for _ in range(n_down):
            layers += [nn.Conv2d(hidden, cfg.base_channels, 3, stride=2, padding=1), nn.SiLU()]
            hidden = cfg.base_channels
        layers.append(nn.Conv2d(hidden, cfg.channels(0), 3, padding=1))
        self.hint = nn.Sequential(*layers)
        self.time_embed = StepEmbedding(cfg.base_channels, cfg.step_embed_dim)
        self.encoder = Encoder(cfg)
        self.zero_convs = nn.ModuleList(
            zero_module(nn.Conv2d(cfg.channels(level), cfg.channels(level), 1))
            for level in range(cfg.depth + 1)
        )

    def load_from_base(self, base: UNet) -> None:
        """Initialise the encoder copy from the (pretrained) base UNet."""
        self.encoder.load_state_dict(base.encoder.state_dict())
        self.time_embed.load_state_dict(base.time_embed.state_dict())

    def forward(self, x, t, guidance):
        emb = self.time_embed(t)
        skips, mid = self.encoder(x, emb, hint=self.hint(guidance))
        return [zc(f) for zc, f in zip(self.zero_convs, [*skips, mid])]


class Denoiser(nn.Module):
    """eps_theta(x_t, t, LR[, guidance]).

    With ``sigma_data > 0`` the networks see x_t scaled to unit variance and
    predict a normalised residual on top of the best linear noise estimate
    for data of std ``sigma_data``::

        v = ab * sd^2 + 1 - ab
        eps = sqrt(1 - ab) / v * x_t + sqrt(ab * sd^2 / v) * net(x_t / sqrt(v))
    """

    def __init__(self, cfg: DenoiserConfig, with_tcm: bool = True):
        super().__init__()
        self.cfg = cfg
        self.base = UNet(cfg)
        self.tcm = TemporalConditioningModule(cfg) if with_tcm else None
        ab = build_schedule(cfg.num_train_steps, cfg.beta_start, cfg.beta_end).alpha_bars
        self.register_buffer("alpha_bars", torch.from_numpy(ab), persistent=False)

    def forward(self, x_t, t, lr, guidance=None):
        sd2 = self.cfg.sigma_data**2
        if sd2 > 0:
            ab = self.alpha_bars[t - 1].to(x_t.dtype).view(-1, 1, 1, 1)
            var = ab * sd2 + 1 - ab
            x = torch.cat([x_t / var.sqrt(), lr], dim=1)
        else:
            x = torch.cat([x_t, lr], dim=1)
        injections = None
        if guidance is not None:
            if self.tcm is None:
                raise DenoiserError("guidance given but the model has no temporal conditioning module")
            injections = self.tcm(x, t, guidance)
        out = self.base(x, t, injections)
        if sd2 > 0:
            out = (1 - ab).sqrt() / var * x_t + (ab * sd2 / var).sqrt() * out
        return out


def predict_noise(model: Denoiser, x_t, t, lr, guidance=None) -> torch.Tensor:
    """Checked call into the denoiser; accepts unbatched (C, H, W) inputs and int ``t``."""
    cfg = model.cfg
    squeeze = x_t.dim() == 3
    if squeeze:
        x_t, lr = x_t[None], lr[None]
        guidance = guidance[None] if guidance is not None else None
    B, C, H, W = x_t.shape
    if C != cfg.latent_channels:
        raise DenoiserError(f"x_t has {C} channels, model expects {cfg.latent_channels}")
    if tuple(lr.shape) != (B, cfg.lr_channels, H, W):
        raise DenoiserError(f"lr shape {tuple(lr.shape)} not aligned with x_t {tuple(x_t.shape)}")
    if H % 2**cfg.depth or W % 2**cfg.depth:
        raise DenoiserError(f"latent size {H}x{W} not divisible by 2**depth={2**cfg.depth}")
    if guidance is not None:
        want = (B, 3, H * cfg.guidance_scale, W * cfg.guidance_scale)
        if tuple(guidance.shape) != want:
            raise DenoiserError(f"guidance shape {tuple(guidance.shape)}, expected {want}")
    t = torch.as_tensor(t, dtype=torch.long)
    if t.dim() == 0:
        t = t.expand(B)
    if bool(((t < 1) | (t > cfg.num_train_steps)).any()):
        raise DenoiserError(f"step(s) {t.tolist()} outside [1, {cfg.num_train_steps}]")
    out = model(x_t, t, lr, guidance)
    return out[0] if squeeze else out


def set_trainable(model: Denoiser, scope: str) -> Denoiser:
    if scope not in TRAINABLE_SCOPES:
        raise DenoiserError(f"unknown scope {scope!r}; expected one of {TRAINABLE_SCOPES}")
    for p in model.base.parameters():
        p.requires_grad_(scope in ("base_only", "all"))
    if model.tcm is not None:
        for p in model.tcm.parameters():
            p.requires_grad_(scope in ("tcm_only", "all"))
    return model


def count_parameters(module: nn.Module | None, trainable_only: bool = False) -> int:
    if module is None:
        return 0
    return sum(p.numel() for p in module.parameters() if p.requires_grad or not trainable_only)


# ---------------------------------------------------------------------------
# checkpoints: params.bin (raw little-endian float32, concatenated in
# state-dict order) + manifest.json carrying the tensor index


def state_checksum(state: dict[str, torch.Tensor]) -> str:
    h = hashlib.sha256()
    for name in sorted(state):
        h.update(name.encode())
        h.update(state[name].detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes())
    return h.hexdigest()


def save_checkpoint(directory: str | Path, model: Denoiser, **manifest_fields) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    state = model.state_dict()
    index, offset = [], 0
    with open(directory / "params.bin", "wb") as fh:
        for name, tensor in state.items():
            data = tensor.detach().to(torch.float32).contiguous().numpy().astype("<f4").tobytes()
            fh.write(data)
            index.append({"name": name, "shape": list(tensor.shape), "offset": offset})
            offset += len(data)
    manifest = {
        "schema_version": CHECKPOINT_SCHEMA,
        "config": asdict(model.cfg),
        "with_tcm": model.tcm is not None,
        "training_phase": manifest_fields.pop("training_phase", None),
        "step_count": manifest_fields.pop("step_count", 0),
        "rng_seed": manifest_fields.pop("rng_seed", None),
        "checksum": state_checksum(state),
        **manifest_fields,
        "tensors": index,
    }
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return directory


def load_checkpoint(directory: str | Path, with_tcm: bool | None = None) -> tuple[Denoiser, dict]:
    directory = Path(directory)
    mpath = directory / "manifest.json"
    if not mpath.exists() or not (directory / "params.bin").exists():
        raise DenoiserError(f"{directory}: not a checkpoint (manifest.json/params.bin missing)")
    manifest = json.loads(mpath.read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA:
        raise DenoiserError(f"{directory}: unsupported checkpoint schema {manifest.get('schema_version')}")
    cfg = DenoiserConfig(**manifest["config"])
    has_tcm = manifest["with_tcm"]
    model = Denoiser(cfg, with_tcm=has_tcm if with_tcm is None else with_tcm)
    blob = (directory / "params.bin").read_bytes()
    state = {}
    for entry in manifest["tensors"]:
        n = int(np.prod(entry["shape"])) if entry["shape"] else 1
        arr = np.frombuffer(blob, dtype="<f4", count=n, offset=entry["offset"]).reshape(entry["shape"])
        state[entry["name"]] = torch.from_numpy(arr.astype(np.float32))
    own = model.state_dict()
    missing = [k for k in own if k not in state]
    if missing and not (all(k.startswith("tcm.") for k in missing) and not has_tcm):
        raise DenoiserError(f"{directory}: checkpoint lacks tensors {missing[:5]}...")
    if not has_tcm and model.tcm is not None:
        # base-only checkpoint loaded into a TCM model: ControlNet-style init
        model.base.load_state_dict({k[5:]: v for k, v in state.items() if k.startswith("base.")})
        model.tcm.load_from_base(model.base)
    else:
        model.load_state_dict({k: v for k, v in state.items() if k in own})
    return model, manifest
