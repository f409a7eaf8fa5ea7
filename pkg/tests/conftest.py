import hashlib
import json
import os
import time
from pathlib import Path

import pytest
import torch

from stablevsr import experiments as ex
from stablevsr.config import RunConfig
from stablevsr.denoiser import Denoiser, DenoiserConfig, load_checkpoint, save_checkpoint


def tiny_config(**kw) -> DenoiserConfig:
    base = dict(base_channels=8, depth=2, channel_mult=[1, 2, 2], step_embed_dim=16, groups=4)
    base.update(kw)
    return DenoiserConfig(**base)


@pytest.fixture
def tiny_cfg():
    return tiny_config()


@pytest.fixture
def tiny_model():
    torch.manual_seed(0)
    return Denoiser(tiny_config(), with_tcm=True)


# acceptance criteria report: one line per criterion in the terminal summary
ACCEPTANCE: dict[int, tuple[bool, str]] = {}


@pytest.fixture
def record_criterion():
    def record(number: int, ok: bool, detail: str) -> bool:
        ACCEPTANCE[number] = (bool(ok), detail)
        return ok

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")


# ---------------------------------------------------------------------------
# desk-scale models (default RunConfig), trained once per session. Set
# STABLEVSR_DESK_CACHE to a directory to reuse checkpoints across sessions;
# entries are keyed by the resolved config.


def cached_model(cache: Path | None, key: str, name: str, build, timings: dict | None = None):
    """Build ``(model, log)`` or load it from the cache; ``timings[name]`` gets the build seconds."""
    path = cache / key / name if cache is not None else None
    if path is not None and (path / "manifest.json").exists():
        model, manifest = load_checkpoint(path)
        seconds, log = manifest["train_seconds"], manifest.get("log", [])
    else:
        start = time.perf_counter()
        model, log = build()
        seconds = time.perf_counter() - start
        if path is not None:
            save_checkpoint(path, model, log=log, train_seconds=seconds)
    if timings is not None:
        timings[name] = seconds
    return model, log


@pytest.fixture(scope="session")
def desk():
    cfg = RunConfig()
    cache = Path(os.environ["STABLEVSR_DESK_CACHE"]) if os.environ.get("STABLEVSR_DESK_CACHE") else None
    key = hashlib.sha256(json.dumps(cfg.to_dict(), sort_keys=True).encode()).hexdigest()[:16]
    timings: dict[str, float] = {}
    start = time.perf_counter()
    splits = ex.get_splits(cfg)
    timings["data"] = time.perf_counter() - start
    base, _ = cached_model(cache, key, "base", lambda: ex.run_pretrain(cfg, splits["train"]), timings)
    tcm = cached_model(
        cache, key, "tcm_proposed", lambda: ex.run_train_tcm(cfg, splits["train"], base, "proposed"), timings
    )
    return {"cfg": cfg, "splits": splits, "base": base, "tcm": tcm, "cache": cache, "key": key, "timings": timings}
