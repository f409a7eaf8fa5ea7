import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import tiny_config
from stablevsr.dataio import DataConfig, VideoSequence, generate_dataset
from stablevsr.denoiser import Denoiser
from stablevsr.sampler import (
    STRATEGIES,
    SamplerConfig,
    SamplerError,
    SamplingTrace,
    TraceEntry,
    plan_schedule,
    sample_batch,
    sample_sequence,
)
from stablevsr.schedule import build_schedule

SCHED = build_schedule(1000)


def entries(trace):
    return [(e.t, e.frame, e.guidance_source, e.direction) for e in trace.entries]


# hand-executed walks of the bidirectional algorithm, 0-based frames
HAND_N3_T2 = [
    (2, 0, None, "forward"), (2, 1, 0, "forward"), (2, 2, 1, "forward"),
    (1, 2, None, "backward"), (1, 1, 2, "backward"), (1, 0, 1, "backward"),
]
HAND_N4_T3 = [
    (3, 0, None, "forward"), (3, 1, 0, "forward"), (3, 2, 1, "forward"), (3, 3, 2, "forward"),
    (2, 3, None, "backward"), (2, 2, 3, "backward"), (2, 1, 2, "backward"), (2, 0, 1, "backward"),
    (1, 0, None, "forward"), (1, 1, 0, "forward"), (1, 2, 1, "forward"), (1, 3, 2, "forward"),
]  # fmt: skip


def test_bidirectional_hand_traces():
    t = plan_schedule(3, 2, "bidirectional")
    assert entries(t) == HAND_N3_T2 and t.denoiser_eval_count == 6
    t = plan_schedule(4, 3, "bidirectional")
    assert entries(t) == HAND_N4_T3 and t.denoiser_eval_count == 12


def test_other_strategies_hand_traces():
    assert entries(plan_schedule(3, 2, "unidirectional")) == [
        (2, 0, None, "forward"), (2, 1, 0, "forward"), (2, 2, 1, "forward"),
        (1, 0, None, "forward"), (1, 1, 0, "forward"), (1, 2, 1, "forward"),
    ]  # fmt: skip
    assert entries(plan_schedule(3, 2, "autoregressive")) == [
        (2, 0, None, "forward"), (1, 0, None, "forward"),
        (2, 1, 0, "forward"), (1, 1, 0, "forward"),
        (2, 2, 1, "forward"), (1, 2, 1, "forward"),
    ]  # fmt: skip
    assert all(e.guidance_source is None for e in plan_schedule(4, 3, "single_frame").entries)


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_single_frame_sequence_never_guided(strategy):
    t = plan_schedule(1, 5, strategy)
    assert all(e.guidance_source is None for e in t.entries)
    assert [e.t for e in t.entries] == [5, 4, 3, 2, 1]


@settings(max_examples=60, deadline=None)
@given(N=st.integers(1, 9), T=st.integers(1, 12), strategy=st.sampled_from(STRATEGIES))
def test_plan_invariants(N, T, strategy):
    plan = plan_schedule(N, T, strategy)
    assert plan.denoiser_eval_count == len(plan.entries) == N * T
    assert sorted((e.t, e.frame) for e in plan.entries) == sorted((t, i) for t in range(1, T + 1) for i in range(N))
    if strategy != "autoregressive":
        for t in range(1, T + 1):
            step = [e for e in plan.entries if e.t == t]
            # the first frame processed at each step is the only unguided one
            assert step[0].guidance_source is None
            if strategy != "single_frame":
                assert all(e.guidance_source == prev.frame for prev, e in zip(step, step[1:]))


@settings(max_examples=40, deadline=None)
@given(N=st.integers(3, 9), T=st.integers(1, 12))
def test_bidirectional_alternation(N, T):
    plan = plan_schedule(N, T, "bidirectional")
    for i in range(1, N - 1):
        srcs = [e.guidance_source for e in plan.entries if e.frame == i]
        assert srcs.count(i - 1) == (T + 1) // 2
        assert srcs.count(i + 1) == T // 2


def test_plan_errors():
    with pytest.raises(SamplerError):
        plan_schedule(0, 3, "bidirectional")
    with pytest.raises(SamplerError):
        plan_schedule(3, 0, "bidirectional")
    with pytest.raises(SamplerError):
        plan_schedule(3, 3, "zigzag")
    with pytest.raises(SamplerError):
        SamplerConfig(strategy="zigzag")


def test_trace_jsonl_roundtrip(tmp_path):
    plan = plan_schedule(3, 2, "bidirectional")
    plan.write(tmp_path / "trace.jsonl")
    back = SamplingTrace.read(tmp_path / "trace.jsonl")
    assert back.entries == plan.entries and back.denoiser_eval_count == 6
    assert (tmp_path / "trace.jsonl").read_text().count("\n") == 6


# ---------------------------------------------------------------------------
# sampling with a tiny model


@pytest.fixture(scope="module")
def tiny():
    torch.manual_seed(0)
    model = Denoiser(tiny_config())
    with torch.no_grad():
        # nonzero TCM outputs so guidance affects the result
        for p in model.tcm.zero_convs.parameters():
            p.normal_(0, 0.05)
    model.eval()
    return model


@pytest.fixture(scope="module")
def clips():
    splits = generate_dataset(DataConfig(num_train=0, num_test=2, num_frames=4, hr_size=32, seed=3))
    return [p.lr for p in splits["test"]]


@pytest.mark.parametrize("strategy", STRATEGIES)
def test_realised_trace_equals_plan(tiny, clips, strategy):
    cfg = SamplerConfig(strategy=strategy, T_inference=3, flow_backend="oracle")
    hr, trace = sample_batch(clips, tiny, SCHED, cfg)
    assert hr.shape == (2, 4, 3, 32, 32)
    assert hr.min() >= 0 and hr.max() <= 1
    assert trace.entries == plan_schedule(4, 3, strategy).entries


def test_sampling_is_deterministic(tiny, clips):
    cfg = SamplerConfig(T_inference=3, seed=5)
    a, ta = sample_sequence(clips[0], tiny, SCHED, cfg)
    b, tb = sample_sequence(clips[0], tiny, SCHED, cfg)
    assert np.array_equal(a.frames, b.frames) and ta.entries == tb.entries
    c, _ = sample_sequence(clips[0], tiny, SCHED, SamplerConfig(T_inference=3, seed=6))
    assert not np.array_equal(a.frames, c.frames)


def test_strategy_changes_output(tiny, clips):
    cfg = dict(T_inference=3, flow_backend="oracle")
    single, _ = sample_sequence(clips[0], tiny, SCHED, SamplerConfig(strategy="single_frame", **cfg))
    bi, _ = sample_sequence(clips[0], tiny, SCHED, SamplerConfig(strategy="bidirectional", **cfg))
    # the first frame processed at the first step is unguided, later ones are not
    assert not np.array_equal(single.frames, bi.frames)


def test_single_frame_identical_frames(tiny, clips):
    lr = VideoSequence(np.repeat(clips[0].frames[:1], 3, axis=0))
    out, _ = sample_sequence(lr, tiny, SCHED, SamplerConfig("single_frame", T_inference=3), frame_seeds=[7, 7, 7])
    assert np.array_equal(out.frames[0], out.frames[1]) and np.array_equal(out.frames[1], out.frames[2])


def test_single_frame_permutation_invariance(tiny, clips):
    seeds = np.array([11, 12, 13, 14])
    perm = np.array([2, 0, 3, 1])
    cfg = SamplerConfig("single_frame", T_inference=3)
    out, _ = sample_sequence(clips[0], tiny, SCHED, cfg, frame_seeds=seeds)
    permuted = VideoSequence(clips[0].frames[perm])
    out_p, _ = sample_sequence(permuted, tiny, SCHED, cfg, frame_seeds=seeds[perm])
    assert np.array_equal(out_p.frames, out.frames[perm])


def test_batch_matches_individual_runs(tiny, clips):
    cfg = SamplerConfig(T_inference=2, flow_backend="oracle")
    seeds = np.arange(8).reshape(2, 4)
    both, _ = sample_batch(clips, tiny, SCHED, cfg, frame_seeds=seeds)
    for b in range(2):
        one, _ = sample_sequence(clips[b], tiny, SCHED, cfg, frame_seeds=seeds[b])
        np.testing.assert_allclose(both[b], one.frames, atol=1e-5)


def test_block_matching_backend_runs(tiny, clips):
    hr, _ = sample_batch(clips, tiny, SCHED, SamplerConfig(T_inference=2, flow_backend="block_matching"))
    assert np.isfinite(hr).all()


def test_sampler_errors(tiny, clips):
    no_tcm = Denoiser(tiny_config(), with_tcm=False)
    with pytest.raises(SamplerError, match="temporal conditioning"):
        sample_sequence(clips[0], no_tcm, SCHED, SamplerConfig(T_inference=2))
    # single_frame needs no TCM
    sample_sequence(clips[0], no_tcm, SCHED, SamplerConfig("single_frame", T_inference=2))
    with pytest.raises(SamplerError, match="latent channels"):
        sample_sequence(clips[0], tiny, SCHED, SamplerConfig(T_inference=2, codec_mode="pixel"))
    short = VideoSequence(clips[1].frames[:3])
    with pytest.raises(SamplerError, match="same length"):
        sample_batch([clips[0], short], tiny, SCHED, SamplerConfig(T_inference=2))
    with pytest.raises(SamplerError, match="exceed"):
        sample_sequence(clips[0], tiny, build_schedule(2000), SamplerConfig(T_inference=2000))


def test_trace_entry_fields():
    e = TraceEntry(3, 1, 0, "forward")
    assert (e.t, e.frame, e.guidance_source, e.direction) == (3, 1, 0, "forward")
