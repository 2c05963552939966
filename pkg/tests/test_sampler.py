import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dust.model import DustModel, ModelConfig, ParamStore, param_count
from dust.rng import SeededRng
from dust.sampler import (SamplerConfig, sample_action_only, sample_joint, update_schedule)

SMALL = dict(d_model=8, n_heads=2, n_mmdit=2, n_dit=1, k=3, m=4, d_o=5, mlp_ratio=2)


class ConstantField:
    """Stub velocity field: V_A = c_a, V_o = c_o everywhere; records calls."""

    def __init__(self, c_a, c_o, cfg=None):
        self.cfg = cfg or ModelConfig(**SMALL)
        self.c_a, self.c_o = c_a, c_o
        self.calls = []

    def __call__(self, ctx, state, A, O, tau_a, tau_o):
        self.calls.append((tau_a[0], tau_o[0]))
        return np.broadcast_to(self.c_a, A.shape).copy(), np.broadcast_to(self.c_o, O.shape).copy()


def random_model(seed=0):
    cfg = ModelConfig(**SMALL)
    return DustModel(cfg, ParamStore(cfg, 0.3 * SeededRng(seed).normal(param_count(cfg))))


def obs(B=2, seed=1):
    r = SeededRng(seed)
    return r.normal((B, 2, 8)), r.normal((B, 2))


def rows(B, seed):
    return [SeededRng(seed, (i,)) for i in range(B)]


# ---------------------------------------------------------------- schedules

def test_schedule_examples():
    assert update_schedule(SamplerConfig(4, 4)) == [(j, True) for j in range(1, 5)]
    sched = update_schedule(SamplerConfig(4, 64))
    assert [j for j, a in sched if a] == [16, 32, 48, 64]
    sched = update_schedule(SamplerConfig(4, 16))
    assert [j for j, a in sched if a] == [4, 8, 12, 16] and len(sched) == 16


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 16), st.integers(1, 8))
def test_schedule_counts(n_a, q):
    cfg = SamplerConfig(n_a, n_a * q)
    sched = update_schedule(cfg)
    assert sum(a for _, a in sched) == n_a
    assert [j for j, _ in sched] == list(range(1, n_a * q + 1))
    assert sched[-1][1]


def test_invalid_sampler_configs():
    with pytest.raises(ValueError, match="divisible"):
        SamplerConfig(3, 4)
    with pytest.raises(ValueError, match="n_o == n_a"):
        SamplerConfig(4, 8, mode="sync")
    with pytest.raises(ValueError, match=">= 1"):
        SamplerConfig(0, 4)
    with pytest.raises(ValueError, match="tau_conditioning"):
        SamplerConfig(tau_conditioning="literal")


# ---------------------------------------------------------------- integration

@pytest.mark.parametrize("n_a,n_o", [(1, 1), (1, 4), (2, 8), (4, 16), (4, 64), (3, 9)])
def test_constant_field_is_integrated_exactly(n_a, n_o):
    c_a, c_o = np.array([0.5, -2.0]), np.linspace(-1, 1, 5)
    model = ConstantField(c_a, c_o)
    A0, O0 = SeededRng(2).normal((2, 3, 2)), SeededRng(3).normal((2, 4, 5))
    A, O, tr = sample_joint(model, *obs(), None, SamplerConfig(n_a, n_o), init=(A0, O0))
    np.testing.assert_allclose(A, A0 + c_a, rtol=0, atol=1e-14)
    np.testing.assert_allclose(O, O0 + c_o, rtol=0, atol=1e-14)
    assert tr.n_action_updates == n_a and tr.n_vision_updates == n_o == len(model.calls)


def test_noise_levels_fed_to_model():
    model = ConstantField(0.0, 0.0)
    sample_joint(model, *obs(), rows(2, 0), SamplerConfig(2, 8))
    assert [t for _, t in model.calls] == [j / 8 for j in range(8)]
    # actual conditioning: action level advances only after each action update
    assert [t for t, _ in model.calls] == [0.0] * 4 + [0.5] * 4
    model = ConstantField(0.0, 0.0)
    sample_joint(model, *obs(), rows(2, 0), SamplerConfig(2, 8, tau_conditioning="pseudocode"))
    assert [t for t, _ in model.calls] == [j / 8 for j in range(8)]


def test_terminal_counts_reach_one():
    _, _, tr = sample_joint(ConstantField(0.0, 0.0), *obs(), rows(2, 0), SamplerConfig(4, 32))
    assert tr.action_steps() == [8, 16, 24, 32]
    last = tr.records[-1]
    assert last.tau_o + 1 / 32 == 1.0 and last.tau_a + 1 / 4 == 1.0


def test_q1_async_equals_sync_bit_exact():
    model = random_model(4)
    ctx, state = obs(3)
    for n in (1, 4, 8):
        a = sample_joint(model, ctx, state, rows(3, 7), SamplerConfig(n, n, "async"))
        s = sample_joint(model, ctx, state, rows(3, 7), SamplerConfig(n, n, "sync"))
        assert np.array_equal(a[0], s[0]) and np.array_equal(a[1], s[1])


def test_action_only_matches_sync_and_edge_cases():
    model = random_model(5)
    ctx, state = obs(2)
    A, _, _ = sample_joint(model, ctx, state, rows(2, 9), SamplerConfig(6, 6, "sync"))
    assert np.array_equal(sample_action_only(model, ctx, state, rows(2, 9), 6), A)
    A0, O0 = SeededRng(1).normal((2, 3, 2)), SeededRng(2).normal((2, 4, 5))
    assert np.array_equal(sample_action_only(ConstantField(0.0, 0.0), ctx, state, None, 1,
                                             init=(A0, O0)), A0)
    np.testing.assert_allclose(sample_action_only(ConstantField(0.25, 0.0), ctx, state, None, 7,
                                                  init=(A0, O0)), A0 + 0.25, atol=1e-15)


def test_per_row_streams_make_rows_independent_of_batch():
    model = ConstantField(0.0, 0.0)
    ctx, state = obs(3)
    A3, _, _ = sample_joint(model, ctx, state, rows(3, 11), SamplerConfig())
    A1, _, _ = sample_joint(model, ctx[1:2], state[1:2], [SeededRng(11, (1,))], SamplerConfig())
    assert np.array_equal(A3[1], A1[0])


def test_initial_noise_order_action_first():
    model = ConstantField(0.0, 0.0)
    A, O, _ = sample_joint(model, *obs(1), [SeededRng(12)], SamplerConfig())
    r = SeededRng(12)
    assert np.array_equal(A[0], r.normal((3, 2))) and np.array_equal(O[0], r.normal((4, 5)))


def test_record_states_snapshots():
    _, _, tr = sample_joint(ConstantField(1.0, 1.0), *obs(), rows(2, 0), SamplerConfig(2, 4),
                            record_states=True)
    assert len(tr.snapshots) == 4
    a_moves = [not np.array_equal(tr.snapshots[i][0], tr.snapshots[i - 1][0]) for i in (1, 2, 3)]
    assert a_moves == [True, False, True]


def test_stream_count_must_match_batch():
    with pytest.raises(ValueError, match="rng streams"):
        sample_joint(ConstantField(0.0, 0.0), *obs(3), rows(2, 0), SamplerConfig())
