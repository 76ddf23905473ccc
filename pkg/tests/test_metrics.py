import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import load_fixture
from kvevict import (
    Policy,
    ToyDecoder,
    TraceGenConfig,
    cosine_similarity,
    evaluate_live,
    evaluate_replay,
    generate_synthetic_trace,
    ideal_mask,
    mask_overlap,
    output_drift,
    policy_mask,
    replay_with_mask,
    run_live,
    score_trajectory,
    structured_tokens,
)
from kvevict.errors import ShapeMismatchError, ZeroVectorError
from workloads import sink_trace


class TestCosine:
    def test_identity(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=12, n_heads=3, seed=0))
        per_head, mean = cosine_similarity(tr, tr)
        assert per_head.shape == (1, 3)
        assert mean == pytest.approx(1.0, abs=1e-12)

    def test_disjoint_supports(self):
        a = np.zeros((3, 3))
        b = np.zeros((3, 3))
        a[0, 0] = a[2, 1] = 1.0
        b[1, 1] = b[2, 2] = 1.0
        assert cosine_similarity(a, b)[1] == 0.0

    def test_zero_vector(self):
        with pytest.raises(ZeroVectorError):
            cosine_similarity(np.zeros((2, 2)), np.eye(2))

    def test_hand_fixture(self, hand_trace):
        fx = load_fixture("hand_cosine")
        ideal = replay_with_mask(hand_trace, ideal_mask(hand_trace, fx["ideal_budget"]))
        local = replay_with_mask(hand_trace, policy_mask(hand_trace, Policy.local(fx["local_window"]), 2))
        assert cosine_similarity(local, ideal)[1] == pytest.approx(fx["cosine"], abs=1e-12)
        # independently: 2.125 / sqrt(2.03125 * 3)
        assert fx["cosine"] == pytest.approx(2.125 / np.sqrt(2.03125 * 3), abs=1e-15)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(0, 1000), st.integers(0, 1000), st.floats(0.01, 100))
    def test_symmetric_and_scale_invariant(self, s1, s2, c):
        a = generate_synthetic_trace(TraceGenConfig(seq_len=10, n_heads=2, seed=s1)).scores
        b = generate_synthetic_trace(TraceGenConfig(seq_len=10, n_heads=2, seed=s2)).scores
        ab, ba = cosine_similarity(a, b)[0], cosine_similarity(b, a)[0]
        np.testing.assert_allclose(ab, ba, rtol=0, atol=1e-15)
        np.testing.assert_allclose(cosine_similarity(c * a, b)[0], ab, rtol=1e-12)
        assert np.all((-1 <= ab) & (ab <= 1))


class TestOverlap:
    def test_identical(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=12, n_heads=3, seed=0))
        m = ideal_mask(tr, 4)
        assert mask_overlap(m, m) == 1.0

    def test_always_disagreeing(self):
        T = 6
        a = np.zeros((1, 1, T, T), dtype=bool)
        b = np.zeros_like(a)
        for q in range(1, T):
            a[0, 0, q, q] = True
            b[0, 0, q, q - 1] = True
        a, b = a[:, :, 1:, :], b[:, :, 1:, :]
        assert mask_overlap(a, b) == 0.0

    def test_one_only_if_identical(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=20, n_heads=2, seed=1))
        a, b = ideal_mask(tr, 4), policy_mask(tr, Policy.local(), 4)
        assert not np.array_equal(a, b)
        assert mask_overlap(a, b) < 1.0

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            mask_overlap(np.ones((1, 1, 2, 2), bool), np.ones((1, 1, 3, 3), bool))

    def test_sink_fixture(self):
        fx = load_fixture("sink_overlap")
        tr = sink_trace()
        got = mask_overlap(policy_mask(tr, Policy.a2sf(fx["alpha"]), fx["budget"]), ideal_mask(tr, fx["budget"]))
        assert got == pytest.approx(fx["overlap"], abs=1e-12)


class TestTrajectory:
    def test_hand_a2sf(self, hand_trace):
        series = score_trajectory(hand_trace, 0, Policy.a2sf(0.5))
        np.testing.assert_allclose(series[:, 1], [1.0, 1.0, 0.70], rtol=0, atol=1e-15)
        assert series[:, 0].tolist() == [1.0, 0.5, 0.2]

    def test_starts_at_token_step(self, hand_trace):
        assert len(score_trajectory(hand_trace, 2, Policy.h2o())) == 1

    def test_a2s_monotone(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=40, n_heads=2, seed=3))
        for k in (0, 5, 20):
            acc = score_trajectory(tr, k, Policy.h2o(), head=1)[:, 1]
            assert np.all(np.diff(acc) >= 0)

    def test_a2sf_can_decrease(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=40, seed=3))
        assert np.any(np.diff(score_trajectory(tr, 5, Policy.a2sf(0.5))[:, 1]) < 0)

    def test_sink_stays_row_max(self):
        tr = sink_trace()
        raw = score_trajectory(tr, 0, Policy.a2sf(0.2))[:, 0]
        assert np.mean(raw[1:] == tr.scores[0, 0, 1:].max(axis=-1)) >= 0.9

    def test_errors(self, hand_trace):
        with pytest.raises(ShapeMismatchError):
            score_trajectory(hand_trace, 3, Policy.h2o())
        with pytest.raises(ShapeMismatchError):
            score_trajectory(hand_trace, 0, Policy.local())


class TestDrift:
    def test_zero_when_budget_covers_sequence(self):
        dec = ToyDecoder(2, 2, 8, 16, seed=0)
        toks = structured_tokens(20, 16, 0)
        full = run_live(dec, toks, Policy.full(), 20)
        assert output_drift(full, run_live(dec, toks, Policy.a2sf(0.2), 20)) == 0.0
        assert output_drift(full, run_live(dec, toks, Policy.local(), 25)) == 0.0

    def test_nonnegative(self):
        dec = ToyDecoder(2, 2, 8, 16, seed=0)
        toks = structured_tokens(30, 16, 0)
        full = run_live(dec, toks, Policy.full(), 4)
        for p in (Policy.local(), Policy.h2o(), Policy.a2sf(0.2)):
            assert output_drift(full, run_live(dec, toks, p, 4)) > 0

    def test_length_mismatch(self):
        with pytest.raises(ShapeMismatchError):
            output_drift(np.ones((3, 2)), np.ones((4, 2)))

    def test_live_report(self):
        dec = ToyDecoder(1, 2, 8, 16, seed=2)
        toks = structured_tokens(24, 16, 2)
        rep = evaluate_live(dec, toks, Policy.a2sf(0.2), 5)
        assert rep.mode == "live" and rep.output_drift > 0
        assert rep.cosine.shape == (1, 2) and 0 < rep.mean_overlap <= 1


def test_replay_report_full_policy():
    tr = generate_synthetic_trace(TraceGenConfig(seq_len=16, n_heads=2, seed=0))
    rep = evaluate_replay(tr, Policy.full(), 16)
    assert rep.mean_cosine == pytest.approx(1.0, abs=1e-12)
    assert rep.mean_overlap == 1.0
