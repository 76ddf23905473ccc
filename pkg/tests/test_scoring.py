import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from kvevict import (
    Policy,
    TraceGenConfig,
    batch_a2sf,
    drop_scores,
    generate_synthetic_trace,
    init_score_state,
    rank_tokens,
    update_scores,
)
from kvevict.errors import (
    BadAlphaError,
    BadWindowError,
    ConfigError,
    EmptyHeadError,
    RowShapeMismatchError,
    UnknownTokenError,
)
from oracles import ref_accumulate, ref_column_sums, rows_of


def feed(state, rows):
    for r in rows:
        state = update_scores(state, np.asarray(r, dtype=float)[None, None])
    return state


class TestPolicy:
    def test_init_shapes(self):
        st_ = init_score_state(Policy.a2sf(0.2), 2, 4)
        assert st_.acc.shape == (2, 4, 0) and st_.n == 0

    @pytest.mark.parametrize("alpha", [1.0, -0.1, 1.5, None])
    def test_bad_alpha(self, alpha):
        with pytest.raises(BadAlphaError):
            Policy("a2sf", alpha=alpha)

    def test_bad_window(self):
        with pytest.raises(BadWindowError):
            Policy.local(0)

    @pytest.mark.parametrize(
        "text, expected",
        [("full", Policy.full()), ("local:8", Policy.local(8)), ("h2o", Policy.h2o()),
         ("a2sf:0.1", Policy.a2sf(0.1)), ("LOCAL", Policy.local())],
    )
    def test_parse(self, text, expected):
        assert Policy.parse(text) == expected

    @pytest.mark.parametrize("text", ["a2sf", "a2sf:x", "lru", "local:x"])
    def test_parse_errors(self, text):
        with pytest.raises(ConfigError):
            Policy.parse(text)

    def test_alpha_zero_allowed(self):
        assert Policy.a2sf(0.0).alpha == 0.0


class TestUpdateScores:
    def test_single_step(self):
        st_ = feed(init_score_state(Policy.a2sf(0.7), 1, 1), [[1.0]])
        assert st_.accumulators(0, 0) == {0: 1.0}

    def test_two_steps_a2sf(self):
        st_ = feed(init_score_state(Policy.a2sf(0.5), 1, 1), [[1.0], [0.5, 0.5]])
        assert st_.accumulators(0, 0) == {0: 1.0, 1: 0.5}

    def test_two_steps_a2s(self):
        st_ = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0], [0.5, 0.5]])
        assert st_.accumulators(0, 0) == {0: 1.5, 1: 0.5}

    def test_positional_policies_keep_zero(self):
        st_ = feed(init_score_state(Policy.local(), 1, 1), [[1.0], [0.5, 0.5]])
        assert st_.accumulators(0, 0) == {0: 0.0, 1: 0.0}
        assert st_.n == 2

    def test_wrong_length(self):
        st_ = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0]])
        with pytest.raises(RowShapeMismatchError):
            update_scores(st_, np.ones((1, 1, 3)) / 3)

    def test_mass_on_evicted_token(self):
        st_ = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0], [0.5, 0.5]])
        st_ = drop_scores(st_, [[{0}]])
        with pytest.raises(RowShapeMismatchError):
            update_scores(st_, np.array([[[0.2, 0.3, 0.5]]]))

    def test_returns_new_state(self):
        s0 = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0]])
        s1 = update_scores(s0, np.array([[[0.4, 0.6]]]))
        assert s0.n == 1 and s1.n == 2
        assert s0.accumulators(0, 0) == {0: 1.0}

    def test_a2s_never_decreases(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=30, n_heads=2, seed=4))
        st_ = init_score_state(Policy.h2o(), 1, 2)
        prev = None
        for q in range(tr.seq_len):
            st_ = update_scores(st_, tr.step_rows(q))
            if prev is not None:
                assert np.all(st_.acc[..., :-1] >= prev)
            prev = st_.acc.copy()


class TestBatch:
    def test_hand_example(self, hand_rows):
        np.testing.assert_allclose(batch_a2sf(hand_rows, 0.5), [0.70, 0.55, 0.50], rtol=0, atol=1e-15)

    def test_alpha_zero_is_last_row(self, hand_rows):
        assert batch_a2sf(hand_rows, 0.0).tolist() == hand_rows[-1]

    def test_alpha_one_is_column_sums(self, hand_rows):
        assert batch_a2sf(hand_rows, 1.0).tolist() == ref_column_sums(hand_rows)

    def test_batched_leading_axes(self):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=12, n_layers=2, n_heads=3, seed=9))
        full = batch_a2sf(tr.scores, 0.3)
        assert full.shape == (2, 3, 12)
        for l in range(2):
            for h in range(3):
                np.testing.assert_allclose(full[l, h], ref_accumulate(rows_of(tr.scores[l, h]), 0.3),
                                           rtol=1e-12, atol=0)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(2, 64), st.floats(0.0, 0.99), st.integers(0, 10_000))
    def test_streaming_matches_batch(self, T, alpha, seed):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=T, n_heads=2, sink_strength=3, seed=seed))
        st_ = init_score_state(Policy.a2sf(alpha), 1, 2)
        for q in range(T):
            st_ = update_scores(st_, tr.step_rows(q))
        np.testing.assert_allclose(st_.acc, batch_a2sf(tr.scores, alpha), rtol=1e-9, atol=1e-300)

    @settings(max_examples=30, deadline=None)
    @given(st.integers(2, 64), st.floats(0.01, 0.99), st.integers(0, 10_000))
    def test_geometric_bound(self, T, alpha, seed):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=T, sink_strength=6, seed=seed))
        acc = batch_a2sf(tr.scores[0, 0], alpha)
        assert np.all(acc <= 1 / (1 - alpha) + 1e-12)
        assert acc[-1] <= 1.0
        assert np.all(acc >= 0)


class TestRankAndDrop:
    def _state(self, acc):
        st_ = init_score_state(Policy.a2sf(0.5), 1, 1)
        return type(st_)(st_.policy, np.array([[acc]], dtype=float),
                         np.ones((1, 1, len(acc)), dtype=bool), len(acc))

    def test_sorted(self):
        assert rank_tokens(self._state([1.5, 0.5]), 0, 0).tolist() == [0, 1]

    def test_tie_goes_to_recent(self):
        assert rank_tokens(self._state([0.5, 0.5]), 0, 0).tolist() == [1, 0]

    def test_hand_batch_order(self, hand_rows):
        st_ = feed(init_score_state(Policy.a2sf(0.5), 1, 1), hand_rows)
        assert rank_tokens(st_, 0, 0).tolist() == [0, 1, 2]

    def test_empty_head(self):
        with pytest.raises(EmptyHeadError):
            rank_tokens(init_score_state(Policy.h2o(), 1, 1), 0, 0)

    @given(st.lists(st.sampled_from([0.0, 0.25, 0.5, 1.0]), min_size=1, max_size=12), st.randoms())
    def test_permutation_invariant(self, values, rnd):
        tokens = list(range(len(values)))
        expected = sorted(tokens, key=lambda k: (-values[k], -k))
        shuffled = tokens[:]
        rnd.shuffle(shuffled)
        from kvevict.scoring import _rank
        got = _rank(np.array(shuffled), np.array([values[k] for k in shuffled]))
        assert got.tolist() == expected

    def test_drop(self):
        st_ = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0], [0.5, 0.5]])
        assert drop_scores(st_, [[{1}]]).accumulators(0, 0) == {0: 1.5}

    def test_drop_nothing(self):
        st_ = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0], [0.5, 0.5]])
        assert drop_scores(st_, [[set()]]) is st_

    def test_drop_unknown(self):
        st_ = feed(init_score_state(Policy.h2o(), 1, 1), [[1.0], [0.5, 0.5]])
        with pytest.raises(UnknownTokenError):
            drop_scores(st_, [[{5}]])
        gone = drop_scores(st_, [[{1}]])
        with pytest.raises(UnknownTokenError):
            drop_scores(gone, [[{1}]])

    @settings(max_examples=25, deadline=None)
    @given(st.integers(4, 30), st.floats(0.0, 0.95), st.integers(0, 1000), st.data())
    def test_evict_then_update_matches_restricted_sum(self, T, alpha, seed, data):
        tr = generate_synthetic_trace(TraceGenConfig(seq_len=T, seed=seed))
        evict_at = data.draw(st.integers(1, T - 2))
        victims = data.draw(st.sets(st.integers(0, evict_at), max_size=evict_at))
        rows = rows_of(tr.scores[0, 0])
        st_ = init_score_state(Policy.a2sf(alpha), 1, 1)
        for q in range(T):
            row = np.array(rows[q])
            row[: st_.n][~st_.live[0, 0]] = 0.0
            st_ = update_scores(st_, row[None, None])
            if q == evict_at:
                st_ = drop_scores(st_, [[victims]])
        expected = ref_accumulate(rows, alpha)
        for k, v in st_.accumulators(0, 0).items():
            assert k not in victims
            assert v == pytest.approx(expected[k], rel=1e-9)
