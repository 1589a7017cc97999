import math
import threading

import numpy as np
import pytest
from hypothesis import assume, given, settings
from hypothesis import strategies as st

from stormlab.assessment import (ExpertScoreTable, ScoreCache, assess, ensemble_assess,
                                 method_means, pooled_vlm_vis, score_from_logits, vlm_vis)
from stormlab.backends import MockOracleRater, RatingBackend, RatingLogits
from stormlab.core import DEFAULT_RATING_TEMPLATE, ImageSample
from stormlab.errors import DomainError, PartialResultError, ProtocolError, TransportError
from stormlab.toydata import apply_haze

from conftest import oracle_pair

T = DEFAULT_RATING_TEMPLATE
finite = st.floats(-50, 50, allow_nan=False)


def expected_rating(logits):
    """Reference expectation computed with log-sum-exp in pure Python."""
    m = max(logits)
    weights = [math.exp(v - m) for v in logits]
    total = math.fsum(weights)
    return math.fsum((i + 1) * w for i, w in enumerate(weights)) / total


class TestScoreFromLogits:
    def test_uniform_is_three(self):
        assert score_from_logits((0.3,) * 5) == 3.0

    def test_hand_example(self):
        s = score_from_logits((0.0, 0.0, 0.0, 0.0, math.log(6)))
        assert s == pytest.approx(4.0, abs=1e-12)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(finite, min_size=5, max_size=5), st.floats(-1e3, 1e3))
    def test_shift_invariant(self, logits, c):
        assert score_from_logits([v + c for v in logits]) == \
            pytest.approx(score_from_logits(logits), abs=1e-9)

    @settings(max_examples=300, deadline=None)
    @given(st.lists(finite, min_size=5, max_size=5))
    def test_matches_reference_and_bounds(self, logits):
        s = score_from_logits(logits)
        assert 1.0 <= s <= 5.0
        assert s == pytest.approx(expected_rating(logits), abs=1e-9)

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.floats(-10, 10), min_size=5, max_size=5), st.floats(0.01, 5))
    def test_monotone_in_extreme_logits(self, logits, delta):
        up5 = logits[:4] + [logits[4] + delta]
        up1 = [logits[0] + delta] + logits[1:]
        assert score_from_logits(up5) > score_from_logits(logits)
        assert score_from_logits(up1) < score_from_logits(logits)

    @pytest.mark.parametrize("bad", [float("nan"), float("inf")])
    def test_non_finite(self, bad):
        with pytest.raises(DomainError):
            score_from_logits((0, 0, 0, 0, bad))


class TestAssess:
    def setup_method(self):
        self.clean = np.random.default_rng(3).uniform(0.1, 0.6, (32, 32, 3))
        self.rater = MockOracleRater("oracle-mae", {"x": self.clean})

    def test_clean_scores_high(self):
        assert assess(ImageSample("x", self.clean), self.rater, T).value > 4.5

    def test_fully_hazed_scores_low(self):
        hazed = apply_haze(self.clean, np.zeros((32, 32)), np.full(3, 0.9))
        assert assess(ImageSample("x", hazed), self.rater, T).value < 1.5

    def test_repeat(self):
        img = ImageSample("x", np.clip(self.clean + 0.1, 0, 1))
        assert assess(img, self.rater, T) == assess(img, self.rater, T)

    def test_cache_persists(self, tmp_path):
        path = tmp_path / "scores.jsonl"
        img = ImageSample("x", np.clip(self.clean + 0.1, 0, 1))
        first = assess(img, self.rater, T, ScoreCache(path)).value
        reloaded = ScoreCache(path)
        assert reloaded.get(ScoreCache.key(img, "oracle-mae", T)) == first
        assert len(path.read_text().splitlines()) == 1

    def test_cache_key_includes_template(self):
        img = ImageSample("x", self.clean)
        other = T.replace("USER", "HUMAN")
        assert ScoreCache.key(img, "e", T) != ScoreCache.key(img, "e", other)


class _Flaky(RatingBackend):
    def __init__(self, name, fail_times, error=TransportError):
        self.name, self.fail_times, self.error, self.calls = name, fail_times, error, 0
        self.lock = threading.Lock()

    def rate_image(self, image, template):
        with self.lock:
            self.calls += 1
            if self.calls <= self.fail_times:
                raise self.error("down")
        return RatingLogits((0, 0, 0, 0, 1))


class TestEnsemble:
    def setup_method(self):
        rng = np.random.default_rng(5)
        self.clean = {f"i{k}": rng.uniform(0.1, 0.9, (16, 16, 3)) for k in range(3)}
        self.images = [ImageSample(i, np.clip(c + 0.05 * k, 0, 1))
                       for k, (i, c) in enumerate(self.clean.items())]

    def test_single_cell_equals_assess(self):
        rater = oracle_pair(self.clean)[0]
        table = ensemble_assess(self.images[:1], [rater], T)
        assert table.rows == {"i0": {"oracle-mae": assess(self.images[0], rater, T).value}}

    def test_identical_rules_equal_columns(self):
        a = MockOracleRater("a", self.clean)
        b = MockOracleRater("b", self.clean)
        table = ensemble_assess(self.images, [a, b], T)
        assert table.column("a") == table.column("b")

    def test_cellwise_oracle(self):
        raters = oracle_pair(self.clean)
        table = ensemble_assess(self.images, raters, T)
        for img in self.images:
            for r in raters:
                assert table.rows[img.id][r.name] == assess(img, r, T).value

    def test_concurrency_does_not_change_values(self):
        serial = oracle_pair(self.clean)
        parallel = oracle_pair(self.clean)
        for r in parallel:
            r.max_in_flight = 4
        assert ensemble_assess(self.images, serial, T).rows == \
            ensemble_assess(self.images, parallel, T).rows

    def test_transport_errors_retried(self):
        flaky = _Flaky("flaky", fail_times=2)
        table = ensemble_assess(self.images[:1], [flaky], T, retries=2)
        assert flaky.calls == 3 and "i0" in table.rows

    def test_partial_result(self):
        good = oracle_pair(self.clean)[0]
        with pytest.raises(PartialResultError) as info:
            ensemble_assess(self.images, [good, _Flaky("bad", 99, ProtocolError)], T)
        assert info.value.failed_ids == ["i0", "i1", "i2"]
        assert set(info.value.partial.column("oracle-mae")) == {"i0", "i1", "i2"}

    def test_needs_expert(self):
        with pytest.raises(DomainError):
            ensemble_assess(self.images, [], T)

    def test_records_round_trip(self):
        table = ensemble_assess(self.images, oracle_pair(self.clean), T)
        records = table.to_records()
        assert [r["image_id"] for r in records] == sorted(self.clean)
        assert ExpertScoreTable.from_records(records).rows == table.rows


score = st.floats(1.0, 5.0, allow_nan=False)


class TestVlmVis:
    def test_endpoints(self):
        out = vlm_vis(ExpertScoreTable({"a": {"e": 1.0}, "b": {"e": 5.0}}))
        assert out == {"a": 0.0, "b": 1.0}

    def test_hand_example_with_degenerate_column(self):
        table = ExpertScoreTable({"a": {"e1": 1, "e2": 5}, "b": {"e1": 3, "e2": 5},
                                  "c": {"e1": 5, "e2": 5}})
        assert vlm_vis(table) == {"a": 0.25, "b": 0.5, "c": 0.75}

    def test_affine_invariance_exact_on_dyadic_scores(self):
        rows = {f"i{k}": {"e1": 1 + k / 4, "e2": 5 - k / 8} for k in range(9)}
        scaled = {i: {e: 2 * s + 1 for e, s in r.items()} for i, r in rows.items()}
        assert vlm_vis(ExpertScoreTable(rows)) == vlm_vis(ExpertScoreTable(scaled))

    @settings(max_examples=200, deadline=None)
    @given(st.lists(st.tuples(score, score), min_size=2, max_size=12),
           st.floats(0.1, 10), st.floats(-5, 5), st.floats(0.1, 10), st.floats(-5, 5))
    def test_affine_invariance_and_range(self, pairs, a1, b1, a2, b2):
        rows = {f"i{k}": {"e1": p[0], "e2": p[1]} for k, p in enumerate(pairs)}
        scaled = {i: {"e1": a1 * r["e1"] + b1, "e2": a2 * r["e2"] + b2} for i, r in rows.items()}
        base, out = vlm_vis(ExpertScoreTable(rows)), vlm_vis(ExpertScoreTable(scaled))
        assume(all(len({r[e] for r in rows.values()}) > 1 for e in ("e1", "e2")))
        for i in rows:
            assert 0.0 <= base[i] <= 1.0
            assert out[i] == pytest.approx(base[i], abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(score, min_size=2, max_size=20, unique=True))
    def test_column_hits_zero_and_one(self, scores):
        out = vlm_vis(ExpertScoreTable({f"i{k}": {"e": s} for k, s in enumerate(scores)}))
        assert min(out.values()) == 0.0 and max(out.values()) == 1.0

    def test_empty(self):
        with pytest.raises(DomainError):
            vlm_vis(ExpertScoreTable())

    def test_incomplete_row(self):
        with pytest.raises(DomainError):
            vlm_vis(ExpertScoreTable({"a": {"e1": 1.0, "e2": 2.0}, "b": {"e1": 3.0}}))

    def test_pooled_methods_share_range(self):
        tables = {"m1": ExpertScoreTable({"a": {"e": 1.0}, "b": {"e": 2.0}}),
                  "m2": ExpertScoreTable({"a": {"e": 3.0}, "b": {"e": 5.0}})}
        assert pooled_vlm_vis(tables) == {"m1": {"a": 0.0, "b": 0.25},
                                          "m2": {"a": 0.5, "b": 1.0}}
        assert method_means(tables) == {"m1": 0.125, "m2": 0.75}
