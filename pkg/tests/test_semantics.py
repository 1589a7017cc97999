import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stormlab.backends import EmbeddingVector, MockCaptioner, MockRewriter, TagBasisEncoder
from stormlab.core import Weather
from stormlab.errors import DomainError, LoadError, TransportError
from stormlab.semantics import (DescriptionPair, IclExampleSet, build_description_pair,
                                build_pair_store, content_overlap, degradation_lexicon,
                                description_loss, has_degradation_term, load_icl_examples,
                                load_pair_store, refresh_descriptions, save_pair_store, sem_loss)

from conftest import make_image

SCENES = {"x": ["a person walking", "street"]}
ICL = IclExampleSet((("a car in the rain", "a car on a sunny day"),))


class CountingCaptioner(MockCaptioner):
    def __init__(self, fail_ids=()):
        super().__init__("counting")
        self.calls, self.fail_ids = 0, set(fail_ids)

    def caption_image(self, image):
        self.calls += 1
        if image.id in self.fail_ids:
            raise TransportError("captioner down")
        return super().caption_image(image)


class FakeDb:
    """Just enough of the pseudo-label database for refresh_descriptions."""

    def __init__(self, ids):
        self.records = {i: SimpleNamespace(version=1) for i in ids}

    def ids(self):
        return sorted(self.records)

    def __getitem__(self, image_id):
        return self.records[image_id]


class TestValidator:
    def test_lexicon_contents(self):
        assert degradation_lexicon() >= {"rain", "rainy", "haze", "hazy", "fog", "foggy", "snow",
                                         "snowy", "overcast", "storm", "drizzle", "mist"}

    def test_lexicon_hits(self):
        assert has_degradation_term("A Foggy morning")
        assert not has_degradation_term("a rainbow over the hill")

    def test_overlap_ignores_weather_and_stopwords(self):
        assert content_overlap("a dog in the rain", "the dog on a sunny day") == \
            pytest.approx(1 / 3)


class TestBuildPair:
    def test_rain_caption_rewritten(self, tag_encoder):
        img = make_image("x", tag=Weather.RAIN)
        pair = build_description_pair(img, MockCaptioner(scenes=SCENES), MockRewriter(), ICL,
                                      tag_encoder)
        assert pair.d_neg == "a person walking in heavy rain on the street"
        assert {"person", "street"} <= set(pair.d_pos.split())
        assert "rain" not in pair.d_pos.split()
        assert pair.validated
        assert np.linalg.norm(pair.emb_pos.values) == pytest.approx(1.0)

    def test_echo_keeps_haze_unvalidated(self, tag_encoder):
        img = make_image("x", tag=Weather.HAZE)
        pair = build_description_pair(img, MockCaptioner(scenes=SCENES),
                                      MockRewriter(mode="echo"), ICL, tag_encoder)
        assert "haze" in pair.d_pos and not pair.validated

    def test_drift_zero_overlap_unvalidated(self, tag_encoder):
        img = make_image("x", tag=Weather.SNOW)
        pair = build_description_pair(img, MockCaptioner(scenes=SCENES),
                                      MockRewriter(mode="drift"), ICL, tag_encoder)
        assert content_overlap(pair.d_neg, pair.d_pos) == 0.0 and not pair.validated

    def test_retries(self, tag_encoder):
        calls = []

        class Counting(MockRewriter):
            def rewrite_description(self, negative, icl_examples=()):
                calls.append(negative)
                return negative

        build_description_pair(make_image("x", tag=Weather.RAIN), MockCaptioner(), Counting(),
                               ICL, tag_encoder)
        assert len(calls) == 3

    def test_default_icl_fixture(self):
        icl = load_icl_examples()
        assert len(icl.pairs) == 6
        assert all(not has_degradation_term(pos) for _, pos in icl.pairs)

    def test_validated_pair_rejects_weather_term(self, tag_encoder):
        emb = tag_encoder.embed_text("rain")
        with pytest.raises(DomainError):
            DescriptionPair("x", "a car in rain", "a car in rain", emb, emb, True)


def pair_with_embeddings(pos, neg, validated=True):
    return DescriptionPair("x", "a car in the rain", "a car on a sunny day",
                           EmbeddingVector(np.array(neg, dtype=float)),
                           EmbeddingVector(np.array(pos, dtype=float)), validated)


E_POS, E_NEG = [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]


def embedding(cos_pos, cos_neg):
    v = np.array([cos_pos, cos_neg, math.sqrt(max(0.0, 1 - cos_pos ** 2 - cos_neg ** 2))])
    return torch.tensor(v)


class TestSemLoss:
    def test_equal_cosines_ln2(self):
        loss = sem_loss(embedding(0.3, 0.3), pair_with_embeddings(E_POS, E_NEG))
        assert float(loss) == pytest.approx(math.log(2), abs=1e-12)

    def test_opposite_embeddings(self):
        pair = pair_with_embeddings([1.0, 0, 0], [-1.0, 0, 0])
        good = float(sem_loss(torch.tensor([1.0, 0, 0], dtype=torch.float64), pair))
        bad = float(sem_loss(torch.tensor([-1.0, 0, 0], dtype=torch.float64), pair))
        assert good == pytest.approx(-math.log(math.e / (math.e + math.exp(-1))), abs=1e-12)
        assert good == pytest.approx(0.1269, abs=1e-4)
        assert bad == pytest.approx(2.1269, abs=1e-4)
        assert bad > math.log(2)

    def test_unvalidated_rejected(self):
        pair = pair_with_embeddings(E_POS, E_NEG, validated=False)
        with pytest.raises(DomainError):
            sem_loss(embedding(0.5, 0.1), pair)

    def test_bad_temperature(self):
        with pytest.raises(DomainError):
            sem_loss(embedding(0.5, 0.1), pair_with_embeddings(E_POS, E_NEG), 0.0)

    @settings(max_examples=200, deadline=None)
    @given(st.floats(-0.6, 0.6), st.floats(-0.6, 0.6), st.floats(0.01, 0.1))
    def test_monotone(self, cp, cn, step):
        pair = pair_with_embeddings(E_POS, E_NEG)
        base = float(sem_loss(embedding(cp, cn), pair))
        assert 0 < base
        assert float(sem_loss(embedding(cp + step, cn), pair)) < base
        assert float(sem_loss(embedding(cp, cn + step), pair)) > base

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        for _ in range(20):
            pos, neg = rng.normal(size=6), rng.normal(size=6)
            pos, neg = pos / np.linalg.norm(pos), neg / np.linalg.norm(neg)
            x = torch.tensor(rng.normal(size=6), requires_grad=True)
            p, n = torch.tensor(pos), torch.tensor(neg)
            (grad,) = torch.autograd.grad(description_loss(x, p, n, 0.7), x)
            h, numeric = 1e-6, np.zeros(6)
            for k in range(6):
                e = torch.zeros(6, dtype=torch.float64)
                e[k] = h
                with torch.no_grad():
                    numeric[k] = (float(description_loss(x + e, p, n, 0.7))
                                  - float(description_loss(x - e, p, n, 0.7))) / (2 * h)
            err = np.linalg.norm(grad.numpy() - numeric) / max(np.linalg.norm(numeric), 1e-12)
            assert err <= 1e-4


def ten_images():
    tags = [Weather.RAIN, Weather.HAZE, Weather.SNOW]
    return {f"i{k}": make_image(f"i{k}", tag=tags[k % 3]) for k in range(10)}


class TestRefresh:
    def setup_method(self):
        self.images = ten_images()
        self.db = FakeDb(self.images)
        self.cap = CountingCaptioner()
        self.store = build_pair_store(self.images.values(), self.cap, MockRewriter(), ICL,
                                      TagBasisEncoder("mock-tag", dim=16, prompt_width=16),
                                      self.db)
        self.cap.calls = 0

    def refresh(self, encoder, cap=None):
        return refresh_descriptions(self.store, self.db, self.images, cap or self.cap,
                                    MockRewriter(), ICL, encoder)

    def test_no_changes(self, tag_encoder):
        assert self.refresh(tag_encoder) == 0 and self.cap.calls == 0

    def test_three_changed(self, tag_encoder):
        for image_id in ("i1", "i4", "i7"):
            self.db[image_id].version += 1
        assert self.refresh(tag_encoder) == 3 and self.cap.calls == 3
        assert self.refresh(tag_encoder) == 0

    def test_identical_regeneration(self, tag_encoder):
        before = self.store.pairs["i2"]
        self.db["i2"].version += 1
        self.refresh(tag_encoder)
        assert self.store.pairs["i2"] is not before
        assert self.store.pairs["i2"].same_as(before)

    def test_failure_marks_unvalidated(self, tag_encoder):
        self.db["i0"].version += 1
        count = self.refresh(tag_encoder, CountingCaptioner(fail_ids={"i0"}))
        assert count == 1 and not self.store.pairs["i0"].validated

    def test_every_loss_pair_is_weather_free(self):
        for pair in self.store.pairs.values():
            if pair.validated:
                assert not has_degradation_term(pair.d_pos)


class TestPairStorePersistence:
    def test_round_trip(self, tmp_path, tag_encoder):
        images = ten_images()
        store = build_pair_store(images.values(), MockCaptioner(), MockRewriter(), ICL,
                                 tag_encoder, FakeDb(images))
        save_pair_store(store, tmp_path / "pairs.jsonl")
        assert load_pair_store(tmp_path / "pairs.jsonl", tag_encoder).equals(store)

    def test_corrupt_line(self, tmp_path, tag_encoder):
        path = tmp_path / "pairs.jsonl"
        path.write_text('{"image_id": "a"}\n')
        with pytest.raises(LoadError) as info:
            load_pair_store(path, tag_encoder)
        assert info.value.line == 1
