import base64
import json
import threading
from http.server import BaseHTTPRequestHandler, HTTPServer

import cv2
import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from stormlab.assessment import score_from_logits
from stormlab.backends import (BackendRegistry, EmbeddingVector, FeatureMap, HttpCaptionBackend,
                               HttpRatingBackend, HttpRewriteBackend, MockCaptioner,
                               MockOracleRater, MockRewriter, PixelStatEncoder,
                               PooledRGBExtractor, RatingLogits, TagBasisEncoder)
from stormlab.backends.loader import registry_from_spec
from stormlab.backends.mock import oracle_logits
from stormlab.core import DEFAULT_RATING_TEMPLATE, ImageSample, Weather
from stormlab.errors import ConfigError, ConfigurationError, DomainError, ProtocolError, TransportError
from stormlab.semantics import has_degradation_term

from conftest import make_image

T = DEFAULT_RATING_TEMPLATE


class TestValueTypes:
    def test_rating_logits_length(self):
        with pytest.raises(DomainError):
            RatingLogits((1.0, 2.0))

    def test_rating_logits_finite(self):
        with pytest.raises(DomainError):
            RatingLogits((0, 0, 0, 0, float("nan")))

    def test_embedding_norm_checked(self):
        with pytest.raises(DomainError):
            EmbeddingVector(np.array([1.0, 1.0]))
        EmbeddingVector(np.array([1.0, 1.0]), normalized=False)

    def test_feature_map_shape(self):
        with pytest.raises(DomainError):
            FeatureMap(np.zeros((4, 4)))


class TestMockOracle:
    def setup_method(self):
        self.clean = np.random.default_rng(0).uniform(0.1, 0.9, (16, 16, 3))
        self.rater = MockOracleRater("oracle", {"x": self.clean})

    def test_clean_image_argmax_excellent(self):
        logits = self.rater.rate_image(ImageSample("x", self.clean), T)
        assert int(np.argmax(logits.logits)) == 4

    def test_max_degraded_argmax_bad(self):
        worst = 1.0 - np.round(self.clean)
        logits = self.rater.rate_image(ImageSample("x", worst), T)
        assert int(np.argmax(logits.logits)) == 0

    def test_deterministic(self):
        img = ImageSample("x", np.clip(self.clean + 0.05, 0, 1))
        assert self.rater.rate_image(img, T) == self.rater.rate_image(img, T)

    def test_unknown_id(self):
        with pytest.raises(ProtocolError):
            self.rater.rate_image(ImageSample("y", self.clean), T)

    def test_template_needs_placeholder(self):
        with pytest.raises(DomainError):
            self.rater.rate_image(ImageSample("x", self.clean), "rate this")

    @settings(max_examples=200, deadline=None)
    @given(st.floats(0.0, 1.0), st.floats(0.0, 1.0), st.floats(0.5, 20.0))
    def test_score_non_increasing_in_energy(self, e1, e2, scale):
        lo, hi = sorted((e1, e2))
        s_lo = score_from_logits(RatingLogits(tuple(oracle_logits(lo, scale))))
        s_hi = score_from_logits(RatingLogits(tuple(oracle_logits(hi, scale))))
        assert s_hi <= s_lo + 1e-12


class TestMockText:
    def test_rain_caption(self):
        cap = MockCaptioner(scenes={"a": ("a person walking", "street")})
        text = cap.caption_image(make_image("a", tag=Weather.RAIN))
        assert "rain" in text and "person walking" in text and "street" in text

    def test_clear_caption_has_no_weather_term(self):
        cap = MockCaptioner()
        assert not has_degradation_term(cap.caption_image(make_image("a", tag=Weather.CLEAR)))
        assert not has_degradation_term(cap.caption_image(make_image("a")))

    def test_caption_deterministic(self):
        img = make_image("scene-7", tag=Weather.SNOW)
        assert MockCaptioner().caption_image(img) == MockCaptioner().caption_image(img)

    def test_rewrite_lexicon(self):
        out = MockRewriter().rewrite_description("heavy rain on street, person walking")
        assert out == "clear weather on street, person walking"

    def test_rewrite_prefix_without_weather_term(self):
        text = "a person walking on the street"
        assert MockRewriter().rewrite_description(text) == "clear weather, " + text

    def test_rewrite_deterministic(self):
        r = MockRewriter()
        assert r.rewrite_description("thick haze over the harbor") == \
            r.rewrite_description("thick haze over the harbor")

    def test_rewrite_modes(self):
        assert MockRewriter(mode="echo").rewrite_description("rain") == "rain"
        assert MockRewriter(mode="drift").rewrite_description("rain") == MockRewriter.DRIFT_TEXT

    def test_rewrite_empty(self):
        with pytest.raises(DomainError):
            MockRewriter().rewrite_description("  ")


class TestEncoders:
    def test_same_tag_cosine_one(self, tag_encoder):
        img = tag_encoder.embed_image(make_image(tag=Weather.HAZE)).values
        txt = tag_encoder.embed_text("haze").values
        assert float(img @ txt) == pytest.approx(1.0, abs=1e-12)

    def test_distinct_tags_orthogonal(self, tag_encoder):
        a = tag_encoder.embed_image(make_image(tag=Weather.RAIN)).values
        b = tag_encoder.embed_image(make_image(tag=Weather.SNOW)).values
        assert float(a @ b) == 0.0

    @settings(max_examples=50, deadline=None)
    @given(st.text(alphabet="abcdefghij ", min_size=1).filter(lambda s: s.strip()))
    def test_text_unit_norm(self, text):
        v = PixelStatEncoder().embed_text(text).values
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-6

    def test_image_unit_norm(self, rng):
        enc = PixelStatEncoder()
        for _ in range(10):
            v = enc.embed_image(ImageSample("r", rng.uniform(0, 1, (16, 16, 3)))).values
            assert abs(np.linalg.norm(v) - 1.0) <= 1e-6

    def test_prompt_gradient_passes_through(self):
        enc = PixelStatEncoder()
        ctx = torch.randn(4, 3, enc.prompt_width, dtype=torch.float64, requires_grad=True)
        enc.encode_prompts(ctx)[:, 0].sum().backward()
        assert ctx.grad is not None and torch.count_nonzero(ctx.grad) > 0

    def test_pixel_gradient_passes_through(self):
        x = torch.rand(2, 3, 16, 16, dtype=torch.float64, requires_grad=True)
        PixelStatEncoder().encode_pixels(x)[:, 2].sum().backward()
        assert torch.count_nonzero(x.grad) > 0

    def test_embed_text_accepts_prompt_context(self):
        enc = PixelStatEncoder()
        ctx = torch.randn(8, enc.prompt_width, dtype=torch.float64)
        v = enc.embed_text(ctx).values
        assert abs(np.linalg.norm(v) - 1.0) <= 1e-6

    def test_tag_encoder_has_no_pixel_tower(self, tag_encoder):
        with pytest.raises(ConfigurationError):
            tag_encoder.encode_pixels(torch.zeros(1, 3, 8, 8))

    def test_haze_reads_as_haze(self, small_fixture):
        enc = PixelStatEncoder()
        hazy = small_fixture.references[Weather.HAZE][0]
        clear = small_fixture.references[Weather.CLEAR][0]
        h, c = enc.embed_image(hazy).values, enc.embed_image(clear).values
        assert h[2] > c[2]


class TestFeatureExtractor:
    def test_shape_and_dim(self):
        fm = PooledRGBExtractor().extract_features(make_image(shape=(20, 17)))
        assert fm.grid.shape == (3, 3, 3)

    def test_identical_images(self, rng):
        px = rng.uniform(0, 1, (32, 32, 3))
        a = PooledRGBExtractor().extract_features(ImageSample("a", px)).grid
        b = PooledRGBExtractor().extract_features(ImageSample("b", px.copy())).grid
        np.testing.assert_array_equal(a, b)

    def test_one_patch_altered(self, rng):
        px = rng.uniform(0, 1, (32, 32, 3))
        altered = px.copy()
        altered[8:16, 16:24] = 1.0 - altered[8:16, 16:24]
        a = PooledRGBExtractor().extract_features(ImageSample("a", px)).grid
        b = PooledRGBExtractor().extract_features(ImageSample("b", altered)).grid
        changed = np.any(a != b, axis=-1)
        expected = np.zeros((4, 4), dtype=bool)
        expected[1, 2] = True
        np.testing.assert_array_equal(changed, expected)
        np.testing.assert_allclose(b[1, 2], altered[8:16, 16:24].mean(axis=(0, 1)), rtol=1e-12)

    def test_partial_window_is_valid_mean(self):
        px = np.zeros((9, 9, 3))
        px[8, 8] = 1.0
        grid = PooledRGBExtractor().extract_features(ImageSample("a", px)).grid
        np.testing.assert_allclose(grid[1, 1], 1.0)


class TestRegistry:
    def test_duplicate_rejected(self):
        reg = BackendRegistry([MockCaptioner("c")])
        with pytest.raises(ConfigurationError):
            reg.register(MockCaptioner("c"))

    def test_same_name_different_kind(self):
        BackendRegistry([MockCaptioner("x"), MockRewriter("x")])

    def test_tower_mismatch_rejected(self):
        enc = TagBasisEncoder("t")
        enc.text_dim = enc.image_dim + 1
        with pytest.raises(ConfigurationError):
            BackendRegistry([enc])

    def test_loader_unknown_option(self):
        with pytest.raises(ConfigError, match="rewrite"):
            registry_from_spec({"rewrite": {"backend": "mock", "colour": 1}})

    def test_loader_unknown_kind(self):
        with pytest.raises(ConfigError):
            registry_from_spec({"judges": []})


# -- HTTP adapters against a local server ----------------------------------------

class _Handler(BaseHTTPRequestHandler):
    responses: list = []
    requests: list = []

    def do_POST(self):
        body = json.loads(self.rfile.read(int(self.headers["Content-Length"])))
        type(self).requests.append(body)
        status, payload = type(self).responses.pop(0)
        data = payload if isinstance(payload, bytes) else json.dumps(payload).encode()
        self.send_response(status)
        self.send_header("Content-Type", "application/json")
        self.send_header("Content-Length", str(len(data)))
        self.end_headers()
        self.wfile.write(data)

    def log_message(self, *args):
        pass


@pytest.fixture
def server():
    _Handler.responses, _Handler.requests = [], []
    httpd = HTTPServer(("127.0.0.1", 0), _Handler)
    thread = threading.Thread(target=httpd.serve_forever, daemon=True)
    thread.start()
    yield f"http://127.0.0.1:{httpd.server_address[1]}", _Handler
    httpd.shutdown()
    httpd.server_close()


def _tokens(**lp):
    return {"tokens": [{"token": w, "logprob": v} for w, v in lp.items()]}


class TestHttpAdapters:
    def test_rating_wire_format(self, server):
        url, handler = server
        handler.responses.append((200, _tokens(bad=-5, poor=-4, fair=-3, good=-1,
                                               excellent=-0.5, the=-0.1)))
        img = make_image("a", 0.25)
        logits = HttpRatingBackend("remote", url, question="How clear?").rate_image(img, T)
        assert logits.logits == (-5, -4, -3, -1, -0.5)
        req = handler.requests[0]
        assert req["prompt"] == T.format(question="How clear?")
        png = cv2.imdecode(np.frombuffer(base64.b64decode(req["image"]), np.uint8),
                           cv2.IMREAD_UNCHANGED)
        assert png.shape == (16, 16, 3) and int(png[0, 0, 0]) == round(0.25 * 255)

    def test_case_and_duplicates(self, server):
        url, handler = server
        payload = _tokens(Bad=-5, poor=-4, fair=-3, good=-2, excellent=-1)
        payload["tokens"].append({"token": " bad", "logprob": -0.5})
        handler.responses.append((200, payload))
        logits = HttpRatingBackend("remote", url).rate_image(make_image(), T)
        assert logits.logits[0] == -0.5

    def test_missing_token_is_protocol_error(self, server):
        url, handler = server
        handler.responses.append((200, _tokens(bad=-1, poor=-1, fair=-1, good=-1)))
        with pytest.raises(ProtocolError) as info:
            HttpRatingBackend("remote", url).rate_image(make_image(), T)
        assert info.value.raw_response is not None

    def test_server_error_is_transport(self, server):
        url, handler = server
        handler.responses.append((503, {"error": "busy"}))
        with pytest.raises(TransportError):
            HttpRatingBackend("remote", url).rate_image(make_image(), T)

    def test_client_error_is_protocol(self, server):
        url, handler = server
        handler.responses.append((400, {"error": "bad request"}))
        with pytest.raises(ProtocolError):
            HttpRatingBackend("remote", url).rate_image(make_image(), T)

    def test_non_json(self, server):
        url, handler = server
        handler.responses.append((200, b"<html>"))
        with pytest.raises(ProtocolError):
            HttpCaptionBackend("cap", url).caption_image(make_image())

    def test_unreachable(self):
        with pytest.raises(TransportError):
            HttpRatingBackend("remote", "http://127.0.0.1:9", timeout=2).rate_image(make_image(), T)

    def test_caption_and_rewrite(self, server):
        url, handler = server
        handler.responses += [(200, {"text": " a dog in rain "}), (200, {"text": "a dog"})]
        assert HttpCaptionBackend("cap", url).caption_image(make_image()) == "a dog in rain"
        out = HttpRewriteBackend("llm", url).rewrite_description("a dog in rain", [("n", "p")])
        assert out == "a dog"
        assert handler.requests[1] == {"task": "rewrite", "negative": "a dog in rain",
                                       "examples": [["n", "p"]]}
