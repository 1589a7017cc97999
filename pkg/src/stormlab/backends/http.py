"""Thin HTTP JSON adapters for hosted rating / captioning / rewriting models.

Wire format (all POST, JSON bodies):

rating   request  {"image": <base64 PNG>, "prompt": <filled template>}
         response {"tokens": [{"token": "good", "logprob": -0.3}, ...]}
caption  request  {"task": "caption", "image": <base64 PNG>}
rewrite  request  {"task": "rewrite", "negative": str, "examples": [[neg, pos], ...]}
text     response {"text": str}
"""

from __future__ import annotations

import base64
import json
import urllib.error
import urllib.request

import numpy as np

from ..core import ImageSample
from ..errors import ProtocolError, TransportError
from .base import (DEFAULT_RATING_QUESTION, RATING_WORDS, CaptionBackend, RatingBackend,
                   RatingLogits, RewriteBackend, check_template)


def encode_image(image: ImageSample) -> str:
    import cv2

    arr = np.round(image.pixels * 255.0).astype(np.uint8)[:, :, ::-1]
    ok, buf = cv2.imencode(".png", arr)
    if not ok:
        raise ProtocolError(f"could not encode {image.id}")
    return base64.b64encode(buf.tobytes()).decode("ascii")


def logits_from_candidates(candidates) -> RatingLogits:
    """Map candidate-token logprobs onto the five rating words.

    Tokens are compared case-insensitively after stripping whitespace; if a
    word appears more than once its best logprob is used. A missing word is a
    protocol error, never a silent zero.
    """
    best: dict[str, float] = {}
    try:
        for cand in candidates:
            word = str(cand["token"]).strip().lower()
            lp = float(cand["logprob"])
            if word in RATING_WORDS and (word not in best or lp > best[word]):
                best[word] = lp
    except (KeyError, TypeError, ValueError) as exc:
        raise ProtocolError(f"malformed candidate list: {exc}", raw_response=candidates) from None
    missing = [w for w in RATING_WORDS if w not in best]
    if missing:
        raise ProtocolError(f"rating tokens missing from response: {', '.join(missing)}",
                            raw_response=candidates)
    return RatingLogits(tuple(best[w] for w in RATING_WORDS))


def post_json(url: str, payload: dict, timeout: float) -> dict:
    body = json.dumps(payload).encode("utf-8")
    req = urllib.request.Request(url, data=body, headers={"Content-Type": "application/json"})
    try:
        with urllib.request.urlopen(req, timeout=timeout) as resp:
            raw = resp.read()
    except urllib.error.HTTPError as exc:
        if exc.code >= 500 or exc.code == 429:
            raise TransportError(f"{url}: HTTP {exc.code}") from exc
        raise ProtocolError(f"{url}: HTTP {exc.code}", raw_response=exc.read()) from exc
    except (urllib.error.URLError, TimeoutError, ConnectionError) as exc:
        raise TransportError(f"{url}: {exc}") from exc
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        raise ProtocolError(f"{url}: response is not JSON", raw_response=raw) from None


class HttpRatingBackend(RatingBackend):
    def __init__(self, name: str, url: str, *, question: str = DEFAULT_RATING_QUESTION,
                 timeout: float = 60.0, max_in_flight: int = 4):
        self.name = name
        self.url = url
        self.question = question
        self.timeout = timeout
        self.max_in_flight = max_in_flight

    def rate_image(self, image: ImageSample, template: str) -> RatingLogits:
        check_template(template)
        payload = {"image": encode_image(image), "prompt": template.format(question=self.question)}
        response = post_json(self.url, payload, self.timeout)
        if not isinstance(response, dict) or "tokens" not in response:
            raise ProtocolError("response has no 'tokens' field", raw_response=response)
        return logits_from_candidates(response["tokens"])


def _text_field(response) -> str:
    if not isinstance(response, dict) or not isinstance(response.get("text"), str) \
            or not response["text"].strip():
        raise ProtocolError("response has no nonempty 'text' field", raw_response=response)
    return response["text"].strip()


class HttpCaptionBackend(CaptionBackend):
    def __init__(self, name: str, url: str, *, timeout: float = 60.0, max_in_flight: int = 4):
        self.name, self.url, self.timeout, self.max_in_flight = name, url, timeout, max_in_flight

    def caption_image(self, image: ImageSample) -> str:
        return _text_field(post_json(self.url, {"task": "caption", "image": encode_image(image)},
                                     self.timeout))


class HttpRewriteBackend(RewriteBackend):
    def __init__(self, name: str, url: str, *, timeout: float = 60.0, max_in_flight: int = 4):
        self.name, self.url, self.timeout, self.max_in_flight = name, url, timeout, max_in_flight

    def rewrite_description(self, negative: str, icl_examples=()) -> str:
        payload = {"task": "rewrite", "negative": negative,
                   "examples": [list(pair) for pair in icl_examples]}
        return _text_field(post_json(self.url, payload, self.timeout))
