from .base import (DEFAULT_RATING_QUESTION, RATING_WORDS, BackendRegistry, CaptionBackend,
                   EmbeddingBackend, EmbeddingVector, ExpertId, ExpertKind, FeatureBackend,
                   FeatureMap, RatingBackend, RatingLogits, RewriteBackend)
from .http import HttpCaptionBackend, HttpRatingBackend, HttpRewriteBackend
from .mock import (MockCaptioner, MockOracleRater, MockRewriter, PixelStatEncoder,
                   PooledRGBExtractor, TagBasisEncoder)

__all__ = [
    "DEFAULT_RATING_QUESTION", "RATING_WORDS", "BackendRegistry", "CaptionBackend",
    "EmbeddingBackend", "EmbeddingVector", "ExpertId", "ExpertKind", "FeatureBackend",
    "FeatureMap", "RatingBackend", "RatingLogits", "RewriteBackend",
    "HttpCaptionBackend", "HttpRatingBackend", "HttpRewriteBackend",
    "MockCaptioner", "MockOracleRater", "MockRewriter", "PixelStatEncoder",
    "PooledRGBExtractor", "TagBasisEncoder",
]
