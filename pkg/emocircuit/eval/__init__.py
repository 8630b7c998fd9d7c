"""Descriptive emotion-recognition metrics over lexicon keywords."""

from emocircuit.eval._lexicon import POLARITIES, EmotionWheel, Lexicon, default_lexicon, default_wheels
from emocircuit.eval._metrics import (
    FsScore,
    WafResult,
    WheelScore,
    change_ratio,
    extract_keywords,
    fs_score,
    hit_rate,
    waf,
)
from emocircuit.eval._report import (
    DecodedSample,
    EvalReport,
    HitRateEvaluator,
    SampleResult,
    evaluate_decodes,
    predicted_polarity,
)

__all__ = [
    "POLARITIES",
    "DecodedSample",
    "EmotionWheel",
    "EvalReport",
    "FsScore",
    "HitRateEvaluator",
    "Lexicon",
    "SampleResult",
    "WafResult",
    "WheelScore",
    "change_ratio",
    "default_lexicon",
    "default_wheels",
    "evaluate_decodes",
    "extract_keywords",
    "fs_score",
    "hit_rate",
    "predicted_polarity",
    "waf",
]
