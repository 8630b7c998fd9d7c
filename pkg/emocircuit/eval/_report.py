from collections.abc import Mapping, Sequence
from dataclasses import dataclass, field
from typing import Any

import pandas as pd

from emocircuit.eval._lexicon import EmotionWheel, Lexicon
from emocircuit.eval._metrics import WafResult, change_ratio, extract_keywords, fs_score, hit_rate, waf
from emocircuit.exceptions import MetricInputError, UndefinedRatioError
from emocircuit.model import ForwardHooks, InputSequence, Intervention, ModelBundle, greedy_decode


@dataclass(frozen=True)
class DecodedSample:
    sample_id: str
    emotion: str
    tokens: tuple[int, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "tokens", tuple(int(t) for t in self.tokens))


@dataclass(frozen=True)
class SampleResult:
    sample_id: str
    emotion: str
    keywords: tuple[str, ...]
    hit_rate: float
    fs: float
    predicted_polarity: str | None


@dataclass(frozen=True)
class EvalReport:
    """
    Scores of one batch of decodes.

    `waf` covers the samples whose decode names an emotion; `waf_excluded` counts the rest.
    `change_ratio` is set when a baseline hit rate was supplied and is non-zero.
    """

    samples: tuple[SampleResult, ...]
    mean_hit_rate: float
    fs_per_wheel: Mapping[str, float]
    mean_fs: float
    waf: WafResult | None
    waf_excluded: int
    baseline_hit_rate: float | None = None
    change_ratio: float | None = None
    metadata: Mapping[str, Any] = field(default_factory=dict)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            [
                {
                    "sample_id": s.sample_id,
                    "emotion": s.emotion,
                    "keywords": " ".join(s.keywords),
                    "hit_rate": s.hit_rate,
                    "fs": s.fs,
                    "predicted_polarity": s.predicted_polarity or "",
                }
                for s in self.samples
            ],
            columns=["sample_id", "emotion", "keywords", "hit_rate", "fs", "predicted_polarity"],
        )

    def to_dict(self) -> dict[str, Any]:
        return {
            "mean_hit_rate": self.mean_hit_rate,
            "mean_fs": self.mean_fs,
            "fs_per_wheel": dict(self.fs_per_wheel),
            "waf": None if self.waf is None else {"waf": self.waf.waf, "accuracy": self.waf.accuracy},
            "waf_excluded": self.waf_excluded,
            "baseline_hit_rate": self.baseline_hit_rate,
            "change_ratio": self.change_ratio,
            "metadata": dict(self.metadata),
            "samples": [
                {
                    "id": s.sample_id,
                    "emotion": s.emotion,
                    "keywords": list(s.keywords),
                    "hit_rate": s.hit_rate,
                    "fs": s.fs,
                }
                for s in self.samples
            ],
        }


def predicted_polarity(tokens: Sequence[int], lexicon: Lexicon) -> str | None:
    """Polarity of the first emotion keyword in decode order, or None when the decode names none."""
    for token in tokens:
        keyword = lexicon.keyword_of(token)
        if keyword is None:
            continue
        emotion = lexicon.emotion_of(keyword)
        if emotion is not None and emotion in lexicon.polarity:
            return lexicon.polarity[emotion]
    return None


def evaluate_decodes(
    samples: Sequence[DecodedSample],
    lexicon: Lexicon,
    wheels: Sequence[EmotionWheel],
    *,
    baseline_hit_rate: float | None = None,
    metadata: Mapping[str, Any] | None = None,
) -> EvalReport:
    """
    Score decodes against their ground-truth emotions.

    The true keyword set of a sample is its label alone. Polarity predictions come from
    `predicted_polarity`; samples without one are left out of WAF.

    Raises:
        MetricInputError: If `samples` is empty or a label has no polarity.
        LabelCoverageError: If a label is unmappable under some wheel.
    """
    if not samples:
        raise MetricInputError("no samples to evaluate")
    results = []
    fs_sums = {wheel.wheel_id: 0.0 for wheel in wheels}
    predictions: list[str] = []
    labels: list[str] = []
    for sample in samples:
        keywords = extract_keywords(sample.tokens, lexicon)
        h = hit_rate(keywords, sample.emotion, wheels)
        fs = fs_score(keywords, {sample.emotion}, wheels)
        for score in fs.per_wheel:
            fs_sums[score.wheel_id] += score.f1
        polarity = predicted_polarity(sample.tokens, lexicon)
        if sample.emotion not in lexicon.polarity:
            raise MetricInputError(f"label {sample.emotion!r} has no polarity")
        if polarity is not None:
            predictions.append(polarity)
            labels.append(lexicon.polarity[sample.emotion])
        results.append(SampleResult(sample.sample_id, sample.emotion, tuple(sorted(keywords)), h, fs.fs, polarity))
    n = len(results)
    mean_h = sum(r.hit_rate for r in results) / n
    ratio = None
    if baseline_hit_rate is not None:
        try:
            ratio = change_ratio(baseline_hit_rate, mean_h)
        except UndefinedRatioError:
            ratio = None
    return EvalReport(
        samples=tuple(results),
        mean_hit_rate=mean_h,
        fs_per_wheel={wheel_id: total / n for wheel_id, total in fs_sums.items()},
        mean_fs=sum(r.fs for r in results) / n,
        waf=waf(predictions, labels) if predictions else None,
        waf_excluded=n - len(predictions),
        baseline_hit_rate=baseline_hit_rate,
        change_ratio=ratio,
        metadata=dict(metadata or {}),
    )


@dataclass(frozen=True)
class HitRateEvaluator:
    """
    H(X, y) of a greedy continuation.

    Decodes `max_new_tokens` tokens, extracts lexicon keywords and scores them with `hit_rate`.
    """

    lexicon: Lexicon
    wheels: tuple[EmotionWheel, ...]
    max_new_tokens: int = 8

    def score_tokens(self, tokens: Sequence[int], emotion: str) -> float:
        return hit_rate(extract_keywords(tokens, self.lexicon), emotion, self.wheels)

    def decode(
        self,
        bundle: ModelBundle,
        input: InputSequence,
        *,
        hooks: ForwardHooks | None = None,
        intervention: Intervention | None = None,
    ) -> list[int]:
        return greedy_decode(bundle, input, self.max_new_tokens, intervention, hooks=hooks)

    def __call__(
        self,
        bundle: ModelBundle,
        input: InputSequence,
        emotion: str,
        *,
        hooks: ForwardHooks | None = None,
        intervention: Intervention | None = None,
    ) -> float:
        return self.score_tokens(self.decode(bundle, input, hooks=hooks, intervention=intervention), emotion)
