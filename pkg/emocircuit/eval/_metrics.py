from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from sklearn.metrics import accuracy_score, f1_score

from emocircuit.eval._lexicon import POLARITIES, EmotionWheel, Lexicon
from emocircuit.exceptions import MetricInputError, UndefinedRatioError


def extract_keywords(tokens: Iterable[int], lexicon: Lexicon) -> frozenset[str]:
    """Lexicon keywords whose token ids appear in a decode, deduplicated."""
    return frozenset(k for k in (lexicon.keyword_of(t) for t in tokens) if k is not None)


def hit_rate(keywords: Iterable[str], label: str, wheels: Sequence[EmotionWheel]) -> float:
    """
    Fraction of wheels under which the label's core is in the image of `keywords`.

    Raises:
        LabelCoverageError: If `label` is unmappable under some wheel.
        MetricInputError: If no wheels are given.
    """
    if not wheels:
        raise MetricInputError("hit_rate needs at least one wheel")
    predicted = frozenset(keywords)
    hits = 0
    for wheel in wheels:
        if wheel.map_label(label) in wheel.image(predicted):
            hits += 1
    return hits / len(wheels)


@dataclass(frozen=True)
class WheelScore:
    wheel_id: str
    precision: float
    recall: float
    f1: float


@dataclass(frozen=True)
class FsScore:
    fs: float
    per_wheel: tuple[WheelScore, ...]

    def to_dict(self) -> dict[str, object]:
        return {
            "fs": self.fs,
            "per_wheel": [
                {"wheel_id": w.wheel_id, "precision": w.precision, "recall": w.recall, "f1": w.f1}
                for w in self.per_wheel
            ],
        }


def fs_score(predicted: Iterable[str], true: Iterable[str], wheels: Sequence[EmotionWheel]) -> FsScore:
    """
    Set-level F-score averaged over wheels.

    Both sets are grouped per wheel (mapped, unmappable keywords dropped, deduplicated). An empty
    predicted group gives precision 0, an empty true group gives recall 0, and P = R = 0 gives
    F = 0.
    """
    if not wheels:
        raise MetricInputError("fs_score needs at least one wheel")
    predicted, true = frozenset(predicted), frozenset(true)
    scores = []
    for wheel in wheels:
        grouped_pred = wheel.image(predicted)
        grouped_true = wheel.image(true)
        overlap = len(grouped_pred & grouped_true)
        precision = overlap / len(grouped_pred) if grouped_pred else 0.0
        recall = overlap / len(grouped_true) if grouped_true else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
        scores.append(WheelScore(wheel.wheel_id, precision, recall, f1))
    return FsScore(sum(s.f1 for s in scores) / len(scores), tuple(scores))


@dataclass(frozen=True)
class WafResult:
    waf: float
    accuracy: float


def waf(predictions: Sequence[str], labels: Sequence[str]) -> WafResult:
    """
    Support-weighted F1 over the two polarity classes, with accuracy alongside.

    Raises:
        MetricInputError: On a length mismatch, empty input, or a polarity outside
            {"positive", "negative"}.
    """
    if len(predictions) != len(labels):
        raise MetricInputError(f"{len(predictions)} predictions for {len(labels)} labels")
    if not labels:
        raise MetricInputError("waf needs at least one sample")
    unknown = (set(predictions) | set(labels)) - set(POLARITIES)
    if unknown:
        raise MetricInputError(f"unknown polarities {sorted(unknown)}")
    score = f1_score(list(labels), list(predictions), labels=list(POLARITIES), average="weighted", zero_division=0)
    return WafResult(waf=float(score), accuracy=float(accuracy_score(list(labels), list(predictions))))


def change_ratio(h_base: float, h_new: float) -> float:
    """
    Relative change (h_new - h_base) / h_base in percent.

    Raises:
        UndefinedRatioError: If `h_base` is zero; the error carries `h_new`.
    """
    if h_base == 0:
        raise UndefinedRatioError(new_value=h_new)
    return (h_new - h_base) / h_base * 100.0
