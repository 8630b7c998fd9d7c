from collections.abc import Iterable, Mapping
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

from emocircuit.exceptions import DataError, LabelCoverageError
from emocircuit.utils.canonical import read_canonical, write_canonical

POLARITIES = ("positive", "negative")


@dataclass(frozen=True)
class EmotionWheel:
    """
    Keyword to core-emotion mapping.

    Keywords outside `mapping` are unmappable under this wheel and drop out of its image.
    """

    wheel_id: str
    mapping: Mapping[str, str]
    labels: frozenset[str] = field(default_factory=frozenset)

    def __post_init__(self) -> None:
        object.__setattr__(self, "mapping", dict(self.mapping))
        labels = frozenset(self.labels) or frozenset(self.mapping.values())
        object.__setattr__(self, "labels", labels)
        stray = set(self.mapping.values()) - labels
        if stray:
            raise DataError(f"wheel {self.wheel_id!r} maps to undeclared labels {sorted(stray)}")

    def map(self, keyword: str) -> str | None:
        return self.mapping.get(keyword)

    def image(self, keywords: Iterable[str]) -> frozenset[str]:
        return frozenset(core for core in (self.mapping.get(k) for k in keywords) if core is not None)

    def map_label(self, label: str) -> str:
        """
        Core of a ground-truth label; a core label maps to itself.

        Raises:
            LabelCoverageError: If the label is neither a core label nor a mapped keyword.
        """
        if label in self.labels:
            return label
        core = self.mapping.get(label)
        if core is None:
            raise LabelCoverageError(label, self.wheel_id)
        return core

    def to_dict(self) -> dict[str, Any]:
        return {"wheel_id": self.wheel_id, "mapping": dict(self.mapping), "labels": sorted(self.labels)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "EmotionWheel":
        try:
            return cls(str(data["wheel_id"]), dict(data["mapping"]), frozenset(data.get("labels", ())))
        except (KeyError, TypeError) as e:
            raise DataError(f"malformed wheel: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "EmotionWheel":
        return cls.from_dict(read_canonical(path))

    def save(self, path: str | Path) -> Path:
        return write_canonical(path, self.to_dict())


@dataclass(frozen=True)
class Lexicon:
    """
    Token id to emotion keyword table of the toy vocabulary.

    Attributes:
        tokens: Token id to keyword; injective.
        groups: Emotion to its keywords, core word first.
        polarity: Emotion to "positive" or "negative".
    """

    tokens: Mapping[int, str]
    groups: Mapping[str, tuple[str, ...]]
    polarity: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        tokens = {int(t): str(k) for t, k in self.tokens.items()}
        if len(set(tokens.values())) != len(tokens):
            raise DataError("lexicon token to keyword table is not injective")
        object.__setattr__(self, "tokens", tokens)
        object.__setattr__(self, "groups", {e: tuple(ks) for e, ks in self.groups.items()})
        object.__setattr__(self, "polarity", dict(self.polarity))
        bad = {e: p for e, p in self.polarity.items() if p not in POLARITIES}
        if bad:
            raise DataError(f"unknown polarities {bad}")

    @property
    def emotions(self) -> tuple[str, ...]:
        return tuple(sorted(self.groups))

    def keyword_of(self, token_id: int) -> str | None:
        return self.tokens.get(int(token_id))

    def token_of(self, keyword: str) -> int:
        for token_id, known in self.tokens.items():
            if known == keyword:
                return token_id
        raise KeyError(f"{keyword!r} is not in the lexicon")

    def emotion_tokens(self, emotion: str) -> tuple[int, ...]:
        return tuple(self.token_of(k) for k in self.groups[emotion])

    def all_tokens(self) -> frozenset[int]:
        return frozenset(self.tokens)

    def emotion_of(self, keyword: str) -> str | None:
        for emotion, keywords in self.groups.items():
            if keyword in keywords:
                return emotion
        return None

    def validate_against(self, wheels: Iterable[EmotionWheel]) -> None:
        """
        Raises:
            DataError: If a keyword appears in no wheel.
        """
        covered = set().union(*(set(w.mapping) for w in wheels))
        missing = sorted(set(self.tokens.values()) - covered)
        if missing:
            raise DataError(f"lexicon keywords missing from every wheel: {missing}")

    def to_dict(self) -> dict[str, Any]:
        return {
            "tokens": {str(t): k for t, k in sorted(self.tokens.items())},
            "groups": {e: list(ks) for e, ks in self.groups.items()},
            "polarity": dict(self.polarity),
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Lexicon":
        try:
            return cls(
                tokens={int(t): k for t, k in data["tokens"].items()},
                groups={e: tuple(ks) for e, ks in data["groups"].items()},
                polarity=dict(data.get("polarity", {})),
            )
        except (KeyError, TypeError, ValueError, AttributeError) as e:
            raise DataError(f"malformed lexicon: {e}") from e

    @classmethod
    def load(cls, path: str | Path) -> "Lexicon":
        return cls.from_dict(read_canonical(path))


def _packaged(name: str) -> Path:
    return Path(str(resources.files("emocircuit.eval").joinpath("data", name)))


def default_lexicon() -> Lexicon:
    """The shipped 4-emotion lexicon: token ids 0-31, eight keywords per emotion."""
    return Lexicon.load(_packaged("lexicon.json"))


def default_wheels() -> tuple[EmotionWheel, ...]:
    """`wheel_core` and `wheel_nuance`, in that order."""
    return tuple(EmotionWheel.load(_packaged(f"{name}.json")) for name in ("wheel_core", "wheel_nuance"))
