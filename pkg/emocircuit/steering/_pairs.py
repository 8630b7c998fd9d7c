from collections.abc import Iterable, Sequence
from dataclasses import dataclass

from emocircuit.exceptions import PairError
from emocircuit.model import InputSequence


@dataclass(frozen=True)
class ContrastivePair:
    """
    Emotional and neutral inputs that differ only in their visual prefix.

    Attributes:
        pair_id: Stable identifier; pairs are ordered by it.
        emotion: Ground-truth emotion of the positive input.
        x_plus: Emotional visual embeddings with the shared text.
        x_minus: Neutral visual embeddings with the same text.
        visual_pos: Visual position carrying the emotional feature, when known.
    """

    pair_id: str
    emotion: str
    x_plus: InputSequence
    x_minus: InputSequence
    visual_pos: int | None = None

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        """
        Raises:
            PairError: If the inputs differ in text or length.
        """
        if self.x_plus.text_token_ids != self.x_minus.text_token_ids:
            raise PairError(self.pair_id, "positive and negative inputs must share their text tokens")
        if self.x_plus.length != self.x_minus.length:
            raise PairError(self.pair_id, f"length {self.x_plus.length} differs from {self.x_minus.length}")
        if self.visual_pos is not None and not 0 <= self.visual_pos < self.x_plus.n_visual:
            raise PairError(self.pair_id, f"visual_pos {self.visual_pos} is outside the visual prefix")

    def swapped(self) -> "ContrastivePair":
        return ContrastivePair(self.pair_id, self.emotion, self.x_minus, self.x_plus, self.visual_pos)


def pairs_for(pairs: Iterable[ContrastivePair], emotion: str) -> list[ContrastivePair]:
    """Pairs of one emotion in ascending id order."""
    return sorted((p for p in pairs if p.emotion == emotion), key=lambda p: p.pair_id)


def split_pairs(
    pairs: Sequence[ContrastivePair], n_extract: int | None = None
) -> tuple[list[ContrastivePair], list[ContrastivePair]]:
    """
    Deterministic extraction/analysis split.

    Within each emotion, pairs are ordered by id; the first `n_extract` (default: half, rounded
    up) go to extraction and the rest to analysis. Both outputs are ordered by emotion, then id.
    """
    extraction: list[ContrastivePair] = []
    analysis: list[ContrastivePair] = []
    for emotion in sorted({p.emotion for p in pairs}):
        group = pairs_for(pairs, emotion)
        cut = (len(group) + 1) // 2 if n_extract is None else min(n_extract, len(group))
        extraction.extend(group[:cut])
        analysis.extend(group[cut:])
    return extraction, analysis
