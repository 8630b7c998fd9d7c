import enum
import hashlib
from collections.abc import Mapping, Sequence
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
from numpy.typing import NDArray

from emocircuit.exceptions import ModelConfigError, SequenceLengthError, ShapeError

DEFAULT_N_LAYERS = 12
DEFAULT_N_HEADS = 4
DEFAULT_D_MODEL = 64
DEFAULT_D_MLP = 256
DEFAULT_VOCAB_SIZE = 512
DEFAULT_N_VISUAL = 16
DEFAULT_MAX_SEQ = 128
# adaptation: layers 0-3, aggregation: 4-7, late: 8-11
DEFAULT_ADAPT_END = 3
DEFAULT_AGGREGATE_END = 7


class TokenRole(enum.Enum):
    VISUAL = "V"
    QUERY = "Q"
    LAST = "L"


class Phase(enum.Enum):
    ADAPT = "adapt"
    AGGREGATE = "aggregate"
    LATE = "late"


@dataclass(frozen=True)
class ModelConfig:
    """
    Architecture of the toy multimodal decoder.

    Attributes:
        n_layers: Number of pre-norm blocks.
        n_heads: Attention heads per block.
        d_model: Residual width; must be divisible by `n_heads`.
        d_mlp: MLP hidden width (number of neurons per layer).
        vocab_size: Number of text tokens.
        n_visual: Length of the visual prefix.
        max_seq: Maximum total length (visual prefix + text + generated tokens).
        adapt_end: Last layer of the adaptation phase.
        aggregate_end: Last layer of the aggregation phase; later layers form the late phase.
    """

    n_layers: int = DEFAULT_N_LAYERS
    n_heads: int = DEFAULT_N_HEADS
    d_model: int = DEFAULT_D_MODEL
    d_mlp: int = DEFAULT_D_MLP
    vocab_size: int = DEFAULT_VOCAB_SIZE
    n_visual: int = DEFAULT_N_VISUAL
    max_seq: int = DEFAULT_MAX_SEQ
    adapt_end: int = DEFAULT_ADAPT_END
    aggregate_end: int = DEFAULT_AGGREGATE_END

    def __post_init__(self) -> None:
        for name, value in asdict(self).items():
            if isinstance(value, bool) or not isinstance(value, int):
                raise ModelConfigError(f"{name} must be an integer, got {value!r}")
        if min(self.n_layers, self.n_heads, self.d_model, self.d_mlp, self.vocab_size, self.max_seq) <= 0:
            raise ModelConfigError("n_layers, n_heads, d_model, d_mlp, vocab_size and max_seq must be positive")
        if self.n_visual < 0:
            raise ModelConfigError("n_visual must be greater than or equal to 0")
        if self.d_model % self.n_heads != 0:
            raise ModelConfigError(f"d_model ({self.d_model}) must be divisible by n_heads ({self.n_heads})")
        if self.n_layers >= 3:
            if not 0 <= self.adapt_end < self.aggregate_end < self.n_layers:
                raise ModelConfigError("phase boundaries must satisfy 0 <= adapt_end < aggregate_end < n_layers")
        # hand-built toys with fewer than three layers collapse the phases
        elif not 0 <= self.adapt_end <= self.aggregate_end < self.n_layers:
            raise ModelConfigError("phase boundaries must satisfy 0 <= adapt_end <= aggregate_end < n_layers")
        if self.n_visual >= self.max_seq:
            raise ModelConfigError("n_visual must leave room for at least one text token")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def parameter_count(self) -> int:
        d = self.d_model
        per_layer = 4 * d * d + 2 * d * self.d_mlp + 4 * d
        return self.vocab_size * d + self.max_seq * d + self.n_layers * per_layer + 2 * d + d * self.vocab_size

    def phase_of(self, layer: int) -> Phase:
        if layer <= self.adapt_end:
            return Phase.ADAPT
        if layer <= self.aggregate_end:
            return Phase.AGGREGATE
        return Phase.LATE

    def phase_layers(self, phase: Phase) -> range:
        if phase is Phase.ADAPT:
            return range(0, self.adapt_end + 1)
        if phase is Phase.AGGREGATE:
            return range(self.adapt_end + 1, self.aggregate_end + 1)
        return range(self.aggregate_end + 1, self.n_layers)

    def to_dict(self) -> dict[str, int]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ModelConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ModelConfigError(f"unknown ModelConfig fields: {sorted(unknown)}")
        return cls(**data)


def _frozen(array: NDArray[np.float64]) -> NDArray[np.float64]:
    array.flags.writeable = False
    return array


@dataclass(frozen=True, init=False, eq=False)
class InputSequence:
    """
    Visual prefix plus text tokens.

    The visual embeddings enter the residual stream directly. Positions split into roles:
    the visual prefix (V), every text position except the last (Q), and the last input
    position (L).
    """

    visual_embeddings: NDArray[np.float64]
    text_token_ids: tuple[int, ...]
    _roles: tuple[TokenRole, ...] = field(init=False, repr=False, compare=False)

    def __init__(self, visual_embeddings: Any, text_token_ids: Sequence[int]) -> None:
        visual = np.array(visual_embeddings, dtype=np.float64, copy=True)
        if visual.ndim != 2:
            raise ShapeError("InputSequence", visual.shape, message="visual_embeddings must be a 2-D matrix")
        tokens = tuple(int(t) for t in text_token_ids)
        if not tokens:
            raise ValueError("an input sequence needs at least one text token (the Last position)")
        object.__setattr__(self, "visual_embeddings", _frozen(visual))
        object.__setattr__(self, "text_token_ids", tokens)
        roles = [TokenRole.VISUAL] * visual.shape[0] + [TokenRole.QUERY] * (len(tokens) - 1) + [TokenRole.LAST]
        object.__setattr__(self, "_roles", tuple(roles))

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, InputSequence):
            return NotImplemented
        return self.text_token_ids == other.text_token_ids and np.array_equal(
            self.visual_embeddings, other.visual_embeddings
        )

    def __hash__(self) -> int:
        return hash(self.fingerprint())

    @property
    def n_visual(self) -> int:
        return int(self.visual_embeddings.shape[0])

    @property
    def length(self) -> int:
        return self.n_visual + len(self.text_token_ids)

    @property
    def roles(self) -> tuple[TokenRole, ...]:
        return self._roles

    @property
    def last_position(self) -> int:
        return self.length - 1

    def positions(self, role: TokenRole) -> tuple[int, ...]:
        return tuple(i for i, r in enumerate(self._roles) if r is role)

    def with_text(self, text_token_ids: Sequence[int]) -> "InputSequence":
        return InputSequence(self.visual_embeddings, text_token_ids)

    def validate(self, config: ModelConfig) -> None:
        if self.visual_embeddings.shape != (config.n_visual, config.d_model):
            raise ShapeError(
                "InputSequence",
                self.visual_embeddings.shape,
                (config.n_visual, config.d_model),
                message=f"visual_embeddings must be {(config.n_visual, config.d_model)}, "
                f"got {self.visual_embeddings.shape}",
            )
        if self.length > config.max_seq:
            raise SequenceLengthError(self.length, config.max_seq)
        bad = [t for t in self.text_token_ids if not 0 <= t < config.vocab_size]
        if bad:
            raise IndexError(f"token ids out of range [0, {config.vocab_size}): {bad}")

    def fingerprint(self) -> str:
        digest = hashlib.sha256()
        digest.update(np.ascontiguousarray(self.visual_embeddings, dtype="<f8").tobytes())
        digest.update(np.asarray(self.text_token_ids, dtype="<i8").tobytes())
        return digest.hexdigest()
