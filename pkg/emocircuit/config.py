import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

from emocircuit.circuit import GradientMode
from emocircuit.model import ModelConfig
from emocircuit.utils.canonical import read_canonical, write_canonical
from emocircuit.veena import VeeMode

# Sentinel value to distinguish "not provided" from "explicitly None"
_NOT_PROVIDED = object()

DEFAULT_SEED = 0
DEFAULT_TAU = 0.5
DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 2.0
DEFAULT_GAMMA = 1.5
DEFAULT_K_HEAD = 10
DEFAULT_K_NEURON = 30
DEFAULT_N_PAIRS = 250  # per emotion and split
DEFAULT_MAX_NEW_TOKENS = 8
DEFAULT_HEAD_PAIRS = 8  # per emotion
DEFAULT_ATTRIBUTION_PAIRS = 4  # per emotion
DEFAULT_N_PROBES = 40  # per emotion
DEFAULT_WORKERS = 1
DEFAULT_OUTPUT_DIR = "runs/default"


@dataclass(init=False)
class RunConfig:
    """
    Configuration of one discovery and intervention run.

    Every field can be passed directly, set through an `EMC_*` environment variable, or left
    to its default, in that order of precedence.

    Attributes:
        model: Architecture of the toy model (EMC_MODEL, JSON object).
        seed: Seed for weights and every random control (EMC_SEED).
        data_seed: Seed for dataset and probe generation (EMC_DATA_SEED, default seed + 1).
        tau: Hit-rate threshold a pair must exceed to enter steering extraction (EMC_TAU).
        alpha: Steering injection strength for the layer scan (EMC_ALPHA).
        l_emo: Critical middle layer of VEENA (EMC_L_EMO, default model.aggregate_end).
        beta: VEE enhancement coefficient (EMC_BETA).
        gamma: ENA excitation coefficient (EMC_GAMMA).
        k_head: Heads per emotion in the critical head set (EMC_K_HEAD).
        k_neuron: Neurons per emotion in the critical neuron set (EMC_K_NEURON).
        n_pairs: Contrastive pairs per emotion in each of the two splits (EMC_N_PAIRS).
        n_probes: Graded-intensity probes per emotion (EMC_N_PROBES).
        max_new_tokens: Greedy decode length for every hit-rate evaluation (EMC_MAX_NEW_TOKENS).
        head_pairs: Analysis pairs per emotion averaged by head ranking (EMC_HEAD_PAIRS).
        attribution_pairs: Analysis pairs per emotion used by neuron attribution, phase patching and
            knockout (EMC_ATTRIBUTION_PAIRS).
        gradient_mode: "exact" or "truncated" attribution (EMC_GRADIENT_MODE).
        vee_mode: "multiplicative" or the additive ablation (EMC_VEE_MODE).
        workers: Thread pool size for sweeps (EMC_WORKERS).
        show_progress: Display tqdm progress bars (EMC_SHOW_PROGRESS).
        dataset_path: Existing dataset stem to load instead of generating one (EMC_DATASET).
        weights_path: Existing weight file to load instead of planting a model (EMC_WEIGHTS).
        output_dir: Run directory for every report (EMC_OUTPUT_DIR).
    """

    model: ModelConfig
    seed: int
    data_seed: int
    tau: float
    alpha: float
    l_emo: int
    beta: float
    gamma: float
    k_head: int
    k_neuron: int
    n_pairs: int
    n_probes: int
    max_new_tokens: int
    head_pairs: int
    attribution_pairs: int
    gradient_mode: GradientMode
    vee_mode: VeeMode
    workers: int
    show_progress: bool
    dataset_path: str | None
    weights_path: str | None
    output_dir: str
    _provided_fields: set[str] = field(default_factory=set, init=False, repr=False)

    def __init__(
        self,
        model: ModelConfig | dict[str, Any] | object = _NOT_PROVIDED,
        seed: int | object = _NOT_PROVIDED,
        data_seed: int | object = _NOT_PROVIDED,
        tau: float | object = _NOT_PROVIDED,
        alpha: float | object = _NOT_PROVIDED,
        l_emo: int | object = _NOT_PROVIDED,
        beta: float | object = _NOT_PROVIDED,
        gamma: float | object = _NOT_PROVIDED,
        k_head: int | object = _NOT_PROVIDED,
        k_neuron: int | object = _NOT_PROVIDED,
        n_pairs: int | object = _NOT_PROVIDED,
        n_probes: int | object = _NOT_PROVIDED,
        max_new_tokens: int | object = _NOT_PROVIDED,
        head_pairs: int | object = _NOT_PROVIDED,
        attribution_pairs: int | object = _NOT_PROVIDED,
        gradient_mode: GradientMode | str | object = _NOT_PROVIDED,
        vee_mode: VeeMode | str | object = _NOT_PROVIDED,
        workers: int | object = _NOT_PROVIDED,
        show_progress: bool | object = _NOT_PROVIDED,
        dataset_path: str | None | object = _NOT_PROVIDED,
        weights_path: str | None | object = _NOT_PROVIDED,
        output_dir: str | object = _NOT_PROVIDED,
    ) -> None:
        self._provided_fields = {
            field_name
            for field_name, value in {
                "model": model,
                "seed": seed,
                "data_seed": data_seed,
                "tau": tau,
                "alpha": alpha,
                "l_emo": l_emo,
                "beta": beta,
                "gamma": gamma,
                "k_head": k_head,
                "k_neuron": k_neuron,
                "n_pairs": n_pairs,
                "n_probes": n_probes,
                "max_new_tokens": max_new_tokens,
                "head_pairs": head_pairs,
                "attribution_pairs": attribution_pairs,
                "gradient_mode": gradient_mode,
                "vee_mode": vee_mode,
                "workers": workers,
                "show_progress": show_progress,
                "dataset_path": dataset_path,
                "weights_path": weights_path,
                "output_dir": output_dir,
            }.items()
            if value is not _NOT_PROVIDED
        }

        self.model = self._resolve_model(model)
        self.seed = self._resolve_int("seed", seed, "EMC_SEED", DEFAULT_SEED)
        self.data_seed = self._resolve_int("data_seed", data_seed, "EMC_DATA_SEED", self.seed + 1)
        self.tau = self._resolve_float("tau", tau, "EMC_TAU", DEFAULT_TAU)
        self.alpha = self._resolve_float("alpha", alpha, "EMC_ALPHA", DEFAULT_ALPHA)
        self.l_emo = self._resolve_int("l_emo", l_emo, "EMC_L_EMO", self.model.aggregate_end)
        self.beta = self._resolve_float("beta", beta, "EMC_BETA", DEFAULT_BETA)
        self.gamma = self._resolve_float("gamma", gamma, "EMC_GAMMA", DEFAULT_GAMMA)
        self.k_head = self._resolve_int("k_head", k_head, "EMC_K_HEAD", DEFAULT_K_HEAD)
        self.k_neuron = self._resolve_int("k_neuron", k_neuron, "EMC_K_NEURON", DEFAULT_K_NEURON)
        self.n_pairs = self._resolve_int("n_pairs", n_pairs, "EMC_N_PAIRS", DEFAULT_N_PAIRS)
        self.n_probes = self._resolve_int("n_probes", n_probes, "EMC_N_PROBES", DEFAULT_N_PROBES)
        self.max_new_tokens = self._resolve_int(
            "max_new_tokens", max_new_tokens, "EMC_MAX_NEW_TOKENS", DEFAULT_MAX_NEW_TOKENS
        )
        self.head_pairs = self._resolve_int("head_pairs", head_pairs, "EMC_HEAD_PAIRS", DEFAULT_HEAD_PAIRS)
        self.attribution_pairs = self._resolve_int(
            "attribution_pairs", attribution_pairs, "EMC_ATTRIBUTION_PAIRS", DEFAULT_ATTRIBUTION_PAIRS
        )
        self.gradient_mode = self._parse_enum(
            GradientMode,
            self._resolve_value("gradient_mode", gradient_mode, "EMC_GRADIENT_MODE", "exact"),
            source=self._source("gradient_mode", "EMC_GRADIENT_MODE"),
        )
        self.vee_mode = self._parse_enum(
            VeeMode,
            self._resolve_value("vee_mode", vee_mode, "EMC_VEE_MODE", "multiplicative"),
            source=self._source("vee_mode", "EMC_VEE_MODE"),
        )
        self.workers = self._resolve_int("workers", workers, "EMC_WORKERS", DEFAULT_WORKERS)
        self.show_progress = self._resolve_bool("show_progress", show_progress, "EMC_SHOW_PROGRESS", False)
        self.dataset_path = self._resolve_optional_str("dataset_path", dataset_path, "EMC_DATASET")
        self.weights_path = self._resolve_optional_str("weights_path", weights_path, "EMC_WEIGHTS")
        resolved_output = self._resolve_value("output_dir", output_dir, "EMC_OUTPUT_DIR", DEFAULT_OUTPUT_DIR)
        if not isinstance(resolved_output, str | Path):
            raise ValueError("output_dir must be a path")
        self.output_dir = str(resolved_output)

        if not 0.0 <= self.tau <= 1.0:
            raise ValueError("tau must lie in [0, 1]")
        if self.beta < 1.0:
            raise ValueError("beta must be greater than or equal to 1")
        if self.gamma < 1.0:
            raise ValueError("gamma must be greater than or equal to 1")
        if not -1 <= self.l_emo < self.model.n_layers:
            raise ValueError(f"l_emo must lie in [-1, {self.model.n_layers})")
        if self.k_head < 0:
            raise ValueError("k_head must be greater than or equal to 0")
        if self.k_neuron < 0:
            raise ValueError("k_neuron must be greater than or equal to 0")
        if self.n_pairs <= 0:
            raise ValueError("n_pairs must be a positive integer")
        if self.n_probes <= 0:
            raise ValueError("n_probes must be a positive integer")
        if self.max_new_tokens <= 0:
            raise ValueError("max_new_tokens must be a positive integer")
        if self.head_pairs <= 0:
            raise ValueError("head_pairs must be a positive integer")
        if self.attribution_pairs <= 0:
            raise ValueError("attribution_pairs must be a positive integer")
        if self.workers < 1:
            raise ValueError("workers must be greater than or equal to 1")
        if self.seed < 0 or self.data_seed < 0:
            raise ValueError("seeds must be non-negative")

    def _source(self, field_name: str, env_name: str) -> str:
        return env_name if field_name not in self._provided_fields and os.getenv(env_name) else field_name

    def _resolve_value(self, field_name: str, value: object, env_name: str, default: Any) -> Any:
        if field_name in self._provided_fields:
            return value
        env_value = os.getenv(env_name)
        return default if env_value is None else env_value

    def _resolve_optional_str(self, field_name: str, value: object, env_name: str) -> str | None:
        if field_name in self._provided_fields:
            if value is None or isinstance(value, str):
                return value
            if isinstance(value, Path):
                return str(value)
            raise ValueError(f"{field_name} must be a string or None")
        return os.getenv(env_name)

    def _resolve_bool(self, field_name: str, value: object, env_name: str, default: bool) -> bool:
        resolved = self._resolve_value(field_name, value, env_name, default)
        if isinstance(resolved, bool):
            return resolved
        if isinstance(resolved, str):
            return resolved.lower() in ("true", "1", "yes")
        raise ValueError(f"{field_name} must be a boolean")

    def _resolve_int(self, field_name: str, value: object, env_name: str, default: int) -> int:
        resolved = self._resolve_value(field_name, value, env_name, default)
        if isinstance(resolved, bool):
            raise ValueError(f"{field_name} must be an integer")
        try:
            return int(resolved)
        except (TypeError, ValueError) as e:
            raise ValueError(f"{self._source(field_name, env_name)} must be an integer") from e

    def _resolve_float(self, field_name: str, value: object, env_name: str, default: float) -> float:
        resolved = self._resolve_value(field_name, value, env_name, default)
        if isinstance(resolved, bool):
            raise ValueError(f"{field_name} must be a number")
        try:
            return float(resolved)
        except (TypeError, ValueError) as e:
            raise ValueError(f"{self._source(field_name, env_name)} must be a number") from e

    def _resolve_model(self, model: object) -> ModelConfig:
        resolved = model
        if "model" not in self._provided_fields:
            env_model = os.getenv("EMC_MODEL")
            if not env_model:
                return ModelConfig()
            try:
                resolved = json.loads(env_model)
            except json.JSONDecodeError as e:
                raise ValueError("EMC_MODEL must be a valid JSON object of ModelConfig fields") from e
        if isinstance(resolved, ModelConfig):
            return resolved
        if isinstance(resolved, dict):
            return ModelConfig.from_dict(resolved)
        raise ValueError("model must be a ModelConfig or a dictionary of its fields")

    @staticmethod
    def _parse_enum(enum_type: Any, value: object, *, source: str) -> Any:
        if isinstance(value, enum_type):
            return value
        if isinstance(value, str):
            try:
                return enum_type(value.lower())
            except ValueError as e:
                raise ValueError(f"{source} must be one of: {[m.value for m in enum_type]}") from e
        raise ValueError(f"{source} must be one of: {[m.value for m in enum_type]}")

    def with_overrides(self, **overrides: Any) -> "RunConfig":
        """A copy with some fields replaced; fields left out keep their resolved values."""
        values = self.to_dict()
        values["model"] = self.model
        values["gradient_mode"] = self.gradient_mode
        values["vee_mode"] = self.vee_mode
        if "seed" in overrides and "data_seed" not in overrides and "data_seed" not in self._provided_fields:
            values["data_seed"] = int(overrides["seed"]) + 1
        values.update({k: v for k, v in overrides.items() if v is not None})
        return RunConfig(**values)

    def to_dict(self) -> dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "seed": self.seed,
            "data_seed": self.data_seed,
            "tau": self.tau,
            "alpha": self.alpha,
            "l_emo": self.l_emo,
            "beta": self.beta,
            "gamma": self.gamma,
            "k_head": self.k_head,
            "k_neuron": self.k_neuron,
            "n_pairs": self.n_pairs,
            "n_probes": self.n_probes,
            "max_new_tokens": self.max_new_tokens,
            "head_pairs": self.head_pairs,
            "attribution_pairs": self.attribution_pairs,
            "gradient_mode": self.gradient_mode.value,
            "vee_mode": self.vee_mode.value,
            "workers": self.workers,
            "show_progress": self.show_progress,
            "dataset_path": self.dataset_path,
            "weights_path": self.weights_path,
            "output_dir": self.output_dir,
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "RunConfig":
        unknown = set(data) - set(cls.__annotations__) - {"schema_version"}
        if unknown:
            raise ValueError(f"unknown RunConfig fields: {sorted(unknown)}")
        return cls(**{k: v for k, v in data.items() if k != "schema_version"})

    @classmethod
    def from_json(cls, path: str | Path) -> "RunConfig":
        return cls.from_dict(read_canonical(path))

    def save(self, path: str | Path) -> Path:
        return write_canonical(path, self.to_dict())
