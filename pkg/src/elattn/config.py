"""Configuration module for the elattn application."""

import importlib.metadata
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, Optional

import yaml

from elattn.errors import ParameterError

ENCODER_DECODER = "encoder-decoder"
DECODER_ONLY = "decoder-only"
ARCHITECTURES = (ENCODER_DECODER, DECODER_ONLY)

PAD_ID = 0
BOS_ID = 1
EOS_ID = 2


def get_version():
    """Returns the current version of the application from package metadata."""
    try:
        return importlib.metadata.version("elattn")
    except importlib.metadata.PackageNotFoundError:
        return "0.0.0-dev"  # Development version when not installed


def _pick(cls, data: Dict[str, Any]) -> Dict[str, Any]:
    known = {f.name for f in fields(cls)}
    unknown = set(data) - known
    if unknown:
        raise ParameterError(
            f"Unknown {cls.__name__} fields: {', '.join(sorted(unknown))}"
        )
    return dict(data)


@dataclass
class ModelConfig:
    """Shape and seed of a toy transformer.

    Attributes:
        architecture: "encoder-decoder" or "decoder-only"
        L_enc: Number of encoder layers (ignored for decoder-only)
        L: Number of decoder layers
        d_m: Model dimension
        h: Number of attention heads
        d_k: Per-head dimension (defaults to d_m // h)
        d_ff: Feed-forward width
        vocab: Vocabulary size; ids 0, 1, 2 are pad, bos and eos
        max_positions: Number of learned position embeddings
        seed: Seed for weight initialisation
    """

    architecture: str = ENCODER_DECODER
    L_enc: int = 2
    L: int = 2
    d_m: int = 32
    h: int = 4
    d_k: Optional[int] = None
    d_ff: int = 64
    vocab: int = 101
    max_positions: int = 256
    seed: int = 0

    def __post_init__(self):
        if self.d_k is None and self.h > 0:
            self.d_k = self.d_m // self.h

    @property
    def is_encoder_decoder(self) -> bool:
        return self.architecture == ENCODER_DECODER

    def validate(self) -> "ModelConfig":
        """Check field ranges.

        Raises:
            ParameterError: If any field is out of range.
        """
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"Unknown architecture: {self.architecture}")
        if self.L < 1:
            raise ParameterError(f"L must be >= 1, got {self.L}")
        if self.is_encoder_decoder and self.L_enc < 1:
            raise ParameterError(f"L_enc must be >= 1, got {self.L_enc}")
        if self.vocab < 4:
            raise ParameterError(f"vocab must be >= 4, got {self.vocab}")
        for name in ("d_m", "h", "d_k", "d_ff", "max_positions"):
            value = getattr(self, name)
            if value is None or value < 1:
                raise ParameterError(f"{name} must be >= 1, got {value}")
        if not 0 <= self.seed < 2**64:
            raise ParameterError(
                f"seed must be an unsigned 64-bit integer, got {self.seed}"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "ModelConfig":
        return cls(**_pick(cls, data))


@dataclass
class GenConfig:
    """Search settings for generation.

    Attributes:
        beam: Beam size x
        max_out_len: Maximum generated tokens, eos included
        min_out_len: eos is banned until this many tokens are generated
        length_penalty: Exponent alpha in logprob_sum / length**alpha
        no_repeat_ngram: Block repeated n-grams of this size (0 disables)
        diverse_groups: Number of diverse beam groups G
        diverse_strength: Hamming diversity penalty lambda
    """

    beam: int = 4
    max_out_len: int = 20
    min_out_len: int = 0
    length_penalty: float = 1.0
    no_repeat_ngram: int = 0
    diverse_groups: int = 1
    diverse_strength: float = 0.0

    def validate(self) -> "GenConfig":
        """Check field ranges.

        Raises:
            ParameterError: If any field is out of range.
        """
        if self.beam < 1:
            raise ParameterError(f"beam must be >= 1, got {self.beam}")
        if self.max_out_len < 1:
            raise ParameterError(f"max_out_len must be >= 1, got {self.max_out_len}")
        if not 0 <= self.min_out_len < self.max_out_len:
            raise ParameterError(
                f"min_out_len must be in [0, max_out_len), got {self.min_out_len}"
            )
        if self.length_penalty < 0:
            raise ParameterError(
                f"length_penalty must be >= 0, got {self.length_penalty}"
            )
        if self.no_repeat_ngram < 0:
            raise ParameterError(
                f"no_repeat_ngram must be >= 0, got {self.no_repeat_ngram}"
            )
        if self.diverse_groups < 1:
            raise ParameterError(
                f"diverse_groups must be >= 1, got {self.diverse_groups}"
            )
        if self.diverse_groups > 1 and self.beam % self.diverse_groups:
            raise ParameterError(
                f"beam {self.beam} is not divisible by diverse_groups "
                f"{self.diverse_groups}"
            )
        if self.diverse_strength < 0:
            raise ParameterError(
                f"diverse_strength must be >= 0, got {self.diverse_strength}"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "GenConfig":
        return cls(**_pick(cls, data))


@dataclass
class RooflineSpec:
    """Hardware peaks for the roofline model.

    The defaults are V100-like sample values; nothing is auto-detected.

    Attributes:
        peak_gflops: Peak compute throughput in GFLOP/s
        peak_gbs: Peak memory bandwidth in GB/s (decimal)
    """

    peak_gflops: float = 15700.0
    peak_gbs: float = 900.0

    def validate(self) -> "RooflineSpec":
        """Raise ParameterError unless both peaks are positive."""
        if not self.peak_gflops > 0 or not self.peak_gbs > 0:
            raise ParameterError(
                f"hardware peaks must be positive, got {self.peak_gflops} GFLOP/s "
                f"and {self.peak_gbs} GB/s"
            )
        return self

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RooflineSpec":
        return cls(**{k: float(v) for k, v in _pick(cls, data).items()})


@dataclass
class RunConfig:
    """Everything a CLI run reads from a YAML file.

    Attributes:
        model: Toy model shape and seed
        generation: Search settings
        hardware: Roofline peaks
        precision: "f64" or "f32"
    """

    model: ModelConfig = field(default_factory=ModelConfig)
    generation: GenConfig = field(default_factory=GenConfig)
    hardware: RooflineSpec = field(default_factory=RooflineSpec)
    precision: str = "f64"

    def to_dict(self) -> Dict[str, Any]:
        return {
            "model": self.model.to_dict(),
            "generation": self.generation.to_dict(),
            "hardware": self.hardware.to_dict(),
            "precision": self.precision,
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> "RunConfig":
        unknown = set(data) - {"model", "generation", "hardware", "precision"}
        if unknown:
            raise ParameterError(
                f"Unknown configuration sections: {', '.join(sorted(unknown))}"
            )
        return cls(
            model=ModelConfig.from_dict(data.get("model") or {}),
            generation=GenConfig.from_dict(data.get("generation") or {}),
            hardware=RooflineSpec.from_dict(data.get("hardware") or {}),
            precision=data.get("precision", "f64"),
        )


def load_run_config(config_path: str) -> RunConfig:
    """Load a run configuration from a YAML file.

    Args:
        config_path: Path to the configuration file

    Returns:
        RunConfig: The loaded configuration, or defaults if the file is missing
    """
    try:
        with open(config_path) as f:
            data = yaml.safe_load(f)
            return RunConfig.from_dict(data or {})
    except FileNotFoundError:
        return RunConfig()


def save_run_config(config: RunConfig, config_path: str) -> None:
    """Save a run configuration to a YAML file.

    Args:
        config: The configuration to save
        config_path: Path to the configuration file
    """
    os.makedirs(os.path.dirname(os.path.abspath(config_path)), exist_ok=True)

    with open(config_path, "w") as f:
        yaml.dump(config.to_dict(), f, default_flow_style=False, sort_keys=False)
