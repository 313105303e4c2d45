"""Closed-form FLOP and byte accounting for one attention layer.

Costs are split into three operation groups:

* build key/value: projecting the context into per-head keys and values
* build query/output: the query side, and the output projection
* attention: scores, softmax and weighted sums

Counts are for one decode step of one attention layer, for every input in
the batch. The constant-factor conventions are listed in ``CONVENTIONS``;
the instrumented oracle in :mod:`elattn.perf.instrumented` counts the same
way by running the real kernels.
"""

from dataclasses import asdict, dataclass
from enum import Enum
from typing import Dict, Optional, Tuple

from elattn.config import ARCHITECTURES, DECODER_ONLY, ENCODER_DECODER
from elattn.errors import ModeError, ParameterError
from elattn.model import AttentionMode

GIB = 2**30
GB = 10**9

CONVENTIONS = (
    "Every kernel reads each operand element once and writes its output once.",
    "Score matrices are written by the score kernel, read and written by "
    "softmax, and read by the weighted-sum kernel (4 passes).",
    "The key/value projection is one fused kernel reading the context once.",
    "EL key-bias scalars are read by the score kernel.",
    "Query lanes (beams) of one input share each weight read.",
    "FLOPs are 2 x multiply-accumulates; softmax and bias adds count no FLOPs.",
    "Multi-head attention reads per-beam key/value copies once per beam.",
    "The batch multiplies every count.",
    "Memory movement in decimal GB (1e9 bytes); cache sizes in GiB (2^30 bytes).",
)


class StepKind(str, Enum):
    """Which decode step a profile describes."""

    FIRST = "first"
    SUBSEQUENT = "subsequent"


@dataclass(frozen=True)
class WorkloadSpec:
    """Shape of an attention workload.

    Attributes:
        n: Context (sequence) length
        d_m: Model dimension
        h: Number of heads
        d_k: Per-head dimension (defaults to d_m // h)
        x: Beam size
        batch: Inputs per batch (B)
        L: Decoder layers
        bytes_per_value: 2, 4 or 8
        architecture: "encoder-decoder" or "decoder-only"
        mode: Attention mode
        include_key_bias: EL key-bias scalars are computed and read
        include_value_bias: The value bias is applied
    """

    n: int
    d_m: int
    h: int
    d_k: Optional[int] = None
    x: int = 1
    batch: int = 1
    L: int = 1
    bytes_per_value: int = 2
    architecture: str = ENCODER_DECODER
    mode: AttentionMode = AttentionMode.MHA_CACHED
    include_key_bias: bool = True
    include_value_bias: bool = True

    def __post_init__(self):
        if self.d_k is None and self.h > 0:
            object.__setattr__(self, "d_k", self.d_m // self.h)
        object.__setattr__(self, "mode", AttentionMode.parse(self.mode))
        self.validate()

    @property
    def hk(self) -> int:
        return self.h * self.d_k

    def validate(self) -> "WorkloadSpec":
        """Raise ParameterError for non-positive sizes or an unknown width."""
        for name in ("n", "d_m", "h", "d_k", "x", "batch", "L"):
            value = getattr(self, name)
            if value is None or value < 1:
                raise ParameterError(f"{name} must be >= 1, got {value}")
        if self.bytes_per_value not in (2, 4, 8):
            raise ParameterError(
                f"bytes_per_value must be 2, 4 or 8, got {self.bytes_per_value}"
            )
        if self.architecture not in ARCHITECTURES:
            raise ParameterError(f"Unknown architecture: {self.architecture}")
        return self

    def to_dict(self) -> Dict:
        data = asdict(self)
        data["mode"] = self.mode.value
        return data


@dataclass(frozen=True)
class GroupCost:
    """FLOPs and bytes of one operation group."""

    flops: int = 0
    bytes: int = 0

    @property
    def ai(self) -> float:
        """Arithmetic intensity in FLOPs per byte (0 when nothing moves)."""
        return self.flops / self.bytes if self.bytes else 0.0

    def __add__(self, other: "GroupCost") -> "GroupCost":
        return GroupCost(self.flops + other.flops, self.bytes + other.bytes)

    def scaled(self, factor: int) -> "GroupCost":
        return GroupCost(self.flops * factor, self.bytes * factor)


@dataclass(frozen=True)
class OpGroupProfile:
    """Per-group costs of one decode step of one attention layer."""

    build_kv: GroupCost
    build_query: GroupCost
    attention: GroupCost

    def groups(self) -> Dict[str, GroupCost]:
        return {
            "build_kv": self.build_kv,
            "build_query": self.build_query,
            "attention": self.attention,
        }

    @property
    def total(self) -> GroupCost:
        return self.build_kv + self.build_query + self.attention

    def to_dict(self) -> Dict[str, Dict[str, float]]:
        return {
            name: {"flops": g.flops, "bytes": g.bytes, "ai": g.ai}
            for name, g in self.groups().items()
        }


def _build_kv(spec: WorkloadSpec, step: StepKind) -> Tuple[int, int]:
    if spec.mode == AttentionMode.EL:
        return 0, 0
    if spec.mode == AttentionMode.MHA_CACHED and step == StepKind.SUBSEQUENT:
        return 0, 0
    n, d_m, hk = spec.n, spec.d_m, spec.hk
    flops = 4 * n * d_m * hk
    elements = n * d_m + 2 * d_m * hk + 2 * hk + 2 * n * hk
    return flops, elements


def _build_query(spec: WorkloadSpec) -> Tuple[int, int]:
    x, d_m, h, d_k, hk = spec.x, spec.d_m, spec.h, spec.d_k, spec.hk
    query = (x * d_m + d_m * hk + hk) + x * hk
    output = (x * hk + hk * d_m + d_m) + x * d_m
    if spec.mode != AttentionMode.EL:
        return 4 * x * d_m * hk, query + output
    expand = (x * hk + hk * d_m) + x * h * d_m
    value = (x * h * d_m + h * d_m * d_k) + x * hk
    if spec.include_value_bias:
        value += hk
    flops = 2 * x * (d_m * hk + hk * d_m + h * d_m * d_k + hk * d_m)
    elements = query + expand + value + output
    if spec.include_key_bias:
        flops += 2 * x * hk
        elements += (x * hk + hk) + x * h
    return flops, elements


def _attention(spec: WorkloadSpec) -> Tuple[int, int]:
    n, d_m, h, d_k, x, hk = spec.n, spec.d_m, spec.h, spec.d_k, spec.x, spec.hk
    if spec.mode != AttentionMode.EL:
        return 4 * x * h * n * d_k, 2 * x * n * hk + 2 * x * hk + 4 * x * h * n
    elements = 2 * n * d_m + 2 * x * h * d_m + 4 * x * h * n
    if spec.include_key_bias:
        elements += x * h
    return 4 * x * h * n * d_m, elements


def op_group_profile(
    spec: WorkloadSpec, step: StepKind = StepKind.SUBSEQUENT
) -> OpGroupProfile:
    """Exact per-group FLOPs and bytes for one decode step of one layer.

    Args:
        spec: Workload shape and attention mode
        step: First step (key/value projection happens in cached mode too)
            or a subsequent one

    Returns:
        Costs for the whole batch, bytes scaled by ``bytes_per_value``.
    """
    step = StepKind(step)
    scale = spec.batch

    def cost(counts: Tuple[int, int]) -> GroupCost:
        flops, elements = counts
        return GroupCost(flops * scale, elements * spec.bytes_per_value * scale)

    return OpGroupProfile(
        build_kv=cost(_build_kv(spec, step)),
        build_query=cost(_build_query(spec)),
        attention=cost(_attention(spec)),
    )


def cache_bytes(spec: WorkloadSpec) -> Tuple[int, int]:
    """Input-related cache sizes for encoder-decoder attention.

    Multi-head attention keeps keys and values per layer and per beam:
    ``2 * L * B * x * n * d_m`` values. EL-attention keeps the encoder output
    once: ``B * n * d_m`` values.

    Returns:
        ``(mha_bytes, el_bytes)``

    Raises:
        ModeError: For a decoder-only spec.
    """
    if spec.architecture == DECODER_ONLY:
        raise ModeError("cache_bytes describes encoder-decoder attention only")
    per_input = spec.n * spec.d_m * spec.bytes_per_value
    mha = 2 * spec.L * spec.batch * spec.x * per_input
    el = spec.batch * per_input
    return mha, el


def to_gib(nbytes: float) -> float:
    return nbytes / GIB


def to_gb(nbytes: float) -> float:
    return nbytes / GB
