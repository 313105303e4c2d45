"""Deterministic dense-tensor kernels for toy transformer inference.

Tensors are plain row-major ``numpy.ndarray`` values. Every kernel in this
module is pure and checks that its output is finite. When a
:class:`KernelTracker` is active (see :func:`track_kernels`) each kernel also
reports the multiply-accumulates it performed and the elements it read and
wrote, labelled with the current :class:`OpGroup`.
"""

import contextlib
import logging
from contextvars import ContextVar
from dataclasses import dataclass
from enum import Enum
from typing import Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from elattn.errors import NumericalError, ParameterError, ShapeError

logger = logging.getLogger(__name__)

Tensor = np.ndarray

_PRECISIONS = {"f64": np.float64, "f32": np.float32}
_dtype: ContextVar[type] = ContextVar("elattn_dtype", default=np.float64)


def set_precision(name: str) -> None:
    """Set the process-wide floating-point precision ("f64" or "f32")."""
    if name not in _PRECISIONS:
        raise ParameterError(f"Unknown precision '{name}', expected f64 or f32")
    _dtype.set(_PRECISIONS[name])
    logger.debug(f"Precision set to {name}")


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    """Temporarily switch precision inside a ``with`` block."""
    if name not in _PRECISIONS:
        raise ParameterError(f"Unknown precision '{name}', expected f64 or f32")
    token = _dtype.set(_PRECISIONS[name])
    try:
        yield
    finally:
        _dtype.reset(token)


def default_dtype() -> type:
    """Return the numpy dtype used for newly created tensors."""
    return _dtype.get()


# ---------------------------------------------------------------------------
# Kernel tracking
# ---------------------------------------------------------------------------


class OpGroup(str, Enum):
    """Cost taxonomy for attention kernels."""

    BUILD_KV = "build_kv"
    BUILD_QUERY = "build_query"
    ATTENTION = "attention"
    OTHER = "other"


@dataclass(frozen=True)
class KernelRecord:
    """One kernel invocation as seen by a :class:`KernelTracker`.

    Attributes:
        name: Kernel name (``matmul``, ``softmax``, ...).
        group: Operation group active when the kernel ran.
        macs: Multiply-accumulate count.
        reads: Operand elements read, each counted once.
        writes: Output elements written.
        out_shape: Shape of the produced tensor.
        operand_roots: Identities of the root buffers of the operands.
    """

    name: str
    group: OpGroup
    macs: int
    reads: int
    writes: int
    out_shape: Tuple[int, ...]
    operand_roots: Tuple[int, ...]

    @property
    def flops(self) -> int:
        return 2 * self.macs


def _root_id(array: np.ndarray) -> int:
    while isinstance(array.base, np.ndarray):
        array = array.base
    return id(array)


class KernelTracker:
    """Collects :class:`KernelRecord` entries for every kernel call."""

    def __init__(self):
        self.records: List[KernelRecord] = []

    def record(
        self,
        name: str,
        operands: Sequence[np.ndarray],
        out: np.ndarray,
        macs: int = 0,
    ) -> None:
        self.records.append(
            KernelRecord(
                name=name,
                group=_group.get(),
                macs=int(macs),
                reads=int(sum(op.size for op in operands)),
                writes=int(out.size),
                out_shape=tuple(out.shape),
                operand_roots=tuple(_root_id(op) for op in operands),
            )
        )

    def select(self, group: Optional[OpGroup] = None) -> List[KernelRecord]:
        """Return the records of one group, or all records."""
        if group is None:
            return list(self.records)
        return [r for r in self.records if r.group == group]

    def flops(self, group: Optional[OpGroup] = None) -> int:
        return sum(r.flops for r in self.select(group))

    def elements_moved(self, group: Optional[OpGroup] = None) -> int:
        return sum(r.reads + r.writes for r in self.select(group))

    def output_shapes(self, group: Optional[OpGroup] = None) -> List[Tuple[int, ...]]:
        return [r.out_shape for r in self.select(group)]

    def reads_of(self, array: np.ndarray) -> int:
        """Count kernel calls that read ``array`` (or a view of it)."""
        root = _root_id(array)
        return sum(1 for r in self.records if root in r.operand_roots)


_tracker: ContextVar[Optional[KernelTracker]] = ContextVar(
    "elattn_tracker", default=None
)
_group: ContextVar[OpGroup] = ContextVar("elattn_group", default=OpGroup.OTHER)


@contextlib.contextmanager
def track_kernels() -> Iterator[KernelTracker]:
    """Record every kernel issued inside the ``with`` block."""
    tracker = KernelTracker()
    token = _tracker.set(tracker)
    try:
        yield tracker
    finally:
        _tracker.reset(token)


@contextlib.contextmanager
def op_group(group: OpGroup) -> Iterator[None]:
    """Label kernels issued inside the block with ``group``."""
    token = _group.set(group)
    try:
        yield
    finally:
        _group.reset(token)


def _report(
    name: str, operands: Sequence[np.ndarray], out: np.ndarray, macs: int = 0
) -> None:
    tracker = _tracker.get()
    if tracker is not None:
        tracker.record(name, operands, out, macs)


def _ensure_finite(out: np.ndarray, name: str) -> np.ndarray:
    if not np.isfinite(out).all():
        raise NumericalError(f"{name} produced non-finite values")
    return out


# ---------------------------------------------------------------------------
# Kernels
# ---------------------------------------------------------------------------


def matmul(A: Tensor, B: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Multiply an m×k matrix by a k×p matrix.

    Args:
        A: Left operand, shape (m, k).
        B: Right operand, shape (k, p).
        bias: Optional addend broadcast against the (m, p) output.

    Returns:
        The (m, p) product, plus ``bias`` when given.

    Raises:
        ShapeError: If the operands are not 2-D or inner dimensions differ.
    """
    if A.ndim != 2 or B.ndim != 2 or A.shape[1] != B.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {A.shape} x {B.shape}")
    out = A @ B
    operands = [A, B]
    if bias is not None:
        try:
            out = out + bias
        except ValueError as e:
            raise ShapeError(
                f"matmul bias {bias.shape} does not broadcast to {out.shape}"
            ) from e
        operands.append(bias)
    _report("matmul", operands, out, A.shape[0] * A.shape[1] * B.shape[1])
    return _ensure_finite(out, "matmul")


def batched_matmul(A: Tensor, B: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Multiply matching slices of two 3-D tensors: (b, m, k) x (b, k, p).

    Raises:
        ShapeError: If the batch (first) dimensions or inner dimensions differ.
    """
    if A.ndim != 3 or B.ndim != 3:
        raise ShapeError(f"batched_matmul expects 3-D operands: {A.shape} x {B.shape}")
    if A.shape[0] != B.shape[0]:
        raise ShapeError(
            f"batched_matmul first dimensions differ: {A.shape} x {B.shape}"
        )
    if A.shape[2] != B.shape[1]:
        raise ShapeError(
            f"batched_matmul inner dimensions differ: {A.shape} x {B.shape}"
        )
    out = np.matmul(A, B)
    operands = [A, B]
    if bias is not None:
        try:
            out = out + bias
        except ValueError as e:
            raise ShapeError(
                f"batched_matmul bias {bias.shape} does not broadcast to {out.shape}"
            ) from e
        operands.append(bias)
    macs = A.shape[0] * A.shape[1] * A.shape[2] * B.shape[2]
    _report("batched_matmul", operands, out, macs)
    return _ensure_finite(out, "batched_matmul")


def scaled_softmax_rows(X: Tensor, d: int) -> Tensor:
    """Compute softmax(X / sqrt(d)) along the last dimension.

    Each row is shifted by its maximum first; the result is unchanged by
    the shift.

    Raises:
        ParameterError: If ``d`` < 1.
        ShapeError: If the last dimension is empty.
    """
    if d < 1:
        raise ParameterError(f"softmax normaliser d must be >= 1, got {d}")
    if X.ndim == 0 or X.shape[-1] == 0:
        raise ShapeError(f"softmax over empty last dimension: {X.shape}")
    scaled = X / np.sqrt(d)
    shifted = scaled - scaled.max(axis=-1, keepdims=True)
    weights = np.exp(shifted)
    out = weights / weights.sum(axis=-1, keepdims=True)
    _report("softmax", [X], out)
    return _ensure_finite(out, "scaled_softmax_rows")


def layer_norm(X: Tensor, gain: Tensor, shift: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last dimension to zero mean and unit variance, then scale and shift."""
    if eps <= 0:
        raise ParameterError(f"layer_norm eps must be > 0, got {eps}")
    if gain.shape != (X.shape[-1],) or shift.shape != (X.shape[-1],):
        raise ShapeError(
            f"layer_norm parameters {gain.shape}/{shift.shape} do not match {X.shape}"
        )
    mean = X.mean(axis=-1, keepdims=True)
    var = ((X - mean) ** 2).mean(axis=-1, keepdims=True)
    out = (X - mean) / np.sqrt(var + eps) * gain + shift
    _report("layer_norm", [X, gain, shift], out)
    return _ensure_finite(out, "layer_norm")


def relu(X: Tensor) -> Tensor:
    """Elementwise max(x, 0)."""
    out = np.maximum(X, 0)
    _report("relu", [X], out)
    return out


# ---------------------------------------------------------------------------
# Seeded generation
# ---------------------------------------------------------------------------

_MASK64 = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_TWO_POW_MINUS_53 = 1.0 / float(1 << 53)


def _mix(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * _MIX1
    z = (z ^ (z >> np.uint64(27))) * _MIX2
    return z ^ (z >> np.uint64(31))


class Rng:
    """SplitMix64 generator.

    The i-th output after construction is ``mix(seed + i * gamma)``, so a
    block of values can be produced in one vectorised pass and the stream
    is identical on every platform.
    """

    def __init__(self, seed: int):
        self.state = int(seed) & _MASK64

    def next_block(self, count: int) -> np.ndarray:
        """Return the next ``count`` raw 64-bit outputs as a uint64 array."""
        steps = np.arange(1, count + 1, dtype=np.uint64)
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + steps * np.uint64(_GAMMA)
            out = _mix(z)
        self.state = (self.state + count * _GAMMA) & _MASK64
        return out

    def next_u64(self) -> int:
        return int(self.next_block(1)[0])

    def next_below(self, bound: int) -> int:
        """Return an integer in [0, bound)."""
        if bound < 1:
            raise ParameterError(f"bound must be >= 1, got {bound}")
        return self.next_u64() % bound

    def choice(self, values: Sequence):
        return values[self.next_below(len(values))]

    def split(self) -> "Rng":
        """Derive an independent generator seeded from this stream."""
        return Rng(self.next_u64())


def seeded_uniform(
    shape: Union[int, Sequence[int]], rng: Rng, lo: float, hi: float
) -> Tensor:
    """Draw a tensor of uniform values in [lo, hi) from ``rng``.

    Raises:
        ParameterError: If ``lo`` >= ``hi``.
    """
    if lo >= hi:
        raise ParameterError(f"seeded_uniform requires lo < hi, got [{lo}, {hi})")
    shape = (shape,) if isinstance(shape, int) else tuple(shape)
    count = int(np.prod(shape, dtype=np.int64))
    unit = (rng.next_block(count) >> np.uint64(11)).astype(np.float64)
    values = lo + (hi - lo) * (unit * _TWO_POW_MINUS_53)
    return values.reshape(shape).astype(default_dtype())
