"""Wall-clock benchmarks with roofline predictions alongside.

:func:`measure` times full generation on a model. :func:`sweep` times one
attention decode step over a grid of sequence lengths and beam sizes,
scaling the batch inversely with ``n * x``. Timings are median-of-repeats
after one untimed warm-up pass; predictions are advisory.
"""

import logging
import statistics
import time
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

from elattn.config import GenConfig, ModelConfig, RooflineSpec
from elattn.decoding import search
from elattn.errors import InputError, ParameterError
from elattn.model import AttentionMode, Model
from elattn.perf.accounting import StepKind, WorkloadSpec, op_group_profile
from elattn.perf.instrumented import AttentionWorkload
from elattn.perf.roofline import roofline_predict
from elattn.tensor_core import default_dtype

logger = logging.getLogger(__name__)

SWEEP_BATCH_BASE = 4096
MIN_REPEATS = 3

COLUMNS = (
    "n",
    "x",
    "batch",
    "mode",
    "measured_s",
    "predicted_s",
    "flops",
    "bytes",
    "ai",
)


@dataclass(frozen=True)
class BenchRow:
    """One measured configuration.

    Attributes:
        n: Sequence length
        x: Beam size
        batch: Inputs per batch
        mode: Attention mode
        measured_s: Median wall-clock seconds per sample
        predicted_s: Roofline seconds per sample (None if unavailable)
        flops: Modelled FLOPs per sample
        bytes: Modelled bytes per sample
        ai: flops / bytes
        outputs: Top token sequence per input (generation runs only)
    """

    n: int
    x: int
    batch: int
    mode: AttentionMode
    measured_s: float
    predicted_s: Optional[float]
    flops: int
    bytes: int
    ai: float
    outputs: Tuple[Tuple[int, ...], ...] = ()

    def to_dict(self) -> Dict:
        return {
            "n": self.n,
            "x": self.x,
            "batch": self.batch,
            "mode": self.mode.value,
            "measured_s": self.measured_s,
            "predicted_s": self.predicted_s,
            "flops": self.flops,
            "bytes": self.bytes,
            "ai": self.ai,
        }


@dataclass
class BenchReport:
    rows: List[BenchRow] = field(default_factory=list)


def _time(fn: Callable[[], object], repeats: int) -> float:
    """Median seconds of ``repeats`` calls after one untimed warm-up call."""
    if repeats < MIN_REPEATS:
        raise ParameterError(f"repeats must be >= {MIN_REPEATS}, got {repeats}")
    fn()
    timings = []
    for _ in range(repeats):
        start = time.perf_counter()
        fn()
        timings.append(time.perf_counter() - start)
    return statistics.median(timings)


def _bytes_per_value() -> int:
    return np.dtype(default_dtype()).itemsize


def measure(
    model: Model,
    inputs: Sequence[Sequence[int]],
    cfg: GenConfig,
    mode: AttentionMode,
    repeats: int = MIN_REPEATS,
    hw: Optional[RooflineSpec] = None,
    greedy: bool = False,
) -> BenchRow:
    """Time generation over ``inputs`` in one attention mode.

    The prediction sums the roofline time of every decode step of every
    decoder layer's cross-attention (encoder-decoder) or prefix
    self-attention (decoder-only), using the mean input and output lengths.

    Raises:
        ParameterError: If ``inputs`` is empty or ``repeats`` < 3.
        InputError: If an input finishes no hypothesis, which happens when
            every continuation is banned.
    """
    if not inputs:
        raise ParameterError("measure needs at least one input")
    mode = AttentionMode.parse(mode)
    outputs: List[Tuple[int, ...]] = []

    def run():
        outputs.clear()
        for index, source in enumerate(inputs):
            hyps = search(model, source, cfg, mode, greedy=greedy)
            if not hyps:
                raise InputError(f"input {index} finished no hypothesis")
            outputs.append(hyps[0].tokens)

    seconds = _time(run, repeats) / len(inputs)
    c = model.config
    x = 1 if greedy else cfg.beam
    n = max(1, round(sum(len(s) for s in inputs) / len(inputs)))
    steps = max(1, round(sum(len(o) for o in outputs) / len(outputs)))
    spec = WorkloadSpec(
        n=n,
        d_m=c.d_m,
        h=c.h,
        d_k=c.d_k,
        x=x,
        batch=1,
        L=c.L,
        bytes_per_value=_bytes_per_value(),
        architecture=c.architecture,
        mode=mode,
    )
    first = op_group_profile(spec, StepKind.FIRST)
    rest = op_group_profile(spec, StepKind.SUBSEQUENT)
    flops = c.L * (first.total.flops + (steps - 1) * rest.total.flops)
    nbytes = c.L * (first.total.bytes + (steps - 1) * rest.total.bytes)
    predicted = None
    if hw is not None:
        predicted = c.L * (
            roofline_predict(first, hw).total
            + (steps - 1) * roofline_predict(rest, hw).total
        )
    logger.info(f"Measured {mode.value}: {seconds:.6f} s/sample over {len(inputs)}")
    return BenchRow(
        n=n,
        x=x,
        batch=len(inputs),
        mode=mode,
        measured_s=seconds,
        predicted_s=predicted,
        flops=flops,
        bytes=nbytes,
        ai=flops / nbytes if nbytes else 0.0,
        outputs=tuple(outputs),
    )


def sweep_batch(n: int, x: int) -> int:
    """Batch size for a sweep point, inversely proportional to n * x."""
    return max(1, SWEEP_BATCH_BASE // (n * x))


def sweep(
    template: ModelConfig,
    n_values: Sequence[int],
    x_values: Sequence[int],
    modes: Sequence[AttentionMode],
    hw: RooflineSpec,
    repeats: int = MIN_REPEATS,
    seed: int = 0,
) -> BenchReport:
    """Time one attention decode step over the (n, x, mode) grid.

    Args:
        template: Supplies d_m, h, d_k, L and the architecture
        n_values: Sequence lengths
        x_values: Beam sizes
        modes: Attention modes
        hw: Peaks for the predicted column
        repeats: Timed repeats per point
        seed: Seed for the random weights and inputs

    Returns:
        One row per (n, x, mode), in that nesting order.
    """
    if not n_values or not x_values or not modes:
        raise ParameterError("sweep needs at least one n, one x and one mode")
    report = BenchReport()
    for n in n_values:
        for x in x_values:
            for mode in modes:
                spec = WorkloadSpec(
                    n=n,
                    d_m=template.d_m,
                    h=template.h,
                    d_k=template.d_k,
                    x=x,
                    batch=sweep_batch(n, x),
                    L=template.L,
                    bytes_per_value=_bytes_per_value(),
                    architecture=template.architecture,
                    mode=mode,
                )
                workload = AttentionWorkload(spec, seed=seed)
                seconds = _time(workload.run, repeats) / spec.batch
                profile = op_group_profile(spec, StepKind.SUBSEQUENT)
                total = profile.total
                report.rows.append(
                    BenchRow(
                        n=n,
                        x=x,
                        batch=spec.batch,
                        mode=spec.mode,
                        measured_s=seconds,
                        predicted_s=roofline_predict(profile, hw).total / spec.batch,
                        flops=total.flops // spec.batch,
                        bytes=total.bytes // spec.batch,
                        ai=total.ai,
                    )
                )
                logger.info(
                    f"n={n} x={x} {spec.mode.value}: {seconds:.3e} s/sample "
                    f"(batch {spec.batch})"
                )
    return report
