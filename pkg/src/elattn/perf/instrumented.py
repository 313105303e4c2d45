"""Instrumented execution of one attention decode step.

:class:`AttentionWorkload` builds random weights, contexts and queries for a
:class:`WorkloadSpec` and runs the real attention kernels for one decode
step of one layer. Under :func:`elattn.tensor_core.track_kernels` every
multiply-accumulate and every element read or written is tallied, which is
the oracle the closed forms in :mod:`elattn.perf.accounting` are checked
against. The benchmark harness times the same workload without tracking.
"""

import logging
from typing import List, Optional

from elattn.attention import (
    AttentionParams,
    KvCache,
    el_attention,
    el_attention_unfolded,
    mha_cached_attention,
)
from elattn.model import AttentionMode
from elattn.perf.accounting import GroupCost, OpGroupProfile, StepKind, WorkloadSpec
from elattn.tensor_core import (
    KernelTracker,
    OpGroup,
    Rng,
    Tensor,
    seeded_uniform,
    track_kernels,
)

logger = logging.getLogger(__name__)


class AttentionWorkload:
    """Weights, contexts and queries for ``spec.batch`` inputs.

    Args:
        spec: Workload shape and mode
        seed: Seed for the random tensors
        inputs: Number of inputs to materialise (defaults to ``spec.batch``)
    """

    def __init__(self, spec: WorkloadSpec, seed: int = 0, inputs: Optional[int] = None):
        self.logger = logging.getLogger(__name__)
        self.spec = spec
        rng = Rng(seed)
        self.params = AttentionParams.random(
            spec.h, spec.d_m, spec.d_k, rng.split()
        ).with_flags(spec.include_key_bias, spec.include_value_bias)
        count = spec.batch if inputs is None else inputs
        self.contexts: List[Tensor] = [
            seeded_uniform((spec.n, spec.d_m), rng, -1.0, 1.0) for _ in range(count)
        ]
        self.queries: List[Tensor] = [
            seeded_uniform((spec.x, spec.d_m), rng, -1.0, 1.0) for _ in range(count)
        ]
        self.caches: List[KvCache] = []
        if spec.mode == AttentionMode.MHA_CACHED:
            self.caches = [
                KvCache.from_hidden(H, self.params, spec.x) for H in self.contexts
            ]
        self.logger.debug(f"Prepared {count} inputs for {spec.mode.value}")

    def run_input(self, i: int, step: StepKind = StepKind.SUBSEQUENT) -> Tensor:
        """Run one decode step for input ``i``; returns (x, d_m)."""
        q, H = self.queries[i], self.contexts[i]
        mode = self.spec.mode
        if mode == AttentionMode.EL:
            return el_attention(q, H, self.params)
        if mode == AttentionMode.MHA_CACHED and step == StepKind.SUBSEQUENT:
            cache = self.caches[i]
        else:
            # Projection is part of the step: once per input, then one copy
            # per beam.
            cache = KvCache.from_hidden(H, self.params, self.spec.x)
        return mha_cached_attention(q, cache, self.params)

    def run(self, step: StepKind = StepKind.SUBSEQUENT) -> List[Tensor]:
        return [self.run_input(i, step) for i in range(len(self.contexts))]


def profile_from_tracker(
    tracker: KernelTracker, bytes_per_value: int, scale: int = 1
) -> OpGroupProfile:
    """Fold tracked kernel records into an :class:`OpGroupProfile`."""

    def cost(group: OpGroup) -> GroupCost:
        return GroupCost(
            tracker.flops(group) * scale,
            tracker.elements_moved(group) * bytes_per_value * scale,
        )

    return OpGroupProfile(
        build_kv=cost(OpGroup.BUILD_KV),
        build_query=cost(OpGroup.BUILD_QUERY),
        attention=cost(OpGroup.ATTENTION),
    )


def instrumented_profile(
    spec: WorkloadSpec, step: StepKind = StepKind.SUBSEQUENT, seed: int = 0
) -> OpGroupProfile:
    """Count one input's step with the real kernels and scale by the batch."""
    step = StepKind(step)
    workload = AttentionWorkload(spec, seed=seed, inputs=1)
    with track_kernels() as tracker:
        workload.run_input(0, step)
    return profile_from_tracker(tracker, spec.bytes_per_value, spec.batch)


def context_reads(spec: WorkloadSpec, folded: bool = True, seed: int = 0) -> int:
    """Kernel passes over the shared context in one EL step.

    The folded kernel reads the context twice (scores and weighted sum)
    whatever the beam size and head count; the unfolded layout reads it twice
    per (beam, head) pair.
    """
    workload = AttentionWorkload(spec, seed=seed, inputs=1)
    H, q = workload.contexts[0], workload.queries[0]
    with track_kernels() as tracker:
        if folded:
            el_attention(q, H, workload.params)
        else:
            el_attention_unfolded(q, H, workload.params)
    return tracker.reads_of(H)
