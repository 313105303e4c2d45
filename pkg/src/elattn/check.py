"""Equivalence suites behind ``elattn check``.

The attention suite compares EL-attention, the folded kernel and mixed
self-attention against multi-head attention on random configurations. The
end-to-end suite decodes random inputs with every search strategy and
requires token-identical outputs across the three attention modes.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Tuple

import numpy as np

from elattn.attention import (
    AttentionParams,
    HiddenCache,
    KvCache,
    append_to_cache,
    el_attention,
    mixed_self_attention,
    multi_head_attention,
)
from elattn.config import GenConfig
from elattn.decoding import search
from elattn.model import AttentionMode, Model
from elattn.tensor_core import Rng, seeded_uniform

logger = logging.getLogger(__name__)

ATTENTION_TOLERANCE = 1e-10
HEADS = (1, 2, 4, 8)
MODEL_DIMS = (8, 16, 32, 64, 128)
CONTEXT_LENGTHS = (1, 2, 7, 33, 64)
PERTURBATION = 1e-6


@dataclass
class CheckResult:
    """Outcome of one suite.

    Attributes:
        name: Suite name
        cases: Cases run
        max_deviation: Largest element-wise difference seen (attention suite)
        failures: Seeds (or input indices) of failing cases
    """

    name: str
    cases: int = 0
    max_deviation: float = 0.0
    failures: List[int] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.failures

    def to_dict(self) -> Dict:
        return {
            "suite": self.name,
            "cases": self.cases,
            "max_deviation": self.max_deviation,
            "passed": self.passed,
            "first_failing_seed": self.failures[0] if self.failures else None,
        }


def random_attention_case(case_seed: int):
    """Draw (params, q, H) for one configuration from ``case_seed``."""
    rng = Rng(case_seed)
    h = rng.choice(HEADS)
    d_m = rng.choice(MODEL_DIMS)
    d_k = rng.choice((max(1, d_m // h), 3))
    n = rng.choice(CONTEXT_LENGTHS)
    lanes = rng.choice((1, 4))
    params = AttentionParams.random(h, d_m, d_k, rng.split())
    q = seeded_uniform((lanes, d_m), rng, -1.0, 1.0)
    H = seeded_uniform((n, d_m), rng, -1.0, 1.0)
    return params, q, H


def _perturbed(params: AttentionParams) -> AttentionParams:
    wv = params.wv.copy()
    wv.flat[0] += PERTURBATION
    return replace(params, wv=wv)


def _mixed_deviation(params: AttentionParams, q, H) -> float:
    """Split H into a prefix and generated rows and compare to full attention."""
    t_in = max(1, H.shape[0] // 2)
    lanes = q.shape[0]
    cache = KvCache.empty(lanes, params.h, params.d_k, H.dtype)
    for row in H[t_in:]:
        cache = append_to_cache(cache, np.repeat(row[None], lanes, axis=0), params)
    mixed = mixed_self_attention(q, HiddenCache(H[:t_in]), cache, params)
    return float(np.abs(mixed - multi_head_attention(q, H, params)).max())


def run_attention_suite(
    cases: int, seed: int = 0, perturb: bool = False
) -> CheckResult:
    """Compare EL and mixed self-attention with multi-head attention.

    Args:
        cases: Number of random configurations
        seed: Base seed; each case's own seed is drawn from it
        perturb: Perturb one EL value weight (negative control)
    """
    result = CheckResult("attention")
    rng = Rng(seed)
    for _ in range(cases):
        case_seed = rng.next_u64()
        params, q, H = random_attention_case(case_seed)
        reference = multi_head_attention(q, H, params)
        el_params = _perturbed(params) if perturb else params
        deviation = float(np.abs(el_attention(q, H, el_params) - reference).max())
        deviation = max(deviation, _mixed_deviation(el_params, q, H))
        result.cases += 1
        result.max_deviation = max(result.max_deviation, deviation)
        if deviation > ATTENTION_TOLERANCE:
            result.failures.append(case_seed)
            logger.debug(f"Case seed {case_seed} deviates by {deviation:.3e}")
    logger.info(
        f"Attention suite: {result.cases} cases, max deviation "
        f"{result.max_deviation:.3e}"
    )
    return result


def strategies(base: GenConfig) -> List[Tuple[str, GenConfig, bool]]:
    """The search settings the end-to-end suite covers."""
    return [
        ("greedy", base, True),
        ("beam4-lp1", replace(base, beam=4, length_penalty=1.0), False),
        ("beam4-lp2", replace(base, beam=4, length_penalty=2.0), False),
        (
            "diverse4",
            replace(base, beam=4, diverse_groups=4, diverse_strength=0.2),
            False,
        ),
        ("beam4-ngram3", replace(base, beam=4, no_repeat_ngram=3), False),
    ]


def random_inputs(
    model: Model, count: int, seed: int, max_len: int = 12
) -> List[List[int]]:
    """Random token sequences avoiding the reserved ids."""
    rng = Rng(seed)
    inputs = []
    for _ in range(count):
        length = 1 + rng.next_below(max_len)
        inputs.append([3 + rng.next_below(model.vocab - 3) for _ in range(length)])
    return inputs


def run_end_to_end_suite(
    model: Model,
    inputs: int,
    seed: int = 0,
    base: Optional[GenConfig] = None,
    modes: Tuple[AttentionMode, ...] = tuple(AttentionMode),
) -> CheckResult:
    """Require identical tokens across ``modes`` for every strategy and input."""
    base = base or GenConfig(max_out_len=12, min_out_len=2, diverse_groups=1)
    result = CheckResult("end-to-end")
    for index, source in enumerate(random_inputs(model, inputs, seed)):
        for name, cfg, greedy in strategies(base):
            outputs = {
                mode: [h.tokens for h in search(model, source, cfg, mode, greedy)]
                for mode in modes
            }
            reference = outputs[modes[0]]
            result.cases += 1
            if any(out != reference for out in outputs.values()):
                result.failures.append(index)
                logger.debug(f"Input {index} differs across modes under {name}")
    logger.info(f"End-to-end suite: {result.cases} runs, {len(result.failures)} failed")
    return result
