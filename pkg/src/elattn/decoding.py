"""Greedy, beam and diverse beam search over :func:`elattn.model.decoder_step`.

Searches are mode-agnostic: the attention mode only selects how the decoder
state is cached, so every mode yields the same hypotheses.

Per step, each lane's logits are turned into masked log-probabilities in this
order: log-softmax, no-repeat-ngram bans, pad and bos bans, eos ban while
shorter than ``min_out_len``, and at length ``max_out_len - 1`` everything
but eos is banned (eos keeps its log-probability).

Hypothesis tokens are the generated tokens, including a final eos and
excluding bos or any prefix.
"""

import logging
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from elattn.config import BOS_ID, EOS_ID, PAD_ID, GenConfig
from elattn.errors import InputError, ParameterError, StateError
from elattn.model import (
    AttentionMode,
    DecoderState,
    Model,
    decoder_step,
    encode,
    init_decoder_state,
)
from elattn.tensor_core import Tensor

logger = logging.getLogger(__name__)

__all__ = [
    "BeamState",
    "GenConfig",
    "Hypothesis",
    "apply_no_repeat_ngram",
    "beam_search",
    "diverse_beam_search",
    "greedy_search",
    "length_penalty_score",
    "mask_log_probs",
    "prune_finished",
    "reorder_cache",
    "search",
]


@dataclass(frozen=True)
class Hypothesis:
    """A (possibly unfinished) output sequence.

    Attributes:
        tokens: Generated ids
        logprob_sum: Cumulative log-probability (diversity penalties included)
        finished: True once eos was emitted
        score: logprob_sum / len(tokens)**alpha once finished
    """

    tokens: Tuple[int, ...]
    logprob_sum: float
    finished: bool = False
    score: float = float("-inf")

    def extend(self, token: int, logprob_sum: float) -> "Hypothesis":
        return Hypothesis(self.tokens + (int(token),), float(logprob_sum))

    def finish(self, alpha: float) -> "Hypothesis":
        return Hypothesis(
            self.tokens,
            self.logprob_sum,
            True,
            length_penalty_score(self.logprob_sum, len(self.tokens), alpha),
        )


@dataclass(frozen=True)
class BeamState:
    """Live hypotheses, their decoder state and the finished pool.

    Lane ``i`` of ``decoder_state`` always belongs to ``hypotheses[i]``.
    """

    hypotheses: Tuple[Hypothesis, ...]
    decoder_state: DecoderState
    finished: Tuple[Hypothesis, ...] = ()

    def __post_init__(self):
        if len(self.hypotheses) != self.decoder_state.lanes:
            raise StateError(
                f"{len(self.hypotheses)} hypotheses for "
                f"{self.decoder_state.lanes} decoder lanes"
            )


def length_penalty_score(logprob_sum: float, length: int, alpha: float) -> float:
    """Return ``logprob_sum / length**alpha``.

    Raises:
        ParameterError: If ``length`` < 1.
    """
    if length < 1:
        raise ParameterError(f"length must be >= 1, got {length}")
    return float(logprob_sum / length**alpha)


def apply_no_repeat_ngram(logits: Tensor, history: Sequence[int], n: int) -> Tensor:
    """Ban every token that would complete an n-gram already in ``history``.

    Returns a copy of ``logits`` (one row over the vocabulary) with the banned
    entries set to -inf. ``n == 0`` or a history shorter than ``n - 1``
    leaves it unchanged.
    """
    out = np.array(logits, dtype=float, copy=True)
    history = [int(t) for t in history]
    if n <= 0 or len(history) < n - 1:
        return out
    prefix = tuple(history[len(history) - (n - 1) :])
    for i in range(len(history) - n + 1):
        if tuple(history[i : i + n - 1]) == prefix:
            out[history[i + n - 1]] = -np.inf
    return out


def _log_softmax(logits: Tensor) -> Tensor:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def mask_log_probs(logits: Tensor, tokens: Sequence[int], cfg: GenConfig) -> Tensor:
    """Masked log-probabilities for extending ``tokens`` by one id."""
    lp = _log_softmax(np.asarray(logits, dtype=float))
    lp = apply_no_repeat_ngram(lp, tokens, cfg.no_repeat_ngram)
    lp[PAD_ID] = -np.inf
    lp[BOS_ID] = -np.inf
    if len(tokens) < cfg.min_out_len:
        lp[EOS_ID] = -np.inf
    if len(tokens) == cfg.max_out_len - 1:
        eos = lp[EOS_ID]
        lp[:] = -np.inf
        lp[EOS_ID] = eos
    return lp


# ---------------------------------------------------------------------------
# Cache maintenance
# ---------------------------------------------------------------------------


def reorder_cache(state: BeamState, perm: Sequence[int]) -> BeamState:
    """Permute beam lanes; shared EL tensors are left untouched.

    Raises:
        ParameterError: If ``perm`` is not a permutation of the lanes.
    """
    perm = [int(p) for p in perm]
    if sorted(perm) != list(range(len(state.hypotheses))):
        raise ParameterError(
            f"{perm} is not a permutation of {len(state.hypotheses)} lanes"
        )
    return BeamState(
        tuple(state.hypotheses[p] for p in perm),
        state.decoder_state.gather(perm),
        state.finished,
    )


def prune_finished(state: BeamState, keep: Sequence[bool]) -> BeamState:
    """Drop the lanes whose ``keep`` entry is False.

    Raises:
        ParameterError: If the mask length differs from the lane count.
        StateError: If every lane would be dropped.
    """
    mask = np.asarray(keep, dtype=bool)
    if mask.shape != (len(state.hypotheses),):
        raise ParameterError(
            f"keep mask has shape {mask.shape}, expected ({len(state.hypotheses)},)"
        )
    lanes = np.flatnonzero(mask)
    if lanes.size == 0:
        raise StateError("prune_finished would drop every lane")
    return BeamState(
        tuple(state.hypotheses[i] for i in lanes),
        state.decoder_state.gather(lanes),
        state.finished,
    )


# ---------------------------------------------------------------------------
# Search
# ---------------------------------------------------------------------------


def _start(
    model: Model, source: Sequence[int], mode: AttentionMode
) -> Tuple[DecoderState, Tensor]:
    """Build a one-lane state and the logits for the first generated token."""
    if len(source) == 0:
        raise InputError("input sequence is empty")
    if model.config.is_encoder_decoder:
        memory = encode(model, source)
        state = init_decoder_state(model, memory, mode, beams=1)
        logits, state = decoder_step(model, state, BOS_ID, mode)
        return state, logits
    state = init_decoder_state(model, source, mode, beams=1)
    return state, state.last_logits


@dataclass
class _Group:
    """One beam group: live hypotheses, their lanes and a finished pool."""

    size: int
    hypotheses: List[Hypothesis]
    lanes: List[int]
    pool: List[Hypothesis] = field(default_factory=list)
    done: bool = False


def _ranked(totals: Tensor) -> List[Tuple[int, int, float]]:
    """Finite (lane, token, total) candidates by (-total, token, lane)."""
    lane_idx, token_idx = np.nonzero(np.isfinite(totals))
    values = totals[lane_idx, token_idx]
    order = np.lexsort((lane_idx, token_idx, -values))
    return [(int(lane_idx[i]), int(token_idx[i]), float(values[i])) for i in order]


def _best_possible(hyp: Hypothesis, cfg: GenConfig) -> float:
    # Log-probabilities never increase, and for alpha > 0 the longest
    # length is the most favourable denominator.
    return hyp.logprob_sum / cfg.max_out_len**cfg.length_penalty


def _select(
    group: _Group, totals: Tensor, cfg: GenConfig
) -> Tuple[List[Tuple[int, Hypothesis]], List[int]]:
    """Pick the group's next live set and finish eos candidates.

    Returns the (parent row, hypothesis) pairs of the live set and the tokens
    chosen at this step (eos included) for the diversity penalty.
    """
    live: List[Tuple[int, Hypothesis]] = []
    chosen: List[int] = []
    for rank, (row, token, total) in enumerate(_ranked(totals)):
        if token == EOS_ID:
            if rank < group.size:
                done = group.hypotheses[row].extend(token, total)
                group.pool.append(done.finish(cfg.length_penalty))
                chosen.append(token)
            continue
        live.append((row, group.hypotheses[row].extend(token, total)))
        chosen.append(token)
        if len(live) == group.size:
            break
    group.pool.sort(key=lambda h: (-h.score, h.tokens))
    del group.pool[group.size :]
    return live, chosen


def _finished(group: _Group, live: List[Tuple[int, Hypothesis]], cfg: GenConfig):
    if not live:
        return True
    if len(group.pool) < group.size:
        return False
    worst = group.pool[-1].score
    return worst >= max(_best_possible(h, cfg) for _, h in live)


def _group_beam_search(
    model: Model,
    source: Sequence[int],
    cfg: GenConfig,
    mode: AttentionMode,
    groups: int,
    strength: float,
) -> List[Hypothesis]:
    cfg.validate()
    if cfg.beam > model.vocab:
        raise ParameterError(f"beam {cfg.beam} exceeds vocabulary size {model.vocab}")
    size = cfg.beam // groups
    state, logits = _start(model, source, mode)
    root = Hypothesis((), 0.0)
    beams = [_Group(size, [root], [0]) for _ in range(groups)]

    for step in range(cfg.max_out_len):
        counts = np.zeros(model.vocab)
        parents: List[int] = []
        fed: List[int] = []
        for group in beams:
            if group.done:
                continue
            lp = np.stack(
                [
                    mask_log_probs(logits[lane], h.tokens, cfg)
                    for lane, h in zip(group.lanes, group.hypotheses)
                ]
            )
            sums = np.array([h.logprob_sum for h in group.hypotheses])
            totals = sums[:, None] + lp - strength * counts[None, :]
            live, chosen = _select(group, totals, cfg)
            np.add.at(counts, chosen, 1)
            group.done = _finished(group, live, cfg)
            if group.done:
                group.hypotheses, group.lanes = [], []
                continue
            old_lanes = group.lanes
            group.hypotheses = [h for _, h in live]
            group.lanes = list(range(len(parents), len(parents) + len(live)))
            parents.extend(old_lanes[row] for row, _ in live)
            fed.extend(h.tokens[-1] for _, h in live)
        if all(g.done for g in beams):
            break
        logger.debug(f"Step {step}: {len(parents)} live lanes")
        logits, state = decoder_step(model, state.gather(parents), fed, mode)

    results = [h for g in beams for h in g.pool]
    return sorted(results, key=lambda h: (-h.score, h.tokens))


def beam_search(
    model: Model, source: Sequence[int], cfg: GenConfig, mode: AttentionMode
) -> List[Hypothesis]:
    """Standard beam search; returns finished hypotheses, best score first.

    Ranks all lane x token candidates by (-logprob_sum, token, lane). eos
    candidates ranked within the first ``beam`` are finished with the length
    penalty; the rest fill the live set. Search stops when no hypothesis is
    live, or when the pool holds ``beam`` entries and its worst score is at
    least the best score any live hypothesis could still reach.

    Raises:
        ParameterError: If ``beam`` exceeds the vocabulary size.
        InputError: If ``source`` is empty.
    """
    return _group_beam_search(model, source, cfg, mode, 1, 0.0)


def _greedy(model, source, cfg, mode) -> List[Hypothesis]:
    one = replace(cfg, beam=1, diverse_groups=1, diverse_strength=0.0)
    return _group_beam_search(model, source, one, mode, 1, 0.0)


def greedy_search(
    model: Model, source: Sequence[int], cfg: GenConfig, mode: AttentionMode
) -> Hypothesis:
    """Beam search with a beam of one; every other setting is kept.

    An eos argmax finishes a hypothesis but the rollout continues on the best
    other token until the termination rule of :func:`beam_search` holds, so
    with a length penalty a later, longer hypothesis can win.

    Raises:
        InputError: If ``source`` is empty, or if every continuation is
            banned before eos is allowed.
    """
    results = _greedy(model, source, cfg, mode)
    if not results:
        raise InputError("no hypothesis finished: every continuation was banned")
    return results[0]


def diverse_beam_search(
    model: Model, source: Sequence[int], cfg: GenConfig, mode: AttentionMode
) -> List[Hypothesis]:
    """Diverse beam search with a Hamming diversity penalty.

    The beam is split into ``diverse_groups`` groups decoded one after another
    within each step. Group g's scores are lowered by ``diverse_strength``
    times the number of times each token was chosen by groups before g at
    this step. The penalty is added into the cumulative log-probability.

    Raises:
        ParameterError: If the groups do not divide the beam.
    """
    cfg.validate()
    return _group_beam_search(
        model, source, cfg, mode, cfg.diverse_groups, cfg.diverse_strength
    )


def search(
    model: Model,
    source: Sequence[int],
    cfg: GenConfig,
    mode: AttentionMode,
    greedy: bool = False,
) -> List[Hypothesis]:
    """Run the search strategy ``cfg`` (or ``greedy``) asks for.

    The result is empty when no hypothesis could finish.
    """
    mode = AttentionMode.parse(mode)
    if greedy:
        return _greedy(model, source, cfg, mode)
    if cfg.diverse_groups > 1:
        return diverse_beam_search(model, source, cfg, mode)
    return beam_search(model, source, cfg, mode)


def best_tokens(hypotheses: Sequence[Hypothesis]) -> Optional[Tuple[int, ...]]:
    """Tokens of the top hypothesis, or None if there is none."""
    return hypotheses[0].tokens if hypotheses else None
