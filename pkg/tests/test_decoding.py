"""Tests for greedy, beam and diverse beam search."""

from dataclasses import replace
from unittest.mock import patch

import numpy as np
import pytest
from numpy.testing import assert_allclose

from elattn import decoding
from elattn.config import BOS_ID, DECODER_ONLY, EOS_ID, PAD_ID, GenConfig, ModelConfig
from elattn.decoding import (
    BeamState,
    Hypothesis,
    apply_no_repeat_ngram,
    beam_search,
    best_tokens,
    diverse_beam_search,
    greedy_search,
    length_penalty_score,
    mask_log_probs,
    prune_finished,
    reorder_cache,
    search,
)
from elattn.errors import InputError, ParameterError, StateError
from elattn.model import (
    AttentionMode,
    decoder_step,
    encode,
    forward,
    init_decoder_state,
    init_model,
)

SOURCE = [3, 7, 4, 9]


@pytest.fixture(scope="module")
def model():
    """Create a small encoder-decoder model."""
    return init_model(
        ModelConfig(L_enc=1, L=1, d_m=16, h=4, d_ff=32, vocab=11, max_positions=32)
    )


@pytest.fixture
def cfg():
    """Create a short search configuration."""
    return GenConfig(beam=4, max_out_len=6, min_out_len=1)


def sequence_logprob(model, source, tokens, cfg):
    """Sum of masked log-probabilities of ``tokens`` under a full forward."""
    memory = encode(model, source)
    total = 0.0
    for t, token in enumerate(tokens):
        logits = forward(model, [BOS_ID, *tokens[:t]], memory=memory).logits[-1]
        total += mask_log_probs(logits, tokens[:t], cfg)[token]
    return total


class TestScoring:
    """Tests for the length penalty and log-probability masks."""

    def test_length_penalty(self):
        """Test logprob_sum / length**alpha."""
        assert length_penalty_score(-6.0, 3, 1.0) == -2.0
        assert length_penalty_score(-6.0, 3, 0.0) == -6.0
        assert length_penalty_score(-8.0, 4, 2.0) == -0.5

    def test_length_penalty_zero_length(self):
        """Test that an empty hypothesis cannot be scored."""
        with pytest.raises(ParameterError):
            length_penalty_score(-1.0, 0, 1.0)

    def test_finish_sets_score(self):
        """Test that finishing a hypothesis applies the length penalty."""
        hyp = Hypothesis((5, 2), -3.0).finish(1.0)
        assert hyp.finished
        assert hyp.score == -1.5

    def test_no_repeat_trigram(self):
        """Test that the token completing a seen trigram is banned."""
        out = apply_no_repeat_ngram(np.zeros(10), [5, 6, 7, 5, 6], 3)
        assert np.isneginf(out[7])
        assert np.isfinite(np.delete(out, 7)).all()

    def test_no_repeat_bigram(self):
        """Test bigram blocking after a repeated token."""
        out = apply_no_repeat_ngram(np.zeros(10), [4, 5, 4], 2)
        assert np.flatnonzero(np.isneginf(out)).tolist() == [5]

    def test_no_repeat_disabled(self):
        """Test that n=0 and short histories ban nothing."""
        assert np.isfinite(apply_no_repeat_ngram(np.zeros(5), [1, 1, 1], 0)).all()
        assert np.isfinite(apply_no_repeat_ngram(np.zeros(5), [1], 3)).all()

    def test_mask_bans_pad_and_bos(self, cfg):
        """Test that pad and bos are never generated."""
        lp = mask_log_probs(np.zeros(11), [3, 4], cfg)
        assert np.isneginf(lp[PAD_ID]) and np.isneginf(lp[BOS_ID])
        assert np.isfinite(lp[EOS_ID])

    def test_mask_is_log_softmax(self, cfg):
        """Test that unmasked entries keep their logit differences."""
        logits = np.arange(11.0)
        lp = mask_log_probs(logits, [3, 4], cfg)
        assert lp[5] - lp[3] == pytest.approx(2.0)
        assert np.exp(lp[np.isfinite(lp)]).sum() < 1.0

    def test_mask_min_length(self, cfg):
        """Test that eos is banned while shorter than min_out_len."""
        assert np.isneginf(mask_log_probs(np.zeros(11), [], cfg)[EOS_ID])

    def test_mask_forces_eos_at_max_length(self, cfg):
        """Test that only eos remains one token before max_out_len."""
        lp = mask_log_probs(np.zeros(11), [3] * 5, cfg)
        assert np.flatnonzero(np.isfinite(lp)).tolist() == [EOS_ID]
        assert lp[EOS_ID] == pytest.approx(-np.log(11))


class TestBeamState:
    """Tests for BeamState, reorder_cache and prune_finished."""

    @pytest.fixture
    def state(self, model):
        """Create a two-lane beam state."""
        decoder_state = init_decoder_state(
            model, encode(model, SOURCE), AttentionMode.MHA_CACHED, beams=2
        )
        hyps = (Hypothesis((3,), -1.0), Hypothesis((4,), -2.0))
        return BeamState(hyps, decoder_state)

    def test_lane_count_must_match(self, model, state):
        """Test that hypotheses and lanes must agree."""
        with pytest.raises(StateError):
            BeamState(state.hypotheses[:1], state.decoder_state)

    def test_reorder(self, state):
        """Test that reordering swaps hypotheses and lanes together."""
        swapped = reorder_cache(state, [1, 0])
        assert [h.tokens for h in swapped.hypotheses] == [(4,), (3,)]
        assert swapped.decoder_state.lanes == 2

    def test_reorder_rejects_non_permutation(self, state):
        """Test that a repeated lane is not a permutation."""
        with pytest.raises(ParameterError):
            reorder_cache(state, [0, 0])

    def test_prune(self, state):
        """Test that pruning keeps the selected lanes."""
        pruned = prune_finished(state, [False, True])
        assert [h.tokens for h in pruned.hypotheses] == [(4,)]
        assert pruned.decoder_state.lanes == 1

    @pytest.fixture
    def stepped(self, model, state):
        """Advance both lanes of the beam state by bos and one token each."""
        mode = AttentionMode.MHA_CACHED
        _, decoder_state = decoder_step(model, state.decoder_state, [BOS_ID] * 2, mode)
        _, decoder_state = decoder_step(model, decoder_state, [5, 6], mode)
        return BeamState(state.hypotheses, decoder_state)

    def next_logits(self, model, state, tokens):
        logits, _ = decoder_step(
            model, state.decoder_state, tokens, AttentionMode.MHA_CACHED
        )
        return logits

    def test_reorder_identity(self, model, stepped):
        """Test that the identity permutation changes nothing."""
        same = reorder_cache(stepped, [0, 1])
        assert same.hypotheses == stepped.hypotheses
        assert_allclose(
            self.next_logits(model, same, [7, 8]),
            self.next_logits(model, stepped, [7, 8]),
            rtol=0,
            atol=0,
        )

    def test_reorder_swap_twice(self, model, stepped):
        """Test that swapping two lanes twice restores the state."""
        swapped = reorder_cache(stepped, [1, 0])
        restored = reorder_cache(swapped, [1, 0])
        assert restored.hypotheses == stepped.hypotheses
        assert_allclose(
            self.next_logits(model, restored, [7, 8]),
            self.next_logits(model, stepped, [7, 8]),
            rtol=0,
            atol=0,
        )
        assert_allclose(
            self.next_logits(model, swapped, [8, 7])[::-1],
            self.next_logits(model, stepped, [7, 8]),
            rtol=0,
            atol=1e-12,
        )

    def test_pruned_lane_decodes_as_before(self, model, stepped):
        """Test that later steps on a pruned state match the kept lane."""
        pruned = prune_finished(stepped, [False, True])
        expected = self.next_logits(model, stepped, [7, 8])
        actual = self.next_logits(model, pruned, [8])
        assert_allclose(actual[0], expected[1], rtol=0, atol=1e-12)

    def test_prune_frees_cache_bytes(self, stepped):
        """Test that dropping a key/value lane strictly lowers the cache size."""
        before = stepped.decoder_state.cache_bytes()
        after = prune_finished(stepped, [True, False]).decoder_state.cache_bytes()
        assert after["input"] < before["input"]
        assert after["generated"] < before["generated"]

    def test_prune_everything(self, state):
        """Test that dropping every lane is an error."""
        with pytest.raises(StateError):
            prune_finished(state, [False, False])

    def test_prune_mask_length(self, state):
        """Test that the mask must cover every lane."""
        with pytest.raises(ParameterError):
            prune_finished(state, [True])


class TestSearch:
    """Tests for the search strategies."""

    def test_greedy_is_consistent_with_forward(self, model, cfg):
        """Test the greedy log-probability against a full forward."""
        hyp = greedy_search(model, SOURCE, cfg, AttentionMode.MHA_NO_CACHE)
        assert hyp.finished
        assert hyp.tokens[-1] == EOS_ID
        assert hyp.logprob_sum == pytest.approx(
            sequence_logprob(model, SOURCE, hyp.tokens, cfg), abs=1e-9
        )

    def test_beam_results_are_sorted_and_finished(self, model, cfg):
        """Test that beam search returns finished hypotheses best first."""
        results = beam_search(model, SOURCE, cfg, AttentionMode.MHA_CACHED)
        assert 1 <= len(results) <= cfg.beam
        scores = [h.score for h in results]
        assert scores == sorted(scores, reverse=True)
        for hyp in results:
            assert hyp.finished and hyp.tokens[-1] == EOS_ID
            assert cfg.min_out_len < len(hyp.tokens) <= cfg.max_out_len
            assert hyp.score == pytest.approx(
                length_penalty_score(hyp.logprob_sum, len(hyp.tokens), 1.0)
            )

    def test_beam_logprobs_match_forward(self, model, cfg):
        """Test each returned log-probability against a full forward."""
        for hyp in beam_search(model, SOURCE, cfg, AttentionMode.EL):
            assert hyp.logprob_sum == pytest.approx(
                sequence_logprob(model, SOURCE, hyp.tokens, cfg), abs=1e-9
            )

    def test_beam_one_is_greedy(self, model, cfg):
        """Test that a beam of one and greedy search agree token for token."""
        for alpha in (0.0, 1.0, 2.0):
            one = replace(cfg, beam=1, length_penalty=alpha)
            greedy = greedy_search(model, SOURCE, one, AttentionMode.EL)
            (beam,) = beam_search(model, SOURCE, one, AttentionMode.EL)
            assert (beam.tokens, beam.score) == (greedy.tokens, greedy.score)

    @pytest.mark.parametrize("seed", range(6))
    def test_greedy_with_length_penalty_on_small_vocabulary(self, seed):
        """Test greedy search past an early eos when alpha is 2."""
        small = init_model(
            ModelConfig(L_enc=1, L=1, d_m=16, h=4, d_ff=32, vocab=6, seed=seed)
        )
        cfg = GenConfig(beam=1, max_out_len=12, min_out_len=1, length_penalty=2.0)
        greedy = greedy_search(small, [3, 4, 5], cfg, AttentionMode.MHA_CACHED)
        (beam,) = beam_search(small, [3, 4, 5], cfg, AttentionMode.MHA_CACHED)
        assert greedy.tokens == beam.tokens
        assert greedy.score == beam.score

        # the plain argmax rollout that stops at its first eos never scores higher
        memory = encode(small, [3, 4, 5])
        tokens, total = [], 0.0
        while not tokens or tokens[-1] != EOS_ID:
            logits = forward(small, [BOS_ID, *tokens], memory=memory).logits[-1]
            lp = mask_log_probs(logits, tokens, cfg)
            tokens.append(int(np.argmax(lp)))
            total += lp[tokens[-1]]
        rollout = length_penalty_score(total, len(tokens), 2.0)
        assert greedy.score >= rollout - 1e-9

    def test_greedy_without_finished_hypothesis(self):
        """Test that greedy search reports when every continuation is banned."""
        tiny = init_model(ModelConfig(L_enc=1, L=1, d_m=8, h=2, d_ff=8, vocab=4))
        cfg = GenConfig(max_out_len=5, min_out_len=2, no_repeat_ngram=1)
        with pytest.raises(InputError, match="banned"):
            greedy_search(tiny, [3], cfg, AttentionMode.EL)
        assert search(tiny, [3], cfg, AttentionMode.EL, greedy=True) == []

    def test_pool_best_score_never_decreases(self):
        """Test that the best finished score only improves across steps."""
        small = init_model(
            ModelConfig(L_enc=1, L=1, d_m=16, h=4, d_ff=32, vocab=6, seed=0)
        )
        best = []
        check_finished = decoding._finished

        def record(group, live, cfg):
            if group.pool:
                best.append(group.pool[0].score)
            return check_finished(group, live, cfg)

        cfg = GenConfig(beam=3, max_out_len=10, min_out_len=1, length_penalty=1.0)
        with patch("elattn.decoding._finished", side_effect=record):
            beam_search(small, [3, 4, 5], cfg, AttentionMode.EL)
        assert best
        assert best == sorted(best)

    def test_min_length(self, model):
        """Test that no hypothesis ends before min_out_len tokens."""
        cfg = GenConfig(beam=3, max_out_len=8, min_out_len=5)
        for hyp in beam_search(model, SOURCE, cfg, AttentionMode.EL):
            assert len(hyp.tokens) >= 6

    def test_max_length_of_one(self, model):
        """Test that max_out_len=1 emits eos immediately."""
        cfg = GenConfig(beam=2, max_out_len=1)
        results = beam_search(model, SOURCE, cfg, AttentionMode.EL)
        assert [h.tokens for h in results] == [(EOS_ID,)]

    def test_no_repeat_ngram(self, model):
        """Test that no trigram appears twice in any output."""
        cfg = GenConfig(beam=4, max_out_len=12, min_out_len=10, no_repeat_ngram=3)
        for hyp in beam_search(model, SOURCE, cfg, AttentionMode.EL):
            trigrams = [hyp.tokens[i : i + 3] for i in range(len(hyp.tokens) - 2)]
            assert len(trigrams) == len(set(trigrams))

    def test_beam_larger_than_vocab(self, model):
        """Test that a beam wider than the vocabulary is rejected."""
        with pytest.raises(ParameterError, match="vocabulary"):
            beam_search(model, SOURCE, GenConfig(beam=12), AttentionMode.EL)

    def test_empty_input(self, model, cfg):
        """Test that an empty input is rejected."""
        with pytest.raises(InputError):
            beam_search(model, [], cfg, AttentionMode.EL)

    @pytest.mark.parametrize("mode", list(AttentionMode))
    def test_modes_agree(self, model, cfg, mode):
        """Test that every attention mode yields the reference hypotheses."""
        reference = beam_search(model, SOURCE, cfg, AttentionMode.MHA_NO_CACHE)
        results = beam_search(model, SOURCE, cfg, mode)
        assert [h.tokens for h in results] == [h.tokens for h in reference]

    def test_decoder_only(self):
        """Test beam search continuing a decoder-only prefix."""
        model = init_model(
            ModelConfig(
                architecture=DECODER_ONLY, L=1, d_m=16, h=4, d_ff=32, vocab=11
            )
        )
        cfg = GenConfig(beam=2, max_out_len=5)
        el = beam_search(model, SOURCE, cfg, AttentionMode.EL)
        mha = beam_search(model, SOURCE, cfg, AttentionMode.MHA_CACHED)
        assert [h.tokens for h in el] == [h.tokens for h in mha]


class TestDiverseBeamSearch:
    """Tests for diverse beam search."""

    def test_without_penalty_groups_repeat(self, model):
        """Test that groups with no penalty find the same hypotheses."""
        cfg = GenConfig(beam=4, max_out_len=6, min_out_len=2, diverse_groups=2)
        tokens = [h.tokens for h in diverse_beam_search(model, SOURCE, cfg, "el")]
        assert tokens[0::2] == tokens[1::2]

    def test_penalty_separates_groups(self, model):
        """Test that a strong penalty makes every hypothesis distinct."""
        cfg = GenConfig(
            beam=4, max_out_len=6, min_out_len=2, diverse_groups=2, diverse_strength=100.0
        )
        tokens = [h.tokens for h in diverse_beam_search(model, SOURCE, cfg, "el")]
        assert len(set(tokens)) == len(tokens)

    def test_single_lane_groups_without_penalty_are_greedy(self, model):
        """Test that one-lane groups with no penalty all follow greedy search."""
        cfg = GenConfig(beam=4, max_out_len=6, min_out_len=2, diverse_groups=4)
        greedy = greedy_search(model, SOURCE, cfg, AttentionMode.EL)
        results = diverse_beam_search(model, SOURCE, cfg, AttentionMode.EL)
        assert [h.tokens for h in results] == [greedy.tokens] * 4

    def test_huge_penalty_changes_second_group_first_token(self, model):
        """Test that the second group avoids the first group's first token."""
        cfg = GenConfig(
            beam=2, max_out_len=6, min_out_len=2, diverse_groups=2, diverse_strength=1e6
        )
        first, second = diverse_beam_search(model, SOURCE, cfg, AttentionMode.EL)
        assert first.tokens[0] != second.tokens[0]

    def test_groups_must_divide_beam(self, model):
        """Test that the group count must divide the beam."""
        cfg = GenConfig(beam=4, diverse_groups=3)
        with pytest.raises(ParameterError, match="divisible"):
            diverse_beam_search(model, SOURCE, cfg, AttentionMode.EL)

    def test_search_dispatch(self, model):
        """Test that search picks diverse beam search for several groups."""
        cfg = GenConfig(
            beam=4, max_out_len=6, min_out_len=2, diverse_groups=2, diverse_strength=0.5
        )
        assert [h.tokens for h in search(model, SOURCE, cfg, "el")] == [
            h.tokens for h in diverse_beam_search(model, SOURCE, cfg, AttentionMode.EL)
        ]

    def test_best_tokens(self):
        """Test the top hypothesis helper."""
        assert best_tokens([]) is None
        assert best_tokens([Hypothesis((5, 2), -1.0)]) == (5, 2)
