"""Tests for the toy transformer and incremental decoding."""

import numpy as np
import pytest
from numpy.testing import assert_allclose

from elattn.config import BOS_ID, DECODER_ONLY, ModelConfig
from elattn.errors import InputError, LengthError, ModeError, ParameterError, StateError
from elattn.model import (
    AttentionMode,
    decoder_step,
    encode,
    forward,
    init_decoder_state,
    init_model,
    parameter_count,
    tensor_layout,
)

MODES = list(AttentionMode)
TOLERANCE = 1e-9


@pytest.fixture(scope="module")
def enc_dec():
    """Create a small encoder-decoder model."""
    return init_model(
        ModelConfig(L_enc=1, L=2, d_m=16, h=4, d_ff=32, vocab=11, max_positions=16)
    )


@pytest.fixture(scope="module")
def dec_only():
    """Create a small decoder-only model."""
    return init_model(
        ModelConfig(
            architecture=DECODER_ONLY,
            L=2,
            d_m=16,
            h=4,
            d_ff=32,
            vocab=11,
            max_positions=8,
            seed=3,
        )
    )


class TestParameters:
    """Tests for the parameter layout and initialisation."""

    def test_decoder_only_count(self):
        """Test the closed-form count for a small decoder-only model."""
        config = ModelConfig(
            architecture=DECODER_ONLY, L=2, d_m=16, h=4, d_ff=32, vocab=11, max_positions=8
        )
        assert parameter_count(config) == 4784

    @pytest.mark.parametrize("architecture", ["encoder-decoder", "decoder-only"])
    def test_count_matches_layout(self, architecture):
        """Test the closed form against the sizes of the layout."""
        config = ModelConfig(architecture=architecture, d_k=5)
        total = sum(int(np.prod(shape)) for _, shape in tensor_layout(config))
        assert total == parameter_count(config)

    def test_named_tensors_follow_layout(self, enc_dec):
        """Test that model tensors come out in layout order with layout shapes."""
        named = [(n, t.shape) for n, t in enc_dec.named_tensors()]
        assert named == tensor_layout(enc_dec.config)

    def test_same_seed_same_weights(self):
        """Test that initialisation is deterministic."""
        config = ModelConfig(L_enc=1, L=1, d_m=8, h=2, d_ff=8, vocab=7, max_positions=4)
        a = dict(init_model(config).named_tensors())
        b = dict(init_model(config).named_tensors())
        assert all(np.array_equal(a[name], b[name]) for name in a)

    def test_different_seed_different_weights(self):
        """Test that the seed changes the weights."""
        config = ModelConfig(L_enc=1, L=1, d_m=8, h=2, d_ff=8, vocab=7, max_positions=4)
        other = ModelConfig(**{**config.to_dict(), "seed": 1})
        assert not np.array_equal(
            init_model(config).token_embedding, init_model(other).token_embedding
        )

    def test_weights_in_range(self, enc_dec):
        """Test that every weight lies in [-0.1, 0.1)."""
        for _, t in enc_dec.named_tensors():
            assert t.min() >= -0.1 and t.max() < 0.1

    def test_invalid_config(self):
        """Test that an invalid configuration is rejected."""
        with pytest.raises(ParameterError, match="vocab"):
            init_model(ModelConfig(vocab=3))


class TestForward:
    """Tests for encode and forward."""

    def test_encode_shape(self, enc_dec):
        """Test the (n, d_m) encoder output."""
        assert encode(enc_dec, [3, 4, 5]).shape == (3, 16)

    def test_encode_decoder_only(self, dec_only):
        """Test that a decoder-only model has no encoder."""
        with pytest.raises(ModeError):
            encode(dec_only, [3, 4])

    def test_missing_memory(self, enc_dec):
        """Test that an encoder-decoder forward needs the encoder output."""
        with pytest.raises(ModeError):
            forward(enc_dec, [BOS_ID])

    def test_unexpected_memory(self, dec_only):
        """Test that a decoder-only forward rejects an encoder output."""
        with pytest.raises(ModeError):
            forward(dec_only, [3], memory=np.zeros((2, 16)))

    def test_empty_input(self, enc_dec):
        """Test that an empty input raises an input error."""
        with pytest.raises(InputError, match="empty"):
            encode(enc_dec, [])

    def test_out_of_vocabulary(self, enc_dec):
        """Test that an id >= vocab raises an input error."""
        with pytest.raises(InputError):
            encode(enc_dec, [3, 11])

    def test_too_long(self, dec_only):
        """Test that more than max_positions tokens raise a length error."""
        with pytest.raises(LengthError):
            forward(dec_only, [3] * 9)

    def test_causality(self, dec_only):
        """Test that later tokens do not change earlier logits."""
        a = forward(dec_only, [3, 4, 5]).logits
        b = forward(dec_only, [3, 4, 9]).logits
        assert_allclose(a[:2], b[:2], rtol=0, atol=0)

    def test_batched_forward(self, dec_only):
        """Test that a (lanes, T) input stacks per-row results."""
        batched = forward(dec_only, np.array([[3, 4], [5, 6]])).logits
        assert batched.shape == (2, 2, 11)
        assert_allclose(batched[1], forward(dec_only, [5, 6]).logits, rtol=0, atol=0)


class TestDecoderStep:
    """Tests for incremental decoding in every attention mode."""

    @pytest.mark.parametrize("mode", MODES)
    def test_encoder_decoder_matches_forward(self, enc_dec, mode):
        """Test incremental logits against a full forward after each token."""
        memory = encode(enc_dec, [3, 4, 5, 6])
        state = init_decoder_state(enc_dec, memory, mode)
        tokens = [BOS_ID, 7, 8, 9]
        for t, token in enumerate(tokens):
            logits, state = decoder_step(enc_dec, state, token, mode)
            expected = forward(enc_dec, tokens[: t + 1], memory=memory).logits[-1]
            assert logits.shape == (1, 11)
            assert_allclose(logits[0], expected, rtol=0, atol=TOLERANCE)

    @pytest.mark.parametrize("mode", MODES)
    def test_decoder_only_matches_forward(self, dec_only, mode):
        """Test the prefix logits and two generated steps against forward."""
        prefix = [3, 4, 5]
        state = init_decoder_state(dec_only, prefix, mode)
        assert_allclose(
            state.last_logits[0], forward(dec_only, prefix).logits[-1], rtol=0, atol=0
        )
        tokens = list(prefix)
        for token in (6, 7):
            logits, state = decoder_step(dec_only, state, token, mode)
            tokens.append(token)
            assert_allclose(
                logits[0], forward(dec_only, tokens).logits[-1], rtol=0, atol=TOLERANCE
            )

    @pytest.mark.parametrize("mode", MODES)
    def test_lanes_decode_independently(self, enc_dec, mode):
        """Test that each lane follows its own tokens."""
        memory = encode(enc_dec, [3, 4])
        state = init_decoder_state(enc_dec, memory, mode, beams=2)
        _, state = decoder_step(enc_dec, state, BOS_ID, mode)
        logits, _ = decoder_step(enc_dec, state, [5, 6], mode)
        for lane, token in enumerate((5, 6)):
            expected = forward(enc_dec, [BOS_ID, token], memory=memory).logits[-1]
            assert_allclose(logits[lane], expected, rtol=0, atol=TOLERANCE)

    @pytest.mark.parametrize("mode", MODES)
    def test_gather_reorders_lanes(self, enc_dec, mode):
        """Test that gathering lanes carries their history along."""
        memory = encode(enc_dec, [3, 4])
        state = init_decoder_state(enc_dec, memory, mode, beams=2)
        _, state = decoder_step(enc_dec, state, BOS_ID, mode)
        _, state = decoder_step(enc_dec, state, [5, 6], mode)
        state = state.gather([1, 1])
        logits, _ = decoder_step(enc_dec, state, [7, 8], mode)
        for lane, token in enumerate((7, 8)):
            expected = forward(enc_dec, [BOS_ID, 6, token], memory=memory).logits[-1]
            assert_allclose(logits[lane], expected, rtol=0, atol=TOLERANCE)

    def test_mode_mismatch(self, enc_dec):
        """Test that stepping a state in another mode raises a state error."""
        state = init_decoder_state(enc_dec, encode(enc_dec, [3]), AttentionMode.EL)
        with pytest.raises(StateError, match="built for el"):
            decoder_step(enc_dec, state, BOS_ID, AttentionMode.MHA_CACHED)

    def test_zero_beams(self, enc_dec):
        """Test that beams < 1 raises a parameter error."""
        with pytest.raises(ParameterError):
            init_decoder_state(enc_dec, encode(enc_dec, [3]), AttentionMode.EL, beams=0)

    def test_wrong_token_count(self, enc_dec):
        """Test that a token list of the wrong length raises a state error."""
        state = init_decoder_state(
            enc_dec, encode(enc_dec, [3]), AttentionMode.EL, beams=2
        )
        with pytest.raises(StateError):
            decoder_step(enc_dec, state, [1, 1, 1], AttentionMode.EL)

    def test_position_limit(self, dec_only):
        """Test that stepping past max_positions raises a length error."""
        state = init_decoder_state(dec_only, [3] * 8, AttentionMode.MHA_CACHED)
        with pytest.raises(LengthError):
            decoder_step(dec_only, state, 4, AttentionMode.MHA_CACHED)

    def test_unknown_mode(self, enc_dec):
        """Test that an unknown mode name raises a parameter error."""
        with pytest.raises(ParameterError, match="Unknown attention mode"):
            init_decoder_state(enc_dec, encode(enc_dec, [3]), "flash")

    def test_el_keeps_one_copy_of_the_input(self, enc_dec):
        """Test that EL input state does not grow with the beam count."""
        memory = encode(enc_dec, [3, 4, 5, 6, 7])
        el1 = init_decoder_state(enc_dec, memory, AttentionMode.EL, beams=1)
        el4 = init_decoder_state(enc_dec, memory, AttentionMode.EL, beams=4)
        mha4 = init_decoder_state(enc_dec, memory, AttentionMode.MHA_CACHED, beams=4)
        assert el1.cache_bytes()["input"] == el4.cache_bytes()["input"] == memory.nbytes
        # two layers of per-lane keys and values, each the size of memory
        assert mha4.cache_bytes()["input"] == 2 * 2 * 4 * memory.nbytes

    def test_decoder_only_el_prefix_is_half_of_cached(self, dec_only):
        """Test that EL keeps one hidden state per key/value pair of the cache."""
        prefix = [3, 4, 5, 6]
        el = init_decoder_state(dec_only, prefix, AttentionMode.EL)
        mha = init_decoder_state(dec_only, prefix, AttentionMode.MHA_CACHED)
        assert el.cache_bytes()["input"] > 0
        assert 2 * el.cache_bytes()["input"] == mha.cache_bytes()["input"]

    def test_decoder_only_prefix_is_input_state(self, dec_only):
        """Test that the cached prefix counts as input, not generated, bytes."""
        state = init_decoder_state(dec_only, [3, 4], AttentionMode.MHA_CACHED)
        assert state.cache_bytes()["generated"] == 0
        _, state = decoder_step(dec_only, state, 5, AttentionMode.MHA_CACHED)
        assert state.cache_bytes()["generated"] > 0
