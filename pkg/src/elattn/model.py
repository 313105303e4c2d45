"""Toy encoder-decoder and decoder-only transformers.

Blocks are pre-norm residual: ``x + Attn(LN(x))`` then ``x + FFN(LN(x))``,
with ``FFN(y) = relu(y W1 + b1) W2 + b2``. A final layer norm precedes the
output projection, which is tied to the token embedding. Position
embeddings are learned and absolute.

Three attention modes drive :func:`decoder_step`; they change how work is
scheduled and what is cached, never the logits beyond rounding.
"""

import logging
from dataclasses import dataclass, replace
from enum import Enum
from typing import Dict, Iterator, List, Optional, Sequence, Tuple, Union

import numpy as np

from elattn.attention import (
    AttentionParams,
    HiddenCache,
    KvCache,
    append_to_cache,
    attend,
    el_attention,
    mha_cached_attention,
    mha_incremental_step,
    mixed_self_attention,
    multi_head_attention,
    project_kv,
    project_output,
    project_query,
)
from elattn.config import (
    DECODER_ONLY,
    ENCODER_DECODER,
    ModelConfig,
)
from elattn.errors import InputError, LengthError, ModeError, ParameterError, StateError
from elattn.tensor_core import Rng, Tensor, layer_norm, matmul, relu, seeded_uniform

logger = logging.getLogger(__name__)

INIT_LOW = -0.1
INIT_HIGH = 0.1
LN_EPS = 1e-5


class AttentionMode(str, Enum):
    """How decoder attention is executed."""

    MHA_NO_CACHE = "mha-no-cache"
    MHA_CACHED = "mha-cached"
    EL = "el"

    @classmethod
    def parse(cls, value: Union[str, "AttentionMode"]) -> "AttentionMode":
        try:
            return cls(value)
        except ValueError:
            names = ", ".join(m.value for m in cls)
            raise ParameterError(
                f"Unknown attention mode '{value}', expected one of {names}"
            ) from None


@dataclass(frozen=True, eq=False)
class LayerNormParams:
    gain: Tensor
    shift: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return layer_norm(x, self.gain, self.shift, LN_EPS)


@dataclass(frozen=True, eq=False)
class FeedForwardParams:
    w1: Tensor
    b1: Tensor
    w2: Tensor
    b2: Tensor

    def __call__(self, x: Tensor) -> Tensor:
        return matmul(relu(matmul(x, self.w1, bias=self.b1)), self.w2, bias=self.b2)


@dataclass(frozen=True, eq=False)
class EncoderLayer:
    self_norm: LayerNormParams
    self_attn: AttentionParams
    ffn_norm: LayerNormParams
    ffn: FeedForwardParams


@dataclass(frozen=True, eq=False)
class DecoderLayer:
    """One decoder block; the cross-attention fields are None for decoder-only."""

    self_norm: LayerNormParams
    self_attn: AttentionParams
    ffn_norm: LayerNormParams
    ffn: FeedForwardParams
    cross_norm: Optional[LayerNormParams] = None
    cross_attn: Optional[AttentionParams] = None


@dataclass(frozen=True, eq=False)
class Model:
    """Weights of a toy transformer. Immutable once built."""

    config: ModelConfig
    token_embedding: Tensor
    position_embedding: Tensor
    encoder_layers: Tuple[EncoderLayer, ...]
    encoder_norm: Optional[LayerNormParams]
    decoder_layers: Tuple[DecoderLayer, ...]
    decoder_norm: LayerNormParams

    @property
    def vocab(self) -> int:
        return self.config.vocab

    def named_tensors(self) -> Iterator[Tuple[str, Tensor]]:
        """Yield every tensor with its name, in checkpoint traversal order."""
        yield "token_embedding", self.token_embedding
        yield "position_embedding", self.position_embedding
        for i, layer in enumerate(self.encoder_layers):
            yield from _block_tensors(f"encoder.{i}", layer)
        if self.encoder_norm is not None:
            yield from _norm_tensors("encoder.norm", self.encoder_norm)
        for i, layer in enumerate(self.decoder_layers):
            yield from _block_tensors(f"decoder.{i}", layer)
        yield from _norm_tensors("decoder.norm", self.decoder_norm)


# ---------------------------------------------------------------------------
# Layout and initialisation
# ---------------------------------------------------------------------------


def _norm_layout(prefix: str, d_m: int) -> List[Tuple[str, Tuple[int, ...]]]:
    return [(f"{prefix}.gain", (d_m,)), (f"{prefix}.shift", (d_m,))]


def _attn_layout(prefix: str, c: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        (f"{prefix}.{name}", shape)
        for name, shape in AttentionParams.shapes(c.h, c.d_m, c.d_k)
    ]


def _ffn_layout(prefix: str, c: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    return [
        (f"{prefix}.w1", (c.d_m, c.d_ff)),
        (f"{prefix}.b1", (c.d_ff,)),
        (f"{prefix}.w2", (c.d_ff, c.d_m)),
        (f"{prefix}.b2", (c.d_m,)),
    ]


def tensor_layout(config: ModelConfig) -> List[Tuple[str, Tuple[int, ...]]]:
    """Names and shapes of every tensor, in initialisation and checkpoint order.

    The order is: token_embedding, position_embedding, then each encoder
    layer (self_norm, self_attn, ffn_norm, ffn) and encoder.norm, then each
    decoder layer (self_norm, self_attn, cross_norm, cross_attn, ffn_norm,
    ffn; the cross pair only for encoder-decoder) and decoder.norm. Attention
    tensors are ordered wq, wk, wv, wo, bq, bk, bv, bo.
    """
    c = config
    layout = [
        ("token_embedding", (c.vocab, c.d_m)),
        ("position_embedding", (c.max_positions, c.d_m)),
    ]
    if c.is_encoder_decoder:
        for i in range(c.L_enc):
            p = f"encoder.{i}"
            layout += _norm_layout(f"{p}.self_norm", c.d_m)
            layout += _attn_layout(f"{p}.self_attn", c)
            layout += _norm_layout(f"{p}.ffn_norm", c.d_m)
            layout += _ffn_layout(f"{p}.ffn", c)
        layout += _norm_layout("encoder.norm", c.d_m)
    for i in range(c.L):
        p = f"decoder.{i}"
        layout += _norm_layout(f"{p}.self_norm", c.d_m)
        layout += _attn_layout(f"{p}.self_attn", c)
        if c.is_encoder_decoder:
            layout += _norm_layout(f"{p}.cross_norm", c.d_m)
            layout += _attn_layout(f"{p}.cross_attn", c)
        layout += _norm_layout(f"{p}.ffn_norm", c.d_m)
        layout += _ffn_layout(f"{p}.ffn", c)
    layout += _norm_layout("decoder.norm", c.d_m)
    return layout


def parameter_count(config: ModelConfig) -> int:
    """Closed-form number of scalar parameters.

    With hk = h*d_k:
      attention = 4*d_m*hk + 3*hk + d_m
      norm = 2*d_m
      ffn = 2*d_m*d_ff + d_ff + d_m
      encoder layer = 2*norm + attention + ffn
      decoder layer = encoder layer, plus norm + attention for encoder-decoder
      total = (vocab + max_positions)*d_m + layers + one final norm per stack
    """
    c = config
    hk = c.h * c.d_k
    attention = 4 * c.d_m * hk + 3 * hk + c.d_m
    norm = 2 * c.d_m
    ffn = 2 * c.d_m * c.d_ff + c.d_ff + c.d_m
    block = 2 * norm + attention + ffn
    total = (c.vocab + c.max_positions) * c.d_m + c.L * block + norm
    if c.is_encoder_decoder:
        total += c.L_enc * block + norm + c.L * (norm + attention)
    return total


def _norm_tensors(prefix: str, norm: LayerNormParams):
    yield f"{prefix}.gain", norm.gain
    yield f"{prefix}.shift", norm.shift


def _block_tensors(prefix: str, layer: Union[EncoderLayer, DecoderLayer]):
    yield from _norm_tensors(f"{prefix}.self_norm", layer.self_norm)
    for name, t in layer.self_attn.tensors():
        yield f"{prefix}.self_attn.{name}", t
    if getattr(layer, "cross_attn", None) is not None:
        yield from _norm_tensors(f"{prefix}.cross_norm", layer.cross_norm)
        for name, t in layer.cross_attn.tensors():
            yield f"{prefix}.cross_attn.{name}", t
    yield from _norm_tensors(f"{prefix}.ffn_norm", layer.ffn_norm)
    for name in ("w1", "b1", "w2", "b2"):
        yield f"{prefix}.ffn.{name}", getattr(layer.ffn, name)


def model_from_tensors(config: ModelConfig, tensors: Dict[str, Tensor]) -> Model:
    """Assemble a :class:`Model` from a name -> tensor mapping."""

    def norm(prefix):
        return LayerNormParams(tensors[f"{prefix}.gain"], tensors[f"{prefix}.shift"])

    def attn(prefix):
        return AttentionParams(
            **{n: tensors[f"{prefix}.{n}"] for n, _ in AttentionParams.shapes(1, 1, 1)}
        )

    def ffn(prefix):
        return FeedForwardParams(
            *(tensors[f"{prefix}.{n}"] for n in ("w1", "b1", "w2", "b2"))
        )

    encoder_layers = ()
    encoder_norm = None
    if config.is_encoder_decoder:
        encoder_layers = tuple(
            EncoderLayer(
                self_norm=norm(f"encoder.{i}.self_norm"),
                self_attn=attn(f"encoder.{i}.self_attn"),
                ffn_norm=norm(f"encoder.{i}.ffn_norm"),
                ffn=ffn(f"encoder.{i}.ffn"),
            )
            for i in range(config.L_enc)
        )
        encoder_norm = norm("encoder.norm")
    decoder_layers = []
    for i in range(config.L):
        p = f"decoder.{i}"
        cross = config.is_encoder_decoder
        decoder_layers.append(
            DecoderLayer(
                self_norm=norm(f"{p}.self_norm"),
                self_attn=attn(f"{p}.self_attn"),
                ffn_norm=norm(f"{p}.ffn_norm"),
                ffn=ffn(f"{p}.ffn"),
                cross_norm=norm(f"{p}.cross_norm") if cross else None,
                cross_attn=attn(f"{p}.cross_attn") if cross else None,
            )
        )
    return Model(
        config=config,
        token_embedding=tensors["token_embedding"],
        position_embedding=tensors["position_embedding"],
        encoder_layers=encoder_layers,
        encoder_norm=encoder_norm,
        decoder_layers=tuple(decoder_layers),
        decoder_norm=norm("decoder.norm"),
    )


def init_model(config: ModelConfig) -> Model:
    """Draw every weight from seeded_uniform(-0.1, 0.1) in layout order.

    Raises:
        ParameterError: If the configuration is invalid.
    """
    config.validate()
    rng = Rng(config.seed)
    tensors = {
        name: seeded_uniform(shape, rng, INIT_LOW, INIT_HIGH)
        for name, shape in tensor_layout(config)
    }
    logger.info(
        f"Initialised {config.architecture} model with "
        f"{parameter_count(config)} parameters (seed {config.seed})"
    )
    return model_from_tensors(config, tensors)


# ---------------------------------------------------------------------------
# Forward passes
# ---------------------------------------------------------------------------


def _check_tokens(model: Model, tokens: Sequence[int], what: str) -> np.ndarray:
    ids = np.asarray(tokens)
    if ids.size == 0:
        raise InputError(f"{what} is empty")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError(f"{what} must contain integer token ids")
    if ids.min() < 0 or ids.max() >= model.vocab:
        raise InputError(f"{what} has ids outside [0, {model.vocab})")
    if ids.shape[-1] > model.config.max_positions:
        raise LengthError(
            f"{what} has {ids.shape[-1]} positions, max_positions is "
            f"{model.config.max_positions}"
        )
    return ids


def _embed(model: Model, ids: np.ndarray, positions: np.ndarray) -> Tensor:
    return model.token_embedding[ids] + model.position_embedding[positions]


def encode(model: Model, tokens: Sequence[int]) -> Tensor:
    """Run the bidirectional encoder over ``tokens``; returns (n, d_m).

    Raises:
        ModeError: For a decoder-only model.
        InputError: If ``tokens`` is empty or holds invalid ids.
        LengthError: If ``tokens`` is longer than max_positions.
    """
    if not model.config.is_encoder_decoder:
        raise ModeError("encode requires an encoder-decoder model")
    ids = _check_tokens(model, tokens, "encoder input")
    if ids.ndim != 1:
        raise InputError(f"encoder input must be one sequence, got shape {ids.shape}")
    x = _embed(model, ids, np.arange(ids.shape[0]))
    for layer in model.encoder_layers:
        y = layer.self_norm(x)
        x = x + multi_head_attention(y, y, layer.self_attn)
        x = x + layer.ffn(layer.ffn_norm(x))
    return model.encoder_norm(x)


def _logits(model: Model, x: Tensor) -> Tensor:
    return matmul(model.decoder_norm(x), model.token_embedding.T)


def _causal_self_attention(y: Tensor, params: AttentionParams) -> Tensor:
    K, V = project_kv(y, params)
    Q = project_query(y, params)
    heads = []
    for t in range(y.shape[0]):
        q_t = Q[t].reshape(params.h, 1, params.d_k)
        heads.append(attend(q_t, K[:, : t + 1], V[:, : t + 1], params.d_k))
    merged = np.concatenate(heads, axis=1).transpose(1, 0, 2).reshape(y.shape[0], -1)
    return project_output(merged, params)


@dataclass(frozen=True, eq=False)
class ForwardResult:
    """Output of :func:`forward`.

    Attributes:
        logits: (T, vocab), or (lanes, T, vocab) for batched input
        layer_inputs: Per decoder layer, the normalised self-attention input
            (T, d_m) of the first lane; empty unless requested
    """

    logits: Tensor
    layer_inputs: Tuple[Tensor, ...] = ()


def _forward_one(
    model: Model, ids: np.ndarray, memory: Optional[Tensor], collect: bool
) -> ForwardResult:
    x = _embed(model, ids, np.arange(ids.shape[0]))
    layer_inputs = []
    for layer in model.decoder_layers:
        y = layer.self_norm(x)
        if collect:
            layer_inputs.append(y)
        x = x + _causal_self_attention(y, layer.self_attn)
        if layer.cross_attn is not None:
            x = x + multi_head_attention(layer.cross_norm(x), memory, layer.cross_attn)
        x = x + layer.ffn(layer.ffn_norm(x))
    return ForwardResult(_logits(model, x), tuple(layer_inputs))


def forward(
    model: Model,
    tokens: Sequence[int],
    memory: Optional[Tensor] = None,
    collect_layer_inputs: bool = False,
) -> ForwardResult:
    """Full, non-incremental decoder forward over a token sequence.

    Every position's keys and values are projected from scratch. This is the
    reference the incremental paths are checked against, and the work done at
    each step in MHA_NO_CACHE mode.

    Args:
        model: The model
        tokens: (T,) ids, or (lanes, T) ids for several sequences
        memory: Encoder output (n, d_m); required for encoder-decoder models
        collect_layer_inputs: Also return each layer's self-attention input

    Raises:
        InputError: For empty or out-of-vocabulary input.
        LengthError: If T exceeds max_positions.
        ModeError: If ``memory`` is missing for an encoder-decoder model, or
            given to a decoder-only one.
    """
    ids = _check_tokens(model, tokens, "decoder input")
    if model.config.is_encoder_decoder and memory is None:
        raise ModeError("encoder-decoder forward needs the encoder output")
    if not model.config.is_encoder_decoder and memory is not None:
        raise ModeError("decoder-only forward takes no encoder output")
    if ids.ndim == 1:
        return _forward_one(model, ids, memory, collect_layer_inputs)
    results = [
        _forward_one(model, row, memory, collect_layer_inputs and i == 0)
        for i, row in enumerate(ids)
    ]
    return ForwardResult(
        np.stack([r.logits for r in results]), results[0].layer_inputs
    )


# ---------------------------------------------------------------------------
# Incremental decoding
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class DecoderState:
    """Generation-time state for one input and ``lanes`` query lanes.

    Which fields are populated depends on the mode and architecture:

    * MHA_CACHED keeps per-layer self-attention KV caches (holding the
      decoder-only prefix too) and, for encoder-decoder, per-layer cross
      KV caches replicated per lane.
    * EL keeps the encoder output once (encoder-decoder) or one hidden
      cache per layer for the prefix (decoder-only), shared by all lanes.
      Generated tokens always use per-layer KV caches.
    * MHA_NO_CACHE keeps the token history and the encoder output.
    """

    mode: AttentionMode
    architecture: str
    lanes: int
    position: int
    self_caches: Tuple[KvCache, ...] = ()
    cross_caches: Tuple[KvCache, ...] = ()
    memory: Optional[Tensor] = None
    prefix: Tuple[HiddenCache, ...] = ()
    prefix_length: int = 0
    history: Optional[np.ndarray] = None
    last_logits: Optional[Tensor] = None

    def cache_bytes(self) -> Dict[str, int]:
        """Bytes held for input-related state and for generated tokens."""
        generated = sum(c.nbytes for c in self.self_caches)
        if self.mode == AttentionMode.MHA_CACHED:
            if self.architecture == ENCODER_DECODER:
                input_bytes = sum(c.nbytes for c in self.cross_caches)
            else:
                input_bytes = sum(
                    c.keys[:, :, : self.prefix_length].nbytes
                    + c.values[:, :, : self.prefix_length].nbytes
                    for c in self.self_caches
                )
                generated -= input_bytes
        elif self.mode == AttentionMode.EL:
            input_bytes = sum(p.nbytes for p in self.prefix)
            if self.memory is not None:
                input_bytes += int(self.memory.nbytes)
        else:
            input_bytes = int(self.memory.nbytes) if self.memory is not None else 0
        return {"input": int(input_bytes), "generated": int(generated)}

    def gather(self, lanes: Sequence[int]) -> "DecoderState":
        """Keep (and possibly repeat) the given lanes.

        Shared EL tensors (encoder output, prefix hidden states) are kept as
        they are; only per-lane caches are indexed.
        """
        index = np.asarray(lanes, dtype=np.intp)
        if index.ndim != 1 or index.size == 0:
            raise StateError("gather needs at least one lane")
        if index.min() < 0 or index.max() >= self.lanes:
            raise StateError(f"lane index out of range for {self.lanes} lanes")
        return replace(
            self,
            lanes=int(index.size),
            self_caches=tuple(c.gather(index) for c in self.self_caches),
            cross_caches=tuple(c.gather(index) for c in self.cross_caches),
            history=None if self.history is None else self.history[index],
            last_logits=None if self.last_logits is None else self.last_logits[index],
        )


def _empty_caches(model: Model, lanes: int) -> Tuple[KvCache, ...]:
    c = model.config
    dtype = model.token_embedding.dtype
    return tuple(KvCache.empty(lanes, c.h, c.d_k, dtype) for _ in range(c.L))


def init_decoder_state(
    model: Model,
    source: Union[Tensor, Sequence[int]],
    mode: AttentionMode,
    beams: int = 1,
) -> DecoderState:
    """Prepare incremental decoding for one input.

    Args:
        model: The model
        source: Encoder output (n, d_m) for encoder-decoder models, or the
            prefix token ids for decoder-only models
        mode: Attention mode the state is built for
        beams: Number of query lanes

    Returns:
        A fresh state. For decoder-only models ``last_logits`` holds the
        logits after the last prefix token, replicated per lane.

    Raises:
        ParameterError: If ``beams`` < 1.
        InputError: For an empty decoder-only prefix.
    """
    if beams < 1:
        raise ParameterError(f"beams must be >= 1, got {beams}")
    mode = AttentionMode.parse(mode)
    c = model.config
    if c.is_encoder_decoder:
        memory = np.asarray(source)
        if memory.ndim != 2 or memory.shape[1] != c.d_m or memory.shape[0] == 0:
            raise InputError(
                f"encoder output must be (n >= 1, {c.d_m}), got {memory.shape}"
            )
        state = DecoderState(
            mode, ENCODER_DECODER, beams, 0, self_caches=_empty_caches(model, beams)
        )
        if mode == AttentionMode.MHA_CACHED:
            cross = tuple(
                KvCache.from_hidden(memory, layer.cross_attn, beams)
                for layer in model.decoder_layers
            )
            state = replace(state, cross_caches=cross)
        elif mode == AttentionMode.EL:
            state = replace(state, memory=memory)
        else:
            state = replace(
                state,
                self_caches=(),
                memory=memory,
                history=np.zeros((beams, 0), dtype=np.int64),
            )
        logger.debug(f"Initialised {mode.value} state: {state.cache_bytes()}")
        return state

    ids = _check_tokens(model, source, "prefix")
    if ids.ndim != 1:
        raise InputError(f"prefix must be one sequence, got shape {ids.shape}")
    result = forward(model, ids, collect_layer_inputs=True)
    last = np.repeat(result.logits[-1][None], beams, axis=0)
    t = ids.shape[0]
    state = DecoderState(
        mode, DECODER_ONLY, beams, t, prefix_length=t, last_logits=last
    )
    if mode == AttentionMode.MHA_CACHED:
        caches = tuple(
            KvCache.from_hidden(h, layer.self_attn, beams)
            for h, layer in zip(result.layer_inputs, model.decoder_layers)
        )
        state = replace(state, self_caches=caches)
    elif mode == AttentionMode.EL:
        state = replace(
            state,
            self_caches=_empty_caches(model, beams),
            prefix=tuple(HiddenCache(h) for h in result.layer_inputs),
        )
    else:
        state = replace(state, history=np.repeat(ids[None], beams, axis=0))
    logger.debug(f"Initialised {mode.value} state: {state.cache_bytes()}")
    return state


def _lane_tokens(model: Model, state: DecoderState, token) -> np.ndarray:
    ids = np.asarray(token)
    if ids.ndim == 0:
        ids = np.full(state.lanes, int(ids))
    if ids.shape != (state.lanes,):
        raise StateError(f"expected {state.lanes} tokens, got shape {ids.shape}")
    if not np.issubdtype(ids.dtype, np.integer):
        raise InputError("token ids must be integers")
    if ids.min() < 0 or ids.max() >= model.vocab:
        raise InputError(f"token id outside [0, {model.vocab})")
    return ids.astype(np.int64)


def _step_no_cache(model: Model, state: DecoderState, ids: np.ndarray):
    history = np.concatenate([state.history, ids[:, None]], axis=1)
    logits = forward(model, history, memory=state.memory).logits[:, -1]
    return logits, replace(
        state, history=history, position=state.position + 1, last_logits=logits
    )


def decoder_step(
    model: Model,
    state: DecoderState,
    token: Union[int, Sequence[int]],
    mode: AttentionMode,
) -> Tuple[Tensor, DecoderState]:
    """Feed one token per lane and return the next-token logits.

    Args:
        model: The model the state was built for
        state: Current state
        token: One id for every lane, or a single id used for all lanes
        mode: Must equal the mode the state was built for

    Returns:
        ``(logits, state')`` with logits of shape (lanes, vocab).

    Raises:
        StateError: If ``mode`` differs from the state's mode, or the
            architecture does not match the model.
        LengthError: If the position would pass max_positions.
        InputError: For an out-of-vocabulary token.
    """
    mode = AttentionMode.parse(mode)
    if mode != state.mode:
        raise StateError(
            f"state was built for {state.mode.value}, step requested {mode.value}"
        )
    if state.architecture != model.config.architecture:
        raise StateError(
            f"state is {state.architecture}, model is {model.config.architecture}"
        )
    if state.position >= model.config.max_positions:
        raise LengthError(
            f"position {state.position} exceeds max_positions "
            f"{model.config.max_positions}"
        )
    ids = _lane_tokens(model, state, token)
    if mode == AttentionMode.MHA_NO_CACHE:
        return _step_no_cache(model, state, ids)

    x = _embed(model, ids, np.full(state.lanes, state.position))
    self_caches = []
    decoder_only = state.architecture == DECODER_ONLY
    for i, layer in enumerate(model.decoder_layers):
        y = layer.self_norm(x)
        if mode == AttentionMode.EL and decoder_only:
            cache = append_to_cache(state.self_caches[i], y, layer.self_attn)
            attn = mixed_self_attention(y, state.prefix[i], cache, layer.self_attn)
        else:
            attn, cache = mha_incremental_step(
                y, y, state.self_caches[i], layer.self_attn
            )
        self_caches.append(cache)
        x = x + attn
        if layer.cross_attn is not None:
            y = layer.cross_norm(x)
            if mode == AttentionMode.EL:
                x = x + el_attention(y, state.memory, layer.cross_attn)
            else:
                x = x + mha_cached_attention(
                    y, state.cross_caches[i], layer.cross_attn
                )
        x = x + layer.ffn(layer.ffn_norm(x))
    logits = _logits(model, x)
    return logits, replace(
        state,
        self_caches=tuple(self_caches),
        position=state.position + 1,
        last_logits=logits,
    )
