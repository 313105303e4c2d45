"""Multi-head attention and EL-attention.

Every function accepts ``m >= 1`` query rows ("lanes"); the single-query
form is ``m == 1``. Kernels are labelled with the operation group they
belong to:

* build key/value (:func:`project_kv`)
* build query and output (:func:`project_query`, :func:`project_output`, the
  query expansion of :func:`build_el_query` and the per-head value
  projection of the EL paths)
* attention (scores, softmax and weighted sums)

EL-attention never projects the context ``H`` per head. It expands the
query instead, ``EL-Q_i = (q W_i^Q + b_i^Q) (W_i^K)^T``, scores it against
the raw hidden states, and applies ``W_i^V`` after the weighted sum.
"""

from dataclasses import dataclass, replace
from functools import cached_property
from typing import Optional, Tuple

import numpy as np

from elattn.errors import EmptyContextError, ShapeError, StateError
from elattn.tensor_core import (
    OpGroup,
    Rng,
    Tensor,
    batched_matmul,
    matmul,
    op_group,
    scaled_softmax_rows,
    seeded_uniform,
)


@dataclass(frozen=True, eq=False)
class AttentionParams:
    """Weights of one attention sub-layer.

    Attributes:
        wq: Query projections, shape (h, d_m, d_k)
        wk: Key projections, shape (h, d_m, d_k)
        wv: Value projections, shape (h, d_m, d_k)
        wo: Output projections, shape (h, d_k, d_m)
        bq: Query biases, shape (h, d_k)
        bk: Key biases, shape (h, d_k)
        bv: Value biases, shape (h, d_k)
        bo: Shared output bias, shape (d_m,)
        include_key_bias: Apply bk on both attention paths
        include_value_bias: Apply bv on both attention paths
    """

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor
    include_key_bias: bool = True
    include_value_bias: bool = True

    def __post_init__(self):
        if self.wq.ndim != 3:
            raise ShapeError(f"wq must be (h, d_m, d_k), got {self.wq.shape}")
        h, d_m, d_k = self.wq.shape
        expected = {
            "wk": (h, d_m, d_k),
            "wv": (h, d_m, d_k),
            "wo": (h, d_k, d_m),
            "bq": (h, d_k),
            "bk": (h, d_k),
            "bv": (h, d_k),
            "bo": (d_m,),
        }
        for name, shape in expected.items():
            actual = getattr(self, name).shape
            if actual != shape:
                raise ShapeError(f"{name} has shape {actual}, expected {shape}")

    @property
    def h(self) -> int:
        return self.wq.shape[0]

    @property
    def d_m(self) -> int:
        return self.wq.shape[1]

    @property
    def d_k(self) -> int:
        return self.wq.shape[2]

    @classmethod
    def random(
        cls,
        h: int,
        d_m: int,
        d_k: Optional[int] = None,
        rng: Optional[Rng] = None,
        scale: float = 0.5,
    ) -> "AttentionParams":
        """Draw every weight and bias uniformly from [-scale, scale)."""
        d_k = d_k or d_m // h
        rng = rng or Rng(0)
        shapes = cls.shapes(h, d_m, d_k)
        return cls(**{n: seeded_uniform(s, rng, -scale, scale) for n, s in shapes})

    @staticmethod
    def shapes(h: int, d_m: int, d_k: int) -> Tuple[Tuple[str, Tuple[int, ...]], ...]:
        """Tensor names and shapes in checkpoint traversal order."""
        return (
            ("wq", (h, d_m, d_k)),
            ("wk", (h, d_m, d_k)),
            ("wv", (h, d_m, d_k)),
            ("wo", (h, d_k, d_m)),
            ("bq", (h, d_k)),
            ("bk", (h, d_k)),
            ("bv", (h, d_k)),
            ("bo", (d_m,)),
        )

    def tensors(self) -> Tuple[Tuple[str, Tensor], ...]:
        return tuple((name, getattr(self, name)) for name, _ in self.shapes(1, 1, 1))

    def with_flags(
        self, include_key_bias: bool = True, include_value_bias: bool = True
    ) -> "AttentionParams":
        return replace(
            self,
            include_key_bias=include_key_bias,
            include_value_bias=include_value_bias,
        )

    # Concatenated-head views used by the kernels.

    @cached_property
    def wq_all(self) -> Tensor:
        return _concat_heads(self.wq)

    @cached_property
    def bq_all(self) -> Tensor:
        return self.bq.reshape(-1)

    @cached_property
    def wkv_all(self) -> Tensor:
        return np.concatenate([_concat_heads(self.wk), _concat_heads(self.wv)], axis=1)

    @cached_property
    def bkv_all(self) -> Tensor:
        return np.concatenate([self.key_bias.reshape(-1), self.value_bias.reshape(-1)])

    @cached_property
    def wo_all(self) -> Tensor:
        return self.wo.reshape(self.h * self.d_k, self.d_m)

    @cached_property
    def wk_t(self) -> Tensor:
        return np.ascontiguousarray(self.wk.transpose(0, 2, 1))

    @property
    def key_bias(self) -> Tensor:
        return self.bk if self.include_key_bias else np.zeros_like(self.bk)

    @property
    def value_bias(self) -> Tensor:
        return self.bv if self.include_value_bias else np.zeros_like(self.bv)


def _concat_heads(w: Tensor) -> Tensor:
    h, d_m, d_k = w.shape
    return np.ascontiguousarray(w.transpose(1, 0, 2).reshape(d_m, h * d_k))


def _split_heads(x: Tensor, h: int) -> Tensor:
    """(m, h*d_k) -> (h, m, d_k)."""
    m = x.shape[0]
    return x.reshape(m, h, -1).transpose(1, 0, 2)


def _merge_heads(x: Tensor) -> Tensor:
    """(h, m, d_k) -> (m, h*d_k)."""
    h, m, d_k = x.shape
    return x.transpose(1, 0, 2).reshape(m, h * d_k)


def _check_rows(x: Tensor, params: AttentionParams, name: str) -> None:
    if x.ndim != 2 or x.shape[1] != params.d_m:
        raise ShapeError(f"{name} has shape {x.shape}, expected (rows, {params.d_m})")


@dataclass(frozen=True, eq=False)
class KvCache:
    """Per-head projected keys and values, one copy per lane.

    Attributes:
        keys: Shape (lanes, h, t, d_k)
        values: Shape (lanes, h, t, d_k)
    """

    keys: Tensor
    values: Tensor

    @classmethod
    def empty(cls, lanes: int, h: int, d_k: int, dtype=np.float64) -> "KvCache":
        blank = np.zeros((lanes, h, 0, d_k), dtype=dtype)
        return cls(blank, blank.copy())

    @classmethod
    def from_hidden(
        cls, H: Tensor, params: AttentionParams, lanes: int = 1
    ) -> "KvCache":
        """Project ``H`` once and replicate the result for every lane."""
        K, V = project_kv(H, params)
        return cls(
            np.repeat(K[None], lanes, axis=0), np.repeat(V[None], lanes, axis=0)
        )

    @property
    def lanes(self) -> int:
        return self.keys.shape[0]

    @property
    def length(self) -> int:
        return self.keys.shape[2]

    @property
    def nbytes(self) -> int:
        return int(self.keys.nbytes + self.values.nbytes)

    def append(self, keys: Tensor, values: Tensor) -> "KvCache":
        """Append one position per lane; ``keys``/``values`` are (lanes, h, 1, d_k)."""
        if keys.shape != (self.lanes, self.keys.shape[1], 1, self.keys.shape[3]):
            raise StateError(
                f"cannot append keys {keys.shape} to cache {self.keys.shape}"
            )
        return KvCache(
            np.concatenate([self.keys, keys], axis=2),
            np.concatenate([self.values, values], axis=2),
        )

    def gather(self, lanes) -> "KvCache":
        """Select (and possibly repeat) lanes."""
        index = np.asarray(lanes, dtype=np.intp)
        return KvCache(self.keys[index], self.values[index])

    def check_compatible(self, params: AttentionParams, lanes: int) -> None:
        if self.keys.shape[1] != params.h or self.keys.shape[3] != params.d_k:
            raise StateError(
                f"cache heads {self.keys.shape[1]}x{self.keys.shape[3]} do not "
                f"match params {params.h}x{params.d_k}"
            )
        if self.lanes != lanes:
            raise StateError(f"cache has {self.lanes} lanes, query has {lanes}")


@dataclass(frozen=True, eq=False)
class HiddenCache:
    """Unprojected hidden states shared by all heads and lanes.

    Attributes:
        hidden: Shape (t, d_m)
    """

    hidden: Tensor

    @property
    def length(self) -> int:
        return self.hidden.shape[0]

    @property
    def nbytes(self) -> int:
        return int(self.hidden.nbytes)


@dataclass(frozen=True, eq=False)
class ElQuery:
    """Expanded queries for EL-attention.

    Attributes:
        expanded: EL-Q_i per query row and head, shape (m, h, d_m)
        key_bias: The per-head scalars (q W_i^Q + b_i^Q) . b_i^K, shape (m, h)
        heads: The projected per-head queries, shape (m, h, d_k)
    """

    expanded: Tensor
    key_bias: Tensor
    heads: Tensor

    def folded(self) -> Tensor:
        """Rows stacked head-major within each query: (m*h, d_m)."""
        m, h, d_m = self.expanded.shape
        return self.expanded.reshape(m * h, d_m)

    def folded_bias(self) -> Tensor:
        return self.key_bias.reshape(-1)


# ---------------------------------------------------------------------------
# Kernel groups
# ---------------------------------------------------------------------------


def project_kv(H: Tensor, params: AttentionParams) -> Tuple[Tensor, Tensor]:
    """Project ``H`` (n, d_m) to per-head keys and values, each (h, n, d_k).

    One fused kernel against the concatenated key and value weights.
    """
    _check_rows(H, params, "H")
    hk = params.h * params.d_k
    with op_group(OpGroup.BUILD_KV):
        kv = matmul(H, params.wkv_all, bias=params.bkv_all)
    return _split_heads(kv[:, :hk], params.h), _split_heads(kv[:, hk:], params.h)


def project_query(q: Tensor, params: AttentionParams) -> Tensor:
    """Project query rows (m, d_m) to (m, h*d_k)."""
    _check_rows(q, params, "q")
    with op_group(OpGroup.BUILD_QUERY):
        return matmul(q, params.wq_all, bias=params.bq_all)


def project_output(heads: Tensor, params: AttentionParams) -> Tensor:
    """Project concatenated head results (m, h*d_k) back to (m, d_m), adding bo."""
    with op_group(OpGroup.BUILD_QUERY):
        return matmul(heads, params.wo_all, bias=params.bo)


def attend(Q: Tensor, K: Tensor, V: Tensor, d_norm: int) -> Tensor:
    """Batched scaled dot-product attention.

    Args:
        Q: Queries, shape (..., mq, d)
        K: Keys, shape (..., n, d)
        V: Values, shape (..., n, d_v)
        d_norm: Softmax normaliser

    Returns:
        Tensor of shape (..., mq, d_v).
    """
    if K.shape[-2] == 0:
        raise EmptyContextError("attention over an empty context")
    lead = Q.shape[:-2]
    if K.shape[:-2] != lead or V.shape[:-2] != lead:
        raise ShapeError(f"attend batch shapes differ: {Q.shape}, {K.shape}, {V.shape}")
    mq, d = Q.shape[-2:]
    n = K.shape[-2]
    q3 = Q.reshape(-1, mq, d)
    k3 = K.reshape(-1, n, d)
    v3 = V.reshape(-1, n, V.shape[-1])
    with op_group(OpGroup.ATTENTION):
        scores = batched_matmul(q3, k3.transpose(0, 2, 1))
        probs = scaled_softmax_rows(scores, d_norm)
        out = batched_matmul(probs, v3)
    return out.reshape(lead + (mq, V.shape[-1]))


# ---------------------------------------------------------------------------
# Multi-head attention
# ---------------------------------------------------------------------------


def single_head_attention(q: Tensor, K: Tensor, V: Tensor, d_norm: int) -> Tensor:
    """softmax(q K^T / sqrt(d_norm)) V for a single head.

    Raises:
        EmptyContextError: If ``K`` has no rows.
    """
    if K.shape[0] == 0:
        raise EmptyContextError("attention over an empty context")
    if K.shape[0] != V.shape[0]:
        raise ShapeError(f"K {K.shape} and V {V.shape} row counts differ")
    with op_group(OpGroup.ATTENTION):
        probs = scaled_softmax_rows(matmul(q, K.T), d_norm)
        return matmul(probs, V)


def multi_head_attention(q: Tensor, H: Tensor, params: AttentionParams) -> Tensor:
    """Multi-head attention of query rows over hidden states used as key and value.

    Args:
        q: Query rows, shape (m, d_m)
        H: Context, shape (n, d_m)
        params: Attention weights

    Returns:
        Tensor of shape (m, d_m).
    """
    _check_rows(q, params, "q")
    _check_rows(H, params, "H")
    if H.shape[0] == 0:
        raise EmptyContextError("attention over an empty context")
    K, V = project_kv(H, params)
    Q = _split_heads(project_query(q, params), params.h)
    return project_output(_merge_heads(attend(Q, K, V, params.d_k)), params)


def append_to_cache(
    cache: KvCache, new_hidden: Tensor, params: AttentionParams
) -> KvCache:
    """Project one new hidden row per lane and append it to ``cache``."""
    _check_rows(new_hidden, params, "new_hidden")
    cache.check_compatible(params, new_hidden.shape[0])
    K, V = project_kv(new_hidden, params)
    return cache.append(
        K.transpose(1, 0, 2)[:, :, None, :], V.transpose(1, 0, 2)[:, :, None, :]
    )


def mha_cached_attention(q: Tensor, cache: KvCache, params: AttentionParams) -> Tensor:
    """Attend each lane's query over that lane's cached keys and values."""
    _check_rows(q, params, "q")
    cache.check_compatible(params, q.shape[0])
    m = q.shape[0]
    Q = project_query(q, params).reshape(m, params.h, 1, params.d_k)
    out = attend(Q, cache.keys, cache.values, params.d_k)
    return project_output(out.reshape(m, params.h * params.d_k), params)


def mha_incremental_step(
    q: Tensor, new_hidden: Tensor, cache: KvCache, params: AttentionParams
) -> Tuple[Tensor, KvCache]:
    """Append the new position to the cache, then attend over all positions.

    Only ``new_hidden`` is projected; earlier rows are read from the cache.

    Raises:
        StateError: If the cache was built for different heads or lanes.
    """
    cache = append_to_cache(cache, new_hidden, params)
    return mha_cached_attention(q, cache, params), cache


# ---------------------------------------------------------------------------
# EL-attention
# ---------------------------------------------------------------------------


def build_el_query(q: Tensor, params: AttentionParams) -> ElQuery:
    """Expand query rows: EL-Q_i = (q W_i^Q + b_i^Q)(W_i^K)^T.

    The key-bias scalars are (q W_i^Q + b_i^Q) . b_i^K, or zero when
    ``include_key_bias`` is off.
    """
    m = q.shape[0]
    heads = _split_heads(project_query(q, params), params.h)
    with op_group(OpGroup.BUILD_QUERY):
        expanded = batched_matmul(heads, params.wk_t)
        if params.include_key_bias:
            key_bias = batched_matmul(heads, params.bk[:, :, None])[:, :, 0].T
        else:
            key_bias = np.zeros((m, params.h), dtype=expanded.dtype)
    return ElQuery(
        expanded=expanded.transpose(1, 0, 2),
        key_bias=np.ascontiguousarray(key_bias),
        heads=heads.transpose(1, 0, 2),
    )


def _el_scores(
    queries: Tensor, H: Tensor, bias_scalars: Tensor, params: AttentionParams
) -> Tensor:
    bias = bias_scalars[:, None] if params.include_key_bias else None
    return matmul(queries, H.T, bias=bias)


def _el_value_heads(weighted: Tensor, params: AttentionParams) -> Tensor:
    """(g*h, d_m) weighted hidden sums -> (h, g, d_k) per-head values."""
    g = weighted.shape[0] // params.h
    per_head = weighted.reshape(g, params.h, params.d_m).transpose(1, 0, 2)
    bias = params.bv[:, None, :] if params.include_value_bias else None
    with op_group(OpGroup.BUILD_QUERY):
        return batched_matmul(per_head, params.wv, bias=bias)


def el_attention_folded(
    queries: Tensor, H: Tensor, bias_scalars: Tensor, params: AttentionParams
) -> Tensor:
    """EL-attention for g logical queries against one shared context.

    All g*h expanded query rows are scored against ``H`` with one matrix
    multiplication, so ``H`` is read once per pass however many heads and
    beams there are.

    Args:
        queries: Expanded queries, shape (g*h, d_m), head-major within a query
        H: Shared context, shape (n, d_m)
        bias_scalars: Key-bias scalars, shape (g*h,)
        params: Attention weights

    Returns:
        Tensor of shape (g, d_m).

    Raises:
        ShapeError: If the row count is not divisible by h.
        EmptyContextError: If ``H`` has no rows.
    """
    if queries.ndim != 2 or queries.shape[0] % params.h:
        raise ShapeError(
            f"folded queries {queries.shape} are not a multiple of h={params.h} rows"
        )
    _check_rows(H, params, "H")
    if H.shape[0] == 0:
        raise EmptyContextError("attention over an empty context")
    with op_group(OpGroup.ATTENTION):
        probs = scaled_softmax_rows(
            _el_scores(queries, H, bias_scalars, params), params.d_k
        )
        weighted = matmul(probs, H)
    return project_output(_merge_heads(_el_value_heads(weighted, params)), params)


def el_attention(q: Tensor, H: Tensor, params: AttentionParams) -> Tensor:
    """EL-attention of query rows (m, d_m) over ``H`` (n, d_m); returns (m, d_m)."""
    _check_rows(q, params, "q")
    _check_rows(H, params, "H")
    if H.shape[0] == 0:
        raise EmptyContextError("attention over an empty context")
    el = build_el_query(q, params)
    return el_attention_folded(el.folded(), H, el.folded_bias(), params)


def el_attention_unfolded(q: Tensor, H: Tensor, params: AttentionParams) -> Tensor:
    """EL-attention computed one (query, head) pair at a time.

    Numerically the same as :func:`el_attention`, but ``H`` is read once per
    pair and pass. Kept as the layout the folded kernel is compared against.
    """
    el = build_el_query(q, params)
    rows = []
    for i in range(q.shape[0]):
        heads = []
        for j in range(params.h):
            with op_group(OpGroup.ATTENTION):
                bias = el.key_bias[i, j] if params.include_key_bias else None
                scores = matmul(el.expanded[i, j][None], H.T, bias=bias)
                weighted = matmul(scaled_softmax_rows(scores, params.d_k), H)
            bias_v = params.bv[j] if params.include_value_bias else None
            with op_group(OpGroup.BUILD_QUERY):
                heads.append(matmul(weighted, params.wv[j], bias=bias_v))
        rows.append(np.concatenate(heads, axis=1))
    return project_output(np.concatenate(rows, axis=0), params)


def mixed_self_attention(
    q: Tensor, prefix: HiddenCache, gen_cache: KvCache, params: AttentionParams
) -> Tensor:
    """Self-attention over a prefix (EL) and generated tokens (cached K/V).

    Scores over the prefix hidden states and over the cached keys are
    concatenated and softmaxed jointly, then split. The prefix part is summed
    over the hidden states and projected by W_i^V; the generated part is
    summed over the cached values. The value bias of the prefix part is
    weighted by that part's probability mass.

    Raises:
        EmptyContextError: If the prefix is empty.
        StateError: If the cache does not match the params or query lanes.
    """
    _check_rows(q, params, "q")
    if prefix.length == 0:
        raise EmptyContextError("mixed self-attention needs a non-empty prefix")
    m = q.shape[0]
    gen_cache.check_compatible(params, m)
    H = prefix.hidden
    t_in, t_out = prefix.length, gen_cache.length
    el = build_el_query(q, params)

    with op_group(OpGroup.ATTENTION):
        scores = _el_scores(el.folded(), H, el.folded_bias(), params)
        if t_out:
            q3 = el.heads.reshape(m * params.h, 1, params.d_k)
            k3 = gen_cache.keys.reshape(m * params.h, t_out, params.d_k)
            gen_scores = batched_matmul(q3, k3.transpose(0, 2, 1))
            scores = np.concatenate([scores, gen_scores[:, 0, :]], axis=1)
        probs = scaled_softmax_rows(scores, params.d_k)
        p_in = probs[:, :t_in]
        weighted = matmul(p_in, H)
        if t_out:
            v3 = gen_cache.values.reshape(m * params.h, t_out, params.d_k)
            gen_part = batched_matmul(probs[:, None, t_in:], v3)
    with op_group(OpGroup.BUILD_QUERY):
        per_head = weighted.reshape(m, params.h, params.d_m).transpose(1, 0, 2)
        heads = batched_matmul(per_head, params.wv)
    if params.include_value_bias:
        mass = p_in.sum(axis=1).reshape(m, params.h).T
        heads = heads + mass[:, :, None] * params.bv[:, None, :]
    if t_out:
        heads = heads + gen_part.reshape(m, params.h, params.d_k).transpose(1, 0, 2)
    return project_output(_merge_heads(heads), params)
