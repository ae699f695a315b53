"""Dense reference encoder: masked multi-head attention with analytic backprop.

This is the ground-truth path.  Activations are (n, d) numpy arrays, one
row per token (the transpose of the blackboard d x n convention).  Blocks
are BERT-style post-norm: masked attention -> output projection ->
residual + layernorm -> GELU feed-forward -> residual + layernorm.
Attention logits are scaled by 1/sqrt(head_dim).

Every forward keeps the caches needed for the hand-written backward pass,
which is verified against central finite differences (see grad_check and
the test suite).  Double precision is the default.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np
from scipy.special import erf

from .instrument import OpCounters
from .patterns import (
    COLUMN,
    FULL,
    ROW,
    SAT,
    AttentionPattern,
    full_pattern,
    head_kind,
    sat_pattern,
    to_mask,
)
from .tables import EncoderConfig, TokenizedExample

__all__ = [
    "LayerParams",
    "Params",
    "init_params",
    "named_tensors",
    "zeros_like_params",
    "embed",
    "masked_softmax",
    "head_forward",
    "layer_forward",
    "layer_tail_forward",
    "encoder_masks",
    "encoder_forward",
    "encoder_backward",
    "EncoderState",
    "gelu",
    "gelu_grad",
    "layer_norm_forward",
    "layer_norm_backward",
    "grad_check",
]

LN_EPS = 1e-12
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class LayerParams:
    wq: np.ndarray  # (heads, head_dim, d)
    wk: np.ndarray  # (heads, head_dim, d)
    wv: np.ndarray  # (heads, head_dim, d)
    wo: np.ndarray  # (d, d)
    ln1_gain: np.ndarray  # (d,)
    ln1_bias: np.ndarray
    ffn_w1: np.ndarray  # (d, ffn)
    ffn_b1: np.ndarray  # (ffn,)
    ffn_w2: np.ndarray  # (ffn, d)
    ffn_b2: np.ndarray  # (d,)
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray


@dataclass
class Params:
    token_emb: np.ndarray  # (vocab, d)
    position_emb: np.ndarray
    row_emb: np.ndarray
    col_emb: np.ndarray
    rank_emb: np.ndarray
    layers: list[LayerParams]

    @property
    def dtype(self):
        return self.token_emb.dtype

    @property
    def hidden_size(self) -> int:
        return self.token_emb.shape[1]


def _trunc_normal(rng: np.random.Generator, shape, std: float, dtype) -> np.ndarray:
    # truncated at 2 std, BERT-style init
    x = rng.standard_normal(shape)
    bad = np.abs(x) > 2.0
    while bad.any():
        x[bad] = rng.standard_normal(int(bad.sum()))
        bad = np.abs(x) > 2.0
    return (x * std).astype(dtype)


def init_params(cfg: EncoderConfig, seed: int = 0, dtype=np.float64, std: float = 0.02) -> Params:
    """Seeded truncated-normal initialization (stddev 0.02)."""
    rng = np.random.default_rng(seed)
    d, h, m, f = cfg.hidden_size, cfg.num_heads, cfg.head_dim, cfg.ffn_dim

    def tn(*shape):
        return _trunc_normal(rng, shape, std, dtype)

    layers = []
    for _ in range(cfg.num_layers):
        layers.append(
            LayerParams(
                wq=tn(h, m, d),
                wk=tn(h, m, d),
                wv=tn(h, m, d),
                wo=tn(d, d),
                ln1_gain=np.ones(d, dtype=dtype),
                ln1_bias=np.zeros(d, dtype=dtype),
                ffn_w1=tn(d, f),
                ffn_b1=np.zeros(f, dtype=dtype),
                ffn_w2=tn(f, d),
                ffn_b2=np.zeros(d, dtype=dtype),
                ln2_gain=np.ones(d, dtype=dtype),
                ln2_bias=np.zeros(d, dtype=dtype),
            )
        )
    return Params(
        token_emb=tn(cfg.vocab_size, d),
        position_emb=tn(cfg.max_position, d),
        row_emb=tn(cfg.max_rows, d),
        col_emb=tn(cfg.max_cols, d),
        rank_emb=tn(cfg.max_rank, d),
        layers=layers,
    )


def named_tensors(params: Params):
    """Yield (name, array) pairs in a stable order."""
    for f in fields(Params):
        if f.name == "layers":
            continue
        yield f.name, getattr(params, f.name)
    for i, lp in enumerate(params.layers):
        for f in fields(LayerParams):
            yield f"layers.{i}.{f.name}", getattr(lp, f.name)


def zeros_like_params(params: Params) -> Params:
    return Params(
        token_emb=np.zeros_like(params.token_emb),
        position_emb=np.zeros_like(params.position_emb),
        row_emb=np.zeros_like(params.row_emb),
        col_emb=np.zeros_like(params.col_emb),
        rank_emb=np.zeros_like(params.rank_emb),
        layers=[
            LayerParams(**{f.name: np.zeros_like(getattr(lp, f.name)) for f in fields(LayerParams)})
            for lp in params.layers
        ],
    )


# ---------------------------------------------------------------------------
# primitive ops
# ---------------------------------------------------------------------------

def gelu(u: np.ndarray) -> np.ndarray:
    return 0.5 * u * (1.0 + erf(u * _INV_SQRT2))


def gelu_grad(u: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + erf(u * _INV_SQRT2)) + u * _INV_SQRT2PI * np.exp(-0.5 * u * u)


def layer_norm_forward(x: np.ndarray, gain: np.ndarray, bias: np.ndarray):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gain * xhat + bias, (xhat, inv)


def layer_norm_backward(dy: np.ndarray, gain: np.ndarray, cache):
    xhat, inv = cache
    d = xhat.shape[-1]
    dxhat = dy * gain
    dgain = (dy * xhat).sum(axis=0)
    dbias = dy.sum(axis=0)
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / d
    )
    return dx, dgain, dbias


def masked_softmax(scores: np.ndarray, allowed: np.ndarray) -> np.ndarray:
    """Row softmax restricted to ``allowed``; fully-masked rows become zeros."""
    shifted = np.where(allowed, scores, -np.inf)
    rowmax = shifted.max(axis=-1, keepdims=True)
    rowmax = np.where(np.isfinite(rowmax), rowmax, 0.0)
    e = np.exp(shifted - rowmax)
    denom = e.sum(axis=-1, keepdims=True)
    return np.where(denom > 0, e / np.where(denom > 0, denom, 1.0), 0.0)


def softmax_backward(dprobs: np.ndarray, probs: np.ndarray) -> np.ndarray:
    inner = (dprobs * probs).sum(axis=-1, keepdims=True)
    return probs * (dprobs - inner)


# ---------------------------------------------------------------------------
# embedding
# ---------------------------------------------------------------------------

def _check_indices(ids: np.ndarray, size: int, what: str) -> None:
    if ids.min() < 0 or ids.max() >= size:
        raise IndexError(f"{what} index out of embedding-table range 0..{size - 1}")


def embed(ex: TokenizedExample, params: Params) -> np.ndarray:
    """Sum of token, position, row, column, and rank embeddings, (n, d)."""
    _check_indices(ex.token_ids, params.token_emb.shape[0], "token")
    _check_indices(ex.position_ids, params.position_emb.shape[0], "position")
    _check_indices(ex.row_ids, params.row_emb.shape[0], "row")
    _check_indices(ex.col_ids, params.col_emb.shape[0], "column")
    _check_indices(ex.rank_ids, params.rank_emb.shape[0], "rank")
    return (
        params.token_emb[ex.token_ids]
        + params.position_emb[ex.position_ids]
        + params.row_emb[ex.row_ids]
        + params.col_emb[ex.col_ids]
        + params.rank_emb[ex.rank_ids]
    )


def _embed_backward(dx: np.ndarray, ex: TokenizedExample, grads: Params) -> None:
    np.add.at(grads.token_emb, ex.token_ids, dx)
    np.add.at(grads.position_emb, ex.position_ids, dx)
    np.add.at(grads.row_emb, ex.row_ids, dx)
    np.add.at(grads.col_emb, ex.col_ids, dx)
    np.add.at(grads.rank_emb, ex.rank_ids, dx)


# ---------------------------------------------------------------------------
# attention and transformer blocks
# ---------------------------------------------------------------------------

def head_forward(
    x: np.ndarray,
    mask: np.ndarray,
    wq: np.ndarray,
    wk: np.ndarray,
    wv: np.ndarray,
    counters: OpCounters | None = None,
    n_real: int | None = None,
):
    """One masked attention head; returns ((n, head_dim) output, cache).

    A row of ``mask`` with no allowed entries (padding) yields a zero
    output column rather than NaN.
    """
    if mask.shape != (x.shape[0], x.shape[0]):
        raise ValueError("mask shape must be (n, n)")
    m = wq.shape[0]
    q = x @ wq.T
    k = x @ wk.T
    v = x @ wv.T
    scores = (q @ k.T) / math.sqrt(m)
    probs = masked_softmax(scores, mask)
    out = probs @ v
    if counters is not None:
        nr = x.shape[0] if n_real is None else n_real
        counters.add_score_ops(nr * nr)
        counters.observe_attn_bytes(scores.nbytes + probs.nbytes + out.nbytes)
    return out, {"q": q, "k": k, "v": v, "probs": probs}


def layer_tail_forward(x: np.ndarray, heads_out: np.ndarray, lp: LayerParams, keep_cache: bool = True):
    """Shared post-attention block: projection, residuals, layernorms, FFN."""
    a = heads_out @ lp.wo.T
    y1, ln1c = layer_norm_forward(x + a, lp.ln1_gain, lp.ln1_bias)
    u = y1 @ lp.ffn_w1 + lp.ffn_b1
    g = gelu(u)
    f = g @ lp.ffn_w2 + lp.ffn_b2
    y2, ln2c = layer_norm_forward(y1 + f, lp.ln2_gain, lp.ln2_bias)
    if not keep_cache:
        return y2, None
    return y2, {"heads_out": heads_out, "ln1": ln1c, "y1": y1, "u": u, "g": g, "ln2": ln2c}


def layer_forward(
    x: np.ndarray,
    masks: list[np.ndarray],
    lp: LayerParams,
    counters: OpCounters | None = None,
    n_real: int | None = None,
):
    """One full encoder layer over per-head masks; returns (y, cache)."""
    h = lp.wq.shape[0]
    outs = []
    head_caches = []
    for i in range(h):
        out_i, hc = head_forward(x, masks[i], lp.wq[i], lp.wk[i], lp.wv[i], counters, n_real)
        outs.append(out_i)
        head_caches.append(hc)
    heads_out = np.concatenate(outs, axis=1)
    y2, tail = layer_tail_forward(x, heads_out, lp)
    cache = {"x": x, "heads": head_caches, "tail": tail}
    return y2, cache


def _layer_backward(dy: np.ndarray, cache: dict, lp: LayerParams, grads_lp: LayerParams) -> np.ndarray:
    x = cache["x"]
    tail = cache["tail"]
    h, m, d = lp.wq.shape
    heads_out, y1, u, g = tail["heads_out"], tail["y1"], tail["u"], tail["g"]

    dr2, dg2, db2 = layer_norm_backward(dy, lp.ln2_gain, tail["ln2"])
    grads_lp.ln2_gain += dg2
    grads_lp.ln2_bias += db2
    # FFN branch
    df = dr2
    grads_lp.ffn_b2 += df.sum(axis=0)
    grads_lp.ffn_w2 += g.T @ df
    dgelu = df @ lp.ffn_w2.T
    du = dgelu * gelu_grad(u)
    grads_lp.ffn_b1 += du.sum(axis=0)
    grads_lp.ffn_w1 += y1.T @ du
    dy1 = dr2 + du @ lp.ffn_w1.T

    dr1, dg1, db1 = layer_norm_backward(dy1, lp.ln1_gain, tail["ln1"])
    grads_lp.ln1_gain += dg1
    grads_lp.ln1_bias += db1
    # attention branch
    da = dr1
    grads_lp.wo += da.T @ heads_out
    dheads = da @ lp.wo
    dx = dr1.copy()
    scale = 1.0 / math.sqrt(m)
    for i in range(h):
        hc = cache["heads"][i]
        dh = dheads[:, i * m : (i + 1) * m]
        q, k, v, probs = hc["q"], hc["k"], hc["v"], hc["probs"]
        dprobs = dh @ v.T
        dv = probs.T @ dh
        dscores = softmax_backward(dprobs, probs) * scale
        dq = dscores @ k
        dk = dscores.T @ q
        grads_lp.wq[i] += dq.T @ x
        grads_lp.wk[i] += dk.T @ x
        grads_lp.wv[i] += dv.T @ x
        dx += dq @ lp.wq[i] + dk @ lp.wk[i] + dv @ lp.wv[i]
    return dx


@dataclass
class EncoderState:
    """Forward results plus caches required for the backward pass."""

    ex: TokenizedExample
    hidden: np.ndarray
    layer_inputs: list[np.ndarray]  # embeddings followed by each layer output
    caches: list[dict]
    masks: list[list[np.ndarray]]
    attention: list[list[np.ndarray]] | None = None

    @property
    def layer_outputs(self) -> list[np.ndarray]:
        return self.layer_inputs[1:]


def encoder_masks(ex: TokenizedExample, cfg: EncoderConfig, attention: str = "mate") -> list[np.ndarray]:
    """Per-head dense masks for an example.

    ``attention`` picks the pattern family: "mate" (row heads then column
    heads), "full", or "sat".
    """
    if attention == "mate":
        kinds = [head_kind(i, cfg) for i in range(1, cfg.num_heads + 1)]
    elif attention in (FULL, SAT):
        kinds = [attention] * cfg.num_heads
    else:
        raise ValueError(f"unknown attention mode {attention!r}")
    rendered: dict[str, np.ndarray] = {}
    masks = []
    for kind in kinds:
        if kind not in rendered:
            if kind == FULL:
                pat = full_pattern(ex)
            elif kind == SAT:
                pat = sat_pattern(ex)
            else:
                pat = AttentionPattern(
                    kind=kind, row_ids=ex.row_ids, col_ids=ex.col_ids,
                    is_query=ex.is_query, is_pad=ex.is_pad,
                )
            rendered[kind] = to_mask(pat)
        masks.append(rendered[kind])
    return masks


def encoder_forward(
    ex: TokenizedExample,
    params: Params,
    cfg: EncoderConfig,
    attention: str = "mate",
    retain_attention: bool = False,
    counters: OpCounters | None = None,
) -> EncoderState:
    """Embed and run the layer stack; zero layers pass embeddings through."""
    masks_per_head = encoder_masks(ex, cfg, attention)
    x = embed(ex, params)
    layer_inputs = [x]
    caches = []
    attn = [] if retain_attention else None
    n_real = ex.n_real
    for lp in params.layers:
        x, cache = layer_forward(x, masks_per_head, lp, counters, n_real)
        caches.append(cache)
        layer_inputs.append(x)
        if retain_attention:
            attn.append([hc["probs"] for hc in cache["heads"]])
    return EncoderState(
        ex=ex,
        hidden=x,
        layer_inputs=layer_inputs,
        caches=caches,
        masks=[masks_per_head] * max(len(params.layers), 1),
        attention=attn,
    )


def encoder_backward(d_hidden: np.ndarray, state: EncoderState, params: Params) -> Params:
    """Analytic gradients of every parameter given d(loss)/d(hidden)."""
    if not state.caches and params.layers:
        raise ValueError("forward cache missing; rerun encoder_forward")
    grads = zeros_like_params(params)
    dx = d_hidden
    for i in reversed(range(len(params.layers))):
        dx = _layer_backward(dx, state.caches[i], state.masks[i], params.layers[i], grads.layers[i])
    _embed_backward(dx, state.ex, grads)
    return grads


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------

def grad_check(
    loss_fn,
    params: Params,
    grads: Params,
    eps: float = 1e-5,
    samples_per_tensor: int = 4,
    seed: int = 0,
) -> float:
    """Max relative error between analytic gradients and central differences.

    ``loss_fn(params) -> float`` is re-evaluated with single coordinates of
    each tensor perturbed by +-eps.  Error per coordinate is
    |analytic - fd| / max(|analytic|, |fd|, 1e-8).
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    rng = np.random.default_rng(seed)
    grad_by_name = dict(named_tensors(grads))
    worst = 0.0
    for name, arr in named_tensors(params):
        flat = arr.reshape(-1)
        g = grad_by_name[name].reshape(-1)
        k = min(samples_per_tensor, flat.size)
        idx = rng.choice(flat.size, size=k, replace=False)
        for j in idx:
            orig = flat[j]
            flat[j] = orig + eps
            lp = loss_fn(params)
            flat[j] = orig - eps
            lm = loss_fn(params)
            flat[j] = orig
            fd = (lp - lm) / (2.0 * eps)
            err = abs(g[j] - fd) / max(abs(g[j]), abs(fd), 1e-8)
            worst = max(worst, err)
    return worst
