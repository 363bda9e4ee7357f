"""Post-layer-norm transformer with hand-written backward passes.

Every layer is a pair of functions: ``*_forward`` returns the output and a
cache, ``*_backward`` consumes the upstream gradient and the cache and writes
parameter gradients into a dict. Arrays are (batch, time, features).
"""

from __future__ import annotations

import warnings

import numpy as np

from ..temporal import EncodingSpec, embed_sequence
from .config import ModelConfig

LN_EPS = 1e-5


# -- primitive layers ----------------------------------------------------------

def linear_forward(x, w, b):
    return x @ w + b, x


def linear_backward(dy, x, w, grads, wname, bname):
    grads[wname] += x.reshape(-1, x.shape[-1]).T @ dy.reshape(-1, dy.shape[-1])
    grads[bname] += dy.reshape(-1, dy.shape[-1]).sum(0)
    return dy @ w.T


def layer_norm_forward(x, gamma, beta):
    mu = x.mean(-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * inv
    return gamma * xhat + beta, (xhat, inv, gamma)


def layer_norm_backward(dy, cache, grads, gname, bname):
    xhat, inv, gamma = cache
    d = dy.shape[-1]
    grads[gname] += (dy * xhat).reshape(-1, d).sum(0)
    grads[bname] += dy.reshape(-1, d).sum(0)
    dxhat = dy * gamma
    return inv * (dxhat - dxhat.mean(-1, keepdims=True)
                  - xhat * (dxhat * xhat).mean(-1, keepdims=True))


def dropout_forward(x, p, rng):
    if p <= 0.0 or rng is None:
        return x, None
    keep = (rng.random(x.shape) >= p).astype(x.dtype) / x.dtype.type(1.0 - p)
    return x * keep, keep


def dropout_backward(dy, keep):
    return dy if keep is None else dy * keep


def causal_mask(T: int) -> np.ndarray:
    return np.tril(np.ones((T, T), dtype=bool))


def attention_forward(x, params, prefix, n_heads, causal):
    B, T, D = x.shape
    dh = D // n_heads
    q, _ = linear_forward(x, params[prefix + "w_q"], params[prefix + "b_q"])
    k, _ = linear_forward(x, params[prefix + "w_k"], params[prefix + "b_k"])
    v, _ = linear_forward(x, params[prefix + "w_v"], params[prefix + "b_v"])
    split = lambda a: a.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    q, k, v = split(q), split(k), split(v)
    scale = x.dtype.type(1.0 / np.sqrt(dh))
    s = (q @ k.transpose(0, 1, 3, 2)) * scale
    if causal:
        s = np.where(causal_mask(T), s, -np.inf)
    s = s - s.max(-1, keepdims=True)
    e = np.exp(s)
    p = e / e.sum(-1, keepdims=True)
    o = (p @ v).transpose(0, 2, 1, 3).reshape(B, T, D)
    out, _ = linear_forward(o, params[prefix + "w_o"], params[prefix + "b_o"])
    return out, (x, q, k, v, p, o, scale)


def attention_backward(dout, cache, params, grads, prefix, n_heads):
    x, q, k, v, p, o, scale = cache
    B, T, D = x.shape
    dh = D // n_heads
    do = linear_backward(dout, o, params[prefix + "w_o"], grads, prefix + "w_o", prefix + "b_o")
    do = do.reshape(B, T, n_heads, dh).transpose(0, 2, 1, 3)
    dp = do @ v.transpose(0, 1, 3, 2)
    dv = p.transpose(0, 1, 3, 2) @ do
    ds = p * (dp - (dp * p).sum(-1, keepdims=True))
    ds *= scale
    dq = ds @ k
    dk = ds.transpose(0, 1, 3, 2) @ q
    merge = lambda a: a.transpose(0, 2, 1, 3).reshape(B, T, D)
    dx = linear_backward(merge(dq), x, params[prefix + "w_q"], grads, prefix + "w_q", prefix + "b_q")
    dx += linear_backward(merge(dk), x, params[prefix + "w_k"], grads, prefix + "w_k", prefix + "b_k")
    dx += linear_backward(merge(dv), x, params[prefix + "w_v"], grads, prefix + "w_v", prefix + "b_v")
    return dx


def block_forward(x, params, prefix, n_heads, causal, dropout, rng):
    a, attn_cache = attention_forward(x, params, prefix + "attn.", n_heads, causal)
    a, drop1 = dropout_forward(a, dropout, rng)
    h, ln1 = layer_norm_forward(x + a, params[prefix + "ln1.gamma"], params[prefix + "ln1.beta"])
    z, _ = linear_forward(h, params[prefix + "ffn.w1"], params[prefix + "ffn.b1"])
    r = np.maximum(z, 0)
    f, _ = linear_forward(r, params[prefix + "ffn.w2"], params[prefix + "ffn.b2"])
    f, drop2 = dropout_forward(f, dropout, rng)
    out, ln2 = layer_norm_forward(h + f, params[prefix + "ln2.gamma"], params[prefix + "ln2.beta"])
    return out, (attn_cache, drop1, h, ln1, z, r, drop2, ln2)


def block_backward(dout, cache, params, grads, prefix, n_heads):
    attn_cache, drop1, h, ln1, z, r, drop2, ln2 = cache
    d = layer_norm_backward(dout, ln2, grads, prefix + "ln2.gamma", prefix + "ln2.beta")
    dh = d.copy()
    df = dropout_backward(d, drop2)
    dr = linear_backward(df, r, params[prefix + "ffn.w2"], grads, prefix + "ffn.w2", prefix + "ffn.b2")
    dz = dr * (z > 0)
    dh += linear_backward(dz, h, params[prefix + "ffn.w1"], grads, prefix + "ffn.w1", prefix + "ffn.b1")
    d = layer_norm_backward(dh, ln1, grads, prefix + "ln1.gamma", prefix + "ln1.beta")
    da = dropout_backward(d, drop1)
    return d + attention_backward(da, attn_cache, params, grads, prefix + "attn.", n_heads)


# -- loss --------------------------------------------------------------------

def cross_entropy(logits, targets, loss_mask, smoothing=0.0):
    """Label-smoothed cross-entropy averaged over mask-true positions.

    Returns ``(loss, dlogits, n_scored)``. Only mask-true rows are read, so
    targets at mask-false positions never influence the result.
    """
    mask = np.asarray(loss_mask, dtype=bool)
    targets = np.asarray(targets)
    dlogits = np.zeros_like(logits)
    n = int(mask.sum())
    if n == 0:
        return 0.0, dlogits, 0
    sel = logits[mask].astype(np.float64)
    tgt = targets[mask].astype(np.int64)
    V = sel.shape[-1]
    if tgt.min() < 0 or tgt.max() >= V:
        raise ValueError("scored target outside the output vocabulary")
    m = sel.max(-1, keepdims=True)
    logz = m + np.log(np.exp(sel - m).sum(-1, keepdims=True))
    logp = sel - logz
    rows = np.arange(n)
    nll = -logp[rows, tgt]
    if smoothing:
        per = (1.0 - smoothing) * nll - smoothing * logp.mean(-1)
    else:
        per = nll
    loss = float(per.sum() / n)
    q = np.full_like(logp, smoothing / V)
    q[rows, tgt] += 1.0 - smoothing
    dlogits[mask] = ((np.exp(logp) - q) / n).astype(logits.dtype)
    return loss, dlogits, n


def loss(logits, targets, loss_mask, smoothing=0.0) -> float:
    value, _, n = cross_entropy(logits, targets, loss_mask, smoothing)
    if n == 0:
        warnings.warn("loss mask is all false; loss defined as 0", RuntimeWarning, stacklevel=2)
    return value


# -- model ---------------------------------------------------------------------

def init_params(config: ModelConfig, rng: np.random.Generator, dtype=np.float32) -> dict:
    D, H, V = config.D, config.H, config.V_out
    s = config.init_scale

    def uni(shape, fan_in):
        bound = s / np.sqrt(fan_in)
        return rng.uniform(-bound, bound, shape).astype(dtype)

    std = config.embedding_init_std or 1.0 / np.sqrt(config.D)
    e = np.sqrt(3.0) * std
    params = {"spatial_embedding": rng.uniform(-e, e, (config.vocab_size, D)).astype(dtype)}
    for l in range(config.L):
        p = f"layers.{l}."
        for name in ("q", "k", "v", "o"):
            params[p + f"attn.w_{name}"] = uni((D, D), D)
            params[p + f"attn.b_{name}"] = np.zeros(D, dtype)
        params[p + "ln1.gamma"] = np.ones(D, dtype)
        params[p + "ln1.beta"] = np.zeros(D, dtype)
        params[p + "ffn.w1"] = uni((D, H), D)
        params[p + "ffn.b1"] = np.zeros(H, dtype)
        params[p + "ffn.w2"] = uni((H, D), H)
        params[p + "ffn.b2"] = np.zeros(D, dtype)
        params[p + "ln2.gamma"] = np.ones(D, dtype)
        params[p + "ln2.beta"] = np.zeros(D, dtype)
    params["head.w"] = uni((D, V), D)
    params["head.b"] = np.zeros(V, dtype)
    return params


class PMTModel:
    """Spatial embedding + fixed temporal encoding + transformer stack + region head."""

    def __init__(self, config: ModelConfig, encoding: EncodingSpec | None = None,
                 params: dict | None = None, dtype=np.float32, seed: int = 0):
        self.config = config
        self.encoding = encoding or EncodingSpec(config.D)
        if self.encoding.D != config.D:
            raise ValueError("encoding dimension does not match model D")
        self.dtype = np.dtype(dtype)
        if params is None:
            params = init_params(config, np.random.default_rng(seed), self.dtype)
        else:
            expected = init_params(config, np.random.default_rng(0), self.dtype)
            if set(params) != set(expected):
                raise ValueError("parameter names do not match the model config")
            for name, arr in expected.items():
                if params[name].shape != arr.shape:
                    raise ValueError(f"parameter {name} has shape {params[name].shape}, "
                                     f"expected {arr.shape}")
            params = {k: np.array(params[k], dtype=self.dtype) for k in expected}
        self.params = params
        self._cache = None

    @property
    def n_regions(self) -> int:
        return self.config.V_out

    def astype(self, dtype) -> "PMTModel":
        return PMTModel(self.config, self.encoding, {k: v.astype(dtype) for k, v in self.params.items()},
                        dtype=dtype)

    def zero_grads(self) -> dict:
        return {k: np.zeros_like(v) for k, v in self.params.items()}

    # embedding ------------------------------------------------------------
    def embed(self, tokens, window_indices) -> np.ndarray:
        return embed_sequence(tokens, window_indices, self.params["spatial_embedding"], self.encoding)

    # transformer ------------------------------------------------------------
    def forward(self, embedded, causal=True, train_mode=False, rng=None) -> np.ndarray:
        """Logits (B, T, V_out) for embedded input (B, T, D) or (T, D)."""
        x = np.asarray(embedded)
        squeeze = x.ndim == 2
        if squeeze:
            x = x[None]
        if x.ndim != 3 or x.shape[-1] != self.config.D:
            raise ValueError(f"embedded input must have last dimension {self.config.D}, got {x.shape}")
        x = x.astype(self.dtype, copy=False)
        p = self.config.dropout if train_mode else 0.0
        if train_mode and p > 0 and rng is None:
            raise ValueError("train_mode with dropout requires an rng")
        x, drop0 = dropout_forward(x, p, rng)
        blocks = []
        for l in range(self.config.L):
            x, c = block_forward(x, self.params, f"layers.{l}.", self.config.A, causal, p, rng)
            blocks.append(c)
        logits, _ = linear_forward(x, self.params["head.w"], self.params["head.b"])
        self._cache = (drop0, blocks, x, squeeze)
        return logits[0] if squeeze else logits

    def backward(self, dlogits, grads: dict | None = None):
        """Backpropagate through the last forward; returns (d_embedded, grads)."""
        if self._cache is None:
            raise RuntimeError("backward called before forward")
        drop0, blocks, x, squeeze = self._cache
        grads = self.zero_grads() if grads is None else grads
        d = np.asarray(dlogits, dtype=self.dtype)
        if squeeze:
            d = d[None]
        d = linear_backward(d, x, self.params["head.w"], grads, "head.w", "head.b")
        for l in reversed(range(self.config.L)):
            d = block_backward(d, blocks[l], self.params, grads, f"layers.{l}.", self.config.A)
        d = dropout_backward(d, drop0)
        return (d[0] if squeeze else d), grads

    def attention_weights(self) -> list[np.ndarray]:
        """Per-layer (B, A, T, T) attention probabilities from the last forward."""
        if self._cache is None:
            return []
        return [blk[0][4] for blk in self._cache[1]]

    # token-level conveniences -----------------------------------------------
    def logits(self, tokens, window_indices, causal=True, train_mode=False, rng=None):
        return self.forward(self.embed(tokens, window_indices), causal, train_mode, rng)

    def loss_and_grads(self, tokens, window_indices, targets, loss_mask, causal=True,
                       smoothing=0.0, train_mode=False, rng=None):
        """Full forward/backward including the spatial embedding table.

        Returns ``(loss, grads, n_scored)``.
        """
        tokens = np.asarray(tokens, dtype=np.int64)
        logits = self.logits(tokens, window_indices, causal, train_mode, rng)
        value, dlogits, n = cross_entropy(logits, targets, loss_mask, smoothing)
        grads = self.zero_grads()
        if n == 0:
            return value, grads, 0
        dx, grads = self.backward(dlogits, grads)
        table = grads["spatial_embedding"]
        np.add.at(table, tokens.reshape(-1), dx.reshape(-1, self.config.D))
        return value, grads, n

    def n_parameters(self) -> int:
        return int(sum(v.size for v in self.params.values()))


def forward(model: PMTModel, embedded, causal=True, train_mode=False, rng=None):
    return model.forward(embedded, causal, train_mode, rng)

