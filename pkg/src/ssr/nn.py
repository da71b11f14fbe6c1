"""Causal decoder stack in plain NumPy with hand-written backward passes.

The stack is a standard pre-norm Transformer decoder: learned absolute
position embeddings at the input, then per block self-attention and a GELU
feed-forward, each behind a LayerNorm with a residual connection.  The
residual stream is returned unnormalized so outputs can match arbitrary
target rows.  Parameters live in a flat ``{name: array}`` dict so
checkpoints, optimizers, and freeze assertions can address tensors by
name.  Forward passes return a cache that the matching backward pass
consumes; gradients come back in a dict keyed like the parameters.

Reverse-mode derivatives are written out manually for the fixed operator
set (matmul, softmax attention, LayerNorm, GELU); there is no autodiff
framework underneath, which keeps finite-difference checks meaningful.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import erf

from .numerics import NEG_INF, softmax

_LN_EPS = 1e-5
_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


@dataclass
class DecoderConfig:
    """Shape of a decoder stack; `seed` fixes parameter initialization."""

    model_dim: int = 32
    layers: int = 4
    heads: int = 4
    ffn_dim: int = 64
    max_len: int = 512
    seed: int = 0

    def __post_init__(self):
        if self.layers < 1:
            raise ValueError("decoder needs at least one layer")
        if self.model_dim < 1 or self.ffn_dim < 1 or self.heads < 1 or self.max_len < 1:
            raise ValueError("decoder dimensions must be positive")
        if self.model_dim % self.heads != 0:
            raise ValueError(
                f"model_dim {self.model_dim} not divisible by {self.heads} heads"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.heads

    def to_dict(self) -> dict:
        return {
            "model_dim": self.model_dim,
            "layers": self.layers,
            "heads": self.heads,
            "ffn_dim": self.ffn_dim,
            "max_len": self.max_len,
            "seed": self.seed,
        }


def uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    """Uniform(-1/sqrt(fan_in), +1/sqrt(fan_in)) init, reproducible from rng."""
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_decoder_tensors(cfg: DecoderConfig, rng: np.random.Generator, prefix: str = "") -> dict:
    """Fresh decoder parameters, keyed `{prefix}pos.table`, `{prefix}blocks.i...`."""
    h = cfg.model_dim
    tensors: dict[str, np.ndarray] = {}
    tensors[f"{prefix}pos.table"] = uniform_init(rng, (cfg.max_len, h), h)
    for i in range(cfg.layers):
        base = f"{prefix}blocks.{i}"
        tensors[f"{base}.attn_norm.gain"] = np.ones(h)
        tensors[f"{base}.attn_norm.bias"] = np.zeros(h)
        for name in ("wq", "wk", "wv", "wo"):
            tensors[f"{base}.attn.{name}"] = uniform_init(rng, (h, h), h)
        tensors[f"{base}.ffn_norm.gain"] = np.ones(h)
        tensors[f"{base}.ffn_norm.bias"] = np.zeros(h)
        tensors[f"{base}.ffn.w1"] = uniform_init(rng, (h, cfg.ffn_dim), h)
        tensors[f"{base}.ffn.b1"] = np.zeros(cfg.ffn_dim)
        tensors[f"{base}.ffn.w2"] = uniform_init(rng, (cfg.ffn_dim, h), cfg.ffn_dim)
        tensors[f"{base}.ffn.b2"] = np.zeros(h)
    return tensors


# ---------------------------------------------------------------------------
# Primitive layers
# ---------------------------------------------------------------------------


def layer_norm_forward(x, gain, bias):
    mu = x.mean(axis=-1, keepdims=True)
    var = ((x - mu) ** 2).mean(axis=-1, keepdims=True)
    sigma = np.sqrt(var + _LN_EPS)
    xhat = (x - mu) / sigma
    return xhat * gain + bias, (xhat, sigma, gain)


def layer_norm_backward(d_out, cache):
    xhat, sigma, gain = cache
    ghat = d_out * gain
    m1 = ghat.mean(axis=-1, keepdims=True)
    m2 = (ghat * xhat).mean(axis=-1, keepdims=True)
    d_x = (ghat - m1 - xhat * m2) / sigma
    d_gain = (d_out * xhat).sum(axis=0)
    d_bias = d_out.sum(axis=0)
    return d_x, d_gain, d_bias


def gelu(x):
    return 0.5 * x * (1.0 + erf(x * _INV_SQRT2))


def gelu_grad(x):
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))
    pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
    return cdf + x * pdf


def _attention_forward(x, tensors, base, mask, cfg):
    """Masked multi-head self-attention over a (n, H) sequence."""
    n, h_dim = x.shape
    heads, d = cfg.heads, cfg.head_dim
    q = x @ tensors[f"{base}.wq"]
    k = x @ tensors[f"{base}.wk"]
    v = x @ tensors[f"{base}.wv"]
    qh = q.reshape(n, heads, d).transpose(1, 0, 2)
    kh = k.reshape(n, heads, d).transpose(1, 0, 2)
    vh = v.reshape(n, heads, d).transpose(1, 0, 2)
    scale = 1.0 / math.sqrt(d)
    scores = (qh @ kh.transpose(0, 2, 1)) * scale
    scores = np.where(mask[None, :, :], scores, NEG_INF)
    probs = softmax(scores, axis=-1)
    ctx = probs @ vh
    merged = ctx.transpose(1, 0, 2).reshape(n, h_dim)
    out = merged @ tensors[f"{base}.wo"]
    cache = (x, qh, kh, vh, probs, merged)
    return out, cache


def _attention_backward(d_out, cache, tensors, base, cfg):
    x, qh, kh, vh, probs, merged = cache
    n, h_dim = x.shape
    heads, d = cfg.heads, cfg.head_dim
    scale = 1.0 / math.sqrt(d)
    grads = {}

    grads[f"{base}.wo"] = merged.T @ d_out
    d_merged = d_out @ tensors[f"{base}.wo"].T
    d_ctx = d_merged.reshape(n, heads, d).transpose(1, 0, 2)

    d_probs = d_ctx @ vh.transpose(0, 2, 1)
    d_vh = probs.transpose(0, 2, 1) @ d_ctx
    row_dot = (d_probs * probs).sum(axis=-1, keepdims=True)
    d_scores = (d_probs - row_dot) * probs  # masked entries have probs == 0
    d_qh = (d_scores @ kh) * scale
    d_kh = (d_scores.transpose(0, 2, 1) @ qh) * scale

    d_q = d_qh.transpose(1, 0, 2).reshape(n, h_dim)
    d_k = d_kh.transpose(1, 0, 2).reshape(n, h_dim)
    d_v = d_vh.transpose(1, 0, 2).reshape(n, h_dim)
    grads[f"{base}.wq"] = x.T @ d_q
    grads[f"{base}.wk"] = x.T @ d_k
    grads[f"{base}.wv"] = x.T @ d_v
    d_x = (
        d_q @ tensors[f"{base}.wq"].T
        + d_k @ tensors[f"{base}.wk"].T
        + d_v @ tensors[f"{base}.wv"].T
    )
    return d_x, grads


def _ffn_forward(x, tensors, base):
    pre = x @ tensors[f"{base}.w1"] + tensors[f"{base}.b1"]
    act = gelu(pre)
    out = act @ tensors[f"{base}.w2"] + tensors[f"{base}.b2"]
    return out, (x, pre, act)


def _ffn_backward(d_out, cache, tensors, base):
    x, pre, act = cache
    grads = {
        f"{base}.w2": act.T @ d_out,
        f"{base}.b2": d_out.sum(axis=0),
    }
    d_act = d_out @ tensors[f"{base}.w2"].T
    d_pre = d_act * gelu_grad(pre)
    grads[f"{base}.w1"] = x.T @ d_pre
    grads[f"{base}.b1"] = d_pre.sum(axis=0)
    d_x = d_pre @ tensors[f"{base}.w1"].T
    return d_x, grads


# ---------------------------------------------------------------------------
# Full stack
# ---------------------------------------------------------------------------


def decoder_forward_pass(tensors, cfg: DecoderConfig, inputs, mask, prefix: str = ""):
    """Run the stack over (n, H) inputs under a boolean (n, n) mask.

    Returns (outputs, cache); position embeddings are added inside, so
    `inputs` are raw projected features or embedding rows.
    """
    n, h_dim = inputs.shape
    if h_dim != cfg.model_dim:
        raise ValueError(f"input dim {h_dim} does not match model_dim {cfg.model_dim}")
    if n > cfg.max_len:
        raise ValueError(f"sequence of {n} exceeds position table of {cfg.max_len}")
    if mask.shape != (n, n):
        raise ValueError(f"mask shape {mask.shape} does not match sequence length {n}")

    x = inputs + tensors[f"{prefix}pos.table"][:n]
    layer_caches = []
    for i in range(cfg.layers):
        base = f"{prefix}blocks.{i}"
        normed1, ln1_cache = layer_norm_forward(
            x, tensors[f"{base}.attn_norm.gain"], tensors[f"{base}.attn_norm.bias"]
        )
        attn_out, attn_cache = _attention_forward(normed1, tensors, f"{base}.attn", mask, cfg)
        x = x + attn_out
        normed2, ln2_cache = layer_norm_forward(
            x, tensors[f"{base}.ffn_norm.gain"], tensors[f"{base}.ffn_norm.bias"]
        )
        ffn_out, ffn_cache = _ffn_forward(normed2, tensors, f"{base}.ffn")
        x = x + ffn_out
        layer_caches.append((ln1_cache, attn_cache, ln2_cache, ffn_cache))
    cache = (n, layer_caches)
    return x, cache


def decoder_backward_pass(tensors, cfg: DecoderConfig, cache, d_out, prefix: str = ""):
    """Backprop through the stack; returns (d_inputs, grads-by-name)."""
    n, layer_caches = cache
    grads: dict[str, np.ndarray] = {}
    d_x = d_out

    for i in range(cfg.layers - 1, -1, -1):
        base = f"{prefix}blocks.{i}"
        ln1_cache, attn_cache, ln2_cache, ffn_cache = layer_caches[i]

        d_ffn_out = d_x
        d_normed2, ffn_grads = _ffn_backward(d_ffn_out, ffn_cache, tensors, f"{base}.ffn")
        grads.update(ffn_grads)
        d_res2, d_gain2, d_bias2 = layer_norm_backward(d_normed2, ln2_cache)
        grads[f"{base}.ffn_norm.gain"] = d_gain2
        grads[f"{base}.ffn_norm.bias"] = d_bias2
        d_x = d_x + d_res2

        d_attn_out = d_x
        d_normed1, attn_grads = _attention_backward(
            d_attn_out, attn_cache, tensors, f"{base}.attn", cfg
        )
        grads.update(attn_grads)
        d_res1, d_gain1, d_bias1 = layer_norm_backward(d_normed1, ln1_cache)
        grads[f"{base}.attn_norm.gain"] = d_gain1
        grads[f"{base}.attn_norm.bias"] = d_bias1
        d_x = d_x + d_res1

    pos_grad = np.zeros_like(tensors[f"{prefix}pos.table"])
    pos_grad[:n] = d_x
    grads[f"{prefix}pos.table"] = pos_grad
    return d_x, grads


# ---------------------------------------------------------------------------
# Optimizer
# ---------------------------------------------------------------------------


class Adam:
    """Adam with in-place updates on a named tensor dict."""

    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        if lr < 0:
            raise ValueError("learning rate must be non-negative")
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}

    def update(self, tensors: dict, grads: dict) -> None:
        """Apply one Adam step to every tensor that has a gradient."""
        self.step_count += 1
        t = self.step_count
        bias1 = 1.0 - self.beta1**t
        bias2 = 1.0 - self.beta2**t
        for name, g in grads.items():
            p = tensors[name]
            if name not in self._m:
                self._m[name] = np.zeros_like(p)
                self._v[name] = np.zeros_like(p)
            m = self._m[name]
            v = self._v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)


def accumulate_grads(total: dict, part: dict) -> dict:
    """Sum `part` into `total` (missing keys are created)."""
    for name, g in part.items():
        if name in total:
            total[name] = total[name] + g
        else:
            total[name] = g.copy()
    return total


def scale_grads(grads: dict, factor: float) -> dict:
    for name in grads:
        grads[name] = grads[name] * factor
    return grads
