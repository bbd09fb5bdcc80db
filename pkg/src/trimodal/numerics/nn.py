"""Parameter containers, initialization, attention, and transformer layers.

Initialization policy: weights are scaled-uniform with bound 1/sqrt(fan_in),
except the output layer of every residual branch (attention output
projection, second feed-forward layer), which starts at zero so that a
freshly constructed network is exactly the identity on its residual stream.
Training moves those layers off zero immediately because their inputs are
non-zero.  Pass ``zero_residual=False`` to draw them scaled-uniform instead
(useful when probing gradients at a generic parameter point).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .tensor import (
    Tensor,
    add,
    concat,
    gelu,
    layer_norm,
    matmul,
    mul,
    reshape,
    softmax,
    swapaxes,
)

__all__ = [
    "ParamModule",
    "uniform_param",
    "zeros_param",
    "AttentionParams",
    "multi_head_attention",
    "FeedForward",
    "TransformerLayer",
    "SelfAttention",
]


class ConfigurationError(ValueError):
    """Raised when a model is constructed with inconsistent dimensions."""


def uniform_param(rng, shape, fan_in=None):
    """Scaled-uniform parameter: U(-b, b) with b = 1/sqrt(fan_in)."""
    if fan_in is None:
        fan_in = shape[0] if len(shape) > 0 else 1
    bound = 1.0 / math.sqrt(max(fan_in, 1))
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros_param(shape):
    return Tensor(np.zeros(shape), requires_grad=True)


class ParamModule:
    """Base class exposing parameters by insertion-ordered attribute walk.

    Any attribute that is a Tensor, a ParamModule, or a list of either is
    picked up by :meth:`named_parameters`; names are therefore stable across
    runs, which checkpointing and the optimizer rely on.
    """

    def named_parameters(self, prefix=""):
        out = []
        for name, value in self.__dict__.items():
            full = f"{prefix}{name}"
            if isinstance(value, Tensor):
                if value.requires_grad:
                    out.append((full, value))
            elif isinstance(value, ParamModule):
                out.extend(value.named_parameters(prefix=f"{full}."))
            elif isinstance(value, (list, tuple)):
                for i, item in enumerate(value):
                    if isinstance(item, Tensor):
                        if item.requires_grad:
                            out.append((f"{full}.{i}", item))
                    elif isinstance(item, ParamModule):
                        out.extend(item.named_parameters(prefix=f"{full}.{i}."))
        return out

    def parameters(self):
        return [t for _, t in self.named_parameters()]

    def zero_grads(self):
        for _, t in self.named_parameters():
            t.zero_grad()

    def load_state(self, state, prefix=""):
        """Copy arrays from a {name: ndarray} mapping into the parameters."""
        for name, t in self.named_parameters(prefix=prefix):
            if name not in state:
                raise KeyError(f"checkpoint is missing parameter {name!r}")
            arr = np.asarray(state[name], dtype=np.float64)
            if arr.shape != t.data.shape:
                raise ValueError(
                    f"shape mismatch for {name!r}: checkpoint {arr.shape}, model {t.data.shape}"
                )
            t.data = arr.copy()


@dataclass
class AttentionParams:
    """Projection weights for multi-head attention (wo may start at zero)."""

    wq: Tensor
    wk: Tensor
    wv: Tensor
    wo: Tensor
    bq: Tensor
    bk: Tensor
    bv: Tensor
    bo: Tensor

    @classmethod
    def create(cls, rng, dim, zero_residual=True):
        wo = zeros_param((dim, dim)) if zero_residual else uniform_param(rng, (dim, dim))
        return cls(
            wq=uniform_param(rng, (dim, dim)),
            wk=uniform_param(rng, (dim, dim)),
            wv=uniform_param(rng, (dim, dim)),
            wo=wo,
            bq=zeros_param((dim,)),
            bk=zeros_param((dim,)),
            bv=zeros_param((dim,)),
            bo=zeros_param((dim,)),
        )

    def named_parameters(self, prefix=""):
        return [(f"{prefix}{k}", getattr(self, k))
                for k in ("wq", "wk", "wv", "wo", "bq", "bk", "bv", "bo")]


def _split_heads(x, heads):
    # (..., L, D) -> (..., heads, L, D/heads)
    *lead, length, dim = x.shape
    x = reshape(x, (*lead, length, heads, dim // heads))
    return swapaxes(x, -3, -2)


def _merge_heads(x):
    # (..., heads, L, dh) -> (..., L, heads*dh)
    x = swapaxes(x, -3, -2)
    *lead, length, heads, dh = x.shape
    return reshape(x, (*lead, length, heads * dh))


def multi_head_attention(q, k, v, heads, params, mask=None):
    """Scaled dot-product attention with ``heads`` parallel heads.

    q:    (..., Lq, D) queries;  k, v: (..., Lk, D).
    mask: optional boolean ndarray broadcastable to (..., heads, Lq, Lk);
          True marks attendable positions.  Every query row must keep at
          least one attendable key.

    Output has q's shape; each pre-projection row is a convex combination of
    the value projections, so the output is their image under the output
    projection.
    """
    dim = q.shape[-1]
    if dim % heads != 0:
        raise ConfigurationError(f"width {dim} not divisible by {heads} heads")
    dh = dim // heads

    qp = _split_heads(add(matmul(q, params.wq), params.bq), heads)
    kp = _split_heads(add(matmul(k, params.wk), params.bk), heads)
    vp = _split_heads(add(matmul(v, params.wv), params.bv), heads)

    scores = mul(matmul(qp, swapaxes(kp, -1, -2)), 1.0 / math.sqrt(dh))
    if mask is not None:
        bias = np.where(np.asarray(mask, dtype=bool), 0.0, -1e30)
        scores = add(scores, Tensor(bias))
    attn = softmax(scores, axis=-1)
    ctx = _merge_heads(matmul(attn, vp))
    return add(matmul(ctx, params.wo), params.bo)


class FeedForward(ParamModule):
    """Two-layer GELU feed-forward block (the residual branch of a layer)."""

    def __init__(self, rng, dim, hidden=None, zero_residual=True):
        hidden = hidden if hidden is not None else 4 * dim
        self.w1 = uniform_param(rng, (dim, hidden))
        self.b1 = zeros_param((hidden,))
        self.w2 = zeros_param((hidden, dim)) if zero_residual \
            else uniform_param(rng, (hidden, dim))
        self.b2 = zeros_param((dim,))

    def __call__(self, x):
        h = gelu(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


class TransformerLayer(ParamModule):
    """Pre-norm self-attention + feed-forward layer.

    x -> x + attn(LN1(x)) -> (+) ffn(LN2(.))

    The feed-forward hidden width defaults to 2*dim (the encoder stacks are
    bandwidth-bound in float64; the fusion experts keep their own wider
    default).
    """

    def __init__(self, rng, dim, heads, hidden=None, zero_residual=True):
        hidden = hidden if hidden is not None else 2 * dim
        self.dim = dim
        self.heads = heads
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = zeros_param((dim,))
        self.attn = SelfAttention(rng, dim, zero_residual)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = zeros_param((dim,))
        self.ffn = FeedForward(rng, dim, hidden=hidden, zero_residual=zero_residual)

    def __call__(self, x, mask=None):
        normed = layer_norm(x, self.ln1_g, self.ln1_b)
        h = add(x, multi_head_attention(normed, normed, normed, self.heads,
                                        self.attn.params, mask=mask))
        return add(h, self.ffn(layer_norm(h, self.ln2_g, self.ln2_b)))


class SelfAttention(ParamModule):
    """ParamModule wrapper so AttentionParams shows up in parameter walks."""

    def __init__(self, rng, dim, zero_residual=True):
        p = AttentionParams.create(rng, dim, zero_residual=zero_residual)
        self.wq, self.wk, self.wv, self.wo = p.wq, p.wk, p.wv, p.wo
        self.bq, self.bk, self.bv, self.bo = p.bq, p.bk, p.bv, p.bo
        self.params = p


def key_padding_mask(valid):
    """Expand a (..., Lk) key-validity mask for multi_head_attention."""
    valid = np.asarray(valid, dtype=bool)
    return valid[..., None, None, :]
