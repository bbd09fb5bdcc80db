"""Fine-tuning heads and task losses.

Survival comes in two flavors: a discrete-time negative log-likelihood over
quantile time bins (hazard = sigmoid of the bin logit) and a Cox partial
likelihood over a linear risk score, with the analytic gradient kept around
as an oracle for the autodiff path.  Classification uses plain softmax
cross-entropy.  Report generation is a small causal decoder that
cross-attends the fused slide tokens.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import (
    AttentionParams,
    ParamModule,
    Tensor,
    add,
    clip_values,
    concat,
    gelu,
    key_padding_mask,
    layer_norm,
    log,
    log_softmax,
    logsumexp,
    matmul,
    mul,
    multi_head_attention,
    reshape,
    sigmoid,
    take_rows,
    tensor,
    tsum,
    uniform_param,
    where,
    zeros_param,
)
from .encoders import CLS_ID, EOS_ID, PAD_ID
from .fusion import MODALITIES

__all__ = [
    "SurvivalLabel", "HazardPrediction", "bin_times",
    "nll_survival_loss", "cox_loss", "cox_gradient_closed_form",
    "cox_gradient_check", "cross_entropy",
    "MLPHead", "PatientHead", "ReportDecoder", "CoxHead",
    "LOGIT_CLAMP",
]

# keeps hazards strictly inside (0, 1) so every log in the NLL is finite
LOGIT_CLAMP = 30.0


@dataclass
class SurvivalLabel:
    time: float
    censored: int   # 1 = censored (no event observed), 0 = event observed
    bin: int = -1

    def __post_init__(self):
        if self.time < 0:
            raise ValueError("survival time must be nonnegative")
        if self.censored not in (0, 1):
            raise ValueError("censorship flag must be 0 or 1")


def bin_times(times, censored=None, n=4):
    """Quantile time bins from the observed (uncensored) event times.

    Returns (edges, bins): ``edges`` are the n-1 internal quantile cuts of
    the uncensored times; every time (censored included) is assigned the
    index of its interval.  Fewer than ``n`` distinct observed times is an
    error: the quantiles would degenerate.
    """
    times = np.asarray(times, dtype=float)
    if censored is None:
        censored = np.zeros(times.shape, dtype=int)
    censored = np.asarray(censored, dtype=int)
    observed = times[censored == 0]
    if np.unique(observed).size < n:
        raise ValueError(f"need at least {n} distinct observed times")
    edges = np.quantile(observed, np.linspace(0, 1, n + 1)[1:-1])
    bins = np.searchsorted(edges, times, side="left")
    return edges, bins


@dataclass
class HazardPrediction:
    """Per-bin hazards and the implied survival curve (numpy side)."""

    logits: np.ndarray            # (n_bins,) or (B, n_bins)

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=float)
        clamped = np.clip(self.logits, -LOGIT_CLAMP, LOGIT_CLAMP)
        self.hazards = 1.0 / (1.0 + np.exp(-clamped))
        self.survival = np.cumprod(1.0 - self.hazards, axis=-1)

    def survival_at(self, j):
        """S(j) = P(survive past bin j); S(-1) = 1 by convention."""
        if j < 0:
            return np.ones(self.logits.shape[:-1])
        return self.survival[..., j]


def nll_survival_loss(logits, bins, censored):
    """Discrete-time survival NLL, batch mean.

    Censored patients pay -log S(y); uncensored pay
    -log S(y-1) - log hazard(y), with S(-1) = 1.  All log-likelihood terms
    enter negated (the loss is minimized).
    """
    bins = np.asarray(bins, dtype=int)
    censored = np.asarray(censored, dtype=int)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.shape[0]))
        bins = bins.reshape(1)
        censored = censored.reshape(1)
    batch, n_bins = logits.shape
    x = clip_values(logits, -LOGIT_CLAMP, LOGIT_CLAMP)
    h = sigmoid(x)
    log_h = log(h)
    log_1mh = log(add(mul(h, -1.0), 1.0))
    # cumulative log-survival via a lower-triangular ones matrix
    tri = np.tril(np.ones((n_bins, n_bins)))
    log_s = matmul(log_1mh, Tensor(tri.T))        # (B, n): column j = log S(j)

    pick = np.zeros((batch, n_bins))
    pick[np.arange(batch), bins] = 1.0
    pick_prev = np.zeros((batch, n_bins))
    prev_ok = bins > 0
    pick_prev[np.flatnonzero(prev_ok), bins[prev_ok] - 1] = 1.0

    log_s_y = tsum(mul(log_s, Tensor(pick)), axis=1)
    log_s_prev = tsum(mul(log_s, Tensor(pick_prev)), axis=1)   # 0 when y = 0
    log_h_y = tsum(mul(log_h, Tensor(pick)), axis=1)

    cen = censored.astype(float)
    per = add(mul(log_s_y, Tensor(-cen)),
              mul(add(log_s_prev, log_h_y), Tensor(-(1.0 - cen))))
    return mul(tsum(per), 1.0 / batch)


def _risk_sets(times, censored):
    times = np.asarray(times, dtype=float)
    censored = np.asarray(censored, dtype=int)
    uncensored = np.flatnonzero(censored == 0)
    masks = [times >= times[u] for u in uncensored]
    return uncensored, masks


def cox_loss(embeddings, theta, times, censored):
    """Negative Cox partial log-likelihood, averaged over observed events.

    Risk sets use the >= convention, so patients tied with the event time
    stay in the denominator.
    """
    uncensored, masks = _risk_sets(times, censored)
    if uncensored.size == 0:
        raise ValueError("Cox loss needs at least one uncensored patient")
    risk = matmul(embeddings, theta)            # (B,)
    total = tensor(0.0)
    for u, mask in zip(uncensored, masks):
        masked = where(mask, risk, Tensor(np.full(risk.shape, -1e30)))
        lse = logsumexp(masked, axis=0)
        total = add(total, add(lse, mul(risk[int(u)], -1.0)))
    return mul(total, 1.0 / uncensored.size)


def cox_gradient_closed_form(embeddings, theta, times, censored):
    """Analytic d(cox_loss)/d(embeddings): delta and risk-set softmax terms."""
    embeddings = np.asarray(embeddings, dtype=float)
    theta = np.asarray(theta, dtype=float)
    uncensored, masks = _risk_sets(times, censored)
    if uncensored.size == 0:
        raise ValueError("Cox loss needs at least one uncensored patient")
    risk = embeddings @ theta
    coeff = np.zeros(embeddings.shape[0])
    coeff[uncensored] -= 1.0
    for mask in masks:
        r = np.where(mask, risk, -np.inf)
        r = r - r.max()
        w = np.exp(r)
        coeff += w / w.sum()
    return np.outer(coeff / uncensored.size, theta)


def cox_gradient_check(embeddings, theta, times, censored):
    """Max abs deviation between autodiff and the closed-form Cox gradient."""
    emb = Tensor(np.asarray(embeddings, dtype=float), requires_grad=True)
    th = Tensor(np.asarray(theta, dtype=float))
    loss = cox_loss(emb, th, times, censored)
    loss.backward()
    closed = cox_gradient_closed_form(embeddings, theta, times, censored)
    return float(np.max(np.abs(emb.grad_array() - closed)))


def cross_entropy(logits, labels):
    """-log softmax at the true class, averaged over the batch."""
    labels = np.asarray(labels, dtype=int).reshape(-1)
    single = logits.ndim == 1
    if single:
        logits = reshape(logits, (1, logits.shape[0]))
    batch, n_cls = logits.shape
    if np.any(labels >= n_cls) or np.any(labels < 0):
        raise ValueError("label outside the class range")
    onehot = np.zeros((batch, n_cls))
    onehot[np.arange(batch), labels] = 1.0
    picked = tsum(mul(log_softmax(logits, axis=-1), Tensor(onehot)))
    return mul(picked, -1.0 / batch)


# -- heads ----------------------------------------------------------------------


class MLPHead(ParamModule):
    """Two-layer perceptron head: in -> hidden (GELU) -> out logits."""

    def __init__(self, rng, in_dim, out_dim, hidden=None):
        hidden = hidden if hidden is not None else in_dim
        self.w1 = uniform_param(rng, (in_dim, hidden))
        self.b1 = zeros_param((hidden,))
        self.w2 = uniform_param(rng, (hidden, out_dim))
        self.b2 = zeros_param((out_dim,))

    def __call__(self, x):
        h = gelu(add(matmul(x, self.w1), self.b1))
        return add(matmul(h, self.w2), self.b2)


class CoxHead(ParamModule):
    """Linear risk parameters over the pooled patient embedding."""

    def __init__(self, rng, in_dim):
        self.theta = uniform_param(rng, (in_dim,), fan_in=in_dim)

    def risk(self, embeddings):
        return matmul(embeddings, self.theta)


class PatientHead(ParamModule):
    """Pools a fused state into one patient embedding of width 2d.

    With two or more modalities each CLS cross-attends over the other
    modalities' tokens (residual, so zero output weights leave the CLS
    unchanged); the re-embedded CLS vectors are concatenated in H,G,T order
    (zeros for absent slots) and projected to 2d.  A single modality skips
    cross-attention and takes its own projection path.
    """

    def __init__(self, rng, dim, heads):
        self.dim = dim
        self.heads = heads
        self.cross = AttentionParamsModule(rng, dim)
        self.join_w = uniform_param(rng, (3 * dim, 2 * dim))
        self.join_b = zeros_param((2 * dim,))
        self.single_w = uniform_param(rng, (dim, 2 * dim))
        self.single_b = zeros_param((2 * dim,))

    def __call__(self, fused):
        present = fused.modality_set.present
        batch = fused.tokens.shape[0]
        if len(present) < 2:
            return add(matmul(fused.cls(present[0]), self.single_w),
                       self.single_b)
        slots = []
        for m in MODALITIES:
            if m not in present:
                slots.append(Tensor(np.zeros((batch, self.dim))))
                continue
            cls_m = fused.cls(m)
            others = [o for o in present if o != m]
            mem = concat([fused.span_tokens(o) for o in others], axis=1)
            mem_mask = np.concatenate([fused.span_mask(o) for o in others],
                                      axis=1)
            q = reshape(cls_m, (batch, 1, self.dim))
            att = multi_head_attention(q, mem, mem, self.heads,
                                       self.cross.params,
                                       mask=key_padding_mask(mem_mask))
            slots.append(add(cls_m, reshape(att, (batch, self.dim))))
        joined = concat(slots, axis=1)
        return add(matmul(joined, self.join_w), self.join_b)


class AttentionParamsModule(ParamModule):
    """Attention parameter bundle registered for checkpointing."""

    def __init__(self, rng, dim, zero_residual=False):
        p = AttentionParams.create(rng, dim, zero_residual=zero_residual)
        self.wq, self.wk, self.wv, self.wo = p.wq, p.wk, p.wv, p.wo
        self.bq, self.bk, self.bv, self.bo = p.bq, p.bk, p.bv, p.bo
        self.params = p


class _DecoderLayer(ParamModule):
    def __init__(self, rng, dim, heads, zero_residual=True):
        self.dim = dim
        self.heads = heads
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = zeros_param((dim,))
        self.self_attn = AttentionParamsModule(rng, dim, zero_residual)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = zeros_param((dim,))
        self.cross_attn = AttentionParamsModule(rng, dim, zero_residual)
        self.ln3_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln3_b = zeros_param((dim,))
        from .numerics import FeedForward
        self.ffn = FeedForward(rng, dim, zero_residual=zero_residual)

    def __call__(self, x, memory, causal_mask, mem_mask=None):
        normed = layer_norm(x, self.ln1_g, self.ln1_b)
        x = add(x, multi_head_attention(normed, normed, normed, self.heads,
                                        self.self_attn.params,
                                        mask=causal_mask))
        normed = layer_norm(x, self.ln2_g, self.ln2_b)
        x = add(x, multi_head_attention(normed, memory, memory, self.heads,
                                        self.cross_attn.params, mask=mem_mask))
        return add(x, self.ffn(layer_norm(x, self.ln3_g, self.ln3_b)))


class ReportDecoder(ParamModule):
    """Small causal decoder over the report vocabulary.

    Teacher-forced training predicts token t+1 from tokens <= t while
    cross-attending the fused slide tokens; generation is greedy and stops
    at the end token or ``max_len``.
    """

    def __init__(self, rng, vocab_size, max_len, dim, heads, depth=2,
                 zero_residual=True):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dim = dim
        self.tok_embed = uniform_param(rng, (vocab_size, dim), fan_in=dim)
        self.pos_embed = uniform_param(rng, (max_len, dim), fan_in=dim)
        self.layers = [_DecoderLayer(rng, dim, heads, zero_residual)
                       for _ in range(depth)]
        self.out_w = uniform_param(rng, (dim, vocab_size))
        self.out_b = zeros_param((vocab_size,))

    def logits(self, input_ids, memory, mem_mask=None):
        """(B, L) ids -> (B, L, vocab) next-token logits."""
        ids = np.asarray(input_ids, dtype=int)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        batch, length = ids.shape
        if length > self.max_len:
            raise ValueError("decoder input longer than its position table")
        x = add(take_rows(self.tok_embed, ids),
                reshape(self.pos_embed[:length, :], (1, length, self.dim)))
        causal = np.tril(np.ones((length, length), dtype=bool))
        mmask = key_padding_mask(mem_mask) if mem_mask is not None else None
        for layer in self.layers:
            x = layer(x, memory, causal_mask=causal, mem_mask=mmask)
        out = add(matmul(x, self.out_w), self.out_b)
        return reshape(out, (length, self.vocab_size)) if single else out

    def generate(self, memory, max_len=None, mem_mask=None):
        """Greedy decode; returns generated ids, end token excluded."""
        from .numerics import no_grad

        limit = min(max_len if max_len is not None else self.max_len,
                    self.max_len - 1)
        ids = [CLS_ID]
        out = []
        with no_grad():
            for _ in range(limit):
                logits = self.logits(np.array(ids), memory, mem_mask=mem_mask)
                nxt = int(np.argmax(logits.data[-1]))
                if nxt == EOS_ID:
                    break
                out.append(nxt)
                ids.append(nxt)
        return np.array(out, dtype=int)

    def teacher_forced_loss(self, token_ids, memory, mem_mask=None):
        """Cross-entropy of next-token prediction over real target positions."""
        ids = np.asarray(token_ids, dtype=int)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        inputs, targets = ids[:, :-1], ids[:, 1:]
        logits = self.logits(inputs, memory, mem_mask=mem_mask)
        real = targets != PAD_ID
        rows = np.flatnonzero(real.reshape(-1))
        if rows.size == 0:
            raise ValueError("no real target tokens to train on")
        flat = reshape(logits, (-1, self.vocab_size))
        picked = take_rows(flat, rows)
        return cross_entropy(picked, targets.reshape(-1)[rows])
