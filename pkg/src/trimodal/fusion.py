"""Universal sequence transformer over any subset of the three modalities.

Each block runs two stages:

1. modality-shared self-attention over every present token (plus residual);
2. modality-specific decoupling: each present modality's span goes through
   its own expert feed-forward (plus residual).  Absent modalities
   contribute no tokens and their experts are never evaluated, so outputs
   and gradients on a subset are pure functions of that subset.

Assembly concatenates the available modality sequences in slide, gene,
text order and adds a learned modality-type embedding to every token (the
shared attention otherwise has no signal for which distribution a token
came from; a flag disables this for ablation).  Layer norms sit before the
attention and before the experts (pre-norm), so zeroing the attention
output projection and every expert output layer makes the whole stack an
exact identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .numerics import (
    FeedForward,
    ParamModule,
    SelfAttention,
    Tensor,
    add,
    broadcast_to,
    concat,
    key_padding_mask,
    layer_norm,
    multi_head_attention,
    reshape,
    zeros_param,
)
from .encoders import GeneEncoding, SlideEncoding, TextEncoding

__all__ = ["MODALITIES", "ModalitySet", "FusedState", "FusionBlock",
           "UniversalFusion", "assemble_sequence", "fuse"]

MODALITIES = ("H", "G", "T")


@dataclass
class ModalitySet:
    """Which modalities are present and where their tokens live.

    Spans are (modality, start, length) in H, G, T order; they are disjoint
    and cover the fused sequence.  Each present modality's CLS is the first
    row of its span.
    """

    spans: list

    @property
    def present(self):
        return tuple(m for m, _, _ in self.spans)

    def span(self, modality):
        for m, start, length in self.spans:
            if m == modality:
                return start, length
        raise KeyError(f"modality {modality!r} not present")

    def cls_index(self, modality):
        return self.span(modality)[0]

    @property
    def length(self):
        return sum(length for _, _, length in self.spans)


@dataclass
class FusedState:
    tokens: Tensor          # (B, L, d)
    modality_set: ModalitySet
    key_mask: np.ndarray    # (B, L); False = padding (from text)

    def cls(self, modality):
        """(B, d) CLS readout for a present modality."""
        return self.tokens[:, self.modality_set.cls_index(modality), :]

    def span_tokens(self, modality):
        start, length = self.modality_set.span(modality)
        return self.tokens[:, start:start + length, :]

    def span_mask(self, modality):
        start, length = self.modality_set.span(modality)
        return self.key_mask[:, start:start + length]


def assemble_sequence(slide=None, genes=None, text=None, type_embed=None):
    """Concatenate available modality sequences into one fused state.

    slide: SlideEncoding, genes: GeneEncoding, text: TextEncoding; at least
    one must be given.  ``type_embed`` is an optional (3, d) Tensor of
    learned modality-type embeddings added to every token of each span.
    """
    if slide is None and genes is None and text is None:
        raise ValueError("cannot assemble a sequence with zero modalities")
    pieces, masks, spans = [], [], []
    offset = 0

    def push(code, seq, mask):
        nonlocal offset
        batch, length, dim = seq.shape
        if type_embed is not None:
            row = type_embed[MODALITIES.index(code), :]
            seq = add(seq, reshape(row, (1, 1, dim)))
        pieces.append(seq)
        masks.append(mask if mask is not None else np.ones((batch, length), dtype=bool))
        spans.append((code, offset, length))
        offset += length

    if slide is not None:
        seq = concat([reshape(slide.cls, (slide.cls.shape[0], 1, slide.cls.shape[1])),
                      slide.tokens], axis=1)
        push("H", seq, None)
    if genes is not None:
        seq = concat([reshape(genes.cls, (genes.cls.shape[0], 1, genes.cls.shape[1])),
                      genes.tokens], axis=1)
        push("G", seq, None)
    if text is not None:
        push("T", text.tokens, text.real_mask.copy())

    tokens = concat(pieces, axis=1)
    mask = np.concatenate(masks, axis=1)
    return FusedState(tokens=tokens, modality_set=ModalitySet(spans), key_mask=mask)


class FusionBlock(ParamModule):
    """One shared-attention + modality-expert block (pre-norm, residual)."""

    def __init__(self, rng, dim, heads, zero_residual=True):
        self.dim = dim
        self.heads = heads
        self.ln1_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln1_b = zeros_param((dim,))
        self.attn = SelfAttention(rng, dim, zero_residual)
        self.ln2_g = Tensor(np.ones(dim), requires_grad=True)
        self.ln2_b = zeros_param((dim,))
        self.expert_h = FeedForward(rng, dim, zero_residual=zero_residual)
        self.expert_g = FeedForward(rng, dim, zero_residual=zero_residual)
        self.expert_t = FeedForward(rng, dim, zero_residual=zero_residual)

    def expert(self, modality):
        return {"H": self.expert_h, "G": self.expert_g, "T": self.expert_t}[modality]

    def __call__(self, state):
        x = state.tokens
        normed = layer_norm(x, self.ln1_g, self.ln1_b)
        shared = add(x, multi_head_attention(
            normed, normed, normed, self.heads, self.attn.params,
            mask=key_padding_mask(state.key_mask)))
        segments = []
        for modality, start, length in state.modality_set.spans:
            seg = shared[:, start:start + length, :]
            segments.append(add(seg, self.expert(modality)(
                layer_norm(seg, self.ln2_g, self.ln2_b))))
        return FusedState(tokens=concat(segments, axis=1),
                          modality_set=state.modality_set,
                          key_mask=state.key_mask)


class UniversalFusion(ParamModule):
    """Modality-type embeddings plus a stack of fusion blocks."""

    def __init__(self, rng, dim, heads, n_blocks, zero_residual=True,
                 use_type_embeddings=True):
        self.dim = dim
        self.use_type_embeddings = use_type_embeddings
        bound = 1.0 / np.sqrt(dim)
        self.type_embed = Tensor(rng.uniform(-bound, bound, size=(3, dim)),
                                 requires_grad=True)
        self.blocks = [FusionBlock(rng, dim, heads, zero_residual=zero_residual)
                       for _ in range(n_blocks)]

    def assemble(self, slide=None, genes=None, text=None):
        te = self.type_embed if self.use_type_embeddings else None
        return assemble_sequence(slide=slide, genes=genes, text=text, type_embed=te)

    def __call__(self, state, n_blocks=None):
        return fuse(state, self.blocks, n_blocks=n_blocks)


def fuse(state, blocks, n_blocks=None):
    """Run ``n_blocks`` fusion blocks (all by default); returns the final state.

    CLS readouts per present modality are available via ``state.cls``.
    """
    n = len(blocks) if n_blocks is None else n_blocks
    if n < 1:
        raise ValueError("need at least one fusion block")
    for block in blocks[:n]:
        state = block(state)
    return state
