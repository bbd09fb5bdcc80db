"""Modality encoders: slide feature bags, gene profiles, and report tokens.

Each encoder maps its raw modality into the shared width ``d`` and produces
a learned CLS summary plus an aggregated token sequence:

* slides: per-patch projection + transformer, then the patch tokens are
  laid out on a padded square grid and averaged over non-overlapping
  ``a x b`` regions (4x compression by default);
* genes: identity+bin embeddings + transformer, then mean-pooled over the
  pathway partition (one token per pathway, plus a catch-all for genes the
  partition does not cover);
* text: token+position embeddings + transformer with pad masking; the CLS
  sits at position 0 and the sequence is kept at full length.

Encoders accept a single sample (2-D input) or a batch (3-D input) and
return matching shapes.  They use no positional signal except in the text
encoder, so slide/gene token outputs are permutation-equivariant.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    Tensor,
    ParamModule,
    TransformerLayer,
    add,
    broadcast_to,
    concat,
    key_padding_mask,
    matmul,
    reshape,
    take_rows,
    tensor,
    uniform_param,
    where,
    zeros_param,
)

__all__ = [
    "PAD_ID", "CLS_ID", "MASK_ID", "EOS_ID", "WORD_ID_BASE",
    "FeatureBag", "GeneProfile", "TokenSequence",
    "SlideEncoding", "GeneEncoding", "TextEncoding", "Grid",
    "SlideEncoder", "GeneEncoder", "TextEncoder",
    "reshape_to_grid", "region_structure", "region_aggregate",
    "expression_bin_edges", "discretize_expression",
    "pathway_groups", "pathway_aggregate",
    "load_pathway_partition", "save_pathway_partition",
]

# Shared vocabulary layout for report tokens.
PAD_ID = 0
CLS_ID = 1
MASK_ID = 2
EOS_ID = 3
WORD_ID_BASE = 4


# -- raw modality containers -----------------------------------------------


@dataclass
class FeatureBag:
    """Serialized slide: one feature vector per patch, shape (N_h, d_w)."""

    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise ValueError("feature bag must be a non-empty (N_h, d_w) matrix")
        if not np.all(np.isfinite(self.features)):
            raise ValueError("feature bag contains non-finite values")

    @property
    def n_patches(self):
        return self.features.shape[0]


@dataclass
class GeneProfile:
    """Nonnegative expression vector plus a disjoint pathway partition."""

    values: np.ndarray
    pathway_partition: list = field(default_factory=list)
    gene_ids: np.ndarray | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1 or self.values.shape[0] < 1:
            raise ValueError("gene profile must be a non-empty vector")
        if np.any(self.values < 0):
            raise ValueError("expression values must be nonnegative")
        n = self.values.shape[0]
        seen = set()
        for group in self.pathway_partition:
            for idx in np.asarray(group, dtype=int):
                if idx < 0 or idx >= n:
                    raise ValueError(f"pathway index {idx} out of range for {n} genes")
                if int(idx) in seen:
                    raise ValueError(f"gene {idx} appears in more than one pathway")
                seen.add(int(idx))
        if self.gene_ids is None:
            self.gene_ids = np.arange(n)
        else:
            self.gene_ids = np.asarray(self.gene_ids, dtype=int)

    @property
    def n_genes(self):
        return self.values.shape[0]


@dataclass
class TokenSequence:
    """Report token ids, padded/truncated to a fixed length; row 0 is CLS."""

    ids: np.ndarray
    pad_mask: np.ndarray | None = None  # True = real token

    def __post_init__(self):
        self.ids = np.asarray(self.ids, dtype=int)
        if self.ids.ndim != 1 or self.ids.shape[0] < 1:
            raise ValueError("token sequence must be a non-empty id vector")
        if self.ids[0] != CLS_ID:
            raise ValueError("token sequence must start with the CLS id")
        if self.pad_mask is None:
            self.pad_mask = self.ids != PAD_ID
        else:
            self.pad_mask = np.asarray(self.pad_mask, dtype=bool)
            if self.pad_mask.shape != self.ids.shape:
                raise ValueError("pad mask length must match ids")


# -- encoder outputs ---------------------------------------------------------


@dataclass
class SlideEncoding:
    cls: Tensor          # (B, d)
    tokens: Tensor       # (B, floor(N_h/(a*b)), d) region tokens
    grid_side: int
    pad_rows: np.ndarray | None = None  # rows that had to be zero-padded


@dataclass
class GeneEncoding:
    cls: Tensor          # (B, d)
    tokens: Tensor       # (B, N_p, d) pathway tokens


@dataclass
class TextEncoding:
    tokens: Tensor       # (B, N_t, d); row 0 is the CLS output
    real_mask: np.ndarray  # (B, N_t)

    @property
    def cls(self):
        return self.tokens[:, 0, :]


@dataclass
class Grid:
    """Square spatial layout of slide tokens; cells >= n_real are padding."""

    tokens: Tensor       # (B, side, side, d)
    side: int
    n_real: int


# -- grid / region machinery -------------------------------------------------


def reshape_to_grid(tokens):
    """Lay out N_h tokens row-major on a ceil(sqrt(N_h)) square with padding."""
    single = tokens.ndim == 2
    if single:
        tokens = reshape(tokens, (1,) + tuple(tokens.shape))
    batch, n_h, dim = tokens.shape
    side = math.isqrt(n_h)
    if side * side < n_h:
        side += 1
    n_pad = side * side - n_h
    if n_pad:
        pad = Tensor(np.zeros((batch, n_pad, dim)))
        tokens = concat([tokens, pad], axis=1)
    return Grid(reshape(tokens, (batch, side, side, dim)), side, n_h)


def region_structure(n_h, a, b):
    """Cell-index groups for the a x b region tiling of the padded grid.

    Returns (side, groups): groups lists, per kept region in row-major
    order, the real (non-padding) cell indices it covers.  Regions that are
    entirely padding are dropped and the list is truncated to exactly
    n_h // (a*b) entries, the contracted output length.
    """
    if a < 1 or b < 1:
        raise ValueError("region extents must be >= 1")
    if a * b > n_h:
        raise ValueError(f"{a}x{b} regions over {n_h} patches would yield zero tokens")
    side = math.isqrt(n_h)
    if side * side < n_h:
        side += 1
    if a > side or b > side:
        raise ValueError(f"region {a}x{b} exceeds grid side {side}")
    target = n_h // (a * b)
    groups = []
    for ri in range(0, side, a):
        for cj in range(0, side, b):
            cells = [r * side + c
                     for r in range(ri, min(ri + a, side))
                     for c in range(cj, min(cj + b, side))
                     if r * side + c < n_h]
            if cells:
                groups.append(np.asarray(cells, dtype=int))
    return side, groups[:target]


def region_aggregate(grid, a, b):
    """Mean-pool each a x b region over its real cells.

    Output is (B, n_real // (a*b), d); the row count honors the contract
    even when the tiling is ragged.  If fewer populated regions exist than
    the contract requires (not reachable for valid inputs, kept defensive),
    the tail is zero-filled and flagged via the returned pad_rows mask.
    """
    side, groups = region_structure(grid.n_real, a, b)
    target = grid.n_real // (a * b)
    batch, _, _, dim = grid.tokens.shape
    weights = np.zeros((target, side * side))
    pad_rows = np.zeros(target, dtype=bool)
    for r in range(target):
        if r < len(groups):
            weights[r, groups[r]] = 1.0 / len(groups[r])
        else:
            pad_rows[r] = True
    flat = reshape(grid.tokens, (batch, side * side, dim))
    pooled = matmul(Tensor(weights), flat)
    return pooled, (pad_rows if pad_rows.any() else None)


# -- expression binning --------------------------------------------------------


def expression_bin_edges(values, bins=7):
    """Internal quantile edges over the positive expression values.

    Bin 0 is reserved for zeros; positives spread over bins 1..bins-1.
    Degenerate cohorts (no positives, or a single constant value) get no
    edges, which sends everything to bin 0.
    """
    values = np.asarray(values, dtype=np.float64)
    if np.any(values < 0):
        raise ValueError("expression values must be nonnegative")
    if values.size == 0 or np.all(values == values.flat[0]):
        return np.array([])
    positive = values[values > 0]
    if positive.size == 0:
        return np.array([])
    qs = np.linspace(0.0, 1.0, bins)[1:-1]
    return np.quantile(positive, qs)


def discretize_expression(values, bins=7, edges=None):
    """Map nonnegative expression to monotone bin ids in [0, bins)."""
    values = np.asarray(values, dtype=np.float64)
    if edges is None:
        edges = expression_bin_edges(values, bins=bins)
    out = np.zeros(values.shape, dtype=int)
    pos = values > 0
    if edges.size:
        out[pos] = 1 + np.searchsorted(edges, values[pos], side="right").astype(int)
        np.minimum(out, bins - 1, out=out)
    return out


# -- pathway machinery ---------------------------------------------------------


def pathway_groups(partition, n_genes):
    """Validated pathway index groups, with a catch-all for unassigned genes."""
    if n_genes < 1:
        raise ValueError("need at least one gene")
    groups = []
    covered = np.zeros(n_genes, dtype=bool)
    for raw in partition:
        idx = np.asarray(raw, dtype=int)
        if idx.size == 0:
            raise ValueError("empty pathway in partition")
        if covered[idx].any():
            raise ValueError("pathways must be disjoint")
        covered[idx] = True
        groups.append(idx)
    left = np.flatnonzero(~covered)
    if left.size:
        groups.append(left)
    if not groups:
        raise ValueError("no pathways and no genes to group")
    return groups


def pathway_aggregate(tokens, partition):
    """Mean-pool gene tokens into one token per pathway.

    tokens: (B, N_g, d) or (N_g, d).  Returns (B, N_p, d) where N_p counts
    the given pathways plus the catch-all if any gene was unassigned.
    """
    single = tokens.ndim == 2
    if single:
        tokens = reshape(tokens, (1,) + tuple(tokens.shape))
    batch, n_genes, dim = tokens.shape
    groups = pathway_groups(partition, n_genes)
    weights = np.zeros((len(groups), n_genes))
    for r, idx in enumerate(groups):
        weights[r, idx] = 1.0 / idx.size
    pooled = matmul(Tensor(weights), tokens)
    return reshape(pooled, (len(groups), dim)) if single else pooled


def save_pathway_partition(path, partition):
    """One line per pathway: whitespace-separated gene indices."""
    with open(path, "w") as fh:
        for group in partition:
            fh.write(" ".join(str(int(i)) for i in group) + "\n")


def load_pathway_partition(path):
    partition = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if line:
                partition.append(np.array([int(t) for t in line.split()]))
    return partition


# -- encoders -------------------------------------------------------------------


def _with_batch(x):
    """Promote (L, ...) to (1, L, ...); report whether promotion happened."""
    if x.ndim == 2:
        return reshape(x, (1,) + tuple(x.shape)), True
    return x, False


def _tile_cls(cls_vec, batch):
    return broadcast_to(reshape(cls_vec, (1, 1, cls_vec.shape[0])),
                        (batch, 1, cls_vec.shape[0]))


class SlideEncoder(ParamModule):
    """Patch-bag encoder: width projection, learned CLS, transformer stack.

    No positional encoding: the patch set is treated as a bag, so outputs
    are equivariant under patch permutation.  Patch tokens do not attend to
    the CLS key (the CLS reads everything); instance embeddings therefore
    depend only on the multiset of patch contents, so duplicating the bag
    duplicates the token rows exactly.
    """

    def __init__(self, rng, feat_dim, dim, heads, depth=2, zero_residual=True):
        self.feat_dim = feat_dim
        self.dim = dim
        self.proj_w = uniform_param(rng, (feat_dim, dim))
        self.proj_b = zeros_param((dim,))
        self.cls_embed = uniform_param(rng, (dim,), fan_in=dim)
        self.layers = [TransformerLayer(rng, dim, heads, zero_residual=zero_residual)
                       for _ in range(depth)]

    def encode(self, features):
        """(B, N_h, d_w) or (N_h, d_w) -> (cls (B, d), tokens (B, N_h, d))."""
        if isinstance(features, FeatureBag):
            features = tensor(features.features)
        if features.shape[-2] < 1:
            raise ValueError("cannot encode an empty feature bag")
        x, single = _with_batch(features)
        batch = x.shape[0]
        tok = add(matmul(x, self.proj_w), self.proj_b)
        seq = concat([_tile_cls(self.cls_embed, batch), tok], axis=1)
        length = seq.shape[1]
        mask = np.ones((length, length), dtype=bool)
        mask[1:, 0] = False  # patches never key on the CLS
        for layer in self.layers:
            seq = layer(seq, mask=mask)
        cls_out, tokens = seq[:, 0, :], seq[:, 1:, :]
        if single:
            return reshape(cls_out, (self.dim,)), reshape(tokens, tokens.shape[1:])
        return cls_out, tokens

    def encode_aggregated(self, features, a, b):
        """Full slide path: encode, grid, region-pool; returns SlideEncoding."""
        cls_out, tokens = self.encode(features)
        if tokens.ndim == 2:
            tokens = reshape(tokens, (1,) + tuple(tokens.shape))
            cls_out = reshape(cls_out, (1, self.dim))
        grid = reshape_to_grid(tokens)
        pooled, pad_rows = region_aggregate(grid, a, b)
        return SlideEncoding(cls=cls_out, tokens=pooled, grid_side=grid.side,
                             pad_rows=pad_rows)


class GeneEncoder(ParamModule):
    """Gene-profile encoder over identity + expression-bin embeddings."""

    def __init__(self, rng, n_genes, dim, heads, depth=2, n_bins=7,
                 zero_residual=True):
        self.n_genes = n_genes
        self.dim = dim
        self.n_bins = n_bins
        self.id_embed = uniform_param(rng, (n_genes, dim), fan_in=dim)
        self.bin_embed = uniform_param(rng, (n_bins, dim), fan_in=dim)
        self.mask_embed = uniform_param(rng, (dim,), fan_in=dim)
        self.cls_embed = uniform_param(rng, (dim,), fan_in=dim)
        self.layers = [TransformerLayer(rng, dim, heads, zero_residual=zero_residual)
                       for _ in range(depth)]

    def encode(self, bin_ids, gene_ids=None, masked=None):
        """(B, N_g) int bins -> (cls (B, d), tokens (B, N_g, d)).

        ``masked`` flags genes whose bin embedding is replaced by the learned
        mask embedding (the gene identity embedding stays visible).
        """
        bin_ids = np.asarray(bin_ids, dtype=int)
        single = bin_ids.ndim == 1
        if single:
            bin_ids = bin_ids[None, :]
        batch, n_g = bin_ids.shape
        if gene_ids is None:
            gene_ids = np.broadcast_to(np.arange(n_g), (batch, n_g))
        else:
            gene_ids = np.asarray(gene_ids, dtype=int)
            if gene_ids.ndim == 1:
                gene_ids = np.broadcast_to(gene_ids, (batch, n_g))
        tok = take_rows(self.id_embed, gene_ids)
        bins = take_rows(self.bin_embed, bin_ids)
        if masked is not None:
            masked = np.asarray(masked, dtype=bool)
            if masked.ndim == 1:
                masked = masked[None, :]
            bins = where(masked[..., None], broadcast_to(
                reshape(self.mask_embed, (1, 1, self.dim)), bins.shape), bins)
        seq = concat([_tile_cls(self.cls_embed, batch), add(tok, bins)], axis=1)
        for layer in self.layers:
            seq = layer(seq)
        cls_out, tokens = seq[:, 0, :], seq[:, 1:, :]
        if single:
            return reshape(cls_out, (self.dim,)), reshape(tokens, (n_g, self.dim))
        return cls_out, tokens

    def encode_profile(self, profile, edges=None, masked=None):
        """Full gene path for one profile: bin, encode, pathway-pool."""
        bins = discretize_expression(profile.values, bins=self.n_bins, edges=edges)
        cls_out, tokens = self.encode(bins[None, :], profile.gene_ids[None, :],
                                      masked=masked)
        pooled = pathway_aggregate(tokens, profile.pathway_partition)
        return GeneEncoding(cls=cls_out, tokens=pooled)


class TextEncoder(ParamModule):
    """Report encoder: token + position embeddings, pad-masked attention."""

    def __init__(self, rng, vocab_size, max_len, dim, heads, depth=2,
                 zero_residual=True):
        self.vocab_size = vocab_size
        self.max_len = max_len
        self.dim = dim
        self.tok_embed = uniform_param(rng, (vocab_size, dim), fan_in=dim)
        self.pos_embed = uniform_param(rng, (max_len, dim), fan_in=dim)
        self.layers = [TransformerLayer(rng, dim, heads, zero_residual=zero_residual)
                       for _ in range(depth)]

    def encode(self, ids, real_mask=None):
        """(B, N_t) ids -> TextEncoding; pads never act as attention keys."""
        ids = np.asarray(ids, dtype=int)
        single = ids.ndim == 1
        if single:
            ids = ids[None, :]
        if np.any(ids[:, 0] != CLS_ID):
            raise ValueError("every sequence must start with the CLS id")
        if np.any(ids < 0) or np.any(ids >= self.vocab_size):
            raise ValueError("token id outside the vocabulary")
        batch, length = ids.shape
        if length > self.max_len:
            raise ValueError(f"sequence length {length} exceeds maximum {self.max_len}")
        if real_mask is None:
            real_mask = ids != PAD_ID
        else:
            real_mask = np.asarray(real_mask, dtype=bool)
            if real_mask.ndim == 1:
                real_mask = real_mask[None, :]
        seq = add(take_rows(self.tok_embed, ids),
                  reshape(self.pos_embed[:length, :], (1, length, self.dim)))
        mask = key_padding_mask(real_mask)
        for layer in self.layers:
            seq = layer(seq, mask=mask)
        return TextEncoding(tokens=seq, real_mask=real_mask)
