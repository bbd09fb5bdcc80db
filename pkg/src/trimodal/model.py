"""The assembled network: three encoders, fusion stack, pretraining heads.

Task-specific heads attach lazily (see tasks.py); everything reachable from
the model shows up in ``named_parameters`` in a construction-stable order,
which the optimizer, checkpointing, and the freeze logic all rely on.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .numerics import (
    ParamModule,
    Tensor,
    broadcast_to,
    reshape,
    tensor,
    uniform_param,
    where,
    zeros_param,
)
from .encoders import (
    GeneEncoder,
    GeneEncoding,
    SlideEncoder,
    TextEncoder,
    pathway_aggregate,
    region_structure,
)
from .fusion import UniversalFusion

__all__ = ["ModelConfig", "PretrainHeads", "TriModalModel"]


@dataclass
class ModelConfig:
    hidden_dim: int = 64
    heads: int = 4
    n_blocks: int = 2
    encoder_depth: int = 2
    feat_dim: int = 1024
    n_genes: int = 64
    n_bins: int = 7
    vocab_size: int = 64
    max_text_len: int = 512
    region_a: int = 2
    region_b: int = 2
    zero_residual: bool = True
    use_type_embeddings: bool = True

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


class PretrainHeads(ParamModule):
    """Decoders and scalars owned by the pretraining objectives.

    * a learned replacement vector for masked slide patches (raw space);
    * per-modality decoders reading fused tokens back to targets;
    * the contrastive temperature, log-parameterized.
    """

    TAU_MIN, TAU_MAX = 1e-3, 100.0

    def __init__(self, rng, cfg, tau_init=0.07):
        d = cfg.hidden_dim
        self.wsi_mask_vec = uniform_param(rng, (cfg.feat_dim,), fan_in=cfg.feat_dim)
        self.wsi_dec_w = uniform_param(rng, (d, cfg.feat_dim))
        self.wsi_dec_b = zeros_param((cfg.feat_dim,))
        self.gene_dec_w = uniform_param(rng, (d, cfg.n_bins))
        self.gene_dec_b = zeros_param((cfg.n_bins,))
        self.text_dec_w = uniform_param(rng, (d, cfg.vocab_size))
        self.text_dec_b = zeros_param((cfg.vocab_size,))
        self.log_tau = Tensor(np.array(math.log(tau_init)), requires_grad=True)

    def tau(self):
        """Temperature, clamped to a safe interval (gradient passes inside)."""
        from .numerics import clip_values, exp
        return clip_values(exp(self.log_tau), self.TAU_MIN, self.TAU_MAX)


class TriModalModel(ParamModule):
    """Encoders + universal fusion + pretraining heads (+ attached task heads)."""

    def __init__(self, cfg, seed=0):
        rng = np.random.default_rng([seed, 0x7269])
        self.slide_encoder = SlideEncoder(
            rng, cfg.feat_dim, cfg.hidden_dim, cfg.heads,
            depth=cfg.encoder_depth, zero_residual=cfg.zero_residual)
        self.gene_encoder = GeneEncoder(
            rng, cfg.n_genes, cfg.hidden_dim, cfg.heads,
            depth=cfg.encoder_depth, n_bins=cfg.n_bins,
            zero_residual=cfg.zero_residual)
        self.text_encoder = TextEncoder(
            rng, cfg.vocab_size, cfg.max_text_len, cfg.hidden_dim, cfg.heads,
            depth=cfg.encoder_depth, zero_residual=cfg.zero_residual)
        self.fusion = UniversalFusion(
            rng, cfg.hidden_dim, cfg.heads, cfg.n_blocks,
            zero_residual=cfg.zero_residual,
            use_type_embeddings=cfg.use_type_embeddings)
        self.pretrain_heads = PretrainHeads(rng, cfg)
        self.config = cfg  # plain dataclass; invisible to the parameter walk

    # -- forward helpers ----------------------------------------------------

    def slide_forward(self, features, masked_cells=None):
        """(B, N_h, d_w) raw patches -> (encoder cls, SlideEncoding).

        ``masked_cells`` (B, N_h) marks patches whose raw features are
        replaced by the learned mask vector before encoding.
        """
        x = features if isinstance(features, Tensor) else tensor(features)
        if masked_cells is not None:
            m = np.asarray(masked_cells, dtype=bool)
            repl = reshape(self.pretrain_heads.wsi_mask_vec,
                           (1, 1, self.config.feat_dim))
            x = where(m[..., None], broadcast_to(repl, x.shape), x)
        enc = self.slide_encoder.encode_aggregated(
            x, self.config.region_a, self.config.region_b)
        return enc.cls, enc

    def gene_forward(self, bins, gene_ids=None, masked=None, partition=()):
        """(B, N_g) bin ids -> (encoder cls, GeneEncoding over pathways)."""
        cls_out, tokens = self.gene_encoder.encode(bins, gene_ids, masked=masked)
        pooled = pathway_aggregate(tokens, partition)
        return cls_out, GeneEncoding(cls=cls_out, tokens=pooled)

    def text_forward(self, ids, real_mask=None):
        """(B, N_t) token ids -> (encoder cls, TextEncoding)."""
        enc = self.text_encoder.encode(ids, real_mask=real_mask)
        return enc.cls, enc

    def fuse(self, slide=None, genes=None, text=None):
        state = self.fusion.assemble(slide=slide, genes=genes, text=text)
        return self.fusion(state)

    def wsi_region_groups(self, n_patches):
        return region_structure(n_patches, self.config.region_a,
                                self.config.region_b)[1]

    # -- persistence ----------------------------------------------------------

    def state_arrays(self):
        return [(name, t.data) for name, t in self.named_parameters()]

    def attach_head(self, name, module):
        """Register a task head under a stable attribute name."""
        setattr(self, name, module)
        return module
