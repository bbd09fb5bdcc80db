"""Whole-system gradient verification against the finite-difference oracle.

Builds a small model at a generic parameter point (scaled-uniform
everywhere, residual outputs included), runs every encoder, all seven
fusion subsets, every loss, and every head through
``finite_diff_check``, and reports the worst relative error per component.
The Cox analytic gradient is checked separately against its closed form.
"""

from __future__ import annotations

import math

import numpy as np

from .numerics import (
    Tensor,
    finite_diff_check,
    tensor,
    tsum,
    mul,
)
from .encoders import CLS_ID, EOS_ID, PAD_ID
from .numerics import clip_values, exp
from .model import ModelConfig, TriModalModel
from .pretrain import (
    ContrastiveBatch,
    TripletBatch,
    clip_total,
    mask_genes,
    mask_text,
    mask_wsi,
    mlm_categorical_loss,
    mlm_regression_loss,
    triplet_loss,
)
from .tasks import (
    CoxHead,
    MLPHead,
    PatientHead,
    ReportDecoder,
    cox_gradient_check,
    cox_loss,
    cross_entropy,
    nll_survival_loss,
)
from .encoders import pathway_groups
from .utils import derive_rng

__all__ = ["run_gradcheck", "GRADCHECK_TOLERANCE", "COX_TOLERANCE"]

GRADCHECK_TOLERANCE = 1e-4
COX_TOLERANCE = 1e-8

_SMALL = dict(hidden_dim=16, heads=2, n_blocks=2, encoder_depth=2,
              feat_dim=10, n_genes=8, n_bins=5, vocab_size=16,
              max_text_len=9, region_a=2, region_b=2, zero_residual=False)


def _small_model(seed):
    return TriModalModel(ModelConfig(**_SMALL), seed=seed)


def _rand_inputs(rng, cfg):
    n_h = 9
    feats = rng.normal(size=(1, n_h, cfg.feat_dim))
    bins = rng.integers(0, cfg.n_bins, size=(1, cfg.n_genes))
    ids = np.full((1, cfg.max_text_len), PAD_ID, dtype=int)
    ids[0, 0] = CLS_ID
    n_real = 6
    ids[0, 1:n_real] = rng.integers(4, cfg.vocab_size, size=n_real - 1)
    ids[0, n_real] = EOS_ID
    partition = [np.arange(0, 4), np.arange(4, 7)]
    return feats, bins, ids, partition


def _readout(rng, shape):
    return tensor(rng.normal(size=shape))


def _check(f, params, coords, seed, corrupt=False):
    return finite_diff_check(f, params, h=1e-5, max_coords_per_param=coords,
                             seed=seed, corrupt_sign=corrupt)


def run_gradcheck(seed=0, coords_per_param=12, corrupt_component=None,
                  progress=None):
    """Returns (results, cox_closed_form_deviation).

    ``results`` maps component name -> max relative error vs central
    differences.  ``corrupt_component`` flips the autodiff sign for one
    component (test hook: the run must then fail).
    """
    rng = derive_rng(seed, "gradcheck")
    results = {}

    def record(name, err):
        results[name] = err
        if progress is not None:
            progress(name, err)

    def corrupt(name):
        return corrupt_component == name

    # -- encoders -----------------------------------------------------------
    model = _small_model(seed)
    cfg = model.config
    feats, bins, ids, partition = _rand_inputs(rng, cfg)

    feats_t = tensor(feats, requires_grad=True)
    ro = _readout(rng, (cfg.hidden_dim,))

    def slide_readout():
        cls_out, enc = model.slide_forward(feats_t)
        return tsum(mul(enc.tokens, ro)) + tsum(mul(cls_out, ro))

    params = [feats_t] + [t for _, t in model.slide_encoder.named_parameters()]
    record("encoder_slide",
           _check(slide_readout, params, coords_per_param, seed,
                  corrupt("encoder_slide")))

    def gene_readout():
        cls_out, enc = model.gene_forward(bins, partition=partition)
        return tsum(mul(enc.tokens, ro)) + tsum(mul(cls_out, ro))

    params = [t for _, t in model.gene_encoder.named_parameters()]
    record("encoder_genes",
           _check(gene_readout, params, coords_per_param, seed,
                  corrupt("encoder_genes")))

    def text_readout():
        cls_out, enc = model.text_forward(ids)
        return tsum(mul(enc.tokens, ro)) + tsum(mul(cls_out, ro))

    params = [t for _, t in model.text_encoder.named_parameters()]
    record("encoder_text",
           _check(text_readout, params, coords_per_param, seed,
                  corrupt("encoder_text")))

    # -- fusion over all 7 subsets -------------------------------------------
    subsets = [("H",), ("G",), ("T",), ("H", "G"), ("H", "T"), ("G", "T"),
               ("H", "G", "T")]
    for subset in subsets:
        name = "fusion_" + "".join(subset)

        def fused_readout(_subset=subset):
            slide = genes = text = None
            if "H" in _subset:
                _, slide = model.slide_forward(feats_t)
            if "G" in _subset:
                _, genes = model.gene_forward(bins, partition=partition)
            if "T" in _subset:
                _, text = model.text_forward(ids)
            fused = model.fuse(slide=slide, genes=genes, text=text)
            return tsum(mul(fused.tokens, ro))

        params = [t for _, t in model.fusion.named_parameters()]
        record(name, _check(fused_readout, params, coords_per_param, seed,
                            corrupt(name)))

    # -- pretraining losses ----------------------------------------------------
    groups = model.wsi_region_groups(feats.shape[1])
    plan_h = mask_wsi(feats[0], groups, ratio=0.3, rng=derive_rng(seed, "mh"))
    pred_h = Tensor(rng.normal(size=plan_h.targets.shape), requires_grad=True)
    record("loss_mlm_wsi",
           _check(lambda: mlm_regression_loss(pred_h, plan_h.targets),
                  [pred_h], coords_per_param, seed, corrupt("loss_mlm_wsi")))

    pgroups = pathway_groups(partition, cfg.n_genes)
    plan_g = mask_genes(bins[0], pgroups, ratio=0.3, rng=derive_rng(seed, "mg"))
    logits_g = Tensor(rng.normal(size=(plan_g.masked.size, cfg.n_bins)),
                      requires_grad=True)
    record("loss_mlm_genes",
           _check(lambda: mlm_categorical_loss(logits_g, plan_g.targets),
                  [logits_g], coords_per_param, seed, corrupt("loss_mlm_genes")))

    plan_t = mask_text(ids[0], ratio=0.5, rng=derive_rng(seed, "mt"),
                       vocab_size=cfg.vocab_size)
    logits_t = Tensor(rng.normal(size=(plan_t.masked.size, cfg.vocab_size)),
                      requires_grad=True)
    record("loss_mlm_text",
           _check(lambda: mlm_categorical_loss(logits_t, plan_t.targets),
                  [logits_t], coords_per_param, seed, corrupt("loss_mlm_text")))

    n = 5
    cls_h = Tensor(rng.normal(size=(n, cfg.hidden_dim)), requires_grad=True)
    cls_g = Tensor(rng.normal(size=(n, cfg.hidden_dim)), requires_grad=True)
    cls_t = Tensor(rng.normal(size=(n, cfg.hidden_dim)), requires_grad=True)
    log_tau = Tensor(np.array(math.log(0.3)), requires_grad=True)

    def clip_readout():
        batch = ContrastiveBatch(
            cls={"H": cls_h, "G": cls_g, "T": cls_t},
            present={m: np.ones(n, dtype=bool) for m in "HGT"},
            tau=clip_values(exp(log_tau), 1e-3, 100.0))
        return clip_total(batch)

    record("loss_clip",
           _check(clip_readout, [cls_h, cls_g, cls_t, log_tau],
                  coords_per_param, seed, corrupt("loss_clip")))

    anchors = Tensor(rng.normal(size=(6, 3 * cfg.hidden_dim)),
                     requires_grad=True)
    labels = np.array([0, 0, 1, 1, 2, 2])

    def trip_readout():
        return triplet_loss(TripletBatch(anchors=anchors, labels=labels,
                                         margin=1.0, cap=None))

    record("loss_triplet",
           _check(trip_readout, [anchors], coords_per_param, seed,
                  corrupt("loss_triplet")))

    # -- survival and classification losses ---------------------------------------
    n_pat = 8
    logits_s = Tensor(rng.normal(size=(n_pat, 4)), requires_grad=True)
    s_bins = rng.integers(0, 4, size=n_pat)
    s_cen = (rng.uniform(size=n_pat) < 0.4).astype(int)
    record("loss_nll_survival",
           _check(lambda: nll_survival_loss(logits_s, s_bins, s_cen),
                  [logits_s], coords_per_param, seed,
                  corrupt("loss_nll_survival")))

    emb = Tensor(rng.normal(size=(n_pat, 2 * cfg.hidden_dim)),
                 requires_grad=True)
    theta = Tensor(rng.normal(size=(2 * cfg.hidden_dim,)), requires_grad=True)
    times = rng.uniform(1.0, 5.0, size=n_pat)
    record("loss_cox",
           _check(lambda: cox_loss(emb, theta, times, s_cen),
                  [emb, theta], coords_per_param, seed, corrupt("loss_cox")))

    logits_c = Tensor(rng.normal(size=(n_pat, 3)), requires_grad=True)
    labels_c = rng.integers(0, 3, n_pat)
    record("loss_cross_entropy",
           _check(lambda: cross_entropy(logits_c, labels_c),
                  [logits_c], coords_per_param, seed,
                  corrupt("loss_cross_entropy")))

    # -- heads -------------------------------------------------------------------
    head_rng = derive_rng(seed, "heads")
    mlp = MLPHead(head_rng, cfg.hidden_dim, 3)
    x_in = Tensor(rng.normal(size=(4, cfg.hidden_dim)), requires_grad=True)
    ro3 = _readout(rng, (3,))
    record("head_mlp",
           _check(lambda: tsum(mul(mlp(x_in), ro3)),
                  [x_in] + [t for _, t in mlp.named_parameters()],
                  coords_per_param, seed, corrupt("head_mlp")))

    patient = PatientHead(head_rng, cfg.hidden_dim, cfg.heads)
    ro2 = _readout(rng, (2 * cfg.hidden_dim,))

    def patient_readout():
        slide = genes = None
        _, slide = model.slide_forward(feats_t)
        _, genes = model.gene_forward(bins, partition=partition)
        fused = model.fuse(slide=slide, genes=genes)
        return tsum(mul(patient(fused), ro2))

    record("head_patient",
           _check(patient_readout,
                  [t for _, t in patient.named_parameters()],
                  coords_per_param, seed, corrupt("head_patient")))

    decoder = ReportDecoder(head_rng, cfg.vocab_size, cfg.max_text_len,
                            cfg.hidden_dim, cfg.heads, zero_residual=False)
    memory = Tensor(rng.normal(size=(1, 5, cfg.hidden_dim)), requires_grad=True)

    def decoder_readout():
        return decoder.teacher_forced_loss(ids, memory)

    record("head_decoder",
           _check(decoder_readout,
                  [memory] + [t for _, t in decoder.named_parameters()],
                  coords_per_param, seed, corrupt("head_decoder")))

    # -- Cox closed form (separate oracle) ------------------------------------------
    cox_dev = 0.0
    crng = derive_rng(seed, "cox_oracle")
    for _ in range(50):
        e = crng.normal(size=(10, 6))
        th = crng.normal(size=6)
        t = crng.uniform(1.0, 5.0, size=10)
        c = (crng.uniform(size=10) < 0.3).astype(int)
        if np.all(c == 1):
            c[0] = 0
        cox_dev = max(cox_dev, cox_gradient_check(e, th, t, c))

    return results, cox_dev
