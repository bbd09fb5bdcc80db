"""Three-tier pretraining: masked modeling, pairwise contrastive, triplet.

Per optimizer step the loop encodes every available modality of the batch,
fuses them, and combines

* a masked-modeling loss on the one modality currently selected for it
  (re-drawn every ``mlm_switch_period`` epochs; samples lacking that
  modality are skipped for this term);
* the sum of three pairwise contrastive losses over the encoder CLS
  tokens, each restricted to samples where both modalities are present;
* a class-anchored triplet loss over the fused, concatenated CLS tokens.

The total is ``alpha * mlm + beta * contrastive + triplet``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import (
    AdamState,
    Tensor,
    adam_step,
    add,
    clip_global_norm,
    concat,
    div,
    l2_normalize,
    log_softmax,
    matmul,
    mul,
    relu,
    reshape,
    sqrt,
    swapaxes,
    take_rows,
    tensor,
    tsum,
)
from .encoders import CLS_ID, PAD_ID, MASK_ID, WORD_ID_BASE, pathway_groups
from .fusion import MODALITIES
from .utils import derive_rng, get_logger

log = get_logger(__name__)

__all__ = [
    "MaskPlan", "ContrastiveBatch", "TripletBatch", "LossWeights",
    "mask_wsi", "mask_genes", "mask_text",
    "mlm_regression_loss", "mlm_categorical_loss",
    "clip_pair_loss", "clip_total", "triplet_loss", "total_loss",
    "PretrainConfig", "pretrain_loop", "pretrain_step",
]


# -- masking ------------------------------------------------------------------


@dataclass
class MaskPlan:
    """What was masked in one sample and what the model must recover.

    modality 'H': ``masked`` holds region ids, ``targets`` the (|M|, d_w)
    means of the original patch features per region, ``replaced_cells`` the
    patch indices overwritten by the learned mask vector.
    modality 'G': ``masked`` holds gene indices, ``targets`` their original
    bin ids.
    modality 'T': ``masked`` holds positions, ``targets`` the original ids,
    and ``replacement_ids`` the corrupted full sequence actually encoded.
    """

    modality: str
    masked: np.ndarray
    targets: np.ndarray
    replaced_cells: np.ndarray | None = None
    replacement_ids: np.ndarray | None = None


def mask_wsi(features, region_groups, ratio=0.15, rng=None):
    """Mask ceil(ratio * R) regions of a slide; targets are region means."""
    rng = rng if rng is not None else np.random.default_rng(0)
    features = np.asarray(features, dtype=np.float64)
    n_regions = len(region_groups)
    if n_regions == 0:
        raise ValueError("slide has no regions to mask")
    if not 0.0 < ratio < 1.0 + 1e-12:
        raise ValueError("mask ratio must lie in (0, 1]")
    n_mask = min(n_regions, math.ceil(ratio * n_regions))
    picked = np.sort(rng.choice(n_regions, size=n_mask, replace=False))
    targets = np.stack([features[region_groups[r]].mean(axis=0) for r in picked])
    cells = np.concatenate([region_groups[r] for r in picked])
    return MaskPlan(modality="H", masked=picked, targets=targets,
                    replaced_cells=np.sort(cells))


def mask_genes(bins, partition_groups, ratio=0.15, rng=None):
    """Mask ceil(ratio * |pathway|) genes independently within each pathway."""
    rng = rng if rng is not None else np.random.default_rng(0)
    bins = np.asarray(bins, dtype=int)
    picked = []
    for group in partition_groups:
        n_mask = min(group.size, math.ceil(ratio * group.size))
        picked.append(np.asarray(group)[rng.choice(group.size, size=n_mask,
                                                   replace=False)])
    masked = np.sort(np.concatenate(picked))
    return MaskPlan(modality="G", masked=masked, targets=bins[masked].copy())


def mask_text(ids, ratio=0.15, rng=None, vocab_size=64):
    """Standard masked-token policy: 80% mask id, 10% random word, 10% kept.

    CLS (position 0) and pads are never selected.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    ids = np.asarray(ids, dtype=int)
    eligible = np.flatnonzero((ids != PAD_ID) & (np.arange(ids.size) > 0))
    if eligible.size == 0:
        raise ValueError("sequence has no maskable token")
    n_mask = min(eligible.size, math.ceil(ratio * eligible.size))
    picked = np.sort(rng.choice(eligible, size=n_mask, replace=False))
    corrupted = ids.copy()
    rolls = rng.uniform(size=n_mask)
    for pos, roll in zip(picked, rolls):
        if roll < 0.8:
            corrupted[pos] = MASK_ID
        elif roll < 0.9:
            corrupted[pos] = int(rng.integers(WORD_ID_BASE, vocab_size))
        # else: keep the original token
    return MaskPlan(modality="T", masked=picked, targets=ids[picked].copy(),
                    replacement_ids=corrupted)


# -- losses --------------------------------------------------------------------


@dataclass
class LossWeights:
    alpha: float = 1.0
    beta: float = 1.0

    def __post_init__(self):
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ContrastiveBatch:
    """Per-modality encoder CLS rows (aligned) plus presence flags."""

    cls: dict                      # modality -> Tensor (B, d)
    present: dict                  # modality -> bool ndarray (B,)
    tau: Tensor | float = 1.0


@dataclass
class TripletBatch:
    anchors: Tensor                # (B, K) sample-level embeddings
    labels: np.ndarray             # (B,) class ids
    margin: float = 1.0
    cap: int = 64
    rng: np.random.Generator | None = None


def mlm_regression_loss(pred, targets):
    """Mean squared error between predicted and original region means."""
    t = targets if isinstance(targets, Tensor) else Tensor(np.asarray(targets))
    diff = add(pred, mul(t, -1.0))
    return tsum(mul(diff, diff)) * (1.0 / max(t.data.size, 1))


def mlm_categorical_loss(logits, targets, row_weights=None):
    """Weighted negative log-likelihood over masked predictions.

    logits: (M, C); targets: (M,) int.  ``row_weights`` defaults to uniform
    1/M; the training loop passes 1/(N * |M_sample|) so every sample
    contributes its per-position mean, averaged over the batch.
    """
    targets = np.asarray(targets, dtype=int)
    if targets.size == 0:
        raise ValueError("masked-prediction loss with an empty mask set")
    n, c = logits.shape
    if row_weights is None:
        row_weights = np.full(n, 1.0 / n)
    onehot = np.zeros((n, c))
    onehot[np.arange(n), targets] = 1.0
    picked = tsum(mul(log_softmax(logits, axis=-1), Tensor(onehot)), axis=-1)
    return mul(tsum(mul(picked, Tensor(np.asarray(row_weights)))), -1.0)


def clip_pair_loss(x_cls, y_cls, tau=1.0):
    """Symmetric InfoNCE between two aligned CLS sets.

    Rows are L2-normalized; similarities are scaled by 1/tau; both softmax
    directions are averaged with weight 1/(2N).  An empty batch contributes
    zero (logged), so co-presence filtering cannot poison the total.
    """
    n = x_cls.shape[0]
    if n == 0:
        log.warning("contrastive pair skipped: no co-present samples in batch")
        return tensor(0.0)
    xn = l2_normalize(x_cls, axis=-1)
    yn = l2_normalize(y_cls, axis=-1)
    sims = div(matmul(xn, swapaxes(yn, 0, 1)), tau)
    eye = np.eye(n)
    row_term = tsum(mul(log_softmax(sims, axis=1), Tensor(eye)))
    col_term = tsum(mul(log_softmax(sims, axis=0), Tensor(eye)))
    return mul(add(row_term, col_term), -1.0 / (2.0 * n))


_CLIP_PAIRS = (("H", "G"), ("G", "T"), ("T", "H"))


def clip_total(batch):
    """Sum of the three pairwise contrastive losses over co-present subsets."""
    total = tensor(0.0)
    for a, b in _CLIP_PAIRS:
        if a not in batch.cls or b not in batch.cls:
            continue
        both = np.asarray(batch.present[a]) & np.asarray(batch.present[b])
        idx = np.flatnonzero(both)
        if idx.size == 0:
            log.warning("contrastive pair %s-%s skipped: no co-present samples", a, b)
            continue
        total = add(total, clip_pair_loss(take_rows(batch.cls[a], idx),
                                          take_rows(batch.cls[b], idx),
                                          tau=batch.tau))
    return total


def _mine_triplets(labels, cap, rng):
    labels = np.asarray(labels)
    ia, ip, ineg = [], [], []
    for i, la in enumerate(labels):
        pos = np.flatnonzero((labels == la) & (np.arange(labels.size) != i))
        neg = np.flatnonzero(labels != la)
        for j in pos:
            for k in neg:
                ia.append(i)
                ip.append(j)
                ineg.append(k)
    if not ia:
        return None
    ia, ip, ineg = np.array(ia), np.array(ip), np.array(ineg)
    if cap is not None and ia.size > cap:
        sel = (rng or np.random.default_rng(0)).choice(ia.size, size=cap,
                                                       replace=False)
        sel.sort()
        ia, ip, ineg = ia[sel], ip[sel], ineg[sel]
    return ia, ip, ineg


def _euclidean(a, b):
    diff = add(a, mul(b, -1.0))
    # tiny floor keeps sqrt differentiable when two embeddings coincide
    return sqrt(add(tsum(mul(diff, diff), axis=-1), 1e-24))


def triplet_loss(batch):
    """Mean hinge over mined (anchor, positive, negative) triples.

    All valid in-batch combinations are considered, subsampled to
    ``batch.cap`` with the provided rng.  A batch without any valid triple
    (single class, or no class with two members) contributes zero.
    """
    mined = _mine_triplets(batch.labels, batch.cap, batch.rng)
    if mined is None:
        log.warning("triplet loss skipped: no valid triple in batch")
        return tensor(0.0)
    ia, ip, ineg = mined
    a = take_rows(batch.anchors, ia)
    p = take_rows(batch.anchors, ip)
    n = take_rows(batch.anchors, ineg)
    hinge = relu(add(add(_euclidean(a, p), mul(_euclidean(a, n), -1.0)),
                     batch.margin))
    return tsum(hinge) * (1.0 / ia.size)


def total_loss(mlm, contrastive, triplet, weights):
    """alpha * mlm + beta * contrastive + triplet."""
    def as_t(x):
        return x if isinstance(x, Tensor) else tensor(float(x))
    return add(add(mul(as_t(mlm), weights.alpha),
                   mul(as_t(contrastive), weights.beta)), as_t(triplet))


# -- the training loop -----------------------------------------------------------


@dataclass
class PretrainConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    alpha: float = 1.0
    beta: float = 1.0
    mask_ratio: float = 0.15
    margin: float = 1.0
    triplet_cap: int = 64
    mlm_switch_period: int = 10
    seed: int = 0
    clip_grad_norm: float | None = None
    # contrastive CLS from an unmasked encoder pass while that modality is
    # the masking target (the masked pass still feeds fusion and the MLM
    # heads); keeps alignment targets clean during masking windows
    clean_contrastive_pass: bool = True


@dataclass
class BatchOutput:
    """Everything a step needs downstream of the forward passes."""

    encoder_cls: dict
    fused_cls: dict
    present: dict
    mlm_loss: Tensor
    labels: np.ndarray


def _zero_placeholder(batch, dim):
    return Tensor(np.zeros((batch, dim)))


def sample_level_anchor(fused_cls, present, dim):
    """Concatenate fused CLS tokens in H,G,T order; zeros where absent."""
    batch = len(next(iter(present.values())))
    parts = []
    for m in MODALITIES:
        if m in fused_cls:
            rows = fused_cls[m]
            gate = np.asarray(present[m], dtype=float)[:, None]
            parts.append(mul(rows, Tensor(gate)))
        else:
            parts.append(_zero_placeholder(batch, dim))
    return concat(parts, axis=1)


def _forward_group(model, group, mlm_modality, mask_ratio, rng_factory,
                   clean_contrastive=True):
    """Encode one same-subset group of samples; returns per-group pieces."""
    cfg = model.config
    enc_cls = {}
    encodings = {"slide": None, "genes": None, "text": None}
    mlm_terms = []

    if group.features is not None:
        masked_cells = None
        if mlm_modality == "H":
            group.wsi_plans = []
            masked_cells = np.zeros(group.features.shape[:2], dtype=bool)
            groups_struct = model.wsi_region_groups(group.features.shape[1])
            for row, sid in enumerate(group.sample_ids):
                plan = mask_wsi(group.features[row], groups_struct,
                                ratio=mask_ratio, rng=rng_factory("mask_h", sid))
                group.wsi_plans.append(plan)
                masked_cells[row, plan.replaced_cells] = True
        cls_h, enc = model.slide_forward(group.features, masked_cells=masked_cells)
        if masked_cells is not None and clean_contrastive:
            cls_h, _ = model.slide_encoder.encode(
                group.features if isinstance(group.features, Tensor)
                else tensor(group.features))
        enc_cls["H"] = cls_h
        encodings["slide"] = enc

    if group.bins is not None:
        masked = None
        if mlm_modality == "G":
            group.gene_plans = []
            masked = np.zeros(group.bins.shape, dtype=bool)
            pgroups = pathway_groups(group.partition, group.bins.shape[1])
            for row, sid in enumerate(group.sample_ids):
                plan = mask_genes(group.bins[row], pgroups, ratio=mask_ratio,
                                  rng=rng_factory("mask_g", sid))
                group.gene_plans.append(plan)
                masked[row, plan.masked] = True
        cls_g, enc = model.gene_forward(group.bins, masked=masked,
                                        partition=group.partition)
        if masked is not None and clean_contrastive:
            cls_g, _ = model.gene_encoder.encode(group.bins)
        enc_cls["G"] = cls_g
        encodings["genes"] = enc

    if group.token_ids is not None:
        ids = group.token_ids
        if mlm_modality == "T":
            group.text_plans = []
            ids = ids.copy()
            for row, sid in enumerate(group.sample_ids):
                plan = mask_text(group.token_ids[row], ratio=mask_ratio,
                                 rng=rng_factory("mask_t", sid),
                                 vocab_size=cfg.vocab_size)
                group.text_plans.append(plan)
                ids[row] = plan.replacement_ids
        cls_t, enc = model.text_forward(ids, real_mask=group.text_mask)
        if mlm_modality == "T" and clean_contrastive:
            cls_t = model.text_encoder.encode(
                group.token_ids, real_mask=group.text_mask).cls
        enc_cls["T"] = cls_t
        encodings["text"] = enc

    fused = model.fuse(slide=encodings["slide"], genes=encodings["genes"],
                       text=encodings["text"])

    # masked-prediction terms read the fused tokens
    heads = model.pretrain_heads
    if mlm_modality == "H" and group.features is not None:
        span = fused.span_tokens("H")
        region_tokens = span[:, 1:, :]
        for row, plan in enumerate(group.wsi_plans):
            sel = take_rows(region_tokens[row, :, :], plan.masked)
            pred = add(matmul(sel, heads.wsi_dec_w), heads.wsi_dec_b)
            mlm_terms.append(("H", pred, plan, row))
    if mlm_modality == "G" and group.bins is not None:
        span = fused.span_tokens("G")
        pw_tokens = span[:, 1:, :]
        pgroups = pathway_groups(group.partition, group.bins.shape[1])
        gene_to_pw = np.zeros(group.bins.shape[1], dtype=int)
        for pi, idx in enumerate(pgroups):
            gene_to_pw[idx] = pi
        for row, plan in enumerate(group.gene_plans):
            pw_rows = take_rows(pw_tokens[row, :, :], gene_to_pw[plan.masked])
            id_rows = take_rows(model.gene_encoder.id_embed, plan.masked)
            logits = add(matmul(add(pw_rows, id_rows), heads.gene_dec_w),
                         heads.gene_dec_b)
            mlm_terms.append(("G", logits, plan, row))
    if mlm_modality == "T" and group.token_ids is not None:
        span = fused.span_tokens("T")
        for row, plan in enumerate(group.text_plans):
            sel = take_rows(span[row, :, :], plan.masked)
            logits = add(matmul(sel, heads.text_dec_w), heads.text_dec_b)
            mlm_terms.append(("T", logits, plan, row))

    fused_cls = {m: fused.cls(m) for m in fused.modality_set.present}
    return enc_cls, fused_cls, mlm_terms


class _Group:
    """Numpy-side arrays for a same-modality-subset slice of a batch."""

    def __init__(self, sample_ids, order_rows, features, bins, token_ids,
                 text_mask, partition, labels):
        self.sample_ids = sample_ids
        self.order_rows = order_rows
        self.features = features
        self.bins = bins
        self.token_ids = token_ids
        self.text_mask = text_mask
        self.partition = partition
        self.labels = labels
        self.wsi_plans = []
        self.gene_plans = []
        self.text_plans = []


def build_groups(records, indices, partition, bin_edges, n_bins):
    """Group batch records by their modality subset and stack their arrays."""
    from .encoders import discretize_expression

    key_of = {}
    for row, idx in enumerate(indices):
        rec = records[idx]
        key = (rec.features is not None, rec.gene_values is not None,
               rec.token_ids is not None)
        key_of.setdefault(key, []).append(row)

    groups = []
    for key in sorted(key_of):
        rows = key_of[key]
        recs = [records[indices[r]] for r in rows]
        has_h, has_g, has_t = key
        feats = np.stack([r.features for r in recs]) if has_h else None
        bins = (np.stack([discretize_expression(r.gene_values, bins=n_bins,
                                                edges=bin_edges)
                          for r in recs]) if has_g else None)
        ids = np.stack([r.token_ids for r in recs]) if has_t else None
        tmask = np.stack([r.token_ids != PAD_ID for r in recs]) if has_t else None
        labels = np.array([r.cancer_class for r in recs])
        groups.append(_Group([r.sample_id for r in recs], np.array(rows),
                             feats, bins, ids, tmask, partition, labels))
    return groups


def pretrain_step(model, records, indices, partition, bin_edges, weights,
                  mlm_modality, config, adam, step_rng_factory):
    """One optimizer step over a batch; returns the component losses."""
    cfg = model.config
    batch = len(indices)
    groups = build_groups(records, indices, partition, bin_edges, cfg.n_bins)

    labels = np.zeros(batch, dtype=int)
    present = {m: np.zeros(batch, dtype=bool) for m in MODALITIES}
    mlm_terms = []
    results = []
    for group in groups:
        g_enc, g_fused, g_terms = _forward_group(
            model, group, mlm_modality, config.mask_ratio, step_rng_factory,
            clean_contrastive=config.clean_contrastive_pass)
        labels[group.order_rows] = group.labels
        for m in g_enc:
            present[m][group.order_rows] = True
        mlm_terms.extend(g_terms)
        results.append((group, g_enc, g_fused))

    if len(results) == 1 and np.array_equal(results[0][0].order_rows,
                                            np.arange(batch)):
        enc_stacked = results[0][1]
        fused_stacked = results[0][2]
    else:
        def stack_rows(per_group):
            rows = [None] * batch
            for group, bundle in per_group:
                for local, row in enumerate(group.order_rows):
                    rows[row] = bundle[local, :]
            if all(r is None for r in rows):
                return None
            zero = Tensor(np.zeros(cfg.hidden_dim))
            return concat([reshape(r if r is not None else zero,
                                   (1, cfg.hidden_dim)) for r in rows], axis=0)

        enc_stacked = {}
        fused_stacked = {}
        for m in MODALITIES:
            enc = stack_rows([(g, b[m]) for g, b, _ in results if m in b])
            if enc is not None:
                enc_stacked[m] = enc
            fused = stack_rows([(g, b[m]) for g, _, b in results if m in b])
            if fused is not None:
                fused_stacked[m] = fused

    # masked-modeling term: per-sample mean over its masked set, then mean
    # over the samples that carry the selected modality
    n_mlm = len(mlm_terms)
    if n_mlm:
        pieces = []
        for kind, pred, plan, _ in mlm_terms:
            if kind == "H":
                pieces.append(mlm_regression_loss(pred, plan.targets))
            else:
                pieces.append(mlm_categorical_loss(pred, plan.targets))
        mlm = mul(pieces[0], 1.0 / n_mlm)
        for p in pieces[1:]:
            mlm = add(mlm, mul(p, 1.0 / n_mlm))
    else:
        mlm = tensor(0.0)

    contrastive = clip_total(ContrastiveBatch(
        cls=enc_stacked, present=present, tau=model.pretrain_heads.tau()))
    trip = triplet_loss(TripletBatch(
        anchors=sample_level_anchor(fused_stacked, present, cfg.hidden_dim),
        labels=labels, margin=config.margin, cap=config.triplet_cap,
        rng=step_rng_factory("triplet", 0)))

    loss = total_loss(mlm, contrastive, trip, weights)

    has_mlm = n_mlm > 0
    has_pair = any(
        np.flatnonzero(present[a] & present[b]).size > 0 for a, b in _CLIP_PAIRS)
    has_trip = _mine_triplets(labels, None, None) is not None
    if not (has_mlm or has_pair or has_trip):
        log.warning("batch skipped: no co-present pair, no triplet, nothing to mask")
        return None

    named = model.named_parameters()
    params = [t for _, t in named]
    for t in params:
        t.zero_grad()
    loss.backward()
    grads = [t.grad for t in params]
    if config.clip_grad_norm is not None:
        grads, _ = clip_global_norm(grads, config.clip_grad_norm)
    adam_step(params, grads, adam)
    return {
        "mlm": float(mlm.data),
        "clip": float(contrastive.data),
        "triplet": float(trip.data),
        "total": float(loss.data),
    }


def dataset_modalities(records):
    avail = []
    if any(r.features is not None for r in records):
        avail.append("H")
    if any(r.gene_values is not None for r in records):
        avail.append("G")
    if any(r.token_ids is not None for r in records):
        avail.append("T")
    return avail


def mlm_modality_for_epoch(epoch, period, seed, available):
    """The modality masked during this epoch's window (re-drawn per window)."""
    window = epoch // max(period, 1)
    rng = derive_rng(seed, "mlm_window", window)
    return available[int(rng.integers(0, len(available)))]


def pretrain_loop(records, partition, bin_edges, model, config,
                  start_epoch=0, adam=None, on_epoch_end=None):
    """Run the pretraining schedule; returns (adam_state, history rows).

    History rows are dicts: epoch, batch, mlm modality, component losses.
    Randomness is derived per (seed, purpose, epoch/batch/sample), so a run
    resumed from an epoch boundary is bit-identical to an uninterrupted one.
    """
    if not records:
        raise ValueError("pretraining needs a non-empty dataset")
    weights = LossWeights(alpha=config.alpha, beta=config.beta)
    adam = adam if adam is not None else AdamState(lr=config.lr)
    available = dataset_modalities(records)
    history = []
    n = len(records)
    for epoch in range(start_epoch, config.epochs):
        mlm_mod = mlm_modality_for_epoch(epoch, config.mlm_switch_period,
                                         config.seed, available)
        order = derive_rng(config.seed, "order", epoch).permutation(n)
        for b in range(0, n, config.batch_size):
            batch_idx = order[b:b + config.batch_size]
            batch_no = b // config.batch_size

            def factory(tag, sid, _e=epoch, _b=batch_no):
                return derive_rng(config.seed, tag, _e, _b, sid)

            comps = pretrain_step(model, records, batch_idx, partition,
                                  bin_edges, weights, mlm_mod, config, adam,
                                  factory)
            if comps is None:
                continue
            comps.update({"epoch": epoch, "batch": batch_no,
                          "mlm_modality": mlm_mod})
            history.append(comps)
        if on_epoch_end is not None:
            on_epoch_end(epoch, model, adam, history)
    return adam, history
