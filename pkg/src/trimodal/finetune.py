"""Task fine-tuning on top of a pretrained model.

Tasks
-----
survival-cox   patient embedding (2d) -> linear risk, Cox partial likelihood
survival-nll   patient embedding (2d) -> per-bin hazard logits, discrete NLL
subtype        fused slide CLS -> class logits, cross-entropy
mutation       fused slide CLS -> binary logits, cross-entropy
report         causal decoder over fused slide tokens, teacher-forced CE

Survival consumes every available modality through the multimodal pooling
head; the unimodal tasks read the slide span only.  ``freeze_fusion``
restricts the optimizer to the task head, leaving encoder and fusion bytes
untouched (asserted by the caller via parameter hashing).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .numerics import AdamState, adam_step, no_grad
from .pretrain import build_groups
from .tasks import (
    CoxHead,
    MLPHead,
    PatientHead,
    ReportDecoder,
    bin_times,
    cox_loss,
    cross_entropy,
    nll_survival_loss,
)
from .metrics import (
    GenerationPair,
    RiskRanking,
    auc_roc,
    bleu_n,
    concordance_index,
    corpus_bleu,
    f1_score,
    rouge_l,
)
from .encoders import PAD_ID
from .utils import derive_rng, get_logger

log = get_logger(__name__)

TASKS = ("survival-cox", "survival-nll", "subtype", "mutation", "report")

__all__ = ["TASKS", "FinetuneConfig", "attach_task_heads", "finetune_loop",
           "evaluate_task", "forward_states", "head_param_names",
           "param_bytes_hash"]


@dataclass
class FinetuneConfig:
    epochs: int = 10
    batch_size: int = 16
    lr: float = 1e-3
    seed: int = 0
    n_time_bins: int = 4
    freeze_fusion: bool = False
    max_report_len: int = 16


def attach_task_heads(model, task, n_classes, rng=None):
    """Create and register the parameter modules a task trains."""
    rng = rng if rng is not None else np.random.default_rng(0)
    d = model.config.hidden_dim
    heads = model.config.heads
    if task == "survival-cox":
        model.attach_head("patient_head", PatientHead(rng, d, heads))
        model.attach_head("task_head", CoxHead(rng, 2 * d))
    elif task == "survival-nll":
        model.attach_head("patient_head", PatientHead(rng, d, heads))
        model.attach_head("task_head", MLPHead(rng, 2 * d, n_classes))
    elif task in ("subtype", "mutation"):
        model.attach_head("task_head", MLPHead(rng, d, n_classes))
    elif task == "report":
        model.attach_head("task_head", ReportDecoder(
            rng, model.config.vocab_size, model.config.max_text_len,
            d, heads, zero_residual=False))
    else:
        raise ValueError(f"unknown task {task!r}")
    return model


def head_param_names(model):
    names = set()
    for attr in ("patient_head", "task_head"):
        head = getattr(model, attr, None)
        if head is not None:
            names.update(n for n, _ in head.named_parameters(prefix=f"{attr}."))
    return names


def param_bytes_hash(model, exclude_heads=True):
    """Stable digest of the non-head parameter bytes (freeze verification)."""
    import hashlib

    skip = head_param_names(model) if exclude_heads else set()
    h = hashlib.sha256()
    for name, t in model.named_parameters():
        if name in skip:
            continue
        h.update(name.encode())
        h.update(t.data.tobytes())
    return h.hexdigest()


def forward_states(model, records, indices, partition, bin_edges,
                   modalities=("H", "G", "T")):
    """Fused states for a batch, grouped by modality subset.

    Returns a list of (group, fused_state); ``modalities`` restricts which
    present modalities are fed in (unimodal fine-tuning reads "H" only).
    """
    groups = build_groups(records, indices, partition, bin_edges,
                          model.config.n_bins)
    out = []
    for g in groups:
        slide = genes = text = None
        if g.features is not None and "H" in modalities:
            _, slide = model.slide_forward(g.features)
        if g.bins is not None and "G" in modalities:
            _, genes = model.gene_forward(g.bins, partition=g.partition)
        if g.token_ids is not None and "T" in modalities:
            _, text = model.text_forward(g.token_ids, real_mask=g.text_mask)
        if slide is None and genes is None and text is None:
            raise ValueError(
                "a batch group has none of the requested modalities")
        out.append((g, model.fuse(slide=slide, genes=genes, text=text)))
    return out


def _task_modalities(task):
    return ("H", "G", "T") if task.startswith("survival") else ("H",)


def _batch_loss(model, task, group, fused, records, n_bins_edges):
    if task == "survival-cox":
        emb = model.patient_head(fused)
        times = np.array([records[i].time for i in group.record_ids])
        cen = np.array([records[i].censored for i in group.record_ids])
        if np.all(cen == 1):
            return None  # no event in batch: partial likelihood undefined
        return cox_loss(emb, model.task_head.theta, times, cen)
    if task == "survival-nll":
        emb = model.patient_head(fused)
        logits = model.task_head(emb)
        times = np.array([records[i].time for i in group.record_ids])
        cen = np.array([records[i].censored for i in group.record_ids])
        bins = np.searchsorted(n_bins_edges, times, side="left")
        return nll_survival_loss(logits, bins, cen)
    if task == "subtype":
        logits = model.task_head(fused.cls("H"))
        labels = [records[i].cancer_class for i in group.record_ids]
        return cross_entropy(logits, labels)
    if task == "mutation":
        logits = model.task_head(fused.cls("H"))
        labels = [records[i].mutation_label for i in group.record_ids]
        return cross_entropy(logits, labels)
    if task == "report":
        memory = fused.span_tokens("H")
        targets = np.stack([records[i].token_ids for i in group.record_ids])
        return model.task_head.teacher_forced_loss(targets, memory)
    raise ValueError(f"unknown task {task!r}")


def finetune_loop(model, records, train_idx, partition, bin_edges, task,
                  config):
    """Train the task head(s); returns (adam_state, history, time_bin_edges)."""
    if task not in TASKS:
        raise ValueError(f"task must be one of {TASKS}")
    modalities = _task_modalities(task)
    trainable = model.named_parameters()
    if config.freeze_fusion:
        heads = head_param_names(model)
        trainable = [(n, t) for n, t in trainable if n in heads]
    params = [t for _, t in trainable]
    adam = AdamState(lr=config.lr)

    time_edges = None
    if task == "survival-nll":
        times = np.array([records[i].time for i in train_idx])
        cen = np.array([records[i].censored for i in train_idx])
        time_edges, _ = bin_times(times, cen, n=config.n_time_bins)

    usable = [i for i in train_idx
              if _has_task_inputs(records[i], task, modalities)]
    if not usable:
        raise ValueError(f"no training sample has the inputs task {task!r} needs")

    history = []
    for epoch in range(config.epochs):
        order = derive_rng(config.seed, "ft_order", epoch).permutation(len(usable))
        for b in range(0, len(usable), config.batch_size):
            batch = [usable[j] for j in order[b:b + config.batch_size]]
            states = forward_states(model, records, np.array(batch), partition,
                                    bin_edges, modalities)
            total = None
            for group, fused in states:
                group.record_ids = [batch[r] for r in group.order_rows]
                piece = _batch_loss(model, task, group, fused, records,
                                    time_edges)
                if piece is None:
                    continue
                share = len(group.order_rows) / len(batch)
                piece = piece * share
                total = piece if total is None else total + piece
            if total is None:
                continue
            for t in params:
                t.zero_grad()
            total.backward()
            adam_step(params, [t.grad for t in params], adam)
            history.append({"epoch": epoch, "loss": float(total.data)})
    return adam, history, time_edges


def _has_task_inputs(rec, task, modalities):
    if task == "report":
        # teacher forcing and BLEU both need the reference report
        return rec.features is not None and rec.token_ids is not None
    if task in ("subtype", "mutation"):
        return rec.features is not None
    present = ((rec.features is not None and "H" in modalities)
               or (rec.gene_values is not None and "G" in modalities)
               or (rec.token_ids is not None and "T" in modalities))
    return present


def evaluate_task(model, records, idx, partition, bin_edges, task,
                  time_edges=None, max_report_len=16, n_classes=None):
    """Deterministic metrics for a fine-tuned model on the given split."""
    modalities = _task_modalities(task)
    usable = np.array([i for i in idx
                       if _has_task_inputs(records[i], task, modalities)])
    if usable.size == 0:
        raise ValueError("no evaluable sample in the split")
    metrics = {}
    with no_grad():
        if task.startswith("survival"):
            risks, times, cens = [], [], []
            for lo in range(0, usable.size, 32):
                chunk = usable[lo:lo + 32]
                for group, fused in forward_states(model, records, chunk,
                                                   partition, bin_edges,
                                                   modalities):
                    emb = model.patient_head(fused)
                    ids = [chunk[r] for r in group.order_rows]
                    if task == "survival-cox":
                        scores = (emb @ model.task_head.theta).data
                    else:
                        logits = model.task_head(emb).data
                        haz = 1.0 / (1.0 + np.exp(-np.clip(logits, -30, 30)))
                        surv = np.cumprod(1.0 - haz, axis=1)
                        scores = -surv.sum(axis=1)
                    risks.extend(np.atleast_1d(scores).tolist())
                    times.extend(records[i].time for i in ids)
                    cens.extend(records[i].censored for i in ids)
            metrics["c_index"] = concordance_index(
                RiskRanking(np.array(risks), np.array(times), np.array(cens)))
        elif task in ("subtype", "mutation"):
            label_of = (lambda r: r.cancer_class) if task == "subtype" \
                else (lambda r: r.mutation_label)
            all_scores, all_labels = [], []
            for lo in range(0, usable.size, 32):
                chunk = usable[lo:lo + 32]
                for group, fused in forward_states(model, records, chunk,
                                                   partition, bin_edges,
                                                   modalities):
                    logits = model.task_head(fused.cls("H")).data
                    exp = np.exp(logits - logits.max(axis=1, keepdims=True))
                    probs = exp / exp.sum(axis=1, keepdims=True)
                    all_scores.append(probs)
                    all_labels.extend(label_of(records[chunk[r]])
                                      for r in group.order_rows)
            scores = np.concatenate(all_scores)
            labels = np.array(all_labels)
            preds = scores.argmax(axis=1)
            k = scores.shape[1]
            metrics["auc"] = auc_roc(scores[:, 1] if k == 2 else scores, labels)
            metrics["f1_macro"] = f1_score(preds, labels, k)
            metrics["accuracy"] = float((preds == labels).mean())
        elif task == "report":
            pairs = []
            exact = 0
            for i in usable:
                if records[i].token_ids is None:
                    continue
                states = forward_states(model, records, np.array([i]),
                                        partition, bin_edges, ("H",))
                _, fused = states[0]
                memory = fused.span_tokens("H")
                hyp = model.task_head.generate(memory, max_len=max_report_len)
                ref = records[i].report_target
                ref_words = ref[1:-1] if ref.size >= 2 else ref  # strip CLS/EOS
                pairs.append(GenerationPair(hyp.tolist(), ref_words.tolist()))
                exact += int(hyp.tolist() == ref_words.tolist())
            if not pairs:
                raise ValueError("no reference reports in the split")
            for n in (1, 2, 3, 4):
                metrics[f"bleu_{n}"] = corpus_bleu(pairs, n)
            metrics["rouge_l"] = float(np.mean([rouge_l(p) for p in pairs]))
            metrics["exact_match"] = exact / len(pairs)
        else:
            raise ValueError(f"unknown task {task!r}")
    return metrics
