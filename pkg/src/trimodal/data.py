"""Synthetic cohorts with planted cross-modal structure.

Every sample draws a latent vector ``z`` and a class ``k``; all three
modalities are conditioned on them so downstream claims are checkable
against ground truth:

* patch features: rows ``mu_k + A_k z + noise`` (class mean + class-specific
  latent loading), so class and latent are both recoverable from slides;
* gene expression: ``relu(W z + c_k + noise)`` with a fixed inactive-gene
  mask, nonnegative with natural zeros;
* report: a deterministic template keyed by class, a sign variant, and a
  few quantized latent coordinates, over a small shared vocabulary;
* survival: exponential event time with log-rate proportional to ``z[0]``,
  so the true risk ordering is known exactly (stored per record).

Modalities are dropped independently at the configured rates, re-drawn so
that at least one always remains.
"""

from __future__ import annotations

import json
import math
import struct
import zlib
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.special import ndtr

from .encoders import CLS_ID, EOS_ID, PAD_ID, WORD_ID_BASE, expression_bin_edges
from .utils import derive_rng, get_logger

log = get_logger(__name__)

__all__ = ["CohortSpec", "SampleRecord", "Cohort", "generate_cohort",
           "save_cohort", "load_cohort", "split", "CohortError",
           "QUANT_COORDS", "QUANT_LEVELS"]

# report template layout: class word, variant word, then one word per
# quantized latent coordinate
QUANT_COORDS = 4
QUANT_LEVELS = 8

# strength of the planted survival signal (log-rate per unit of z[0]);
# large enough that the oracle risk ordering is near-perfect
RISK_STRENGTH = 12.0
CLASS_MEAN_SCALE = 1.0
LATENT_SCALE = 0.9
GENE_INACTIVE_FRACTION = 0.10


class CohortError(RuntimeError):
    pass


@dataclass
class CohortSpec:
    n: int = 256
    classes: int = 4
    latent_dim: int = 4
    n_patches: int = 25
    n_genes: int = 40
    n_text: int = 16
    feat_dim: int = 24
    pathway_size: int = 4
    bins: int = 7
    missing_h: float = 0.0
    missing_g: float = 0.0
    missing_t: float = 0.0
    noise: float = 0.1
    censor_rate: float = 0.3
    vocab_size: int = 64
    seed: int = 0

    def __post_init__(self):
        if self.n < 1 or self.classes < 1:
            raise ValueError("cohort needs n >= 1 and classes >= 1")
        for rate in (self.missing_h, self.missing_g, self.missing_t):
            if not 0.0 <= rate < 1.0:
                raise ValueError("missing rates must lie in [0, 1)")
        if self.noise < 0:
            raise ValueError("noise must be nonnegative")
        if self.latent_dim < 2:
            raise ValueError("latent width must be >= 2")
        needed = WORD_ID_BASE + self.classes + 2 + QUANT_COORDS * QUANT_LEVELS
        if self.vocab_size < needed:
            raise ValueError(f"vocabulary too small: need >= {needed}")
        if self.n_text < 4 + QUANT_COORDS:
            raise ValueError("text length too short for the report template")


@dataclass
class SampleRecord:
    """One patient: optional modalities plus labels and planted ground truth."""

    sample_id: int
    features: np.ndarray | None
    gene_values: np.ndarray | None
    token_ids: np.ndarray | None
    cancer_class: int
    time: float
    censored: int          # 1 = censored (event unobserved), 0 = event
    mutation_label: int
    true_risk: float

    @property
    def has_slide(self):
        return self.features is not None

    @property
    def has_genes(self):
        return self.gene_values is not None

    @property
    def has_text(self):
        return self.token_ids is not None

    @property
    def report_target(self):
        """Real report tokens (CLS..EOS inclusive), no padding."""
        if self.token_ids is None:
            return None
        return self.token_ids[self.token_ids != PAD_ID]


@dataclass
class Cohort:
    spec: CohortSpec
    records: list
    partition: list
    bin_edges: np.ndarray
    class_names: list

    def __len__(self):
        return len(self.records)


def _contiguous_partition(n_genes, block):
    return [np.arange(s, min(s + block, n_genes))
            for s in range(0, n_genes, block)]


def _report_tokens(spec, klass, z, rng_unused=None):
    """Deterministic template: [CLS] class variant q1..q4 [EOS] pad..."""
    ids = np.full(spec.n_text, PAD_ID, dtype=int)
    ids[0] = CLS_ID
    ids[1] = WORD_ID_BASE + klass
    variant_base = WORD_ID_BASE + spec.classes
    ids[2] = variant_base + int(z[-1] > 0)
    quant_base = variant_base + 2
    for j in range(QUANT_COORDS):
        coord = z[min(j, spec.latent_dim - 1)]
        level = min(QUANT_LEVELS - 1, int(ndtr(coord) * QUANT_LEVELS))
        ids[3 + j] = quant_base + j * QUANT_LEVELS + level
    ids[3 + QUANT_COORDS] = EOS_ID
    return ids


def generate_cohort(spec):
    """Draw a full cohort; byte-identical for identical specs."""
    rng = derive_rng(spec.seed, "cohort_shared")
    mu = rng.normal(size=(spec.classes, spec.feat_dim)) * CLASS_MEAN_SCALE
    loadings = rng.normal(size=(spec.classes, spec.feat_dim, spec.latent_dim)) \
        * LATENT_SCALE / math.sqrt(spec.latent_dim)
    gene_map = rng.normal(size=(spec.n_genes, spec.latent_dim)) \
        / math.sqrt(spec.latent_dim) * 2.0
    gene_offset = rng.normal(size=(spec.classes, spec.n_genes)) * 0.5
    inactive = rng.uniform(size=spec.n_genes) < GENE_INACTIVE_FRACTION
    gene_map[inactive] = 0.0
    gene_offset[:, inactive] = 0.0

    partition = _contiguous_partition(spec.n_genes, spec.pathway_size)
    records = []
    for i in range(spec.n):
        r = derive_rng(spec.seed, "sample", i)
        klass = int(r.integers(0, spec.classes))
        z = r.normal(size=spec.latent_dim)

        feats = (mu[klass][None, :]
                 + z @ loadings[klass].T
                 + spec.noise * r.normal(size=(spec.n_patches, spec.feat_dim)))
        genes = np.maximum(gene_map @ z + gene_offset[klass]
                           + spec.noise * r.normal(size=spec.n_genes), 0.0)
        tokens = _report_tokens(spec, klass, z)

        risk = RISK_STRENGTH * float(z[0])
        event_time = float(r.exponential(scale=math.exp(-risk)))
        censored = int(r.uniform() < spec.censor_rate)
        obs_time = event_time * float(r.uniform(0.05, 0.95)) if censored \
            else event_time

        while True:
            keep_h = r.uniform() >= spec.missing_h
            keep_g = r.uniform() >= spec.missing_g
            keep_t = r.uniform() >= spec.missing_t
            if keep_h or keep_g or keep_t:
                break

        records.append(SampleRecord(
            sample_id=i,
            features=feats if keep_h else None,
            gene_values=genes if keep_g else None,
            token_ids=tokens if keep_t else None,
            cancer_class=klass,
            time=obs_time,
            censored=censored,
            mutation_label=int(z[1] > 0),
            true_risk=risk,
        ))

    pooled = np.concatenate([rec.gene_values for rec in records
                             if rec.gene_values is not None]) \
        if any(rec.gene_values is not None for rec in records) else np.zeros(1)
    edges = expression_bin_edges(pooled, bins=spec.bins)
    names = [f"class_{k}" for k in range(spec.classes)]
    return Cohort(spec=spec, records=records, partition=partition,
                  bin_edges=edges, class_names=names)


# -- serialization ---------------------------------------------------------------

_MAGIC = b"TMCOHORT1\n"
_VERSION = 1


def _pack_block(fh, payload):
    fh.write(struct.pack("<I", len(payload)))
    fh.write(payload)


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise CohortError(f"truncated cohort file while reading {what}")
    return buf


def save_cohort(path, cohort):
    """Self-describing binary container; load(save(x)) is bit-identical."""
    header = {
        "version": _VERSION,
        "spec": asdict(cohort.spec),
        "partition": [g.tolist() for g in cohort.partition],
        "bin_edges": np.asarray(cohort.bin_edges, dtype=float).tolist(),
        "class_names": cohort.class_names,
        "n_records": len(cohort.records),
    }
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        _pack_block(fh, json.dumps(header, sort_keys=True).encode())
        for rec in cohort.records:
            meta = {
                "sample_id": rec.sample_id,
                "cancer_class": rec.cancer_class,
                "time": rec.time,
                "censored": rec.censored,
                "mutation_label": rec.mutation_label,
                "true_risk": rec.true_risk,
                "has_slide": rec.has_slide,
                "has_genes": rec.has_genes,
                "has_text": rec.has_text,
                "feat_shape": list(rec.features.shape) if rec.has_slide else None,
                "n_genes": int(rec.gene_values.size) if rec.has_genes else None,
                "n_tokens": int(rec.token_ids.size) if rec.has_text else None,
            }
            payload = b""
            if rec.has_slide:
                payload += rec.features.astype("<f8").tobytes()
            if rec.has_genes:
                payload += rec.gene_values.astype("<f8").tobytes()
            if rec.has_text:
                payload += rec.token_ids.astype("<i4").tobytes()
            _pack_block(fh, json.dumps(meta, sort_keys=True).encode())
            _pack_block(fh, payload)
            fh.write(struct.pack("<I", zlib.crc32(payload)))


def load_cohort(path):
    with open(path, "rb") as fh:
        if _read_exact(fh, len(_MAGIC), "magic") != _MAGIC:
            raise CohortError("not a cohort file (bad magic)")
        (hlen,) = struct.unpack("<I", _read_exact(fh, 4, "header length"))
        header = json.loads(_read_exact(fh, hlen, "header"))
        if header.get("version") != _VERSION:
            raise CohortError(f"unsupported cohort version {header.get('version')}")
        spec = CohortSpec(**header["spec"])
        records = []
        for _ in range(header["n_records"]):
            (mlen,) = struct.unpack("<I", _read_exact(fh, 4, "record meta length"))
            meta = json.loads(_read_exact(fh, mlen, "record meta"))
            (plen,) = struct.unpack("<I", _read_exact(fh, 4, "payload length"))
            payload = _read_exact(fh, plen, "payload")
            (crc,) = struct.unpack("<I", _read_exact(fh, 4, "checksum"))
            if zlib.crc32(payload) != crc:
                raise CohortError(
                    f"checksum mismatch for record {meta['sample_id']}")
            off = 0
            feats = genes = tokens = None
            if meta["has_slide"]:
                shape = tuple(meta["feat_shape"])
                nbytes = 8 * shape[0] * shape[1]
                feats = np.frombuffer(payload[off:off + nbytes],
                                      dtype="<f8").astype(np.float64).reshape(shape)
                off += nbytes
            if meta["has_genes"]:
                nbytes = 8 * meta["n_genes"]
                genes = np.frombuffer(payload[off:off + nbytes],
                                      dtype="<f8").astype(np.float64)
                off += nbytes
            if meta["has_text"]:
                nbytes = 4 * meta["n_tokens"]
                tokens = np.frombuffer(payload[off:off + nbytes],
                                       dtype="<i4").astype(int)
                off += nbytes
            if off != plen:
                raise CohortError(
                    f"payload size mismatch for record {meta['sample_id']}")
            records.append(SampleRecord(
                sample_id=meta["sample_id"],
                features=feats,
                gene_values=genes,
                token_ids=tokens,
                cancer_class=meta["cancer_class"],
                time=meta["time"],
                censored=meta["censored"],
                mutation_label=meta["mutation_label"],
                true_risk=meta["true_risk"],
            ))
    return Cohort(spec=spec, records=records,
                  partition=[np.array(g) for g in header["partition"]],
                  bin_edges=np.array(header["bin_edges"]),
                  class_names=header["class_names"])


# -- splitting -------------------------------------------------------------------


def _largest_remainder(total, ratios):
    raw = [total * r for r in ratios]
    counts = [int(x) for x in raw]
    order = sorted(range(len(ratios)), key=lambda j: (-(raw[j] - counts[j]), j))
    for j in order[: total - sum(counts)]:
        counts[j] += 1
    return counts


def split(cohort_or_labels, ratios=(0.7, 0.2, 0.1), seed=0):
    """Class-stratified index split with exact global sizes.

    Accepts a Cohort or a label array.  Classes with fewer than 3 members
    force a non-stratified fallback (logged).  Returns index arrays, one per
    ratio, disjoint and covering.
    """
    if abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError("split ratios must sum to 1")
    if hasattr(cohort_or_labels, "records"):
        labels = np.array([r.cancer_class for r in cohort_or_labels.records])
    else:
        labels = np.asarray(cohort_or_labels)
    n = labels.size
    targets = _largest_remainder(n, ratios)
    classes, counts = np.unique(labels, return_counts=True)
    if counts.min() < 3:
        log.warning("class with fewer than 3 members: non-stratified split")
        classes = np.array([0])
        labels = np.zeros(n, dtype=int)

    rng = derive_rng(seed, "split")
    per_class = {}
    floors = {}
    remainders = []
    deficits = list(targets)
    for k in classes:
        idx = np.flatnonzero(labels == k)
        per_class[k] = idx[rng.permutation(idx.size)]
        raw = [idx.size * r for r in ratios]
        floors[k] = [int(x) for x in raw]
        for j in range(len(ratios)):
            deficits[j] -= floors[k][j]
            remainders.append((raw[j] - floors[k][j], int(k), j))
    leftovers = {k: per_class[k].size - sum(floors[k]) for k in classes}
    remainders.sort(key=lambda t: (-t[0], t[1], t[2]))
    for _, k, j in remainders:
        if leftovers[k] > 0 and deficits[j] > 0:
            floors[k][j] += 1
            leftovers[k] -= 1
            deficits[j] -= 1

    outs = [[] for _ in ratios]
    for k in classes:
        start = 0
        for j, c in enumerate(floors[k]):
            outs[j].extend(per_class[k][start:start + c].tolist())
            start += c
    return tuple(np.array(sorted(o), dtype=int) for o in outs)
