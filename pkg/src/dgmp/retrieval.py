"""Retrieval evaluation (AP, mAP, top-1) and batch-hard triplet training loss."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import pooling
from .errors import DegenerateBatch, DimensionMismatch, InvalidInput, NoRelevant, NotEnoughClasses

log = logging.getLogger(__name__)

DISTANCES = ("euclidean", "cosine")


@dataclass(frozen=True)
class EmbeddingGallery:
    """``S`` normalized embeddings stored as the rows of ``embeddings``."""

    embeddings: np.ndarray
    labels: tuple
    ids: tuple

    def __post_init__(self):
        emb = np.asarray(self.embeddings, dtype=np.float64)
        if emb.ndim != 2 or emb.shape[0] < 1:
            raise DimensionMismatch(f"gallery embeddings must be a non-empty S x D array, got {emb.shape}")
        labels = tuple(self.labels)
        ids = tuple(self.ids)
        if not (len(labels) == len(ids) == emb.shape[0]):
            raise DimensionMismatch(
                f"gallery has {emb.shape[0]} embeddings, {len(labels)} labels and {len(ids)} ids"
            )
        if len(set(ids)) != len(ids):
            raise InvalidInput("gallery ids must be unique")
        norms = np.linalg.norm(emb, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise InvalidInput("gallery embeddings must be l2-normalized")
        object.__setattr__(self, "embeddings", emb)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "ids", ids)

    @classmethod
    def from_descriptors(cls, descriptors, labels, ids=None):
        rows = [d.xi if isinstance(d, pooling.GlobalDescriptor) else np.asarray(d) for d in descriptors]
        if ids is None:
            ids = range(len(rows))
        return cls(np.vstack(rows), labels, ids)

    def __len__(self):
        return self.embeddings.shape[0]


@dataclass(frozen=True)
class TripletConfig:
    """Batch-hard triplet settings. The reference setup used ``P=14, K=4``."""

    margin: float = 0.1
    P: int = 4
    K: int = 2
    distance: str = "euclidean"

    def __post_init__(self):
        if self.margin < 0:
            raise InvalidInput(f"margin must be non-negative, got {self.margin}")
        if self.P < 2 or self.K < 2:
            raise InvalidInput(f"batch-hard mining needs P >= 2 and K >= 2, got P={self.P}, K={self.K}")
        if self.distance not in DISTANCES:
            raise InvalidInput(f"unknown distance {self.distance!r}; expected one of {DISTANCES}")


@dataclass
class RetrievalReport:
    query_ids: list
    ap: np.ndarray  # NaN for excluded queries
    mAP: float
    top1: float
    excluded: list = field(default_factory=list)
    rankings: Optional[list] = None

    def to_dict(self):
        return {
            "mAP": self.mAP,
            "top1": self.top1,
            "n_queries": int(np.sum(~np.isnan(self.ap))),
            "excluded": list(self.excluded),
            "per_query": [
                {"id": q, "ap": None if np.isnan(a) else float(a)} for q, a in zip(self.query_ids, self.ap)
            ],
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, default=str)

    def to_csv(self):
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["id", "ap"])
        for q, a in zip(self.query_ids, self.ap):
            writer.writerow([q, "" if np.isnan(a) else repr(float(a))])
        return buf.getvalue()


def pairwise_dist(embeddings, metric="euclidean"):
    """Distance matrix between the rows of ``embeddings`` (or a gallery's embeddings)."""
    if isinstance(embeddings, EmbeddingGallery):
        embeddings = embeddings.embeddings
    e = np.asarray(embeddings, dtype=np.float64)
    if e.ndim != 2:
        raise DimensionMismatch(f"expected an S x D array, got shape {e.shape}")
    if metric == "euclidean":
        diff = e[:, None, :] - e[None, :, :]
        return np.sqrt(np.einsum("ijk,ijk->ij", diff, diff))
    if metric == "cosine":
        unit = e / np.linalg.norm(e, axis=1, keepdims=True)
        sim = unit @ unit.T
        dist = 1.0 - 0.5 * (sim + sim.T)
        np.fill_diagonal(dist, 0.0)
        return dist
    raise InvalidInput(f"unknown distance {metric!r}")


def average_precision(ranked_relevance, n_relevant):
    rel = np.asarray(ranked_relevance, dtype=bool)
    if n_relevant < 1:
        raise NoRelevant("average precision is undefined without relevant items")
    hits = np.cumsum(rel)
    ranks = np.arange(1, rel.size + 1)
    return float(np.sum((hits / ranks)[rel]) / n_relevant)


def _id_order(ids):
    order = sorted(range(len(ids)), key=lambda i: ids[i])
    rank = np.empty(len(ids), dtype=np.int64)
    rank[order] = np.arange(len(ids))
    return rank


def evaluate(gallery, leave_one_out=True, metric="euclidean", keep_rankings=False):
    """Every item queries the gallery; rank by distance, ties by ascending id.

    Queries without another item of their class are excluded from mAP and
    top-1 with a warning.
    """
    dist = pairwise_dist(gallery.embeddings, metric)
    labels = np.asarray(gallery.labels, dtype=object)
    id_rank = _id_order(gallery.ids)
    s = len(gallery)
    ap = np.full(s, np.nan)
    top1_hits = []
    excluded = []
    rankings = [] if keep_rankings else None
    for q in range(s):
        order = np.lexsort((id_rank, dist[q]))
        if leave_one_out:
            order = order[order != q]
        rel = labels[order] == labels[q]
        n_rel = int(rel.sum())
        if keep_rankings:
            rankings.append([gallery.ids[i] for i in order])
        if n_rel == 0 or (not leave_one_out and n_rel == 1):
            excluded.append(gallery.ids[q])
            continue
        ap[q] = average_precision(rel, n_rel)
        # top-1 is the nearest item other than the query itself
        top1_hits.append(bool(rel[order != q][0]))
    if excluded:
        log.warning("excluded %d queries without other members of their class", len(excluded))
    valid = ap[~np.isnan(ap)]
    if valid.size == 0:
        raise NoRelevant("no query has a relevant item in the gallery")
    return RetrievalReport(
        query_ids=list(gallery.ids),
        ap=ap,
        mAP=math.fsum(valid) / valid.size,
        top1=float(np.mean(top1_hits)),
        excluded=excluded,
        rankings=rankings,
    )


def _check_batch(labels):
    labels = np.asarray(labels)
    values, counts = np.unique(labels, return_counts=True)
    if values.size < 2:
        raise DegenerateBatch("batch-hard triplet loss needs at least two classes in the batch")
    if np.any(counts < 2):
        raise DegenerateBatch(f"classes {values[counts < 2].tolist()} have a single member in the batch")
    return labels


def _distances(emb, metric):
    # emb is D x B; distances between columns
    return pairwise_dist(emb.T, metric)


def _hard_pairs(dist, labels):
    same = labels[:, None] == labels[None, :]
    np.fill_diagonal(same, False)
    diff = labels[:, None] != labels[None, :]
    pos = np.argmax(np.where(same, dist, -np.inf), axis=1)
    neg = np.argmin(np.where(diff, dist, np.inf), axis=1)
    return pos, neg, same, diff


def _dist_grad(ea, eb, d, metric):
    """Gradient of ``dist(ea, eb)`` with respect to ``ea`` (by symmetry, ``eb`` gets the mirrored form)."""
    if metric == "euclidean":
        if d == 0.0:
            return np.zeros_like(ea)
        return (ea - eb) / d
    na = np.linalg.norm(ea)
    nb = np.linalg.norm(eb)
    cos = ea @ eb / (na * nb)
    return -(eb / nb - cos * ea / na) / na


def batch_hard_triplet_loss(embeddings, labels, cfg, with_grad=True):
    """Sum over anchors of ``[m + d(a, hardest p) - d(a, hardest n)]_+``.

    ``embeddings`` is ``D x B`` (one column per sample). Returns
    ``(loss, d_embeddings)``; the gradient is ``None`` when ``with_grad`` is false.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = _check_batch(labels)
    if emb.ndim != 2 or emb.shape[1] != labels.size:
        raise DimensionMismatch(f"embeddings {emb.shape} do not match {labels.size} labels")
    dist = _distances(emb, cfg.distance)
    pos, neg, _, _ = _hard_pairs(dist, labels)
    b = labels.size
    hinge = cfg.margin + dist[np.arange(b), pos] - dist[np.arange(b), neg]
    active = hinge > 0
    loss = float(np.sum(hinge[active]))
    if not with_grad:
        return loss, None
    grad = np.zeros_like(emb)
    for a in np.flatnonzero(active):
        p, n = pos[a], neg[a]
        gp = _dist_grad(emb[:, a], emb[:, p], dist[a, p], cfg.distance)
        gpp = _dist_grad(emb[:, p], emb[:, a], dist[a, p], cfg.distance)
        gn = _dist_grad(emb[:, a], emb[:, n], dist[a, n], cfg.distance)
        gnn = _dist_grad(emb[:, n], emb[:, a], dist[a, n], cfg.distance)
        grad[:, a] += gp - gn
        grad[:, p] += gpp
        grad[:, n] -= gnn
    return loss, grad


def triplet_selection_margin(embeddings, labels, cfg):
    """Smallest gap separating the current hard-pair selection or hinge state from a switch.

    Small values mean the loss sits at (or next to) a kink.
    """
    emb = np.asarray(embeddings, dtype=np.float64)
    labels = _check_batch(labels)
    dist = _distances(emb, cfg.distance)
    pos, neg, same, diff = _hard_pairs(dist, labels)
    b = labels.size
    gaps = []
    for a in range(b):
        ps = np.sort(dist[a][same[a]])
        ns = np.sort(dist[a][diff[a]])
        if ps.size > 1:
            gaps.append(ps[-1] - ps[-2])
        if ns.size > 1:
            gaps.append(ns[1] - ns[0])
        gaps.append(abs(cfg.margin + dist[a, pos[a]] - dist[a, neg[a]]))
    return float(min(gaps))


def pk_sampler(labels, P, K, rng_seed=0):
    """One epoch of P x K batches as lists of item indices.

    Classes are visited in shuffled order, ``P`` per batch; a short final group
    is topped up with other randomly chosen classes. Classes with fewer than
    ``K`` items are sampled with replacement. ``rng_seed`` may be an int or a
    ``numpy.random.Generator``.
    """
    rng = np.random.default_rng(rng_seed)
    labels = np.asarray(labels, dtype=object)
    classes = sorted(set(labels.tolist()), key=str)
    if len(classes) < P:
        raise NotEnoughClasses(f"need at least P={P} classes, found {len(classes)}")
    members = {c: np.flatnonzero(labels == c) for c in classes}
    perm = [classes[i] for i in rng.permutation(len(classes))]
    batches = []
    for start in range(0, len(perm), P):
        group = perm[start:start + P]
        if len(group) < P:
            rest = [c for c in classes if c not in group]
            extra = rng.choice(len(rest), P - len(group), replace=False)
            group = group + [rest[i] for i in extra]
        batch = []
        for c in group:
            idx = members[c]
            batch.extend(rng.choice(idx, K, replace=idx.size < K).tolist())
        batches.append(batch)
    return batches


def multi_descriptor_embed(sets: Sequence, model):
    """Embed each descriptor set with ``model``, average the normalized results, renormalize."""
    if len(sets) < 1:
        raise InvalidInput("need at least one descriptor set")
    vecs = []
    for ds in sets:
        out = model(ds)
        xi = out.xi if isinstance(out, pooling.GlobalDescriptor) else np.asarray(out, dtype=np.float64)
        vecs.append(pooling.l2_normalize(xi))
    mean = np.sum(vecs, axis=0) / len(vecs)
    return pooling.GlobalDescriptor(pooling.l2_normalize(mean), True)
