"""Gallery/probe retrieval metrics: rank-1, mAP and mINP."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np

logger = logging.getLogger(__name__)


@dataclass
class EvalResult:
    rank1: float  # percent
    map: float
    minp: float
    ap: list = field(default_factory=list)  # per evaluated probe, in [0, 1]
    inp: list = field(default_factory=list)
    hits: list = field(default_factory=list)  # rank-1 hit per evaluated probe
    excluded: list = field(default_factory=list)  # probe indices without a gallery positive

    @property
    def n_probes(self):
        return len(self.ap)

    @classmethod
    def from_lists(cls, hits, ap, inp, excluded=()):
        if not ap:
            return cls(0.0, 0.0, 0.0, [], [], [], list(excluded))
        return cls(
            100.0 * float(np.mean(hits)),
            100.0 * float(np.mean(ap)),
            100.0 * float(np.mean(inp)),
            list(ap), list(inp), list(hits), list(excluded),
        )

    @classmethod
    def pooled(cls, results):
        """Combine results over disjoint probe sets (e.g. illumination conditions)."""
        hits, ap, inp = [], [], []
        for r in results:
            hits += r.hits
            ap += r.ap
            inp += r.inp
        return cls.from_lists(hits, ap, inp)


def distance_matrix(probe, gallery, metric="euclidean"):
    probe = np.asarray(probe, dtype=np.float64)
    gallery = np.asarray(gallery, dtype=np.float64)
    d2 = ((probe[:, None, :] - gallery[None, :, :]) ** 2).sum(axis=-1)
    if metric == "sqeuclidean":
        return d2
    if metric == "euclidean":
        return np.sqrt(d2)
    raise ValueError(f"unknown metric {metric!r}")


def evaluate(gallery, gallery_labels, probe, probe_labels, gallery_ids=None, probe_ids=None,
             metric="euclidean", distances=None) -> EvalResult:
    """Rank the gallery for every probe by distance.

    Ties are broken by gallery sample id (or gallery index when no ids are
    given). A gallery entry with the same sample id as the probe is skipped, so
    passing the same set as gallery and probe evaluates leave-one-out. Probes
    whose identity has no gallery sample are excluded from the averages and
    listed in ``excluded``.
    """
    gallery_labels = np.asarray(gallery_labels)
    probe_labels = np.asarray(probe_labels)
    d = distance_matrix(probe, gallery, metric) if distances is None else np.asarray(distances)
    n_g = len(gallery_labels)
    if gallery_ids is None:
        tie = np.arange(n_g)
    else:
        tie = np.argsort(np.argsort(np.asarray(gallery_ids), kind="stable"), kind="stable")
    hits, aps, inps, excluded = [], [], [], []
    for q in range(len(probe_labels)):
        keep = np.ones(n_g, dtype=bool)
        if probe_ids is not None and gallery_ids is not None:
            keep &= np.asarray(gallery_ids) != probe_ids[q]
        idx = np.nonzero(keep)[0]
        order = idx[np.lexsort((tie[idx], d[q, idx]))]
        match = gallery_labels[order] == probe_labels[q]
        if not match.any():
            excluded.append(q)
            continue
        pos_rank = np.nonzero(match)[0] + 1  # 1-based ranks of positives
        hits.append(float(match[0]))
        aps.append(float(np.mean(np.arange(1, len(pos_rank) + 1) / pos_rank)))
        inps.append(len(pos_rank) / float(pos_rank[-1]))
    if excluded:
        logger.warning("%d probe(s) have no gallery sample of their identity and were excluded", len(excluded))
    return EvalResult.from_lists(hits, aps, inps, excluded)
