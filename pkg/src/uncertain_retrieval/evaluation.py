"""Cosine ranking and Recall@K, overall and split by query granularity."""
import csv
import io
import json
from dataclasses import dataclass, field

import numpy as np

from . import kernels
from .numeric import as_features, cosine_matrix, cosine_sim
from .synthdata import COARSE

DEFAULT_KS = (1, 10, 50)
STRATA = ("all", "coarse", "fine")


@dataclass
class RecallReport:
    per_k: dict
    n_queries: int
    stratum: str = "all"
    # recall when any valid target counts as a hit; not the standard protocol
    any_valid: dict = field(default_factory=dict)

    def to_dict(self):
        return {
            "stratum": self.stratum,
            "n_queries": self.n_queries,
            "per_k": {str(k): v for k, v in self.per_k.items()},
            "any_valid": {str(k): v for k, v in self.any_valid.items()},
        }

    @classmethod
    def from_dict(cls, raw):
        return cls(
            per_k={int(k): v for k, v in raw["per_k"].items()},
            n_queries=raw["n_queries"],
            stratum=raw["stratum"],
            any_valid={int(k): v for k, v in raw.get("any_valid", {}).items()},
        )


def rank(query, gallery):
    """Gallery row indices by descending cosine similarity, lower index first on ties."""
    sims = cosine_matrix(np.asarray(query, dtype=np.float64)[None, :], gallery)[0]
    return kernels.rank_order(sims)


def _recall_from_ranks(ranks, ks):
    ranks = np.asarray(ranks)
    if ranks.size == 0:
        return {int(k): None for k in ks}
    return {int(k): float(np.count_nonzero(ranks < k)) / ranks.size for k in ks}


def recall_at_k(ranked_lists, targets, ks=DEFAULT_KS, stratum="all"):
    """Fraction of queries whose labeled target sits in the first K entries of its ranking."""
    ranks = []
    for i, (order, target) in enumerate(zip(ranked_lists, targets)):
        hit = np.flatnonzero(np.asarray(order) == target)
        if hit.size == 0:
            raise ValueError(f"query {i}: target id {target} missing from gallery")
        ranks.append(int(hit[0]))
    return RecallReport(per_k=_recall_from_ranks(ranks, ks), n_queries=len(ranks), stratum=stratum)


def target_ranks(query_features, gallery, targets):
    targets = np.asarray(targets, dtype=np.int64)
    n_gallery = np.asarray(gallery).shape[0]
    if targets.size and (targets.min() < 0 or targets.max() >= n_gallery):
        raise ValueError(f"target id outside gallery of size {n_gallery}")
    if targets.size == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.target_ranks(cosine_matrix(query_features, gallery), targets)


def recall_from_features(query_features, gallery, targets, ks=DEFAULT_KS, stratum="all"):
    """Same result as ``recall_at_k`` over ``rank`` outputs, without materializing orderings."""
    ranks = target_ranks(query_features, gallery, targets)
    return RecallReport(per_k=_recall_from_ranks(ranks, ks), n_queries=int(ranks.size), stratum=stratum)


def recall_oracle(query_features, gallery, targets, k):
    """Brute force: per-pair cosine, full python sort, count hits."""
    q = as_features(query_features, "queries")
    g = as_features(gallery, "gallery")
    hits = 0
    for qi, target in enumerate(targets):
        scored = [(-cosine_sim(q[qi], g[gi]), gi) for gi in range(g.shape[0])]
        scored.sort()
        top = [gi for _, gi in scored[:k]]
        hits += int(target) in top
    return hits / len(targets) if len(targets) else None


def evaluate_features(query_features, gallery_features, queries, ks=DEFAULT_KS):
    """RecallReports for every stratum. ``queries`` is a synthdata TripletSet."""
    if len(queries) == 0:
        sims = np.zeros((0, gallery_features.shape[0]))
    else:
        sims = cosine_matrix(query_features, gallery_features)
    ranks = kernels.target_ranks(sims, queries.target_ids) if len(queries) else np.zeros(0, np.int64)
    best = kernels.best_ranks(sims, queries.valid) if len(queries) else np.zeros(0, np.int64)
    coarse = queries.granularity == COARSE
    masks = {"all": np.ones(len(queries), dtype=bool), "coarse": coarse, "fine": ~coarse}
    out = {}
    for stratum, mask in masks.items():
        out[stratum] = RecallReport(
            per_k=_recall_from_ranks(ranks[mask], ks),
            n_queries=int(mask.sum()),
            stratum=stratum,
            any_valid=_recall_from_ranks(best[mask], ks),
        )
    return out


def reports_to_json(reports):
    return json.dumps([r.to_dict() for r in reports], indent=2, sort_keys=True) + "\n"


def reports_to_csv(reports):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["stratum", "K", "recall", "n"])
    for r in reports:
        for k, v in r.per_k.items():
            writer.writerow([r.stratum, k, "" if v is None else repr(v), r.n_queries])
    return buf.getvalue()
