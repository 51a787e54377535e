"""Evaluation and reporting: AUC/UAUC, warm/cold breakdowns, alignment
cosine histograms, and embedding/attention exports.

AUC uses the average-rank method (ties count half a win) and is checked
against a brute-force pairwise oracle in the test suite.  UAUC averages
per-user AUC over users with at least one positive and one negative test
interaction; excluded users are counted, never silently dropped.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass, field

import numpy as np


class MetricError(Exception):
    """Undefined metric (single-class input) or invalid report request."""


def auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative (ties 0.5)."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1:
        raise MetricError(
            f"scores/labels must be matching 1-D, got {scores.shape} "
            f"and {labels.shape}")
    n_pos = int((labels == 1).sum())
    n_neg = int((labels == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise MetricError(
            f"AUC undefined: {n_pos} positives, {n_neg} negatives")
    _, inverse, counts = np.unique(scores, return_inverse=True,
                                   return_counts=True)
    avg_rank = np.cumsum(counts) - (counts - 1) / 2.0
    ranks = avg_rank[inverse]
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0)
                 / (n_pos * n_neg))


@dataclass
class UAUCResult:
    value: float
    eligible_users: int
    excluded_users: int


def uauc(user_ids, scores, labels) -> UAUCResult:
    """Mean per-user AUC over users with both classes present."""
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    per_user = []
    excluded = 0
    for u in np.unique(user_ids):
        mask = user_ids == u
        if len(set(labels[mask].tolist())) < 2:
            excluded += 1
            continue
        per_user.append(auc(scores[mask], labels[mask]))
    if not per_user:
        raise MetricError("UAUC undefined: no user has both classes")
    return UAUCResult(value=float(np.mean(per_user)),
                      eligible_users=len(per_user),
                      excluded_users=excluded)


# ---------------------------------------------------------------------------
# warm/cold report


@dataclass
class SliceMetrics:
    count: int
    auc: float | None = None
    uauc: float | None = None
    eligible_users: int = 0
    excluded_users: int = 0


@dataclass
class MetricsReport:
    dataset_id: str
    variant: str
    slices: dict[str, SliceMetrics] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset_id,
            "variant": self.variant,
            "slices": {name: vars(m).copy()
                       for name, m in self.slices.items()},
        }


def _slice_metrics(user_ids, scores, labels) -> SliceMetrics:
    m = SliceMetrics(count=len(scores))
    if len(scores) == 0:
        return m
    try:
        m.auc = auc(scores, labels)
    except MetricError:
        m.auc = None  # single-class slice: unavailable, not fabricated
    try:
        r = uauc(user_ids, scores, labels)
        m.uauc, m.eligible_users, m.excluded_users = \
            r.value, r.eligible_users, r.excluded_users
    except MetricError:
        m.uauc = None
        m.excluded_users = len(np.unique(user_ids))
    return m


def warm_cold_report(user_ids, scores, labels, cold_flags,
                     dataset_id: str = "", variant: str = "") -> MetricsReport:
    """AUC/UAUC on the full slice and on warm-only / cold-only partitions."""
    user_ids = np.asarray(user_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    cold = np.asarray(cold_flags, dtype=bool)
    if not (len(user_ids) == len(scores) == len(labels) == len(cold)):
        raise MetricError("report inputs must have equal lengths")
    report = MetricsReport(dataset_id=dataset_id, variant=variant)
    for name, mask in (("all", np.ones(len(scores), dtype=bool)),
                       ("warm", ~cold), ("cold", cold)):
        report.slices[name] = _slice_metrics(user_ids[mask], scores[mask],
                                             labels[mask])
    return report


def render_report(report: MetricsReport) -> str:
    """Aligned text table; columns follow the AUC-then-UAUC convention."""
    def fmt(x):
        return "   n/a" if x is None else f"{x:.4f}"

    lines = [f"dataset={report.dataset_id} variant={report.variant}",
             f"{'slice':<6} {'AUC':>7} {'UAUC':>7} {'n':>7} {'users':>6}"]
    for name in ("all", "warm", "cold"):
        m = report.slices.get(name)
        if m is None:
            continue
        lines.append(f"{name:<6} {fmt(m.auc):>7} {fmt(m.uauc):>7} "
                     f"{m.count:>7} {m.eligible_users:>6}")
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# alignment diagnostics


@dataclass
class CosineReport:
    values: np.ndarray          # per-item cosine, skipped items excluded
    bin_edges: np.ndarray       # 51 edges over [-1, 1]
    counts: np.ndarray          # 50 bins
    mean: float
    median: float
    n_items: int
    n_skipped: int


def cosine_report(item_table: np.ndarray, proj, bank_vectors: np.ndarray,
                  n_bins: int = 50) -> CosineReport:
    """Histogram of cos(proj(e^C_i), e^L_i) over items.

    `proj` maps an (n, d_C) array to (n, d_L).  Items with a zero-norm vector
    on either side are skipped and counted.
    """
    item_table = np.asarray(item_table, dtype=np.float64)
    bank_vectors = np.asarray(bank_vectors, dtype=np.float64)
    if len(item_table) != len(bank_vectors):
        raise MetricError("item table and bank must have matching rows")
    projected = np.asarray(proj(item_table), dtype=np.float64)
    na = np.linalg.norm(projected, axis=1)
    nb = np.linalg.norm(bank_vectors, axis=1)
    ok = (na > 0) & (nb > 0)
    vals = np.sum(projected[ok] * bank_vectors[ok], axis=1) / (na[ok] * nb[ok])
    edges = np.linspace(-1.0, 1.0, n_bins + 1)
    counts, _ = np.histogram(np.clip(vals, -1.0, 1.0), bins=edges)
    return CosineReport(values=vals, bin_edges=edges, counts=counts,
                        mean=float(vals.mean()) if len(vals) else float("nan"),
                        median=float(np.median(vals)) if len(vals)
                        else float("nan"),
                        n_items=len(item_table), n_skipped=int((~ok).sum()))


def write_cosine_csv(report: CosineReport, path: str) -> None:
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["bin_lo", "bin_hi", "count"])
        for lo, hi, c in zip(report.bin_edges[:-1], report.bin_edges[1:],
                             report.counts):
            w.writerow([repr(float(lo)), repr(float(hi)), int(c)])


def embedding_export(bank_vectors: np.ndarray, item_table: np.ndarray,
                     proj, path: str) -> int:
    """Write collab-projected and semantic vectors as labeled CSV rows.

    Two rows per item (source in {collab-projected, semantic}); float values
    are written with repr so parsing recovers them exactly.  Returns the row
    count.
    """
    bank_vectors = np.asarray(bank_vectors, dtype=np.float64)
    projected = np.asarray(proj(np.asarray(item_table, dtype=np.float64)),
                           dtype=np.float64)
    if projected.shape != bank_vectors.shape:
        raise MetricError(
            f"projected shape {projected.shape} != bank {bank_vectors.shape}")
    d = bank_vectors.shape[1]
    rows = 0
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["item_id", "source"] + [f"v{j}" for j in range(d)])
        for i in range(len(bank_vectors)):
            w.writerow([i, "collab-projected"]
                       + [repr(float(x)) for x in projected[i]])
            w.writerow([i, "semantic"]
                       + [repr(float(x)) for x in bank_vectors[i]])
            rows += 2
    return rows


# ---------------------------------------------------------------------------
# attention export


def attention_export(attn_by_layer: list[np.ndarray],
                     token_labels: list[str], layer_ids: list[int],
                     path: str) -> dict[int, np.ndarray]:
    """Write head-averaged attention matrices for the requested layers.

    `attn_by_layer` holds one (seq, seq) row-stochastic matrix per model
    layer.  Output CSV columns: layer, q_index, q_token, then one column per
    key token.  Returns {layer_id: matrix}.
    """
    n_layers = len(attn_by_layer)
    for lid in layer_ids:
        if not 0 <= lid < n_layers:
            raise MetricError(
                f"layer {lid} invalid for a {n_layers}-layer model")
    labels = [t.replace(",", ";") for t in token_labels]
    out: dict[int, np.ndarray] = {}
    with open(path, "w", newline="", encoding="utf-8") as f:
        w = csv.writer(f)
        w.writerow(["layer", "q_index", "q_token"]
                   + [f"k{j}_{t}" for j, t in enumerate(labels)])
        for lid in layer_ids:
            mat = np.asarray(attn_by_layer[lid], dtype=np.float64)
            if np.max(np.abs(mat.sum(axis=1) - 1.0)) > 1e-9:
                raise MetricError(
                    f"layer {lid} attention rows do not sum to 1")
            out[lid] = mat
            for q in range(mat.shape[0]):
                w.writerow([lid, q, labels[q]]
                           + [repr(float(x)) for x in mat[q]])
    return out
