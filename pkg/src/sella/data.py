"""Interaction datasets: ingestion, binarization, temporal splitting,
warm/cold tagging, and synthetic planted-factor generation.

Ratings are binarized with a strict rule (label 1 iff rating > threshold)
applied uniformly; the split is a single global chronological cut, earliest
fraction to train, then valid, then test.  A test/valid interaction is cold
when its item never occurs in the train split.
"""

from __future__ import annotations

import bisect
import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field

import numpy as np

SPLITS = ("train", "valid", "test")


class DataError(Exception):
    """Malformed input, empty result, or degenerate configuration."""


@dataclass
class Interaction:
    user_id: int
    item_id: int
    rating: int
    timestamp: int
    label: int
    split: str = ""
    cold: bool = False


@dataclass
class InteractionDataset:
    """Immutable-by-convention container; build via `build_dataset`.

    `interactions` is globally time-sorted; `history` maps each user to the
    chronological global indices of their interactions.  `user_factors` /
    `item_factors` are populated only by `synth_generate` (diagnostics for
    planted-structure checks); ingestion leaves them None.
    """

    items: dict[int, str]
    users: set[int]
    interactions: list[Interaction]
    history: dict[int, list[int]] = field(default_factory=dict)
    user_factors: np.ndarray | None = None
    item_factors: np.ndarray | None = None

    @property
    def num_users(self) -> int:
        return max(self.users) + 1 if self.users else 0

    @property
    def num_items(self) -> int:
        return max(self.items) + 1 if self.items else 0

    def user_history(self, user_id: int, before_index: int,
                     k: int) -> list[Interaction]:
        """Last <=k interactions of `user_id` strictly before global index
        `before_index` (i.e. strictly earlier in time)."""
        idx = self.history.get(user_id, [])
        stop = bisect.bisect_left(idx, before_index)
        return [self.interactions[j] for j in idx[max(0, stop - k):stop]]

    def split_indices(self, split: str) -> list[int]:
        return [j for j, r in enumerate(self.interactions) if r.split == split]


def build_dataset(items: dict[int, str],
                  interactions: list[Interaction],
                  user_factors: np.ndarray | None = None,
                  item_factors: np.ndarray | None = None) -> InteractionDataset:
    """Sort interactions chronologically (stable) and index user histories."""
    for r in interactions:
        if r.item_id not in items:
            raise DataError(f"interaction references unknown item {r.item_id}")
        if r.label not in (0, 1):
            raise DataError(f"label must be 0 or 1, got {r.label}")
    order = sorted(range(len(interactions)),
                   key=lambda j: (interactions[j].timestamp, j))
    rows = [interactions[j] for j in order]
    history: dict[int, list[int]] = {}
    users: set[int] = set()
    for j, r in enumerate(rows):
        users.add(r.user_id)
        history.setdefault(r.user_id, []).append(j)
    return InteractionDataset(items=items, users=users, interactions=rows,
                              history=history, user_factors=user_factors,
                              item_factors=item_factors)


# ---------------------------------------------------------------------------
# ingestion


def _split_row(line: str) -> list[str]:
    line = line.rstrip("\n")
    if "::" in line:
        return line.split("::")
    return line.split("\t")


def ingest(ratings_path: str, items_path: str, threshold: int,
           min_user_interactions: int = 0,
           time_window: tuple[int, int] | None = None) -> InteractionDataset:
    """Parse ratings/items files into a labeled dataset.

    Accepts '::'- or tab-separated rows: ratings as (user, item, rating,
    timestamp), items as (item, title).  Label = 1 iff rating > threshold;
    interactions outside `time_window` (inclusive bounds) are dropped; users
    with fewer than `min_user_interactions` surviving interactions are
    removed entirely.
    """
    if threshold not in (3, 4):
        raise DataError(f"threshold must be 3 or 4, got {threshold}")
    items: dict[int, str] = {}
    with open(items_path, encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = _split_row(line)
            if len(parts) < 2:
                raise DataError(f"{items_path}:{lineno}: malformed item row")
            try:
                items[int(parts[0])] = parts[1]
            except ValueError as e:
                raise DataError(f"{items_path}:{lineno}: {e}") from None

    raw: list[Interaction] = []
    with open(ratings_path, encoding="utf-8", errors="replace") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            parts = _split_row(line)
            if len(parts) != 4:
                raise DataError(
                    f"{ratings_path}:{lineno}: expected 4 fields, "
                    f"got {len(parts)}")
            try:
                user, item, rating, ts = (int(parts[0]), int(parts[1]),
                                          int(float(parts[2])), int(parts[3]))
            except ValueError as e:
                raise DataError(f"{ratings_path}:{lineno}: {e}") from None
            if time_window is not None and not (
                    time_window[0] <= ts <= time_window[1]):
                continue
            raw.append(Interaction(user_id=user, item_id=item, rating=rating,
                                   timestamp=ts,
                                   label=int(rating > threshold)))

    if min_user_interactions > 0:
        counts: dict[int, int] = {}
        for r in raw:
            counts[r.user_id] = counts.get(r.user_id, 0) + 1
        raw = [r for r in raw if counts[r.user_id] >= min_user_interactions]
    if not raw:
        raise DataError("ingestion produced an empty dataset")
    return build_dataset(items, raw)


# ---------------------------------------------------------------------------
# splitting and tagging


def temporal_split(dataset: InteractionDataset,
                   ratios: tuple[float, float, float]) -> InteractionDataset:
    """Assign train/valid/test by global chronological order.

    Boundaries at int(n * cumulative_fraction); no shuffling.
    """
    if len(ratios) != 3 or any(r <= 0 for r in ratios):
        raise DataError(f"ratios must be three positive numbers, got {ratios}")
    if not dataset.interactions:
        raise DataError("cannot split an empty dataset")
    n = len(dataset.interactions)
    total = sum(ratios)
    b1 = int(n * ratios[0] / total)
    b2 = int(n * (ratios[0] + ratios[1]) / total)
    sizes = (b1, b2 - b1, n - b2)
    if min(sizes) == 0:
        raise DataError(
            "empty partition under ratios "
            f"{ratios}: train={sizes[0]} valid={sizes[1]} test={sizes[2]}")
    rows = []
    for j, r in enumerate(dataset.interactions):
        split = "train" if j < b1 else ("valid" if j < b2 else "test")
        rows.append(dataclasses.replace(r, split=split))
    return build_dataset(dataset.items, rows, dataset.user_factors,
                         dataset.item_factors)


def tag_warm_cold(dataset: InteractionDataset) -> InteractionDataset:
    """Mark valid/test interactions cold when the item is absent from train."""
    if any(r.split not in SPLITS for r in dataset.interactions):
        raise DataError("splits must be assigned before warm/cold tagging")
    train_items = {r.item_id for r in dataset.interactions
                   if r.split == "train"}
    rows = [dataclasses.replace(r, cold=(r.item_id not in train_items))
            for r in dataset.interactions]
    return build_dataset(dataset.items, rows, dataset.user_factors,
                         dataset.item_factors)


# ---------------------------------------------------------------------------
# synthetic planted-factor datasets

_POS_STEMS = ("bright", "fast", "warm", "dense", "sharp", "bold", "calm",
              "deep")
_NEG_STEMS = ("dark", "slow", "cool", "sparse", "soft", "mild", "wild",
              "flat")

# Latent geometry of the planted factors.  Item dimension 0 is a popularity
# axis (every user weights it 1.0, so it acts as an item bias); the remaining
# dimensions carry taste with a geometrically decaying spectrum.  Head-heavy
# structure like this is what makes low-rank recovery feasible at the low
# observation counts a desk-scale dataset has.
_BIAS_SCALE = 2.5
_DECAY = 0.5


def _cluster_title(item_id: int, factors: np.ndarray) -> str:
    """Deterministic token string encoding the sign/magnitude bucket of each
    latent dimension, plus a unique item token."""
    words = [f"film{item_id:04d}"]
    for d, v in enumerate(factors):
        stem = _POS_STEMS[d % 8] if v > 0 else _NEG_STEMS[d % 8]
        if d >= 8:
            stem += str(d // 8)
        if abs(v) > 1.2:
            stem += "est"
        words.append(stem)
    return " ".join(words)


def synth_generate(n_users: int, n_items: int, rank: int, density: float,
                   noise: float, seed: int, cold_frac: float = 0.08,
                   ratios: tuple[float, float, float] = (10, 5, 5),
                   ) -> InteractionDataset:
    """Planted low-rank dataset with a text channel and built-in cold items.

    Latent factors follow a popularity-plus-taste design: item dimension 0 is
    a bias axis with scale ``_BIAS_SCALE`` that all users weight uniformly,
    and the remaining dimensions decay geometrically.  label = 1 iff
    <u, v> + noise*eps > 0.  Pair exposure is popularity-weighted (weight
    exp(b_i)), as in real logs, so frequently-seen items are also the ones
    dominating valid/test.  Titles encode each item's latent cluster so
    text-only training has learnable signal.  A fixed fraction of items is
    withheld from the train window: their interactions receive post-boundary
    timestamps, so after the chronological split they appear only in
    valid/test (cold).  The returned dataset is already split and tagged.
    """
    if n_users <= 0 or n_items <= 0:
        raise DataError("n_users and n_items must be positive")
    if not 0 < density <= 1:
        raise DataError(f"density must be in (0, 1], got {density}")
    if rank < 1 or rank > min(n_users, n_items):
        raise DataError(f"rank {rank} out of range")
    rng = np.random.default_rng(seed)
    w = _DECAY ** np.arange(rank - 1, dtype=float)
    U = np.concatenate([np.ones((n_users, 1)),
                        rng.normal(size=(n_users, rank - 1)) * w], axis=1)
    V = np.concatenate([_BIAS_SCALE * rng.normal(size=(n_items, 1)),
                        rng.normal(size=(n_items, rank - 1)) * w], axis=1)

    n_pairs = n_users * n_items
    k = max(4, int(round(n_pairs * density)))
    pop_w = np.tile(np.exp(V[:, 0] / _BIAS_SCALE), n_users)
    flat = rng.choice(n_pairs, size=min(k, n_pairs), replace=False,
                      p=pop_w / pop_w.sum())
    uu = flat // n_items
    ii = flat % n_items
    score = np.sum(U[uu] * V[ii], axis=1) + noise * rng.normal(size=len(flat))
    labels = (score > 0).astype(int)

    n_cold = int(round(n_items * cold_frac))
    cold_items = set(rng.choice(n_items, size=n_cold, replace=False).tolist()
                     ) if n_cold else set()
    boundary = int(len(flat) * ratios[0] / sum(ratios))
    is_cold = np.array([i in cold_items for i in ii])
    if is_cold.sum() > len(flat) - boundary:
        raise DataError("cold_frac too large for the post-train window")
    # timestamps are a permutation of 0..k-1 with cold interactions forced
    # past the train boundary
    late = rng.choice(np.arange(boundary, len(flat)), size=int(is_cold.sum()),
                      replace=False)
    rest = np.setdiff1d(np.arange(len(flat)), late)
    rng.shuffle(rest)
    ts = np.empty(len(flat), dtype=int)
    ts[is_cold] = late
    ts[~is_cold] = rest

    # bucket titles on per-dimension z-scores so every axis contributes a
    # meaningful magnitude suffix despite the decaying scales
    scales = np.concatenate([[_BIAS_SCALE], w])
    items = {i: _cluster_title(i, V[i] / scales) for i in range(n_items)}
    rows = [Interaction(user_id=int(u), item_id=int(i), rating=5 if y else 1,
                        timestamp=int(t), label=int(y))
            for u, i, y, t in zip(uu, ii, labels, ts)]
    ds = build_dataset(items, rows, user_factors=U, item_factors=V)
    return tag_warm_cold(temporal_split(ds, ratios))


# ---------------------------------------------------------------------------
# persistence and manifests


def build_manifest(dataset: InteractionDataset,
                   extra: dict | None = None) -> dict:
    """Counts per split plus cold statistics; deterministic key order."""
    counts = {s: 0 for s in SPLITS}
    cold_counts = {s: 0 for s in SPLITS}
    positives = 0
    for r in dataset.interactions:
        key = r.split if r.split in counts else "train"
        counts[key] += 1
        if r.cold:
            cold_counts[key] += 1
        positives += r.label
    train_items = {r.item_id for r in dataset.interactions
                   if r.split == "train"}
    manifest = {
        "n_users": len(dataset.users),
        "n_items": len(dataset.items),
        "n_interactions": len(dataset.interactions),
        "n_positive": positives,
        "splits": counts,
        "cold_interactions": cold_counts,
        "n_cold_items": len(set(dataset.items) - train_items),
        "data_hash": dataset_hash(dataset),
    }
    if extra:
        manifest.update(extra)
    return manifest


def _interaction_lines(dataset: InteractionDataset) -> list[str]:
    return ["\t".join(str(v) for v in (r.user_id, r.item_id, r.rating,
                                       r.timestamp, r.label, r.split,
                                       int(r.cold)))
            for r in dataset.interactions]


def dataset_hash(dataset: InteractionDataset) -> str:
    h = hashlib.sha256()
    for i in sorted(dataset.items):
        h.update(f"{i}\t{dataset.items[i]}\n".encode())
    for line in _interaction_lines(dataset):
        h.update(line.encode() + b"\n")
    return h.hexdigest()[:16]


def save_dataset(dataset: InteractionDataset, out_dir: str,
                 extra_manifest: dict | None = None) -> dict:
    """Write items.tsv, interactions.tsv, and manifest.json; returns the
    manifest."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "items.tsv"), "w", encoding="utf-8") as f:
        for i in sorted(dataset.items):
            f.write(f"{i}\t{dataset.items[i]}\n")
    with open(os.path.join(out_dir, "interactions.tsv"), "w",
              encoding="utf-8") as f:
        f.write("\n".join(_interaction_lines(dataset)) + "\n")
    manifest = build_manifest(dataset, extra_manifest)
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    if dataset.user_factors is not None:
        np.save(os.path.join(out_dir, "user_factors.npy"),
                dataset.user_factors)
        np.save(os.path.join(out_dir, "item_factors.npy"),
                dataset.item_factors)
    return manifest


def load_dataset(in_dir: str) -> InteractionDataset:
    items: dict[int, str] = {}
    with open(os.path.join(in_dir, "items.tsv"), encoding="utf-8") as f:
        for line in f:
            if line.strip():
                i, title = line.rstrip("\n").split("\t", 1)
                items[int(i)] = title
    rows: list[Interaction] = []
    with open(os.path.join(in_dir, "interactions.tsv"),
              encoding="utf-8") as f:
        for line in f:
            if not line.strip():
                continue
            u, i, rating, ts, y, split, cold = line.rstrip("\n").split("\t")
            rows.append(Interaction(user_id=int(u), item_id=int(i),
                                    rating=int(rating), timestamp=int(ts),
                                    label=int(y), split=split,
                                    cold=bool(int(cold))))
    uf = if_ = None
    ufp = os.path.join(in_dir, "user_factors.npy")
    if os.path.exists(ufp):
        uf = np.load(ufp)
        if_ = np.load(os.path.join(in_dir, "item_factors.npy"))
    return build_dataset(items, rows, uf, if_)
