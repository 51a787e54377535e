"""Matrix-factorization collaborative model and its contrastive
pre-alignment against the distilled semantic bank.

The hybrid stage-2 objective is L_collab + lambda * L_align, where L_collab
is a positive mean squared error between labels and inner-product scores,
and L_align is standard InfoNCE over in-batch items: each anchor's projected
collaborative vector is scored by cosine against every batch item's semantic
vector at temperature tau, and the log-ratio of the matching pair is
maximized.  (The source formulation prints a negated square loss and an
InfoNCE variant without the log whose denominator is constant in the
anchor; both are implemented here in their standard, trainable forms.)

The semantic bank itself is trainable in this stage, so alignment is
bidirectional; with lambda = 0 the stage reduces exactly to plain MF and
the bank and projection are returned untouched.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from .distill import SemanticBank
from .evalrep import auc
from .optim import Adam
from .tensor import (Graph, Node, NonFiniteError, TensorError, load_tensor,
                     save_tensor)


class CollabError(Exception):
    pass


class CollabModel:
    """User/item embedding tables with an inner-product scorer."""

    def __init__(self, n_users: int, n_items: int, d_c: int, seed: int = 0):
        # seed is spawned with a stream tag so init never replays the bit
        # stream of another consumer of the same base seed (e.g. the
        # synthetic dataset's planted factors)
        rng = np.random.default_rng([seed, 2])
        self.d_c = d_c
        self.user_table = rng.normal(scale=0.01, size=(n_users, d_c))
        self.item_table = rng.normal(scale=0.01, size=(n_items, d_c))

    def predict(self, u: int, i: int) -> float:
        if not 0 <= u < len(self.user_table):
            raise CollabError(f"user id {u} out of range")
        if not 0 <= i < len(self.item_table):
            raise CollabError(f"item id {i} out of range")
        return float(self.user_table[u] @ self.item_table[i])

    def scores(self, users, items) -> np.ndarray:
        users = np.asarray(users, dtype=int)
        items = np.asarray(items, dtype=int)
        if users.max(initial=-1) >= len(self.user_table) or \
                items.max(initial=-1) >= len(self.item_table):
            raise CollabError("id out of range in batch scoring")
        return np.sum(self.user_table[users] * self.item_table[items], axis=1)

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        save_tensor(os.path.join(out_dir, "user_table.bin"), self.user_table)
        save_tensor(os.path.join(out_dir, "item_table.bin"), self.item_table)

    @classmethod
    def load(cls, in_dir: str) -> "CollabModel":
        model = cls.__new__(cls)
        model.user_table = load_tensor(os.path.join(in_dir, "user_table.bin"))
        model.item_table = load_tensor(os.path.join(in_dir, "item_table.bin"))
        model.d_c = model.user_table.shape[1]
        return model


class ProjCtoL:
    """Two-layer GELU mapping d_C -> d_L (hidden width defaults to 2*d_C).

    Weights are stored in (out, in) orientation; `W1` is (h, d_C) and `W2`
    is (d_L, h).  Initialization is Gaussian with scale 1/sqrt(fan_in),
    biases zero.
    """

    def __init__(self, d_c: int, d_l: int, hidden: int | None = None,
                 seed: int = 0):
        h = hidden if hidden is not None else 2 * d_c
        rng = np.random.default_rng([seed, 3])
        self.params: dict[str, np.ndarray] = {
            "W1": rng.normal(scale=1.0 / math.sqrt(d_c), size=(h, d_c)),
            "b1": np.zeros(h),
            "W2": rng.normal(scale=1.0 / math.sqrt(h), size=(d_l, h)),
            "b2": np.zeros(d_l),
        }

    @property
    def d_c(self) -> int:
        return self.params["W1"].shape[1]

    @property
    def d_l(self) -> int:
        return self.params["W2"].shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        """Map an (n, d_C) array to (n, d_L) in evaluation mode."""
        x = np.atleast_2d(np.asarray(x, dtype=np.float64))
        g = Graph()
        leaves = self.leaves(g)
        out = self.apply_graph(g, leaves, g.leaf(x))
        return out.out.numpy()

    def leaves(self, g: Graph, trainable: set[str] = frozenset(),
               prefix: str = "proj_cl.") -> dict[str, Node]:
        return {prefix + n: g.leaf(a, param=(prefix + n) in trainable)
                for n, a in self.params.items()}

    def apply_graph(self, g: Graph, leaves: dict[str, Node], x: Node,
                    prefix: str = "proj_cl.") -> Node:
        h = g.add(g.matmul(x, g.transpose(leaves[prefix + "W1"])),
                  leaves[prefix + "b1"])
        return g.add(g.matmul(g.gelu(h), g.transpose(leaves[prefix + "W2"])),
                     leaves[prefix + "b2"])

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for n, a in self.params.items():
            save_tensor(os.path.join(out_dir, f"proj_cl.{n}.bin"), a)

    @classmethod
    def load(cls, in_dir: str) -> "ProjCtoL":
        proj = cls.__new__(cls)
        proj.params = {
            n: load_tensor(os.path.join(in_dir, f"proj_cl.{n}.bin"))
            for n in ("W1", "b1", "W2", "b2")}
        return proj


@dataclass
class AlignConfig:
    tau: float = 0.07
    lam: float = 0.1
    batch_size: int = 256
    epochs: int = 200
    seed: int = 0
    d_c: int = 32
    lr: float = 1e-3
    patience: int = 5
    weight_decay: float = 0.0

    def __post_init__(self):
        if self.tau <= 0:
            raise CollabError(f"temperature must be positive, got {self.tau}")
        if self.lam < 0:
            raise CollabError(f"lambda must be >= 0, got {self.lam}")
        if self.epochs < 1:
            raise CollabError(f"epochs must be >= 1, got {self.epochs}")
        if self.weight_decay < 0:
            raise CollabError(
                f"weight_decay must be >= 0, got {self.weight_decay}")


# ---------------------------------------------------------------------------
# losses


def collab_loss_graph(g: Graph, user_rows: Node, item_rows: Node,
                      labels: np.ndarray) -> Node:
    """Mean squared error between labels and inner-product scores."""
    d = user_rows.shape[1]
    ones = g.leaf(np.ones((d, 1)))
    scores = g.matmul(g.mul(user_rows, item_rows), ones)     # (B, 1)
    diff = g.add(scores, g.leaf(-labels.reshape(-1, 1)))
    return g.mean(g.mul(diff, diff))


def collab_loss(model: CollabModel, batch) -> float:
    """MSE over (u, i, y) triples."""
    if not len(batch):
        raise CollabError("empty batch")
    uu, ii, yy = (np.asarray(col) for col in zip(*batch))
    return float(np.mean((yy - model.scores(uu, ii)) ** 2))


def align_loss_graph(g: Graph, projected: Node, bank_rows: Node,
                     tau: float) -> Node:
    """InfoNCE over in-batch negatives on the cosine similarity matrix."""
    sims = g.cosine_similarity(projected, bank_rows)          # (B, B)
    probs = g.row_softmax(g.scale(sims, 1.0 / tau))
    b = probs.shape[0]
    diag = g.mul(probs, g.leaf(np.eye(b)))
    picked = g.matmul(diag, g.leaf(np.ones((b, 1))))          # (B, 1) = p_ii
    return g.scale(g.mean(g.log(picked)), -1.0)


def align_loss(item_vectors: np.ndarray, proj: ProjCtoL,
               bank_vectors: np.ndarray, tau: float) -> float:
    """Evaluation-mode InfoNCE for a batch of items."""
    item_vectors = np.atleast_2d(np.asarray(item_vectors, dtype=np.float64))
    bank_vectors = np.atleast_2d(np.asarray(bank_vectors, dtype=np.float64))
    if len(item_vectors) == 0:
        raise CollabError("empty align batch")
    g = Graph()
    leaves = proj.leaves(g)
    projected = proj.apply_graph(g, leaves, g.leaf(item_vectors))
    return align_loss_graph(g, projected, g.leaf(bank_vectors),
                            tau).out.item()


# ---------------------------------------------------------------------------
# stage-2 training


def mean_alignment_cosine(model: CollabModel, proj: ProjCtoL,
                          bank: SemanticBank, item_ids) -> float:
    """Mean cos(proj(e^C_i), e^L_i) over the given items."""
    ids = sorted(set(int(i) for i in item_ids))
    projected = proj(model.item_table[ids])
    semantic = bank.rows_for(ids)
    na = np.linalg.norm(projected, axis=1)
    nb = np.linalg.norm(semantic, axis=1)
    ok = (na > 0) & (nb > 0)
    return float(np.mean(np.sum(projected[ok] * semantic[ok], axis=1)
                         / (na[ok] * nb[ok])))


def train_stage2(dataset, bank: SemanticBank, config: AlignConfig,
                 log=None) -> tuple[CollabModel, SemanticBank, ProjCtoL]:
    """Hybrid MF + alignment training; returns (E^C', E^L_I', Proj^{C->L}').

    Trains on the train split, selects the best-validation-AUC snapshot with
    early stopping, and marks the returned bank `aligned`.  The alignment
    term runs over the unique items of each interaction batch, so items
    absent from train keep their distilled bank rows; their collab rows see
    no gradient either (only the decoupled weight decay, when enabled,
    shrinks them toward the zero-information score).
    """
    if bank.provenance != "distilled":
        raise CollabError(
            f"stage 2 expects a distilled bank, got {bank.provenance!r}")
    train = [(r.user_id, r.item_id, r.label)
             for r in dataset.interactions if r.split == "train"]
    valid = [(r.user_id, r.item_id, r.label)
             for r in dataset.interactions if r.split == "valid"]
    if not train or not valid:
        raise CollabError("stage 2 needs non-empty train and valid splits")

    model = CollabModel(dataset.num_users, dataset.num_items, config.d_c,
                        seed=config.seed)
    proj = ProjCtoL(config.d_c, bank.dim, seed=config.seed)
    bank_vectors = bank.vectors.copy()
    bank_row = {i: r for r, i in enumerate(bank.item_ids)}

    params = {"user_table": model.user_table, "item_table": model.item_table}
    if config.lam > 0:
        params.update({f"proj_cl.{n}": a for n, a in proj.params.items()})
        params["bank"] = bank_vectors
    opt = Adam(lr=config.lr)
    rng = np.random.default_rng([config.seed, 5])
    uu_t, ii_t, yy_t = (np.asarray(c) for c in zip(*train))
    uu_v, ii_v, yy_v = (np.asarray(c) for c in zip(*valid))

    best = None
    best_auc = -1.0
    stale = 0
    for epoch in range(config.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.batch_size):
            take = order[start:start + config.batch_size]
            g = Graph()
            u_leaf = g.leaf(params["user_table"], param=True)
            i_leaf = g.leaf(params["item_table"], param=True)
            u_rows = g.embedding_lookup(u_leaf, tuple(uu_t[take]))
            i_rows = g.embedding_lookup(i_leaf, tuple(ii_t[take]))
            loss = collab_loss_graph(g, u_rows, i_rows, yy_t[take])
            leaf_of = {"user_table": u_leaf, "item_table": i_leaf}
            if config.lam > 0:
                batch_items = sorted(set(ii_t[take].tolist()))
                proj_leaves = proj.leaves(
                    g, trainable={f"proj_cl.{n}" for n in proj.params})
                bank_leaf = g.leaf(params["bank"], param=True)
                item_rows = g.embedding_lookup(i_leaf, tuple(batch_items))
                bank_rows = g.embedding_lookup(
                    bank_leaf, tuple(bank_row[i] for i in batch_items))
                projected = proj.apply_graph(g, proj_leaves, item_rows)
                align = align_loss_graph(g, projected, bank_rows, config.tau)
                loss = g.add(loss, g.scale(align, config.lam))
                leaf_of.update(proj_leaves)
                leaf_of["bank"] = bank_leaf
            try:
                grads = g.backward(loss)
            except TensorError as e:
                raise NonFiniteError(
                    f"stage-2 loss diverged at epoch {epoch}: {e}") from e
            # in-place Adam step keeps model/proj arrays in sync with params
            opt.step(params,
                     {n: grads[leaf.nid].numpy()
                      for n, leaf in leaf_of.items() if leaf.nid in grads})
            if config.weight_decay:
                shrink = 1.0 - config.lr * config.weight_decay
                params["user_table"] *= shrink
                params["item_table"] *= shrink
        val_auc = auc(model.scores(uu_v, ii_v), yy_v)
        if log is not None:
            log(f"stage2 epoch {epoch} val_auc {val_auc:.4f}")
        if val_auc > best_auc:
            best_auc = val_auc
            best = (model.user_table.copy(), model.item_table.copy(),
                    {n: a.copy() for n, a in proj.params.items()},
                    bank_vectors.copy() if config.lam > 0 else None)
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break

    model.user_table, model.item_table = best[0], best[1]
    proj.params = best[2]
    out_vectors = best[3] if best[3] is not None else bank.vectors.copy()
    aligned = bank.with_vectors(out_vectors, provenance="aligned")
    return model, aligned, proj


def save_stage2(out_dir: str, model: CollabModel, bank: SemanticBank,
                proj: ProjCtoL, config: AlignConfig) -> None:
    os.makedirs(out_dir, exist_ok=True)
    model.save(out_dir)
    proj.save(out_dir)
    bank.save(out_dir)
    with open(os.path.join(out_dir, "stage2.json"), "w",
              encoding="utf-8") as f:
        json.dump({"lam": config.lam, "tau": config.tau,
                   "seed": config.seed, "d_c": config.d_c},
                  f, indent=2, sort_keys=True)
