"""Hybrid projection layer: prompts with collaborative placeholder tokens,
projection of the (user, item, warm) triple, and embedding injection.

The three placeholders each occur exactly once per prompt, adjacent to the
textual user/item slots.  Injection replaces the placeholder rows of the
plain embedding lookup bit-exactly (a keep-mask multiply plus a one-hot
scatter matmul, so non-placeholder rows pass through untouched) and the
model adds positional embeddings after substitution, keeping the injected
tokens position-aware.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field

import numpy as np

from .collab import ProjCtoL
from .minilm import Tokenizer, render_sft_prompt, sft_loss
from .tensor import Graph, Node, ShapeError, load_tensor, save_tensor


class FusionError(Exception):
    pass


class ProjWtoL:
    """Square d_L x d_L linear map for the warm token (no bias).

    The map starts random, unlike Proj^{C->L} which is warm-started from
    stage 2.  The Gaussian scale 0.02/sqrt(d_L) puts the initial output at
    token-embedding norm for a layer-norm-scale input, so an untrained warm
    token reads as a near-neutral row instead of drowning its prompt.
    """

    def __init__(self, d_l: int, seed: int = 0):
        rng = np.random.default_rng([seed, 4])
        self.W = rng.normal(scale=0.02 / math.sqrt(d_l), size=(d_l, d_l))

    @property
    def d_l(self) -> int:
        return self.W.shape[0]

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return np.atleast_2d(np.asarray(x, dtype=np.float64)) @ self.W.T

    def leaves(self, g: Graph, trainable: set[str] = frozenset()
               ) -> dict[str, Node]:
        return {"proj_wl.W": g.leaf(self.W,
                                    param="proj_wl.W" in trainable)}

    def apply_graph(self, g: Graph, leaves: dict[str, Node],
                    x: Node) -> Node:
        return g.matmul(x, g.transpose(leaves["proj_wl.W"]))

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        save_tensor(os.path.join(out_dir, "proj_wl.W.bin"), self.W)

    @classmethod
    def load(cls, in_dir: str) -> "ProjWtoL":
        proj = cls.__new__(cls)
        proj.W = load_tensor(os.path.join(in_dir, "proj_wl.W.bin"))
        return proj


@dataclass
class FusionPrompt:
    """Token ids plus the placeholder positions present in this prompt.

    `positions` maps a subset of {"user", "item", "warm"} to distinct token
    indices; ablation variants simply omit keys.
    """

    ids: list[int]
    positions: dict[str, int] = field(default_factory=dict)

    def __post_init__(self):
        seen = set()
        for name, pos in self.positions.items():
            if not 0 <= pos < len(self.ids):
                raise FusionError(f"placeholder {name} position {pos} "
                                  f"outside sequence of {len(self.ids)}")
            if pos in seen:
                raise FusionError(f"duplicate placeholder position {pos}")
            seen.add(pos)


def build_fusion_prompt(tokenizer: Tokenizer,
                        history: list[tuple[str, int]], target_title: str,
                        k: int, *, use_ui: bool = True,
                        use_warm: bool = True) -> FusionPrompt:
    """Stage-3 prompt: the stage-1 template with placeholder tokens."""
    text = render_sft_prompt(history, target_title, k, use_ui=use_ui,
                             use_warm=use_warm)
    ids = tokenizer.encode(text)
    positions = {}
    if use_ui:
        positions["user"] = ids.index(tokenizer.user_id)
        positions["item"] = ids.index(tokenizer.item_id)
    if use_warm:
        positions["warm"] = ids.index(tokenizer.warm_id)
    return FusionPrompt(ids=ids, positions=positions)


# ---------------------------------------------------------------------------
# projection and injection


def project_tokens(e_c_u: np.ndarray, e_c_i: np.ndarray, e_l_i: np.ndarray,
                   proj_cl: ProjCtoL, proj_wl: ProjWtoL
                   ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(e^L_user, e^L_item, e^L_warm): the user and item collaborative
    vectors share Proj^{C->L}; the semantic vector goes through
    Proj^{W->L}."""
    e_c_u = np.asarray(e_c_u, dtype=np.float64)
    e_c_i = np.asarray(e_c_i, dtype=np.float64)
    e_l_i = np.asarray(e_l_i, dtype=np.float64)
    if e_c_u.shape != (proj_cl.d_c,) or e_c_i.shape != (proj_cl.d_c,):
        raise FusionError(
            f"collaborative vectors must be ({proj_cl.d_c},), got "
            f"{e_c_u.shape} and {e_c_i.shape}")
    if e_l_i.shape != (proj_wl.d_l,):
        raise FusionError(
            f"semantic vector must be ({proj_wl.d_l},), got {e_l_i.shape}")
    pair = proj_cl(np.stack([e_c_u, e_c_i]))
    warm = proj_wl(e_l_i)[0]
    return pair[0], pair[1], warm


def inject(plain: np.ndarray, triple: dict[str, np.ndarray],
           positions: dict[str, int]) -> np.ndarray:
    """Replace placeholder rows of the plain lookup with projected vectors.

    Rows at `positions` are overwritten bit-exactly; every other row is the
    original.  Raises on duplicate or out-of-range positions and on
    dimension mismatches.
    """
    plain = np.asarray(plain, dtype=np.float64)
    seq, d = plain.shape
    used = set()
    out = plain.copy()
    for name, pos in positions.items():
        if not 0 <= pos < seq:
            raise FusionError(f"position {pos} outside sequence of {seq}")
        if pos in used:
            raise FusionError(f"duplicate injection position {pos}")
        used.add(pos)
        vec = np.asarray(triple[name], dtype=np.float64)
        if vec.shape != (d,):
            raise ShapeError(f"injected vector for {name} has shape "
                             f"{vec.shape}, expected ({d},)")
        out[pos] = vec
    return out


def inject_graph(g: Graph, plain: Node, projected: dict[str, Node],
                 positions: dict[str, int]) -> Node:
    """In-graph injection: E_final = plain*keep + scatter @ rows.

    `projected[name]` is a (1, d) node.  The keep mask zeroes exactly the
    placeholder rows and the scatter matmul writes the projected vectors
    there, so unaffected rows keep their bits and gradients flow into the
    projection stack.
    """
    seq, d = plain.shape
    names = sorted(positions)
    if len({positions[n] for n in names}) != len(names):
        raise FusionError("duplicate injection position")
    keep = np.ones((seq, d))
    scatter = np.zeros((seq, len(names)))
    for col, name in enumerate(names):
        pos = positions[name]
        if not 0 <= pos < seq:
            raise FusionError(f"position {pos} outside sequence of {seq}")
        keep[pos] = 0.0
        scatter[pos, col] = 1.0
    rows = g.concat_rows(*[projected[n] for n in names]) \
        if len(names) > 1 else projected[names[0]]
    return g.add(g.mul(plain, g.leaf(keep)),
                 g.matmul(g.leaf(scatter), rows))


def stage3_loss(y_hat: float, y: int) -> float:
    """Binary cross-entropy on the fused prediction (same form as stage 1:
    the printed objective carries no extra fidelity term)."""
    return sft_loss(y_hat, y)
