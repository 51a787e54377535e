"""Per-item semantic embedding distillation from the stage-1 model.

Each catalog item is rendered through a fixed description template and run
through the adapter-equipped model; the final-layer-norm hidden state at the
last input position (the next-token representation) is the item's semantic
vector.  Distillation is evaluation-only and covers every catalog item,
including items that never occur in the train split — that coverage is what
later lets the warm token speak for cold items.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field

import numpy as np

from .minilm import MiniLM, Tokenizer
from .tensor import NonFiniteError, load_tensor, save_tensor

ITEM_PROMPT_HEAD = "the target item is :"
ITEM_EMPTY_SLOT = "unknown"


class DistillError(Exception):
    pass


def item_corpus() -> list[str]:
    """Template texts the tokenizer must cover for distillation prompts."""
    return [ITEM_PROMPT_HEAD, ITEM_EMPTY_SLOT]


def item_prompt(tokenizer: Tokenizer, title: str, max_len: int) -> list[int]:
    """Token ids of the item-description prompt, ending at the position
    whose next-token hidden state is harvested.  Overlong titles are
    truncated from the left so the most specific trailing words survive."""
    head = tokenizer.encode(ITEM_PROMPT_HEAD)
    body = tokenizer.encode(title if title.strip() else ITEM_EMPTY_SLOT)
    budget = max_len - len(head)
    if budget <= 0:
        raise DistillError(
            f"max_len {max_len} cannot fit the item template")
    return head + body[-budget:]


@dataclass
class SemanticBank:
    """item_id -> d_L vector, with provenance and source checkpoint id."""

    item_ids: list[int]
    vectors: np.ndarray
    provenance: str = "distilled"
    source: str = ""
    _row: dict[int, int] = field(default_factory=dict, repr=False)

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.float64)
        if len(self.item_ids) != len(self.vectors):
            raise DistillError(
                f"{len(self.item_ids)} ids vs {len(self.vectors)} vectors")
        if len(set(self.item_ids)) != len(self.item_ids):
            raise DistillError("duplicate item ids in bank")
        if not np.isfinite(self.vectors).all():
            raise NonFiniteError("semantic bank contains non-finite values")
        self._row = {i: r for r, i in enumerate(self.item_ids)}

    @property
    def dim(self) -> int:
        return self.vectors.shape[1]

    def vector(self, item_id: int) -> np.ndarray:
        if item_id not in self._row:
            raise DistillError(f"item {item_id} not in bank")
        return self.vectors[self._row[item_id]]

    def rows_for(self, item_ids) -> np.ndarray:
        return self.vectors[[self._row[i] for i in item_ids]]

    def with_vectors(self, vectors: np.ndarray,
                     provenance: str) -> "SemanticBank":
        return SemanticBank(item_ids=list(self.item_ids), vectors=vectors,
                            provenance=provenance, source=self.source)

    def save(self, out_dir: str) -> None:
        os.makedirs(out_dir, exist_ok=True)
        save_tensor(os.path.join(out_dir, "bank.bin"), self.vectors)
        with open(os.path.join(out_dir, "bank.json"), "w",
                  encoding="utf-8") as f:
            json.dump({"item_ids": list(map(int, self.item_ids)),
                       "provenance": self.provenance,
                       "source": self.source}, f, sort_keys=True)

    @classmethod
    def load(cls, in_dir: str) -> "SemanticBank":
        with open(os.path.join(in_dir, "bank.json"), encoding="utf-8") as f:
            meta = json.load(f)
        return cls(item_ids=meta["item_ids"],
                   vectors=load_tensor(os.path.join(in_dir, "bank.bin")),
                   provenance=meta["provenance"], source=meta["source"])


def distill_item(model: MiniLM, tokenizer: Tokenizer,
                 title: str) -> np.ndarray:
    """Semantic vector of one item: last-position hidden state with the
    stage-1 adapters enabled."""
    ids = item_prompt(tokenizer, title, model.config.max_len)
    return model.hidden_last(model.embed(ids), lora_enabled=True)


def distill_all(model: MiniLM, tokenizer: Tokenizer, items: dict[int, str],
                source: str = "") -> SemanticBank:
    """Distill every catalog item (sorted id order) into a fresh bank."""
    item_ids = sorted(items)
    if not item_ids:
        raise DistillError("cannot distill an empty catalog")
    vectors = np.stack([distill_item(model, tokenizer, items[i])
                        for i in item_ids])
    return SemanticBank(item_ids=item_ids, vectors=vectors,
                        provenance="distilled", source=source)
