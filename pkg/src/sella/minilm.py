"""Miniature decoder-only language model with a word-level tokenizer and
low-rank adapters.

Architecture: learned token + absolute positional embeddings, pre-norm
residual blocks (causal multi-head attention, then a GELU feed-forward),
a final layer norm, and an output head tied to the token embedding table.
Layer norms carry no affine parameters.  The causal mask is an additive
-1e30 constant, which underflows to exactly zero attention weight, so
position t is bit-exactly independent of positions > t.

Adapters follow the LoRA recipe: for a base matrix W (stored here in
(in, out) orientation for right-multiplication) the effective weight is
W + (alpha/r) * (B @ A)^T with A: (r, in) Gaussian and B: (out, r) zeros,
so a freshly initialized adapter is an exact no-op.  Every attention and
feed-forward matrix is adapted; embeddings and biases are not.
"""

from __future__ import annotations

import json
import math
import os
import re
from dataclasses import asdict, dataclass

import numpy as np

from .tensor import Graph, Node, ShapeError, load_tensor, save_tensor

PAD, UNK, YES, NO, USER_TOK, ITEM_TOK, WARM_TOK = RESERVED_TOKENS = (
    "[PAD]", "[UNK]", "[YES]", "[NO]", "<User_ID>", "<Item_ID>", "<Warm_ID>")

_WORD_RE = re.compile(r"\w+|[^\w\s]")


class Tokenizer:
    """Word-level vocabulary with fixed reserved ids.

    Reserved tokens occupy ids 0..6 in the order of RESERVED_TOKENS and are
    kept atomic during segmentation; any other whitespace-delimited chunk is
    split into word/punctuation pieces.  Unknown pieces encode to the [UNK]
    id, so decode(encode(t)) == t exactly when t is a space-separated string
    of in-vocabulary tokens.
    """

    def __init__(self, vocab: dict[str, int]):
        for i, tok in enumerate(RESERVED_TOKENS):
            if vocab.get(tok) != i:
                raise ValueError(f"reserved token {tok!r} must map to {i}")
        self.vocab = dict(vocab)
        self.id_to_token = {i: t for t, i in self.vocab.items()}
        if len(self.id_to_token) != len(self.vocab):
            raise ValueError("vocabulary ids must be unique")

    @classmethod
    def build(cls, corpus) -> "Tokenizer":
        vocab = {tok: i for i, tok in enumerate(RESERVED_TOKENS)}
        for text in corpus:
            for piece in _segment(text):
                if piece not in vocab:
                    vocab[piece] = len(vocab)
        return cls(vocab)

    def __len__(self) -> int:
        return len(self.vocab)

    @property
    def pad_id(self) -> int:
        return 0

    @property
    def unk_id(self) -> int:
        return 1

    @property
    def yes_id(self) -> int:
        return 2

    @property
    def no_id(self) -> int:
        return 3

    @property
    def user_id(self) -> int:
        return 4

    @property
    def item_id(self) -> int:
        return 5

    @property
    def warm_id(self) -> int:
        return 6

    def encode(self, text: str) -> list[int]:
        return [self.vocab.get(p, self.unk_id) for p in _segment(text)]

    def decode(self, ids) -> str:
        return " ".join(self.id_to_token.get(int(i), UNK) for i in ids)

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.vocab, f, indent=0, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "Tokenizer":
        with open(path, encoding="utf-8") as f:
            return cls(json.load(f))


def _segment(text: str) -> list[str]:
    pieces = []
    for chunk in text.split():
        if chunk in RESERVED_TOKENS:
            pieces.append(chunk)
        else:
            pieces.extend(_WORD_RE.findall(chunk))
    return pieces


# ---------------------------------------------------------------------------
# model


@dataclass
class ModelConfig:
    vocab_size: int
    d_model: int = 128
    n_layers: int = 4
    n_heads: int = 4
    max_len: int = 256
    lora_r: int = 8
    lora_alpha: float = 16.0
    init_seed: int = 0

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ValueError(
                f"d_model {self.d_model} not divisible by "
                f"{self.n_heads} heads")


class LoraBank:
    """Per-matrix (A, B) adapter pairs plus the shared scaling and flag."""

    def __init__(self, shapes: dict[str, tuple[int, int]], r: int,
                 alpha: float, rng: np.random.Generator):
        self.r = r
        self.alpha = alpha
        self.enabled = True
        self.pairs: dict[str, dict[str, np.ndarray]] = {}
        for name, (d_in, d_out) in shapes.items():
            self.pairs[name] = {
                "A": rng.normal(scale=0.02, size=(r, d_in)),
                "B": np.zeros((d_out, r)),
            }

    def flat_params(self) -> dict[str, np.ndarray]:
        return {f"lora.{name}.{k}": m[k]
                for name, m in self.pairs.items() for k in ("A", "B")}

    def set_flat(self, flat: dict[str, np.ndarray]) -> None:
        for name, m in self.pairs.items():
            for k in ("A", "B"):
                m[k] = np.asarray(flat[f"lora.{name}.{k}"], dtype=np.float64)


class MiniLM:
    """Decoder-only transformer over the tensorcore graph."""

    def __init__(self, config: ModelConfig):
        self.config = config
        c = config
        # stream tag 1 keeps backbone init independent of same-seed consumers
        rng = np.random.default_rng([c.init_seed, 1])
        d, dh = c.d_model, c.d_model // c.n_heads
        p: dict[str, np.ndarray] = {
            "tok_emb": rng.normal(scale=0.02, size=(c.vocab_size, d)),
            "pos_emb": rng.normal(scale=0.02, size=(c.max_len, d)),
        }
        for l in range(c.n_layers):
            for h in range(c.n_heads):
                for w in ("wq", "wk", "wv"):
                    p[f"blocks.{l}.attn.{w}.{h}"] = rng.normal(
                        scale=0.02, size=(d, dh))
            p[f"blocks.{l}.attn.wo"] = rng.normal(scale=0.02, size=(d, d))
            p[f"blocks.{l}.ff.w1"] = rng.normal(scale=0.02, size=(d, 4 * d))
            p[f"blocks.{l}.ff.b1"] = np.zeros(4 * d)
            p[f"blocks.{l}.ff.w2"] = rng.normal(scale=0.02, size=(4 * d, d))
            p[f"blocks.{l}.ff.b2"] = np.zeros(d)
        self.params = p
        self.lora = LoraBank(
            {n: a.shape for n, a in p.items() if self._adapted(n)},
            c.lora_r, c.lora_alpha, rng)

    @staticmethod
    def _adapted(name: str) -> bool:
        return (".attn.w" in name or name.endswith(("ff.w1", "ff.w2")))

    # -- graph construction -------------------------------------------------

    def leaves(self, g: Graph, trainable: set[str] = frozenset()
               ) -> dict[str, Node]:
        """One leaf per base and adapter parameter; `trainable` names get
        param=True so backward returns their gradients."""
        out = {n: g.leaf(a, param=n in trainable)
               for n, a in self.params.items()}
        for n, a in self.lora.flat_params().items():
            out[n] = g.leaf(a, param=n in trainable)
        return out

    def effective_weights(self, g: Graph, leaves: dict[str, Node],
                          lora_enabled: bool) -> dict[str, Node]:
        eff: dict[str, Node] = {}
        scaling = self.lora.alpha / self.lora.r
        for name in self.params:
            if not self._adapted(name):
                continue
            base = leaves[name]
            if lora_enabled and self.lora.enabled:
                delta = g.transpose(g.matmul(leaves[f"lora.{name}.B"],
                                             leaves[f"lora.{name}.A"]))
                eff[name] = g.add(base, g.scale(delta, scaling))
            else:
                eff[name] = base
        return eff

    def _causal_mask(self, seq: int) -> np.ndarray:
        mask = np.zeros((seq, seq))
        mask[np.triu_indices(seq, k=1)] = -1e30
        return mask

    def trunk_graph(self, g: Graph, leaves: dict[str, Node],
                    eff: dict[str, Node], emb: Node, *,
                    last_row_only: bool = False,
                    attention_sink: list | None = None) -> Node:
        """Transformer body on an embedded sequence already in `g`: returns
        the final-layer-norm hidden states, (seq, d) or (1, d) when
        `last_row_only`.  When `attention_sink` is a list, the head-averaged
        attention matrix of every layer is appended to it (numpy arrays).
        """
        c = self.config
        seq = emb.shape[0]
        if seq > c.max_len:
            raise ShapeError(
                f"sequence length {seq} exceeds max_len {c.max_len}")
        pos = g.embedding_lookup(leaves["pos_emb"], tuple(range(seq)))
        x = g.add(emb, pos)
        mask = g.leaf(self._causal_mask(seq))
        dh = c.d_model // c.n_heads
        for l in range(c.n_layers):
            xn = g.layer_norm(x)
            heads = []
            attn_acc = None
            for h in range(c.n_heads):
                q = g.matmul(xn, eff[f"blocks.{l}.attn.wq.{h}"])
                k = g.matmul(xn, eff[f"blocks.{l}.attn.wk.{h}"])
                v = g.matmul(xn, eff[f"blocks.{l}.attn.wv.{h}"])
                scores = g.add(g.scale(g.matmul(q, g.transpose(k)),
                                       1.0 / math.sqrt(dh)), mask)
                a = g.row_softmax(scores)
                if attention_sink is not None:
                    attn_acc = (a.out.numpy() if attn_acc is None
                                else attn_acc + a.out.numpy())
                heads.append(g.transpose(g.matmul(a, v)))
            if attention_sink is not None:
                attention_sink.append(attn_acc / c.n_heads)
            ctx = g.transpose(g.concat_rows(*heads))
            x = g.add(x, g.matmul(ctx, eff[f"blocks.{l}.attn.wo"]))
            xn2 = g.layer_norm(x)
            hidden = g.gelu(g.add(g.matmul(xn2, eff[f"blocks.{l}.ff.w1"]),
                                  leaves[f"blocks.{l}.ff.b1"]))
            ff = g.add(g.matmul(hidden, eff[f"blocks.{l}.ff.w2"]),
                       leaves[f"blocks.{l}.ff.b2"])
            x = g.add(x, ff)
        x = g.layer_norm(x)
        if last_row_only:
            x = g.embedding_lookup(x, (seq - 1,))
        return x

    def forward_graph(self, g: Graph, leaves: dict[str, Node],
                      eff: dict[str, Node], emb: Node, *,
                      last_row_only: bool = False,
                      attention_sink: list | None = None) -> Node:
        """Logits node over the tied head: (seq, vocab), or (1, vocab) when
        `last_row_only`."""
        x = self.trunk_graph(g, leaves, eff, emb, last_row_only=last_row_only,
                             attention_sink=attention_sink)
        return g.matmul(x, g.transpose(leaves["tok_emb"]))

    def hidden_last(self, embeddings: np.ndarray,
                    lora_enabled: bool = True) -> np.ndarray:
        """Final-layer-norm hidden state at the last input position: (d,)."""
        g = Graph()
        leaves = self.leaves(g)
        eff = self.effective_weights(g, leaves, lora_enabled)
        emb = g.leaf(np.asarray(embeddings, dtype=np.float64))
        node = self.trunk_graph(g, leaves, eff, emb, last_row_only=True)
        return node.out.numpy()[0]

    # -- evaluation-mode conveniences ---------------------------------------

    def embed(self, ids) -> np.ndarray:
        return self.params["tok_emb"][np.asarray(ids, dtype=int)]

    def forward(self, embeddings: np.ndarray, lora_enabled: bool = True,
                last_row_only: bool = False) -> np.ndarray:
        g = Graph()
        leaves = self.leaves(g)
        eff = self.effective_weights(g, leaves, lora_enabled)
        emb = g.leaf(np.asarray(embeddings, dtype=np.float64))
        return self.forward_graph(g, leaves, eff, emb,
                                  last_row_only=last_row_only).out.numpy()

    def attention_maps(self, embeddings: np.ndarray,
                       lora_enabled: bool = True) -> list[np.ndarray]:
        g = Graph()
        leaves = self.leaves(g)
        eff = self.effective_weights(g, leaves, lora_enabled)
        emb = g.leaf(np.asarray(embeddings, dtype=np.float64))
        sink: list[np.ndarray] = []
        self.forward_graph(g, leaves, eff, emb, attention_sink=sink)
        return sink

    # -- persistence ---------------------------------------------------------

    def save(self, out_dir: str, reserved_ids: dict[str, int] | None = None
             ) -> None:
        os.makedirs(out_dir, exist_ok=True)
        for name, arr in self.params.items():
            save_tensor(os.path.join(out_dir, name + ".bin"), arr)
        for name, arr in self.lora.flat_params().items():
            save_tensor(os.path.join(out_dir, name + ".bin"), arr)
        manifest = {"config": asdict(self.config),
                    "reserved_ids": reserved_ids or
                    {t: i for i, t in enumerate(RESERVED_TOKENS)},
                    "lora_enabled": self.lora.enabled}
        with open(os.path.join(out_dir, "model.json"), "w",
                  encoding="utf-8") as f:
            json.dump(manifest, f, indent=2, sort_keys=True)

    @classmethod
    def load(cls, in_dir: str) -> "MiniLM":
        with open(os.path.join(in_dir, "model.json"), encoding="utf-8") as f:
            manifest = json.load(f)
        model = cls(ModelConfig(**manifest["config"]))
        for name in model.params:
            model.params[name] = load_tensor(
                os.path.join(in_dir, name + ".bin"))
        flat = {name: load_tensor(os.path.join(in_dir, name + ".bin"))
                for name in model.lora.flat_params()}
        model.lora.set_flat(flat)
        model.lora.enabled = bool(manifest["lora_enabled"])
        return model


# ---------------------------------------------------------------------------
# scoring and losses


def yes_no_probability(logits_row: np.ndarray, yes_id: int = 2,
                       no_id: int = 3) -> float:
    """p(yes) from a constrained two-way softmax, computed stably."""
    row = np.asarray(logits_row, dtype=np.float64).reshape(-1)
    l_yes, l_no = row[yes_id], row[no_id]
    m = max(l_yes, l_no)
    ey, en = math.exp(l_yes - m), math.exp(l_no - m)
    return ey / (ey + en)


def sft_loss(y_hat: float, y: int) -> float:
    """Binary cross-entropy with the prediction clamped away from {0, 1}."""
    p = min(max(float(y_hat), 1e-12), 1.0 - 1e-12)
    return -(y * math.log(p) + (1 - y) * math.log(1.0 - p))


def yes_no_graph(g: Graph, logits_row: Node, vocab_size: int,
                 yes_id: int = 2, no_id: int = 3) -> Node:
    """(1, 2) node of [p_yes, p_no] extracted with a one-hot matmul."""
    onehot = np.zeros((vocab_size, 2))
    onehot[yes_id, 0] = 1.0
    onehot[no_id, 1] = 1.0
    return g.row_softmax(g.matmul(logits_row, g.leaf(onehot)))


def bce_terms_to_loss(g: Graph, terms: list[Node]) -> Node:
    """Mean of per-example (1, 1) loss terms as a scalar node."""
    return g.mean(g.concat_rows(*terms)) if len(terms) > 1 \
        else g.mean(terms[0])


def bce_term(g: Graph, probs: Node, label: int) -> Node:
    """-log of the correct-class probability, guarded away from log(0).

    `probs` is the (1, 2) [p_yes, p_no] node; the 1e-12 additive guard is
    the in-graph equivalent of clamping to [1e-12, 1 - 1e-12].
    """
    sel = np.array([[1.0], [0.0]]) if label == 1 else np.array([[0.0], [1.0]])
    picked = g.matmul(probs, g.leaf(sel))
    return g.scale(g.log(g.add(picked, g.leaf(np.full((1, 1), 1e-12)))), -1.0)


# ---------------------------------------------------------------------------
# prompts

# The prompt wording is an implementation constant of this repo: the original
# figure-based templates are not machine-readable, so these are functional
# stand-ins with the same slot structure (task instruction, liked/disliked
# title lists, target title, answer cue).
PROMPT_HEAD = "predict if the user likes the target item ."
PROMPT_ANSWER_CUE = ". answer :"
TITLE_SEP = ";"
EMPTY_SLOT = "none"


def render_sft_prompt(history: list[tuple[str, int]], target_title: str,
                      k: int, *, use_ui: bool = False,
                      use_warm: bool = False) -> str:
    """Template text for a (history, target) pair; history is truncated to
    its most recent k entries.  `use_ui`/`use_warm` insert the collaborative
    placeholder tokens directly after the target title.

    All placeholders cluster between the title and the answer cue: that is
    the only region of the template whose token positions already vary
    across prompts, so the frozen backbone (which anchors on the fixed
    positions of the head and section markers) scores insertion there
    without degradation.
    """
    recent = history[-k:] if k > 0 else []
    liked = f" {TITLE_SEP} ".join(t for t, y in recent if y == 1) or EMPTY_SLOT
    disliked = f" {TITLE_SEP} ".join(
        t for t, y in recent if y == 0) or EMPTY_SLOT
    target = target_title if target_title.strip() else EMPTY_SLOT
    if use_ui:
        target = f"{target} {ITEM_TOK}"
    if use_warm:
        target = f"{target} {WARM_TOK}"
    if use_ui:
        target = f"{target} {USER_TOK}"
    return (f"{PROMPT_HEAD} liked : {liked} . disliked : {disliked} . "
            f"target : {target} {PROMPT_ANSWER_CUE}")


def build_sft_prompt(tokenizer: Tokenizer, history: list[tuple[str, int]],
                     target_title: str, k: int) -> list[int]:
    return tokenizer.encode(render_sft_prompt(history, target_title, k))


def prompt_corpus(titles) -> list[str]:
    """Texts whose tokens must be in-vocabulary: template plus titles."""
    return [PROMPT_HEAD, PROMPT_ANSWER_CUE,
            f"liked : disliked : target : {TITLE_SEP} {EMPTY_SLOT}",
            *titles]
