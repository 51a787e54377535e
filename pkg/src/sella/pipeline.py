"""Three-stage training orchestrator with variant wiring and freeze audits.

Stage 1 adapts the backbone to the yes/no task (LoRA only); stage 2 trains
the collaborative model with contrastive pre-alignment against the distilled
bank; stage 3 trains the projection stack (and keeps refining the
collaborative tables and bank) through the frozen backbone on fused prompts.
Each stage selects the best-validation-AUC snapshot with early stopping.

Freezing is enforced twice: mechanically, by giving gradient-carrying leaves
only to the stage's trainable groups, and by a byte audit that serializes
every frozen group before and after the stage and fails hard on drift.

Variants (the ablation grid) toggle alignment, projection warm-start, the
warm token, the user/item tokens, and the stage-3 sub-training order; the
full model trains all three projected tokens jointly.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .collab import AlignConfig, CollabModel, ProjCtoL, train_stage2
from .config import RunConfig, config_dict
from .data import InteractionDataset, dataset_hash, load_dataset
from .distill import SemanticBank, distill_all, item_corpus
from .evalrep import MetricsReport, auc, warm_cold_report
from .fusion import (FusionPrompt, ProjWtoL, build_fusion_prompt,
                     inject, inject_graph, project_tokens)
from .minilm import (MiniLM, ModelConfig, Tokenizer, bce_term,
                     bce_terms_to_loss, prompt_corpus, yes_no_graph,
                     yes_no_probability)
from .optim import Adam
from .tensor import Graph, tensor_bytes

VARIANT_NAMES = ("SeLLa-Rec", "SeLLa-w/o", "SeLLa-Proj", "SeLLa-Warm",
                 "SeLLa-UI", "SeLLa-W-UI", "SeLLa-UI-W")

PARAM_GROUPS = ("backbone", "lora", "collab_user", "collab_item", "bank",
                "proj_cl", "proj_wl")


class PipelineError(Exception):
    pass


# ---------------------------------------------------------------------------
# stage plans and variants


@dataclass(frozen=True)
class StagePlan:
    stage: int
    trainable: frozenset
    frozen: frozenset
    data: str
    epochs: int
    patience: int

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise PipelineError(f"unknown stage {self.stage}")
        if self.trainable & self.frozen:
            raise PipelineError("a group cannot be trainable and frozen")


_PLAN_GROUPS = {
    1: (frozenset({"lora"}),
        frozenset({"backbone"})),
    2: (frozenset({"collab_user", "collab_item", "bank", "proj_cl"}),
        frozenset({"backbone", "lora"})),
    3: (frozenset({"collab_user", "collab_item", "bank", "proj_cl",
                   "proj_wl"}),
        frozenset({"backbone", "lora"})),
}


def stage_plan(stage: int, config: RunConfig) -> StagePlan:
    """The fixed trainable/frozen schedule plus this run's epoch budget."""
    if stage not in _PLAN_GROUPS:
        raise PipelineError(f"unknown stage {stage}; expected 1, 2 or 3")
    trainable, frozen = _PLAN_GROUPS[stage]
    epochs = {1: config.stage1_epochs, 2: config.stage2_epochs,
              3: config.stage3_epochs}[stage]
    patience = {1: config.stage1_patience, 2: config.stage2_patience,
                3: config.stage3_patience}[stage]
    data = "train split" if stage != 2 else "train split + semantic bank"
    return StagePlan(stage=stage, trainable=trainable, frozen=frozen,
                     data=data, epochs=epochs, patience=patience)


@dataclass(frozen=True)
class VariantSpec:
    """Toggle set for one ablation variant."""

    name: str
    alignment: bool = True     # stage-2 contrastive term on (lambda > 0)
    warm_start: bool = True    # stage-3 reuses the stage-2 projection
    use_warm: bool = True      # <Warm_ID> present in fused prompts
    use_ui: bool = True        # <User_ID>/<Item_ID> present
    order: str = "joint"       # stage-3 sub-training order


VARIANTS = {
    "SeLLa-Rec": VariantSpec("SeLLa-Rec"),
    # no alignment at all: plain MF plus randomly projected UI tokens
    "SeLLa-w/o": VariantSpec("SeLLa-w/o", alignment=False, warm_start=False,
                             use_warm=False),
    "SeLLa-Proj": VariantSpec("SeLLa-Proj", warm_start=False),
    "SeLLa-Warm": VariantSpec("SeLLa-Warm", use_warm=False),
    "SeLLa-UI": VariantSpec("SeLLa-UI", use_ui=False),
    "SeLLa-W-UI": VariantSpec("SeLLa-W-UI", order="w-ui"),
    "SeLLa-UI-W": VariantSpec("SeLLa-UI-W", order="ui-w"),
}


def variant_spec(name: str) -> VariantSpec:
    if name not in VARIANTS:
        raise PipelineError(
            f"unknown variant {name!r}; valid variants: "
            + ", ".join(VARIANT_NAMES))
    return VARIANTS[name]


# ---------------------------------------------------------------------------
# prompt assembly


@dataclass
class Example:
    """One scored interaction: its fused prompt plus the raw ids."""

    index: int
    user: int
    item: int
    label: int
    prompt: FusionPrompt


def build_examples(dataset: InteractionDataset, tokenizer: Tokenizer,
                   split: str, k: int, max_len: int, *,
                   use_ui: bool = False, use_warm: bool = False
                   ) -> list[Example]:
    """Prompts for every interaction of a split, with per-user history drawn
    strictly from earlier interactions (no future leakage)."""
    out = []
    for j in dataset.split_indices(split):
        r = dataset.interactions[j]
        history = [(dataset.items[h.item_id], h.label)
                   for h in dataset.user_history(r.user_id, j, k)]
        prompt = build_fusion_prompt(tokenizer, history,
                                     dataset.items[r.item_id], k,
                                     use_ui=use_ui, use_warm=use_warm)
        if len(prompt.ids) > max_len:
            raise PipelineError(
                f"prompt of {len(prompt.ids)} tokens exceeds max_len "
                f"{max_len}; lower k_history or raise max_len")
        out.append(Example(index=j, user=r.user_id, item=r.item_id,
                           label=r.label, prompt=prompt))
    return out


def build_tokenizer(dataset: InteractionDataset) -> Tokenizer:
    """Vocabulary over the prompt templates and every catalog title."""
    titles = [dataset.items[i] for i in sorted(dataset.items)]
    return Tokenizer.build(prompt_corpus(titles) + item_corpus())


# ---------------------------------------------------------------------------
# freeze audit


class FreezeAudit:
    """Byte-level snapshot of named parameter groups.

    Each group serializes to the tensor dump format; `verify` re-serializes
    and raises on any mismatch, naming the group.  This is the backstop
    behind the mechanical gradient masks.
    """

    def __init__(self, groups: dict[str, dict[str, np.ndarray]]):
        self._groups = groups
        self._digests = {name: self._digest(arrays)
                         for name, arrays in groups.items()}

    @staticmethod
    def _digest(arrays: dict[str, np.ndarray]) -> str:
        h = hashlib.sha256()
        for name in sorted(arrays):
            h.update(name.encode())
            h.update(tensor_bytes(arrays[name]))
        return h.hexdigest()

    @property
    def digests(self) -> dict[str, str]:
        return dict(self._digests)

    def verify(self, stage: int) -> None:
        for name, arrays in self._groups.items():
            if self._digest(arrays) != self._digests[name]:
                raise PipelineError(
                    f"frozen group {name!r} drifted during stage {stage}")


def model_groups(model: MiniLM) -> dict[str, dict[str, np.ndarray]]:
    return {"backbone": dict(model.params),
            "lora": model.lora.flat_params()}


# ---------------------------------------------------------------------------
# stage 1: task adaptation


def train_stage1(model: MiniLM, tokenizer: Tokenizer,
                 dataset: InteractionDataset, config: RunConfig,
                 log=None) -> dict:
    """LoRA-only supervised fine-tuning on plain prompts.

    Returns a history dict (per-epoch validation AUC, best epoch); the model
    is left holding the best-validation snapshot of its adapters.
    """
    plan = stage_plan(1, config)
    train = build_examples(dataset, tokenizer, "train", config.k_history,
                           config.max_len)
    valid = build_examples(dataset, tokenizer, "valid", config.k_history,
                           config.max_len)
    if not train or not valid:
        raise PipelineError("stage 1 needs non-empty train and valid splits")
    audit = FreezeAudit(
        {name: grp for name, grp in model_groups(model).items()
         if name in plan.frozen})
    params = model.lora.flat_params()
    trainable = set(params)
    opt = Adam(lr=config.stage1_lr)
    rng = np.random.default_rng([config.seed, 6])
    labels_v = np.array([ex.label for ex in valid])

    history: dict = {"val_auc": [], "stage": 1}
    best, best_auc, stale = None, -1.0, 0
    for epoch in range(plan.epochs):
        order = rng.permutation(len(train))
        for start in range(0, len(train), config.stage1_batch):
            batch = [train[j] for j in order[start:start + config.stage1_batch]]
            g = Graph()
            leaves = model.leaves(g, trainable=trainable)
            eff = model.effective_weights(g, leaves, True)
            terms = []
            for ex in batch:
                emb = g.leaf(model.embed(ex.prompt.ids))
                logits = model.forward_graph(g, leaves, eff, emb,
                                             last_row_only=True)
                probs = yes_no_graph(g, logits, len(tokenizer))
                terms.append(bce_term(g, probs, ex.label))
            grads = g.backward(bce_terms_to_loss(g, terms))
            opt.step(params, {n: grads[leaves[n].nid].numpy()
                              for n in trainable if leaves[n].nid in grads})
        val_auc = auc(example_scores(model, valid), labels_v)
        history["val_auc"].append(val_auc)
        if log is not None:
            log(f"stage1 epoch {epoch} val_auc {val_auc:.4f}")
        if val_auc > best_auc:
            best_auc, stale = val_auc, 0
            best = {n: a.copy() for n, a in params.items()}
        else:
            stale += 1
            if stale >= plan.patience:
                break
    model.lora.set_flat(best)
    audit.verify(stage=1)
    history["best_val_auc"] = best_auc
    history["epochs_run"] = len(history["val_auc"])
    return history


# ---------------------------------------------------------------------------
# evaluation-mode scoring


def example_scores(model: MiniLM, examples: list[Example],
                   triple_fn=None) -> np.ndarray:
    """p(yes) per example; `triple_fn(ex)` supplies injected vectors for
    prompts that carry placeholders."""
    scores = np.empty(len(examples))
    for n, ex in enumerate(examples):
        emb = model.embed(ex.prompt.ids)
        if ex.prompt.positions:
            if triple_fn is None:
                raise PipelineError(
                    "fused prompts need projected vectors to score")
            emb = inject(emb, triple_fn(ex), ex.prompt.positions)
        row = model.forward(emb, last_row_only=True)[0]
        scores[n] = yes_no_probability(row)
    return scores


def make_triple_fn(spec: VariantSpec, collab: CollabModel,
                   bank: SemanticBank, proj_cl: ProjCtoL,
                   proj_wl: ProjWtoL):
    """Projected-vector supplier matching the variant's placeholders."""
    def fn(ex: Example) -> dict[str, np.ndarray]:
        if spec.use_ui and spec.use_warm:
            u, i, w = project_tokens(collab.user_table[ex.user],
                                     collab.item_table[ex.item],
                                     bank.vector(ex.item), proj_cl, proj_wl)
            return {"user": u, "item": i, "warm": w}
        out: dict[str, np.ndarray] = {}
        if spec.use_ui:
            pair = proj_cl(np.stack([collab.user_table[ex.user],
                                     collab.item_table[ex.item]]))
            out["user"], out["item"] = pair[0], pair[1]
        if spec.use_warm:
            out["warm"] = proj_wl(bank.vector(ex.item))[0]
        return out
    return fn


# ---------------------------------------------------------------------------
# stage 3: hybrid projection training


def _phases(spec: VariantSpec) -> list[tuple[str, frozenset]]:
    ui_groups = frozenset({"collab_user", "collab_item", "proj_cl"})
    warm_groups = frozenset({"bank", "proj_wl"})
    active = (ui_groups if spec.use_ui else frozenset()) | \
             (warm_groups if spec.use_warm else frozenset())
    if spec.order == "joint":
        return [("joint", active)]
    first, second = (("w", "ui") if spec.order == "w-ui" else ("ui", "w"))
    by_name = {"w": warm_groups & active, "ui": ui_groups & active}
    return [(first, by_name[first]), (second, by_name[second])]


def train_stage3(model: MiniLM, tokenizer: Tokenizer,
                 dataset: InteractionDataset, collab: CollabModel,
                 bank: SemanticBank, proj_cl: ProjCtoL, proj_wl: ProjWtoL,
                 config: RunConfig, spec: VariantSpec, log=None) -> dict:
    """Train the projection stack through the frozen backbone.

    The collaborative tables, bank, and both projections update in place;
    the backbone and adapters are frozen (masked and byte-audited).  For the
    sequenced variants each sub-training gets half the epoch budget.
    """
    plan = stage_plan(3, config)
    train = build_examples(dataset, tokenizer, "train", config.k_history,
                           config.max_len, use_ui=spec.use_ui,
                           use_warm=spec.use_warm)
    valid = build_examples(dataset, tokenizer, "valid", config.k_history,
                           config.max_len, use_ui=spec.use_ui,
                           use_warm=spec.use_warm)
    if not train or not valid:
        raise PipelineError("stage 3 needs non-empty train and valid splits")
    labels_v = np.array([ex.label for ex in valid])
    bank_row = {i: r for r, i in enumerate(bank.item_ids)}

    group_arrays: dict[str, dict[str, np.ndarray]] = {
        "collab_user": {"user_table": collab.user_table},
        "collab_item": {"item_table": collab.item_table},
        "bank": {"bank": bank.vectors},
        "proj_cl": {f"proj_cl.{n}": a for n, a in proj_cl.params.items()},
        "proj_wl": {"proj_wl.W": proj_wl.W},
    }
    phases = _phases(spec)
    touched = frozenset().union(*(groups for _, groups in phases))
    audit = FreezeAudit({**{n: g for n, g in model_groups(model).items()
                            if n in plan.frozen},
                         **{n: g for n, g in group_arrays.items()
                            if n not in touched}})

    triple_fn = make_triple_fn(spec, collab, bank, proj_cl, proj_wl)
    rng = np.random.default_rng([config.seed, 7])
    history: dict = {"stage": 3, "schedule": [f"stage3:{n}" for n, _ in
                                              phases], "phases": []}
    budget = plan.epochs if len(phases) == 1 else \
        [(plan.epochs + 1) // 2, plan.epochs // 2]

    for p_idx, (phase_name, groups) in enumerate(phases):
        epochs = budget if isinstance(budget, int) else budget[p_idx]
        params = {n: a for grp in groups
                  for n, a in group_arrays[grp].items()}
        opt = Adam(lr=config.stage3_lr)
        phase_hist: dict = {"name": phase_name, "val_auc": []}
        best, best_auc, stale = None, -1.0, 0
        for epoch in range(epochs):
            order = rng.permutation(len(train))
            for start in range(0, len(train), config.stage3_batch):
                batch = [train[j]
                         for j in order[start:start + config.stage3_batch]]
                _stage3_step(model, tokenizer, batch, collab, bank, proj_cl,
                             proj_wl, bank_row, spec, params, opt)
            val_auc = auc(example_scores(model, valid, triple_fn), labels_v)
            phase_hist["val_auc"].append(val_auc)
            if log is not None:
                log(f"stage3[{phase_name}] epoch {epoch} "
                    f"val_auc {val_auc:.4f}")
            if val_auc > best_auc:
                best_auc, stale = val_auc, 0
                best = {n: a.copy() for n, a in params.items()}
            else:
                stale += 1
                if stale >= plan.patience:
                    break
        if best is not None:
            for n, a in best.items():
                np.copyto(params[n], a)
        phase_hist["best_val_auc"] = best_auc
        phase_hist["epochs_run"] = len(phase_hist["val_auc"])
        history["phases"].append(phase_hist)

    audit.verify(stage=3)
    history["best_val_auc"] = history["phases"][-1]["best_val_auc"] \
        if history["phases"] else None
    return history


def _stage3_step(model, tokenizer, batch, collab, bank, proj_cl, proj_wl,
                 bank_row, spec, params, opt) -> None:
    """One fused-prompt batch: forward through the frozen trunk, backward
    into whatever `params` names, in-place optimizer step."""
    g = Graph()
    lm_leaves = model.leaves(g)
    eff = model.effective_weights(g, lm_leaves, True)
    leaf_of: dict = {}
    n_b = len(batch)
    if spec.use_ui:
        u_leaf = g.leaf(collab.user_table, param="user_table" in params)
        i_leaf = g.leaf(collab.item_table, param="item_table" in params)
        leaf_of["user_table"], leaf_of["item_table"] = u_leaf, i_leaf
        proj_leaves = proj_cl.leaves(g, trainable=set(params))
        leaf_of.update({n: proj_leaves[n] for n in proj_leaves})
        u_rows = g.embedding_lookup(u_leaf, tuple(ex.user for ex in batch))
        i_rows = g.embedding_lookup(i_leaf, tuple(ex.item for ex in batch))
        proj_ui = proj_cl.apply_graph(g, proj_leaves,
                                      g.concat_rows(u_rows, i_rows))
    if spec.use_warm:
        bank_leaf = g.leaf(bank.vectors, param="bank" in params)
        leaf_of["bank"] = bank_leaf
        wl_leaves = proj_wl.leaves(g, trainable=set(params))
        leaf_of.update(wl_leaves)
        sem_rows = g.embedding_lookup(
            bank_leaf, tuple(bank_row[ex.item] for ex in batch))
        proj_w = proj_wl.apply_graph(g, wl_leaves, sem_rows)
    terms = []
    for b, ex in enumerate(batch):
        parts = {}
        if spec.use_ui:
            parts["user"] = g.embedding_lookup(proj_ui, (b,))
            parts["item"] = g.embedding_lookup(proj_ui, (n_b + b,))
        if spec.use_warm:
            parts["warm"] = g.embedding_lookup(proj_w, (b,))
        plain = g.leaf(model.embed(ex.prompt.ids))
        emb = inject_graph(g, plain, parts, ex.prompt.positions) \
            if parts else plain
        logits = model.forward_graph(g, lm_leaves, eff, emb,
                                     last_row_only=True)
        terms.append(bce_term(g, yes_no_graph(g, logits, len(tokenizer)),
                              ex.label))
    grads = g.backward(bce_terms_to_loss(g, terms))
    opt.step(params, {n: grads[leaf.nid].numpy()
                      for n, leaf in leaf_of.items()
                      if n in params and leaf.nid in grads})


# ---------------------------------------------------------------------------
# variant orchestration (in-memory, with cross-variant caching)


@dataclass
class Assembly:
    """Everything a variant needs at stage-3 entry."""

    spec: VariantSpec
    tokenizer: Tokenizer
    model: MiniLM
    collab: CollabModel
    bank: SemanticBank
    proj_cl: ProjCtoL
    proj_wl: ProjWtoL
    stage1_history: dict
    stage2_lam: float
    lm_digests: dict[str, str]


@dataclass
class VariantResult:
    variant: str
    report: MetricsReport
    history: dict
    manifest: dict


def _copy_collab(collab: CollabModel) -> CollabModel:
    out = CollabModel.__new__(CollabModel)
    out.user_table = collab.user_table.copy()
    out.item_table = collab.item_table.copy()
    out.d_c = collab.d_c
    return out


def _copy_proj(proj: ProjCtoL) -> ProjCtoL:
    out = ProjCtoL.__new__(ProjCtoL)
    out.params = {n: a.copy() for n, a in proj.params.items()}
    return out


def _align_config(config: RunConfig, lam: float) -> AlignConfig:
    return AlignConfig(tau=config.tau, lam=lam,
                       batch_size=config.stage2_batch,
                       epochs=config.stage2_epochs, seed=config.seed,
                       d_c=config.d_c, lr=config.stage2_lr,
                       patience=config.stage2_patience,
                       weight_decay=config.stage2_weight_decay)


def assemble_variant(name: str, dataset: InteractionDataset,
                     config: RunConfig, cache: dict | None = None,
                     log=None) -> Assembly:
    """Run (or reuse) stages 1-2 and return the variant's stage-3 inputs.

    `cache` shares the stage-1 model, distilled bank, and per-lambda stage-2
    artifacts across variants and callers; shared artifacts are copied
    before anything trainable is handed out.
    """
    spec = variant_spec(name)
    cache = cache if cache is not None else {}
    seed = config.seed

    if "tokenizer" not in cache:
        cache["tokenizer"] = build_tokenizer(dataset)
    tokenizer = cache["tokenizer"]

    if "stage1" not in cache:
        model = MiniLM(ModelConfig(
            vocab_size=len(tokenizer), d_model=config.d_l,
            n_layers=config.n_layers, n_heads=config.n_heads,
            max_len=config.max_len, lora_r=config.lora_r,
            lora_alpha=config.lora_alpha, init_seed=seed))
        t0 = time.perf_counter()
        hist = train_stage1(model, tokenizer, dataset, config, log)
        hist["seconds"] = time.perf_counter() - t0
        cache["stage1"] = (model, hist,
                           FreezeAudit(model_groups(model)).digests)
    model, stage1_hist, lm_digests = cache["stage1"]

    if "bank" not in cache:
        cache["bank"] = distill_all(model, tokenizer, dataset.items,
                                    source=f"stage1-seed{seed}")
    distilled = cache["bank"]

    lam = config.lam if spec.alignment else 0.0
    key = ("stage2", lam)
    if key not in cache:
        t0 = time.perf_counter()
        collab, aligned, proj = train_stage2(dataset, distilled,
                                             _align_config(config, lam), log)
        cache[key] = (collab, aligned, proj,
                      time.perf_counter() - t0)
    collab2, bank2, proj2, _ = cache[key]

    proj_cl = _copy_proj(proj2) if spec.warm_start \
        else ProjCtoL(config.d_c, config.d_l, seed=seed)
    return Assembly(
        spec=spec, tokenizer=tokenizer, model=model,
        collab=_copy_collab(collab2),
        bank=bank2.with_vectors(bank2.vectors.copy(), bank2.provenance),
        proj_cl=proj_cl, proj_wl=ProjWtoL(config.d_l, seed=seed),
        stage1_history=stage1_hist, stage2_lam=lam, lm_digests=lm_digests)


def evaluate_assembly(asm: Assembly, dataset: InteractionDataset,
                      config: RunConfig, split: str = "test",
                      variant_label: str | None = None) -> MetricsReport:
    """Warm/cold CTR report of the assembly's fused model on a split."""
    examples = build_examples(dataset, asm.tokenizer, split,
                              config.k_history, config.max_len,
                              use_ui=asm.spec.use_ui,
                              use_warm=asm.spec.use_warm)
    triple_fn = make_triple_fn(asm.spec, asm.collab, asm.bank, asm.proj_cl,
                               asm.proj_wl)
    scores = example_scores(asm.model, examples, triple_fn)
    rows = [dataset.interactions[ex.index] for ex in examples]
    return warm_cold_report(
        [r.user_id for r in rows], scores, [r.label for r in rows],
        [r.cold for r in rows], dataset_id=dataset_hash(dataset),
        variant=variant_label or asm.spec.name)


def evaluate_stage1_only(model: MiniLM, tokenizer: Tokenizer,
                         dataset: InteractionDataset, config: RunConfig,
                         split: str = "test") -> MetricsReport:
    """Plain-prompt scoring with the stage-1 model (no injection)."""
    examples = build_examples(dataset, tokenizer, split, config.k_history,
                              config.max_len)
    scores = example_scores(model, examples)
    rows = [dataset.interactions[ex.index] for ex in examples]
    return warm_cold_report(
        [r.user_id for r in rows], scores, [r.label for r in rows],
        [r.cold for r in rows], dataset_id=dataset_hash(dataset),
        variant="stage1-only")


def run_variant(name: str, dataset: InteractionDataset, config: RunConfig,
                cache: dict | None = None, log=None) -> VariantResult:
    """Full pipeline for one variant; returns its test report and manifest.

    Stages 1-2 come from the shared cache when present; stage 3 always runs
    on private copies.  The backbone/adapter bytes recorded at stage-1
    completion are re-verified after stage 3.
    """
    asm = assemble_variant(name, dataset, config, cache, log)
    t0 = time.perf_counter()
    hist3 = train_stage3(asm.model, asm.tokenizer, dataset, asm.collab,
                         asm.bank, asm.proj_cl, asm.proj_wl, config,
                         asm.spec, log)
    hist3["seconds"] = time.perf_counter() - t0
    post = FreezeAudit(model_groups(asm.model)).digests
    for group, digest in asm.lm_digests.items():
        if post[group] != digest:
            raise PipelineError(
                f"frozen group {group!r} drifted between stage 1 and "
                f"stage 3")
    report = evaluate_assembly(asm, dataset, config)
    manifest = {
        "variant": name,
        "toggles": {"alignment": asm.spec.alignment,
                    "warm_start": asm.spec.warm_start,
                    "use_warm": asm.spec.use_warm,
                    "use_ui": asm.spec.use_ui,
                    "order": asm.spec.order},
        "seed": config.seed,
        "data_hash": dataset_hash(dataset),
        "stage2_lam": asm.stage2_lam,
        "schedule": hist3["schedule"],
        "lm_digests": asm.lm_digests,
        "config": config_dict(config),
    }
    return VariantResult(variant=name, report=report,
                         history={"stage1": asm.stage1_history,
                                  "stage3": hist3},
                         manifest=manifest)


# ---------------------------------------------------------------------------
# on-disk workspaces (CLI surface)


class Workspace:
    """Directory layout of a run: dataset/, tokenizer, stage checkpoints."""

    def __init__(self, root: str):
        self.root = root
        self.dataset_dir = os.path.join(root, "dataset")
        self.tokenizer_path = os.path.join(root, "tokenizer.json")
        self.stage1_dir = os.path.join(root, "stage1")
        self.bank_dir = os.path.join(root, "bank")
        self.stage2_dir = os.path.join(root, "stage2")
        self.stage3_dir = os.path.join(root, "stage3")
        self.metrics_dir = os.path.join(root, "metrics")

    def has(self, path: str) -> bool:
        return os.path.isdir(path) or os.path.isfile(path)

    def require(self, path: str, what: str, hint: str) -> None:
        if not self.has(path):
            raise PipelineError(f"{what} not found at {path}; {hint}")

    def load_dataset(self) -> InteractionDataset:
        self.require(self.dataset_dir, "dataset",
                     "run `synth` or `ingest` first")
        return load_dataset(self.dataset_dir)

    def load_stage1(self) -> tuple[MiniLM, Tokenizer]:
        self.require(self.stage1_dir, "stage-1 checkpoint",
                     "run `stage1` first")
        return (MiniLM.load(self.stage1_dir),
                Tokenizer.load(self.tokenizer_path))

    def _write_json(self, path: str, payload: dict) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(payload, f, indent=2, sort_keys=True, default=float)
            f.write("\n")


def run_stage(ws: Workspace, stage: int, config: RunConfig,
              variant: str = "SeLLa-Rec", log=None) -> str:
    """Execute one stage against the workspace; returns the checkpoint dir.

    Prerequisites are checked by stage: stage 2 needs the stage-1 checkpoint
    and the distilled bank, stage 3 additionally needs stage 2.  Frozen
    groups are byte-compared against the stage-1 dump at save time.
    """
    plan = stage_plan(stage, config)
    dataset = ws.load_dataset()
    spec = variant_spec(variant)
    if stage == 1:
        tokenizer = build_tokenizer(dataset)
        model = MiniLM(ModelConfig(
            vocab_size=len(tokenizer), d_model=config.d_l,
            n_layers=config.n_layers, n_heads=config.n_heads,
            max_len=config.max_len, lora_r=config.lora_r,
            lora_alpha=config.lora_alpha, init_seed=config.seed))
        history = train_stage1(model, tokenizer, dataset, config, log)
        os.makedirs(ws.stage1_dir, exist_ok=True)
        tokenizer.save(ws.tokenizer_path)
        model.save(ws.stage1_dir)
        ws._write_json(os.path.join(ws.stage1_dir, "stage1.json"), {
            "history": history, "seed": config.seed,
            "data_hash": dataset_hash(dataset),
            "plan": {"trainable": sorted(plan.trainable),
                     "frozen": sorted(plan.frozen)},
            "config": config_dict(config)})
        return ws.stage1_dir
    if stage == 2:
        ws.require(ws.stage1_dir, "stage-1 checkpoint",
                   "stage 2 requires stage 1; run `stage1` first")
        ws.require(ws.bank_dir, "distilled bank",
                   "stage 2 requires the semantic bank; run `distill` first")
        bank = SemanticBank.load(ws.bank_dir)
        lam = config.lam if spec.alignment else 0.0
        collab, aligned, proj = train_stage2(dataset, bank,
                                             _align_config(config, lam), log)
        os.makedirs(ws.stage2_dir, exist_ok=True)
        collab.save(ws.stage2_dir)
        proj.save(ws.stage2_dir)
        aligned.save(ws.stage2_dir)
        ws._write_json(os.path.join(ws.stage2_dir, "stage2.json"), {
            "lam": lam, "tau": config.tau, "seed": config.seed,
            "d_c": config.d_c, "variant": variant,
            "data_hash": dataset_hash(dataset),
            "lm_digests": _checkpoint_digests(ws.stage1_dir),
            "plan": {"trainable": sorted(plan.trainable),
                     "frozen": sorted(plan.frozen)}})
        return ws.stage2_dir
    ws.require(ws.stage1_dir, "stage-1 checkpoint",
               "stage 3 requires stages 1 and 2; run `stage1` first")
    ws.require(ws.stage2_dir, "stage-2 checkpoint",
               "stage 3 requires stage 2; run `stage2` first")
    model, tokenizer = ws.load_stage1()
    collab = CollabModel.load(ws.stage2_dir)
    bank = SemanticBank.load(ws.stage2_dir)
    proj_cl = ProjCtoL.load(ws.stage2_dir) if spec.warm_start \
        else ProjCtoL(config.d_c, config.d_l, seed=config.seed)
    proj_wl = ProjWtoL(config.d_l, seed=config.seed)
    history = train_stage3(model, tokenizer, dataset, collab, bank, proj_cl,
                           proj_wl, config, spec, log)
    drift = _audit_against_dir(model, ws.stage1_dir)
    if not all(drift.values()):
        bad = sorted(n for n, ok in drift.items() if not ok)
        raise PipelineError(
            "frozen-parameter drift at stage-3 save time: "
            + ", ".join(bad))
    os.makedirs(ws.stage3_dir, exist_ok=True)
    collab.save(ws.stage3_dir)
    proj_cl.save(ws.stage3_dir)
    proj_wl.save(ws.stage3_dir)
    bank.save(ws.stage3_dir)
    ws._write_json(os.path.join(ws.stage3_dir, "stage3.json"), {
        "history": history, "seed": config.seed, "variant": variant,
        "toggles": {"alignment": spec.alignment,
                    "warm_start": spec.warm_start,
                    "use_warm": spec.use_warm, "use_ui": spec.use_ui,
                    "order": spec.order},
        "data_hash": dataset_hash(dataset),
        "lm_audit": drift,
        "plan": {"trainable": sorted(plan.trainable),
                 "frozen": sorted(plan.frozen)}})
    return ws.stage3_dir


def evaluate_checkpoint(ws: "Workspace", config: RunConfig,
                        split: str = "test", stage: int = 3
                        ) -> MetricsReport:
    """Score a saved checkpoint on a split: the stage-3 fused model (with
    the toggles its manifest recorded) or the plain stage-1 model."""
    dataset = ws.load_dataset()
    model, tokenizer = ws.load_stage1()
    if stage == 1:
        return evaluate_stage1_only(model, tokenizer, dataset, config, split)
    if stage != 3:
        raise PipelineError(f"no evaluable checkpoint for stage {stage}")
    ws.require(ws.stage3_dir, "stage-3 checkpoint", "run `stage3` first")
    with open(os.path.join(ws.stage3_dir, "stage3.json"),
              encoding="utf-8") as f:
        meta = json.load(f)
    spec = VariantSpec(name=meta["variant"], **meta["toggles"])
    asm = Assembly(
        spec=spec, tokenizer=tokenizer, model=model,
        collab=CollabModel.load(ws.stage3_dir),
        bank=SemanticBank.load(ws.stage3_dir),
        proj_cl=ProjCtoL.load(ws.stage3_dir),
        proj_wl=ProjWtoL.load(ws.stage3_dir),
        stage1_history={}, stage2_lam=float("nan"), lm_digests={})
    return evaluate_assembly(asm, dataset, config, split,
                             variant_label=meta["variant"])


def _checkpoint_digests(checkpoint_dir: str) -> dict[str, str]:
    """Per-group sha256 over a checkpoint's tensor files, built exactly the
    way FreezeAudit digests a live model (tensor files hold the same bytes
    `tensor_bytes` produces), so disk and memory digests compare directly."""
    names = sorted(f[:-len(".bin")] for f in os.listdir(checkpoint_dir)
                   if f.endswith(".bin"))
    sums = {"backbone": hashlib.sha256(), "lora": hashlib.sha256()}
    for name in names:
        group = "lora" if name.startswith("lora.") else "backbone"
        sums[group].update(name.encode())
        with open(os.path.join(checkpoint_dir, name + ".bin"), "rb") as f:
            sums[group].update(f.read())
    return {k: v.hexdigest() for k, v in sums.items()}


def _audit_against_dir(model: MiniLM, checkpoint_dir: str
                       ) -> dict[str, bool]:
    """Byte-compare the live model against a serialized checkpoint."""
    live = FreezeAudit(model_groups(model)).digests
    disk = _checkpoint_digests(checkpoint_dir)
    return {name: live[name] == disk[name] for name in live}


def run_all(ws: Workspace, config: RunConfig, variant: str = "SeLLa-Rec",
            log=None) -> dict[int, str]:
    """Stages 1-3 (with distillation in between) against one workspace."""
    out = {1: run_stage(ws, 1, config, variant, log)}
    model, tokenizer = ws.load_stage1()
    dataset = ws.load_dataset()
    bank = distill_all(model, tokenizer, dataset.items,
                       source=f"stage1-seed{config.seed}")
    bank.save(ws.bank_dir)
    out[2] = run_stage(ws, 2, config, variant, log)
    out[3] = run_stage(ws, 3, config, variant, log)
    return out
