"""Command-line entry point: data prep, staged training, evaluation,
ablations, and diagnostic exports over a single workspace directory.

Config resolution order: built-in defaults, then `--config FILE` (key=value
lines), then `--set key=value` flags, then `--seed`.  Usage errors exit 2
(argparse); module errors print one structured line to stderr and exit 1.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from .collab import CollabError, CollabModel, ProjCtoL
from .config import (ConfigError, RunConfig, apply_overrides, config_dict,
                     load_config)
from .data import (DataError, dataset_hash, ingest, save_dataset,
                   synth_generate, tag_warm_cold, temporal_split)
from .distill import DistillError, SemanticBank, distill_all
from .evalrep import (MetricError, MetricsReport, attention_export,
                      cosine_report, embedding_export, render_report,
                      write_cosine_csv)
from .figures import FigureError, cosine_png, metrics_png
from .fusion import (FusionError, ProjWtoL, build_fusion_prompt, inject,
                     project_tokens)
from .pipeline import (PipelineError, Workspace, evaluate_checkpoint,
                       run_all, run_stage, run_variant, variant_spec)
from .tensor import TensorError

_MODULE_ERRORS = (CollabError, ConfigError, DataError, DistillError,
                  FigureError, FusionError, MetricError, PipelineError,
                  TensorError, OSError)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="FILE",
                        help="key=value config file")
    common.add_argument("--set", metavar="KEY=VALUE", action="append",
                        default=[], dest="overrides",
                        help="override one config field (repeatable)")
    common.add_argument("--seed", type=int, help="override config seed")
    common.add_argument("--workspace", metavar="DIR",
                        help="run directory (default: config out_dir)")
    common.add_argument("--verbose", action="store_true",
                        help="log per-epoch progress")

    p = argparse.ArgumentParser(
        prog="sella",
        description="Train and evaluate the SeLLa-Rec pipeline.")
    sub = p.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common],
                   help="generate the synthetic dataset into the workspace")

    pi = sub.add_parser("ingest", parents=[common],
                        help="ingest a ratings/titles log")
    pi.add_argument("--ratings", required=True)
    pi.add_argument("--titles", required=True)
    pi.add_argument("--threshold", type=int, required=True,
                    help="label = 1 iff rating > threshold (3 or 4)")
    pi.add_argument("--min-user", type=int, default=0,
                    help="drop users with fewer interactions")
    pi.add_argument("--ratios", default="10,5,5",
                    help="train,valid,test chronological ratios")

    for name, help_ in (("stage1", "LoRA task adaptation"),
                        ("stage2", "collaborative pre-alignment"),
                        ("stage3", "hybrid projection training")):
        ps = sub.add_parser(name, parents=[common], help=help_)
        ps.add_argument("--variant", default="SeLLa-Rec")

    sub.add_parser("distill", parents=[common],
                   help="distill the semantic item bank from stage 1")

    pr = sub.add_parser("run", parents=[common],
                        help="run one stage or the whole pipeline")
    g = pr.add_mutually_exclusive_group(required=True)
    g.add_argument("--stage", type=int, choices=(1, 2, 3))
    g.add_argument("--all", action="store_true")
    pr.add_argument("--variant", default="SeLLa-Rec")

    pe = sub.add_parser("eval", parents=[common],
                        help="score a checkpoint and write reports")
    pe.add_argument("--split", default="test",
                    choices=("train", "valid", "test"))
    pe.add_argument("--stage", type=int, choices=(1, 3), default=3)
    pe.add_argument("--figures", action="store_true",
                    help="also render PNG figures next to the reports")

    pa = sub.add_parser("ablate", parents=[common],
                        help="run one ablation variant end to end")
    pa.add_argument("--variant", required=True)

    px = sub.add_parser("export-align", parents=[common],
                        help="export alignment diagnostics (cosine, "
                             "embeddings)")
    px.add_argument("--stage", type=int, choices=(2, 3), default=2)
    px.add_argument("--figures", action="store_true")

    pt = sub.add_parser("export-attn", parents=[common],
                        help="export head-averaged attention for one "
                             "fused prompt")
    pt.add_argument("--index", type=int, default=0,
                    help="interaction index within the split")
    pt.add_argument("--split", default="test",
                    choices=("train", "valid", "test"))
    pt.add_argument("--layers", default="",
                    help="comma-separated layer ids (default: all)")
    return p


def resolve_config(args) -> RunConfig:
    config = RunConfig()
    if args.config:
        config = load_config(args.config, base=config)
    if args.overrides:
        pairs = []
        for item in args.overrides:
            if "=" not in item:
                raise ConfigError(f"--set expects key=value, got {item!r}")
            key, _, value = item.partition("=")
            pairs.append((key.strip(), value.strip()))
        config = apply_overrides(config, dict(pairs))
    if args.seed is not None:
        config = apply_overrides(config, {"seed": str(args.seed)})
    return config


def _workspace(args, config: RunConfig) -> Workspace:
    return Workspace(args.workspace or config.out_dir or "runs")


def _log(args):
    return (lambda msg: print(msg, file=sys.stderr)) if args.verbose else None


def _write_metrics(report: MetricsReport, out_dir: str, stem: str) -> str:
    """metrics as JSON + TSV + aligned text; returns the TSV path."""
    os.makedirs(out_dir, exist_ok=True)
    base = os.path.join(out_dir, stem)
    with open(base + ".json", "w", encoding="utf-8") as f:
        json.dump(report.to_dict(), f, indent=2, sort_keys=True)
        f.write("\n")
    tsv = base + ".tsv"
    with open(tsv, "w", encoding="utf-8") as f:
        f.write("slice\tauc\tuauc\tcount\teligible_users\texcluded_users\n")
        for name in ("all", "warm", "cold"):
            m = report.slices[name]
            f.write("\t".join([
                name,
                "" if m.auc is None else repr(m.auc),
                "" if m.uauc is None else repr(m.uauc),
                str(m.count), str(m.eligible_users),
                str(m.excluded_users)]) + "\n")
    with open(base + ".txt", "w", encoding="utf-8") as f:
        f.write(render_report(report) + "\n")
    return tsv


def _slug(name: str) -> str:
    return "".join(c if c.isalnum() or c in "-_" else "-" for c in name)


# ---------------------------------------------------------------------------
# subcommands


def _cmd_synth(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    dataset = synth_generate(
        n_users=config.n_users, n_items=config.n_items, rank=config.rank,
        density=config.density, noise=config.noise,
        cold_frac=config.cold_frac, seed=config.seed)
    manifest = save_dataset(dataset, ws.dataset_dir, extra_manifest={
        "source": "synth", "seed": config.seed,
        "generator": {"n_users": config.n_users, "n_items": config.n_items,
                      "rank": config.rank, "density": config.density,
                      "noise": config.noise,
                      "cold_frac": config.cold_frac}})
    print(f"dataset {manifest['data_hash']}: "
          f"{manifest['n_interactions']} interactions -> {ws.dataset_dir}")
    return 0


def _cmd_ingest(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    try:
        ratios = tuple(float(x) for x in args.ratios.split(","))
    except ValueError:
        raise DataError(f"bad --ratios {args.ratios!r}") from None
    dataset = tag_warm_cold(temporal_split(
        ingest(args.ratings, args.titles, args.threshold,
               min_user_interactions=args.min_user), ratios))
    manifest = save_dataset(dataset, ws.dataset_dir, extra_manifest={
        "source": "ingest", "ratings": os.path.abspath(args.ratings),
        "titles": os.path.abspath(args.titles),
        "threshold": args.threshold, "ratios": list(ratios)})
    print(f"dataset {manifest['data_hash']}: "
          f"{manifest['n_interactions']} interactions -> {ws.dataset_dir}")
    return 0


def _cmd_stage(args, config: RunConfig, stage: int) -> int:
    ws = _workspace(args, config)
    out = run_stage(ws, stage, config, variant=args.variant, log=_log(args))
    print(f"stage {stage} checkpoint -> {out}")
    return 0


def _cmd_distill(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    model, tokenizer = ws.load_stage1()
    dataset = ws.load_dataset()
    bank = distill_all(model, tokenizer, dataset.items,
                       source=f"stage1-seed{config.seed}")
    bank.save(ws.bank_dir)
    print(f"distilled {len(bank.item_ids)} items -> {ws.bank_dir}")
    return 0


def _cmd_run(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    if args.all:
        dirs = run_all(ws, config, variant=args.variant, log=_log(args))
    else:
        dirs = {args.stage: run_stage(ws, args.stage, config,
                                      variant=args.variant, log=_log(args))}
    manifest = {
        "command": "run --all" if args.all else f"run --stage {args.stage}",
        "variant": args.variant,
        "toggles": vars(variant_spec(args.variant)),
        "seed": config.seed,
        "data_hash": dataset_hash(ws.load_dataset()),
        "checkpoints": {str(k): v for k, v in sorted(dirs.items())},
        "config": config_dict(config),
    }
    path = os.path.join(ws.root, "run.json")
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    for stage, out in sorted(dirs.items()):
        print(f"stage {stage} checkpoint -> {out}")
    print(f"run manifest -> {path}")
    return 0


def _cmd_eval(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    report = evaluate_checkpoint(ws, config, split=args.split,
                                 stage=args.stage)
    stem = f"metrics-stage{args.stage}-{args.split}"
    tsv = _write_metrics(report, ws.metrics_dir, stem)
    print(render_report(report))
    print(f"reports -> {ws.metrics_dir}/{stem}.{{json,tsv,txt}}")
    if args.figures:
        print(f"figure -> {metrics_png(tsv)}")
    return 0


def _cmd_ablate(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    dataset = ws.load_dataset()
    result = run_variant(args.variant, dataset, config, log=_log(args))
    out_dir = os.path.join(ws.root, "ablate", _slug(args.variant))
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "manifest.json"), "w",
              encoding="utf-8") as f:
        json.dump(result.manifest, f, indent=2, sort_keys=True, default=float)
        f.write("\n")
    _write_metrics(result.report, out_dir, "metrics-test")
    print(render_report(result.report))
    print(f"ablation artifacts -> {out_dir}")
    return 0


def _cmd_export_align(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    src = ws.stage2_dir if args.stage == 2 else ws.stage3_dir
    ws.require(src, f"stage-{args.stage} checkpoint",
               f"run `stage{args.stage}` first")
    collab = CollabModel.load(src)
    proj = ProjCtoL.load(src)
    bank = SemanticBank.load(src)
    cos = cosine_report(collab.item_table, proj, bank.vectors)
    os.makedirs(ws.metrics_dir, exist_ok=True)
    cos_path = os.path.join(ws.metrics_dir, f"cosine-stage{args.stage}.csv")
    write_cosine_csv(cos, cos_path)
    emb_path = os.path.join(ws.metrics_dir,
                            f"embeddings-stage{args.stage}.csv")
    rows = embedding_export(bank.vectors, collab.item_table, proj, emb_path)
    print(f"cosine mean {cos.mean:.4f} median {cos.median:.4f} "
          f"({cos.n_items - cos.n_skipped} items, {cos.n_skipped} skipped)")
    print(f"exports -> {cos_path}, {emb_path} ({rows} rows)")
    if args.figures:
        print(f"figure -> {cosine_png(cos_path)}")
    return 0


def _cmd_export_attn(args, config: RunConfig) -> int:
    ws = _workspace(args, config)
    dataset = ws.load_dataset()
    model, tokenizer = ws.load_stage1()
    ws.require(ws.stage3_dir, "stage-3 checkpoint", "run `stage3` first")
    with open(os.path.join(ws.stage3_dir, "stage3.json"),
              encoding="utf-8") as f:
        meta = json.load(f)
    toggles = meta["toggles"]
    indices = dataset.split_indices(args.split)
    if not 0 <= args.index < len(indices):
        raise PipelineError(
            f"--index {args.index} outside the {args.split} split "
            f"(size {len(indices)})")
    j = indices[args.index]
    r = dataset.interactions[j]
    history = [(dataset.items[h.item_id], h.label)
               for h in dataset.user_history(r.user_id, j, config.k_history)]
    prompt = build_fusion_prompt(tokenizer, history, dataset.items[r.item_id],
                                 config.k_history, use_ui=toggles["use_ui"],
                                 use_warm=toggles["use_warm"])
    collab = CollabModel.load(ws.stage3_dir)
    bank = SemanticBank.load(ws.stage3_dir)
    proj_cl = ProjCtoL.load(ws.stage3_dir)
    proj_wl = ProjWtoL.load(ws.stage3_dir)
    u, i, w = project_tokens(collab.user_table[r.user_id],
                             collab.item_table[r.item_id],
                             bank.vector(r.item_id), proj_cl, proj_wl)
    triple = {"user": u, "item": i, "warm": w}
    emb = inject(model.embed(prompt.ids),
                 {k: triple[k] for k in prompt.positions}, prompt.positions)
    maps = model.attention_maps(emb)
    layer_ids = (list(range(len(maps))) if not args.layers else
                 [int(x) for x in args.layers.split(",")])
    labels = [tokenizer.decode([t]) for t in prompt.ids]
    os.makedirs(ws.metrics_dir, exist_ok=True)
    path = os.path.join(ws.metrics_dir,
                        f"attention-{args.split}-{args.index}.csv")
    attention_export(maps, labels, layer_ids, path)
    print(f"attention ({len(layer_ids)} layers, seq {len(prompt.ids)}) "
          f"-> {path}")
    return 0


_COMMANDS = {
    "synth": _cmd_synth,
    "ingest": _cmd_ingest,
    "stage1": lambda a, c: _cmd_stage(a, c, 1),
    "stage2": lambda a, c: _cmd_stage(a, c, 2),
    "stage3": lambda a, c: _cmd_stage(a, c, 3),
    "distill": _cmd_distill,
    "run": _cmd_run,
    "eval": _cmd_eval,
    "ablate": _cmd_ablate,
    "export-align": _cmd_export_align,
    "export-attn": _cmd_export_attn,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = resolve_config(args)
        return _COMMANDS[args.command](args, config)
    except _MODULE_ERRORS as e:
        print(f"sella {args.command}: error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
