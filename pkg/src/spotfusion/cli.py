"""Command-line entry point.

Subcommands: synth, train, eval, predict, dge, ablate, gradcheck. Options
come from defaults, then an optional JSON config file ({"train": {...},
"synth": {...}}), then command-line flags — later layers override earlier
ones. Unknown config keys are rejected. All randomness flows from one seed
through named substreams.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from pathlib import Path

from .analysis import (
    emit_reports,
    rank_genes_groups,
    select_high_confidence,
    write_dge_dotplot,
)
from .data import load_dataset, parse_gmt, preprocess_expression, save_dataset, write_gmt
from .model import load_checkpoint, save_checkpoint
from .synth import SynthConfig, synth_generate
from .training import (
    ABLATION_ROWS,
    TrainConfig,
    evaluate,
    predict_proba_dataset,
    run_ablation,
    run_pathway_sweep,
    train,
)

METRIC_KEYS = ("bal_acc", "w_f1", "auprc", "auroc", "mean")


class ConfigError(ValueError):
    pass


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    with open(path, "r", encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ConfigError(f"{path}: config must be a JSON object")
    unknown = set(raw) - {"train", "synth"}
    if unknown:
        raise ConfigError(f"{path}: unknown config sections {sorted(unknown)}")
    return raw


def _dataclass_from(section: dict, cls, label: str):
    valid = {f.name for f in dataclasses.fields(cls)}
    unknown = set(section) - valid
    if unknown:
        raise ConfigError(f"unknown {label} config keys {sorted(unknown)}")
    return cls(**section)


def _train_config(args) -> TrainConfig:
    cfg = _dataclass_from(_load_config_file(args.config).get("train", {}),
                          TrainConfig, "train")
    for flag, attr in (("seed", "seed"), ("epochs", "epochs"),
                       ("batch_size", "batch_size"), ("lr", "lr"),
                       ("pathway_count", "learnable_pathways"),
                       ("threshold", "overlap_threshold")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, attr, val)
    ablation = getattr(args, "ablation", None)
    if ablation is not None:
        rows = {label: (im, pw, st) for label, im, pw, st in ABLATION_ROWS}
        if ablation not in rows:
            raise ConfigError(
                f"unknown ablation {ablation!r}; choose from {sorted(rows)}"
            )
        cfg.image_mode, cfg.pathway_mode, cfg.st_branch = rows[ablation]
    cfg.validate()
    return cfg


def _synth_config(args) -> SynthConfig:
    section = _load_config_file(args.config).get("synth", {})
    cfg = _dataclass_from(section, SynthConfig, "synth")
    for flag, attr in (("seed", "seed"), ("classes", "n_classes"),
                       ("spots", "n_spots"), ("genes", "n_genes"),
                       ("pathways", "n_pathways"), ("markers", "markers_per_class"),
                       ("samples", "n_samples"), ("morph_noise", "morph_noise"),
                       ("marker_boost", "marker_boost"), ("base_rate", "base_rate")):
        val = getattr(args, flag, None)
        if val is not None:
            setattr(cfg, attr, val)
    if "split_counts" not in section and cfg.n_samples != sum(cfg.split_counts):
        n = cfg.n_samples
        cfg.split_counts = (max(n - 2, 1), 1 if n >= 3 else 0, 1 if n >= 2 else 0)
    cfg.validate()
    return cfg


def _load_preprocessed(path: str):
    return preprocess_expression(load_dataset(path))


def _write_json(path: Path, payload) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def _write_summary_tsv(path: Path, rows: list[dict], lead_keys: list[str]) -> None:
    keys = lead_keys + list(METRIC_KEYS)
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\t".join(keys) + "\n")
        for row in rows:
            cells = []
            for k in keys:
                v = row[k]
                cells.append("%.6g" % v if isinstance(v, float) else str(v))
            fh.write("\t".join(cells) + "\n")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    cfg = _synth_config(args)
    ds, db, truth = synth_generate(cfg)
    out = Path(args.out)
    save_dataset(ds, out)
    write_gmt(db, out / "pathways.gmt")
    _write_json(out / "truth.json", {
        "markers": truth.markers,
        "marker_pathways": truth.marker_pathways,
        "config": dataclasses.asdict(cfg),
    })
    print(f"wrote {len(ds)} spots, {ds.panel.d} genes, {len(db)} pathways to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _train_config(args)
    ds = _load_preprocessed(args.data)
    db = parse_gmt(args.gmt) if args.gmt else None
    model, history = train(ds, db, cfg)
    out = Path(args.out)
    save_checkpoint(model, out, config_echo=cfg.to_dict())
    _write_json(out / "history.json", history)
    best = max(h["val_bal_acc"] for h in history)
    print(f"trained {cfg.epochs} epochs; best val balanced accuracy {best:.4f}; "
          f"checkpoint at {out}")
    return 0


def cmd_eval(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    cfg = _dataclass_from(config, TrainConfig, "train") if config else TrainConfig()
    ds = _load_preprocessed(args.data)
    metrics, rows, _, _ = evaluate(ds, args.split, model, cfg)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "metrics.json", "w", encoding="utf-8") as fh:
        fh.write(metrics.to_json())
    emit_reports(rows, None, out)
    print(json.dumps(metrics.to_dict(), indent=2, sort_keys=True))
    return 0


def cmd_predict(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    cfg = _dataclass_from(config, TrainConfig, "train") if config else TrainConfig()
    ds = _load_preprocessed(args.data)
    idx, probs = predict_proba_dataset(ds, model, cfg)
    pred = probs.argmax(axis=1)
    conf = probs.max(axis=1)
    class_names = model.spec.class_names  # authoritative for predictions
    rows = []
    for j, i in enumerate(idx):
        truth = ds.class_names[ds.labels[i]] if ds.labels[i] >= 0 else "NA"
        rows.append({"spot_id": ds.spot_ids[i], "x": float(ds.xy[i, 0]),
                     "y": float(ds.xy[i, 1]), "truth": truth,
                     "predicted": class_names[pred[j]],
                     "confidence": float(conf[j])})
    out = Path(args.out)
    emit_reports(rows, None, out)
    print(f"wrote predictions for {len(rows)} spots to {out / 'prediction_map.tsv'}")
    return 0


def cmd_dge(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    cfg = _dataclass_from(config, TrainConfig, "train") if config else TrainConfig()
    ds = _load_preprocessed(args.data)
    if list(ds.class_names) != list(model.spec.class_names):
        raise ConfigError(
            f"dataset classes {ds.class_names} do not match checkpoint "
            f"{model.spec.class_names}"
        )
    split_idx = ds.split_indices(args.split)
    if split_idx.size == 0:
        raise ConfigError(f"split {args.split!r} is empty")
    _, probs = predict_proba_dataset(ds, model, cfg, split_idx)
    keep, groups = select_high_confidence(probs, args.tau)
    dge = rank_genes_groups(ds, split_idx[keep], groups)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_dge_dotplot(dge, out / "dge_dotplot.tsv", args.top_n)
    print(f"analyzed {keep.size} high-confidence spots "
          f"({len(dge.per_class)} classes) -> {out / 'dge_dotplot.tsv'}")
    return 0


def cmd_ablate(args) -> int:
    base = _train_config(args)
    ds = _load_preprocessed(args.data)
    db = parse_gmt(args.gmt) if args.gmt else None
    seeds = [int(s) for s in range(args.seeds)] if args.seeds else [base.seed]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    wrote = []
    if args.rows:
        if args.rows != "table2":
            raise ConfigError(f"unknown ablation row set {args.rows!r}")
        rows = run_ablation(ds, db, base, ABLATION_ROWS, seeds)
        _write_summary_tsv(out / "ablation_summary.tsv", rows,
                           ["row", "image", "pathway", "st", "seeds"])
        wrote.append("ablation_summary.tsv")
    if args.pathway_counts:
        counts = [int(c) for c in args.pathway_counts.split(",")]
        rows = run_pathway_sweep(ds, db, base, counts, seeds)
        _write_summary_tsv(out / "pathway_sweep.tsv", rows,
                           ["learnable_pathways", "seeds"])
        wrote.append("pathway_sweep.tsv")
    if not wrote:
        raise ConfigError("ablate needs --rows table2 and/or --pathway-counts")
    print(f"wrote {', '.join(wrote)} to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_gradcheck

    worst = run_gradcheck(verbose=True)
    if worst >= 1e-4:
        print(f"FAIL: max relative error {worst:.3e} >= 1e-4", file=sys.stderr)
        return 1
    print(f"OK: max relative error {worst:.3e} < 1e-4")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spotfusion",
        description="Multimodal tissue classification for spatial transcriptomics.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, data=False, gmt=False, checkpoint=False):
        p.add_argument("--config", help="JSON config file (default: none)")
        p.add_argument("--seed", type=int, default=None, help="master seed (default: 0)")
        if data:
            p.add_argument("--data", required=True, help="dataset manifest.json")
        if gmt:
            p.add_argument("--gmt", default=None, help="pathway GMT file (default: none)")
        if checkpoint:
            p.add_argument("--checkpoint", required=True, help="checkpoint directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    common(p)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--classes", type=int, default=None, help="class count (default: 3)")
    p.add_argument("--spots", type=int, default=None, help="total spots (default: 400)")
    p.add_argument("--genes", type=int, default=None, help="gene count (default: 60)")
    p.add_argument("--pathways", type=int, default=None, help="pathway count (default: 8)")
    p.add_argument("--markers", type=int, default=None,
                   help="marker genes per class (default: 10)")
    p.add_argument("--samples", type=int, default=None, help="sample count (default: 4)")
    p.add_argument("--morph-noise", dest="morph_noise", type=float, default=None,
                   help="morphology noise level (default: 6.0)")
    p.add_argument("--marker-boost", dest="marker_boost", type=float, default=None,
                   help="marker rate multiplier (default: 6.0)")
    p.add_argument("--base-rate", dest="base_rate", type=float, default=None,
                   help="background Poisson rate (default: 1.0)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    common(p, data=True, gmt=True)
    p.add_argument("--out", required=True, help="checkpoint output directory")
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default: 60)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="mini-batch size (default: 32)")
    p.add_argument("--lr", type=float, default=None, help="learning rate (default: 1e-4)")
    p.add_argument("--pathway-count", dest="pathway_count", type=int, default=None,
                   help="learnable pathway count (default: 200)")
    p.add_argument("--threshold", type=float, default=None,
                   help="clinical pathway overlap threshold (default: 0.9)")
    p.add_argument("--ablation", default=None,
                   help="named branch configuration, e.g. full, st_only (default: full)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    common(p, data=True, checkpoint=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="test", help="split to score (default: test)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="write predictions for a manifest")
    common(p, data=True, checkpoint=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("dge", help="confidence-gated differential expression")
    common(p, data=True, checkpoint=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--split", default="test", help="split to analyze (default: test)")
    p.add_argument("--tau", type=float, default=0.95,
                   help="confidence threshold (default: 0.95)")
    p.add_argument("--top-n", dest="top_n", type=int, default=10,
                   help="genes per class in the dot plot (default: 10)")
    p.set_defaults(func=cmd_dge)

    p = sub.add_parser("ablate", help="run branch ablations and pathway sweeps")
    common(p, data=True, gmt=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--rows", default=None, help="row set to run: table2 (default: none)")
    p.add_argument("--seeds", type=int, default=None,
                   help="number of seeds 0..S-1 (default: 1)")
    p.add_argument("--pathway-counts", dest="pathway_counts", default=None,
                   help="comma-separated learnable pathway counts, e.g. 50,100,200,400")
    p.add_argument("--epochs", type=int, default=None, help="max epochs (default: 60)")
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None,
                   help="mini-batch size (default: 32)")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference gradient audit")
    common(p)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (OSError, ValueError, RuntimeError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
