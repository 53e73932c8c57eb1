"""Command-line entry point: dataset synthesis, training, evaluation, sweeps,
ablations, embedding export, and report emission."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .data import (
    MODALITIES,
    MissingMask,
    SyntheticSpec,
    apply_mask,
    generate_synthetic,
    make_missing_mask,
    max_feasible_mr,
    read_dataset,
    write_dataset,
)
from .evaluation import (
    DEFAULT_ABLATION_ROWS,
    RunReport,
    ablation_grid,
    evaluate_split,
    export_embeddings,
    make_plots,
    mr_sweep,
    run_experiment,
    write_markdown_table,
    write_reports_csv,
)
from .training import (
    TrainConfig,
    check_compatible,
    load_checkpoint,
    prepare_split,
    split_indices,
)
from .validation import ValidationError

logger = logging.getLogger("crossprompt")


def _env_seed() -> int | None:
    raw = os.environ.get("COMP_SEED")
    return int(raw) if raw else None


def _parse_kv(text: str, cast=float) -> dict[str, float]:
    out = {}
    for part in text.split(","):
        key, _, value = part.partition("=")
        if not value:
            raise ValidationError(f"expected key=value pairs, got {text!r}")
        out[key.strip()] = cast(value)
    return out


def _parse_override(item: str) -> tuple[str, object]:
    key, _, raw = item.partition("=")
    if not raw:
        raise ValidationError(f"override must look like key=value, got {item!r}")
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def _apply_dotted(config: dict, key: str, value):
    parts = key.split(".")
    node = config
    for part in parts[:-1]:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ValidationError(f"cannot set {key!r}: {part!r} is not a table")
    node[parts[-1]] = value


def load_config(args) -> TrainConfig:
    """Resolve the effective config: defaults <- file <- --set overrides <- flags."""
    data: dict = {}
    if getattr(args, "config", None):
        with open(args.config) as fh:
            data.update(json.load(fh))
    for item in getattr(args, "set", None) or []:
        key, value = _parse_override(item)
        _apply_dotted(data, key, value)
    for name in getattr(args, "off", None) or []:
        data[name] = False
    seed = getattr(args, "seed", None)
    if seed is None:
        seed = data.get("seed", _env_seed())
    if seed is not None:
        data["seed"] = int(seed)
    if getattr(args, "mr", None) is not None:
        data["mr"] = args.mr
    return TrainConfig.from_dict(data)


def _save_config(cfg: TrainConfig, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "resolved_config.json", "w") as fh:
        json.dump(cfg.to_dict(), fh, indent=2)


def _parse_mr_list(text: str) -> list[float]:
    if ":" in text:
        lo, hi, step = (float(v) for v in text.split(":"))
        values = []
        v = lo
        while v <= hi + 1e-9:
            values.append(round(v, 10))
            v += step
        return values
    return [float(v) for v in text.split(",")]


def _parse_off(text: str) -> list[str]:
    names = [v.strip() for v in text.split(",") if v.strip()]
    bad = set(names) - {"kp", "pg", "cr", "gm"}
    if bad:
        raise ValidationError(f"unknown components for --off: {sorted(bad)}")
    return names


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_synth(args) -> int:
    seed = args.seed if args.seed is not None else (_env_seed() or 0)
    dims = {m: 20 for m in MODALITIES}
    if args.dims:
        dims.update({k: int(v) for k, v in _parse_kv(args.dims, cast=float).items()})
    snr = {"a": 4.0, "t": 1.0, "v": 0.25}
    if args.snr:
        snr.update(_parse_kv(args.snr))
    spec = SyntheticSpec(
        n_samples=args.n,
        num_classes=args.classes,
        latent_dim=args.latent_dim,
        feature_dims=dims,
        snr=snr,
        class_sep=args.class_sep,
        seed=seed,
    )
    batches, labels = generate_synthetic(spec)
    mask = None
    if args.mr is not None:
        mask = make_missing_mask(args.n, len(MODALITIES), args.mr, seed=seed)
    manifest = write_dataset(args.out, batches, labels, mask=mask, name=args.name)
    print(f"wrote dataset {manifest['name']!r} with {manifest['n_samples']} samples to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_config(args)
    batches, labels, _ = read_dataset(args.data)
    if args.stage == "1":
        cfg = cfg.replace(epochs_stage2=0)
    elif args.stage == "2":
        cfg = cfg.replace(epochs_stage1=0)
    report = run_experiment(batches, labels, cfg, out_dir=args.out, dataset_id=args.name)
    print(json.dumps(report.metrics, indent=2))
    return 0


def cmd_eval(args) -> int:
    net, cfg, payload = load_checkpoint(args.model)
    batches, labels, stored_mask = read_dataset(args.data)
    n, m = labels.n_samples, len(batches)
    mask = stored_mask
    if mask is None:
        mr = min(cfg.mr, max_feasible_mr(m))
        mask = make_missing_mask(n, m, mr, seed=cfg.seed)
    masked = apply_mask(batches, mask)
    _, test_idx = split_indices(n, cfg.test_fraction, cfg.seed)
    idx = test_idx if args.split == "test" else None
    data = prepare_split(masked, labels, idx, dtype=cfg.torch_dtype())
    check_compatible(net, data)
    result = evaluate_split(net, data, cfg, stage2=True)
    if args.out:
        _save_config(cfg, args.out)
        with open(Path(args.out) / "eval.json", "w") as fh:
            json.dump(result, fh, indent=2)
    print(json.dumps(result["fused"], indent=2))
    return 0


def cmd_sweep(args) -> int:
    cfg = load_config(args)
    batches, labels, _ = read_dataset(args.data)
    mr_list = _parse_mr_list(args.mr)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    _save_config(cfg, args.out)
    reports = mr_sweep(batches, labels, cfg, mr_list, seeds, out_dir=args.out)
    print(f"{len(reports)} runs complete; aggregate at {args.out}/sweep.csv")
    return 0


def cmd_ablate(args) -> int:
    cfg = load_config(args)
    batches, labels, _ = read_dataset(args.data)
    if args.rows:
        rows = [[v for v in row.split(",") if v] for row in args.rows.split(";")]
    else:
        rows = DEFAULT_ABLATION_ROWS
    _save_config(cfg, args.out)
    reports = ablation_grid(batches, labels, cfg, rows, out_dir=args.out)
    print(f"{len(reports)} ablation rows complete; table at {args.out}/ablation.md")
    return 0


def cmd_export(args) -> int:
    net, cfg, _ = load_checkpoint(args.model)
    batches, labels, stored_mask = read_dataset(args.data)
    mask = stored_mask
    if mask is None:
        mr = min(cfg.mr, max_feasible_mr(len(batches)))
        mask = make_missing_mask(labels.n_samples, len(batches), mr, seed=cfg.seed)
    path = export_embeddings(
        net, batches, labels, mask, args.which, args.out, modality=args.modality, cfg=cfg
    )
    print(f"wrote {path}")
    return 0


def cmd_report(args) -> int:
    run_dir = Path(args.runs)
    report_files = sorted(run_dir.glob("**/report.json"))
    if not report_files:
        raise ValidationError(f"no report.json files under {run_dir}")
    reports = [RunReport.load(p) for p in report_files]
    task = "classification" if reports[0].metrics.get("ua") is not None else "regression"
    out = Path(args.out) if args.out else run_dir
    write_reports_csv(reports, out / "aggregate.csv")
    write_markdown_table(reports, out / "tables.md", task)
    if args.plots:
        for p, r in zip(report_files, reports):
            make_plots(r, p.parent / "plots")
    print(f"aggregated {len(reports)} reports into {out}")
    return 0


class _Parser(argparse.ArgumentParser):
    """Argument errors surface as validation errors (exit code 1, not 2)."""

    def error(self, message):
        raise ValidationError(message)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="crossprompt",
        description="Incomplete multi-modal emotion recognition toolkit",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, data=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="dotted config override, repeatable")
        p.add_argument("--off", type=_parse_off, metavar="LIST",
                       help="comma list of components to disable: kp,pg,cr,gm")
        p.add_argument("--seed", type=int, default=None,
                       help="run seed (falls back to config, then COMP_SEED)")
        if data:
            p.add_argument("--data", required=True, help="dataset directory")

    p = sub.add_parser("synth", help="generate a synthetic dataset directory")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--classes", type=int, required=True)
    p.add_argument("--latent-dim", type=int, default=8)
    p.add_argument("--dims", help="per-modality feature dims, e.g. a=20,t=20,v=20")
    p.add_argument("--snr", help="per-modality SNR, e.g. a=4,t=1,v=0.25")
    p.add_argument("--class-sep", type=float, default=3.0)
    p.add_argument("--mr", type=float, default=None, help="also store a mask at this missing rate")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--name", default="synthetic")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="run the two-stage training")
    add_common(p)
    p.add_argument("--stage", choices=["1", "2", "all"], default="all")
    p.add_argument("--mr", type=float, default=None, help="missing rate override")
    p.add_argument("--name", default="dataset")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    add_common(p)
    p.add_argument("--model", required=True, help="checkpoint file")
    p.add_argument("--split", choices=["test", "all"], default="test")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("sweep", help="train/eval across missing rates and seeds")
    add_common(p)
    p.add_argument("--mr", required=True, help="list 0.1,0.3 or range 0.1:0.7:0.2")
    p.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("ablate", help="run the component ablation grid")
    add_common(p)
    p.add_argument("--rows", help="semicolon-separated kept-component lists, e.g. 'kp,pg;kp'")
    p.add_argument("--mr", type=float, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("export", help="export embeddings for external projection")
    add_common(p)
    p.add_argument("--model", required=True)
    p.add_argument("--which", choices=["Z", "Z_bar", "F"], required=True)
    p.add_argument("--modality", choices=list(MODALITIES), default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_export)

    p = sub.add_parser("report", help="re-aggregate run reports into CSV/Markdown")
    p.add_argument("--runs", required=True, help="directory containing run outputs")
    p.add_argument("--out")
    p.add_argument("--plots", action="store_true", help="also render PNG plots")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except (ValidationError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        logger.exception("command failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
