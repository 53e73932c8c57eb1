"""Metrics, missing-rate sweeps, the ablation grid, report emission, and
embedding export."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import (
    LabelSet,
    MissingMask,
    ModalityBatch,
    apply_mask,
    make_missing_mask,
    max_feasible_mr,
)
from .network import CrossModalNet
from .training import (
    TrainConfig,
    predict_all,
    prepare_split,
    save_checkpoint,
    set_determinism,
    split_indices,
    train_stage1,
    train_stage2,
)
from .validation import ValidationError

logger = logging.getLogger(__name__)

COMPONENTS = ("kp", "pg", "cr", "gm")


def binarize(scores: np.ndarray, rule: str = "neg_vs_nonneg") -> np.ndarray:
    """Map real sentiment scores to binary classes: negative vs non-negative."""
    if rule != "neg_vs_nonneg":
        raise ValidationError(f"unknown binarize rule {rule!r}")
    return (np.asarray(scores) >= 0).astype(np.int64)


def compute_metrics(
    predictions,
    labels,
    task: str = "classification",
    num_classes: int | None = None,
    binarize_rule: str = "neg_vs_nonneg",
) -> dict[str, float]:
    """Overall accuracy, unweighted (macro-recall) accuracy, and weighted F1.

    Regression inputs are binarized first; classes absent from the labels are
    excluded from the UA mean (and logged) rather than counted as zero recall.
    """
    preds = np.asarray(predictions)
    y = np.asarray(labels)
    if preds.shape[0] != y.shape[0]:
        raise ValidationError("predictions and labels must be aligned")
    if task == "regression":
        preds = binarize(preds, binarize_rule)
        y = binarize(y, binarize_rule)
        num_classes = 2
    if num_classes is None:
        num_classes = int(max(y.max(), preds.max())) + 1 if y.size else 2
    preds = preds.astype(np.int64)
    y = y.astype(np.int64)

    acc = float((preds == y).mean()) if y.size else 0.0
    recalls, f1s, supports = [], [], []
    for k in range(num_classes):
        support = int((y == k).sum())
        if support == 0:
            logger.info("metrics: class %d absent from labels, excluded from UA", k)
            continue
        tp = int(((preds == k) & (y == k)).sum())
        predicted = int((preds == k).sum())
        recall = tp / support
        precision = tp / predicted if predicted else 0.0
        f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
        recalls.append(recall)
        f1s.append(f1)
        supports.append(support)
    ua = float(np.mean(recalls)) if recalls else 0.0
    total = sum(supports)
    f1w = float(sum(f * s for f, s in zip(f1s, supports)) / total) if total else 0.0
    return {"acc": acc, "ua": ua, "f1": f1w}


@dataclass
class RunReport:
    """Result of one train+eval run at a fixed missing rate and seed."""

    dataset_id: str
    mr: float
    seed: int
    ablation: dict[str, bool]
    metrics: dict[str, float]
    per_modality_acc: dict[str, float]
    coordinator_weight_means: list[float] | None
    epoch_curves: list[dict] = field(default_factory=list)
    stage1_per_modality_acc: dict[str, float] = field(default_factory=dict)
    effective_mr: float | None = None
    mse: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> "RunReport":
        return cls(**data)

    def save(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)

    @classmethod
    def load(cls, path) -> "RunReport":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))


def _tensor_labels(y: torch.Tensor) -> np.ndarray:
    return y.detach().cpu().numpy()


def _fused_predictions(y_prime: torch.Tensor, task: str) -> np.ndarray:
    if task == "classification":
        return y_prime.argmax(dim=1).cpu().numpy()
    return y_prime.cpu().numpy()


def evaluate_split(net: CrossModalNet, data, cfg: TrainConfig, stage2: bool = True) -> dict:
    """Metrics for one split: fused (stage 2 only) and per modality."""
    pred = predict_all(net, data, stage2=stage2)
    y = _tensor_labels(data.y)
    out: dict = {"per_modality": {}}
    for u, probs in pred["modality_probs"].items():
        p = _fused_predictions(probs, data.task)
        out["per_modality"][u] = compute_metrics(
            p, y, task=data.task, num_classes=data.num_classes, binarize_rule=cfg.binarize_rule
        )
    if stage2:
        fused = _fused_predictions(pred["y_prime"], data.task)
        out["fused"] = compute_metrics(
            fused, y, task=data.task, num_classes=data.num_classes, binarize_rule=cfg.binarize_rule
        )
        if data.task == "regression":
            diff = pred["y_prime"].cpu().numpy() - y
            out["mse"] = float(np.mean(diff * diff))
        if pred["omega_bar"] is not None:
            out["coordinator_weight_means"] = pred["omega_bar"].mean(dim=0).tolist()
        else:
            out["coordinator_weight_means"] = None
    return out


def run_experiment(
    batches: list[ModalityBatch],
    labels: LabelSet,
    cfg: TrainConfig,
    out_dir=None,
    dataset_id: str = "synthetic",
    mask: MissingMask | None = None,
    requested_mr: float | None = None,
) -> RunReport:
    """Train both stages at one (mr, seed) and evaluate on a held-out split.

    The missing mask covers the whole dataset and is fixed by (mr, seed), so
    train and test rows keep identical missingness across configurations; it is
    stored with the run when an output directory is given. An infeasible mr is
    an error here; only :func:`mr_sweep` clamps (``requested_mr`` records the
    pre-clamp value in the report).
    """
    set_determinism(cfg.seed)
    n = labels.n_samples
    m = len(batches)
    if mask is None:
        mask = make_missing_mask(n, m, cfg.mr, seed=cfg.seed)
    masked = apply_mask(batches, mask)
    train_idx, test_idx = split_indices(n, cfg.test_fraction, cfg.seed)
    dtype = cfg.torch_dtype()
    train_data = prepare_split(masked, labels, train_idx, dtype=dtype)
    test_data = prepare_split(masked, labels, test_idx, dtype=dtype)

    out_path = Path(out_dir) if out_dir else None
    if out_path:
        out_path.mkdir(parents=True, exist_ok=True)
        with open(out_path / "resolved_config.json", "w") as fh:
            json.dump(cfg.to_dict(), fh, indent=2)
        with open(out_path / "mask.txt", "w") as fh:
            fh.writelines("".join(str(int(v)) for v in row) + "\n" for row in mask.observed)

    log_path = out_path / "train_log.jsonl" if out_path else None
    net, hist1 = train_stage1(train_data, cfg, log_path=log_path)
    stage1_eval = evaluate_split(net, test_data, cfg, stage2=False)
    if out_path:
        save_checkpoint(out_path / "stage1.ckpt", net, cfg, stage=1)
    hist2 = train_stage2(net, train_data, cfg, log_path=log_path)
    if out_path:
        save_checkpoint(out_path / "model.ckpt", net, cfg, stage=2)
    final = evaluate_split(net, test_data, cfg, stage2=True)

    report = RunReport(
        dataset_id=dataset_id,
        mr=requested_mr if requested_mr is not None else cfg.mr,
        seed=cfg.seed,
        ablation={k: getattr(cfg, k) for k in COMPONENTS},
        metrics=final["fused"],
        per_modality_acc={u: v["acc"] for u, v in final["per_modality"].items()},
        coordinator_weight_means=final["coordinator_weight_means"],
        epoch_curves=hist1 + hist2,
        stage1_per_modality_acc={u: v["acc"] for u, v in stage1_eval["per_modality"].items()},
        effective_mr=cfg.mr,
        mse=final.get("mse"),
    )
    if out_path:
        report.save(out_path / "report.json")
    return report


def mr_sweep(
    batches: list[ModalityBatch],
    labels: LabelSet,
    cfg: TrainConfig,
    mr_list: list[float],
    seeds: list[int],
    out_dir=None,
    dataset_id: str = "synthetic",
) -> list[RunReport]:
    """Full train+eval per (mr, seed); infeasible rates are clamped with a warning."""
    reports = []
    out_path = Path(out_dir) if out_dir else None
    mr_cap = max_feasible_mr(len(batches))
    for mr in mr_list:
        effective = min(mr, mr_cap)
        if effective < mr:
            logger.warning(
                "missing rate %g cannot keep one modality per sample observed; clamped to %.4f",
                mr, effective,
            )
        for seed in seeds:
            run_cfg = cfg.replace(mr=effective, seed=seed)
            run_dir = out_path / f"mr{mr:g}_seed{seed}" if out_path else None
            reports.append(
                run_experiment(
                    batches, labels, run_cfg,
                    out_dir=run_dir, dataset_id=dataset_id, requested_mr=mr,
                )
            )
    if out_path:
        write_reports_csv(reports, out_path / "sweep.csv")
        write_markdown_table(reports, out_path / "sweep.md", labels.task)
    return reports


def _row_key(row) -> tuple:
    return tuple(sorted(set(row)))


def ablation_grid(
    batches: list[ModalityBatch],
    labels: LabelSet,
    cfg: TrainConfig,
    rows: list[list[str]],
    out_dir=None,
    dataset_id: str = "synthetic",
) -> list[RunReport]:
    """One run per component subset, all sharing the same seed and mask."""
    seen = set()
    unique_rows = []
    for row in rows:
        bad = set(row) - set(COMPONENTS)
        if bad:
            raise ValidationError(f"unknown components {sorted(bad)}")
        key = _row_key(row)
        if key in seen:
            logger.warning("duplicate ablation row %s skipped", sorted(set(row)))
            continue
        seen.add(key)
        unique_rows.append(key)

    n, m = labels.n_samples, len(batches)
    effective_mr = min(cfg.mr, max_feasible_mr(m))
    if effective_mr < cfg.mr:
        logger.warning("ablation missing rate %g clamped to %.4f", cfg.mr, effective_mr)
    mask = make_missing_mask(n, m, effective_mr, seed=cfg.seed)
    reports = []
    out_path = Path(out_dir) if out_dir else None
    for row in unique_rows:
        flags = {k: k in row for k in COMPONENTS}
        run_cfg = cfg.replace(mr=effective_mr, **flags)
        label = "+".join(k for k in COMPONENTS if flags[k]) or "none"
        run_dir = out_path / f"ablate_{label}" if out_path else None
        reports.append(
            run_experiment(
                batches, labels, run_cfg, out_dir=run_dir, dataset_id=dataset_id,
                mask=mask, requested_mr=cfg.mr,
            )
        )
    if out_path:
        write_reports_csv(reports, out_path / "ablation.csv")
        write_markdown_table(reports, out_path / "ablation.md", labels.task)
    return reports


DEFAULT_ABLATION_ROWS: list[list[str]] = [
    [],
    ["kp"],
    ["kp", "pg"],
    ["kp", "pg", "cr"],
    ["pg", "cr", "gm"],
    ["kp", "cr", "gm"],
    ["kp", "pg", "gm"],
    ["kp", "pg", "cr", "gm"],
]


def export_embeddings(
    net: CrossModalNet,
    batches: list[ModalityBatch],
    labels: LabelSet,
    mask: MissingMask,
    which: str,
    out_dir,
    modality: str | None = None,
    cfg: TrainConfig | None = None,
) -> Path:
    """Write one embedding matrix plus labels and a missing-row sidecar.

    ``which`` selects encoder latents ("Z"), propagated latents ("Z_bar"), or
    the fused representation ("F"); the first two need a modality. Output uses
    the dataset binary format so external projection tools can read it.
    """
    cfg = cfg or TrainConfig()
    if which not in ("Z", "Z_bar", "F"):
        raise ValidationError(f"unknown embedding selector {which!r}")
    if which in ("Z", "Z_bar") and modality not in net.modalities:
        raise ValidationError(f"embedding selector {which} needs a modality from {net.modalities}")
    masked = apply_mask(batches, mask)
    data = prepare_split(masked, labels, dtype=cfg.torch_dtype())
    pred = predict_all(net, data, stage2=True)
    if which == "F":
        matrix = pred["fused"]
        missing_flags = (np.asarray(mask.observed).min(axis=1) == 0).astype(np.int64)
        tag = "fused"
    else:
        source = pred["zs"] if which == "Z" else pred["z_bars"]
        matrix = source[modality]
        j = list(net.modalities).index(modality)
        missing_flags = (np.asarray(mask.column(j)) == 0).astype(np.int64)
        tag = f"{'latent' if which == 'Z' else 'propagated'}_{modality}"

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    arr = matrix.detach().cpu().numpy().astype("<f4")
    fname = f"{tag}.f32"
    arr.tofile(out_path / fname)
    with open(out_path / f"{tag}_labels.txt", "w") as fh:
        if labels.task == "classification":
            fh.writelines(f"{int(v)}\n" for v in labels.y)
        else:
            fh.writelines(f"{float(v)!r}\n" for v in labels.y)
    with open(out_path / f"{tag}_missing.txt", "w") as fh:
        fh.writelines(f"{int(v)}\n" for v in missing_flags)
    manifest = {
        "name": tag,
        "n_samples": int(arr.shape[0]),
        "task": labels.task,
        "modalities": [{"name": tag, "dim": int(arr.shape[1]), "dtype": "f32le", "file": fname}],
        "labels_file": f"{tag}_labels.txt",
        "missing_file": f"{tag}_missing.txt",
    }
    if labels.task == "classification":
        manifest["num_classes"] = int(labels.num_classes)
    with open(out_path / f"{tag}_manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2)
    return out_path / fname


# ---------------------------------------------------------------------------
# Report emission
# ---------------------------------------------------------------------------


def write_reports_csv(reports: list[RunReport], path):
    """Per-run rows plus a mean row per (dataset, mr, ablation) group."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    cols = [
        "dataset_id", "mr", "effective_mr", "seed", "kp", "pg", "cr", "gm",
        "acc", "ua", "f1", "acc_a", "acc_t", "acc_v", "w_a", "w_t", "w_v",
    ]

    def row_of(r: RunReport, seed_label) -> dict:
        w = r.coordinator_weight_means or [float("nan")] * 3
        return {
            "dataset_id": r.dataset_id,
            "mr": r.mr,
            "effective_mr": r.effective_mr,
            "seed": seed_label,
            **{k: r.ablation.get(k) for k in COMPONENTS},
            "acc": r.metrics.get("acc"),
            "ua": r.metrics.get("ua"),
            "f1": r.metrics.get("f1"),
            "acc_a": r.per_modality_acc.get("a"),
            "acc_t": r.per_modality_acc.get("t"),
            "acc_v": r.per_modality_acc.get("v"),
            "w_a": w[0], "w_t": w[1], "w_v": w[2],
        }

    groups: dict[tuple, list[RunReport]] = {}
    for r in reports:
        groups.setdefault((r.dataset_id, r.mr, tuple(sorted(r.ablation.items()))), []).append(r)

    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=cols)
        writer.writeheader()
        for (_, _, _), group in groups.items():
            for r in group:
                writer.writerow(row_of(r, r.seed))
            if len(group) > 1:
                mean = group[0]
                agg = row_of(mean, "mean")
                for key in ("acc", "ua", "f1", "acc_a", "acc_t", "acc_v", "w_a", "w_t", "w_v"):
                    vals = [row_of(r, r.seed)[key] for r in group]
                    vals = [v for v in vals if v is not None and not np.isnan(v)]
                    agg[key] = float(np.mean(vals)) if vals else None
                writer.writerow(agg)
    return path


def aggregate_by_mr(reports: list[RunReport]) -> dict[tuple, dict[float, dict[str, float]]]:
    """Mean metrics over seeds, grouped by ablation row then missing rate."""
    acc: dict[tuple, dict[float, list[RunReport]]] = {}
    for r in reports:
        key = tuple(k for k in COMPONENTS if r.ablation.get(k))
        acc.setdefault(key, {}).setdefault(r.mr, []).append(r)
    out: dict[tuple, dict[float, dict[str, float]]] = {}
    for key, by_mr in acc.items():
        out[key] = {}
        for mr, group in sorted(by_mr.items()):
            out[key][mr] = {
                name: float(np.mean([g.metrics[name] for g in group]))
                for name in ("acc", "ua", "f1")
            }
    return out


def write_markdown_table(reports: list[RunReport], path, task: str = "classification"):
    """Rows are configurations, columns missing rates, cells ACC/UA or ACC/F1 in percent."""
    second = "ua" if task == "classification" else "f1"
    header_metric = "ACC(%)/UA(%)" if task == "classification" else "ACC(%)/F1(%)"
    agg = aggregate_by_mr(reports)
    mrs = sorted({mr for by_mr in agg.values() for mr in by_mr})
    lines = [
        "| Components | " + " | ".join(f"MR {mr:g} ({header_metric})" for mr in mrs) + " |",
        "|---" * (len(mrs) + 1) + "|",
    ]
    for key in sorted(agg, key=lambda k: (len(k), k)):
        label = "+".join(key) if key else "none"
        cells = []
        for mr in mrs:
            vals = agg[key].get(mr)
            cells.append(
                f"{vals['acc'] * 100:.2f}/{vals[second] * 100:.2f}" if vals else "-"
            )
        lines.append("| " + " | ".join([label] + cells) + " |")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text("\n".join(lines) + "\n")
    return path


def make_plots(report: RunReport, out_dir):
    """Optional PNGs: per-modality accuracy curves and mean coordinator weights."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out_path = Path(out_dir)
    out_path.mkdir(parents=True, exist_ok=True)
    made = []

    curves = report.epoch_curves
    if curves:
        fig, ax = plt.subplots(figsize=(6, 4))
        xs = range(len(curves))
        mods = sorted(curves[0]["per_modality_acc"])
        for u in mods:
            ax.plot(xs, [c["per_modality_acc"][u] for c in curves], label=f"modality {u}")
        fused = [c.get("fused_acc") for c in curves]
        if any(v is not None for v in fused):
            ax.plot(xs, [v if v is not None else np.nan for v in fused], "k--", label="fused")
        stage2_start = next((i for i, c in enumerate(curves) if c["stage"] == 2), None)
        if stage2_start:
            ax.axvline(stage2_start - 0.5, color="gray", lw=0.8)
        ax.set_xlabel("epoch")
        ax.set_ylabel("train accuracy")
        ax.legend()
        fig.tight_layout()
        p = out_path / "modality_accuracy.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        made.append(p)

    if report.coordinator_weight_means:
        fig, ax = plt.subplots(figsize=(4, 3))
        names = ["a", "t", "v"]
        ax.bar(names, report.coordinator_weight_means)
        ax.set_ylabel("mean coordinator weight")
        fig.tight_layout()
        p = out_path / "coordinator_weights.png"
        fig.savefig(p, dpi=120)
        plt.close(fig)
        made.append(p)
    return made
