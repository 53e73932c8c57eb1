"""Multi-modal batch model, missing-mask generation, synthetic data, and disk format.

Conventions used throughout the package:

* modalities are identified by the canonical short names ``("a", "t", "v")``
  and always iterated in that order;
* a missing mask is an ``[n, m]`` 0/1 matrix where 1 means observed;
* missing feature rows are zero-imputed before any model sees them.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace

import numpy as np

from .validation import (
    CorruptDatasetError,
    InfeasibleMissingRateError,
    ValidationError,
    check_binary_vector,
    check_class_labels,
    check_finite,
)

logger = logging.getLogger(__name__)

MODALITIES: tuple[str, ...] = ("a", "t", "v")

MANIFEST_NAME = "manifest.json"
_FLOAT_DTYPE = np.dtype("<f4")  # "f32le" in manifests


@dataclass(frozen=True)
class ModalityBatch:
    """Raw features, observation indicators, and the zero-imputed view for one modality."""

    modality_id: str
    X: np.ndarray
    observed: np.ndarray
    X_hat: np.ndarray | None = None

    def __post_init__(self):
        x = np.asarray(self.X)
        if x.ndim != 2:
            raise ValidationError(f"X must be 2-D, got shape {x.shape}")
        obs = check_binary_vector(self.observed, n=x.shape[0], name="observed")
        object.__setattr__(self, "X", x)
        object.__setattr__(self, "observed", obs)

    @property
    def n_samples(self) -> int:
        return self.X.shape[0]

    @property
    def dim(self) -> int:
        return self.X.shape[1]


@dataclass(frozen=True)
class MissingMask:
    """Observation indicators for all modalities of a dataset at a target missing rate."""

    observed: np.ndarray  # [n, m], 1 = observed
    mr: float

    def __post_init__(self):
        obs = np.asarray(self.observed)
        if obs.ndim != 2:
            raise ValidationError(f"mask must be 2-D, got shape {obs.shape}")
        if not np.isin(obs, (0, 1)).all():
            raise ValidationError("mask must contain only 0/1 values")
        if obs.size and not (obs.sum(axis=1) >= 1).all():
            raise ValidationError("every sample must be observed in at least one modality")
        object.__setattr__(self, "observed", obs.astype(np.int8))

    @property
    def n_samples(self) -> int:
        return self.observed.shape[0]

    @property
    def num_modalities(self) -> int:
        return self.observed.shape[1]

    def column(self, j: int) -> np.ndarray:
        return self.observed[:, j]


@dataclass(frozen=True)
class LabelSet:
    """Targets for one dataset: class indices or real-valued sentiment scores."""

    task: str  # "classification" | "regression"
    y: np.ndarray
    num_classes: int | None = None

    def __post_init__(self):
        if self.task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {self.task!r}")
        if self.task == "classification":
            if self.num_classes is None or self.num_classes < 2:
                raise ValidationError("classification needs num_classes >= 2")
            y = check_class_labels(self.y, self.num_classes)
        else:
            y = np.asarray(self.y, dtype=np.float64)
            if y.ndim != 1:
                raise ValidationError("regression labels must be 1-D")
        object.__setattr__(self, "y", y)

    @property
    def n_samples(self) -> int:
        return self.y.shape[0]


@dataclass(frozen=True)
class SyntheticSpec:
    """Recipe for a controllable synthetic multi-modal dataset.

    ``snr`` (signal variance over noise variance) is set per modality; giving the
    modalities distinct values creates a performance gap between them.
    ``class_sep`` scales the one-hot class corners in latent space and is the
    single separability knob.
    """

    n_samples: int
    num_classes: int
    latent_dim: int
    feature_dims: dict[str, int] = field(default_factory=lambda: {m: 20 for m in MODALITIES})
    snr: dict[str, float] = field(default_factory=lambda: {"a": 4.0, "t": 1.0, "v": 0.25})
    class_sep: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.n_samples < 1:
            raise ValidationError("n_samples must be >= 1")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be >= 2")
        if self.latent_dim < 1:
            raise ValidationError("latent_dim must be >= 1")
        if self.latent_dim < self.num_classes:
            raise ValidationError("latent_dim must be >= num_classes (one corner per class)")
        for m in MODALITIES:
            if m not in self.feature_dims or self.feature_dims[m] < 1:
                raise ValidationError(f"feature_dims[{m!r}] must be a positive integer")
            if m not in self.snr or not self.snr[m] > 0:
                raise ValidationError(f"snr[{m!r}] must be positive")


def max_feasible_mr(num_modalities: int) -> float:
    """Largest missing rate that can keep one observed modality per sample."""
    return (num_modalities - 1) / num_modalities


def make_missing_mask(n_samples: int, num_modalities: int, mr: float, seed: int) -> MissingMask:
    """Sample a missing mask with an exact global count of missing cells.

    Exactly ``round(mr * num_modalities * n_samples)`` cells are marked missing,
    drawn uniformly without replacement over the (sample, modality) grid. Rows
    left with no observed modality are repaired by swapping one of their cells
    with a cell from a donor row that can spare one, which preserves the global
    count. Deterministic for a given seed.
    """
    if n_samples < 1:
        raise ValidationError("n_samples must be >= 1")
    if num_modalities < 1:
        raise ValidationError("num_modalities must be >= 1")
    if not 0.0 <= mr <= max_feasible_mr(num_modalities):
        raise InfeasibleMissingRateError(
            f"infeasible missing rate {mr}: must lie in [0, "
            f"{max_feasible_mr(num_modalities):.4f}] for {num_modalities} modalities"
        )
    rng = np.random.default_rng(seed)
    n, m = n_samples, num_modalities
    k = round(mr * m * n)
    mask = np.ones((n, m), dtype=np.int8)
    if k:
        drop = rng.choice(n * m, size=k, replace=False)
        mask.flat[drop] = 0

    # Repair pass: re-roll all-missing rows without changing the global count.
    bad = np.flatnonzero(mask.sum(axis=1) == 0)
    for i in bad:
        j = rng.integers(m)
        donors = np.flatnonzero(mask.sum(axis=1) == m)
        if donors.size == 0:
            # Near the feasibility boundary no fully observed row may remain;
            # any row that keeps >= 1 observed cell after donating works.
            donors = np.flatnonzero(mask.sum(axis=1) >= 2)
        r = rng.choice(donors)
        jr = rng.choice(np.flatnonzero(mask[r] == 1))
        mask[i, j] = 1
        mask[r, jr] = 0
    return MissingMask(observed=mask, mr=mr)


def zero_impute(batch: ModalityBatch) -> ModalityBatch:
    """Return the batch with ``X_hat`` set: observed rows copied, missing rows zeroed."""
    x_hat = np.where(batch.observed[:, None] == 1, batch.X, 0.0)
    return replace(batch, X_hat=x_hat)


def apply_mask(batches: list[ModalityBatch], mask: MissingMask) -> list[ModalityBatch]:
    """Attach one mask column per modality and zero-impute."""
    if mask.num_modalities != len(batches):
        raise ValidationError(
            f"mask has {mask.num_modalities} modalities, dataset has {len(batches)}"
        )
    if mask.n_samples != batches[0].n_samples:
        raise ValidationError("mask and dataset disagree on n_samples")
    out = []
    for j, b in enumerate(batches):
        out.append(zero_impute(replace(b, observed=mask.column(j))))
    return out


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[ModalityBatch], LabelSet]:
    """Draw a synthetic dataset with a controllable per-modality signal-to-noise ratio.

    Labels are uniform over classes. Each sample's latent vector is its class
    corner (``class_sep`` times a one-hot direction) plus unit Gaussian noise.
    Per modality the latent is pushed through a fixed random linear map,
    normalized to unit signal variance, and corrupted with Gaussian noise of
    variance ``1/snr``. Noise is drawn even when snr is infinite so the random
    stream, and hence the signal, is identical across snr settings for one seed.
    """
    rng = np.random.default_rng(spec.seed)
    n, c, h = spec.n_samples, spec.num_classes, spec.latent_dim
    y = rng.integers(0, c, size=n)
    corners = np.zeros((c, h))
    corners[np.arange(c), np.arange(c)] = spec.class_sep
    latent = corners[y] + rng.standard_normal((n, h))

    batches = []
    for m in MODALITIES:
        d = spec.feature_dims[m]
        mixing = rng.standard_normal((h, d))
        signal = latent @ mixing
        signal /= signal.std()
        snr = spec.snr[m]
        noise_scale = 0.0 if np.isinf(snr) else np.sqrt(1.0 / snr)
        noise = rng.standard_normal((n, d)) * noise_scale
        x = (signal + noise).astype(np.float32)
        batches.append(
            zero_impute(ModalityBatch(modality_id=m, X=x, observed=np.ones(n, dtype=np.int8)))
        )
    labels = LabelSet(task="classification", y=y, num_classes=c)
    return batches, labels


# ---------------------------------------------------------------------------
# On-disk format
# ---------------------------------------------------------------------------
#
# A dataset directory contains:
#   manifest.json   {name, n_samples, task, num_classes?, modalities: [...],
#                    labels_file, optional mask_file}
#   <modality>.f32  row-major little-endian float32, n_samples x dim
#   labels.txt      one record per line (integer class or decimal score)
#   mask.txt        n_samples lines of one 0/1 character per modality


def write_dataset(
    dir_path,
    batches: list[ModalityBatch],
    labels: LabelSet,
    mask: MissingMask | None = None,
    name: str = "dataset",
):
    """Write a dataset directory and return the manifest dict."""
    from pathlib import Path

    path = Path(dir_path)
    path.mkdir(parents=True, exist_ok=True)
    n = labels.n_samples
    modalities = []
    for b in batches:
        if b.n_samples != n:
            raise ValidationError("batches and labels disagree on n_samples")
        fname = f"{b.modality_id}.f32"
        np.ascontiguousarray(b.X, dtype=_FLOAT_DTYPE).tofile(path / fname)
        modalities.append(
            {"name": b.modality_id, "dim": int(b.dim), "dtype": "f32le", "file": fname}
        )
    labels_file = "labels.txt"
    with open(path / labels_file, "w") as fh:
        if labels.task == "classification":
            fh.writelines(f"{int(v)}\n" for v in labels.y)
        else:
            fh.writelines(f"{float(v)!r}\n" for v in labels.y)
    manifest = {
        "name": name,
        "n_samples": int(n),
        "task": labels.task,
        "modalities": modalities,
        "labels_file": labels_file,
    }
    if labels.task == "classification":
        manifest["num_classes"] = int(labels.num_classes)
    if mask is not None:
        if mask.n_samples != n or mask.num_modalities != len(batches):
            raise ValidationError("mask shape does not match the dataset")
        mask_file = "mask.txt"
        with open(path / mask_file, "w") as fh:
            fh.writelines("".join(str(int(v)) for v in row) + "\n" for row in mask.observed)
        manifest["mask_file"] = mask_file
        manifest["mr"] = float(mask.mr)
    with open(path / MANIFEST_NAME, "w") as fh:
        json.dump(manifest, fh, indent=2)
    return manifest


def read_dataset(dir_path) -> tuple[list[ModalityBatch], LabelSet, MissingMask | None]:
    """Read a dataset directory written by :func:`write_dataset`.

    Raises :class:`CorruptDatasetError` when a binary payload disagrees with
    the manifest. Batches come back zero-imputed, with observation indicators
    from the mask file when one is present.
    """
    from pathlib import Path

    path = Path(dir_path)
    manifest_path = path / MANIFEST_NAME
    if not manifest_path.exists():
        raise CorruptDatasetError(f"corrupt dataset: no {MANIFEST_NAME} in {path}")
    with open(manifest_path) as fh:
        manifest = json.load(fh)
    n = int(manifest["n_samples"])
    task = manifest["task"]

    mask = None
    if manifest.get("mask_file"):
        lines = (path / manifest["mask_file"]).read_text().splitlines()
        if len(lines) != n:
            raise CorruptDatasetError("corrupt dataset: mask_file row count mismatch")
        rows = []
        for line in lines:
            if set(line) - {"0", "1"} or len(line) != len(manifest["modalities"]):
                raise CorruptDatasetError("corrupt dataset: malformed mask line")
            rows.append([int(ch) for ch in line])
        mask = MissingMask(observed=np.array(rows, dtype=np.int8), mr=float(manifest.get("mr", 0.0)))

    batches = []
    for j, entry in enumerate(manifest["modalities"]):
        if entry.get("dtype") != "f32le":
            raise CorruptDatasetError(f"corrupt dataset: unsupported dtype {entry.get('dtype')!r}")
        dim = int(entry["dim"])
        raw = np.fromfile(path / entry["file"], dtype=_FLOAT_DTYPE)
        if raw.size != n * dim:
            raise CorruptDatasetError(
                f"corrupt dataset: {entry['file']} holds {raw.size} values, "
                f"manifest declares {n}x{dim}"
            )
        check_finite(raw, name=entry["file"])
        observed = mask.column(j) if mask is not None else np.ones(n, dtype=np.int8)
        batches.append(
            zero_impute(
                ModalityBatch(modality_id=entry["name"], X=raw.reshape(n, dim), observed=observed)
            )
        )

    with open(path / manifest["labels_file"]) as fh:
        lines = [line.strip() for line in fh if line.strip()]
    if len(lines) != n:
        raise CorruptDatasetError("corrupt dataset: labels_file row count mismatch")
    if task == "classification":
        labels = LabelSet(
            task=task,
            y=np.array([int(v) for v in lines], dtype=np.int64),
            num_classes=int(manifest["num_classes"]),
        )
    else:
        labels = LabelSet(task=task, y=np.array([float(v) for v in lines]))
    return batches, labels, mask
