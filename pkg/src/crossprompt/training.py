"""Two-stage training: per-modality pretraining, then co-training with prompt
propagation, coordinator fusion, and instance-level gradient modulation."""

from __future__ import annotations

import json
import logging
import random
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch

from .data import LabelSet, MissingMask, ModalityBatch
from .encoders import stage1_loss
from .fusion import task_loss
from .network import CrossModalNet
from .prompting import apply_gradient_modulation, logit_error, modulation_weights
from .validation import ValidationError

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1

# JSON config keys that differ from the dataclass field names.
_CONFIG_ALIASES = {"lambda": "momentum", "L": "num_blocks"}
_FIELD_TO_ALIAS = {v: k for k, v in _CONFIG_ALIASES.items()}


@dataclass
class TrainConfig:
    """Every knob of a training run; serialized verbatim into run outputs.

    JSON uses the keys ``lambda`` and ``L`` for the ``momentum`` and
    ``num_blocks`` fields.
    """

    # schedule and optimizer
    epochs_stage1: int = 40
    epochs_stage2: int = 25
    batch_n: int = 64
    eta: float = 1e-3  # stage-1 learning rate, and the base rate of the modulation rule
    lr_stage2: float = 5e-4
    optimizer: str = "adam"  # adaptive-moment ("adam") or "sgd"
    seed: int = 0
    freeze_encoders: bool = False
    aux_task_weight: float = 0.3
    # ablation toggles
    kp: bool = True
    pg: bool = True
    cr: bool = True
    gm: bool = True
    # architecture
    d: int = 128
    p: int = 32
    c: int = 16
    num_blocks: int = 3
    m_msa: int = 2
    heads: int = 4
    dropout_pg: float = 0.1
    # prompting and modulation
    momentum: float = 0.5
    mask_neg: float = -1e9
    eps: float = 1e-8
    w_min: float = 0.0
    w_max: float = 1.0
    separate_error_head: bool = False
    # losses and metrics
    loss_reduction: str = "mean"
    binarize_rule: str = "neg_vs_nonneg"
    # run-level
    mr: float = 0.3
    test_fraction: float = 0.3
    dtype: str = "float32"

    def __post_init__(self):
        self.validate()

    def validate(self):
        if self.batch_n < 2:
            raise ValidationError("batch_n must be >= 2 (leave-one-out sums need 2 samples)")
        if self.epochs_stage1 < 0 or self.epochs_stage2 < 0:
            raise ValidationError("epoch counts must be >= 0")
        if not 0.0 <= self.momentum <= 1.0:
            raise ValidationError("lambda (momentum) must lie in [0, 1]")
        if self.optimizer not in ("adam", "sgd"):
            raise ValidationError(f"unknown optimizer {self.optimizer!r}")
        if self.loss_reduction not in ("mean", "sum"):
            raise ValidationError(f"unknown loss_reduction {self.loss_reduction!r}")
        if self.dtype not in ("float32", "float64"):
            raise ValidationError(f"unsupported dtype {self.dtype!r}")
        if self.w_min > self.w_max:
            raise ValidationError("w_min must be <= w_max")

    def to_dict(self) -> dict:
        raw = asdict(self)
        return {_FIELD_TO_ALIAS.get(k, k): v for k, v in raw.items()}

    @classmethod
    def from_dict(cls, data: Mapping) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        kwargs = {}
        for key, value in data.items():
            name = _CONFIG_ALIASES.get(key, key)
            if name not in known:
                raise ValidationError(f"unknown config key {key!r}")
            kwargs[name] = value
        return cls(**kwargs)

    def replace(self, **updates) -> "TrainConfig":
        data = self.to_dict()
        for key, value in updates.items():
            data[_FIELD_TO_ALIAS.get(key, key)] = value
        return TrainConfig.from_dict(data)

    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32


def set_determinism(seed: int):
    """Route all library randomness through one seed."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


@dataclass
class PreparedData:
    """A dataset split as torch tensors, ready for batching."""

    x_hats: dict[str, torch.Tensor]
    observed: dict[str, torch.Tensor]
    y: torch.Tensor
    task: str
    num_classes: int | None

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def in_dims(self) -> dict[str, int]:
        return {u: x.shape[1] for u, x in self.x_hats.items()}

    @property
    def out_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1


def prepare_split(
    batches: Iterable[ModalityBatch],
    labels: LabelSet,
    indices: np.ndarray | None = None,
    dtype: torch.dtype = torch.float32,
) -> PreparedData:
    """Convert zero-imputed modality batches into tensors, optionally row-subset."""
    x_hats, observed = {}, {}
    for b in batches:
        if b.X_hat is None:
            raise ValidationError(f"modality {b.modality_id!r} is not zero-imputed")
        x = torch.as_tensor(b.X_hat, dtype=dtype)
        o = torch.as_tensor(np.asarray(b.observed), dtype=dtype)
        if indices is not None:
            x, o = x[indices], o[indices]
        x_hats[b.modality_id] = x
        observed[b.modality_id] = o
    if labels.task == "classification":
        y = torch.as_tensor(labels.y, dtype=torch.long)
    else:
        y = torch.as_tensor(labels.y, dtype=dtype)
    if indices is not None:
        y = y[indices]
    return PreparedData(
        x_hats=x_hats, observed=observed, y=y, task=labels.task, num_classes=labels.num_classes
    )


def split_indices(n: int, test_fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Deterministic train/test row split."""
    order = np.random.default_rng(seed).permutation(n)
    n_test = int(round(n * test_fraction))
    return np.sort(order[n_test:]), np.sort(order[:n_test])


def _slice_batch(data: PreparedData, rows: list[int], batch_n: int):
    """Take dataset rows and pad to the fixed batch size with missing rows.

    Padded rows carry zero features, a zero observation indicator, and a filler
    label; ``valid`` marks the real rows.
    """
    k = len(rows)
    idx = torch.as_tensor(rows, dtype=torch.long)
    valid = torch.zeros(batch_n, dtype=torch.bool)
    valid[:k] = True
    x_hats, observed = {}, {}
    for u, x in data.x_hats.items():
        xb = x.new_zeros((batch_n, x.shape[1]))
        xb[:k] = x[idx]
        ob = data.observed[u].new_zeros(batch_n)
        ob[:k] = data.observed[u][idx]
        x_hats[u] = xb
        observed[u] = ob
    yb = data.y.new_zeros(batch_n)
    yb[:k] = data.y[idx]
    return x_hats, observed, yb, valid


def _epoch_batches(n: int, batch_n: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen).tolist() if gen is not None else list(range(n))
    for start in range(0, n, batch_n):
        yield order[start : start + batch_n]


def _make_optimizer(params, name: str, lr: float):
    if name == "sgd":
        return torch.optim.SGD(params, lr=lr)
    return torch.optim.Adam(params, lr=lr)


def build_net(data: PreparedData, cfg: TrainConfig) -> CrossModalNet:
    net = CrossModalNet(
        in_dims=data.in_dims,
        out_dim=data.out_dim,
        task=data.task,
        latent_dim=cfg.d,
        prompt_dim=cfg.p,
        num_prototypes=cfg.c,
        batch_n=cfg.batch_n,
        num_blocks=cfg.num_blocks,
        msa_layers=cfg.m_msa,
        heads=cfg.heads,
        dropout_pg=cfg.dropout_pg,
        momentum=cfg.momentum,
        mask_neg=cfg.mask_neg,
        use_kp=cfg.kp,
        use_pg=cfg.pg,
        use_cr=cfg.cr,
        separate_error_head=cfg.separate_error_head,
    )
    return net.to(cfg.torch_dtype())


def _predictions(probs: torch.Tensor, task: str) -> torch.Tensor:
    if task == "classification":
        return probs.argmax(dim=1)
    return (probs >= 0).long()


def _targets(y: torch.Tensor, task: str) -> torch.Tensor:
    return y if task == "classification" else (y >= 0).long()


class _LogWriter:
    def __init__(self, path, append: bool = False):
        self.path = Path(path) if path else None
        if self.path:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            if not append:
                self.path.write_text("")

    def write(self, record: dict):
        if self.path:
            with open(self.path, "a") as fh:
                fh.write(json.dumps(record) + "\n")


def _check_finite(loss: torch.Tensor, stage: int, epoch: int):
    if not torch.isfinite(loss):
        raise RuntimeError(
            f"training diverged: non-finite loss {loss.item()} at stage {stage}, epoch {epoch}"
        )


def train_stage1(
    data: PreparedData,
    cfg: TrainConfig,
    net: CrossModalNet | None = None,
    log_path=None,
) -> tuple[CrossModalNet, list[dict]]:
    """Train the per-modality encoder stacks on zero-imputed data."""
    if net is None:
        net = build_net(data, cfg)
    params = [p for u in net.modalities for p in net.encoders[u].parameters()]
    opt = _make_optimizer(params, cfg.optimizer, cfg.eta)
    gen = torch.Generator().manual_seed(cfg.seed)
    log = _LogWriter(log_path)
    history: list[dict] = []
    for epoch in range(cfg.epochs_stage1):
        t0 = time.perf_counter()
        net.train()
        total_loss, batches = 0.0, 0
        hits = {u: 0 for u in net.modalities}
        seen = 0
        for rows in _epoch_batches(data.n, cfg.batch_n, gen):
            xb, ob, yb, valid = _slice_batch(data, rows, cfg.batch_n)
            zs, scores = net.forward_stage1(xb)
            loss_masks = {u: ob[u] * valid.to(ob[u].dtype) for u in net.modalities}
            loss = stage1_loss(
                zs, xb, loss_masks, scores, yb,
                stacks=net.encoders, task=data.task, loss_reduction=cfg.loss_reduction,
            )
            _check_finite(loss, 1, epoch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            total_loss += float(loss.detach())
            batches += 1
            with torch.no_grad():
                tgt = _targets(yb[valid], data.task)
                for u in net.modalities:
                    probs = torch.softmax(scores[u], 1) if data.task == "classification" else scores[u].squeeze(-1)
                    hits[u] += int((_predictions(probs[valid], data.task) == tgt).sum())
                seen += int(valid.sum())
        record = {
            "epoch": epoch,
            "stage": 1,
            "loss": total_loss / max(batches, 1),
            "per_modality_acc": {u: hits[u] / max(seen, 1) for u in net.modalities},
            "fused_acc": None,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(record)
        log.write(record)
    return net, history


def train_stage2(
    net: CrossModalNet,
    data: PreparedData,
    cfg: TrainConfig,
    log_path=None,
) -> list[dict]:
    """Co-train the full pipeline, modulating the compression-weight gradients."""
    if cfg.pg and not cfg.kp:
        logger.warning("pg is enabled but kp is off: generated prompts route nowhere")
    if cfg.gm and not (cfg.pg and cfg.kp):
        logger.warning("gm is enabled but the prototype path is off: no gradients to modulate")
    if cfg.freeze_encoders:
        for u in net.modalities:
            net.encoders[u].encoder.requires_grad_(False)
    params = [p for p in net.parameters() if p.requires_grad]
    opt = _make_optimizer(params, cfg.optimizer, cfg.lr_stage2)
    gen = torch.Generator().manual_seed(cfg.seed + 0x5F2)
    log = _LogWriter(log_path, append=True)
    modulate = cfg.gm and cfg.pg and cfg.kp
    history: list[dict] = []
    for epoch in range(cfg.epochs_stage2):
        t0 = time.perf_counter()
        net.train()
        total_loss, batches = 0.0, 0
        hits = {u: 0 for u in net.modalities}
        fused_hits, seen = 0, 0
        weight_sums = torch.zeros(len(net.modalities))
        for rows in _epoch_batches(data.n, cfg.batch_n, gen):
            xb, ob, yb, valid = _slice_batch(data, rows, cfg.batch_n)
            out = net(xb, ob)
            y_valid = yb[valid]
            loss = task_loss(
                y_valid, out.fusion.y_prime[valid], data.task, reduction=cfg.loss_reduction
            )
            if cfg.aux_task_weight:
                for u in net.modalities:
                    loss = loss + cfg.aux_task_weight * task_loss(
                        y_valid, out.modality_probs[u][valid], data.task,
                        reduction=cfg.loss_reduction,
                    )
            _check_finite(loss, 2, epoch)
            opt.zero_grad()
            loss.backward()
            if modulate and int(valid.sum()) >= 2:
                with torch.no_grad():
                    errors = {
                        u: logit_error(
                            out.z_bars[u][valid].detach(), y_valid, net.modality_proj(u), data.task
                        )
                        for u in net.modalities
                    }
                    weights = modulation_weights(
                        errors, eps=cfg.eps, w_min=cfg.w_min, w_max=cfg.w_max
                    )
                    for u in net.modalities:
                        m_weight = net.banks[u].compressor.weight
                        if m_weight.grad is None:
                            continue
                        full = torch.ones(
                            cfg.batch_n, dtype=m_weight.dtype, device=m_weight.device
                        )
                        full[valid] = weights[u].to(m_weight.dtype)
                        m_weight.grad = apply_gradient_modulation(m_weight.grad, full)
            opt.step()
            total_loss += float(loss.detach())
            batches += 1
            with torch.no_grad():
                tgt = _targets(y_valid, data.task)
                fused_hits += int((_predictions(out.fusion.y_prime[valid], data.task) == tgt).sum())
                for u in net.modalities:
                    hits[u] += int(
                        (_predictions(out.modality_probs[u][valid], data.task) == tgt).sum()
                    )
                seen += int(valid.sum())
                if out.fusion.omega_bar is not None:
                    weight_sums += out.fusion.omega_bar[valid].sum(dim=0).to(weight_sums.dtype)
        record = {
            "epoch": epoch,
            "stage": 2,
            "loss": total_loss / max(batches, 1),
            "per_modality_acc": {u: hits[u] / max(seen, 1) for u in net.modalities},
            "fused_acc": fused_hits / max(seen, 1),
            "coordinator_weight_means": (weight_sums / max(seen, 1)).tolist() if cfg.cr else None,
            "wall_time": time.perf_counter() - t0,
        }
        history.append(record)
        log.write(record)
    return history


@torch.no_grad()
def predict_all(net: CrossModalNet, data: PreparedData, stage2: bool = True) -> dict:
    """Batched, padded, deterministic inference over a prepared split.

    Returns fused predictions, per-modality predictions, coordinator weights,
    and the latent matrices (for embedding export). With ``stage2=False`` only
    the encoder-level quantities are produced.
    """
    net.eval()
    n = data.n
    mods = net.modalities
    res: dict = {
        "modality_probs": {u: [] for u in mods},
        "zs": {u: [] for u in mods},
    }
    if stage2:
        res.update({"y_prime": [], "omega_bar": [] if net.use_cr else None,
                    "z_bars": {u: [] for u in mods}, "fused": []})
    for rows in _epoch_batches(n, net.batch_n, gen=None):
        xb, ob, yb, valid = _slice_batch(data, rows, net.batch_n)
        if stage2:
            out = net(xb, ob)
            res["y_prime"].append(out.fusion.y_prime[valid])
            if net.use_cr:
                res["omega_bar"].append(out.fusion.omega_bar[valid])
            res["fused"].append(out.fusion.fused[valid])
            for u in mods:
                res["modality_probs"][u].append(out.modality_probs[u][valid])
                res["zs"][u].append(out.zs[u][valid])
                res["z_bars"][u].append(out.z_bars[u][valid])
        else:
            zs, scores = net.forward_stage1(xb)
            for u in mods:
                probs = (
                    torch.softmax(scores[u], dim=1)
                    if data.task == "classification"
                    else scores[u].squeeze(-1)
                )
                res["modality_probs"][u].append(probs[valid])
                res["zs"][u].append(zs[u][valid])
    def _cat(chunks):
        return torch.cat(chunks, dim=0)

    out = {"modality_probs": {u: _cat(v) for u, v in res["modality_probs"].items()},
           "zs": {u: _cat(v) for u, v in res["zs"].items()}}
    if stage2:
        out["y_prime"] = _cat(res["y_prime"])
        out["omega_bar"] = _cat(res["omega_bar"]) if net.use_cr else None
        out["fused"] = _cat(res["fused"])
        out["z_bars"] = {u: _cat(v) for u, v in res["z_bars"].items()}
    return out


def save_checkpoint(path, net: CrossModalNet, cfg: TrainConfig, stage: int):
    """Single versioned archive: parameters keyed by module path, plus the config."""
    payload = {
        "format_version": CHECKPOINT_VERSION,
        "config": cfg.to_dict(),
        "in_dims": {u: net.encoders[u].in_dim for u in net.modalities},
        "out_dim": net.out_dim,
        "task": net.task,
        "modality_order": list(net.modalities),
        "stage": stage,
        "seed": cfg.seed,
        "state": net.state_dict(),
    }
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save(payload, path)
    return path


def load_checkpoint(path) -> tuple[CrossModalNet, TrainConfig, dict]:
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_VERSION:
        raise ValidationError(f"unsupported checkpoint format version {version!r}")
    cfg = TrainConfig.from_dict(payload["config"])
    net = CrossModalNet(
        in_dims=payload["in_dims"],
        out_dim=payload["out_dim"],
        task=payload["task"],
        latent_dim=cfg.d,
        prompt_dim=cfg.p,
        num_prototypes=cfg.c,
        batch_n=cfg.batch_n,
        num_blocks=cfg.num_blocks,
        msa_layers=cfg.m_msa,
        heads=cfg.heads,
        dropout_pg=cfg.dropout_pg,
        momentum=cfg.momentum,
        mask_neg=cfg.mask_neg,
        use_kp=cfg.kp,
        use_pg=cfg.pg,
        use_cr=cfg.cr,
        separate_error_head=cfg.separate_error_head,
    ).to(cfg.torch_dtype())
    if tuple(payload["modality_order"]) != net.modalities:
        raise ValidationError("checkpoint modality order does not match the model")
    net.load_state_dict(payload["state"])
    return net, cfg, payload


def check_compatible(net: CrossModalNet, data: PreparedData):
    """Verify a loaded model matches a dataset's dims and task."""
    if net.task != data.task:
        raise ValidationError(f"model task {net.task!r} != dataset task {data.task!r}")
    if {u: net.encoders[u].in_dim for u in net.modalities} != data.in_dims:
        raise ValidationError("model input dims do not match the dataset")
    if net.out_dim != data.out_dim:
        raise ValidationError("model output width does not match the dataset")
