"""Prompt generation: prototype compression, masked prototype attention, prompt
synthesis, momentum blending, and instance-level gradient modulation."""

from __future__ import annotations

import logging
from typing import Callable, Mapping

import torch
import torch.nn as nn
import torch.nn.functional as F

from .validation import ValidationError

logger = logging.getLogger(__name__)


class BatchCompressor(nn.Module):
    """Compress a batch of latents along the instance axis into prototypes.

    Works on the transposed feature matrix: an instance-axis linear map
    (``weight`` is [batch_n, c], applied as ``z.T @ weight + bias``), GeLU,
    a c-by-c linear, and dropout. The instance-axis weight is the tensor whose
    gradient rows are rescaled by the per-sample modulation weights.
    """

    def __init__(self, batch_n: int, num_prototypes: int, dropout: float = 0.1):
        super().__init__()
        self.batch_n = batch_n
        self.num_prototypes = num_prototypes
        self.weight = nn.Parameter(torch.empty(batch_n, num_prototypes))
        self.bias = nn.Parameter(torch.zeros(num_prototypes))
        self.act = nn.GELU()
        self.mix = nn.Linear(num_prototypes, num_prototypes)
        self.drop = nn.Dropout(dropout)
        nn.init.xavier_uniform_(self.weight)

    def forward(self, z: torch.Tensor) -> torch.Tensor:
        if z.shape[0] != self.batch_n:
            raise ValidationError(
                f"compressor expects batches of {self.batch_n} instances, got {z.shape[0]} "
                "(enable padding for partial batches)"
            )
        h = z.transpose(0, 1) @ self.weight + self.bias  # [d, c]
        h = self.mix(self.act(h))
        h = self.drop(h)
        return h.transpose(0, 1)  # [c, d]


class PrototypeBank(nn.Module):
    """Owns one modality's batch compressor and the per-batch prototype freeze.

    Prototypes are computed once at the start of a batch's forward pass and
    reused by every propagation block of that batch; ``frozen`` guards against
    recomputation mid-batch.
    """

    def __init__(self, batch_n: int, num_prototypes: int, dropout: float = 0.1):
        super().__init__()
        self.compressor = BatchCompressor(batch_n, num_prototypes, dropout)
        self._cached: torch.Tensor | None = None
        self.frozen: bool = False

    @property
    def num_prototypes(self) -> int:
        return self.compressor.num_prototypes

    @property
    def batch_n(self) -> int:
        return self.compressor.batch_n

    def learn(self, z: torch.Tensor) -> torch.Tensor:
        if self.frozen:
            raise ValidationError("prototypes are frozen for this batch; call reset() first")
        self._cached = self.compressor(z)
        self.frozen = True
        return self._cached

    @property
    def prototypes(self) -> torch.Tensor:
        if self._cached is None:
            raise ValidationError("prototypes not learned for this batch")
        return self._cached

    def reset(self):
        self._cached = None
        self.frozen = False


def learn_prototypes(z: torch.Tensor, bank: PrototypeBank) -> torch.Tensor:
    """Compress the batch into prototypes and freeze them for the batch."""
    return bank.learn(z)


def prototype_attention(
    z: torch.Tensor,
    prototypes: torch.Tensor,
    observed: torch.Tensor,
    mask_neg: float = -1e9,
    eps: float = 1e-12,
) -> torch.Tensor:
    """Row-softmax of cosine similarity between instances and prototypes.

    Rows of missing instances have their similarity logits set to the constant
    ``mask_neg``, so their attention comes out uniform and carries no gradient
    back into the similarities. Zero-norm rows get similarity 0 via the eps
    guard on the norms.
    """
    zn = z / z.norm(dim=1, keepdim=True).clamp_min(eps)
    an = prototypes / prototypes.norm(dim=1, keepdim=True).clamp_min(eps)
    sim = zn @ an.transpose(0, 1)  # [n, c]
    obs = observed.bool().unsqueeze(1)
    masked = torch.where(obs, sim, torch.full_like(sim, mask_neg))
    return torch.softmax(masked, dim=1)


class PromptGenerator(nn.Module):
    """Turn prototype attention and the current feature into a width-p prompt."""

    def __init__(self, latent_dim: int, prompt_dim: int):
        super().__init__()
        from .encoders import Mlp

        self.ffn_proto = Mlp(latent_dim, latent_dim, latent_dim)
        self.ffn_feat = Mlp(latent_dim, latent_dim, latent_dim)
        self.proj = nn.Linear(latent_dim, prompt_dim)

    def forward(self, attn: torch.Tensor, prototypes: torch.Tensor, z: torch.Tensor):
        return generate_prompt(attn, prototypes, z, self.ffn_proto, self.ffn_feat, self.proj)

    def direct(self, z: torch.Tensor) -> torch.Tensor:
        """Prompt from the feature branch alone (prompt refinement ablated)."""
        return self.proj(self.ffn_feat(z))


def generate_prompt(
    attn: torch.Tensor,
    prototypes: torch.Tensor,
    z: torch.Tensor,
    ffn_proto: Callable[[torch.Tensor], torch.Tensor],
    ffn_feat: Callable[[torch.Tensor], torch.Tensor],
    proj: Callable[[torch.Tensor], torch.Tensor],
) -> torch.Tensor:
    """Blend attended prototypes with the propagated feature and project to prompt width."""
    if attn.shape[1] != prototypes.shape[0]:
        raise ValidationError(
            f"attention has {attn.shape[1]} columns but there are {prototypes.shape[0]} prototypes"
        )
    return proj(ffn_proto(attn @ prototypes) + ffn_feat(z))


def momentum_update(p_prev: torch.Tensor, p_tilde: torch.Tensor, momentum: float) -> torch.Tensor:
    """Convex blend of the returned previous-block prompt and the fresh prompt."""
    if not 0.0 <= momentum <= 1.0:
        raise ValidationError(f"momentum must lie in [0, 1], got {momentum}")
    if p_prev.shape != p_tilde.shape:
        raise ValidationError(f"prompt shapes differ: {tuple(p_prev.shape)} vs {tuple(p_tilde.shape)}")
    return momentum * p_prev + (1.0 - momentum) * p_tilde


def logit_error(
    z: torch.Tensor,
    labels: torch.Tensor,
    proj: Callable[[torch.Tensor], torch.Tensor],
    task: str = "classification",
) -> torch.Tensor:
    """Per-sample absolute error of a modality's prediction at the true target.

    Classification: 1 minus the softmaxed score at the true class.
    Regression: absolute difference between target and prediction.
    """
    scores = proj(z)
    if task == "classification":
        probs = torch.softmax(scores, dim=1)
        at_truth = probs.gather(1, labels.long().view(-1, 1)).squeeze(1)
        return (1.0 - at_truth).abs()
    return (labels - scores.squeeze(-1)).abs()


def modulation_weights(
    errors: Mapping[str, torch.Tensor],
    eps: float = 1e-8,
    w_min: float = 0.0,
    w_max: float = 1.0,
    clamp: bool = True,
) -> dict[str, torch.Tensor]:
    """Per-sample gradient weights from cross-modal relative errors.

    For each modality the weight of sample i averages, over the other
    modalities, the leave-i-out share of the summed error difference. Ratios
    with near-zero denominators fall back to the neutral value 1, and the
    result is clamped to [w_min, w_max] unless ``clamp`` is off (raw values can
    be negative, which would flip gradient signs).
    """
    names = list(errors)
    n = None
    for u in names:
        e = errors[u]
        if e.dim() != 1:
            raise ValidationError("error vectors must be 1-D")
        if n is None:
            n = e.shape[0]
        elif e.shape[0] != n:
            raise ValidationError("error vectors must share a length")
    if n is None or n < 2:
        raise ValidationError("modulation weights need at least 2 samples (leave-one-out)")

    out: dict[str, torch.Tensor] = {}
    for u in names:
        acc = errors[u].new_zeros(n)
        for v in names:
            if v == u:
                continue
            diff = errors[u] - errors[v]
            total = diff.sum()
            degenerate = total.abs() < eps
            safe_total = torch.where(degenerate, torch.ones_like(total), total)
            ratio = (total - diff) / safe_total
            acc = acc + torch.where(degenerate, torch.ones_like(ratio), ratio)
        w = acc / 2.0
        if clamp:
            w = w.clamp(min=w_min, max=w_max)
        out[u] = w
    return out


def apply_gradient_modulation(grad: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Scale row i of a compression-weight gradient by the sample weight w_i."""
    if grad.shape[0] != weights.shape[0]:
        raise ValidationError(
            f"gradient has {grad.shape[0]} rows but {weights.shape[0]} weights were given"
        )
    return grad * weights.view(-1, *([1] * (grad.dim() - 1)))
