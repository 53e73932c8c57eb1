"""Full model: per-modality encoder stacks, prompt generation, propagation
blocks, and coordinator-weighted fusion, with per-component ablation toggles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping

import torch
import torch.nn as nn

from .encoders import Mlp, ModalityEncoderStack
from .fusion import Coordinator, FusionState, fuse_and_classify
from .prompting import PrototypeBank, PromptGenerator, learn_prototypes
from .propagation import KnowledgeBlock, run_pipeline
from .validation import ValidationError


@dataclass
class NetOutput:
    """Everything one stage-2 forward pass produces."""

    zs: dict[str, torch.Tensor]  # encoder latents
    z_bars: dict[str, torch.Tensor]  # latents after propagation (= zs when kp is off)
    modality_probs: dict[str, torch.Tensor]  # per-modality predictions
    fusion: FusionState


class CrossModalNet(nn.Module):
    """Composable network for incomplete multi-modal recognition.

    ``use_kp``/``use_pg``/``use_cr`` correspond to the ablation toggles of the
    harness: with everything off, the forward pass reduces exactly to encoders
    followed by a concatenation classifier.
    """

    def __init__(
        self,
        in_dims: Mapping[str, int],
        out_dim: int,
        task: str = "classification",
        latent_dim: int = 128,
        prompt_dim: int = 32,
        num_prototypes: int = 16,
        batch_n: int = 64,
        num_blocks: int = 3,
        msa_layers: int = 2,
        heads: int = 4,
        dropout_pg: float = 0.1,
        momentum: float = 0.5,
        mask_neg: float = -1e9,
        use_kp: bool = True,
        use_pg: bool = True,
        use_cr: bool = True,
        separate_error_head: bool = False,
    ):
        super().__init__()
        if task not in ("classification", "regression"):
            raise ValidationError(f"unknown task {task!r}")
        self.modalities = tuple(in_dims)
        self.task = task
        self.out_dim = out_dim
        self.batch_n = batch_n
        self.momentum = momentum
        self.mask_neg = mask_neg
        self.use_kp = use_kp
        self.use_pg = use_pg
        self.use_cr = use_cr
        self.encoders = nn.ModuleDict(
            {u: ModalityEncoderStack(in_dims[u], latent_dim, out_dim) for u in self.modalities}
        )
        self.banks = nn.ModuleDict(
            {u: PrototypeBank(batch_n, num_prototypes, dropout_pg) for u in self.modalities}
        )
        self.generators = nn.ModuleDict(
            {
                u: nn.ModuleList(PromptGenerator(latent_dim, prompt_dim) for _ in range(num_blocks))
                for u in self.modalities
            }
        )
        self.blocks = nn.ModuleDict(
            {
                u: nn.ModuleList(
                    KnowledgeBlock(latent_dim, prompt_dim, msa_layers, heads)
                    for _ in range(num_blocks)
                )
                for u in self.modalities
            }
        )
        self.coordinator = Coordinator(latent_dim, len(self.modalities))
        self.classifier = Mlp(len(self.modalities) * latent_dim, latent_dim, out_dim)
        self.error_heads = None
        if separate_error_head:
            self.error_heads = nn.ModuleDict(
                {u: nn.Linear(latent_dim, out_dim) for u in self.modalities}
            )

    def modality_proj(self, u: str):
        """Projection used for per-modality predictions and logit errors."""
        if self.error_heads is not None:
            return self.error_heads[u]
        return self.encoders[u].predict

    def _modality_probs(self, feats: Mapping[str, torch.Tensor]) -> dict[str, torch.Tensor]:
        out = {}
        for u in self.modalities:
            scores = self.modality_proj(u)(feats[u])
            out[u] = torch.softmax(scores, dim=1) if self.task == "classification" else scores.squeeze(-1)
        return out

    def encode_all(
        self, x_hats: Mapping[str, torch.Tensor]
    ) -> dict[str, torch.Tensor]:
        return {u: self.encoders[u].encode(x_hats[u]) for u in self.modalities}

    def forward_stage1(self, x_hats: Mapping[str, torch.Tensor]):
        """Encoder latents and raw per-modality scores, no cross-modal parts."""
        zs = self.encode_all(x_hats)
        scores = {u: self.encoders[u].predict(zs[u]) for u in self.modalities}
        return zs, scores

    def forward(
        self,
        x_hats: Mapping[str, torch.Tensor],
        observed: Mapping[str, torch.Tensor],
        trace: list | None = None,
    ) -> NetOutput:
        zs = self.encode_all(x_hats)
        if self.use_kp:
            if self.use_pg:
                for u in self.modalities:
                    self.banks[u].reset()
                    learn_prototypes(zs[u], self.banks[u])
            z_bars = run_pipeline(
                zs,
                observed,
                self.banks,
                self.blocks,
                self.generators,
                momentum=self.momentum,
                use_kp=True,
                use_pg=self.use_pg,
                mask_neg=self.mask_neg,
                trace=trace,
            )
        else:
            z_bars = zs
        feats = [z_bars[u] for u in self.modalities]
        if self.use_cr:
            omega, omega_bar = self.coordinator(feats)
        else:
            omega, omega_bar = None, None
        y_prime, fused = fuse_and_classify(feats, omega_bar, self.classifier, self.task)
        fusion = FusionState(omega=omega, omega_bar=omega_bar, fused=fused, y_prime=y_prime)
        return NetOutput(zs=zs, z_bars=z_bars, modality_probs=self._modality_probs(z_bars), fusion=fusion)


class ConcatBaseline(nn.Module):
    """Encoders plus a plain concatenation classifier, sharing a net's weights.

    This is the architecture the full model must collapse to when every
    component toggle is off.
    """

    def __init__(self, net: CrossModalNet):
        super().__init__()
        self.modalities = net.modalities
        self.encoders = net.encoders
        self.classifier = net.classifier
        self.task = net.task

    def forward(self, x_hats: Mapping[str, torch.Tensor]) -> torch.Tensor:
        zs = {u: self.encoders[u].encode(x_hats[u]) for u in self.modalities}
        scores = self.classifier(torch.cat([zs[u] for u in self.modalities], dim=1))
        if self.task == "classification":
            return torch.softmax(scores, dim=1)
        return scores.squeeze(-1)
