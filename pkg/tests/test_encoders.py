import numpy as np
import pytest
import torch
import torch.nn as nn

from crossprompt.encoders import ModalityEncoderStack, encode, masked_mse, stage1_loss
from crossprompt.validation import ValidationError
from helpers import gradient_relative_error


def make_stack(in_dim=4, latent=3, out=2, dtype=torch.float64):
    torch.manual_seed(0)
    return ModalityEncoderStack(in_dim, latent, out).to(dtype)


class TestEncode:
    def test_missing_rows_share_one_latent(self):
        stack = make_stack()
        x_hat = torch.randn(6, 4, dtype=torch.float64)
        x_hat[1] = 0.0
        x_hat[4] = 0.0
        z = encode(x_hat, stack)
        assert torch.equal(z[1], z[4])

    def test_identity_affine_fixture(self):
        stack = make_stack(in_dim=3, latent=3)
        stack.encoder = nn.Identity()
        x_hat = torch.randn(5, 3, dtype=torch.float64)
        assert torch.equal(stack.encode(x_hat), x_hat)

    def test_shape_and_finite(self):
        stack = make_stack()
        z = encode(torch.randn(7, 4, dtype=torch.float64), stack)
        assert z.shape == (7, 3)
        assert torch.isfinite(z).all()

    def test_non_finite_input_rejected(self):
        stack = make_stack()
        bad = torch.full((2, 4), float("nan"), dtype=torch.float64)
        with pytest.raises(ValidationError):
            encode(bad, stack)


def _loss_inputs(stacks, x_hats, observed, labels):
    zs = {u: stacks[u].encode(x_hats[u]) for u in stacks}
    scores = {u: stacks[u].predict(zs[u]) for u in stacks}
    return zs, scores


class TestStage1Loss:
    def test_perfect_reconstruction_and_prediction_is_zero(self):
        stack = make_stack(in_dim=3, latent=3)
        stack.decoder = nn.Identity()
        x = torch.randn(4, 3, dtype=torch.float64)
        labels = torch.tensor([0, 1, 0, 1])
        # scores so extreme that softmax is exactly one-hot in float64
        scores = torch.full((4, 2), -1e4, dtype=torch.float64)
        scores[torch.arange(4), labels] = 1e4
        loss = stage1_loss(
            zs={"a": x},
            x_hats={"a": x},
            observed={"a": torch.ones(4)},
            scores={"a": scores},
            labels=labels,
            stacks={"a": stack},
        )
        assert loss.item() == 0.0

    def test_fully_missing_modality_contributes_zero(self):
        stacks = {"a": make_stack(), "t": make_stack()}
        x = {u: torch.randn(4, 4, dtype=torch.float64) for u in stacks}
        labels = torch.tensor([0, 1, 1, 0])
        zs, scores = _loss_inputs(stacks, x, None, labels)
        both = stage1_loss(
            zs, x, {"a": torch.ones(4), "t": torch.zeros(4)}, scores, labels, stacks
        )
        only_a = stage1_loss(
            {"a": zs["a"]}, {"a": x["a"]}, {"a": torch.ones(4)},
            {"a": scores["a"]}, labels, {"a": stacks["a"]},
        )
        assert torch.allclose(both, only_a)

    def test_unit_error_reconstruction(self):
        # one observed sample, off by exactly 1 in each of d_in=4 coordinates
        stack = make_stack(in_dim=4, latent=3)
        x = torch.zeros(2, 4, dtype=torch.float64)
        z = torch.zeros(2, 3, dtype=torch.float64)

        class OffByOne(nn.Module):
            def forward(self, z):
                return torch.ones(z.shape[0], 4, dtype=z.dtype)

        stack.decoder = OffByOne()
        labels = torch.tensor([0, 0])
        scores = torch.full((2, 2), -1e4, dtype=torch.float64)
        scores[:, 0] = 1e4  # task term 0
        loss = stage1_loss(
            {"a": z}, {"a": x}, {"a": torch.tensor([1.0, 0.0])},
            {"a": scores}, labels, {"a": stack},
        )
        assert loss.item() == pytest.approx(1.0)

    def test_gradients_match_finite_differences(self):
        torch.manual_seed(1)
        stacks = {u: make_stack(in_dim=3, latent=3, out=2) for u in ("a", "t", "v")}
        x_hats = {u: torch.randn(4, 3, dtype=torch.float64) for u in stacks}
        observed = {
            "a": torch.tensor([1.0, 1.0, 0.0, 1.0]),
            "t": torch.tensor([1.0, 0.0, 1.0, 1.0]),
            "v": torch.tensor([0.0, 1.0, 1.0, 1.0]),
        }
        labels = torch.tensor([0, 1, 1, 0])

        def build_loss():
            zs = {u: stacks[u].encode(x_hats[u]) for u in stacks}
            scores = {u: stacks[u].predict(zs[u]) for u in stacks}
            return stage1_loss(zs, x_hats, observed, scores, labels, stacks)

        params = [p for u in stacks for p in stacks[u].parameters()]
        assert gradient_relative_error(build_loss, params) < 1e-4

    def test_missing_rows_have_zero_gradient(self):
        torch.manual_seed(2)
        stack = make_stack(in_dim=3, latent=3)
        observed = torch.tensor([1.0, 0.0, 1.0, 0.0])
        labels = torch.tensor([0, 1, 1, 0])
        base = torch.randn(4, 3, dtype=torch.float64)

        def grads_for(x_hat):
            stack.zero_grad()
            z = stack.encode(x_hat)
            scores = stack.predict(z)
            loss = stage1_loss(
                {"a": z}, {"a": x_hat}, {"a": observed}, {"a": scores}, labels, {"a": stack}
            )
            loss.backward()
            return [p.grad.clone() for p in stack.parameters()]

        x1 = base.clone()
        x1[observed == 0] = 0.0
        x2 = base.clone()
        x2[observed == 0] = 17.5  # perturb only the missing rows
        for g1, g2 in zip(grads_for(x1), grads_for(x2)):
            assert torch.equal(g1, g2)


class TestMaskedMse:
    def test_no_rows_selected(self):
        out = masked_mse(torch.ones(3, 2), torch.zeros(3, 2), torch.zeros(3))
        assert out.item() == 0.0

    def test_mean_over_selected_entries(self):
        pred = torch.tensor([[2.0, 2.0], [5.0, 5.0]])
        target = torch.zeros(2, 2)
        out = masked_mse(pred, target, torch.tensor([1.0, 0.0]))
        assert out.item() == pytest.approx(4.0)
