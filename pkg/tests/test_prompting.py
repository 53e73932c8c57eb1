from fractions import Fraction

import numpy as np
import pytest
import torch
import torch.nn as nn
from hypothesis import given, settings
from hypothesis import strategies as st

from crossprompt.prompting import (
    BatchCompressor,
    PromptGenerator,
    PrototypeBank,
    apply_gradient_modulation,
    generate_prompt,
    learn_prototypes,
    logit_error,
    modulation_weights,
    momentum_update,
    prototype_attention,
)
from crossprompt.validation import ValidationError
from helpers import compressor_oracle, cosine_attention_oracle, identity_linear, matmul_oracle


class TestLearnPrototypes:
    def test_identity_fixture_returns_input(self):
        bank = PrototypeBank(batch_n=4, num_prototypes=4, dropout=0.0).double().eval()
        with torch.no_grad():
            bank.compressor.weight.copy_(torch.eye(4))
            bank.compressor.bias.zero_()
        bank.compressor.act = nn.Identity()
        identity_linear(bank.compressor.mix)
        z = torch.randn(4, 3, dtype=torch.float64)
        a = learn_prototypes(z, bank)
        assert torch.allclose(a, z)

    def test_matches_loop_oracle(self):
        torch.manual_seed(3)
        bank = PrototypeBank(batch_n=4, num_prototypes=2, dropout=0.0).double().eval()
        z = torch.randn(4, 5, dtype=torch.float64)
        a = learn_prototypes(z, bank)
        comp = bank.compressor
        expected = compressor_oracle(
            z.numpy(),
            comp.weight.detach().numpy(),
            comp.bias.detach().numpy(),
            comp.mix.weight.detach().numpy(),
            comp.mix.bias.detach().numpy(),
        )
        assert np.allclose(a.detach().numpy(), expected, atol=1e-10)
        assert a.shape == (2, 5)

    def test_deterministic_with_dropout_off(self):
        torch.manual_seed(4)
        bank = PrototypeBank(batch_n=3, num_prototypes=2, dropout=0.0).eval()
        z = torch.randn(3, 4)
        a1 = learn_prototypes(z, bank)
        bank.reset()
        a2 = learn_prototypes(z, bank)
        assert torch.equal(a1, a2)

    def test_freeze_bookkeeping(self):
        bank = PrototypeBank(batch_n=3, num_prototypes=2)
        z = torch.randn(3, 4)
        learn_prototypes(z, bank)
        assert bank.frozen
        with pytest.raises(ValidationError):
            learn_prototypes(z, bank)
        bank.reset()
        learn_prototypes(z, bank)

    def test_batch_size_mismatch(self):
        bank = PrototypeBank(batch_n=8, num_prototypes=2)
        with pytest.raises(ValidationError, match="padding"):
            learn_prototypes(torch.randn(5, 4), bank)


class TestPrototypeAttention:
    def test_missing_rows_uniform(self):
        z = torch.randn(4, 6, dtype=torch.float64)
        a = torch.randn(3, 6, dtype=torch.float64)
        s = prototype_attention(z, a, observed=torch.tensor([1.0, 0.0, 1.0, 0.0]))
        for i in (1, 3):
            assert torch.allclose(s[i], torch.full((3,), 1 / 3, dtype=torch.float64))

    def test_colinear_row_takes_argmax(self):
        a = torch.eye(3, dtype=torch.float64)
        z = torch.tensor([[2.5, 0.0, 0.0]], dtype=torch.float64)  # colinear with prototype 0
        s = prototype_attention(z, a, observed=torch.ones(1))
        assert s[0].argmax().item() == 0

    def test_matches_loop_oracle(self):
        torch.manual_seed(5)
        z = torch.randn(3, 4, dtype=torch.float64)
        a = torch.randn(2, 4, dtype=torch.float64)
        obs = torch.tensor([1.0, 0.0, 1.0])
        s = prototype_attention(z, a, obs)
        expected = cosine_attention_oracle(z.numpy(), a.numpy(), obs.numpy())
        assert np.allclose(s.numpy(), expected, atol=1e-6)

    def test_zero_norm_row_is_uniform(self):
        z = torch.zeros(1, 4, dtype=torch.float64)
        a = torch.randn(5, 4, dtype=torch.float64)
        s = prototype_attention(z, a, observed=torch.ones(1))
        assert torch.allclose(s[0], torch.full((5,), 0.2, dtype=torch.float64))

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 10_000), n=st.integers(1, 6), c=st.integers(1, 5))
    def test_rows_sum_to_one(self, seed, n, c):
        g = torch.Generator().manual_seed(seed)
        z = torch.randn(n, 4, generator=g, dtype=torch.float64)
        a = torch.randn(c, 4, generator=g, dtype=torch.float64)
        obs = (torch.rand(n, generator=g) > 0.4).double()
        s = prototype_attention(z, a, obs)
        assert torch.allclose(s.sum(dim=1), torch.ones(n, dtype=torch.float64), atol=1e-6)
        for i in range(n):
            if obs[i] == 0:
                assert torch.allclose(s[i], torch.full((c,), 1 / c, dtype=torch.float64), atol=1e-6)


class TestGeneratePrompt:
    def test_identity_heads(self):
        ident = nn.Identity()
        s = torch.tensor([[0.3, 0.7], [0.5, 0.5]], dtype=torch.float64)
        a = torch.randn(2, 3, dtype=torch.float64)
        z = torch.randn(2, 3, dtype=torch.float64)
        out = generate_prompt(s, a, z, ident, ident, ident)
        assert torch.allclose(out, s @ a + z)

    def test_uniform_attention_gives_prototype_mean(self):
        ident = nn.Identity()
        c, d = 4, 3
        s = torch.full((5, c), 1 / c, dtype=torch.float64)
        a = torch.randn(c, d, dtype=torch.float64)
        z = torch.zeros(5, d, dtype=torch.float64)
        out = generate_prompt(s, a, z, ident, ident, ident)
        mean = a.mean(dim=0)
        for row in out:
            assert torch.allclose(row, mean)

    def test_attended_prototypes_match_matmul_oracle(self):
        torch.manual_seed(6)
        s = torch.softmax(torch.randn(4, 3, dtype=torch.float64), dim=1)
        a = torch.randn(3, 5, dtype=torch.float64)
        z = torch.zeros(4, 5, dtype=torch.float64)
        ident = nn.Identity()
        out = generate_prompt(s, a, z, ident, ident, ident)
        assert np.allclose(out.numpy(), matmul_oracle(s.numpy(), a.numpy()), atol=1e-10)

    def test_module_projects_to_prompt_width(self):
        torch.manual_seed(7)
        gen = PromptGenerator(latent_dim=6, prompt_dim=2).double()
        s = torch.softmax(torch.randn(4, 3, dtype=torch.float64), dim=1)
        a = torch.randn(3, 6, dtype=torch.float64)
        z = torch.randn(4, 6, dtype=torch.float64)
        out = gen(s, a, z)
        assert out.shape == (4, 2)
        assert torch.isfinite(out).all()


class TestMomentumUpdate:
    def test_boundaries_and_midpoint(self):
        prev = torch.tensor([[2.0]])
        fresh = torch.tensor([[4.0]])
        assert torch.equal(momentum_update(prev, fresh, 1.0), prev)
        assert torch.equal(momentum_update(prev, fresh, 0.0), fresh)
        assert torch.equal(momentum_update(prev, fresh, 0.5), torch.tensor([[3.0]]))

    def test_out_of_range_momentum(self):
        with pytest.raises(ValidationError):
            momentum_update(torch.zeros(1, 1), torch.zeros(1, 1), 1.5)

    def test_shape_mismatch(self):
        with pytest.raises(ValidationError):
            momentum_update(torch.zeros(1, 2), torch.zeros(1, 3), 0.5)

    @settings(max_examples=25, deadline=None)
    @given(
        a=st.floats(-3, 3), b=st.floats(-3, 3), lam=st.floats(0, 1), seed=st.integers(0, 999)
    )
    def test_linear_in_history(self, a, b, lam, seed):
        g = torch.Generator().manual_seed(seed)
        p1 = torch.randn(3, 2, generator=g, dtype=torch.float64)
        p2 = torch.randn(3, 2, generator=g, dtype=torch.float64)
        zero = torch.zeros(3, 2, dtype=torch.float64)
        lhs = momentum_update(a * p1 + b * p2, zero, lam)
        rhs = a * momentum_update(p1, zero, lam) + b * momentum_update(p2, zero, lam)
        assert torch.allclose(lhs, rhs, atol=1e-9)


class TestLogitError:
    def test_confident_correct_prediction(self):
        scores = torch.tensor([[1e4, -1e4]], dtype=torch.float64)
        e = logit_error(torch.zeros(1, 2), torch.tensor([0]), lambda z: scores)
        assert e.item() == 0.0

    def test_uniform_prediction_four_classes(self):
        scores = torch.zeros(1, 4, dtype=torch.float64)
        e = logit_error(torch.zeros(1, 2), torch.tensor([2]), lambda z: scores)
        assert e.item() == pytest.approx(0.75)

    def test_regression_absolute_difference(self):
        scores = torch.tensor([[-1.0]], dtype=torch.float64)
        e = logit_error(
            torch.zeros(1, 2), torch.tensor([2.0], dtype=torch.float64),
            lambda z: scores, task="regression",
        )
        assert e.item() == pytest.approx(3.0)


class TestModulationWeights:
    def test_constant_difference(self):
        n = 4
        base = torch.tensor([0.5, 0.7, 0.2, 0.9], dtype=torch.float64)
        errors = {"a": base + 0.3, "t": base, "v": base}
        w = modulation_weights(errors)
        assert torch.allclose(w["a"], torch.full((n,), (n - 1) / n, dtype=torch.float64))

    def test_equal_errors_neutral(self):
        e = torch.rand(5, dtype=torch.float64)
        w = modulation_weights({"a": e.clone(), "t": e.clone(), "v": e.clone()})
        for u in ("a", "t", "v"):
            assert torch.equal(w[u], torch.ones(5, dtype=torch.float64))

    def test_hand_derived_two_sample_case(self):
        # exact rational replication of the leave-one-out formula
        eu = [Fraction(8, 10), Fraction(2, 10)]
        ev = [Fraction(4, 10), Fraction(4, 10)]
        ew = [Fraction(6, 10), Fraction(1, 10)]
        expected = Fraction(1, 2) * sum(
            (sum(du[j] for j in range(2) if j != 0)) / sum(du)
            for du in (
                [eu[j] - ev[j] for j in range(2)],
                [eu[j] - ew[j] for j in range(2)],
            )
        )
        assert expected == Fraction(-1, 3)
        errors = {
            "a": torch.tensor([0.8, 0.2], dtype=torch.float64),
            "t": torch.tensor([0.4, 0.4], dtype=torch.float64),
            "v": torch.tensor([0.6, 0.1], dtype=torch.float64),
        }
        raw = modulation_weights(errors, clamp=False)
        assert raw["a"][0].item() == pytest.approx(-1 / 3, abs=1e-9)
        clamped = modulation_weights(errors)
        assert clamped["a"][0].item() == 0.0

    def test_too_few_samples(self):
        with pytest.raises(ValidationError):
            modulation_weights({"a": torch.tensor([1.0]), "t": torch.tensor([2.0])})

    @settings(max_examples=25, deadline=None)
    @given(seed=st.integers(0, 9999), shift=st.floats(-5, 5))
    def test_invariant_to_common_shift(self, seed, shift):
        g = torch.Generator().manual_seed(seed)
        errors = {u: torch.rand(6, generator=g, dtype=torch.float64) for u in ("a", "t", "v")}
        common = torch.rand(6, generator=g, dtype=torch.float64) * shift
        shifted = {u: e + common for u, e in errors.items()}
        w1 = modulation_weights(errors, clamp=False)
        w2 = modulation_weights(shifted, clamp=False)
        for u in errors:
            assert torch.allclose(w1[u], w2[u], atol=1e-7)


class TestApplyGradientModulation:
    def test_neutral_weights_leave_gradient_bitwise(self):
        g = torch.randn(4, 3)
        out = apply_gradient_modulation(g, torch.ones(4))
        assert torch.equal(out, g)

    def test_zero_weights_suppress(self):
        g = torch.randn(4, 3)
        assert (apply_gradient_modulation(g, torch.zeros(4)) == 0).all()

    def test_rowwise_scaling(self):
        g = torch.ones(2, 3)
        out = apply_gradient_modulation(g, torch.tensor([0.5, 1.0]))
        assert torch.allclose(out[0], torch.full((3,), 0.5))
        assert torch.allclose(out[1], torch.ones(3))

    def test_length_mismatch(self):
        with pytest.raises(ValidationError):
            apply_gradient_modulation(torch.ones(3, 2), torch.ones(4))
