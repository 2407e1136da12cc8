import numpy as np
import pytest
from numpy.testing import assert_allclose, assert_array_equal
from scipy.special import softmax as scipy_softmax
from scipy.stats import entropy

from src import tensor as T
from src.errors import ConfigError, EmptyBatchError
from src.losses import (LossConfig, flatten, lmi_loss, orth_penalty, smoothed_labels, source_loss,
                        target_loss, target_objective, unk_loss)
from src.model import TwoHeadModel
from src.tensor import Tape, Tensor, backward, finite_diff_check


def random_probs(rng, B=5, K=4, scale=2.0):
    return scipy_softmax(rng.normal(scale=scale, size=(B, K)), axis=1)


class TestLossConfig:
    def test_defaults(self):
        cfg = LossConfig(K=3)
        assert (cfg.lam, cfg.alpha, cfg.T, cfg.prior) == (0.01, 0.1, 0.1, "flatten")

    def test_invalid_values_are_rejected(self):
        with pytest.raises(ConfigError):
            LossConfig(K=3, T=1.5)
        with pytest.raises(ConfigError):
            LossConfig(K=3, prior="median")

    def test_lambda_key_round_trip(self):
        cfg = LossConfig.from_config({"lambda": 0.2}, K=4)
        assert cfg.lam == 0.2
        assert cfg.to_dict()["lambda"] == 0.2


class TestSourceLoss:
    def test_smoothed_labels(self):
        q = smoothed_labels(1, 3, 0.1).data
        assert_allclose(q, [0.1 / 3, 0.9 + 0.1 / 3, 0.1 / 3], rtol=1e-15)
        assert_allclose(q.sum(), 1.0, atol=1e-15)

    def test_smoothed_labels_rejects_bad_label(self):
        with pytest.raises(ValueError):
            smoothed_labels(3, 3, 0.1)

    def test_orth_penalty(self):
        eye = Tensor(np.eye(2))
        assert orth_penalty(eye, eye).item() == pytest.approx(np.sqrt(2.0))
        assert orth_penalty(Tensor([[1.0], [0.0]]), Tensor([[0.0], [1.0]])).item() == 0.0

    @pytest.mark.parametrize("seed", range(20))
    def test_gradient_matches_central_differences(self, seed):
        rng = np.random.default_rng(seed)
        model = TwoHeadModel(3, 3, hidden_dims=(4,), bottleneck_dim=3, seed=seed)
        x = Tensor(rng.normal(size=(6, 3)))
        y = rng.integers(0, 3, size=6)
        cfg = LossConfig(K=3, lam=0.05)
        err = finite_diff_check(lambda _: source_loss(model, x, y, cfg), model.parameters())
        assert err <= 1e-4


class TestFlatten:
    def test_reference_value(self):
        assert_allclose(flatten(Tensor([0.9, 0.1]), 0.5).data, [0.75, 0.25], atol=1e-12)

    def test_unit_temperature_returns_input(self):
        p = Tensor([0.2, 0.3, 0.5])
        assert_array_equal(flatten(p, 1.0).data, p.data)

    def test_zero_temperature_is_uniform_over_support(self):
        assert_allclose(flatten(Tensor([0.7, 0.0, 0.3]), 0.0).data, [0.5, 0.0, 0.5], atol=1e-15)

    def test_output_stays_on_simplex(self, rng):
        for t in np.linspace(0.0, 1.0, 11):
            out = flatten(Tensor(random_probs(rng)), t).data
            assert np.all(out >= 0)
            assert_allclose(out.sum(axis=1), 1.0, atol=1e-12)

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            flatten(Tensor([0.0, 0.0]), 0.5)
        with pytest.raises(ValueError):
            flatten(Tensor([0.5, 0.5]), 1.5)


class TestLocalizedMutualInformation:
    def test_zero_temperature_is_mutual_information_minus_log_k(self, rng):
        for _ in range(100):
            p1, p2 = random_probs(rng), random_probs(rng)
            K = p1.shape[1]
            expected = 0.5 * sum(
                entropy(p.mean(axis=0)) - entropy(p, axis=1).mean() - np.log(K) for p in (p1, p2)
            )
            assert lmi_loss(Tensor(p1), Tensor(p2), 0.0).item() == pytest.approx(expected, abs=1e-9)

    def test_unit_temperature_is_negative_entropy(self, rng):
        for _ in range(100):
            p1, p2 = random_probs(rng), random_probs(rng)
            expected = 0.5 * sum(np.mean(np.sum(p * np.log(p), axis=1)) for p in (p1, p2))
            assert lmi_loss(Tensor(p1), Tensor(p2), 1.0).item() == pytest.approx(expected, abs=1e-12)

    def test_uniform_targets_replace_the_flattened_prior(self, rng):
        p1, p2 = random_probs(rng), random_probs(rng)
        u = np.full(4, 0.25)
        assert (lmi_loss(Tensor(p1), Tensor(p2), 0.0, targets=(u, u)).item()
                == pytest.approx(lmi_loss(Tensor(p1), Tensor(p2), 0.0).item(), abs=1e-12))

    def test_empty_batch_is_rejected(self):
        with pytest.raises(EmptyBatchError):
            lmi_loss(Tensor(np.zeros((0, 3))), Tensor(np.zeros((0, 3))), 0.1)


class TestUnknownLoss:
    def test_uniform_rows_reach_log_k_with_zero_gradient(self):
        logits = Tensor(np.zeros((4, 5)), requires_grad=True)
        with Tape() as tape:
            p = T.softmax(logits)
            loss = unk_loss(p, p)
        backward(loss, tape)
        assert loss.item() == pytest.approx(np.log(5), abs=1e-9)
        assert_allclose(logits.grad, 0.0, atol=1e-9)

    def test_other_rows_cost_more(self, rng):
        for _ in range(50):
            p1, p2 = random_probs(rng, K=3), random_probs(rng, K=3)
            assert unk_loss(Tensor(p1), Tensor(p2)).item() > np.log(3)


class TestTargetObjective:
    def test_both_sides_empty_is_rejected(self, rng):
        p = Tensor(random_probs(rng))
        with pytest.raises(EmptyBatchError):
            target_objective(p, p, [], [], LossConfig(K=4))

    def test_sides_combine_as_unk_minus_lmi(self, rng):
        p1, p2 = Tensor(random_probs(rng, B=6)), Tensor(random_probs(rng, B=6))
        cfg = LossConfig(K=4, T=0.3)
        plus, minus = [0, 2, 5], [1, 3]
        expected = (unk_loss(T.select_rows(p1, minus), T.select_rows(p2, minus)).item()
                    - lmi_loss(T.select_rows(p1, plus), T.select_rows(p2, plus), 0.3).item())
        assert target_objective(p1, p2, plus, minus, cfg).item() == pytest.approx(expected, abs=1e-12)

    def test_plus_only_is_negative_lmi(self, rng):
        p1, p2 = Tensor(random_probs(rng)), Tensor(random_probs(rng))
        cfg = LossConfig(K=4)
        assert (target_objective(p1, p2, range(5), [], cfg).item()
                == pytest.approx(-lmi_loss(p1, p2, cfg.T).item(), abs=1e-12))

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("temperature", [0.0, 1.0])
    def test_gradient_matches_central_differences(self, seed, temperature):
        # at T=0 and T=1 the flattened prior is locally constant, so the frozen prior is exact
        rng = np.random.default_rng(100 + seed)
        model = TwoHeadModel(3, 3, hidden_dims=(4,), bottleneck_dim=3, seed=seed)
        x = Tensor(rng.normal(size=(8, 3)))
        cfg = LossConfig(K=3, T=temperature)
        plus, minus = [0, 1, 2, 5, 7], [3, 4, 6]
        err = finite_diff_check(lambda _: target_loss(model, x, plus, minus, cfg), model.feature_parameters())
        assert err <= 1e-4

    def test_gradient_with_fixed_prior_matches_central_differences(self, rng):
        model = TwoHeadModel(3, 3, hidden_dims=(4,), bottleneck_dim=3, seed=1)
        x = Tensor(rng.normal(size=(8, 3)))
        prior = np.array([0.5, 0.3, 0.2])
        cfg = LossConfig(K=3, T=0.1)
        err = finite_diff_check(lambda _: target_loss(model, x, [0, 1, 2, 3], [4, 5, 6, 7], cfg, (prior, prior)),
                                model.feature_parameters())
        assert err <= 1e-4
