"""Tests for the DV objective, marginal shuffling and critic training."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datagen import gen_from_joint
from discrete_oracle import copy_joint, mutual_info
from errors import DivergenceError, StructuralError
from mine_estimator import (CriticSpec, MineTrainConfig, critic_from_layout, derangement,
                            dv_objective, evaluate_dv, load_estimate, marginal_resample,
                            save_estimate, train_mi)
from numeric_core import MlpSpec, OptimizerSettings, init_params, make_rng, one_hot


def _gaussian_pair(rho: float, n: int, seed: int):
    rng = make_rng(seed)
    a = rng.standard_normal((n, 1))
    b = rho * a + math.sqrt(1.0 - rho ** 2) * rng.standard_normal((n, 1))
    return a, b


def _quick(epochs=20, **overrides):
    base = dict(epochs=epochs, batch_size=100, replicates=1, eval_window_frac=0.2,
                optimizer=OptimizerSettings('adam', 5e-3))
    base.update(overrides)
    return MineTrainConfig(**base)


class TestObjective:
    def test_known_value(self):
        assert dv_objective(np.array([1.0, 2.0]), np.array([0.0, 0.0])) == pytest.approx(1.5)

    def test_constant_critic_gives_zero(self):
        assert dv_objective(np.full(5, 3.0), np.full(7, 3.0)) == pytest.approx(0.0)

    def test_empty_rejected(self):
        with pytest.raises(StructuralError):
            dv_objective(np.array([]), np.array([1.0]))


class TestShuffling:
    @settings(max_examples=200)
    @given(n=st.integers(2, 300), seed=st.integers(0, 2 ** 32 - 1))
    def test_derangement_has_no_fixed_points(self, n, seed):
        perm = derangement(n, make_rng(seed))
        assert sorted(perm.tolist()) == list(range(n))
        assert not np.any(perm == np.arange(n))

    def test_single_row_rejected(self):
        with pytest.raises(StructuralError):
            derangement(1, make_rng(0))

    def test_marginal_resample_keeps_a(self):
        a = np.arange(10.0)[:, None]
        b = np.arange(10.0, 20.0)[:, None]
        a2, b2 = marginal_resample(a, b, seed=3)
        assert np.array_equal(a2, a)
        assert sorted(b2[:, 0].tolist()) == b[:, 0].tolist()
        assert not np.any(b2[:, 0] - 10.0 == a[:, 0])

    def test_evaluate_dv_invariant_to_row_order(self):
        critic = critic_from_layout(2, 3, [8, 4], num_classes=3)
        params = init_params(critic.mlp, 0)
        rng = make_rng(1)
        a, b = rng.normal(size=(12, 2)), rng.normal(size=(12, 3))
        y = one_hot(rng.integers(0, 3, size=12), 3)
        perm = derangement(12, rng)
        order = rng.permutation(12)
        inverse = np.argsort(order)
        reordered_perm = inverse[perm[order]]
        value = evaluate_dv(critic, params, a, b, y, perm)
        shuffled = evaluate_dv(critic, params, a[order], b[order], y[order], reordered_perm)
        assert shuffled == pytest.approx(value, abs=1e-12)


class TestCriticSpec:
    def test_label_slot_is_followed_by_activated_layer(self):
        critic = critic_from_layout(200, 100, [1000, 200, 10, 12], num_classes=2)
        at = critic.mlp.label_concat_at
        assert at == 3
        assert critic.mlp.shapes()[at] == (12, 12)
        assert critic.mlp.activation[at] == 'elu'
        assert at < critic.mlp.n_layers - 1

    def test_label_critic_needs_two_hidden_layers(self):
        with pytest.raises(StructuralError):
            critic_from_layout(4, 4, [16], num_classes=2)

    def test_label_slot_at_last_hidden_rejected(self):
        with pytest.raises(StructuralError):
            critic_from_layout(4, 4, [16, 8], num_classes=2, concat_after=2)

    def test_explicit_concat_layer(self):
        critic = critic_from_layout(10, 5, [64, 32], num_classes=4, concat_after=1)
        assert critic.mlp.shapes()[1] == (32, 68)

    def test_output_must_be_scalar(self):
        with pytest.raises(StructuralError):
            CriticSpec(MlpSpec((3, 4, 2)), 2, 1)

    def test_input_dim_must_match(self):
        with pytest.raises(StructuralError):
            CriticSpec(MlpSpec((3, 4, 1)), 2, 2)

    def test_needs_second_argument(self):
        with pytest.raises(StructuralError):
            critic_from_layout(3, 0, [4])

    def test_label_mismatch(self):
        critic = critic_from_layout(1, 1, [4])
        a, b = _gaussian_pair(0.0, 20, 0)
        with pytest.raises(StructuralError):
            train_mi(a, b, np.zeros(20, dtype=int), critic, _quick(2))


class TestTraining:
    def test_correlated_beats_independent(self):
        critic = critic_from_layout(1, 1, [32])
        cfg = _quick(60)
        a, b = _gaussian_pair(0.9, 1000, 0)
        correlated = train_mi(a, b, None, critic, cfg, term='i_xz')
        a, b = _gaussian_pair(0.0, 1000, 0)
        independent = train_mi(a, b, None, critic, cfg)
        assert correlated.value > independent.value + 0.25
        assert correlated.term == 'i_xz'
        assert len(correlated.curve) == 60

    def test_deterministic(self):
        critic = critic_from_layout(1, 1, [8])
        a, b = _gaussian_pair(0.5, 200, 2)
        first = train_mi(a, b, None, critic, _quick(5, replicates=2))
        second = train_mi(a, b, None, critic, _quick(5, replicates=2))
        assert first.curves == second.curves
        assert first.replicate_values == second.replicate_values
        assert first.std == pytest.approx(float(np.std(first.replicate_values, ddof=1)))

    def test_value_is_median_of_window(self):
        critic = critic_from_layout(1, 1, [8])
        a, b = _gaussian_pair(0.5, 200, 2)
        est = train_mi(a, b, None, critic, _quick(10, eval_window_frac=0.5))
        assert est.value == pytest.approx(float(np.median(est.curve[-5:])))

    def test_clamp_nonnegative(self):
        critic = critic_from_layout(1, 1, [8])
        a, b = _gaussian_pair(0.0, 200, 5)
        est = train_mi(a, b, None, critic, _quick(5, replicates=3, clamp_nonnegative=True))
        assert all(v >= 0.0 for v in est.replicate_values)

    def test_label_only_critic(self):
        rng = make_rng(0)
        labels = rng.integers(0, 2, size=300)
        a = (labels[:, None] * 2.0 - 1.0) + 0.1 * rng.standard_normal((300, 1))
        critic = critic_from_layout(1, 0, [16, 12], num_classes=2)
        est = train_mi(a, None, labels, critic, _quick(80))
        assert est.value > 0.3

    def test_ema_denominator(self):
        critic = critic_from_layout(1, 1, [8])
        a, b = _gaussian_pair(0.9, 300, 1)
        est = train_mi(a, b, None, critic, _quick(10, ema_rate=0.99))
        assert all(math.isfinite(v) for v in est.curve)

    def test_divergence_is_tagged(self):
        critic = critic_from_layout(1, 1, [4])
        a, b = _gaussian_pair(0.5, 50, 0)
        a[3, 0] = np.inf
        with pytest.raises(DivergenceError) as info:
            train_mi(a, b, None, critic, _quick(3), term='i_x_yz')
        assert info.value.term == 'i_x_yz'
        assert info.value.epoch == 0

    def test_estimate_persistence(self, tmp_path):
        critic = critic_from_layout(1, 1, [4])
        a, b = _gaussian_pair(0.5, 100, 0)
        est = train_mi(a, b, None, critic, _quick(3), term='i_xz')
        loaded = load_estimate(save_estimate(est, tmp_path / 'est.json'))
        assert loaded.value == est.value
        assert loaded.curve == est.curve


@pytest.mark.slow
@pytest.mark.parametrize('rho', [0.0, 0.5, 0.9])
def test_gaussian_regression(rho):
    target = -0.5 * math.log(1.0 - rho ** 2)
    a, b = _gaussian_pair(rho, 5000, 11)
    va, vb = _gaussian_pair(rho, 1000, 12)
    cfg = MineTrainConfig(epochs=100, batch_size=100, replicates=3,
                          optimizer=OptimizerSettings('adam', 1e-3))
    est = train_mi(a, b, None, critic_from_layout(1, 1, [100, 100]), cfg, val_a=va, val_b=vb)
    assert abs(est.mean - target) < 0.10


@pytest.mark.slow
def test_agrees_with_exact_copy_information():
    joint = copy_joint(4)
    train, val = gen_from_joint(joint, 5000, seed=0)
    truth = mutual_info(joint, 'x', 'z')
    cfg = MineTrainConfig(epochs=60, batch_size=100, replicates=3,
                          optimizer=OptimizerSettings('adam', 1e-3))
    est = train_mi(train.modalities[0], train.modalities[1], None, critic_from_layout(4, 4, [64, 32]),
                   cfg, val_a=val.modalities[0], val_b=val.modalities[1])
    assert abs(est.mean - truth) < 0.1
