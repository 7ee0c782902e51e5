"""Tests for masking, augmentation, the fusion strategies and model persistence."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from datagen import gen_from_joint
from discrete_oracle import copy_joint, xor_joint
from errors import LoadError, StructuralError
from missing_harness import (STRATEGIES, StrategyConfig, build_model_spec, check_strategy,
                             drop_probability_sweep, evaluate_missing, init_fusion_params,
                             load_model, mask_modality, missing_aug_sample, missing_detect_rule,
                             predict, save_model, train, train_missing_mask)
from numeric_core import OptimizerSettings, make_rng


@pytest.fixture(scope='module')
def copy_data():
    return gen_from_joint(copy_joint(2), 250, seed=0)


def _cfg(strategy='Naive', **overrides):
    base = dict(strategy=strategy, epochs=3, phase2_epochs=2, batch_size=32, hidden=8,
                phase1=OptimizerSettings('adam', 1e-2))
    base.update(overrides)
    return StrategyConfig(**base)


def _fit(ds, cfg):
    return train(ds, build_model_spec(ds.dims, ds.num_classes, cfg.strategy, cfg.hidden), cfg)


class TestMasking:
    def test_mask_zeroes_one_modality(self):
        batch = [np.ones((3, 2)), np.full((3, 4), 2.0)]
        out = mask_modality(batch, 0)
        assert np.all(out[0] == 0.0)
        assert out[1] is batch[1]
        assert np.array_equal(mask_modality(out, 0)[0], out[0])

    def test_mask_index_out_of_range(self):
        with pytest.raises(StructuralError):
            mask_modality([np.ones((1, 1))], 1)

    @settings(max_examples=100, deadline=None)
    @given(m=st.integers(2, 5), p=st.floats(0.0, 0.95), seed=st.integers(0, 10000))
    def test_never_drops_everything(self, m, p, seed):
        batch = [np.ones((40, 2)) for _ in range(m)]
        out, mask = missing_aug_sample(batch, [p] * m, seed)
        assert not np.any(mask.all(axis=1))
        for j in range(m):
            assert np.all(out[j][mask[:, j]] == 0.0)
            assert np.all(out[j][~mask[:, j]] == 1.0)

    def test_forced_counts_as_dropped(self):
        batch = [np.ones((5, 1)), np.ones((5, 1))]
        forced = np.zeros((5, 2), dtype=bool)
        forced[:, 0] = True
        out, mask = missing_aug_sample(batch, [0.0, 0.5], make_rng(0), forced)
        assert np.all(mask[:, 0]) and not np.any(mask[:, 1])
        assert np.all(out[1] == 1.0)

    def test_certain_drop_everywhere_rejected(self):
        with pytest.raises(StructuralError):
            missing_aug_sample([np.ones((2, 1))] * 2, [1.0, 1.0], 0)

    def test_probability_count_must_match(self):
        with pytest.raises(StructuralError):
            missing_aug_sample([np.ones((2, 1))] * 2, [0.5], 0)

    def test_train_missing_mask(self):
        assert not train_missing_mask(50, 3, 0.0, 0).any()
        mask = train_missing_mask(500, 3, 0.4, 1)
        assert mask.sum(axis=1).max() == 1
        assert 100 < mask.any(axis=1).sum() < 300

    def test_joint_drop_impossible_at_scale(self):
        batch = [np.ones((100_000, 1)), np.ones((100_000, 1))]
        _, mask = missing_aug_sample(batch, [0.9, 0.9], 11)
        assert not np.any(mask.all(axis=1))
        assert mask.any(axis=1).mean() > 0.9


def _reference_rule(rows, num_classes):
    """Row-by-row restatement of the MissingDetect combination."""
    out = []
    for heads in rows:
        flagged = [int(np.argmax(h)) == num_classes for h in heads]
        use = heads if all(flagged) or not any(flagged) else \
            [h for h, f in zip(heads, flagged) if not f]
        out.append(int(np.argmax(np.mean([h[:num_classes] for h in use], axis=0))))
    return out


class TestMissingDetectRule:
    def test_truth_table(self):
        head0 = np.array([[2.0, 0.0, -5.0], [5.0, 0.0, 9.0], [3.0, 0.0, 9.0]])
        head1 = np.array([[0.0, 1.0, -5.0], [0.0, 1.0, -5.0], [0.0, 1.0, 9.0]])
        assert missing_detect_rule([head0, head1], 2).tolist() == [0, 1, 0]

    def test_exhaustive_grid_matches_reference(self):
        levels = np.array([0.0, 1.0, 2.5])
        outputs = np.array(np.meshgrid(levels, levels, levels, indexing='ij')).reshape(3, -1).T
        pairs = [(a, b) for a in outputs for b in outputs]
        head0 = np.array([a for a, _ in pairs])
        head1 = np.array([b for _, b in pairs])
        expected = _reference_rule(pairs, 2)
        assert missing_detect_rule([head0, head1], 2).tolist() == expected


class TestSpecs:
    @pytest.mark.parametrize('strategy', STRATEGIES)
    def test_built_spec_passes_check(self, strategy):
        spec = build_model_spec([3, 4], 5, strategy, hidden=6)
        check_strategy(spec, strategy)
        assert spec.n_modalities == 2

    def test_missing_detect_heads_have_extra_class(self):
        spec = build_model_spec([3, 4], 5, 'MissingDetect')
        assert spec.aux_outputs == 6 and spec.has_missing_class

    def test_mismatched_strategy(self):
        with pytest.raises(StructuralError):
            check_strategy(build_model_spec([3, 4], 2, 'Naive'), 'UmeMma')

    def test_unknown_strategy(self):
        with pytest.raises(StructuralError):
            build_model_spec([3, 4], 2, 'Oracle')

    def test_drop_probs_broadcast(self):
        assert StrategyConfig(drop_probs=(0.2,)).drop_probs_for(3) == (0.2, 0.2, 0.2)
        assert StrategyConfig().drop_probs_for(2) == (0.3, 0.3)
        with pytest.raises(StructuralError):
            StrategyConfig(drop_probs=(0.1, 0.2)).drop_probs_for(3)

    def test_drop_probability_of_one_rejected(self):
        with pytest.raises(StructuralError):
            StrategyConfig(drop_probs=(1.0,))

    def test_phase2_defaults_to_scaled_phase1(self):
        cfg = StrategyConfig(phase1=OptimizerSettings('adam', 1e-3))
        assert cfg.phase2_settings.lr_at(0) == pytest.approx(1e-4)

    def test_config_dict_round_trip(self):
        cfg = _cfg('UmeMma', drop_probs=(0.1, 0.2), freeze_encoders_in_phase2=True)
        assert StrategyConfig.from_dict(cfg.to_dict()) == cfg


class TestTraining:
    @pytest.mark.parametrize('strategy', STRATEGIES)
    def test_every_strategy_trains_and_evaluates(self, copy_data, strategy):
        train_ds, val_ds = copy_data
        model = _fit(train_ds, _cfg(strategy))
        assert all(np.all(np.isfinite(h)) for h in model.history.values())
        report = evaluate_missing(model, val_ds)
        assert report.strategy == strategy
        assert 0.0 <= report.clean_accuracy <= 1.0
        assert len(report.missing_accuracy) == 2
        assert sum(map(sum, report.confusion)) == val_ds.n_rows
        if report.clean_accuracy > 0:
            assert report.robustness_ratio == pytest.approx(
                np.mean(report.missing_accuracy) / report.clean_accuracy)

    def test_naive_learns_copy_labels(self, copy_data):
        train_ds, val_ds = copy_data
        model = _fit(train_ds, _cfg(epochs=30))
        assert evaluate_missing(model, val_ds).clean_accuracy >= 0.95

    def test_frozen_encoders_stay_at_init(self, copy_data):
        train_ds, _ = copy_data
        cfg = _cfg('UmeMma', epochs=0, phase2_epochs=3, freeze_encoders_in_phase2=True, seed=4)
        spec = build_model_spec(train_ds.dims, 2, 'UmeMma', cfg.hidden)
        model = train(train_ds, spec, cfg)
        initial = init_fusion_params(spec, 4)
        for trained, start in zip(model.params.encoders, initial.encoders):
            assert np.array_equal(trained.to_flat(), start.to_flat())
        assert not np.array_equal(model.params.aux[0].to_flat(), initial.aux[0].to_flat())

    def test_deterministic(self, copy_data):
        train_ds, _ = copy_data
        first = _fit(train_ds, _cfg('MissingAug', seed=2))
        second = _fit(train_ds, _cfg('MissingAug', seed=2))
        assert first.history == second.history

    def test_train_missing_rows(self, copy_data):
        train_ds, val_ds = copy_data
        model = _fit(train_ds, _cfg('UmeMma', train_missing_frac=0.3))
        assert set(model.history) == {'phase1_modality0', 'phase1_modality1', 'phase2'}

    def test_width_mismatch(self, copy_data):
        train_ds, _ = copy_data
        with pytest.raises(StructuralError):
            train(train_ds, build_model_spec([3, 2], 2, 'Naive', 8), _cfg())

    def test_drop_probability_sweep(self, copy_data):
        train_ds, val_ds = copy_data
        results = drop_probability_sweep(train_ds, val_ds, _cfg('Naive'), [0.1, 0.5])
        assert [prob for prob, _ in results] == [0.1, 0.5]
        assert all(report.strategy == 'UmeMma' for _, report in results)

    def test_empty_validation_rejected(self, copy_data):
        train_ds, _ = copy_data
        model = _fit(train_ds, _cfg())
        with pytest.raises(StructuralError):
            evaluate_missing(model, train_ds.rows(np.array([], dtype=int)))


class TestPersistence:
    def test_save_load_predicts_identically(self, copy_data, tmp_path):
        train_ds, val_ds = copy_data
        model = _fit(train_ds, _cfg('MissingDetect'))
        loaded = load_model(save_model(model, tmp_path / 'model'))
        assert loaded.strategy == model.strategy
        assert np.array_equal(predict(loaded, val_ds.modalities), predict(model, val_ds.modalities))

    def test_truncated_payload(self, copy_data, tmp_path):
        train_ds, _ = copy_data
        path = save_model(_fit(train_ds, _cfg()), tmp_path / 'model')
        payload = tmp_path / 'model.f64'
        payload.write_bytes(payload.read_bytes()[:-8])
        with pytest.raises(LoadError):
            load_model(path)


@pytest.mark.slow
@pytest.mark.parametrize('strategy', STRATEGIES)
def test_xor_missing_accuracy_stays_at_chance(strategy):
    train_ds, val_ds = gen_from_joint(xor_joint(), 5000, seed=5)
    report = evaluate_missing(_fit(train_ds, _cfg(strategy, epochs=20, phase2_epochs=10, hidden=16)),
                              val_ds)
    for accuracy in report.missing_accuracy:
        assert abs(accuracy - 0.5) <= 0.05


@pytest.mark.slow
@pytest.mark.parametrize('strategy', ['MissingAug', 'UmeMma'])
def test_robust_strategies_survive_a_missing_modality(strategy):
    train_ds, val_ds = gen_from_joint(copy_joint(4), 2000, seed=3)
    cfg = _cfg(strategy, epochs=30, phase2_epochs=15, hidden=32, drop_probs=(0.3,))
    report = evaluate_missing(_fit(train_ds, cfg), val_ds)
    assert report.clean_accuracy >= 0.95
    assert report.robustness_ratio >= 0.9
