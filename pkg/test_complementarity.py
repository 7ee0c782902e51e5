"""Tests for subset parsing, the exact complementarity path and the estimator path."""

import math

import pandas as pd
import pytest

import complementarity
from complementarity import (EstimatorSettings, SubsetSpec, estimate_complementarity,
                             estimate_gamma, estimate_terms, load_report, oracle_complementarity,
                             save_report)
from datagen import TwoModalConfig, gen_from_joint, gen_two_modal
from discrete_oracle import copy_joint, label_is_x_joint, uniform_independent_joint, xor_joint
from errors import LoadError, StructuralError
from mine_estimator import MiEstimate, MineTrainConfig
from numeric_core import OptimizerSettings
from sweep_tables import summarize

LN2 = math.log(2.0)


def _settings(epochs=3, replicates=2, **overrides):
    train = MineTrainConfig(epochs=epochs, batch_size=50, replicates=replicates,
                            optimizer=OptimizerSettings('adam', 1e-3))
    base = dict(hidden=(16,), label_hidden=(16, 8), label_concat_after=1, train=train)
    base.update(overrides)
    return EstimatorSettings(**base)


@pytest.fixture(scope='module')
def xor_data():
    return gen_from_joint(xor_joint(), 300, seed=0)


class TestSubsetSpec:
    def test_parse_is_one_based(self):
        assert SubsetSpec.parse('2').s1 == (1,)
        assert SubsetSpec.parse('3, 1').s1 == (0, 2)

    def test_parse_rejects_zero(self):
        with pytest.raises(StructuralError):
            SubsetSpec.parse('0')

    def test_parse_rejects_garbage(self):
        with pytest.raises(StructuralError):
            SubsetSpec.parse('one')

    def test_complement(self):
        assert SubsetSpec((0, 2)).s2(4) == (1, 3)

    def test_full_set_is_not_proper(self):
        with pytest.raises(StructuralError):
            SubsetSpec((0, 1)).validate(2)

    def test_out_of_range(self):
        with pytest.raises(StructuralError):
            SubsetSpec((2,)).validate(2)

    def test_empty_rejected(self):
        with pytest.raises(StructuralError):
            SubsetSpec(())


class TestOracle:
    def test_xor_metrics(self):
        result = oracle_complementarity(xor_joint())
        assert result.i_xz == pytest.approx(0.0, abs=1e-12)
        assert result.gamma_x == pytest.approx(LN2)
        assert result.gamma_z == pytest.approx(LN2)
        assert result.metric_subset == pytest.approx(1.0)
        assert result.metric_pair == pytest.approx(2.0)

    def test_copy_has_no_complementarity(self):
        result = oracle_complementarity(copy_joint(4))
        assert result.metric_subset == pytest.approx(0.0, abs=1e-12)
        assert result.metric_pair == pytest.approx(0.0, abs=1e-12)
        assert result.interaction == pytest.approx(math.log(4))

    def test_subset_choice_swaps_roles(self):
        joint = label_is_x_joint(3)
        on_x = oracle_complementarity(joint, 'x')
        on_z = oracle_complementarity(joint, 'z')
        assert on_x.metric_subset == pytest.approx(1.0)
        assert on_z.metric_subset == pytest.approx(0.0, abs=1e-12)
        assert on_x.metric_pair == pytest.approx(on_z.metric_pair)

    def test_gamma_matches_term_difference(self):
        result = oracle_complementarity(label_is_x_joint(2))
        assert result.gamma_x == pytest.approx(result.i_x_yz - result.i_xz)
        assert result.gamma_z == pytest.approx(result.i_z_yx - result.i_xz)

    def test_uninformative_label_leaves_metrics_undefined(self):
        result = oracle_complementarity(uniform_independent_joint(3))
        assert not result.metric_defined
        assert result.metric_subset is None and result.metric_pair is None

    def test_bad_subset(self):
        with pytest.raises(StructuralError):
            oracle_complementarity(xor_joint(), 'y')


class TestEstimator:
    def test_report_structure(self, xor_data):
        train, val = xor_data
        report = estimate_complementarity(train, SubsetSpec((0,)), _settings(), val)
        assert report.subset == [0] and report.complement == [1]
        assert list(report.terms) == ['i_xz', 'i_x_yz', 'i_z_yx', 'i_sy']
        assert report.gamma_x == max(0.0, report.gamma_x_raw)
        assert report.gamma_z == max(0.0, report.gamma_z_raw)
        assert report.gamma_x_raw == pytest.approx(
            report.terms['i_x_yz'].value - report.terms['i_xz'].value)
        assert len(report.replicate_stats['gamma_x']['values']) == 2
        assert len(report.replicate_stats['i_sy']['values']) == 2

    def test_floor_leaves_metrics_undefined(self, xor_data):
        train, val = xor_data
        report = estimate_complementarity(train, SubsetSpec((0,)), _settings(replicates=1), val,
                                          floor=1e9)
        assert not report.metric_defined
        assert report.metric_subset is None and report.metric_pair is None

    def test_composed_mode_rejected(self, xor_data):
        train, _ = xor_data
        with pytest.raises(StructuralError, match='composed'):
            estimate_complementarity(train, SubsetSpec((0,)), _settings(), normalizer_mode='composed')

    def test_unknown_mode_rejected(self, xor_data):
        train, _ = xor_data
        with pytest.raises(StructuralError):
            estimate_complementarity(train, SubsetSpec((0,)), _settings(), normalizer_mode='other')

    def test_preset_dims_mismatch(self, xor_data):
        train, _ = xor_data
        with pytest.raises(StructuralError, match='critic preset dims'):
            estimate_terms(train, SubsetSpec((0,)), _settings(expected_dims=(200, 100)))

    def test_parallel_matches_sequential(self, xor_data):
        train, val = xor_data
        sequential = estimate_terms(train, SubsetSpec((1,)), _settings(parallel=1), val)
        parallel = estimate_terms(train, SubsetSpec((1,)), _settings(parallel=4), val)
        for name in sequential:
            assert sequential[name].replicate_values == parallel[name].replicate_values

    def test_gamma_reports_raw_and_clamped(self, xor_data):
        train, val = xor_data
        gamma = estimate_gamma(train, SubsetSpec((0,)), _settings(replicates=1), val)
        assert set(gamma.terms) == {'i_xz', 'i_x_yz'}
        assert gamma.raw == pytest.approx(gamma.terms['i_x_yz'].value - gamma.terms['i_xz'].value)
        assert gamma.clamped == max(0.0, gamma.raw)

    def test_gamma_clamp_of_negative_difference(self, xor_data, monkeypatch):
        train, val = xor_data
        fixed = {name: MiEstimate(term=name, value=value, curve=[value], curves=[[value]],
                                  replicate_values=[value], mean=value, std=0.0)
                 for name, value in (('i_xz', 0.3), ('i_x_yz', 0.1))}
        monkeypatch.setattr(complementarity, 'estimate_terms', lambda *args, **kwargs: fixed)
        gamma = estimate_gamma(train, SubsetSpec((0,)), _settings(), val)
        assert gamma.raw == pytest.approx(-0.2)
        assert gamma.clamped == 0.0

    def test_report_persistence(self, xor_data, tmp_path):
        train, val = xor_data
        report = estimate_complementarity(train, SubsetSpec((0,)), _settings(replicates=1), val)
        path = save_report(report, tmp_path / 'report.json', context={'dataset': 'xor'})
        loaded = load_report(path)
        assert loaded.gamma_x_raw == report.gamma_x_raw
        assert loaded.terms['i_sy'].curve == report.terms['i_sy'].curve

    def test_label_term_recovers_label_entropy(self):
        train, val = gen_from_joint(label_is_x_joint(2), 1000, seed=2)
        fit = MineTrainConfig(epochs=60, batch_size=100, replicates=1,
                              optimizer=OptimizerSettings('adam', 5e-3))
        settings = _settings(label_hidden=(32, 16), train=fit)
        terms = estimate_terms(train, SubsetSpec((0,)), settings, val, names=('i_sy',))
        assert terms['i_sy'].value == pytest.approx(LN2, abs=0.15)

    def test_not_a_report(self, tmp_path):
        (tmp_path / 'x.json').write_text('{"format": "other"}')
        with pytest.raises(LoadError):
            load_report(tmp_path / 'x.json')


@pytest.mark.slow
def test_estimator_tracks_exact_xor_values():
    train, val = gen_from_joint(xor_joint(), 5000, seed=1)
    settings = _settings(epochs=60, replicates=3, hidden=(64, 32), label_hidden=(64, 32))
    report = estimate_complementarity(train, SubsetSpec((0,)), settings, val)
    exact = oracle_complementarity(xor_joint())
    assert report.gamma_x == pytest.approx(exact.gamma_x, abs=0.15)
    assert report.terms['i_sy'].value == pytest.approx(exact.i_sy, abs=0.15)


@pytest.mark.slow
def test_metric_pair_falls_as_latent_overlap_grows():
    rows = []
    settings = _settings(epochs=100, replicates=1, hidden=(256, 128, 64), label_hidden=(256, 64, 10))
    for alpha in (0.0, 0.25, 0.5, 0.75, 1.0):
        for seed in (0, 1, 2):
            cfg = TwoModalConfig(d=50, d1=200, d2=100, alpha=alpha, n=5000, seed=seed)
            train, val = gen_two_modal(cfg)
            report = estimate_complementarity(train, SubsetSpec((0,)), settings, val)
            rows.append({'parameter': 'alpha', 'value': alpha, 'seed': seed,
                         'metric_subset': report.metric_subset, 'metric_pair': report.metric_pair})
    summary = summarize(pd.DataFrame(rows))
    assert summary['spearman']['metric_pair'] <= -0.8
