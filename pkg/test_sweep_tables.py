"""Tests for the sweep table, its summary and the comparison outputs."""

import pandas as pd
import pytest

from errors import LoadError, StructuralError
from sweep_tables import (COMPARISON_SCHEMA, SWEEP_SCHEMA, SweepTable, comparison_frame,
                          export_excel, read_sweep, summarize, summary_frame, sweep_columns,
                          write_comparison_csv)


def _row(value, seed, pair, error=None):
    row = {'parameter': 'alpha', 'value': value, 'seed': seed, 'metric_subset': 0.5,
           'metric_pair': pair, 'metric_defined': True, 'Naive_ratio': 1.0 - value,
           'seconds': 1.5}
    if error:
        row = {'parameter': 'alpha', 'value': value, 'seed': seed, 'error': error}
    return row


class TestSweepTable:
    def test_new_table_has_schema_and_header(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        SweepTable(path, ['Naive'])
        lines = path.read_text().splitlines()
        assert lines[0] == SWEEP_SCHEMA
        assert lines[1].split(',') == sweep_columns(['Naive'])
        assert 'Naive_missing_mean' in lines[1]

    def test_resume_skips_only_successful_cells(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        table = SweepTable(path, ['Naive'])
        table.append(_row(0.0, 0, 0.1))
        table.append(_row(0.5, 0, None, error='DivergenceError: boom'))
        reopened = SweepTable(path, ['Naive'])
        assert reopened.is_done(0.0, 0)
        assert not reopened.is_done(0.5, 0)
        assert not reopened.is_done(0.0, 1)

    def test_header_mismatch(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        SweepTable(path, ['Naive'])
        with pytest.raises(StructuralError):
            SweepTable(path, ['UmeMma'])

    def test_wrong_schema_line(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        path.write_text('value,seed\n0.1,0\n')
        with pytest.raises(LoadError):
            SweepTable(path)

    def test_unknown_column_rejected(self, tmp_path):
        table = SweepTable(tmp_path / 'sweep.csv')
        with pytest.raises(StructuralError):
            table.append({'value': 0.1, 'seed': 0, 'bogus': 1})


class TestSummary:
    def _table(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        table = SweepTable(path, ['Naive'])
        for value in (0.0, 0.5, 1.0):
            for seed in (0, 1):
                table.append(_row(value, seed, 0.2 + value))
        table.append(_row(1.0, 2, None, error='GenerationError: budget'))
        return path

    def test_failed_retry_is_replaced(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        table = SweepTable(path, ['Naive'])
        table.append(_row(0.5, 0, None, error='NumericError: nan'))
        table.append(_row(0.5, 0, 0.7))
        frame = read_sweep(path)
        assert len(frame) == 1
        assert bool(frame['ok'].iloc[0])

    def test_spearman_and_per_value(self, tmp_path):
        summary = summarize(self._table(tmp_path))
        assert summary['parameter'] == 'alpha'
        assert summary['rows'] == 7 and summary['failed'] == 1
        assert summary['spearman']['metric_pair'] == pytest.approx(1.0)
        assert summary['spearman']['Naive_ratio'] == pytest.approx(-1.0)
        assert summary['spearman']['metric_subset'] is None
        first = summary['per_value'][0]
        assert first['value'] == 0.0 and first['seeds'] == 2
        assert first['metric_pair_mean'] == pytest.approx(0.2)
        assert first['metric_pair_std'] == pytest.approx(0.0)
        assert list(summary_frame(summary)['value']) == [0.0, 0.5, 1.0]

    def test_missing_table(self, tmp_path):
        with pytest.raises(LoadError):
            read_sweep(tmp_path / 'absent.csv')

    def test_empty_table(self, tmp_path):
        path = tmp_path / 'sweep.csv'
        SweepTable(path)
        assert summarize(path)['rows'] == 0


class TestComparison:
    REPORTS = [
        {'strategy': 'Naive', 'clean_accuracy': 0.9, 'missing_accuracy': [0.6, 0.5],
         'robustness_ratio': 0.55 / 0.9},
        {'strategy': 'UmeMma', 'clean_accuracy': 0.88, 'missing_accuracy': [0.8, 0.82],
         'robustness_ratio': 0.81 / 0.88},
    ]

    def test_frame_columns(self):
        frame = comparison_frame(self.REPORTS)
        assert list(frame.columns) == ['strategy', 'clean', 'missing_1', 'missing_2', 'ratio']

    def test_csv_has_schema_line(self, tmp_path):
        path = write_comparison_csv(comparison_frame(self.REPORTS), tmp_path / 'cmp.csv')
        lines = path.read_text().splitlines()
        assert lines[0] == COMPARISON_SCHEMA
        assert lines[2].startswith('Naive,0.900000')
        frame = pd.read_csv(path, skiprows=1)
        assert list(frame['strategy']) == ['Naive', 'UmeMma']

    def test_excel_export(self, tmp_path):
        frames = {'comparison': comparison_frame(self.REPORTS)}
        path = export_excel(frames, tmp_path / 'out' / 'cmp.xlsx')
        assert path.exists() and path.stat().st_size > 0
