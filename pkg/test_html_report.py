"""Tests for the static HTML report."""

import pandas as pd

from html_report import card, format_value, render_report, write_report


def test_format_value():
    assert format_value(None) == 'n/a'
    assert format_value(float('nan')) == 'n/a'
    assert format_value(0.123456) == '0.1235'
    assert format_value(3) == '3'


def test_cells_are_escaped():
    frame = pd.DataFrame([{'term': '<i_xz>', 'value': 0.5}])
    html = render_report('Report', [('Terms', frame)], [card('Metric', None, warn=True)])
    assert '&lt;i_xz&gt;' in html
    assert '<i_xz>' not in html
    assert '0.5000' in html and 'n/a' in html


def test_write_creates_parents(tmp_path):
    path = write_report(tmp_path / 'a' / 'b.html', 'Title', [], subtitle='sub')
    assert path.read_text(encoding='utf-8').startswith('<!DOCTYPE html>')
