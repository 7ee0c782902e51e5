"""
Static HTML report for command results: headline metric cards followed by
one table per section.
"""

import logging
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import pandas as pd
from jinja2 import Environment, select_autoescape

logger = logging.getLogger('complementarity.report')

PAGE = """<!DOCTYPE html>
<html lang="en">
<head>
    <meta charset="UTF-8">
    <meta name="viewport" content="width=device-width, initial-scale=1.0">
    <title>{{ title }}</title>
    <style>
        * { margin: 0; padding: 0; box-sizing: border-box; }
        body {
            font-family: -apple-system, BlinkMacSystemFont, 'Segoe UI', Roboto, 'Helvetica Neue', Arial, sans-serif;
            background: #f5f7fa;
            color: #2c3e50;
            line-height: 1.6;
            padding: 20px;
        }
        .container { max-width: 1400px; margin: 0 auto; }
        .header, .section, .metric-card {
            background: white;
            border-radius: 8px;
            box-shadow: 0 2px 4px rgba(0,0,0,0.1);
        }
        .header { padding: 30px; margin-bottom: 30px; }
        .header h1 { font-size: 32px; font-weight: 600; margin-bottom: 10px; }
        .subtitle { color: #7f8c8d; font-size: 14px; }
        .metrics-grid {
            display: grid;
            grid-template-columns: repeat(auto-fit, minmax(250px, 1fr));
            gap: 20px;
            margin-bottom: 30px;
        }
        .metric-card { padding: 25px; }
        .metric-label {
            font-size: 12px;
            text-transform: uppercase;
            color: #7f8c8d;
            margin-bottom: 8px;
            font-weight: 600;
            letter-spacing: 0.5px;
        }
        .metric-value { font-size: 36px; font-weight: 700; }
        .metric-value.warn { color: #e67e22; }
        .section { padding: 30px; margin-bottom: 30px; overflow-x: auto; }
        .section-title { font-size: 24px; font-weight: 600; margin-bottom: 10px; }
        table { border-collapse: collapse; width: 100%; font-size: 14px; }
        th { text-align: left; background: #ecf0f1; padding: 8px 12px; }
        td { padding: 8px 12px; border-bottom: 1px solid #ecf0f1; font-variant-numeric: tabular-nums; }
    </style>
</head>
<body>
    <div class="container">
        <div class="header">
            <h1>📊 {{ title }}</h1>
            {% if subtitle %}<div class="subtitle">{{ subtitle }}</div>{% endif %}
        </div>
        {% if cards %}
        <div class="metrics-grid">
            {% for label, value, warn in cards %}
            <div class="metric-card">
                <div class="metric-label">{{ label }}</div>
                <div class="metric-value{% if warn %} warn{% endif %}">{{ value }}</div>
            </div>
            {% endfor %}
        </div>
        {% endif %}
        {% for section in sections %}
        <div class="section">
            <div class="section-title">{{ section.title }}</div>
            <table>
                <thead><tr>{% for column in section.columns %}<th>{{ column }}</th>{% endfor %}</tr></thead>
                <tbody>
                {% for row in section.rows %}
                    <tr>{% for cell in row %}<td>{{ cell }}</td>{% endfor %}</tr>
                {% endfor %}
                </tbody>
            </table>
        </div>
        {% endfor %}
    </div>
</body>
</html>
"""

_env = Environment(autoescape=select_autoescape(default=True, default_for_string=True))
_template = _env.from_string(PAGE)

Card = Tuple[str, str, bool]


def format_value(value) -> str:
    if value is None:
        return 'n/a'
    if isinstance(value, float):
        return 'n/a' if value != value else f"{value:.4f}"
    return str(value)


def card(label: str, value, warn: bool = False) -> Card:
    return label, format_value(value), warn


def _section(title: str, frame: pd.DataFrame) -> dict:
    rows = [[format_value(v) for v in record] for record in frame.itertuples(index=False, name=None)]
    return {'title': title, 'columns': [str(c) for c in frame.columns], 'rows': rows}


def render_report(title: str, sections: Sequence[Tuple[str, pd.DataFrame]],
                  cards: Optional[List[Card]] = None, subtitle: str = '') -> str:
    return _template.render(
        title=title,
        subtitle=subtitle,
        cards=cards or [],
        sections=[_section(name, frame) for name, frame in sections],
    )


def write_report(path: Union[str, Path], title: str, sections: Sequence[Tuple[str, pd.DataFrame]],
                 cards: Optional[List[Card]] = None, subtitle: str = '') -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(render_report(title, sections, cards, subtitle), encoding='utf-8')
    logger.info(f"Wrote HTML report {path}")
    return path
