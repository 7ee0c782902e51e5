"""
Tabular outputs: the append-only sweep table, its pandas summary, strategy
comparison tables and the Excel export.

A sweep table is CSV with a leading `# schema: sweep-row v1` line and one row
per (value, seed) cell. Rows are flushed as soon as a cell finishes, so a
crashed sweep resumes by skipping the cells already present.
"""

import csv
import logging
import math
import threading
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import pandas as pd

from errors import LoadError, StructuralError

logger = logging.getLogger('complementarity.tables')

SWEEP_SCHEMA = '# schema: sweep-row v1'
COMPARISON_SCHEMA = '# schema: strategy-comparison v1'

# value, seed, the four MI terms (nats), raw and clamped Gamma, both metrics
BASE_COLUMNS = [
    'parameter', 'value', 'seed',
    'i_xz', 'i_x_yz', 'i_z_yx', 'i_sy',
    'gamma_x_raw', 'gamma_z_raw', 'gamma_x', 'gamma_z',
    'metric_subset', 'metric_pair', 'metric_defined',
]
STRATEGY_FIELDS = ('clean', 'missing_mean', 'ratio')
TAIL_COLUMNS = ['seconds', 'error']


def sweep_columns(strategies: Sequence[str]) -> List[str]:
    """Header of a sweep table; per-strategy accuracy columns sit between the MI block and the tail."""
    columns = list(BASE_COLUMNS)
    for name in strategies:
        columns.extend(f"{name}_{suffix}" for suffix in STRATEGY_FIELDS)
    return columns + TAIL_COLUMNS


def _cell(value) -> str:
    if value is None:
        return ''
    if isinstance(value, bool):
        return 'true' if value else 'false'
    if isinstance(value, float):
        return '' if math.isnan(value) else repr(value)
    return str(value)


def _read_header(path: Path) -> List[str]:
    with open(path, 'r', newline='', encoding='utf-8') as f:
        first = f.readline().rstrip('\r\n')
        if first != SWEEP_SCHEMA:
            raise LoadError(f"{path.name}: expected '{SWEEP_SCHEMA}' on the first line, got '{first}'")
        return next(csv.reader(f), [])


class SweepTable:
    """
    Append-only sweep CSV shared by concurrently running cells.

    Opening an existing table checks its schema line and header against the
    expected columns and collects the (value, seed) cells already written.
    """

    def __init__(self, path: Union[str, Path], strategies: Sequence[str] = ()):
        self.path = Path(path)
        self.columns = sweep_columns(strategies)
        self._lock = threading.Lock()
        self.completed: Set[Tuple[float, int]] = set()

        if self.path.exists() and self.path.stat().st_size > 0:
            header = _read_header(self.path)
            if header != self.columns:
                raise StructuralError(f"{self.path.name} was written with columns {header}, "
                                      f"this sweep expects {self.columns}")
            for row in self._rows():
                if row.get('error'):
                    continue
                self.completed.add((float(row['value']), int(row['seed'])))
            logger.info(f"Resuming {self.path}: {len(self.completed)} completed cells")
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            with open(self.path, 'w', newline='', encoding='utf-8') as f:
                f.write(SWEEP_SCHEMA + '\n')
                csv.writer(f).writerow(self.columns)

    def _rows(self) -> Iterable[Dict[str, str]]:
        with open(self.path, 'r', newline='', encoding='utf-8') as f:
            f.readline()
            yield from csv.DictReader(f)

    def is_done(self, value: float, seed: int) -> bool:
        return (float(value), int(seed)) in self.completed

    def append(self, row: Dict[str, object]):
        """Write one row and flush it; unknown keys are rejected."""
        unknown = sorted(set(row) - set(self.columns))
        if unknown:
            raise StructuralError(f"sweep row has unknown columns {unknown}")
        line = [_cell(row.get(name)) for name in self.columns]
        with self._lock:
            with open(self.path, 'a', newline='', encoding='utf-8') as f:
                csv.writer(f).writerow(line)
                f.flush()
            if not row.get('error'):
                self.completed.add((float(row['value']), int(row['seed'])))


def read_sweep(path: Union[str, Path]) -> pd.DataFrame:
    """Load a sweep table; later rows for the same cell replace earlier failed attempts."""
    path = Path(path)
    if not path.exists():
        raise LoadError(f"sweep table not found: {path}")
    _read_header(path)
    frame = pd.read_csv(path, skiprows=1, keep_default_na=True)
    if frame.empty:
        return frame
    frame['error'] = frame['error'].fillna('').astype(str)
    frame['ok'] = frame['error'] == ''
    # A successful row wins over failures of the same cell
    frame = frame.sort_values(['value', 'seed', 'ok'], kind='stable')
    return frame.drop_duplicates(['value', 'seed'], keep='last').reset_index(drop=True)


def _target_columns(frame: pd.DataFrame) -> List[str]:
    targets = [c for c in ('metric_subset', 'metric_pair') if c in frame.columns]
    targets += [c for c in frame.columns if c.endswith('_ratio')]
    return targets


def _clean(value) -> Optional[float]:
    if value is None or (isinstance(value, float) and math.isnan(value)):
        return None
    return float(value)


def summarize(source: Union[str, Path, pd.DataFrame]) -> dict:
    """
    Per-value means and standard deviations plus Spearman correlations of the
    grid parameter with every metric and robustness-ratio column.

    Failed rows are counted but excluded from the statistics. A correlation
    against a constant column is reported as None.
    """
    frame = source if isinstance(source, pd.DataFrame) else read_sweep(source)
    if frame.empty:
        return {'parameter': None, 'rows': 0, 'failed': 0, 'per_value': [], 'spearman': {}}

    ok = frame[frame['ok']] if 'ok' in frame.columns else frame
    parameter = str(frame['parameter'].iloc[0])
    targets = _target_columns(frame)

    per_value = []
    for value, group in ok.groupby('value', sort=True):
        entry = {'value': float(value), 'seeds': int(len(group))}
        for column in targets:
            series = pd.to_numeric(group[column], errors='coerce').dropna()
            entry[f"{column}_mean"] = _clean(series.mean()) if len(series) else None
            entry[f"{column}_std"] = _clean(series.std(ddof=1)) if len(series) > 1 else None
        per_value.append(entry)

    spearman = {}
    numeric = ok[['value'] + targets].apply(pd.to_numeric, errors='coerce')
    if len(numeric) > 1:
        corr = numeric.corr(method='spearman')
        for column in targets:
            spearman[column] = _clean(corr.loc['value', column])

    summary = {
        'parameter': parameter,
        'rows': int(len(frame)),
        'failed': int(len(frame) - len(ok)),
        'per_value': per_value,
        'spearman': spearman,
    }
    logger.info(f"Sweep summary over {parameter}: {summary['rows']} rows, {summary['failed']} failed")
    return summary


def summary_frame(summary: dict) -> pd.DataFrame:
    return pd.DataFrame(summary['per_value'])


# ============================================================================
# Strategy Comparison
# ============================================================================

def comparison_frame(reports: Sequence[dict]) -> pd.DataFrame:
    """Strategy x {clean, missing_1..m, ratio} from EvalReport dictionaries."""
    rows = []
    for report in reports:
        row = {'strategy': report['strategy'], 'clean': report['clean_accuracy']}
        for i, acc in enumerate(report['missing_accuracy'], start=1):
            row[f"missing_{i}"] = acc
        row['ratio'] = report['robustness_ratio']
        rows.append(row)
    return pd.DataFrame(rows)


def write_comparison_csv(frame: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', newline='', encoding='utf-8') as f:
        f.write(COMPARISON_SCHEMA + '\n')
        frame.to_csv(f, index=False, float_format='%.6f', lineterminator='\n')
    return path


def export_excel(sheets: Dict[str, pd.DataFrame], path: Union[str, Path]) -> Path:
    """One worksheet per frame with a bold header and widened columns."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with pd.ExcelWriter(path, engine='xlsxwriter') as writer:
        header_format = writer.book.add_format({'bold': True, 'bg_color': '#ecf0f1', 'border': 1})
        for name, frame in sheets.items():
            sheet_name = name[:31]
            frame.to_excel(writer, sheet_name=sheet_name, index=False)
            worksheet = writer.sheets[sheet_name]
            for col, column in enumerate(frame.columns):
                worksheet.write(0, col, column, header_format)
                widths = [len(str(column))] + [len(_cell(v)) for v in frame[column].head(200)]
                worksheet.set_column(col, col, min(max(widths) + 2, 40))
    logger.info(f"Wrote Excel workbook {path}")
    return path
