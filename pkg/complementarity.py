#!/usr/bin/env python3
"""
Complementarity
Composes MI estimates into complementary information Gamma and the
normalized complementarity metrics, for modality pairs and for arbitrary
modality subsets. An exact path over DiscreteJoint serves as ground truth.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple, Union

import numpy as np

from datagen import MultiModalDataset
from discrete_oracle import DiscreteJoint, interaction_info, mutual_info
from errors import DivergenceError, LoadError, StructuralError
from mine_estimator import MiEstimate, MineTrainConfig, critic_from_layout, train_mi
from numeric_core import read_manifest, write_manifest


logger = logging.getLogger('complementarity.report')

REPORT_FORMAT = 'complementarity-report v1'
NORMALIZER_FLOOR = 0.02
ORACLE_FLOOR = 1e-12
NORMALIZER_MODES = ('direct', 'composed')
TERMS = ('i_xz', 'i_x_yz', 'i_z_yx', 'i_sy')


# ============================================================================
# Subsets And Settings
# ============================================================================

@dataclass(frozen=True)
class SubsetSpec:
    """Zero-based modality indices of S1; S2 is the complement."""

    s1: Tuple[int, ...]

    def __post_init__(self):
        s1 = tuple(sorted(set(int(i) for i in self.s1)))
        if not s1:
            raise StructuralError("subset S1 must be nonempty")
        object.__setattr__(self, 's1', s1)

    def validate(self, n_modalities: int):
        if n_modalities < 2:
            raise StructuralError(f"complementarity needs at least 2 modalities, got {n_modalities}")
        if any(i < 0 or i >= n_modalities for i in self.s1):
            raise StructuralError(f"subset {list(self.s1)} out of range for {n_modalities} modalities")
        if len(self.s1) == n_modalities:
            raise StructuralError("subset S1 must be a proper subset of the modalities")

    def s2(self, n_modalities: int) -> Tuple[int, ...]:
        self.validate(n_modalities)
        return tuple(i for i in range(n_modalities) if i not in self.s1)

    @classmethod
    def parse(cls, text: str) -> 'SubsetSpec':
        """Parse 1-based modality numbers such as '2' or '1,3'."""
        try:
            numbers = [int(part) for part in str(text).replace(' ', '').split(',') if part]
        except ValueError:
            raise StructuralError(f"cannot parse modality subset '{text}'")
        if any(k < 1 for k in numbers):
            raise StructuralError(f"modality numbers are 1-based, got '{text}'")
        return cls(tuple(k - 1 for k in numbers))


@dataclass(frozen=True)
class EstimatorSettings:
    """
    Critic layouts and training settings shared by the four MI terms.

    hidden is the layout of label-free critics; label_hidden and
    label_concat_after describe critics that take the one-hot label.
    """

    hidden: Tuple[int, ...] = (1000, 500, 100)
    label_hidden: Tuple[int, ...] = (1000, 200, 10, 12)
    label_concat_after: Optional[int] = None
    train: MineTrainConfig = field(default_factory=MineTrainConfig)
    expected_dims: Optional[Tuple[int, ...]] = None
    parallel: int = 1
    show_progress: bool = False

    def to_dict(self) -> dict:
        return {
            'hidden': list(self.hidden),
            'label_hidden': list(self.label_hidden),
            'label_concat_after': self.label_concat_after,
            'train': self.train.to_dict(),
            'expected_dims': None if self.expected_dims is None else list(self.expected_dims),
        }


def _summary(values: Sequence[float]) -> dict:
    arr = np.asarray(values, dtype=np.float64)
    return {
        'values': [float(v) for v in arr],
        'mean': float(arr.mean()) if arr.size else float('nan'),
        'std': float(arr.std(ddof=1)) if arr.size > 1 else 0.0,
    }


# ============================================================================
# Reports
# ============================================================================

@dataclass
class ComplementarityReport:
    """
    Estimated terms, Gamma values and metrics for one dataset and subset.

    gamma_*_raw keep the signed difference of the estimates; gamma_x and
    gamma_z are clamped at zero and feed the metrics. A metric is None when
    I(S;Y) falls below the normalizer floor.
    """

    subset: List[int]
    complement: List[int]
    terms: Dict[str, MiEstimate]
    gamma_x_raw: float
    gamma_z_raw: float
    gamma_x: float
    gamma_z: float
    metric_subset: Optional[float]
    metric_pair: Optional[float]
    metric_defined: bool
    normalizer_mode: str = 'direct'
    normalizer_floor: float = NORMALIZER_FLOOR
    replicate_stats: Dict[str, dict] = field(default_factory=dict)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['terms'] = {name: est.to_dict() for name, est in self.terms.items()}
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'ComplementarityReport':
        data = dict(data)
        data['terms'] = {name: MiEstimate.from_dict(est) for name, est in data['terms'].items()}
        return cls(**data)


def _metrics(gamma_1: float, gamma_2: float, normalizer: float,
             floor: float) -> Tuple[Optional[float], Optional[float], bool]:
    if normalizer < floor:
        return None, None, False
    g1, g2 = max(0.0, gamma_1), max(0.0, gamma_2)
    return g1 / normalizer, (g1 + g2) / normalizer, True


# ============================================================================
# Estimator Path
# ============================================================================

def _term_jobs(train: MultiModalDataset, val: Optional[MultiModalDataset], subset: SubsetSpec,
               settings: EstimatorSettings, names: Sequence[str]) -> Dict[str, tuple]:
    m = train.n_modalities
    s1, s2 = subset.s1, subset.s2(m)
    everything = tuple(range(m))
    c = train.num_classes
    arguments = {
        'i_xz': (s1, s2, False),
        'i_x_yz': (s1, s2, True),
        'i_z_yx': (s2, s1, True),
        'i_sy': (everything, (), True),
    }
    jobs = {}
    for name in names:
        a_idx, b_idx, with_label = arguments[name]
        dim_a = sum(train.dims[i] for i in a_idx)
        dim_b = sum(train.dims[i] for i in b_idx)
        if with_label:
            critic = critic_from_layout(dim_a, dim_b, settings.label_hidden, c,
                                        settings.label_concat_after)
        else:
            critic = critic_from_layout(dim_a, dim_b, settings.hidden)
        labels = train.labels if with_label else None
        kwargs = {}
        if val is not None:
            kwargs = {'val_a': val.block(a_idx), 'val_b': val.block(b_idx) if b_idx else None,
                      'val_labels': val.labels if with_label else None}
        jobs[name] = (train.block(a_idx), train.block(b_idx) if b_idx else None, labels,
                      critic, kwargs)
    return jobs


def estimate_terms(train: MultiModalDataset, subset: SubsetSpec, settings: EstimatorSettings,
                   val: Optional[MultiModalDataset] = None,
                   names: Sequence[str] = TERMS) -> Dict[str, MiEstimate]:
    """
    Train one estimator per requested term, concurrently up to settings.parallel.

    Results come back in request order; a divergence in any term is re-raised
    tagged with that term's name.
    """
    subset.validate(train.n_modalities)
    if settings.expected_dims is not None and list(settings.expected_dims) != train.dims:
        raise StructuralError(
            f"dataset dims {train.dims} do not match critic preset dims {list(settings.expected_dims)}"
        )
    if val is not None and val.dims != train.dims:
        raise StructuralError(f"validation dims {val.dims} differ from training dims {train.dims}")

    jobs = _term_jobs(train, val, subset, settings, names)

    def run(name):
        a, b, labels, critic, kwargs = jobs[name]
        try:
            return train_mi(a, b, labels, critic, settings.train, term=name,
                            show_progress=settings.show_progress, **kwargs)
        except DivergenceError as e:
            raise e.tagged(name)

    with ThreadPoolExecutor(max_workers=max(1, settings.parallel)) as executor:
        futures = [(name, executor.submit(run, name)) for name in names]
        return {name: future.result() for name, future in futures}


class GammaEstimate(NamedTuple):
    raw: float
    clamped: float
    terms: Dict[str, MiEstimate]


def estimate_gamma(train: MultiModalDataset, subset: SubsetSpec, settings: EstimatorSettings,
                   val: Optional[MultiModalDataset] = None) -> GammaEstimate:
    """
    Gamma_{S1} = I(S1; Y, S2) - I(S1; S2).

    Returns:
        GammaEstimate with the signed difference in nats, its value clamped at
        zero, and the two term estimates
    """
    terms = estimate_terms(train, subset, settings, val, names=('i_xz', 'i_x_yz'))
    raw = terms['i_x_yz'].value - terms['i_xz'].value
    return GammaEstimate(raw, max(0.0, raw), terms)


def estimate_complementarity(train: MultiModalDataset, subset: SubsetSpec,
                             settings: EstimatorSettings,
                             val: Optional[MultiModalDataset] = None,
                             normalizer_mode: str = 'direct',
                             floor: float = NORMALIZER_FLOOR) -> ComplementarityReport:
    """
    Estimate all four terms and assemble the report.

    metric_subset = Gamma_{S1} / I(S;Y) and metric_pair = (Gamma_{S1} +
    Gamma_{S2}) / I(S;Y), where I(S;Y) comes from a critic over all
    modalities with the label entering mid-network.
    """
    if normalizer_mode not in NORMALIZER_MODES:
        raise StructuralError(f"unknown normalizer mode '{normalizer_mode}'")
    if normalizer_mode == 'composed':
        raise StructuralError("normalizer mode 'composed' needs a conditional MI estimator, "
                              "which this toolkit does not provide; use 'direct'")

    terms = estimate_terms(train, subset, settings, val)
    i_xz, i_x_yz, i_z_yx, i_sy = (terms[name] for name in TERMS)
    gamma_x_raw = i_x_yz.value - i_xz.value
    gamma_z_raw = i_z_yx.value - i_xz.value
    metric_subset, metric_pair, defined = _metrics(gamma_x_raw, gamma_z_raw, i_sy.value, floor)

    replicates = {'gamma_x': [], 'gamma_z': [], 'metric_subset': [], 'metric_pair': []}
    for r in range(len(i_xz.replicate_values)):
        g_x = i_x_yz.replicate_values[r] - i_xz.replicate_values[r]
        g_z = i_z_yx.replicate_values[r] - i_xz.replicate_values[r]
        replicates['gamma_x'].append(g_x)
        replicates['gamma_z'].append(g_z)
        sub, pair, ok = _metrics(g_x, g_z, i_sy.replicate_values[r], floor)
        if ok:
            replicates['metric_subset'].append(sub)
            replicates['metric_pair'].append(pair)
    replicate_stats = {name: _summary(values) for name, values in replicates.items()}
    for name in TERMS:
        replicate_stats[name] = _summary(terms[name].replicate_values)

    report = ComplementarityReport(
        subset=list(subset.s1),
        complement=list(subset.s2(train.n_modalities)),
        terms=terms,
        gamma_x_raw=gamma_x_raw,
        gamma_z_raw=gamma_z_raw,
        gamma_x=max(0.0, gamma_x_raw),
        gamma_z=max(0.0, gamma_z_raw),
        metric_subset=metric_subset,
        metric_pair=metric_pair,
        metric_defined=defined,
        normalizer_mode=normalizer_mode,
        normalizer_floor=floor,
        replicate_stats=replicate_stats,
    )
    if defined:
        logger.info(f"S1={report.subset}: Gamma_x={gamma_x_raw:.4f} Gamma_z={gamma_z_raw:.4f} "
                    f"metric_subset={metric_subset:.4f} metric_pair={metric_pair:.4f}")
    else:
        logger.warning(f"S1={report.subset}: I(S;Y)={i_sy.value:.4f} below floor {floor}, "
                       f"metrics undefined")
    return report


# ============================================================================
# Exact Path
# ============================================================================

@dataclass
class OracleComplementarity:
    """Exact terms and metrics of a DiscreteJoint, with S1 one of its two inputs."""

    subset: str
    i_xz: float
    i_x_yz: float
    i_z_yx: float
    i_sy: float
    interaction: float
    gamma_x: float
    gamma_z: float
    metric_subset: Optional[float]
    metric_pair: Optional[float]
    metric_defined: bool

    def to_dict(self) -> dict:
        return asdict(self)


def oracle_complementarity(joint: DiscreteJoint, subset: str = 'x',
                           floor: float = ORACLE_FLOOR) -> OracleComplementarity:
    """
    Exact counterpart of estimate_complementarity.

    subset 'x' takes S1 = X; 'z' swaps the roles so S1 = Z.
    """
    if subset not in ('x', 'z'):
        raise StructuralError(f"oracle subset must be 'x' or 'z', got {subset!r}")
    other = 'z' if subset == 'x' else 'x'
    i_xz = mutual_info(joint, 'x', 'z')
    i_x_yz = mutual_info(joint, subset, 'y' + other)
    i_z_yx = mutual_info(joint, other, 'y' + subset)
    i_sy = mutual_info(joint, 'xz', 'y')
    gamma_1 = mutual_info(joint, subset, 'y', given=other)
    gamma_2 = mutual_info(joint, other, 'y', given=subset)
    metric_subset, metric_pair, defined = _metrics(gamma_1, gamma_2, i_sy, floor)
    return OracleComplementarity(
        subset=subset,
        i_xz=i_xz,
        i_x_yz=i_x_yz,
        i_z_yx=i_z_yx,
        i_sy=i_sy,
        interaction=interaction_info(joint),
        gamma_x=gamma_1,
        gamma_z=gamma_2,
        metric_subset=metric_subset,
        metric_pair=metric_pair,
        metric_defined=defined,
    )


# ============================================================================
# Persistence
# ============================================================================

def save_report(report: ComplementarityReport, path: Union[str, Path],
                context: Optional[dict] = None) -> Path:
    path = Path(path)
    write_manifest(path, {'format': REPORT_FORMAT, 'report': report.to_dict(),
                          'context': context or {}})
    return path


def load_report(path: Union[str, Path]) -> ComplementarityReport:
    data = read_manifest(path)
    if data.get('format') != REPORT_FORMAT or 'report' not in data:
        raise LoadError(f"{path} is not a {REPORT_FORMAT} file")
    try:
        return ComplementarityReport.from_dict(data['report'])
    except (KeyError, TypeError) as e:
        raise LoadError(f"malformed report {path}: {e}")
