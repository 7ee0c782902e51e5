#!/usr/bin/env python3
"""
Discrete Oracle
Exact information-theoretic quantities over small joint laws P(X, Z, Y) and
exhaustive checks of the Bayes-error bounds stated in terms of H(Y|X,Z) and
the complementary information Gamma.

All logarithms are natural (nats).
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Tuple, Union

import numpy as np
from tqdm import tqdm

from errors import LoadError, StructuralError
from numeric_core import make_rng, read_manifest, write_manifest


logger = logging.getLogger('complementarity.oracle')

AXES = {'x': 0, 'z': 1, 'y': 2}
DEFAULT_CAP = 16
SUM_TOLERANCE = 1e-12
CLAMP_TOLERANCE = 1e-12
BOUND_SLACK = 1e-9
JOINT_FORMAT = 'discrete-joint v1'

VariableSet = Union[str, Iterable[str]]


# ============================================================================
# Joint Distribution
# ============================================================================

@dataclass
class DiscreteJoint:
    """
    Exact finite joint distribution of (X, Z, Y), indexed probs[x, z, y].

    y_values optionally assigns a real value to each label for the regression
    bounds; y_interval declares the range those values must lie in.
    """

    probs: np.ndarray
    y_values: Optional[np.ndarray] = None
    y_interval: Tuple[float, float] = (-1.0, 1.0)
    cap: int = DEFAULT_CAP

    def __post_init__(self):
        p = np.asarray(self.probs, dtype=np.float64)
        if p.ndim != 3:
            raise StructuralError(f"joint must be 3-dimensional (x, z, y), got shape {p.shape}")
        if any(n < 1 or n > self.cap for n in p.shape):
            raise StructuralError(f"cardinalities {p.shape} outside [1, {self.cap}]")
        if np.any(p < 0) or not np.all(np.isfinite(p)):
            raise StructuralError("joint has negative or non-finite entries")
        if abs(p.sum() - 1.0) > SUM_TOLERANCE:
            raise StructuralError(f"joint sums to {p.sum():.15f}, not 1")
        self.probs = p

        if self.y_values is not None:
            yv = np.asarray(self.y_values, dtype=np.float64).ravel()
            if yv.size != p.shape[2]:
                raise StructuralError(f"y_values has {yv.size} entries for |Y| = {p.shape[2]}")
            lo, hi = self.y_interval
            if np.any(yv < lo) or np.any(yv > hi):
                raise StructuralError(f"y_values outside the declared interval [{lo}, {hi}]")
            self.y_values = yv
        self.y_interval = (float(self.y_interval[0]), float(self.y_interval[1]))

    @property
    def cardinalities(self) -> Tuple[int, int, int]:
        return tuple(self.probs.shape)

    @property
    def n_labels(self) -> int:
        return self.probs.shape[2]


def _axes(variables: VariableSet) -> Tuple[int, ...]:
    names = [variables] if isinstance(variables, str) and len(variables) == 1 else list(variables)
    axes = []
    for name in names:
        if name not in AXES:
            raise StructuralError(f"unknown variable '{name}', expected x, z or y")
        axes.append(AXES[name])
    return tuple(sorted(set(axes)))


def marginal(joint: DiscreteJoint, variables: VariableSet) -> np.ndarray:
    keep = _axes(variables)
    drop = tuple(a for a in range(3) if a not in keep)
    return joint.probs.sum(axis=drop) if drop else joint.probs


def _entropy_of(p: np.ndarray) -> float:
    p = p[p > 0]
    return float(-(p * np.log(p)).sum())


# ============================================================================
# Information Quantities
# ============================================================================

def entropy(joint: DiscreteJoint, variables: VariableSet) -> float:
    """Joint entropy of a nonempty subset of {x, z, y}; 0 log 0 counts as 0."""
    axes = _axes(variables)
    if not axes:
        raise StructuralError("entropy needs a nonempty variable subset")
    return _entropy_of(marginal(joint, variables))


def _h(joint: DiscreteJoint, axes: Tuple[int, ...]) -> float:
    if not axes:
        return 0.0
    names = ''.join('xzy'[a] for a in axes)
    return entropy(joint, names)


def mutual_info(joint: DiscreteJoint, a: VariableSet, b: VariableSet,
                given: Optional[VariableSet] = None) -> float:
    """
    I(A; B | C) via entropy decomposition H(A,C) + H(B,C) - H(A,B,C) - H(C).

    Round-off negatives within 1e-12 of zero are clamped to zero.
    """
    ax_a, ax_b = set(_axes(a)), set(_axes(b))
    ax_c = set(_axes(given)) if given else set()
    if not ax_a or not ax_b:
        raise StructuralError("mutual_info needs nonempty variable subsets")
    if ax_a & ax_b or ax_a & ax_c or ax_b & ax_c:
        raise StructuralError("mutual_info variable subsets must be disjoint")

    value = (_h(joint, tuple(sorted(ax_a | ax_c))) + _h(joint, tuple(sorted(ax_b | ax_c)))
             - _h(joint, tuple(sorted(ax_a | ax_b | ax_c))) - _h(joint, tuple(sorted(ax_c))))
    if -CLAMP_TOLERANCE < value < 0:
        value = 0.0
    return value


def conditional_entropy(joint: DiscreteJoint, target: VariableSet, given: VariableSet) -> float:
    ax_t, ax_g = set(_axes(target)), set(_axes(given))
    return _h(joint, tuple(sorted(ax_t | ax_g))) - _h(joint, tuple(sorted(ax_g)))


def interaction_info(joint: DiscreteJoint) -> float:
    """I(X;Y;Z) = I(X;Y) - I(X;Y|Z); negative values mean synergy."""
    return mutual_info(joint, 'x', 'y') - mutual_info(joint, 'x', 'y', given='z')


def complementary_info(joint: DiscreteJoint, which: str) -> float:
    """Gamma_X = I(X;Y|Z) or Gamma_Z = I(Z;Y|X)."""
    if which == 'x':
        return mutual_info(joint, 'x', 'y', given='z')
    if which == 'z':
        return mutual_info(joint, 'z', 'y', given='x')
    raise StructuralError(f"complementary_info expects 'x' or 'z', got {which!r}")


# ============================================================================
# Bayes Errors
# ============================================================================

def _surviving_cells(joint: DiscreteJoint, missing: Optional[str]) -> np.ndarray:
    """Joint of (observed inputs..., y) flattened to (cells, |Y|)."""
    p = joint.probs
    if missing is None:
        return p.reshape(-1, p.shape[2])
    if missing == 'x':
        return p.sum(axis=0)
    if missing == 'z':
        return p.sum(axis=1)
    raise StructuralError(f"missing modality must be 'x', 'z' or None, got {missing!r}")


def bayes_classifier(joint: DiscreteJoint, missing: Optional[str] = None) -> np.ndarray:
    """Bayes-optimal label per observed cell; ties go to the lowest label."""
    cells = _surviving_cells(joint, missing)
    table = np.argmax(cells, axis=1)
    if missing is None:
        return table.reshape(joint.probs.shape[:2])
    return table


def bayes_error_classification(joint: DiscreteJoint, missing: Optional[str] = None) -> float:
    """
    P_ec = E[1 - max_y P(y | observed)].

    `missing` names the absent modality; the error then conditions only on
    the surviving one. Zero-probability cells contribute nothing.
    """
    cells = _surviving_cells(joint, missing)
    error = 1.0 - float(cells.max(axis=1).sum())
    return min(1.0, max(0.0, error))


def _conditional_means(cells: np.ndarray, y_values: np.ndarray) -> np.ndarray:
    mass = cells.sum(axis=1)
    means = np.zeros_like(mass)
    nz = mass > 0
    means[nz] = (cells[nz] @ y_values) / mass[nz]
    return means


def bayes_error_regression(joint: DiscreteJoint, missing: Optional[str] = None) -> float:
    """P_er = E[(Y - E[Y | observed])^2]."""
    if joint.y_values is None:
        raise StructuralError("regression Bayes error needs y_values")
    cells = _surviving_cells(joint, missing)
    means = _conditional_means(cells, joint.y_values)
    residual = joint.y_values[None, :] - means[:, None]
    return float((cells * residual ** 2).sum())


def regression_gap(joint: DiscreteJoint) -> float:
    """E[(E[Y|x] - E[Y|x,z])^2], the exact gap between P_er^Miss and P_er."""
    if joint.y_values is None:
        raise StructuralError("regression gap needs y_values")
    p = joint.probs
    full = _conditional_means(p.reshape(-1, p.shape[2]), joint.y_values).reshape(p.shape[:2])
    partial = _conditional_means(p.sum(axis=1), joint.y_values)
    weights = p.sum(axis=2)
    return float((weights * (partial[:, None] - full) ** 2).sum())


# ============================================================================
# Bound Verification
# ============================================================================

@dataclass
class BoundReport:
    """Both sides of every bound for one joint, plus the quantities feeding them."""

    h_y_given_xz: float
    h_y_given_x: float
    gamma_x: float
    gamma_z: float
    i_xz: float
    i_xyz: float
    i_xz_y: float
    p_ec: float
    p_ec_miss: float
    n_labels: int
    eq1_lower: float
    eq1_upper: float
    eq2_lower: float
    eq2_upper: float
    eq1_satisfied: bool
    eq2_satisfied: bool
    lower_bounds_vacuous: bool
    p_er: Optional[float] = None
    p_er_miss: Optional[float] = None
    gap: Optional[float] = None
    gap_identity_residual: Optional[float] = None
    half_gamma: Optional[float] = None
    two_gamma: Optional[float] = None
    gap_le_half_gamma: Optional[bool] = None
    gap_le_two_gamma: Optional[bool] = None

    def to_dict(self) -> dict:
        return asdict(self)


def verify_bounds(joint: DiscreteJoint) -> BoundReport:
    """
    Evaluate the classification bounds

        (H(Y|X,Z) - ln 2) / ln|Y| <= P_ec <= 1 - exp(-H(Y|X,Z))
        (H(Y|X,Z) + Gamma_Z - ln 2) / ln|Y| <= P_ec^Miss <= 1 - exp(-H(Y|X,Z) - Gamma_Z)

    where P_ec^Miss predicts from X alone (Z missing), and, when y_values are
    present, the regression gap against both 1/2 Gamma_Z and 2 Gamma_Z. The
    1/2 constant is recorded, never asserted.
    """
    h_xz = conditional_entropy(joint, 'y', 'xz')
    h_x = conditional_entropy(joint, 'y', 'x')
    gamma_x = complementary_info(joint, 'x')
    gamma_z = complementary_info(joint, 'z')
    p_ec = bayes_error_classification(joint)
    p_ec_miss = bayes_error_classification(joint, missing='z')
    n_labels = joint.n_labels

    if n_labels > 1:
        log_y = math.log(n_labels)
        eq1_lower = (h_xz - math.log(2)) / log_y
        eq2_lower = (h_xz + gamma_z - math.log(2)) / log_y
        vacuous = False
    else:
        eq1_lower = eq2_lower = -math.inf
        vacuous = True
    eq1_upper = 1.0 - math.exp(-h_xz)
    eq2_upper = 1.0 - math.exp(-h_xz - gamma_z)

    report = BoundReport(
        h_y_given_xz=h_xz,
        h_y_given_x=h_x,
        gamma_x=gamma_x,
        gamma_z=gamma_z,
        i_xz=mutual_info(joint, 'x', 'z'),
        i_xyz=interaction_info(joint),
        i_xz_y=mutual_info(joint, 'xz', 'y'),
        p_ec=p_ec,
        p_ec_miss=p_ec_miss,
        n_labels=n_labels,
        eq1_lower=eq1_lower,
        eq1_upper=eq1_upper,
        eq2_lower=eq2_lower,
        eq2_upper=eq2_upper,
        eq1_satisfied=eq1_lower - BOUND_SLACK <= p_ec <= eq1_upper + BOUND_SLACK,
        eq2_satisfied=eq2_lower - BOUND_SLACK <= p_ec_miss <= eq2_upper + BOUND_SLACK,
        lower_bounds_vacuous=vacuous,
    )

    if joint.y_values is not None:
        p_er = bayes_error_regression(joint)
        p_er_miss = bayes_error_regression(joint, missing='z')
        gap = p_er_miss - p_er
        report.p_er = p_er
        report.p_er_miss = p_er_miss
        report.gap = gap
        report.gap_identity_residual = abs(gap - regression_gap(joint))
        report.half_gamma = 0.5 * gamma_z
        report.two_gamma = 2.0 * gamma_z
        report.gap_le_half_gamma = gap <= report.half_gamma + BOUND_SLACK
        report.gap_le_two_gamma = gap <= report.two_gamma + BOUND_SLACK

    return report


@dataclass
class BoundCheckSummary:
    """Aggregate of verify_bounds over many randomized joints."""

    joints: int = 0
    eq1_violations: int = 0
    eq2_violations: int = 0
    two_gamma_violations: int = 0
    half_gamma_exceedances: int = 0
    regression_joints: int = 0
    max_chain_rule_residual: float = 0.0
    max_gamma_identity_residual: float = 0.0
    max_decomposition_residual: float = 0.0
    max_gap_identity_residual: float = 0.0
    max_gap_to_half_gamma_ratio: float = 0.0
    examples: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def identity_residuals(joint: DiscreteJoint) -> Dict[str, float]:
    """Residuals of the chain rule, the Gamma identity and the Gamma decomposition."""
    chain = abs(mutual_info(joint, 'x', 'yz')
                - (mutual_info(joint, 'x', 'z') + mutual_info(joint, 'x', 'y', given='z')))
    gamma_z = complementary_info(joint, 'z')
    gamma_identity = abs(gamma_z - (conditional_entropy(joint, 'y', 'x')
                                    - conditional_entropy(joint, 'y', 'xz')))
    decomposition = abs(complementary_info(joint, 'x') + gamma_z + interaction_info(joint)
                        - mutual_info(joint, 'xz', 'y'))
    return {'chain_rule': chain, 'gamma_identity': gamma_identity, 'decomposition': decomposition}


def verify_many(count: int, cap: int = 6, seed: int = 0, with_y_values: bool = True,
                min_cardinality: int = 2, keep_examples: int = 5,
                show_progress: bool = False) -> BoundCheckSummary:
    """
    Run verify_bounds and the identity checks over `count` Dirichlet-random joints.

    Args:
        count: Number of joints (0 gives an empty summary)
        cap: Maximum |X|, |Z|, |Y|
        seed: Seed of the joint stream
        with_y_values: Also draw y_values in [-1, 1] and check the regression bounds
        min_cardinality: Minimum alphabet size per variable
        keep_examples: How many 1/2-Gamma exceedances to keep verbatim

    Returns:
        BoundCheckSummary
    """
    summary = BoundCheckSummary()
    rng = make_rng(seed)
    for _ in tqdm(range(count), desc="Verifying bounds", unit="joints", disable=not show_progress):
        joint = random_joint(rng, cap=cap, with_y_values=with_y_values,
                             min_cardinality=min_cardinality)
        report = verify_bounds(joint)
        residuals = identity_residuals(joint)
        summary.joints += 1
        summary.max_chain_rule_residual = max(summary.max_chain_rule_residual, residuals['chain_rule'])
        summary.max_gamma_identity_residual = max(summary.max_gamma_identity_residual,
                                                  residuals['gamma_identity'])
        summary.max_decomposition_residual = max(summary.max_decomposition_residual,
                                                 residuals['decomposition'])
        if not report.eq1_satisfied:
            summary.eq1_violations += 1
        if not report.eq2_satisfied:
            summary.eq2_violations += 1
        if report.gap is not None:
            summary.regression_joints += 1
            summary.max_gap_identity_residual = max(summary.max_gap_identity_residual,
                                                    report.gap_identity_residual)
            if not report.gap_le_two_gamma:
                summary.two_gamma_violations += 1
            if not report.gap_le_half_gamma:
                summary.half_gamma_exceedances += 1
                if len(summary.examples) < keep_examples:
                    summary.examples.append({'cardinalities': list(joint.cardinalities),
                                             'gap': report.gap, 'half_gamma': report.half_gamma})
            if report.half_gamma > 0:
                summary.max_gap_to_half_gamma_ratio = max(summary.max_gap_to_half_gamma_ratio,
                                                          report.gap / report.half_gamma)
    logger.info(f"Verified {summary.joints} joints: eq1 violations {summary.eq1_violations}, "
                f"eq2 violations {summary.eq2_violations}, "
                f"2*Gamma violations {summary.two_gamma_violations}, "
                f"1/2*Gamma exceedances {summary.half_gamma_exceedances}")
    return summary


# ============================================================================
# Reference Joints
# ============================================================================

def random_joint(rng: np.random.Generator, cap: int = 6, with_y_values: bool = False,
                 min_cardinality: int = 2) -> DiscreteJoint:
    """Dirichlet(1, ..., 1) joint over all atoms with alphabet sizes in [min_cardinality, cap]."""
    nx, nz, ny = (int(rng.integers(min_cardinality, cap + 1)) for _ in range(3))
    probs = rng.dirichlet(np.ones(nx * nz * ny)).reshape(nx, nz, ny)
    # Dirichlet draws sum to 1 only up to round-off
    probs = probs / probs.sum()
    y_values = rng.uniform(-1.0, 1.0, size=ny) if with_y_values else None
    return DiscreteJoint(probs, y_values=y_values, cap=max(cap, DEFAULT_CAP))


def _from_atoms(shape: Tuple[int, int, int], atoms: Dict[Tuple[int, int, int], float],
                y_values=None, y_interval=(-1.0, 1.0)) -> DiscreteJoint:
    probs = np.zeros(shape)
    for idx, mass in atoms.items():
        probs[idx] += mass
    return DiscreteJoint(probs, y_values=y_values, y_interval=y_interval)


def xor_joint() -> DiscreteJoint:
    """X, Z independent fair bits, Y = X xor Z."""
    return _from_atoms((2, 2, 2), {(x, z, x ^ z): 0.25 for x in range(2) for z in range(2)})


def copy_joint(k: int = 2) -> DiscreteJoint:
    """Y = X = Z uniform over k symbols."""
    return _from_atoms((k, k, k), {(s, s, s): 1.0 / k for s in range(k)})


def uniform_independent_joint(n_labels: int = 4, nx: int = 2, nz: int = 2) -> DiscreteJoint:
    """Y uniform and independent of uniform (X, Z)."""
    probs = np.full((nx, nz, n_labels), 1.0 / (nx * nz * n_labels))
    return DiscreteJoint(probs)


def label_copies_z_joint(y_values=(-1.0, 1.0), y_interval=(-1.0, 1.0)) -> DiscreteJoint:
    """X independent fair bit, Z fair bit, Y = Z; with y_values {-1, 1} this breaks the 1/2 constant."""
    return _from_atoms((2, 2, 2), {(x, z, z): 0.25 for x in range(2) for z in range(2)},
                       y_values=np.asarray(y_values, dtype=np.float64), y_interval=y_interval)


def label_is_x_joint(k: int = 2) -> DiscreteJoint:
    """Y = X uniform over k symbols, Z an independent uniform noise symbol."""
    return _from_atoms((k, k, k), {(x, z, x): 1.0 / (k * k) for x in range(k) for z in range(k)})


# ============================================================================
# Import / Export
# ============================================================================

def save_joint(joint: DiscreteJoint, path: Union[str, Path]) -> Path:
    """Cardinalities, optional y_values, and probabilities flattened in (x, z, y) row-major order."""
    path = Path(path)
    write_manifest(path, {
        'format': JOINT_FORMAT,
        'cardinalities': list(joint.cardinalities),
        'y_values': None if joint.y_values is None else [float(v) for v in joint.y_values],
        'y_interval': list(joint.y_interval),
        'probs': [float(v) for v in joint.probs.ravel(order='C')],
    })
    return path


def load_joint(path: Union[str, Path], cap: int = DEFAULT_CAP) -> DiscreteJoint:
    data = read_manifest(path)
    if data.get('format') != JOINT_FORMAT:
        raise LoadError(f"{path} is not a {JOINT_FORMAT} file")
    try:
        shape = tuple(int(n) for n in data['cardinalities'])
        probs = np.asarray(data['probs'], dtype=np.float64)
    except (KeyError, TypeError, ValueError) as e:
        raise LoadError(f"malformed joint file {path}: {e}")
    if len(shape) != 3 or probs.size != int(np.prod(shape)):
        raise LoadError(f"joint file {path}: {probs.size} probabilities for cardinalities {shape}")
    try:
        return DiscreteJoint(probs.reshape(shape), y_values=data.get('y_values'),
                             y_interval=tuple(data.get('y_interval', (-1.0, 1.0))), cap=cap)
    except StructuralError as e:
        raise LoadError(f"joint file {path}: {e}")
