#!/usr/bin/env python3
"""
Synthetic Dataset Generation
Seeded generators for multimodal datasets with controllable complementarity:

- two-modality latent-overlap family (overlap alpha, rejection margin delta)
- m-modality family with an anchor modality and a pairwise label rule
- remix pairing of two labeled pools under a rounded Gaussian label shift
- sampling from an exact DiscreteJoint with one-hot modality blocks

Datasets persist as a JSON manifest plus little-endian float64 and uint16
payloads; the manifest records the generating config so every split can be
regenerated exactly.
"""

import hashlib
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from discrete_oracle import DiscreteJoint
from errors import ConfigError, GenerationError, LoadError, StructuralError
from numeric_core import (derive_seed, make_rng, read_manifest, read_payload,
                          write_manifest, write_payload)


logger = logging.getLogger('complementarity.datagen')

DATASET_FORMAT = 'multimodal-dataset v1'
SPLITS = ('train', 'val')

# Stream keys for derive_seed
_PROJECTIONS, _SAMPLES, _SPLIT, _POOL_A, _POOL_B, _REMIX = range(6)


# ============================================================================
# Configuration Types
# ============================================================================

def _from_mapping(cls, data: dict):
    known = {f.name for f in fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        raise ConfigError(unknown[0], f"not a {cls.__name__} field")
    return cls(**data)


def _check_common(n: int, train_frac: float, seed: int, delta: Optional[float] = None,
                  alpha: Optional[float] = None):
    if delta is not None and not 0 <= delta < 1:
        raise ConfigError('delta', f"must lie in [0, 1), got {delta}")
    if alpha is not None and not 0 <= alpha <= 1:
        raise ConfigError('alpha', f"must lie in [0, 1], got {alpha}")
    if int(n) < 2:
        raise ConfigError('n', f"must be at least 2, got {n}")
    if not 0 < train_frac < 1:
        raise ConfigError('train_frac', f"must lie in (0, 1), got {train_frac}")
    if int(seed) < 0:
        raise ConfigError('seed', f"must be nonnegative, got {seed}")


@dataclass(frozen=True)
class TwoModalConfig:
    d: int = 50
    d1: int = 200
    d2: int = 100
    delta: float = 0.25
    alpha: float = 0.0
    n: int = 5000
    train_frac: float = 0.8
    seed: int = 0
    max_attempts: int = 10000

    def __post_init__(self):
        for name in ('d', 'd1', 'd2', 'max_attempts'):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        _check_common(self.n, self.train_frac, self.seed, self.delta, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'TwoModalConfig':
        return _from_mapping(cls, data)


@dataclass(frozen=True)
class MultiModalConfig:
    m: int = 4
    d: int = 50
    d1: int = 50
    delta: float = 0.25
    alpha: float = 0.0
    n: int = 10000
    train_frac: float = 0.8
    seed: int = 0
    label_rule: str = 'default'
    max_attempts: int = 10000

    def __post_init__(self):
        if int(self.m) < 2:
            raise ConfigError('m', f"needs at least 2 modalities, got {self.m}")
        for name in ('d', 'd1', 'max_attempts'):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.label_rule not in LABEL_RULES:
            raise ConfigError('label_rule', f"unknown rule '{self.label_rule}', "
                                            f"expected one of {sorted(LABEL_RULES)}")
        _check_common(self.n, self.train_frac, self.seed, self.delta, self.alpha)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'MultiModalConfig':
        return _from_mapping(cls, data)


@dataclass(frozen=True)
class RemixConfig:
    sigma: float = 1.0
    num_classes: int = 10
    seed: int = 0

    def __post_init__(self):
        if not self.sigma >= 0:
            raise ConfigError('sigma', f"must be nonnegative, got {self.sigma}")
        if int(self.num_classes) < 2:
            raise ConfigError('num_classes', f"must be at least 2, got {self.num_classes}")
        if int(self.seed) < 0:
            raise ConfigError('seed', f"must be nonnegative, got {self.seed}")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'RemixConfig':
        return _from_mapping(cls, data)


@dataclass(frozen=True)
class PoolConfig:
    """Class-conditional Gaussian pools standing in for the two labeled item pools."""

    num_classes: int = 10
    per_class: int = 500
    dim_a: int = 32
    dim_b: int = 32
    separation: float = 1.0
    noise: float = 1.0
    train_frac: float = 0.8
    seed: int = 0

    def __post_init__(self):
        for name in ('num_classes', 'per_class', 'dim_a', 'dim_b'):
            if int(getattr(self, name)) <= 0:
                raise ConfigError(name, f"must be positive, got {getattr(self, name)}")
        if self.noise < 0 or self.separation < 0:
            raise ConfigError('noise' if self.noise < 0 else 'separation', "must be nonnegative")
        _check_common(self.num_classes * self.per_class, self.train_frac, self.seed)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'PoolConfig':
        return _from_mapping(cls, data)


@dataclass
class GenerationStats:
    accepted: int = 0
    rejections: int = 0
    discards: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


# ============================================================================
# Dataset Container
# ============================================================================

@dataclass(eq=False)
class MultiModalDataset:
    """
    Aligned modality matrices (rows are examples) with integer labels.

    latents holds the internal unit-norm latents of instrumented generation;
    it is never persisted.
    """

    modalities: List[np.ndarray]
    labels: np.ndarray
    num_classes: int
    split: str = 'train'
    provenance: dict = field(default_factory=dict)
    latents: Optional[List[np.ndarray]] = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.modalities:
            raise StructuralError("dataset needs at least one modality")
        self.modalities = [np.asarray(mat, dtype=np.float64) for mat in self.modalities]
        self.labels = np.asarray(self.labels, dtype=np.int64).ravel()
        n = self.labels.size
        for i, mat in enumerate(self.modalities):
            if mat.ndim != 2 or mat.shape[0] != n:
                raise StructuralError(f"modality {i} has shape {mat.shape}, expected {n} rows")
            if not np.all(np.isfinite(mat)):
                raise StructuralError(f"modality {i} has non-finite entries")
        if n and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise StructuralError(f"labels outside [0, {self.num_classes})")
        if self.split not in SPLITS:
            raise StructuralError(f"split must be one of {SPLITS}, got '{self.split}'")

    @property
    def n_rows(self) -> int:
        return int(self.labels.size)

    @property
    def n_modalities(self) -> int:
        return len(self.modalities)

    @property
    def dims(self) -> List[int]:
        return [int(mat.shape[1]) for mat in self.modalities]

    def block(self, indices: Sequence[int]) -> np.ndarray:
        """Concatenate the listed modalities column-wise."""
        indices = list(indices)
        if not indices:
            return np.zeros((self.n_rows, 0))
        for i in indices:
            if not 0 <= i < self.n_modalities:
                raise StructuralError(f"modality index {i} out of range [0, {self.n_modalities})")
        return np.concatenate([self.modalities[i] for i in indices], axis=1)

    def rows(self, index: np.ndarray) -> 'MultiModalDataset':
        latents = None if self.latents is None else [lat[index] for lat in self.latents]
        return MultiModalDataset([mat[index] for mat in self.modalities], self.labels[index],
                                 self.num_classes, self.split, dict(self.provenance), latents)

    def with_labels(self, labels: np.ndarray) -> 'MultiModalDataset':
        return MultiModalDataset(list(self.modalities), labels, self.num_classes, self.split,
                                 dict(self.provenance))

    def class_histogram(self) -> List[int]:
        return [int(c) for c in np.bincount(self.labels, minlength=self.num_classes)]


def _split(modalities: List[np.ndarray], labels: np.ndarray, num_classes: int,
           train_frac: float, seed: int, provenance: dict,
           latents: Optional[List[np.ndarray]] = None) -> Tuple[MultiModalDataset, MultiModalDataset]:
    """Seeded permutation, then the first int(n * train_frac) rows form the train split."""
    n = labels.size
    order = make_rng(derive_seed(seed, _SPLIT)).permutation(n)
    n_train = int(n * train_frac)
    parts = []
    for name, index in (('train', order[:n_train]), ('val', order[n_train:])):
        prov = dict(provenance)
        prov['split'] = {'name': name, 'train_rows': n_train, 'val_rows': n - n_train}
        parts.append(MultiModalDataset(
            [mat[index] for mat in modalities], labels[index], num_classes, name, prov,
            None if latents is None else [lat[index] for lat in latents],
        ))
    return parts[0], parts[1]


def _digest(matrix: np.ndarray) -> dict:
    data = np.ascontiguousarray(matrix, dtype='<f8')
    return {'shape': list(matrix.shape), 'sha256': hashlib.sha256(data.tobytes()).hexdigest()}


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)


# ============================================================================
# Two-Modality Generator
# ============================================================================

def two_modal_projections(cfg: TwoModalConfig) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """P_X (d1 x d), P_Z (d2 x d) and the latent mixing P (d x d), drawn in that order."""
    rng = make_rng(derive_seed(cfg.seed, _PROJECTIONS))
    p_x = rng.uniform(-0.5, 0.5, size=(cfg.d1, cfg.d))
    p_z = rng.uniform(-0.5, 0.5, size=(cfg.d2, cfg.d))
    p = rng.uniform(-0.5, 0.5, size=(cfg.d, cfg.d))
    return p_x, p_z, p


class _QuotaSampler:
    """
    Shared rejection loop of the latent generators.

    Draws an anchor once per sample, then redraws only the non-anchor latents
    until the label score clears the margin, so the anchor keeps its marginal.
    When the anchor fixes every other latent (full overlap) a rejection starts
    over from a fresh anchor instead. max_attempts bounds the draws per sample.
    Accepted samples of an already-full class are discarded.
    """

    def __init__(self, n: int, delta: float, max_attempts: int, anchor_fixes_rest: bool = False,
                 show_progress: bool = False):
        self.quota = [n // 2, n - n // 2]
        self.delta = delta
        self.max_attempts = max_attempts
        self.anchor_fixes_rest = anchor_fixes_rest
        self.show_progress = show_progress
        self.stats = GenerationStats()

    def run(self, draw_anchor: Callable[[], object],
            draw_rest: Callable[[object], Tuple[float, object]]) -> List[Tuple[int, object]]:
        counts = [0, 0]
        emitted: List[Tuple[int, object]] = []
        total = sum(self.quota)
        with tqdm(total=total, desc="Generating", unit="samples", disable=not self.show_progress) as pbar:
            while len(emitted) < total:
                attempts = 0
                anchor = draw_anchor()
                while True:
                    attempts += 1
                    if attempts > self.max_attempts:
                        raise GenerationError(
                            f"rejection budget of {self.max_attempts} attempts exhausted "
                            f"with delta={self.delta}"
                        )
                    score, sample = draw_rest(anchor)
                    if abs(score) > self.delta:
                        break
                    self.stats.rejections += 1
                    if self.anchor_fixes_rest:
                        anchor = draw_anchor()
                label = int(score > 0)
                if counts[label] >= self.quota[label]:
                    self.stats.discards += 1
                    continue
                counts[label] += 1
                emitted.append((label, sample))
                self.stats.accepted += 1
                pbar.update(1)
        return emitted


def gen_two_modal(cfg: TwoModalConfig, show_progress: bool = False,
                  return_latents: bool = False) -> Tuple[MultiModalDataset, MultiModalDataset]:
    """
    Generate the two-modality latent-overlap family.

    Per sample: x, z ~ N(0, I_d); z <- (1 - alpha) z + alpha x; z <- P z; both
    normalized; rejected while |x.z| <= delta; y = 1 iff x.z > 0. The emitted
    pair is (P_X x, P_Z z). Classes receive exactly floor(n/2) and ceil(n/2)
    samples.

    Args:
        cfg: Generator configuration
        show_progress: Show a tqdm bar
        return_latents: Attach the internal unit latents (x, z) to both splits

    Returns:
        Tuple of (train, val) datasets
    """
    p_x, p_z, p = two_modal_projections(cfg)
    rng = make_rng(derive_seed(cfg.seed, _SAMPLES))
    alpha = cfg.alpha

    def draw_anchor():
        return rng.standard_normal(cfg.d)

    def draw_rest(x):
        z = rng.standard_normal(cfg.d)
        z = p @ ((1.0 - alpha) * z + alpha * x)
        x_hat, z_hat = _unit(x), _unit(z)
        return float(x_hat @ z_hat), (x_hat, z_hat)

    sampler = _QuotaSampler(cfg.n, cfg.delta, cfg.max_attempts, alpha >= 1.0, show_progress)
    emitted = sampler.run(draw_anchor, draw_rest)

    labels = np.array([label for label, _ in emitted], dtype=np.int64)
    x_lat = np.stack([s[0] for _, s in emitted])
    z_lat = np.stack([s[1] for _, s in emitted])
    modalities = [x_lat @ p_x.T, z_lat @ p_z.T]

    provenance = {
        'generator': 'two_modal',
        'config': cfg.to_dict(),
        'projections': {'p_x': _digest(p_x), 'p_z': _digest(p_z), 'p': _digest(p)},
        'stats': sampler.stats.to_dict(),
    }
    logger.info(f"two_modal alpha={cfg.alpha} n={cfg.n}: {sampler.stats.rejections} rejections, "
                f"{sampler.stats.discards} discards")
    latents = [x_lat, z_lat] if return_latents else None
    return _split(modalities, labels, 2, cfg.train_frac, cfg.seed, provenance, latents)


# ============================================================================
# m-Modality Generator
# ============================================================================

def default_label_rule(latents: Sequence[np.ndarray]) -> float:
    """(x1 + x2) . (x3 + x4); defined for exactly four modalities."""
    if len(latents) != 4:
        raise StructuralError(
            f"default label rule needs exactly 4 modalities, got {len(latents)}; "
            f"use the paired_sum rule for other even counts"
        )
    return float((latents[0] + latents[1]) @ (latents[2] + latents[3]))


def paired_sum_rule(latents: Sequence[np.ndarray]) -> float:
    """(x_1 + ... + x_{m/2}) . (x_{m/2+1} + ... + x_m) for even m."""
    m = len(latents)
    if m % 2:
        raise StructuralError(f"paired_sum rule needs an even modality count, got {m}")
    half = m // 2
    return float(np.sum(latents[:half], axis=0) @ np.sum(latents[half:], axis=0))


LABEL_RULES: Dict[str, Callable[[Sequence[np.ndarray]], float]] = {
    'default': default_label_rule,
    'paired_sum': paired_sum_rule,
}


def multi_modal_projections(cfg: MultiModalConfig) -> Tuple[List[np.ndarray], List[np.ndarray]]:
    """Mixing P_2..P_m (d x d) then output Q_1..Q_m (d1 x d), drawn in that order."""
    rng = make_rng(derive_seed(cfg.seed, _PROJECTIONS))
    mixing = [rng.uniform(-0.5, 0.5, size=(cfg.d, cfg.d)) for _ in range(cfg.m - 1)]
    outputs = [rng.uniform(-0.5, 0.5, size=(cfg.d1, cfg.d)) for _ in range(cfg.m)]
    return mixing, outputs


def gen_multi_modal(cfg: MultiModalConfig, label_rule: Optional[Callable] = None,
                    show_progress: bool = False,
                    return_latents: bool = False) -> Tuple[MultiModalDataset, MultiModalDataset]:
    """
    Generate the m-modality family with x_1 as the anchor.

    For i >= 2: x_i <- P_i((1 - alpha) x_i + alpha x_1); every latent is
    normalized and the label is the sign of the label rule, rejected while its
    magnitude is <= delta. Outputs are Q_i x_i.

    A callable label_rule overrides cfg.label_rule; such datasets record
    'custom' and cannot be regenerated from their manifest.
    """
    rule = label_rule or LABEL_RULES[cfg.label_rule]
    if label_rule is None and cfg.label_rule == 'default' and cfg.m != 4:
        raise StructuralError(f"default label rule is defined for m=4 only, got m={cfg.m}")

    mixing, outputs = multi_modal_projections(cfg)
    rng = make_rng(derive_seed(cfg.seed, _SAMPLES))
    alpha = cfg.alpha

    def draw_anchor():
        return rng.standard_normal(cfg.d)

    def draw_rest(x1):
        lat = [_unit(x1)]
        for p_i in mixing:
            x_i = rng.standard_normal(cfg.d)
            lat.append(_unit(p_i @ ((1.0 - alpha) * x_i + alpha * x1)))
        return rule(lat), lat

    sampler = _QuotaSampler(cfg.n, cfg.delta, cfg.max_attempts, alpha >= 1.0, show_progress)
    emitted = sampler.run(draw_anchor, draw_rest)

    labels = np.array([label for label, _ in emitted], dtype=np.int64)
    latents = [np.stack([s[i] for _, s in emitted]) for i in range(cfg.m)]
    modalities = [lat @ q.T for lat, q in zip(latents, outputs)]

    config = cfg.to_dict()
    if label_rule is not None:
        config['label_rule'] = 'custom'
    provenance = {
        'generator': 'multi_modal',
        'config': config,
        'projections': {
            'mixing': [_digest(p_i) for p_i in mixing],
            'outputs': [_digest(q) for q in outputs],
        },
        'stats': sampler.stats.to_dict(),
    }
    logger.info(f"multi_modal m={cfg.m} alpha={cfg.alpha} n={cfg.n}: "
                f"{sampler.stats.rejections} rejections, {sampler.stats.discards} discards")
    return _split(modalities, labels, 2, cfg.train_frac, cfg.seed, provenance,
                  latents if return_latents else None)


# ============================================================================
# Remix Pairing
# ============================================================================

def round_half_away(values):
    """Round to the nearest integer, ties away from zero (2.5 -> 3, -2.5 -> -3)."""
    v = np.asarray(values, dtype=np.float64)
    out = np.sign(v) * np.floor(np.abs(v) + 0.5)
    return out.astype(np.int64) if out.ndim else int(out)


def make_class_pool(num_classes: int, per_class: int, dim: int, seed: int,
                    separation: float = 1.0, noise: float = 1.0) -> Tuple[np.ndarray, np.ndarray]:
    """Labeled pool of class-conditional Gaussians: items (N x dim) and labels, class-major."""
    rng = make_rng(seed)
    means = rng.normal(0.0, separation, size=(num_classes, dim))
    labels = np.repeat(np.arange(num_classes, dtype=np.int64), per_class)
    items = means[labels] + noise * rng.standard_normal((labels.size, dim))
    return items, labels


@dataclass
class RemixResult:
    items_a: np.ndarray
    items_b: np.ndarray
    labels: np.ndarray
    source_labels: np.ndarray
    partner_labels: np.ndarray
    shifts: np.ndarray


def remix_pairs(items_a: np.ndarray, labels_a: np.ndarray, items_b: np.ndarray,
                labels_b: np.ndarray, cfg: RemixConfig) -> RemixResult:
    """
    Pair every item of pool A with a pool-B partner under a rounded Gaussian shift.

    For an A item of class x: shift = round(N(0, sigma)); y = (x + shift) mod C;
    the partner is uniform over pool-B items of class y; the new label is
    t = round((x + y) / 2). Rounding is half away from zero.
    """
    labels_a = np.asarray(labels_a, dtype=np.int64)
    labels_b = np.asarray(labels_b, dtype=np.int64)
    c = cfg.num_classes
    if labels_a.size != len(items_a) or labels_b.size != len(items_b):
        raise StructuralError("pool items and labels differ in length")
    by_class = [np.flatnonzero(labels_b == k) for k in range(c)]
    for k, members in enumerate(by_class):
        if members.size == 0:
            raise GenerationError(f"pool B has no items of class {k}")

    rng = make_rng(derive_seed(cfg.seed, _REMIX))
    shifts = round_half_away(rng.normal(0.0, cfg.sigma, size=labels_a.size)) \
        if cfg.sigma > 0 else np.zeros(labels_a.size, dtype=np.int64)
    shifts = np.atleast_1d(shifts)
    partner_labels = np.mod(labels_a + shifts, c)
    partners = np.array([by_class[y][rng.integers(by_class[y].size)] for y in partner_labels],
                        dtype=np.int64)
    new_labels = np.atleast_1d(round_half_away((labels_a + partner_labels) / 2.0))
    return RemixResult(
        items_a=np.asarray(items_a, dtype=np.float64),
        items_b=np.asarray(items_b, dtype=np.float64)[partners],
        labels=new_labels.astype(np.int64),
        source_labels=labels_a,
        partner_labels=partner_labels,
        shifts=shifts,
    )


def _shift_probabilities(sigma: float) -> Dict[int, float]:
    if sigma == 0:
        return {0: 1.0}
    reach = int(math.ceil(8 * sigma)) + 1
    cdf = lambda v: 0.5 * (1.0 + math.erf(v / (sigma * math.sqrt(2.0))))  # noqa: E731
    return {k: cdf(k + 0.5) - cdf(k - 0.5) for k in range(-reach, reach + 1)}


def remix_label_distribution(source_probs: Sequence[float], sigma: float,
                             num_classes: int) -> np.ndarray:
    """
    Exact distribution of the remixed label given the class law of pool A.

    Enumerates (x, shift) pairs over the rounded-Gaussian buckets; mass beyond
    eight standard deviations is ignored.
    """
    source = np.asarray(source_probs, dtype=np.float64)
    if source.size != num_classes:
        raise StructuralError(f"source_probs has {source.size} entries for {num_classes} classes")
    out = np.zeros(num_classes)
    for k, mass in _shift_probabilities(sigma).items():
        for x in range(num_classes):
            y = (x + k) % num_classes
            out[round_half_away((x + y) / 2.0)] += source[x] * mass
    return out / out.sum()


def gen_remix(pool_cfg: PoolConfig, remix_cfg: RemixConfig) -> Tuple[MultiModalDataset, MultiModalDataset]:
    """Build two pools, remix every pool-A item, and split the paired dataset."""
    if pool_cfg.num_classes != remix_cfg.num_classes:
        raise ConfigError('num_classes', f"pool has {pool_cfg.num_classes} classes, "
                                         f"remix expects {remix_cfg.num_classes}")
    items_a, labels_a = make_class_pool(pool_cfg.num_classes, pool_cfg.per_class, pool_cfg.dim_a,
                                        derive_seed(pool_cfg.seed, _POOL_A),
                                        pool_cfg.separation, pool_cfg.noise)
    items_b, labels_b = make_class_pool(pool_cfg.num_classes, pool_cfg.per_class, pool_cfg.dim_b,
                                        derive_seed(pool_cfg.seed, _POOL_B),
                                        pool_cfg.separation, pool_cfg.noise)
    result = remix_pairs(items_a, labels_a, items_b, labels_b, remix_cfg)
    provenance = {
        'generator': 'remix',
        'config': {'pool': pool_cfg.to_dict(), 'remix': remix_cfg.to_dict()},
        'stats': {'shift_histogram': {str(k): int(v) for k, v in
                                      zip(*np.unique(result.shifts, return_counts=True))}},
    }
    logger.info(f"remix sigma={remix_cfg.sigma}: {result.labels.size} pairs, "
                f"{int(np.count_nonzero(result.shifts))} shifted")
    return _split([result.items_a, result.items_b], result.labels, remix_cfg.num_classes,
                  pool_cfg.train_frac, pool_cfg.seed, provenance)


# ============================================================================
# Sampling From An Exact Joint
# ============================================================================

def gen_from_joint(joint: DiscreteJoint, n: int, seed: int = 0,
                   train_frac: float = 0.8) -> Tuple[MultiModalDataset, MultiModalDataset]:
    """Sample (x, z, y) atoms and embed X and Z as one-hot modality blocks."""
    _check_common(n, train_frac, seed)
    nx, nz, ny = joint.cardinalities
    rng = make_rng(derive_seed(seed, _SAMPLES))
    atoms = rng.choice(joint.probs.size, size=int(n), p=joint.probs.ravel())
    x, z, y = np.unravel_index(atoms, joint.probs.shape)
    modalities = [np.eye(nx)[x], np.eye(nz)[z]]
    provenance = {
        'generator': 'joint',
        'config': {
            'cardinalities': [nx, nz, ny],
            'probs': [float(v) for v in joint.probs.ravel()],
            'n': int(n),
            'seed': int(seed),
            'train_frac': float(train_frac),
        },
    }
    return _split(modalities, y.astype(np.int64), ny, train_frac, seed, provenance)


# ============================================================================
# Persistence
# ============================================================================

def save_dataset(ds: MultiModalDataset, path: Union[str, Path]) -> Path:
    """
    Write `<stem>.json` + `<stem>.f64` (modality-major, row-major) + `<stem>.u16` labels.

    Returns:
        Path of the manifest
    """
    if ds.num_classes > 65536:
        raise StructuralError("labels do not fit the uint16 payload")
    manifest_path = Path(path).with_suffix('.json')
    features_path = manifest_path.with_suffix('.f64')
    labels_path = manifest_path.with_suffix('.u16')
    flat = np.concatenate([mat.ravel(order='C') for mat in ds.modalities])
    features_digest = write_payload(features_path, flat, '<f8')
    labels_digest = write_payload(labels_path, ds.labels, '<u2')
    write_manifest(manifest_path, {
        'format': DATASET_FORMAT,
        'split': ds.split,
        'num_classes': int(ds.num_classes),
        'rows': ds.n_rows,
        'dims': ds.dims,
        'class_histogram': ds.class_histogram(),
        'provenance': ds.provenance,
        'features': {'file': features_path.name, 'sha256': features_digest},
        'labels': {'file': labels_path.name, 'sha256': labels_digest},
    })
    logger.info(f"Saved {ds.split} split ({ds.n_rows} rows, dims {ds.dims}) to {manifest_path}")
    return manifest_path


def load_dataset(path: Union[str, Path]) -> MultiModalDataset:
    manifest_path = Path(path).with_suffix('.json')
    manifest = read_manifest(manifest_path)
    if manifest.get('format') != DATASET_FORMAT:
        raise LoadError(f"{manifest_path.name} is not a {DATASET_FORMAT} manifest")
    try:
        rows = int(manifest['rows'])
        dims = [int(d) for d in manifest['dims']]
        num_classes = int(manifest['num_classes'])
        features = manifest['features']
        labels_info = manifest['labels']
    except (KeyError, TypeError, ValueError) as e:
        raise LoadError(f"malformed dataset manifest {manifest_path.name}: {e}")

    base = manifest_path.parent
    flat = read_payload(base / features['file'], '<f8', rows * sum(dims), features.get('sha256'))
    labels = read_payload(base / labels_info['file'], '<u2', rows, labels_info.get('sha256'))

    modalities, pos = [], 0
    for d in dims:
        modalities.append(flat[pos:pos + rows * d].reshape(rows, d))
        pos += rows * d
    try:
        return MultiModalDataset(modalities, labels.astype(np.int64), num_classes,
                                 manifest.get('split', 'train'), manifest.get('provenance', {}))
    except StructuralError as e:
        raise LoadError(f"dataset {manifest_path.name}: {e}")


def generate_from_provenance(provenance: dict,
                             show_progress: bool = False) -> Tuple[MultiModalDataset, MultiModalDataset]:
    """Rerun the generator recorded in a provenance block; returns (train, val)."""
    generator = provenance.get('generator')
    config = provenance.get('config', {})
    if generator == 'two_modal':
        return gen_two_modal(TwoModalConfig.from_dict(config), show_progress)
    if generator == 'multi_modal':
        if config.get('label_rule') == 'custom':
            raise LoadError("dataset used a custom label rule and cannot be regenerated")
        return gen_multi_modal(MultiModalConfig.from_dict(config), show_progress=show_progress)
    if generator == 'remix':
        return gen_remix(PoolConfig.from_dict(config['pool']), RemixConfig.from_dict(config['remix']))
    if generator == 'joint':
        shape = tuple(config['cardinalities'])
        joint = DiscreteJoint(np.asarray(config['probs']).reshape(shape))
        return gen_from_joint(joint, config['n'], config['seed'], config['train_frac'])
    raise LoadError(f"unknown generator '{generator}' in provenance")


def regenerate(source: Union[str, Path, dict]) -> MultiModalDataset:
    """Rebuild the split described by a manifest path or loaded manifest."""
    manifest = read_manifest(Path(source).with_suffix('.json')) if not isinstance(source, dict) else source
    provenance = manifest.get('provenance', manifest)
    train, val = generate_from_provenance(provenance)
    split = provenance.get('split', {}).get('name', manifest.get('split', 'train'))
    return train if split == 'train' else val
