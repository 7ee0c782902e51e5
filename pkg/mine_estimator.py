#!/usr/bin/env python3
"""
MINE Estimator
Donsker-Varadhan lower-bound estimation of I(A; B) and I(A; B, Y) with
MLP critics. The marginal term pairs every row of A with a deranged row of
(B, Y) from the same batch.
"""

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from errors import DivergenceError, LoadError, NumericError, StructuralError
from numeric_core import (MlpParams, MlpSpec, OptimizerSettings, backward, derive_seed,
                          forward, init_optimizer, init_params, log_mean_exp, make_rng,
                          one_hot, optimizer_step, read_manifest, softmax, write_manifest)


logger = logging.getLogger('complementarity.mine')

ESTIMATE_FORMAT = 'mi-estimate v1'

# Stream keys for derive_seed
_INIT, _BATCHES, _VAL_PERM = range(3)


# ============================================================================
# Critic And Training Configuration
# ============================================================================

@dataclass(frozen=True)
class CriticSpec:
    """
    Scalar critic over (a, b), optionally with a one-hot label entering mid-network.

    dim_b may be zero, which estimates I(A; Y) with the label as the only
    second argument.
    """

    mlp: MlpSpec
    dim_a: int
    dim_b: int
    num_classes: int = 0

    def __post_init__(self):
        if self.mlp.output_dim != 1:
            raise StructuralError(f"critic output dim must be 1, got {self.mlp.output_dim}")
        if self.mlp.input_dim != self.dim_a + self.dim_b:
            raise StructuralError(
                f"critic input dim {self.mlp.input_dim} != dim_a {self.dim_a} + dim_b {self.dim_b}"
            )
        if self.mlp.label_dim != self.num_classes:
            raise StructuralError(
                f"critic label slot {self.mlp.label_dim} != num_classes {self.num_classes}"
            )
        if self.dim_b == 0 and self.num_classes == 0:
            raise StructuralError("critic needs a second argument: dim_b > 0 or a label")

    @property
    def with_label(self) -> bool:
        return self.num_classes > 0

    def to_dict(self) -> dict:
        return {'mlp': self.mlp.to_dict(), 'dim_a': self.dim_a, 'dim_b': self.dim_b,
                'num_classes': self.num_classes}


def critic_from_layout(dim_a: int, dim_b: int, hidden: Sequence[int], num_classes: int = 0,
                       concat_after: Optional[int] = None) -> CriticSpec:
    """
    Build a critic from a preset hidden layout.

    With a label, the one-hot vector is appended to the output of linear
    layer `concat_after` (1-based); it defaults to the second-to-last hidden
    layer so that one activated layer mixes the label with the trunk.
    """
    hidden = [int(h) for h in hidden]
    if not hidden:
        raise StructuralError("critic layout needs at least one hidden layer")
    dims = (dim_a + dim_b, *hidden, 1)
    if num_classes:
        if len(hidden) < 2:
            raise StructuralError("a label critic needs a hidden layer after the label slot")
        at = len(hidden) - 1 if concat_after is None else int(concat_after)
        mlp = MlpSpec(dims, 'elu', label_concat_at=at, label_dim=num_classes)
    else:
        mlp = MlpSpec(dims, 'elu')
    return CriticSpec(mlp, dim_a, dim_b, num_classes)


@dataclass(frozen=True)
class MineTrainConfig:
    epochs: int = 500
    batch_size: int = 100
    optimizer: OptimizerSettings = field(
        default_factory=lambda: OptimizerSettings('adam', 1e-3, weight_decay=2e-4))
    eval_window_frac: float = 0.1
    clamp_nonnegative: bool = False
    replicates: int = 3
    seed: int = 0
    ema_rate: Optional[float] = None

    def __post_init__(self):
        if self.epochs < 1:
            raise StructuralError("epochs must be positive")
        if self.batch_size < 2:
            raise StructuralError("batch_size must be at least 2")
        if not 0 < self.eval_window_frac <= 1:
            raise StructuralError("eval_window_frac must lie in (0, 1]")
        if self.replicates < 1:
            raise StructuralError("replicates must be positive")
        if self.ema_rate is not None and not 0 < self.ema_rate < 1:
            raise StructuralError("ema_rate must lie in (0, 1)")

    @property
    def window(self) -> int:
        return max(1, math.ceil(self.eval_window_frac * self.epochs))

    def to_dict(self) -> dict:
        data = asdict(self)
        data['optimizer'] = self.optimizer.to_dict()
        return data


@dataclass
class MiEstimate:
    """Aggregated DV estimate in nats; value is the mean over replicate values."""

    value: float
    curve: List[float]
    replicate_values: List[float]
    mean: float
    std: float
    term: Optional[str] = None
    curves: List[List[float]] = field(default_factory=list)
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> 'MiEstimate':
        return cls(**data)


# ============================================================================
# DV Objective
# ============================================================================

def dv_objective(joint_scores: np.ndarray, marginal_scores: np.ndarray) -> float:
    """mean(T_joint) - log(mean(exp(T_marginal)))."""
    joint = np.asarray(joint_scores, dtype=np.float64).ravel()
    if joint.size == 0 or np.size(marginal_scores) == 0:
        raise StructuralError("dv_objective needs nonempty score vectors")
    if not np.all(np.isfinite(joint)):
        raise NumericError("non-finite joint score")
    return float(joint.mean() - log_mean_exp(marginal_scores))


def derangement(n: int, rng: np.random.Generator) -> np.ndarray:
    """Random permutation with every fixed point swapped to a random other slot."""
    if n < 2:
        raise StructuralError(f"marginal shuffle needs at least 2 rows, got {n}")
    perm = rng.permutation(n)
    for i in np.flatnonzero(perm == np.arange(n)):
        if perm[i] != i:
            continue
        j = int(rng.integers(n - 1))
        j += j >= i
        perm[i], perm[j] = perm[j], perm[i]
    return perm


def marginal_resample(samples_a: np.ndarray, samples_b: np.ndarray,
                      seed: Union[int, np.random.Generator]) -> Tuple[np.ndarray, np.ndarray]:
    """Pair a with a deranged b; the a column is returned untouched."""
    a = np.asarray(samples_a)
    b = np.asarray(samples_b)
    if len(a) != len(b):
        raise StructuralError("marginal_resample needs equal row counts")
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    return a, b[derangement(len(b), rng)]


def _critic_inputs(critic: CriticSpec, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return a if critic.dim_b == 0 else np.concatenate([a, b], axis=1)


def _stacked_batch(critic: CriticSpec, a: np.ndarray, b: np.ndarray, y: Optional[np.ndarray],
                   perm: np.ndarray) -> Tuple[np.ndarray, Optional[np.ndarray]]:
    """Joint rows followed by marginal rows; (b, y) moves as one block."""
    inputs = np.concatenate([_critic_inputs(critic, a, b), _critic_inputs(critic, a, b[perm])])
    labels = None if y is None else np.concatenate([y, y[perm]])
    return inputs, labels


def evaluate_dv(critic: CriticSpec, params: MlpParams, a: np.ndarray, b: np.ndarray,
                labels_onehot: Optional[np.ndarray], permutation: np.ndarray) -> float:
    """One full-split DV evaluation under a fixed marginal permutation."""
    inputs, labels = _stacked_batch(critic, a, b, labels_onehot, permutation)
    scores, _ = forward(critic.mlp, params, inputs, labels)
    n = len(a)
    return dv_objective(scores[:n, 0], scores[n:, 0])


# ============================================================================
# Training
# ============================================================================

def _prepare(critic: CriticSpec, a, b, labels) -> Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]]:
    a = np.asarray(a, dtype=np.float64)
    if a.ndim == 1:
        a = a[:, None]
    b = np.zeros((len(a), 0)) if b is None else np.asarray(b, dtype=np.float64)
    if b.ndim == 1:
        b = b[:, None]
    if len(a) != len(b):
        raise StructuralError(f"row counts differ: a has {len(a)}, b has {len(b)}")
    if a.shape[1] != critic.dim_a or b.shape[1] != critic.dim_b:
        raise StructuralError(
            f"sample dims ({a.shape[1]}, {b.shape[1]}) do not match critic "
            f"({critic.dim_a}, {critic.dim_b})"
        )
    if (labels is None) == critic.with_label:
        raise StructuralError("labels must be given exactly when the critic takes a label")
    y = None
    if labels is not None:
        labels = np.asarray(labels)
        if len(labels) != len(a):
            raise StructuralError("labels and samples differ in length")
        y = one_hot(labels, critic.num_classes)
    return a, b, y


def _train_replicate(critic: CriticSpec, cfg: MineTrainConfig, seed: int,
                     train: Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]],
                     val: Tuple[np.ndarray, np.ndarray, Optional[np.ndarray]],
                     label: str, show_progress: bool) -> List[float]:
    a, b, y = train
    va, vb, vy = val
    n = len(a)
    params = init_params(critic.mlp, derive_seed(seed, _INIT))
    opt = init_optimizer(cfg.optimizer, params)
    batch_rng = make_rng(derive_seed(seed, _BATCHES))
    val_perm = derangement(len(va), make_rng(derive_seed(seed, _VAL_PERM)))
    log_ema = None
    curve = []

    epochs = tqdm(range(cfg.epochs), desc=f"Estimating {label}", unit="epoch",
                  disable=not show_progress, leave=False)
    for epoch in epochs:
        opt = opt.at_epoch(epoch)
        order = batch_rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            m = len(idx)
            if m < 2:
                continue
            perm = derangement(m, batch_rng)
            inputs, labels = _stacked_batch(critic, a[idx], b[idx],
                                            None if y is None else y[idx], perm)
            scores, cache = forward(critic.mlp, params, inputs, labels)
            t_joint, t_marg = scores[:m, 0], scores[m:, 0]
            if not (np.all(np.isfinite(t_joint)) and np.all(np.isfinite(t_marg))):
                raise DivergenceError("critic scores became non-finite", epoch=epoch)

            grad = np.empty_like(scores)
            grad[:m, 0] = -1.0 / m
            if cfg.ema_rate is None:
                grad[m:, 0] = softmax(t_marg)
            else:
                lme = log_mean_exp(t_marg)
                log_ema = lme if log_ema is None else np.logaddexp(
                    math.log(cfg.ema_rate) + log_ema, math.log(1.0 - cfg.ema_rate) + lme)
                grad[m:, 0] = np.exp(t_marg - log_ema) / m

            grads, _ = backward(critic.mlp, params, cache, grad)
            try:
                params, opt = optimizer_step(opt, params, grads)
            except NumericError as e:
                raise DivergenceError(str(e), epoch=epoch)

        try:
            value = evaluate_dv(critic, params, va, vb, vy, val_perm)
        except NumericError:
            value = math.nan
        if not math.isfinite(value):
            raise DivergenceError("DV objective became non-finite", epoch=epoch)
        curve.append(value)
        epochs.set_postfix(dv=f"{value:.4f}")
    return curve


def train_mi(samples_a: np.ndarray, samples_b: Optional[np.ndarray], labels: Optional[np.ndarray],
             critic: CriticSpec, cfg: MineTrainConfig,
             val_a: Optional[np.ndarray] = None, val_b: Optional[np.ndarray] = None,
             val_labels: Optional[np.ndarray] = None, term: Optional[str] = None,
             show_progress: bool = False) -> MiEstimate:
    """
    Estimate I(A; B) (or I(A; B, Y) when the critic takes a label).

    Each replicate trains a fresh critic by minibatch ascent on the DV
    objective and evaluates the full validation split after every epoch with
    one fixed derangement. The replicate value is the median of the last
    `cfg.window` evaluations, clamped at zero if requested; the estimate value
    is the mean over replicates.

    Args:
        samples_a, samples_b, labels: Training rows; samples_b may be None for I(A; Y)
        critic: Critic matching the sample dims
        cfg: Training configuration
        val_a, val_b, val_labels: Evaluation rows; the training rows are used when absent
        term: Name carried by the estimate and by any DivergenceError

    Returns:
        MiEstimate
    """
    train = _prepare(critic, samples_a, samples_b, labels)
    if val_a is None:
        val = train
    else:
        val = _prepare(critic, val_a, val_b, val_labels)
    if len(train[0]) < 2 or len(val[0]) < 2:
        raise StructuralError("train_mi needs at least 2 training and 2 evaluation rows")

    label = term or 'MI'
    replicate_values, curves = [], []
    for r in range(cfg.replicates):
        try:
            curve = _train_replicate(critic, cfg, derive_seed(cfg.seed, r), train, val,
                                     label, show_progress)
        except DivergenceError as e:
            raise e.tagged(label) if term else e
        value = float(np.median(curve[-cfg.window:]))
        if cfg.clamp_nonnegative:
            value = max(0.0, value)
        replicate_values.append(value)
        curves.append(curve)
        logger.debug(f"{label} replicate {r}: {value:.4f} nats")

    values = np.asarray(replicate_values)
    std = float(values.std(ddof=1)) if values.size > 1 else 0.0
    mean = float(values.mean())
    logger.info(f"{label}: {mean:.4f} +- {std:.4f} nats over {values.size} replicates")
    return MiEstimate(value=mean, curve=curves[0], replicate_values=replicate_values, mean=mean,
                      std=std, term=term, curves=curves,
                      config={'critic': critic.to_dict(), 'train': cfg.to_dict()})


# ============================================================================
# Persistence
# ============================================================================

def save_estimate(estimate: MiEstimate, path: Union[str, Path]) -> Path:
    path = Path(path)
    write_manifest(path, {'format': ESTIMATE_FORMAT, 'estimate': estimate.to_dict()})
    return path


def load_estimate(path: Union[str, Path]) -> MiEstimate:
    data = read_manifest(path)
    if data.get('format') != ESTIMATE_FORMAT or 'estimate' not in data:
        raise LoadError(f"{path} is not an {ESTIMATE_FORMAT} file")
    try:
        return MiEstimate.from_dict(data['estimate'])
    except TypeError as e:
        raise LoadError(f"malformed estimate file {path}: {e}")
