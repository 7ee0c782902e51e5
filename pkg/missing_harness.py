#!/usr/bin/env python3
"""
Missing-Modality Harness
Late-fusion classifiers, five training strategies and the zero-fill
missing-modality evaluation.

Strategies:
- Naive: concat-linear fusion trained on complete inputs
- MultiTask: fusion loss plus weighted per-modality auxiliary losses
- MissingAug: Naive trained on randomly dropped (zero-filled) modalities
- MissingDetect: auxiliary heads with an extra "missing" class
- UmeMma: per-modality pre-training, then a logit-average ensemble
  fine-tuned under missing-modality augmentation
"""

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from tqdm import tqdm

from datagen import MultiModalDataset
from errors import DivergenceError, LoadError, NumericError, StructuralError
from numeric_core import (MlpParams, MlpSpec, OptimizerSettings, backward, derive_seed, elu,
                          elu_grad, forward, init_optimizer, init_params, make_rng,
                          optimizer_step, read_manifest, read_payload, softmax_cross_entropy,
                          write_manifest, write_payload)


logger = logging.getLogger('complementarity.harness')

STRATEGIES = ('Naive', 'MultiTask', 'MissingAug', 'MissingDetect', 'UmeMma')
FUSION_MODES = ('concat', 'average')
MODEL_FORMAT = 'fusion-model v1'
DEFAULT_DROP_PROB = 0.3
MAX_RESAMPLE_ROUNDS = 10000

# Stream keys for derive_seed
_INIT, _BATCHES, _TRAIN_MISSING, _PHASE2 = range(4)


# ============================================================================
# Model Description
# ============================================================================

@dataclass(frozen=True)
class FusionModelSpec:
    """
    Per-modality encoders (ELU applied to their outputs) feeding either a
    concat-linear fusion head or a logit average over auxiliary heads.
    """

    encoders: Tuple[MlpSpec, ...]
    num_classes: int
    fusion_mode: str = 'concat'
    fusion_head: Optional[MlpSpec] = None
    aux_heads: Tuple[MlpSpec, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, 'encoders', tuple(self.encoders))
        object.__setattr__(self, 'aux_heads', tuple(self.aux_heads))
        if self.fusion_mode not in FUSION_MODES:
            raise StructuralError(f"fusion mode must be one of {FUSION_MODES}, got '{self.fusion_mode}'")
        if len(self.encoders) < 2:
            raise StructuralError("fusion model needs at least 2 modality encoders")
        if self.num_classes < 2:
            raise StructuralError("fusion model needs at least 2 classes")
        for enc in self.encoders:
            if enc.label_dim:
                raise StructuralError("encoders do not take labels")

        if self.fusion_mode == 'concat':
            if self.fusion_head is None:
                raise StructuralError("concat fusion needs a fusion head")
            width = sum(enc.output_dim for enc in self.encoders)
            if self.fusion_head.input_dim != width or self.fusion_head.output_dim != self.num_classes:
                raise StructuralError(
                    f"fusion head maps {self.fusion_head.input_dim}->{self.fusion_head.output_dim}, "
                    f"expected {width}->{self.num_classes}"
                )
        elif self.fusion_head is not None:
            raise StructuralError("logit-average fusion has no fusion head")
        elif not self.aux_heads:
            raise StructuralError("logit-average fusion needs one head per modality")

        if self.aux_heads:
            if len(self.aux_heads) != len(self.encoders):
                raise StructuralError("need exactly one auxiliary head per modality")
            outs = {head.output_dim for head in self.aux_heads}
            if len(outs) != 1 or outs.pop() not in (self.num_classes, self.num_classes + 1):
                raise StructuralError(f"auxiliary heads must all output {self.num_classes} "
                                      f"or {self.num_classes + 1} classes")
            for enc, head in zip(self.encoders, self.aux_heads):
                if head.input_dim != enc.output_dim:
                    raise StructuralError(
                        f"auxiliary head input {head.input_dim} != encoder output {enc.output_dim}"
                    )

    @property
    def n_modalities(self) -> int:
        return len(self.encoders)

    @property
    def aux_outputs(self) -> int:
        return self.aux_heads[0].output_dim if self.aux_heads else 0

    @property
    def has_missing_class(self) -> bool:
        return self.aux_outputs == self.num_classes + 1

    def to_dict(self) -> dict:
        return {
            'encoders': [enc.to_dict() for enc in self.encoders],
            'num_classes': self.num_classes,
            'fusion_mode': self.fusion_mode,
            'fusion_head': None if self.fusion_head is None else self.fusion_head.to_dict(),
            'aux_heads': [head.to_dict() for head in self.aux_heads],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'FusionModelSpec':
        head = data.get('fusion_head')
        return cls(
            encoders=tuple(MlpSpec.from_dict(e) for e in data['encoders']),
            num_classes=int(data['num_classes']),
            fusion_mode=data.get('fusion_mode', 'concat'),
            fusion_head=None if head is None else MlpSpec.from_dict(head),
            aux_heads=tuple(MlpSpec.from_dict(h) for h in data.get('aux_heads', [])),
        )


def build_model_spec(dims: Sequence[int], num_classes: int, strategy: str,
                     hidden: int = 200) -> FusionModelSpec:
    """Encoders d_i -> hidden and the heads the strategy needs."""
    if strategy not in STRATEGIES:
        raise StructuralError(f"unknown strategy '{strategy}', expected one of {STRATEGIES}")
    encoders = tuple(MlpSpec((int(d), hidden)) for d in dims)
    fusion = MlpSpec((hidden * len(dims), num_classes))
    if strategy in ('Naive', 'MissingAug'):
        return FusionModelSpec(encoders, num_classes, 'concat', fusion)
    if strategy == 'MultiTask':
        return FusionModelSpec(encoders, num_classes, 'concat', fusion,
                               tuple(MlpSpec((hidden, num_classes)) for _ in dims))
    if strategy == 'MissingDetect':
        return FusionModelSpec(encoders, num_classes, 'concat', fusion,
                               tuple(MlpSpec((hidden, num_classes + 1)) for _ in dims))
    return FusionModelSpec(encoders, num_classes, 'average', None,
                           tuple(MlpSpec((hidden, num_classes)) for _ in dims))


@dataclass
class FusionParams:
    encoders: List[MlpParams]
    fusion: Optional[MlpParams] = None
    aux: List[MlpParams] = field(default_factory=list)

    def groups(self) -> Dict[str, MlpParams]:
        out = {f'enc{i}': p for i, p in enumerate(self.encoders)}
        if self.fusion is not None:
            out['fusion'] = self.fusion
        out.update({f'aux{i}': p for i, p in enumerate(self.aux)})
        return out

    def with_groups(self, updates: Dict[str, MlpParams]) -> 'FusionParams':
        encoders = [updates.get(f'enc{i}', p) for i, p in enumerate(self.encoders)]
        fusion = updates.get('fusion', self.fusion)
        aux = [updates.get(f'aux{i}', p) for i, p in enumerate(self.aux)]
        return FusionParams(encoders, fusion, aux)

    def copy(self) -> 'FusionParams':
        return FusionParams([p.copy() for p in self.encoders],
                            None if self.fusion is None else self.fusion.copy(),
                            [p.copy() for p in self.aux])


def _group_specs(spec: FusionModelSpec) -> Dict[str, MlpSpec]:
    out = {f'enc{i}': s for i, s in enumerate(spec.encoders)}
    if spec.fusion_head is not None:
        out['fusion'] = spec.fusion_head
    out.update({f'aux{i}': s for i, s in enumerate(spec.aux_heads)})
    return out


def init_fusion_params(spec: FusionModelSpec, seed: int) -> FusionParams:
    groups = {key: init_params(s, derive_seed(seed, _INIT, k))
              for k, (key, s) in enumerate(_group_specs(spec).items())}
    m = spec.n_modalities
    return FusionParams([groups[f'enc{i}'] for i in range(m)], groups.get('fusion'),
                        [groups[f'aux{i}'] for i in range(m) if f'aux{i}' in groups])


# ============================================================================
# Forward / Backward
# ============================================================================

@dataclass
class _Pass:
    enc_pre: List[Optional[np.ndarray]]
    enc_caches: list
    hidden: List[Optional[np.ndarray]]
    fusion_logits: Optional[np.ndarray]
    fusion_cache: object
    aux_logits: List[Optional[np.ndarray]]
    aux_caches: list


def _forward(spec: FusionModelSpec, params: FusionParams, inputs: Sequence[Optional[np.ndarray]],
             branches: Optional[Sequence[int]] = None, fusion: bool = True) -> _Pass:
    m = spec.n_modalities
    if len(inputs) != m:
        raise StructuralError(f"model has {m} modalities, got {len(inputs)} inputs")
    branches = range(m) if branches is None else branches
    enc_pre, enc_caches, hidden = [None] * m, [None] * m, [None] * m
    for i in branches:
        z, cache = forward(spec.encoders[i], params.encoders[i], inputs[i])
        enc_pre[i], enc_caches[i], hidden[i] = z, cache, elu(z)

    fusion_logits = fusion_cache = None
    if fusion and spec.fusion_head is not None:
        fusion_logits, fusion_cache = forward(spec.fusion_head, params.fusion,
                                              np.concatenate(hidden, axis=1))

    aux_logits, aux_caches = [None] * m, [None] * m
    if spec.aux_heads:
        for i in branches:
            aux_logits[i], aux_caches[i] = forward(spec.aux_heads[i], params.aux[i], hidden[i])
    return _Pass(enc_pre, enc_caches, hidden, fusion_logits, fusion_cache, aux_logits, aux_caches)


def _backward(spec: FusionModelSpec, params: FusionParams, fwd: _Pass,
              d_fusion: Optional[np.ndarray] = None,
              d_aux: Optional[Sequence[Optional[np.ndarray]]] = None) -> Dict[str, MlpParams]:
    """Gradients for every group the loss touched, keyed like FusionParams.groups()."""
    m = spec.n_modalities
    grads: Dict[str, MlpParams] = {}
    d_hidden: List[Optional[np.ndarray]] = [None] * m

    if d_fusion is not None:
        grads['fusion'], d_in = backward(spec.fusion_head, params.fusion, fwd.fusion_cache, d_fusion)
        bounds = np.cumsum([enc.output_dim for enc in spec.encoders])[:-1]
        for i, part in enumerate(np.split(d_in, bounds, axis=1)):
            d_hidden[i] = part

    for i, d in enumerate(d_aux or []):
        if d is None:
            continue
        grads[f'aux{i}'], d_in = backward(spec.aux_heads[i], params.aux[i], fwd.aux_caches[i], d)
        d_hidden[i] = d_in if d_hidden[i] is None else d_hidden[i] + d_in

    for i, d_h in enumerate(d_hidden):
        if d_h is None:
            continue
        d_z = d_h * elu_grad(fwd.enc_pre[i])
        grads[f'enc{i}'], _ = backward(spec.encoders[i], params.encoders[i], fwd.enc_caches[i], d_z)
    return grads


# ============================================================================
# Masking And Augmentation
# ============================================================================

def mask_modality(batch: Sequence[np.ndarray], modality_index: int) -> List[np.ndarray]:
    """Replace one modality with exact zeros; the others are returned as-is."""
    if not 0 <= modality_index < len(batch):
        raise StructuralError(f"modality index {modality_index} out of range [0, {len(batch)})")
    out = list(batch)
    out[modality_index] = np.zeros_like(np.asarray(batch[modality_index], dtype=np.float64))
    return out


def missing_aug_sample(batch: Sequence[np.ndarray], drop_probs: Sequence[float],
                       seed: Union[int, np.random.Generator],
                       forced: Optional[np.ndarray] = None) -> Tuple[List[np.ndarray], np.ndarray]:
    """
    Drop modalities independently per example, never all of them at once.

    A draw that would drop every modality is redrawn for that example.
    `forced` marks modalities already absent; they count as dropped.

    Returns:
        Tuple of (zero-filled batch, boolean drop mask of shape (rows, modalities))
    """
    m = len(batch)
    probs = np.asarray(drop_probs, dtype=np.float64)
    if probs.shape != (m,):
        raise StructuralError(f"need {m} drop probabilities, got {probs.size}")
    if np.any(probs < 0) or np.any(probs > 1):
        raise StructuralError("drop probabilities must lie in [0, 1]")
    if np.all(probs >= 1):
        raise StructuralError("all drop probabilities are 1; no modality could survive")
    n = len(batch[0])
    rng = seed if isinstance(seed, np.random.Generator) else make_rng(seed)
    forced = np.zeros((n, m), dtype=bool) if forced is None else np.asarray(forced, dtype=bool)
    if np.any(np.all(forced | (probs >= 1), axis=1)):
        raise StructuralError("an example has no modality that can survive augmentation")

    mask = (rng.random((n, m)) < probs) | forced
    bad = np.all(mask, axis=1)
    rounds = 0
    while bad.any():
        rounds += 1
        if rounds > MAX_RESAMPLE_ROUNDS:
            raise StructuralError("drop resampling did not terminate")
        mask[bad] = (rng.random((int(bad.sum()), m)) < probs) | forced[bad]
        bad = np.all(mask, axis=1)

    out = []
    for j, mat in enumerate(batch):
        mat = np.array(mat, dtype=np.float64, copy=True)
        mat[mask[:, j]] = 0.0
        out.append(mat)
    return out, mask


def train_missing_mask(n_rows: int, n_modalities: int, frac: float, seed: int) -> np.ndarray:
    """Mark a seeded fraction of rows as missing exactly one uniformly chosen modality."""
    mask = np.zeros((n_rows, n_modalities), dtype=bool)
    if frac <= 0:
        return mask
    rng = make_rng(derive_seed(seed, _TRAIN_MISSING))
    rows = np.flatnonzero(rng.random(n_rows) < frac)
    mask[rows, rng.integers(n_modalities, size=rows.size)] = True
    return mask


# ============================================================================
# Strategy Configuration And Trained Models
# ============================================================================

@dataclass(frozen=True)
class StrategyConfig:
    strategy: str = 'Naive'
    drop_probs: Optional[Tuple[float, ...]] = None
    multitask_weight: float = 1.0
    phase1: OptimizerSettings = field(default_factory=lambda: OptimizerSettings('adam', 1e-3))
    phase2: Optional[OptimizerSettings] = None
    freeze_encoders_in_phase2: bool = False
    epochs: int = 50
    phase2_epochs: int = 20
    batch_size: int = 64
    hidden: int = 200
    train_missing_frac: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise StructuralError(f"unknown strategy '{self.strategy}', expected one of {STRATEGIES}")
        if self.drop_probs is not None:
            probs = tuple(float(p) for p in self.drop_probs)
            if any(p < 0 or p >= 1 for p in probs):
                raise StructuralError(f"drop probabilities must lie in [0, 1), got {probs}")
            object.__setattr__(self, 'drop_probs', probs)
        if self.multitask_weight < 0:
            raise StructuralError("multitask_weight must be nonnegative")
        if self.epochs < 0 or self.phase2_epochs < 0:
            raise StructuralError("epoch counts must be nonnegative")
        if self.batch_size < 1:
            raise StructuralError("batch_size must be positive")
        if not 0 <= self.train_missing_frac < 1:
            raise StructuralError("train_missing_frac must lie in [0, 1)")

    def drop_probs_for(self, m: int) -> Tuple[float, ...]:
        probs = self.drop_probs or (DEFAULT_DROP_PROB,) * m
        if len(probs) == 1 and m > 1:
            probs = probs * m
        if len(probs) != m:
            raise StructuralError(f"drop_probs has {len(probs)} entries for {m} modalities")
        return probs

    @property
    def phase2_settings(self) -> OptimizerSettings:
        return self.phase2 or self.phase1.scaled(0.1)

    def to_dict(self) -> dict:
        data = asdict(self)
        data['phase1'] = self.phase1.to_dict()
        data['phase2'] = None if self.phase2 is None else self.phase2.to_dict()
        data['drop_probs'] = None if self.drop_probs is None else list(self.drop_probs)
        return data

    @classmethod
    def from_dict(cls, data: dict) -> 'StrategyConfig':
        data = dict(data)
        data['phase1'] = OptimizerSettings.from_dict(data.get('phase1') or {})
        if data.get('phase2') is not None:
            data['phase2'] = OptimizerSettings.from_dict(data['phase2'])
        if data.get('drop_probs') is not None:
            data['drop_probs'] = tuple(data['drop_probs'])
        return cls(**data)


@dataclass
class TrainedModel:
    spec: FusionModelSpec
    params: FusionParams
    strategy: StrategyConfig
    history: Dict[str, List[float]] = field(default_factory=dict)


def check_strategy(spec: FusionModelSpec, strategy: str):
    """Reject strategy/spec combinations before any training starts."""
    c = spec.num_classes
    if strategy in ('Naive', 'MissingAug'):
        if spec.fusion_mode != 'concat':
            raise StructuralError(f"{strategy} trains a concat fusion head")
    elif strategy == 'MultiTask':
        if spec.fusion_mode != 'concat' or spec.aux_outputs != c:
            raise StructuralError(f"MultiTask needs a fusion head and {c}-way auxiliary heads")
    elif strategy == 'MissingDetect':
        if spec.fusion_mode != 'concat' or not spec.has_missing_class:
            raise StructuralError(f"MissingDetect needs a fusion head and {c + 1}-way auxiliary heads")
    elif strategy == 'UmeMma':
        if spec.fusion_mode != 'average' or spec.aux_outputs != c:
            raise StructuralError(f"UmeMma needs logit-average fusion over {c}-way heads")
    else:
        raise StructuralError(f"unknown strategy '{strategy}'")


# ============================================================================
# Training
# ============================================================================

BatchLoss = Callable[[FusionParams, np.ndarray, np.random.Generator], Tuple[float, Dict[str, MlpParams]]]


def _fit(params: FusionParams, settings: OptimizerSettings, epochs: int, batch_size: int,
         n_rows: int, batch_loss: BatchLoss, seed: int, label: str,
         trainable: Optional[Sequence[str]] = None, show_progress: bool = False) -> Tuple[FusionParams, List[float]]:
    """Shared minibatch loop; only groups named in `trainable` are updated."""
    groups = params.groups()
    states = {key: init_optimizer(settings, p) for key, p in groups.items()}
    allowed = set(groups) if trainable is None else set(trainable)
    rng = make_rng(seed)
    history = []
    if n_rows == 0:
        return params, history

    bar = tqdm(range(epochs), desc=f"Training {label}", unit="epoch",
               disable=not show_progress, leave=False)
    for epoch in bar:
        states = {key: s.at_epoch(epoch) for key, s in states.items()}
        order = rng.permutation(n_rows)
        losses = []
        for start in range(0, n_rows, batch_size):
            idx = order[start:start + batch_size]
            loss, grads = batch_loss(params, idx, rng)
            if not np.isfinite(loss):
                raise DivergenceError("training loss became non-finite", epoch=epoch, term=label)
            updates = {}
            for key, grad in grads.items():
                try:
                    updates[key], states[key] = optimizer_step(states[key], groups[key], grad,
                                                               trainable=key in allowed)
                except NumericError as e:
                    raise DivergenceError(str(e), epoch=epoch, term=label)
            params = params.with_groups(updates)
            groups = params.groups()
            losses.append(loss)
        history.append(float(np.mean(losses)))
        bar.set_postfix(loss=f"{history[-1]:.4f}")
    return params, history


def _ce_subset(logits: np.ndarray, labels: np.ndarray, rows: np.ndarray) -> Tuple[float, np.ndarray]:
    """Cross-entropy over the selected rows, gradient scattered back to full size."""
    grad = np.zeros_like(logits)
    if not rows.any():
        return 0.0, grad
    loss, g = softmax_cross_entropy(logits[rows], labels[rows])
    grad[rows] = g
    return loss, grad


def train(ds: MultiModalDataset, model_spec: FusionModelSpec, strategy_cfg: StrategyConfig,
          show_progress: bool = False) -> TrainedModel:
    """
    Train a fusion model under one strategy.

    Rows marked by strategy_cfg.train_missing_frac are zero-filled in one
    modality for every strategy; UmeMma additionally keeps them out of that
    modality's pre-training and treats them as dropped in phase 2.
    """
    strategy = strategy_cfg.strategy
    check_strategy(model_spec, strategy)
    m = model_spec.n_modalities
    if ds.n_modalities != m:
        raise StructuralError(f"dataset has {ds.n_modalities} modalities, model expects {m}")
    for i, (enc, d) in enumerate(zip(model_spec.encoders, ds.dims)):
        if enc.input_dim != d:
            raise StructuralError(f"modality {i} has width {d}, encoder expects {enc.input_dim}")
    if ds.num_classes != model_spec.num_classes:
        raise StructuralError(f"dataset has {ds.num_classes} classes, model expects "
                              f"{model_spec.num_classes}")

    seed = strategy_cfg.seed
    absent = train_missing_mask(ds.n_rows, m, strategy_cfg.train_missing_frac, seed)
    data = [np.where(absent[:, [i]], 0.0, mat) for i, mat in enumerate(ds.modalities)]
    y = ds.labels
    c = model_spec.num_classes
    drop_probs = strategy_cfg.drop_probs_for(m)
    params = init_fusion_params(model_spec, seed)
    history: Dict[str, List[float]] = {}
    fit = dict(batch_size=strategy_cfg.batch_size, show_progress=show_progress)

    def batch_inputs(idx):
        return [mat[idx] for mat in data]

    if strategy in ('Naive', 'MissingAug'):
        augment = strategy == 'MissingAug'

        def loss_fn(p, idx, rng):
            inputs = batch_inputs(idx)
            if augment:
                inputs, _ = missing_aug_sample(inputs, drop_probs, rng, absent[idx])
            fwd = _forward(model_spec, p, inputs)
            loss, d = softmax_cross_entropy(fwd.fusion_logits, y[idx])
            return loss, _backward(model_spec, p, fwd, d_fusion=d)

    elif strategy == 'MultiTask':
        weight = strategy_cfg.multitask_weight

        def loss_fn(p, idx, rng):
            fwd = _forward(model_spec, p, batch_inputs(idx))
            loss, d_f = softmax_cross_entropy(fwd.fusion_logits, y[idx])
            d_aux = []
            for logits in fwd.aux_logits:
                aux_loss, d = softmax_cross_entropy(logits, y[idx])
                loss += weight * aux_loss
                d_aux.append(weight * d)
            return loss, _backward(model_spec, p, fwd, d_fusion=d_f, d_aux=d_aux)

    elif strategy == 'MissingDetect':

        def loss_fn(p, idx, rng):
            inputs, dropped = missing_aug_sample(batch_inputs(idx), drop_probs, rng, absent[idx])
            fwd = _forward(model_spec, p, inputs)
            complete = ~dropped.any(axis=1)
            loss, d_f = _ce_subset(fwd.fusion_logits, y[idx], complete)
            d_aux = []
            for i, logits in enumerate(fwd.aux_logits):
                target = np.where(dropped[:, i], c, y[idx])
                aux_loss, d = softmax_cross_entropy(logits, target)
                loss += aux_loss
                d_aux.append(d)
            return loss, _backward(model_spec, p, fwd, d_fusion=d_f, d_aux=d_aux)

    if strategy != 'UmeMma':
        params, history['train'] = _fit(params, strategy_cfg.phase1, strategy_cfg.epochs,
                                        n_rows=ds.n_rows, batch_loss=loss_fn,
                                        seed=derive_seed(seed, _BATCHES), label=strategy, **fit)
        logger.info(f"{strategy}: trained {strategy_cfg.epochs} epochs, "
                    f"final loss {history['train'][-1] if history['train'] else float('nan'):.4f}")
        return TrainedModel(model_spec, params, strategy_cfg, history)

    # Phase 1: every branch learns from its own modality alone
    for i in range(m):
        present = np.flatnonzero(~absent[:, i])

        def branch_loss(p, idx, rng, i=i, present=present):
            rows = present[idx]
            inputs = [None] * m
            inputs[i] = data[i][rows]
            fwd = _forward(model_spec, p, inputs, branches=[i], fusion=False)
            loss, d = softmax_cross_entropy(fwd.aux_logits[i], y[rows])
            d_aux = [None] * m
            d_aux[i] = d
            return loss, _backward(model_spec, p, fwd, d_aux=d_aux)

        params, history[f'phase1_modality{i}'] = _fit(
            params, strategy_cfg.phase1, strategy_cfg.epochs, n_rows=present.size,
            batch_loss=branch_loss, seed=derive_seed(seed, _BATCHES, i),
            label=f"UmeMma phase 1 modality {i}", trainable=[f'enc{i}', f'aux{i}'], **fit)

    # Phase 2: fine-tune the averaged ensemble under augmentation
    def ensemble_loss(p, idx, rng):
        inputs, _ = missing_aug_sample(batch_inputs(idx), drop_probs, rng, absent[idx])
        fwd = _forward(model_spec, p, inputs)
        logits = np.mean(fwd.aux_logits, axis=0)
        loss, d = softmax_cross_entropy(logits, y[idx])
        return loss, _backward(model_spec, p, fwd, d_aux=[d / m] * m)

    trainable = [f'aux{i}' for i in range(m)]
    if not strategy_cfg.freeze_encoders_in_phase2:
        trainable += [f'enc{i}' for i in range(m)]
    params, history['phase2'] = _fit(
        params, strategy_cfg.phase2_settings, strategy_cfg.phase2_epochs, n_rows=ds.n_rows,
        batch_loss=ensemble_loss, seed=derive_seed(seed, _PHASE2), label="UmeMma phase 2",
        trainable=trainable, **fit)
    logger.info(f"UmeMma: phase 1 {strategy_cfg.epochs} epochs per modality, "
                f"phase 2 {strategy_cfg.phase2_epochs} epochs")
    return TrainedModel(model_spec, params, strategy_cfg, history)


# ============================================================================
# Inference And Evaluation
# ============================================================================

def missing_detect_rule(aux_logits: Sequence[np.ndarray], num_classes: int) -> np.ndarray:
    """
    Combine (C+1)-way head outputs into real-class predictions.

    Heads whose argmax is the missing class are flagged. If some but not all
    heads are flagged, the real-class logits of the unflagged heads are
    averaged; otherwise all heads are averaged.
    """
    stacked = np.stack([np.asarray(out, dtype=np.float64) for out in aux_logits])  # (m, n, C+1)
    flagged = np.argmax(stacked, axis=2) == num_classes
    n_flagged = flagged.sum(axis=0)
    m = stacked.shape[0]
    use = np.where(((n_flagged > 0) & (n_flagged < m))[None, :], ~flagged, True)
    real = stacked[:, :, :num_classes]
    combined = (real * use[:, :, None]).sum(axis=0) / use.sum(axis=0)[:, None]
    return np.argmax(combined, axis=1)


def predict_scores(model: TrainedModel, inputs: Sequence[np.ndarray]) -> np.ndarray:
    """Class scores used for prediction: fusion logits or the averaged head logits."""
    spec = model.spec
    fwd = _forward(spec, model.params, inputs)
    if spec.fusion_mode == 'average':
        return np.mean(fwd.aux_logits, axis=0)
    return fwd.fusion_logits


def predict(model: TrainedModel, inputs: Sequence[np.ndarray]) -> np.ndarray:
    if model.strategy.strategy == 'MissingDetect':
        fwd = _forward(model.spec, model.params, inputs)
        return missing_detect_rule(fwd.aux_logits, model.spec.num_classes)
    return np.argmax(predict_scores(model, inputs), axis=1)


@dataclass
class EvalReport:
    strategy: str
    clean_accuracy: float
    missing_accuracy: List[float]
    robustness_ratio: float
    confusion: List[List[int]]
    n_rows: int
    unimodal_accuracy: Optional[List[float]] = None

    def to_dict(self) -> dict:
        return asdict(self)


def _accuracy(pred: np.ndarray, labels: np.ndarray) -> float:
    return float(np.mean(pred == labels))


def evaluate_missing(model: TrainedModel, ds_val: MultiModalDataset) -> EvalReport:
    """Clean accuracy, accuracy with each modality zero-filled, and their ratio."""
    if ds_val.n_rows == 0:
        raise StructuralError("cannot evaluate on an empty validation split")
    inputs = list(ds_val.modalities)
    y = ds_val.labels
    c = model.spec.num_classes

    clean_pred = predict(model, inputs)
    clean = _accuracy(clean_pred, y)
    missing = [_accuracy(predict(model, mask_modality(inputs, i)), y)
               for i in range(model.spec.n_modalities)]
    ratio = float(np.mean(missing) / clean) if clean > 0 else 0.0
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (y, clean_pred), 1)

    unimodal = None
    if model.spec.aux_heads:
        fwd = _forward(model.spec, model.params, inputs)
        unimodal = [_accuracy(np.argmax(logits[:, :c], axis=1), y) for logits in fwd.aux_logits]

    return EvalReport(
        strategy=model.strategy.strategy,
        clean_accuracy=clean,
        missing_accuracy=missing,
        robustness_ratio=ratio,
        confusion=confusion.tolist(),
        n_rows=ds_val.n_rows,
        unimodal_accuracy=unimodal,
    )


def drop_probability_sweep(train_ds: MultiModalDataset, val_ds: MultiModalDataset,
                           base: StrategyConfig, grid: Sequence[float],
                           show_progress: bool = False) -> List[Tuple[float, EvalReport]]:
    """Train UmeMma once per drop probability (applied to every modality) and evaluate."""
    if base.strategy != 'UmeMma':
        base = replace(base, strategy='UmeMma')
    spec = build_model_spec(train_ds.dims, train_ds.num_classes, 'UmeMma', base.hidden)
    results = []
    for prob in grid:
        cfg = replace(base, drop_probs=(float(prob),) * train_ds.n_modalities)
        model = train(train_ds, spec, cfg, show_progress=show_progress)
        results.append((float(prob), evaluate_missing(model, val_ds)))
    return results


# ============================================================================
# Persistence
# ============================================================================

def save_model(model: TrainedModel, path: Union[str, Path]) -> Path:
    """Manifest + single float64 payload with every group in groups() order."""
    manifest_path = Path(path).with_suffix('.json')
    payload_path = manifest_path.with_suffix('.f64')
    groups = model.params.groups()
    flat = np.concatenate([p.to_flat() for p in groups.values()])
    digest = write_payload(payload_path, flat, '<f8')
    write_manifest(manifest_path, {
        'format': MODEL_FORMAT,
        'spec': model.spec.to_dict(),
        'strategy': model.strategy.to_dict(),
        'groups': list(groups),
        'payload': payload_path.name,
        'count': int(flat.size),
        'sha256': digest,
        'history': model.history,
    })
    return manifest_path


def load_model(path: Union[str, Path]) -> TrainedModel:
    manifest_path = Path(path).with_suffix('.json')
    manifest = read_manifest(manifest_path)
    if manifest.get('format') != MODEL_FORMAT:
        raise LoadError(f"{manifest_path.name} is not a {MODEL_FORMAT} manifest")
    try:
        spec = FusionModelSpec.from_dict(manifest['spec'])
        strategy = StrategyConfig.from_dict(manifest['strategy'])
        count = int(manifest['count'])
    except (KeyError, TypeError, StructuralError) as e:
        raise LoadError(f"malformed model manifest {manifest_path.name}: {e}")
    specs = _group_specs(spec)
    if list(specs) != manifest.get('groups') or count != sum(s.param_count() for s in specs.values()):
        raise LoadError(f"{manifest_path.name}: parameter groups do not match the model spec")
    flat = read_payload(manifest_path.parent / manifest['payload'], '<f8', count, manifest.get('sha256'))
    groups, pos = {}, 0
    for key, s in specs.items():
        groups[key] = MlpParams.from_flat(s, flat[pos:pos + s.param_count()])
        pos += s.param_count()
    m = spec.n_modalities
    params = FusionParams([groups[f'enc{i}'] for i in range(m)], groups.get('fusion'),
                          [groups[f'aux{i}'] for i in range(m) if f'aux{i}' in groups])
    return TrainedModel(spec, params, strategy, manifest.get('history', {}))
