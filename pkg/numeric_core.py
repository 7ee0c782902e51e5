#!/usr/bin/env python3
"""
Numeric Core
Dense multilayer perceptrons with hand-written reverse-mode gradients,
first-order optimizers, and the manifest + payload parameter format.

Every estimator critic, modality encoder and fusion head in the toolkit is an
MlpSpec/MlpParams pair trained through this module. All arithmetic is float64.
"""

import hashlib
import json
import logging
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np

from errors import LoadError, NumericError, StructuralError


logger = logging.getLogger('complementarity.numeric')

ACTIVATIONS = ('elu', 'none')
ALGORITHMS = ('sgd', 'adam', 'adamw')
PARAMS_FORMAT = 'mlp-params v1'


# ============================================================================
# Seeded Random Streams
# ============================================================================

def make_rng(seed: int) -> np.random.Generator:
    """Counter-based generator for a nonnegative integer seed."""
    if seed is None or int(seed) < 0:
        raise StructuralError(f"seed must be a nonnegative integer, got {seed!r}")
    return np.random.Generator(np.random.Philox(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Derive an independent child seed from a parent seed and integer keys."""
    state = np.random.SeedSequence([int(seed), *[int(k) for k in keys]]).generate_state(1)
    return int(state[0])


# ============================================================================
# Network Description
# ============================================================================

@dataclass(frozen=True)
class MlpSpec:
    """
    Layer-by-layer description of a multilayer perceptron.

    layer_dims lists the input dim, every hidden width and the output dim.
    Linear layer k maps layer_dims[k] (plus label_dim when k equals
    label_concat_at) to layer_dims[k + 1]. Hidden layers use the activation
    tag given for them; the last layer is always linear. At least one
    hidden layer follows the label slot.
    """

    layer_dims: Tuple[int, ...]
    activation: Union[str, Tuple[str, ...]] = 'elu'
    label_concat_at: Optional[int] = None
    label_dim: int = 0

    def __post_init__(self):
        dims = tuple(int(d) for d in self.layer_dims)
        if len(dims) < 2:
            raise StructuralError(f"layer_dims needs at least 2 entries, got {list(dims)}")
        if any(d <= 0 for d in dims):
            raise StructuralError(f"layer_dims must be positive, got {list(dims)}")
        object.__setattr__(self, 'layer_dims', dims)

        acts = self.activation
        if isinstance(acts, str):
            acts = (acts,) * (len(dims) - 2)
        acts = tuple(acts)
        if len(acts) != len(dims) - 2:
            raise StructuralError(
                f"expected {len(dims) - 2} hidden activations, got {len(acts)}"
            )
        for act in acts:
            if act not in ACTIVATIONS:
                raise StructuralError(f"unknown activation '{act}'")
        object.__setattr__(self, 'activation', acts)

        if self.label_dim < 0:
            raise StructuralError("label_dim must be nonnegative")
        if (self.label_concat_at is None) != (self.label_dim == 0):
            raise StructuralError("label_dim > 0 exactly when label_concat_at is set")
        if self.label_concat_at is not None:
            at = int(self.label_concat_at)
            if not 1 <= at <= len(dims) - 3:
                raise StructuralError(
                    f"label_concat_at={at} must index a hidden layer followed by another "
                    f"hidden layer, i.e. lie in [1, {len(dims) - 3}]"
                )
            if acts[at] == 'none':
                raise StructuralError(f"hidden layer {at + 1} reads the label and must be activated")
            object.__setattr__(self, 'label_concat_at', at)

    @property
    def n_layers(self) -> int:
        return len(self.layer_dims) - 1

    @property
    def input_dim(self) -> int:
        return self.layer_dims[0]

    @property
    def output_dim(self) -> int:
        return self.layer_dims[-1]

    def layer_in_dim(self, k: int) -> int:
        extra = self.label_dim if k == self.label_concat_at else 0
        return self.layer_dims[k] + extra

    def shapes(self) -> List[Tuple[int, int]]:
        """(out_dim, in_dim) of every weight matrix."""
        return [(self.layer_dims[k + 1], self.layer_in_dim(k)) for k in range(self.n_layers)]

    def param_count(self) -> int:
        return sum(out * inp + out for out, inp in self.shapes())

    def to_dict(self) -> dict:
        return {
            'layer_dims': list(self.layer_dims),
            'activation': list(self.activation),
            'label_concat_at': self.label_concat_at,
            'label_dim': self.label_dim,
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'MlpSpec':
        return cls(
            layer_dims=tuple(data['layer_dims']),
            activation=tuple(data.get('activation', ())) or 'elu',
            label_concat_at=data.get('label_concat_at'),
            label_dim=int(data.get('label_dim', 0)),
        )


@dataclass
class MlpParams:
    """Per-layer weight matrices (out x in) and bias vectors."""

    weights: List[np.ndarray]
    biases: List[np.ndarray]

    def shapes(self) -> List[Tuple[int, int]]:
        return [tuple(w.shape) for w in self.weights]

    def copy(self) -> 'MlpParams':
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def zeros_like(self) -> 'MlpParams':
        return MlpParams([np.zeros_like(w) for w in self.weights],
                         [np.zeros_like(b) for b in self.biases])

    def arrays(self) -> List[np.ndarray]:
        return list(self.weights) + list(self.biases)

    def add(self, other: 'MlpParams') -> 'MlpParams':
        return MlpParams([a + b for a, b in zip(self.weights, other.weights)],
                         [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, factor: float) -> 'MlpParams':
        return MlpParams([w * factor for w in self.weights], [b * factor for b in self.biases])

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays())

    def to_flat(self) -> np.ndarray:
        """Layer order; per layer the weights row-major, then the bias."""
        parts = []
        for w, b in zip(self.weights, self.biases):
            parts.append(w.ravel(order='C'))
            parts.append(b.ravel())
        return np.concatenate(parts) if parts else np.zeros(0)

    @classmethod
    def from_flat(cls, spec: MlpSpec, flat: np.ndarray) -> 'MlpParams':
        flat = np.asarray(flat, dtype=np.float64)
        if flat.size != spec.param_count():
            raise StructuralError(
                f"flat parameter vector has {flat.size} entries, spec needs {spec.param_count()}"
            )
        weights, biases, pos = [], [], 0
        for out, inp in spec.shapes():
            weights.append(flat[pos:pos + out * inp].reshape(out, inp).copy())
            pos += out * inp
            biases.append(flat[pos:pos + out].copy())
            pos += out
        return cls(weights, biases)


def _check_params(spec: MlpSpec, params: MlpParams):
    expected = spec.shapes()
    if params.shapes() != expected or [b.shape for b in params.biases] != [(o,) for o, _ in expected]:
        raise StructuralError(f"parameter shapes {params.shapes()} do not match spec {expected}")


def init_params(spec: MlpSpec, seed: int) -> MlpParams:
    """
    Draw fresh parameters for a spec.

    Weights are uniform over +-sqrt(1/fan_in), where fan_in counts the label
    slot for the concatenation layer; biases start at exactly zero.
    """
    if not isinstance(spec, MlpSpec):
        raise StructuralError("init_params expects an MlpSpec")
    rng = make_rng(seed)
    weights, biases = [], []
    for out, inp in spec.shapes():
        bound = np.sqrt(1.0 / inp)
        weights.append(rng.uniform(-bound, bound, size=(out, inp)))
        biases.append(np.zeros(out))
    return MlpParams(weights, biases)


# ============================================================================
# Forward / Backward
# ============================================================================

def elu(z: np.ndarray) -> np.ndarray:
    """ELU with unit scale: z for z > 0, exp(z) - 1 otherwise."""
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def elu_grad(z: np.ndarray) -> np.ndarray:
    z = np.asarray(z, dtype=np.float64)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _activate(z: np.ndarray, tag: str) -> np.ndarray:
    return elu(z) if tag == 'elu' else z


def _activate_grad(z: np.ndarray, tag: str) -> np.ndarray:
    return elu_grad(z) if tag == 'elu' else np.ones_like(z)


@dataclass
class ForwardCache:
    """Activations kept by forward() for the matching backward() call."""

    spec: MlpSpec
    weight_ids: Tuple[int, ...]
    inputs: List[np.ndarray]
    pre: List[np.ndarray]
    single: bool


def forward(spec: MlpSpec, params: MlpParams, inputs: np.ndarray,
            label: Optional[np.ndarray] = None) -> Tuple[np.ndarray, ForwardCache]:
    """
    Run the network on one example or a batch (rows are examples).

    Args:
        spec: Network description
        params: Parameters matching `spec`
        inputs: Vector of length layer_dims[0] or matrix with that many columns
        label: One-hot label vector/batch, required iff label_concat_at is set

    Returns:
        Tuple of (outputs, cache for backward)
    """
    _check_params(spec, params)
    x = np.asarray(inputs, dtype=np.float64)
    single = x.ndim == 1
    if single:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != spec.input_dim:
        raise StructuralError(f"input has shape {np.shape(inputs)}, spec expects width {spec.input_dim}")

    if (label is None) != (spec.label_concat_at is None):
        raise StructuralError("label must be given exactly when the MlpSpec concatenates one")
    if label is not None:
        label = np.asarray(label, dtype=np.float64)
        if label.ndim == 1:
            label = label[None, :]
        if label.shape != (x.shape[0], spec.label_dim):
            raise StructuralError(
                f"label has shape {label.shape}, expected {(x.shape[0], spec.label_dim)}"
            )

    h = x
    cached_inputs, cached_pre = [], []
    last = spec.n_layers - 1
    for k in range(spec.n_layers):
        if k == spec.label_concat_at:
            h = np.concatenate([h, label], axis=1)
        cached_inputs.append(h)
        z = h @ params.weights[k].T + params.biases[k]
        cached_pre.append(z)
        h = _activate(z, spec.activation[k]) if k < last else z

    cache = ForwardCache(
        spec=spec,
        weight_ids=tuple(id(w) for w in params.weights),
        inputs=cached_inputs,
        pre=cached_pre,
        single=single,
    )
    return (h[0] if single else h), cache


def backward(spec: MlpSpec, params: MlpParams, cache: ForwardCache,
             grad_output: np.ndarray) -> Tuple[MlpParams, np.ndarray]:
    """
    Reverse-mode pass for a cached forward call.

    Gradients are summed over the batch. The label slot of the concatenation
    layer is a constant, so its gradient is dropped.

    Returns:
        Tuple of (parameter gradients, gradient w.r.t. the network input)
    """
    if cache.spec != spec or cache.weight_ids != tuple(id(w) for w in params.weights):
        raise StructuralError("forward cache does not belong to these spec/params")
    g = np.asarray(grad_output, dtype=np.float64)
    if cache.single and g.ndim == 1:
        g = g[None, :]
    if g.shape != cache.pre[-1].shape:
        raise StructuralError(f"output gradient has shape {g.shape}, expected {cache.pre[-1].shape}")

    n = spec.n_layers
    grad_w: List[Optional[np.ndarray]] = [None] * n
    grad_b: List[Optional[np.ndarray]] = [None] * n
    for k in reversed(range(n)):
        if k < n - 1:
            g = g * _activate_grad(cache.pre[k], spec.activation[k])
        grad_w[k] = g.T @ cache.inputs[k]
        grad_b[k] = g.sum(axis=0)
        g = g @ params.weights[k]
        if k == spec.label_concat_at:
            g = g[:, :spec.layer_dims[k]]

    return MlpParams(grad_w, grad_b), (g[0] if cache.single else g)


# ============================================================================
# Losses
# ============================================================================

def one_hot(labels: np.ndarray, num_classes: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= num_classes):
        raise StructuralError(f"labels outside [0, {num_classes})")
    out = np.zeros((labels.size, num_classes))
    out[np.arange(labels.size), labels] = 1.0
    return out


def log_mean_exp(scores: np.ndarray) -> float:
    """log(mean(exp(scores))) with max-shift stabilization."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    if s.size == 0:
        raise StructuralError("log_mean_exp of an empty vector")
    if not np.all(np.isfinite(s)):
        raise NumericError("non-finite score in log_mean_exp")
    shift = s.max()
    return float(shift + np.log(np.mean(np.exp(s - shift))))


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def softmax_cross_entropy(logits: np.ndarray, labels: np.ndarray) -> Tuple[float, np.ndarray]:
    """Mean cross-entropy over the batch and its gradient w.r.t. the logits."""
    logits = np.asarray(logits, dtype=np.float64)
    n, c = logits.shape
    if n == 0:
        return 0.0, np.zeros_like(logits)
    probs = softmax(logits)
    target = one_hot(labels, c)
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-(target * log_probs).sum() / n)
    return loss, (probs - target) / n


# ============================================================================
# Optimizers
# ============================================================================

@dataclass(frozen=True)
class OptimizerSettings:
    """Hyperparameters of one optimizer; lr_schedule holds (start_epoch, lr) milestones."""

    algorithm: str = 'adam'
    lr: float = 1e-3
    weight_decay: float = 0.0
    betas: Tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    lr_schedule: Tuple[Tuple[int, float], ...] = ()

    def __post_init__(self):
        algo = str(self.algorithm).lower()
        if algo not in ALGORITHMS:
            raise StructuralError(f"unknown optimizer '{self.algorithm}', expected one of {ALGORITHMS}")
        object.__setattr__(self, 'algorithm', algo)
        if not self.lr > 0:
            raise StructuralError(f"learning rate must be positive, got {self.lr}")
        if self.weight_decay < 0:
            raise StructuralError("weight decay must be nonnegative")
        b1, b2 = self.betas
        if not (0 < b1 < 1 and 0 < b2 < 1):
            raise StructuralError(f"betas must lie in (0, 1), got {self.betas}")
        if not self.eps > 0:
            raise StructuralError("epsilon must be positive")
        schedule = tuple(sorted((int(e), float(lr)) for e, lr in self.lr_schedule))
        if any(lr <= 0 for _, lr in schedule):
            raise StructuralError("scheduled learning rates must be positive")
        object.__setattr__(self, 'betas', (float(b1), float(b2)))
        object.__setattr__(self, 'lr_schedule', schedule)

    def lr_at(self, epoch: int) -> float:
        """Learning rate active at a zero-based epoch."""
        lr = self.lr
        for start, value in self.lr_schedule:
            if epoch >= start:
                lr = value
        return lr

    def scaled(self, factor: float) -> 'OptimizerSettings':
        return replace(self, lr=self.lr * factor,
                       lr_schedule=tuple((e, lr * factor) for e, lr in self.lr_schedule))

    def to_dict(self) -> dict:
        return {
            'algorithm': self.algorithm,
            'lr': self.lr,
            'weight_decay': self.weight_decay,
            'betas': list(self.betas),
            'eps': self.eps,
            'lr_schedule': [list(m) for m in self.lr_schedule],
        }

    @classmethod
    def from_dict(cls, data: dict) -> 'OptimizerSettings':
        return cls(
            algorithm=data.get('algorithm', 'adam'),
            lr=float(data.get('lr', 1e-3)),
            weight_decay=float(data.get('weight_decay', 0.0)),
            betas=tuple(data.get('betas', (0.9, 0.999))),
            eps=float(data.get('eps', 1e-8)),
            lr_schedule=tuple(tuple(m) for m in data.get('lr_schedule', ()) or ()),
        )


@dataclass
class OptimizerState:
    """Optimizer bookkeeping for one parameter group."""

    settings: OptimizerSettings
    lr: float
    m: MlpParams
    v: MlpParams
    step: int = 0

    @property
    def algorithm(self) -> str:
        return self.settings.algorithm

    @property
    def weight_decay(self) -> float:
        return self.settings.weight_decay

    @property
    def betas(self) -> Tuple[float, float]:
        return self.settings.betas

    @property
    def eps(self) -> float:
        return self.settings.eps

    def at_epoch(self, epoch: int) -> 'OptimizerState':
        return replace(self, lr=self.settings.lr_at(epoch))


def init_optimizer(settings: OptimizerSettings, params: MlpParams) -> OptimizerState:
    return OptimizerState(settings=settings, lr=settings.lr_at(0),
                          m=params.zeros_like(), v=params.zeros_like(), step=0)


def optimizer_step(state: OptimizerState, params: MlpParams, grads: MlpParams,
                   trainable: bool = True) -> Tuple[MlpParams, OptimizerState]:
    """
    Apply one update and return new params and state; inputs are not mutated.

    SGD and Adam apply weight decay to the gradient (coupled); AdamW decays
    the weights directly (decoupled). A frozen group passes through untouched.
    """
    if not trainable:
        return params, state
    if params.shapes() != grads.shapes() or params.shapes() != state.m.shapes():
        raise StructuralError("optimizer shapes do not match parameters")
    if not grads.is_finite():
        raise NumericError("non-finite gradient passed to optimizer_step")

    algo = state.algorithm
    lr, wd, eps = state.lr, state.weight_decay, state.eps
    b1, b2 = state.betas
    t = state.step + 1

    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(params.arrays(), grads.arrays(), state.m.arrays(), state.v.arrays()):
        if algo == 'sgd':
            g_eff = g + wd * p if wd else g
            new_p.append(p - lr * g_eff)
            new_m.append(m)
            new_v.append(v)
            continue
        if algo == 'adam':
            g_eff = g + wd * p if wd else g
            base = p
        else:
            g_eff = g
            base = p - lr * wd * p if wd else p
        m_t = b1 * m + (1.0 - b1) * g_eff
        v_t = b2 * v + (1.0 - b2) * g_eff * g_eff
        m_hat = m_t / (1.0 - b1 ** t)
        v_hat = v_t / (1.0 - b2 ** t)
        new_p.append(base - lr * m_hat / (np.sqrt(v_hat) + eps))
        new_m.append(m_t)
        new_v.append(v_t)

    k = len(params.weights)
    updated = MlpParams(new_p[:k], new_p[k:])
    new_state = replace(state, m=MlpParams(new_m[:k], new_m[k:]),
                        v=MlpParams(new_v[:k], new_v[k:]), step=t)
    return updated, new_state


# ============================================================================
# Payload I/O
# ============================================================================

def sha256_file(path: Union[str, Path], chunk_size: int = 8192) -> str:
    """Stream a file through SHA-256 without loading it whole."""
    hasher = hashlib.sha256()
    with open(path, 'rb') as f:
        for chunk in iter(lambda: f.read(chunk_size), b''):
            hasher.update(chunk)
    return hasher.hexdigest()


def write_payload(path: Union[str, Path], values: np.ndarray, dtype: str) -> str:
    """Write a flat little-endian payload and return its digest."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'wb') as f:
        f.write(np.ascontiguousarray(values, dtype=dtype).tobytes())
    return sha256_file(path)


def read_payload(path: Union[str, Path], dtype: str, count: int,
                 digest: Optional[str] = None) -> np.ndarray:
    path = Path(path)
    if not path.exists():
        raise LoadError(f"payload file missing: {path}")
    raw = path.read_bytes()
    itemsize = np.dtype(dtype).itemsize
    if len(raw) != count * itemsize:
        raise LoadError(
            f"length mismatch in {path.name}: {len(raw)} bytes, expected {count * itemsize}"
        )
    if digest is not None and hashlib.sha256(raw).hexdigest() != digest:
        raise LoadError(f"digest mismatch in {path.name}")
    return np.frombuffer(raw, dtype=dtype).copy()


def write_manifest(path: Union[str, Path], manifest: dict):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write('\n')


def read_manifest(path: Union[str, Path]) -> dict:
    try:
        with open(path, 'r', encoding='utf-8') as f:
            data = json.load(f)
    except FileNotFoundError:
        raise LoadError(f"manifest not found: {path}")
    except json.JSONDecodeError as e:
        raise LoadError(f"malformed manifest {path}: {e}")
    if not isinstance(data, dict):
        raise LoadError(f"malformed manifest {path}: top level is not a mapping")
    return data


def save_params(path: Union[str, Path], spec: MlpSpec, params: MlpParams,
                metadata: Optional[dict] = None) -> Path:
    """
    Persist parameters as `<stem>.json` manifest + `<stem>.f64` payload.

    Returns:
        Path of the manifest
    """
    _check_params(spec, params)
    manifest_path = Path(path).with_suffix('.json')
    payload_path = manifest_path.with_suffix('.f64')
    flat = params.to_flat()
    digest = write_payload(payload_path, flat, '<f8')
    write_manifest(manifest_path, {
        'format': PARAMS_FORMAT,
        'spec': spec.to_dict(),
        'payload': payload_path.name,
        'count': int(flat.size),
        'sha256': digest,
        'metadata': metadata or {},
    })
    logger.debug(f"Saved {flat.size} parameters to {payload_path}")
    return manifest_path


def load_params(path: Union[str, Path]) -> Tuple[MlpSpec, MlpParams, dict]:
    manifest_path = Path(path).with_suffix('.json')
    manifest = read_manifest(manifest_path)
    if manifest.get('format') != PARAMS_FORMAT:
        raise LoadError(f"{manifest_path.name} is not an {PARAMS_FORMAT} manifest")
    try:
        spec = MlpSpec.from_dict(manifest['spec'])
        count = int(manifest['count'])
    except (KeyError, TypeError, StructuralError) as e:
        raise LoadError(f"malformed parameter manifest {manifest_path.name}: {e}")
    if count != spec.param_count():
        raise LoadError(f"{manifest_path.name}: count {count} does not match spec")
    flat = read_payload(manifest_path.parent / manifest['payload'], '<f8', count,
                        manifest.get('sha256'))
    return spec, MlpParams.from_flat(spec, flat), manifest.get('metadata', {})
