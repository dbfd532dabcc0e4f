"""
Training infrastructure.

Two models share one training loop:

* ``ClassifierMPS``: a real MPS over every encoded qubit with a label leg on its middle
  site; the scores of an image are its contraction with the image MPS.
* ``CircuitClassifier``: a sequential circuit whose label-qubit marginals are the scores.

Both expose ``parameters``, ``with_parameters``, ``scores`` and ``loss_terms`` so the
loop, the optimizer and the checkpoint code stay model-agnostic.
"""

import csv
import hashlib
import logging
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import scipy.special

from qpix.circuit_map import peel_layers
from qpix.errors import DomainError, FormatError, NumericalError, ShapeError, SizeError
from qpix.frqi import encode_patched
from qpix.imaging import Dataset, PatchLayout
from qpix.mps import DEFAULT_MAX_DENSE_ENTRIES, MPS, compress_image_mps
from qpix.seq_circuit import (
    SequentialCircuit,
    apply_circuit,
    default_label_qubits,
    init_circuit,
    marginal_probabilities,
    param_gradients,
    polar_sweeps,
    readout_cotangent,
    zero_state,
)
from qpix.storage import load_checkpoint, save_checkpoint
from qpix.tensors import normalize

# Module-level logger
logger = logging.getLogger(__name__)

MODEL_KINDS = ("mps", "circuit")
METRICS_COLUMNS = ("epoch", "train_loss", "train_acc", "test_acc")
BEST_OF = 100
DEFAULT_COMPRESS_SWEEPS = 200
DEFAULT_COMPRESS_RESTARTS = 4
EXACT_FIDELITY_TOL = 1e-12

# circuit runs use C = number of pixels and no regularization unless told otherwise
MODEL_DEFAULTS: Dict[str, Dict[str, Any]] = {
    "mps": {},
    "circuit": {"logit_scale": None, "l2": 0.0, "learning_rate": 8e-4, "batch_size": 100},
}

PROFILES: Dict[str, Dict[str, Any]] = {
    "desk3": {
        "classes": (0, 1, 2),
        "image_size": (16, 16),
        "train_count": 600,
        "test_count": 300,
        "layout": "1x1",
        "chi_img": 4,
        "chi_class": 10,
        "m_img": 1,
        "m_class": 2,
        "epochs": 300,
        "learning_rate": 1e-3,
        "batch_size": 32,
        "compress_iterations": 500,
        "compress_learning_rate": 1e-2,
    },
    "full-mps": {
        "model": "mps",
        "image_size": (32, 32),
        "layout": "2x4",
        "chi_img": 2,
        "chi_class": 10,
        "epochs": 3000,
        "learning_rate": 1e-4,
        "batch_size": 128,
        "l2": 1e-4,
        "logit_scale": 1.0,
    },
    "full-circuit": {
        "model": "circuit",
        "image_size": (32, 32),
        "layout": "1x1",
        "m_img": 2,
        "m_class": 2,
        "epochs": 1600,
        "learning_rate": 8e-4,
        "batch_size": 100,
        "l2": 0.0,
        "logit_scale": None,
        "compress_iterations": 2000,
        "compress_learning_rate": 8e-4,
    },
}


@dataclass
class TrainConfig:
    """
    Hyperparameters of one training run.

    ``logit_scale`` is the constant C of the loss; ``None`` means "number of pixels",
    the circuit-classifier convention. ``m_img = 0`` feeds the circuit classifier the
    exact FRQI states.
    """

    seed: int
    model: str = "mps"
    learning_rate: float = 1e-4
    batch_size: int = 128
    epochs: int = 3000
    l2: float = 1e-4
    logit_scale: Optional[float] = 1.0
    chi_img: Optional[int] = 2
    chi_class: int = 10
    m_img: int = 1
    m_class: int = 2
    readout_tail: bool = True
    layout: str = "1x1"
    image_size: Tuple[int, int] = (32, 32)
    classes: Optional[Tuple[int, ...]] = None
    train_count: Optional[int] = None
    test_count: Optional[int] = None
    threads: int = 1
    compress_iterations: int = 2000
    compress_learning_rate: float = 8e-4
    warm_start: bool = True
    compress_sweeps: int = DEFAULT_COMPRESS_SWEEPS
    compress_restarts: int = DEFAULT_COMPRESS_RESTARTS
    init_noise: float = 1e-4
    score_log_cap: Optional[float] = None

    def validate(self) -> "TrainConfig":
        if self.model not in MODEL_KINDS:
            raise ValueError(f"Unknown model kind {self.model!r}, expected one of {MODEL_KINDS}")
        if self.seed is None or self.seed < 0:
            raise ValueError(f"seed must be a non-negative integer, got {self.seed}")
        for name in ("learning_rate", "l2", "init_noise", "compress_learning_rate"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        for name in ("batch_size", "chi_class", "threads", "compress_restarts"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")
        for name in ("epochs", "m_img", "m_class", "compress_iterations", "compress_sweeps"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be non-negative, got {getattr(self, name)}")
        if self.chi_img is not None and self.chi_img < 1:
            raise ValueError(f"chi_img must be positive, got {self.chi_img}")
        if self.logit_scale is not None and self.logit_scale <= 0:
            raise ValueError(f"logit_scale must be positive, got {self.logit_scale}")
        PatchLayout.parse(self.layout)
        return self

    @property
    def patch_layout(self) -> PatchLayout:
        return PatchLayout.parse(self.layout)

    def to_dict(self) -> Dict[str, Any]:
        doc = asdict(self)
        for key, value in doc.items():
            if isinstance(value, tuple):
                doc[key] = list(value)
        return doc

    @classmethod
    def from_dict(cls, doc: Dict[str, Any]) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        values = {key: value for key, value in doc.items() if key in known}
        for key in ("image_size", "classes"):
            if values.get(key) is not None:
                values[key] = tuple(values[key])
        return cls(**values)


def config_from_profile(profile: Optional[str], seed: int, **overrides) -> TrainConfig:
    """
    Layered configuration: model-kind defaults, then the profile, then explicit
    (non-None) overrides.
    """
    if profile and profile not in PROFILES:
        raise ValueError(f"Unknown profile {profile!r}, expected one of {sorted(PROFILES)}")
    preset = PROFILES[profile] if profile else {}
    model = overrides.get("model") or preset.get("model") or "mps"
    if model not in MODEL_DEFAULTS:
        raise ValueError(f"Unknown model kind {model!r}, expected one of {MODEL_KINDS}")
    values: Dict[str, Any] = dict(MODEL_DEFAULTS[model])
    values.update(preset)
    values.update({key: value for key, value in overrides.items() if value is not None})
    values["model"] = model
    return TrainConfig(seed=seed, **values).validate()


# ---------------------------------------------------------------------------
# Loss and optimizer
# ---------------------------------------------------------------------------

def _cross_entropy_terms(scores: np.ndarray, truth: int, logit_scale: float, weight: float):
    """Cross entropy of one image and its gradient with respect to the scores, times ``weight``."""
    z = logit_scale * np.asarray(scores, dtype=np.float64)
    log_probs = z - scipy.special.logsumexp(z)
    grad = np.exp(log_probs)
    grad[truth] -= 1.0
    return float(-log_probs[truth]), grad * (logit_scale * weight)


def _l2_sum(weights: Sequence[np.ndarray]) -> float:
    return float(sum(np.sum(np.square(w)) for w in weights))


def loss(
    scores: np.ndarray,
    truth: Sequence[int],
    logit_scale: float,
    l2: float,
    weights: Sequence[np.ndarray] = (),
) -> float:
    """Mean softmax cross entropy of ``logit_scale * scores`` plus ``l2 / (2 N_b) * sum w^2``."""
    value, _ = loss_and_score_gradient(scores, truth, logit_scale, l2, weights)
    return value


def loss_and_score_gradient(
    scores: np.ndarray,
    truth: Sequence[int],
    logit_scale: float,
    l2: float,
    weights: Sequence[np.ndarray] = (),
) -> Tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the ``(N_b, L)`` score matrix."""
    scores = np.atleast_2d(np.asarray(scores, dtype=np.float64))
    truth = np.atleast_1d(np.asarray(truth, dtype=np.int64))
    if scores.shape[0] != truth.shape[0]:
        raise ShapeError(f"{scores.shape[0]} score rows for {truth.shape[0]} labels")
    batch = scores.shape[0]
    total = 0.0
    grad = np.empty_like(scores)
    for i in range(batch):
        ce, grad[i] = _cross_entropy_terms(scores[i], int(truth[i]), logit_scale, 1.0 / batch)
        total += ce
    return total / batch + l2 / (2.0 * batch) * _l2_sum(weights), grad


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros(cls, params: Sequence[np.ndarray], **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in params], [np.zeros_like(p) for p in params], **hyper)


def adam_step(
    state: AdamState,
    params: Sequence[np.ndarray],
    grads: Sequence[np.ndarray],
    lr: float,
) -> Tuple[AdamState, List[np.ndarray]]:
    """One bias-corrected Adam update. Inputs are left untouched."""
    if len(params) != len(grads) or len(params) != len(state.m):
        raise ShapeError(f"Adam got {len(params)} params, {len(grads)} grads, {len(state.m)} moments")
    step = state.step + 1
    b1, b2 = state.beta1, state.beta2
    new_m, new_v, new_params = [], [], []
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"Adam shape mismatch: param {p.shape}, grad {g.shape}, moment {m.shape}")
        m = b1 * m + (1.0 - b1) * g
        v = b2 * v + (1.0 - b2) * np.square(g)
        m_hat = m / (1.0 - b1 ** step)
        v_hat = v / (1.0 - b2 ** step)
        new_params.append(p - lr * m_hat / (np.sqrt(v_hat) + state.eps))
        new_m.append(m)
        new_v.append(v)
    return AdamState(new_m, new_v, step, b1, b2, state.eps), new_params


# ---------------------------------------------------------------------------
# MPS classifier
# ---------------------------------------------------------------------------

@dataclass
class ClassifierMPS:
    """
    Real classifier MPS; site ``label_site`` has shape ``(chi_l, d, L, chi_r)``.

    ``log_cap`` bounds the log scale applied to the scores; the excess factor is a
    constant for differentiation.
    """

    tensors: List[np.ndarray]
    label_site: int
    num_labels: int
    log_cap: Optional[float] = None

    def __post_init__(self):
        if not 0 <= self.label_site < len(self.tensors):
            raise ShapeError(f"Label site {self.label_site} outside a chain of {len(self.tensors)} sites")
        for k, t in enumerate(self.tensors):
            rank = 4 if k == self.label_site else 3
            if t.ndim != rank:
                raise ShapeError(f"Classifier site {k} must be rank {rank}, got shape {t.shape}")
        if self.tensors[self.label_site].shape[2] != self.num_labels:
            raise ShapeError(
                f"Label leg has extent {self.tensors[self.label_site].shape[2]}, expected {self.num_labels}"
            )
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[-1] != 1:
            raise ShapeError("Boundary bonds of the classifier must have extent 1")

    @property
    def n_sites(self) -> int:
        return len(self.tensors)

    def parameters(self) -> List[np.ndarray]:
        return self.tensors

    def with_parameters(self, params: Sequence[np.ndarray]) -> "ClassifierMPS":
        return ClassifierMPS(list(params), self.label_site, self.num_labels, self.log_cap)

    def scores(self, image: Sequence[MPS]) -> np.ndarray:
        return mps_classifier_forward(self, image)

    def loss_terms(self, image: Sequence[MPS], truth: int, logit_scale: float, weight: float):
        contraction = _contract(self, image)
        scores = contraction.scores
        ce, score_grad = _cross_entropy_terms(scores, truth, logit_scale, weight)
        return ce, scores, _backward(self, contraction, score_grad)


def init_classifier_mps(
    n_sites: int,
    chi_class: int,
    num_labels: int,
    seed: int,
    noise: float = 1e-4,
    d: int = 2,
    log_cap: Optional[float] = None,
) -> ClassifierMPS:
    """
    Stacked rectangular identities plus Gaussian noise of width ``noise``.

    Every physical index of every site gets the same identity core; the label leg is
    uniform across labels before the noise is added.
    """
    if n_sites < 1:
        raise ShapeError("A classifier needs at least one site")
    rng = np.random.default_rng(seed)
    label_site = n_sites // 2
    bonds = [1] + [chi_class] * (n_sites - 1) + [1]
    tensors = []
    for k in range(n_sites):
        core = np.eye(bonds[k], bonds[k + 1])
        if k == label_site:
            t = np.broadcast_to(core[:, None, None, :], (bonds[k], d, num_labels, bonds[k + 1])).copy()
        else:
            t = np.broadcast_to(core[:, None, :], (bonds[k], d, bonds[k + 1])).copy()
        tensors.append(t + rng.normal(0.0, noise, size=t.shape))
    return ClassifierMPS(tensors, label_site, num_labels, log_cap)


def _transfer_left(env: np.ndarray, w: np.ndarray, t: np.ndarray) -> np.ndarray:
    tmp = np.tensordot(env, w, axes=(0, 0))
    return np.tensordot(tmp, t, axes=([0, 1], [0, 1]))


def _transfer_right(env: np.ndarray, w: np.ndarray, t: np.ndarray) -> np.ndarray:
    tmp = np.tensordot(w, env, axes=(2, 0))
    return np.tensordot(tmp, t, axes=([1, 2], [1, 2]))


def _site_environment(left: np.ndarray, t: np.ndarray, right: np.ndarray) -> np.ndarray:
    """Everything but classifier site ``k``: shape ``(chi_l, d, chi_r)`` of that site."""
    return np.tensordot(np.tensordot(left, t, axes=(1, 0)), right, axes=(2, 1))


@dataclass
class _Contraction:
    chain: List[np.ndarray]
    image_log: float
    phase: complex
    left: List[Tuple[np.ndarray, float]]
    right: Dict[int, Tuple[np.ndarray, float]]
    log_ratio: float
    scores: np.ndarray = field(default=None)


def _image_chain(image) -> Tuple[List[np.ndarray], float, complex]:
    patches = [image] if isinstance(image, MPS) else list(image)
    chain = [t for m in patches for t in m.tensors]
    return chain, float(sum(m.log_scale for m in patches)), complex(np.prod([m.phase for m in patches]))


def _exp(log_value: float) -> float:
    try:
        return math.exp(log_value)
    except OverflowError as exc:
        raise NumericalError(
            f"Classifier contraction overflowed (log scale {log_value:.1f}); set a score log cap"
        ) from exc


def _contract(clf: ClassifierMPS, image) -> _Contraction:
    chain, image_log, phase = _image_chain(image)
    n = clf.n_sites
    if len(chain) != n:
        raise ShapeError(f"Image has {len(chain)} sites, classifier has {n}")
    for k, (w, t) in enumerate(zip(clf.tensors, chain)):
        if w.shape[1] != t.shape[1]:
            raise ShapeError(f"Physical dimension mismatch at site {k}: {w.shape[1]} vs {t.shape[1]}")
    c = clf.label_site

    env, log = np.ones((1, 1), dtype=np.complex128), 0.0
    left = [(env, log)]
    for k in range(c):
        env, log_norm = normalize(_transfer_left(env, clf.tensors[k], chain[k]))
        log += log_norm
        left.append((env, log))
    env, log = np.ones((1, 1), dtype=np.complex128), 0.0
    right = {n: (env, log)}
    for k in range(n - 1, c, -1):
        env, log_norm = normalize(_transfer_right(env, clf.tensors[k], chain[k]))
        log += log_norm
        right[k] = (env, log)

    (env_l, log_l), (env_r, log_r) = left[c], right[c + 1]
    tmp = np.tensordot(np.tensordot(env_l, clf.tensors[c], axes=(0, 0)), chain[c], axes=([0, 1], [0, 1]))
    vector = np.tensordot(tmp, env_r, axes=([1, 2], [0, 1])) * phase
    total_log = log_l + log_r + image_log
    applied_log = total_log if clf.log_cap is None else min(total_log, clf.log_cap)
    contraction = _Contraction(chain, image_log, phase, left, right, applied_log - total_log)
    contraction.scores = np.real(vector) * _exp(applied_log)
    return contraction


def _backward(clf: ClassifierMPS, contraction: _Contraction, score_grad: np.ndarray) -> List[np.ndarray]:
    """Gradient of ``sum_l score_grad[l] * scores[l]`` with respect to every classifier tensor."""
    chain, left, right = contraction.chain, contraction.left, contraction.right
    phase = contraction.phase
    base_log = contraction.image_log + contraction.log_ratio
    g = np.asarray(score_grad, dtype=np.float64)
    c, n = clf.label_site, clf.n_sites
    grads: List[Optional[np.ndarray]] = [None] * n

    (env_l, log_l), (env_r, log_r) = left[c], right[c + 1]
    piece = np.real(phase * _site_environment(env_l, chain[c], env_r)) * _exp(log_l + log_r + base_log)
    grads[c] = piece[:, :, None, :] * g[None, None, :, None]
    # label site contracted with the score gradient
    weighted = np.tensordot(clf.tensors[c], g, axes=(2, 0))

    env, log_norm = normalize(_transfer_right(env_r, weighted, chain[c]))
    env_log = log_r + log_norm
    for k in range(c - 1, -1, -1):
        lk, lk_log = left[k]
        grads[k] = np.real(phase * _site_environment(lk, chain[k], env)) * _exp(lk_log + env_log + base_log)
        env, log_norm = normalize(_transfer_right(env, clf.tensors[k], chain[k]))
        env_log += log_norm

    env, log_norm = normalize(_transfer_left(env_l, weighted, chain[c]))
    env_log = log_l + log_norm
    for k in range(c + 1, n):
        rk, rk_log = right[k + 1]
        grads[k] = np.real(phase * _site_environment(env, chain[k], rk)) * _exp(env_log + rk_log + base_log)
        env, log_norm = normalize(_transfer_left(env, clf.tensors[k], chain[k]))
        env_log += log_norm
    return grads


def mps_classifier_forward(clf: ClassifierMPS, image: Sequence[MPS]) -> np.ndarray:
    """
    Length-L score vector of one image (its patch MPS concatenated in patch order).

    Raises:
        ShapeError: If the image and classifier chains differ in length.
    """
    return _contract(clf, image).scores


def mps_classifier_gradients(
    clf: ClassifierMPS,
    images: Sequence[Sequence[MPS]],
    truths: Sequence[int],
    config: TrainConfig,
) -> Tuple[float, List[np.ndarray]]:
    """Batch loss and its exact gradient with respect to every classifier tensor."""
    value, grads, _ = batch_loss_and_gradients(clf, images, truths, _logit_scale(config, None), config.l2)
    return value, grads


# ---------------------------------------------------------------------------
# Circuit classifier
# ---------------------------------------------------------------------------

@dataclass
class CircuitClassifier:
    circuit: SequentialCircuit
    label_qubits: List[int]
    num_labels: int

    def __post_init__(self):
        if 2 ** len(self.label_qubits) < self.num_labels:
            raise ShapeError(f"{len(self.label_qubits)} label qubits cannot encode {self.num_labels} labels")

    def parameters(self) -> List[np.ndarray]:
        return [self.circuit.params]

    def with_parameters(self, params: Sequence[np.ndarray]) -> "CircuitClassifier":
        return CircuitClassifier(self.circuit.with_params(params[0]), self.label_qubits, self.num_labels)

    def probabilities(self, state: np.ndarray) -> np.ndarray:
        return marginal_probabilities(apply_circuit(self.circuit, state), self.label_qubits)

    def scores(self, state: np.ndarray) -> np.ndarray:
        return self.probabilities(state)[:self.num_labels]

    def loss_terms(self, state: np.ndarray, truth: int, logit_scale: float, weight: float):
        out = apply_circuit(self.circuit, state)
        probs = marginal_probabilities(out, self.label_qubits)
        scores = probs[:self.num_labels]
        ce, score_grad = _cross_entropy_terms(scores, truth, logit_scale, weight)
        dprobs = np.zeros_like(probs)
        dprobs[:self.num_labels] = score_grad
        cotangent = readout_cotangent(out, self.label_qubits, dprobs)
        return ce, scores, [param_gradients(self.circuit, state, cotangent, output=out)]


def init_circuit_classifier(
    n_qubits: int,
    layers: int,
    num_labels: int,
    seed: int,
    readout_tail: bool = True,
) -> CircuitClassifier:
    """Near-identity classifier circuit; the tail is dropped on fewer than 4 qubits."""
    tail = readout_tail and n_qubits >= 4
    circuit = init_circuit(n_qubits, layers, np.random.default_rng(seed), readout_tail=tail, role="class")
    return CircuitClassifier(circuit, default_label_qubits(n_qubits), num_labels)


def compress_image_circuit(
    target: np.ndarray,
    m_img: int,
    iterations: int,
    lr: float,
    seed: int,
    warm_start: bool = True,
    sweeps: int = DEFAULT_COMPRESS_SWEEPS,
    restarts: int = DEFAULT_COMPRESS_RESTARTS,
) -> Tuple[SequentialCircuit, float]:
    """
    Fit an ``m_img``-layer circuit on ``|0...0>`` to ``target``.

    Candidate starts are the peeled bond-dimension-2 layers of the target (with
    ``warm_start``), one near-identity circuit and ``restarts - 1`` circuits with angles
    spread over ``[-pi, pi]``. Each candidate gets up to ``sweeps`` polar sweeps, and Adam
    on ``1 - fidelity`` refines the best one for ``iterations`` steps. ``sweeps = 0``
    leaves plain Adam from the first candidate. Returns the best circuit seen and its
    fidelity.
    """
    target = np.asarray(target, dtype=np.complex128).reshape(-1)
    if abs(np.linalg.norm(target) - 1.0) > 1e-8:
        raise DomainError(f"Compression target must be normalized, norm is {np.linalg.norm(target):.6f}")
    if m_img < 1:
        raise ValueError(f"m_img must be at least 1, got {m_img}")
    if sweeps < 0 or restarts < 1:
        raise ValueError(f"Need sweeps >= 0 and restarts >= 1, got {sweeps} and {restarts}")
    n = int(round(math.log2(target.size)))
    start = zero_state(n)
    rng = np.random.default_rng(seed)

    candidates = [peel_layers(target, m_img)] if warm_start else []
    candidates.append(init_circuit(n, m_img, rng, role="img"))
    candidates += [init_circuit(n, m_img, rng, role="img", scale=math.pi) for _ in range(restarts - 1)]
    if sweeps == 0:
        circuit = candidates[0]
    else:
        swept = [polar_sweeps(c, start, target, sweeps) for c in candidates]
        circuit, fidelity = max(swept, key=lambda pair: pair[1])
        logger.debug(f"Best of {len(swept)} swept starts: fidelity {fidelity:.6f}")

    adam = AdamState.zeros([circuit.params])
    best_params, best_fidelity = circuit.params, -1.0
    for iteration in range(iterations + 1):
        out = apply_circuit(circuit, start)
        overlap = np.vdot(target, out)
        fidelity = float(abs(overlap) ** 2)
        if fidelity > best_fidelity:
            best_params, best_fidelity = circuit.params, fidelity
        if iteration == iterations or fidelity > 1.0 - EXACT_FIDELITY_TOL:
            break
        grads = param_gradients(circuit, start, -target * overlap, output=out)
        adam, (params,) = adam_step(adam, [circuit.params], [grads], lr)
        circuit = circuit.with_params(params)
        if iteration % 100 == 0:
            logger.debug(f"Compression iteration {iteration}: fidelity {fidelity:.6f}")
    return circuit.with_params(best_params), best_fidelity


# ---------------------------------------------------------------------------
# Inputs
# ---------------------------------------------------------------------------

def parallel_map(function, items: Sequence, threads: int) -> List:
    if threads <= 1 or len(items) <= 1:
        return [function(item) for item in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(function, items))


def mps_inputs(images: np.ndarray, config: TrainConfig) -> List[List[MPS]]:
    """Per-image patch MPS truncated to ``chi_img``."""
    layout = config.patch_layout
    return parallel_map(lambda img: compress_image_mps(img, layout, config.chi_img), list(images), config.threads)


def exact_state(img: np.ndarray, layout: PatchLayout) -> np.ndarray:
    """Dense FRQI state of a whole image: the tensor product of its patch states in patch order."""
    states = encode_patched(img, layout)
    total = math.prod(s.size for s in states)
    if total > DEFAULT_MAX_DENSE_ENTRIES:
        raise SizeError(f"Dense image state would have {total} entries, cap is {DEFAULT_MAX_DENSE_ENTRIES}")
    psi = states[0]
    for s in states[1:]:
        psi = np.kron(psi, s)
    return psi


def _inputs_cache_path(cache_dir: str, images: np.ndarray, config: TrainConfig) -> str:
    digest = hashlib.sha256(np.ascontiguousarray(images).tobytes()).hexdigest()[:12]
    start = "warm" if config.warm_start else "cold"
    name = (f"circuit-inputs-mimg{config.m_img}-it{config.compress_iterations}-"
            f"sw{config.compress_sweeps}x{config.compress_restarts}-{start}-"
            f"seed{config.seed}-{config.layout}-{digest}.npz")
    return os.path.join(cache_dir, name)


def circuit_inputs(
    images: np.ndarray,
    config: TrainConfig,
    cache_dir: Optional[str] = None,
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Input states of the circuit classifier and their fidelity with the exact encoding.

    ``m_img = 0`` gives the exact states. Otherwise every image is compressed once and,
    when ``cache_dir`` is given, cached there as ``.npz``.
    """
    layout = config.patch_layout
    exact = np.stack([exact_state(img, layout) for img in images])
    if config.m_img == 0:
        return exact, np.ones(len(images))

    cache_path = _inputs_cache_path(cache_dir, images, config) if cache_dir else None
    if cache_path and os.path.exists(cache_path):
        with np.load(cache_path) as cached:
            states, fidelities = cached["states"], cached["fidelities"]
        if states.shape == exact.shape:
            logger.info(f"Loaded cached compressed inputs from {cache_path}")
            return states, fidelities
        logger.warning(f"Ignoring cached inputs with shape {states.shape}: expected {exact.shape}")

    def compress(index: int):
        circuit, fidelity = compress_image_circuit(
            exact[index], config.m_img, config.compress_iterations, config.compress_learning_rate,
            seed=config.seed * 1_000_003 + index, warm_start=config.warm_start,
            sweeps=config.compress_sweeps, restarts=config.compress_restarts,
        )
        return apply_circuit(circuit, zero_state(circuit.n_qubits)), fidelity

    results = parallel_map(compress, list(range(len(images))), config.threads)
    states = np.stack([state for state, _ in results])
    fidelities = np.array([fidelity for _, fidelity in results])
    logger.info(f"Compressed {len(images)} images with M_img={config.m_img}: "
                f"mean fidelity {float(np.mean(fidelities)):.4f}")
    if cache_path:
        os.makedirs(cache_dir, exist_ok=True)
        np.savez(cache_path, states=states, fidelities=fidelities)
    return states, fidelities


# ---------------------------------------------------------------------------
# Training loop, evaluation and checkpoints
# ---------------------------------------------------------------------------

@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    train_acc: float
    test_acc: float


@dataclass
class Evaluation:
    accuracy: float
    confusion: np.ndarray
    predictions: np.ndarray


@dataclass
class TrainResult:
    model: Any
    best_model: Any
    history: List[EpochMetrics]
    best_epoch: int
    adam: AdamState

    @property
    def best_test_accuracy(self) -> float:
        return max(m.test_acc for m in self.history) if self.history else float("nan")

    @property
    def best100(self) -> float:
        return best100_accuracy([m.test_acc for m in self.history]) if self.history else float("nan")


def best100_accuracy(history: Sequence[float]) -> float:
    """Mean of the ``min(100, len)`` best test accuracies."""
    if len(history) == 0:
        raise ValueError("best100_accuracy needs a non-empty history")
    top = np.sort(np.asarray(history, dtype=np.float64))[::-1][:BEST_OF]
    return float(np.mean(top))


def _logit_scale(config: TrainConfig, n_pixels: Optional[int]) -> float:
    if config.logit_scale is not None:
        return float(config.logit_scale)
    if n_pixels is None:
        raise ValueError("logit_scale is unset and the pixel count is unknown")
    return float(n_pixels)


def batch_loss_and_gradients(
    model,
    inputs: Sequence,
    truths: Sequence[int],
    logit_scale: float,
    l2: float,
    threads: int = 1,
) -> Tuple[float, List[np.ndarray], np.ndarray]:
    """
    Minibatch loss, its gradient and the per-image scores.

    Per-image terms may run in parallel; they are reduced in index order.
    """
    batch = len(inputs)
    if batch == 0:
        raise DomainError("Empty minibatch")
    weight = 1.0 / batch
    results = parallel_map(lambda i: model.loss_terms(inputs[i], int(truths[i]), logit_scale, weight),
                   list(range(batch)), threads)
    params = model.parameters()
    grads = [np.zeros_like(p) for p in params]
    total = 0.0
    for ce, _, image_grads in results:
        total += ce
        for acc, g in zip(grads, image_grads):
            acc += g
    if l2:
        for acc, p in zip(grads, params):
            acc += (l2 / batch) * p
    value = total / batch + l2 / (2.0 * batch) * _l2_sum(params)
    return value, grads, np.stack([scores for _, scores, _ in results])


def evaluate(model, inputs: Sequence, labels: Sequence[int], num_labels: int, threads: int = 1) -> Evaluation:
    """Accuracy and confusion matrix (rows: truth, columns: prediction)."""
    if len(inputs) == 0:
        raise DomainError("Cannot evaluate on an empty set")
    scores = parallel_map(model.scores, list(inputs), threads)
    predictions = np.array([int(np.argmax(s[:num_labels])) for s in scores], dtype=np.int64)
    labels = np.asarray(labels, dtype=np.int64)
    confusion = np.zeros((num_labels, num_labels), dtype=np.int64)
    np.add.at(confusion, (labels, predictions), 1)
    return Evaluation(float(np.mean(predictions == labels)), confusion, predictions)


def fit(
    config: TrainConfig,
    model,
    train_inputs: Sequence,
    train_labels: np.ndarray,
    test_inputs: Sequence,
    test_labels: np.ndarray,
    num_labels: int,
    logit_scale: float,
    output_dir: Optional[str] = None,
) -> TrainResult:
    """
    Minibatch Adam over ``config.epochs`` epochs with a seeded shuffle per epoch.

    When ``output_dir`` is given, ``metrics.csv`` is rewritten every epoch and the best
    (by test accuracy) and final models are checkpointed as ``best.qpxc`` and
    ``final.qpxc``.
    """
    if len(train_inputs) == 0 or len(test_inputs) == 0:
        raise DomainError("Training needs non-empty train and test sets")
    rng = np.random.default_rng(config.seed)
    adam = AdamState.zeros(model.parameters())
    history: List[EpochMetrics] = []
    best_model, best_epoch, best_acc = model, 0, -1.0
    n_train = len(train_inputs)
    train_labels = np.asarray(train_labels, dtype=np.int64)

    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n_train)
        loss_sum, correct = 0.0, 0
        for start in range(0, n_train, config.batch_size):
            idx = order[start:start + config.batch_size]
            value, grads, scores = batch_loss_and_gradients(
                model, [train_inputs[i] for i in idx], train_labels[idx], logit_scale, config.l2, config.threads,
            )
            if not np.isfinite(value):
                raise NumericalError(f"Training loss became {value} at epoch {epoch}")
            loss_sum += value * len(idx)
            correct += int(np.sum(np.argmax(scores, axis=1) == train_labels[idx]))
            adam, params = adam_step(adam, model.parameters(), grads, config.learning_rate)
            model = model.with_parameters(params)

        test_acc = evaluate(model, test_inputs, test_labels, num_labels, config.threads).accuracy
        metrics = EpochMetrics(epoch, loss_sum / n_train, correct / n_train, test_acc)
        history.append(metrics)
        logger.info(f"Epoch {epoch}/{config.epochs}: loss {metrics.train_loss:.5f}, "
                    f"train acc {metrics.train_acc:.4f}, test acc {metrics.test_acc:.4f}")
        if test_acc > best_acc:
            best_model, best_epoch, best_acc = model, epoch, test_acc
            if output_dir:
                save_model_checkpoint(os.path.join(output_dir, "best.qpxc"), model, config, epoch, history, adam)
        if output_dir:
            write_metrics_csv(os.path.join(output_dir, "metrics.csv"), history)

    if output_dir:
        save_model_checkpoint(os.path.join(output_dir, "final.qpxc"), model, config, config.epochs, history, adam)
    return TrainResult(model, best_model, history, best_epoch, adam)


def prepare_inputs(config: TrainConfig, images: np.ndarray, cache_dir: Optional[str] = None) -> List:
    """Model inputs for a stack of images: patch MPS lists or dense circuit states."""
    if config.model == "mps":
        return mps_inputs(images, config)
    states, _ = circuit_inputs(images, config, cache_dir)
    return list(states)


def build_model(config: TrainConfig, sample_input, num_labels: int):
    if config.model == "mps":
        n_sites = sum(len(m) for m in sample_input)
        return init_classifier_mps(n_sites, config.chi_class, num_labels, config.seed,
                                   noise=config.init_noise, log_cap=config.score_log_cap)
    n_qubits = int(round(math.log2(np.asarray(sample_input).size)))
    return init_circuit_classifier(n_qubits, config.m_class, num_labels, config.seed, config.readout_tail)


def train(config: TrainConfig, train_set: Dataset, test_set: Dataset, output_dir: Optional[str] = None) -> TrainResult:
    """Encode both sets, build the model named by ``config.model`` and run ``fit``."""
    config.validate()
    if len(train_set) == 0 or len(test_set) == 0:
        raise DomainError("Training needs non-empty train and test sets")
    if train_set.num_labels != test_set.num_labels:
        raise ShapeError(f"Train set has {train_set.num_labels} labels, test set {test_set.num_labels}")
    height, width = train_set.image_shape
    num_labels = train_set.num_labels
    train_inputs = prepare_inputs(config, train_set.images, output_dir)
    test_inputs = prepare_inputs(config, test_set.images, output_dir)
    model = build_model(config, train_inputs[0], num_labels)
    logger.info(f"Training {config.model} classifier on {len(train_set)} images, testing on {len(test_set)}")
    return fit(config, model, train_inputs, train_set.labels, test_inputs, test_set.labels,
               num_labels, _logit_scale(config, width * height), output_dir)


def save_model_checkpoint(
    path: str,
    model,
    config: TrainConfig,
    epoch: int,
    history: Sequence[EpochMetrics],
    adam: Optional[AdamState] = None,
) -> str:
    """QPIX-CKPT file with the model parameters, the Adam moments and the metrics so far."""
    manifest: Dict[str, Any] = {
        "config": config.to_dict(),
        "epoch": epoch,
        "metrics": {
            "history": [asdict(m) for m in history],
            "best_test_accuracy": max((m.test_acc for m in history), default=None),
            "best100_accuracy": best100_accuracy([m.test_acc for m in history]) if history else None,
        },
    }
    arrays: Dict[str, np.ndarray] = {}
    if isinstance(model, ClassifierMPS):
        manifest.update(model="mps", num_labels=model.num_labels, label_site=model.label_site,
                        log_cap=model.log_cap)
        for k, t in enumerate(model.tensors):
            arrays[f"tensor.{k}"] = t
    elif isinstance(model, CircuitClassifier):
        c = model.circuit
        manifest.update(model="circuit", num_labels=model.num_labels, label_qubits=list(model.label_qubits),
                        n_qubits=c.n_qubits, layers=c.layers, readout_tail=c.readout_tail, role=c.role)
        arrays["angles"] = c.params
    else:
        raise TypeError(f"Cannot checkpoint a {type(model).__name__}")
    if adam is not None:
        manifest["adam"] = {"step": adam.step, "beta1": adam.beta1, "beta2": adam.beta2, "eps": adam.eps}
        for i, (m, v) in enumerate(zip(adam.m, adam.v)):
            arrays[f"adam.m.{i}"] = m
            arrays[f"adam.v.{i}"] = v
    return save_checkpoint(path, manifest, arrays)


def load_model_checkpoint(path: str) -> Tuple[Any, Dict[str, Any], Optional[AdamState]]:
    """Inverse of ``save_model_checkpoint``: ``(model, manifest, adam_state)``."""
    manifest, arrays = load_checkpoint(path)
    try:
        if manifest["model"] == "mps":
            count = sum(1 for name in arrays if name.startswith("tensor."))
            tensors = [arrays[f"tensor.{k}"] for k in range(count)]
            model = ClassifierMPS(tensors, int(manifest["label_site"]), int(manifest["num_labels"]),
                                  manifest.get("log_cap"))
        elif manifest["model"] == "circuit":
            circuit = SequentialCircuit(int(manifest["n_qubits"]), int(manifest["layers"]), arrays["angles"],
                                        bool(manifest["readout_tail"]), manifest.get("role", "class"))
            model = CircuitClassifier(circuit, [int(q) for q in manifest["label_qubits"]],
                                      int(manifest["num_labels"]))
        else:
            raise FormatError(f"{path}: unknown model kind {manifest['model']!r}")
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint is missing {exc}") from exc
    adam = None
    if "adam" in manifest:
        n_params = len(model.parameters())
        adam = AdamState(
            [arrays[f"adam.m.{i}"] for i in range(n_params)],
            [arrays[f"adam.v.{i}"] for i in range(n_params)],
            step=int(manifest["adam"]["step"]),
            beta1=float(manifest["adam"]["beta1"]),
            beta2=float(manifest["adam"]["beta2"]),
            eps=float(manifest["adam"]["eps"]),
        )
    return model, manifest, adam


def write_metrics_csv(path: str, history: Sequence[EpochMetrics]) -> str:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    try:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(METRICS_COLUMNS)
            for m in history:
                writer.writerow([m.epoch, repr(float(m.train_loss)), repr(float(m.train_acc)), repr(float(m.test_acc))])
    except OSError as exc:
        raise OSError(f"Failed to write metrics {path}: {exc}") from exc
    return path


def read_metrics_csv(path: str) -> Dict[str, List[float]]:
    """Columns of a metrics (or sweep) CSV as float lists, keyed by header."""
    try:
        with open(path, "r", encoding="utf-8", newline="") as f:
            rows = list(csv.DictReader(f))
    except OSError as exc:
        raise OSError(f"Failed to read metrics {path}: {exc}") from exc
    if not rows:
        raise FormatError(f"{path}: no metric rows")
    try:
        return {key: [float(row[key]) for row in rows] for key in rows[0]}
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: non-numeric metric value: {exc}") from exc
