"""
Parameterized sequential circuits of two-qubit gates.

Qubit 0 is the most significant bit of a basis index. Each gate is
``exp(-i/2 * sum_{(r, g) != (0, 0)} theta_{r,g} sigma^r (x) sigma^g)`` with the 15
angles stored in ``PAULI_PAIRS`` order. A layer applies one gate on every adjacent
pair, top to bottom: (0, 1), (1, 2), ..., (n-2, n-1).
"""

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg

from qpix.errors import ShapeError
from qpix.frqi import num_qubits

# Module-level logger
logger = logging.getLogger(__name__)

PAULIS = (
    np.eye(2, dtype=np.complex128),
    np.array([[0, 1], [1, 0]], dtype=np.complex128),
    np.array([[0, -1j], [1j, 0]], dtype=np.complex128),
    np.array([[1, 0], [0, -1]], dtype=np.complex128),
)
PAULI_PAIRS: Tuple[Tuple[int, int], ...] = tuple(
    (rho, gamma) for rho in range(4) for gamma in range(4) if (rho, gamma) != (0, 0)
)
GENERATORS = np.stack([np.kron(PAULIS[rho], PAULIS[gamma]) for rho, gamma in PAULI_PAIRS])
NUM_ANGLES = len(PAULI_PAIRS)
READOUT_TAIL_GATES = 3
DEFAULT_LABEL_QUBITS = 4
DEFAULT_INIT_SCALE = 0.01
SWEEP_TOL = 1e-10


def _check_angles(theta: np.ndarray) -> np.ndarray:
    theta = np.asarray(theta, dtype=np.float64)
    if theta.shape != (NUM_ANGLES,):
        raise ShapeError(f"A gate takes {NUM_ANGLES} angles, got shape {theta.shape}")
    return theta


def generator(theta: np.ndarray) -> np.ndarray:
    """Hermitian generator ``sum theta_{r,g} sigma^r (x) sigma^g``."""
    return np.tensordot(_check_angles(theta), GENERATORS, axes=1)


def gate_matrix(theta: np.ndarray) -> np.ndarray:
    """4x4 unitary for 15 angles, via the eigendecomposition of the generator."""
    w, v = np.linalg.eigh(generator(theta))
    return (v * np.exp(-0.5j * w)) @ v.conj().T


def gate_derivatives(theta: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """
    Gate matrix and its exact derivative with respect to every angle.

    The derivative of the exponential uses divided differences of ``exp`` on the
    generator's eigenvalues (Daleckii-Krein), so it is exact up to rounding.

    Returns:
        ``(U, dU)`` with ``dU`` of shape ``(15, 4, 4)``.
    """
    w, v = np.linalg.eigh(generator(theta))
    lam = -0.5j * w
    u = (v * np.exp(lam)) @ v.conj().T
    # (e^a - e^b) / (a - b) = e^{(a+b)/2} * sinc of the half difference
    half_diff = -(w[:, None] - w[None, :]) / 4.0
    gamma = np.exp((lam[:, None] + lam[None, :]) / 2.0) * np.sinc(half_diff / np.pi)
    rotated = np.einsum("ji,ajk,kl->ail", v.conj(), -0.5j * GENERATORS, v)
    du = np.einsum("ij,ajk,lk->ail", v, gamma[None, :, :] * rotated, v.conj())
    return u, du


def gate_angles(u: np.ndarray) -> np.ndarray:
    """
    Angles of a 4x4 unitary, the inverse of ``gate_matrix`` up to a global phase.

    Uses the principal logarithm from the complex Schur form. Angles are recovered
    exactly when the generator's spectrum lies within (-2*pi, 2*pi).
    """
    u = np.asarray(u, dtype=np.complex128)
    if u.shape != (4, 4):
        raise ShapeError(f"gate_angles expects a 4x4 matrix, got shape {u.shape}")
    u = u / np.linalg.det(u) ** 0.25
    t, z = scipy.linalg.schur(u, output="complex")
    h = (z * (-2.0 * np.angle(np.diag(t)))) @ z.conj().T
    # identity component of h is the dropped global phase
    return np.real(np.einsum("ij,aji->a", h, GENERATORS)) / 4.0


def apply_gate(state: np.ndarray, matrix: np.ndarray, first_qubit: int, n_qubits: int) -> np.ndarray:
    """Apply a gate on the contiguous qubits ``first_qubit .. first_qubit + k - 1``."""
    span = num_qubits(matrix[:, 0])
    if first_qubit < 0 or first_qubit + span > n_qubits:
        raise ShapeError(f"A {span}-qubit gate at qubit {first_qubit} does not fit in {n_qubits} qubits")
    psi = np.asarray(state).reshape(2 ** first_qubit, 2 ** span, 2 ** (n_qubits - first_qubit - span))
    return np.tensordot(matrix, psi, axes=(1, 1)).transpose(1, 0, 2).reshape(-1)


def _local_overlap(bra: np.ndarray, ket: np.ndarray, first_qubit: int, n_qubits: int) -> np.ndarray:
    """``M[a, b] = sum_{rest} conj(bra[.., a, ..]) ket[.., b, ..]`` on a two-qubit window."""
    shape = (2 ** first_qubit, 4, 2 ** (n_qubits - first_qubit - 2))
    return np.einsum("iaj,ibj->ab", bra.reshape(shape).conj(), ket.reshape(shape))


@dataclass
class SequentialCircuit:
    """
    ``layers`` staircase layers of two-qubit gates, optionally followed by the
    three-gate readout tail on pairs (n-2, n-1), (n-3, n-2), (n-4, n-3).

    ``params`` has one row of 15 angles per gate in application order. ``role`` tags
    the circuit as an image-preparation (``"img"``) or classifier (``"class"``) circuit.
    """

    n_qubits: int
    layers: int
    params: np.ndarray
    readout_tail: bool = False
    role: str = "class"

    def __post_init__(self):
        self.params = np.asarray(self.params, dtype=np.float64)
        if self.layers < 0:
            raise ValueError(f"layers must be non-negative, got {self.layers}")
        if self.n_qubits < 2 and (self.layers > 0 or self.readout_tail):
            raise ShapeError("Two-qubit gates need at least 2 qubits")
        if self.readout_tail and self.n_qubits < READOUT_TAIL_GATES + 1:
            raise ShapeError(f"The readout tail needs at least {READOUT_TAIL_GATES + 1} qubits")
        expected = (self.n_gates, NUM_ANGLES)
        if self.params.shape != expected:
            raise ShapeError(f"Circuit params must have shape {expected}, got {self.params.shape}")

    @property
    def n_gates(self) -> int:
        return self.layers * max(self.n_qubits - 1, 0) + (READOUT_TAIL_GATES if self.readout_tail else 0)

    @property
    def gate_sites(self) -> List[int]:
        """First qubit of each gate, in application order."""
        sites = [q for _ in range(self.layers) for q in range(self.n_qubits - 1)]
        if self.readout_tail:
            sites += [self.n_qubits - 2 - t for t in range(READOUT_TAIL_GATES)]
        return sites

    def matrices(self) -> List[np.ndarray]:
        return [gate_matrix(theta) for theta in self.params]

    def with_params(self, params: np.ndarray) -> "SequentialCircuit":
        return SequentialCircuit(self.n_qubits, self.layers, params, self.readout_tail, self.role)


def init_circuit(
    n_qubits: int,
    layers: int,
    rng: np.random.Generator,
    readout_tail: bool = False,
    role: str = "class",
    scale: float = DEFAULT_INIT_SCALE,
) -> SequentialCircuit:
    """Near-identity circuit with angles drawn uniformly from ``[-scale, scale]``."""
    n_gates = layers * max(n_qubits - 1, 0) + (READOUT_TAIL_GATES if readout_tail else 0)
    params = rng.uniform(-scale, scale, size=(n_gates, NUM_ANGLES))
    return SequentialCircuit(n_qubits, layers, params, readout_tail, role)


def zero_state(n_qubits: int) -> np.ndarray:
    psi = np.zeros(2 ** n_qubits, dtype=np.complex128)
    psi[0] = 1.0
    return psi


def _check_state(c: SequentialCircuit, state: np.ndarray) -> np.ndarray:
    psi = np.asarray(state, dtype=np.complex128).reshape(-1)
    if psi.size != 2 ** c.n_qubits:
        raise ShapeError(f"Circuit on {c.n_qubits} qubits cannot act on a state of length {psi.size}")
    return psi


def apply_circuit(c: SequentialCircuit, state: np.ndarray) -> np.ndarray:
    """Apply every gate of ``c`` in order."""
    psi = _check_state(c, state)
    for q, u in zip(c.gate_sites, c.matrices()):
        psi = apply_gate(psi, u, q, c.n_qubits)
    return psi


def default_label_qubits(n_qubits: int) -> List[int]:
    """The four qubits at the readout end of the staircase, most significant first."""
    return list(range(max(0, n_qubits - DEFAULT_LABEL_QUBITS), n_qubits))


def label_indices(n_qubits: int, label_qubits: Sequence[int]) -> np.ndarray:
    """For every basis index, the label bitstring it falls in (first listed qubit is the MSB)."""
    qubits = list(label_qubits)
    if not qubits:
        raise IndexError("At least one label qubit is required")
    if len(set(qubits)) != len(qubits):
        raise IndexError(f"Duplicate label qubits: {qubits}")
    for q in qubits:
        if not 0 <= q < n_qubits:
            raise IndexError(f"Label qubit {q} out of range for {n_qubits} qubits")
    basis = np.arange(2 ** n_qubits)
    index = np.zeros_like(basis)
    for q in qubits:
        index = (index << 1) | ((basis >> (n_qubits - 1 - q)) & 1)
    return index


def marginal_probabilities(state: np.ndarray, label_qubits: Sequence[int]) -> np.ndarray:
    """Normalized marginal distribution of the label-qubit bitstrings."""
    psi = np.asarray(state).reshape(-1)
    n = num_qubits(psi)
    weights = np.abs(psi) ** 2
    probs = np.bincount(label_indices(n, label_qubits), weights=weights, minlength=2 ** len(label_qubits))
    return probs / np.sum(weights)


def readout(c: SequentialCircuit, state: np.ndarray, label_qubits: Optional[Sequence[int]] = None) -> np.ndarray:
    """Apply ``c`` and return the label-qubit probability vector."""
    qubits = default_label_qubits(c.n_qubits) if label_qubits is None else label_qubits
    return marginal_probabilities(apply_circuit(c, state), qubits)


def readout_cotangent(state: np.ndarray, label_qubits: Sequence[int], dprobs: np.ndarray) -> np.ndarray:
    """
    Pull a gradient on the readout probabilities back to the state.

    Returns ``g = d(cost)/d(conj psi)``, including the normalization of the marginals.
    """
    psi = np.asarray(state, dtype=np.complex128).reshape(-1)
    n = num_qubits(psi)
    index = label_indices(n, label_qubits)
    dprobs = np.asarray(dprobs, dtype=np.float64)
    if dprobs.shape != (2 ** len(label_qubits),):
        raise ShapeError(f"Expected {2 ** len(label_qubits)} probability gradients, got {dprobs.shape}")
    total = float(np.sum(np.abs(psi) ** 2))
    probs = np.bincount(index, weights=np.abs(psi) ** 2, minlength=dprobs.size) / total
    return psi * (dprobs[index] - np.dot(dprobs, probs)) / total


def predict(s: np.ndarray, num_labels: int) -> int:
    """Argmax over the first ``num_labels`` entries; ties go to the lowest index."""
    s = np.asarray(s)
    if num_labels > s.size:
        raise ValueError(f"{num_labels} labels need at least {num_labels} readout entries, got {s.size}")
    return int(np.argmax(s[:num_labels]))


def param_gradients(
    c: SequentialCircuit,
    state: np.ndarray,
    cotangent: np.ndarray,
    output: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Exact gradients of a real cost of the circuit output with respect to every angle.

    ``cotangent`` is ``d(cost)/d(conj psi_out)``, so that
    ``d(cost) = 2 Re <cotangent | d psi_out>``. The sweep runs backwards through the gates,
    un-applying each one to both the state and the cotangent.

    Returns:
        Array shaped like ``c.params``.
    """
    psi = apply_circuit(c, state) if output is None else _check_state(c, output)
    lam = _check_state(c, cotangent)
    grads = np.zeros_like(c.params)
    sites = c.gate_sites
    for g in range(c.n_gates - 1, -1, -1):
        u, du = gate_derivatives(c.params[g])
        q = sites[g]
        psi = apply_gate(psi, u.conj().T, q, c.n_qubits)
        overlap = _local_overlap(lam, psi, q, c.n_qubits)
        grads[g] = 2.0 * np.real(np.einsum("ab,kab->k", overlap, du))
        lam = apply_gate(lam, u.conj().T, q, c.n_qubits)
    return grads


def polar_sweeps(
    c: SequentialCircuit,
    state: np.ndarray,
    target: np.ndarray,
    sweeps: int,
    tol: float = SWEEP_TOL,
) -> Tuple[SequentialCircuit, float]:
    """
    Raise ``|<target| c |state>|^2`` by re-solving one gate at a time.

    With the other gates fixed the overlap is ``Tr(U K)`` for the gate ``U`` and its
    environment ``K``; its modulus is largest at the adjoint of the unitary polar factor
    of ``K``. A sweep visits the gates first to last and never lowers the fidelity.
    Sweeping stops early once a sweep gains less than ``tol``.

    Returns:
        The swept circuit and its fidelity.
    """
    psi0 = _check_state(c, state)
    target = _check_state(c, target)
    sites = c.gate_sites
    matrices = c.matrices()
    fidelity = float(abs(np.vdot(target, apply_circuit(c, psi0))) ** 2)
    for sweep in range(sweeps):
        # environments from the right use the gates not yet revisited in this sweep
        envs: List[np.ndarray] = [target] * len(matrices)
        lam = target
        for g in range(len(matrices) - 1, -1, -1):
            envs[g] = lam
            lam = apply_gate(lam, matrices[g].conj().T, sites[g], c.n_qubits)
        psi = psi0
        for g, q in enumerate(sites):
            polar, _ = scipy.linalg.polar(_local_overlap(envs[g], psi, q, c.n_qubits).T)
            matrices[g] = polar.conj().T
            psi = apply_gate(psi, matrices[g], q, c.n_qubits)
        previous, fidelity = fidelity, float(abs(np.vdot(target, psi)) ** 2)
        if fidelity - previous < tol:
            logger.debug(f"Polar sweeps converged after {sweep + 1}: fidelity {fidelity:.10f}")
            break
    if not matrices:
        return c, fidelity
    return c.with_params(np.stack([gate_angles(u) for u in matrices])), fidelity
