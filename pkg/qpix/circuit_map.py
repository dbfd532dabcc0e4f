"""
Exact conversions between matrix-product states and sequential circuits.

``mps_to_staircase`` turns a right-canonical MPS into one unitary per site acting on
``ceil(log2 chi) + 1`` adjacent qubits; applied first to last on ``|0...0>`` they
prepare the MPS state. ``layered_circuit_to_mps`` goes the other way for the
two-qubit layered circuits of ``seq_circuit``.

Register layout of the staircase: before the unitary of site ``k`` runs, qubits
``0..k-1`` hold their final values and the bond index ``alpha_{k-1}`` sits on the
qubits right after them. The unitary maps ``|alpha_{k-1}, 0...0>`` to
``sum B[k]^{j}_{alpha_{k-1} alpha_k} |j, alpha_k>``.
"""

import json
import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from qpix.errors import PreconditionError, ShapeError
from qpix.frqi import num_qubits
from qpix.mps import MPS, SVD_ZERO_TOL, from_statevector, isometry_deviation, right_canonicalize
from qpix.seq_circuit import NUM_ANGLES, SequentialCircuit, apply_gate, gate_angles, gate_matrix, zero_state
from qpix.tensors import qr_unitary_completion, svd

# Module-level logger
logger = logging.getLogger(__name__)

ISOMETRY_TOL = 1e-8
GATE_LIST_FORMAT = "qpix-staircase"
GATE_LIST_VERSION = 1


@dataclass(frozen=True)
class StaircaseUnitary:
    site: int
    first_qubit: int
    span: int
    matrix: np.ndarray


def _embedding_bits(chi: int) -> int:
    return max(0, math.ceil(math.log2(chi))) if chi > 1 else 0


def mps_to_staircase(m: MPS, tol: float = ISOMETRY_TOL) -> List[StaircaseUnitary]:
    """
    Map a right-canonical qubit MPS to a staircase of unitaries.

    Bonds are embedded in ``m_bits = ceil(log2 chi)`` qubits, unused basis states acting
    as zero padding; free columns come from ``qr_unitary_completion``. Unitaries that
    would reach past the last qubit are shifted up and padded with identities, so every
    unitary spans ``min(m_bits + 1, n)`` qubits. The global scalars of ``m`` are not
    part of the circuit.

    Raises:
        ShapeError: If a site is not a qubit.
        PreconditionError: If the isometry condition fails by more than ``tol``.
    """
    if any(d != 2 for d in m.physical_dims):
        raise ShapeError(f"Staircase mapping needs qubit sites, got physical dims {m.physical_dims}")
    deviation = isometry_deviation(m)
    if deviation > tol:
        raise PreconditionError(f"MPS is not right-canonical: isometry deviation {deviation:.3e} > {tol:.1e}")
    # re-orthonormalize to machine precision before completing unitaries
    tensors = right_canonicalize(m).tensors
    n = len(tensors)
    m_bits = _embedding_bits(max((t.shape[2] for t in tensors[:-1]), default=1))
    width = min(m_bits + 1, n)

    unitaries = []
    r_prev = 0
    for k, b in enumerate(tensors):
        chi_l, _, chi_r = b.shape
        span = min(m_bits + 1, n - k)
        r_out = span - 1
        fresh = span - r_prev
        dim = 2 ** span
        columns = np.zeros((dim, chi_l), dtype=np.complex128)
        for j in range(2):
            columns[j * 2 ** r_out:j * 2 ** r_out + chi_r, :] = b[:, j, :].T
        completed = qr_unitary_completion(columns)
        inputs = [a * 2 ** fresh for a in range(chi_l)]
        taken = set(inputs)
        others = [col for col in range(dim) if col not in taken]
        u = np.zeros((dim, dim), dtype=np.complex128)
        u[:, inputs] = completed[:, :chi_l]
        u[:, others] = completed[:, chi_l:]

        start = k - (width - span)
        if width > span:
            u = np.kron(np.eye(2 ** (width - span)), u)
        unitaries.append(StaircaseUnitary(site=k, first_qubit=start, span=width, matrix=u))
        r_prev = r_out
    logger.debug(f"Mapped {n}-site MPS to {len(unitaries)} unitaries on {width} qubits each")
    return unitaries


def staircase_to_statevector(unitaries: Sequence[StaircaseUnitary], n_qubits: int) -> np.ndarray:
    """Apply the staircase, first to last, to ``|0...0>``."""
    psi = zero_state(n_qubits)
    for u in unitaries:
        psi = apply_gate(psi, u.matrix, u.first_qubit, n_qubits)
    return psi


def staircase_to_layer(unitaries: Sequence[StaircaseUnitary], n_qubits: int) -> SequentialCircuit:
    """
    Merge a staircase of one- or two-qubit unitaries into a single circuit layer.

    Each unitary is placed on the adjacent pair starting at ``min(first_qubit, n - 2)``
    and consecutive unitaries on the same pair are multiplied, giving one gate per pair
    in staircase order. Angles are recovered up to a global phase.
    """
    if n_qubits < 2:
        raise ShapeError("A circuit layer needs at least 2 qubits")
    pairs: List[int] = []
    gates: List[np.ndarray] = []
    for u in unitaries:
        if u.span > 2:
            raise PreconditionError(f"Only bond dimension 2 staircases fit one layer, got a {u.span}-qubit unitary")
        pair = min(u.first_qubit, n_qubits - 2)
        if u.span == 2:
            g = u.matrix
        elif u.first_qubit == pair:
            g = np.kron(u.matrix, np.eye(2))
        else:
            g = np.kron(np.eye(2), u.matrix)
        if pairs and pairs[-1] == pair:
            gates[-1] = g @ gates[-1]
        else:
            pairs.append(pair)
            gates.append(g)
    if pairs != list(range(n_qubits - 1)):
        raise ShapeError(f"Staircase does not cover the pairs of {n_qubits} qubits in order: {pairs}")
    return SequentialCircuit(n_qubits, 1, np.stack([gate_angles(g) for g in gates]), role="img")


def peel_layers(target: np.ndarray, layers: int) -> SequentialCircuit:
    """
    ``layers``-layer circuit read off ``target`` one bond-dimension-2 truncation at a time.

    Each round maps the truncation of the current residual to one layer and un-applies
    that layer from the residual, which moves it towards ``|0...0>``. The first layer
    found acts last. Exact for targets of bond dimension 2; a starting point otherwise.
    """
    psi = np.asarray(target, dtype=np.complex128).reshape(-1)
    n = num_qubits(psi)
    found = []
    for _ in range(layers):
        approx, error = from_statevector(psi, chi_max=2)
        layer = staircase_to_layer(mps_to_staircase(approx), n)
        found.append(layer.params)
        for q, u in reversed(list(zip(layer.gate_sites, layer.matrices()))):
            psi = apply_gate(psi, u.conj().T, q, n)
        logger.debug(f"Peeled layer {len(found)}/{layers}: truncation error {error:.3e}")
    params = np.concatenate(found[::-1]) if found else np.zeros((0, NUM_ANGLES))
    return SequentialCircuit(n, layers, params, role="img")


def layered_circuit_to_mps(c: SequentialCircuit) -> MPS:
    """
    Exact MPS of ``c`` applied to ``|0...0>``.

    Gates are applied to neighbouring site pairs and split with an SVD, dropping only
    numerically zero singular values, so bonds stay within ``2 ** layers``. Each layer
    starts from a right-canonical chain so the split sees true Schmidt values.
    """
    tensors = [np.array([1.0, 0.0], dtype=np.complex128).reshape(1, 2, 1) for _ in range(c.n_qubits)]
    cap = None if c.readout_tail else 2 ** c.layers
    for index, (q, g) in enumerate(zip(c.gate_sites, c.matrices())):
        if index > 0 and q == 0:
            tensors = right_canonicalize(MPS(tensors)).tensors
        theta = np.tensordot(tensors[q], tensors[q + 1], axes=(2, 0))
        chi_l, chi_r = theta.shape[0], theta.shape[3]
        theta = np.einsum("abcd,xcdy->xaby", g.reshape(2, 2, 2, 2), theta)
        u, s, vh = svd(theta.reshape(chi_l * 2, 2 * chi_r))
        keep = max(1, int(np.count_nonzero(s > SVD_ZERO_TOL * s[0])))
        if cap is not None:
            keep = min(keep, cap)
        tensors[q] = u[:, :keep].reshape(chi_l, 2, keep)
        tensors[q + 1] = (s[:keep, None] * vh[:keep, :]).reshape(keep, 2, chi_r)
    return right_canonicalize(MPS(tensors))


def gate_list_json(unitaries: Sequence[StaircaseUnitary]) -> str:
    """JSON gate list; complex entries are ``[re, im]`` pairs, matrices row-major."""
    payload = {
        "format": GATE_LIST_FORMAT,
        "version": GATE_LIST_VERSION,
        "order": "applied first to last on |0...0>, qubit 0 is the most significant bit",
        "gates": [
            {
                "site": u.site,
                "first_qubit": u.first_qubit,
                "span": u.span,
                "matrix": [[[float(z.real), float(z.imag)] for z in row] for row in u.matrix],
            }
            for u in unitaries
        ],
    }
    return json.dumps(payload, indent=2)


def circuit_to_gate_list(c: SequentialCircuit) -> List[StaircaseUnitary]:
    """Layered circuit gates as staircase entries, for export next to mapped circuits."""
    return [
        StaircaseUnitary(site=index, first_qubit=q, span=2, matrix=gate_matrix(theta))
        for index, (q, theta) in enumerate(zip(c.gate_sites, c.params))
    ]
