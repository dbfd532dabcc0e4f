"""
Matrix-product states.

Site tensors have shape ``(chi_left, d, chi_right)`` with boundary bonds of extent 1.
Bond ``b`` (0-based) links site ``b`` and site ``b + 1``. The represented state is
``exp(log_scale) * phase * (contraction of the tensors)``; norms and phases stay in
those two scalars instead of being absorbed into the tensors.
"""

import logging
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple

import numpy as np

from qpix.errors import DomainError, ShapeError, SizeError
from qpix.frqi import decode_patched, encode_patched, num_qubits
from qpix.imaging import PatchLayout
from qpix.tensors import normalize, svd, truncated_svd

# Module-level logger
logger = logging.getLogger(__name__)

DEFAULT_MAX_DENSE_ENTRIES = 2 ** 24
# singular values below this fraction of the largest one are treated as exact zeros
SVD_ZERO_TOL = 1e-14


@dataclass
class MPS:
    tensors: List[np.ndarray]
    log_scale: float = 0.0
    phase: complex = 1.0 + 0.0j
    truncation_error: float = 0.0
    metadata: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.tensors:
            raise ShapeError("An MPS needs at least one site tensor")
        for k, t in enumerate(self.tensors):
            if t.ndim != 3:
                raise ShapeError(f"Site {k} tensor must be rank 3, got shape {t.shape}")
        if self.tensors[0].shape[0] != 1 or self.tensors[-1].shape[2] != 1:
            raise ShapeError("Boundary bonds of an MPS must have extent 1")
        for k in range(len(self.tensors) - 1):
            if self.tensors[k].shape[2] != self.tensors[k + 1].shape[0]:
                raise ShapeError(
                    f"Bond {k} mismatch: site {k} right extent {self.tensors[k].shape[2]} vs "
                    f"site {k + 1} left extent {self.tensors[k + 1].shape[0]}"
                )

    def __len__(self) -> int:
        return len(self.tensors)

    @property
    def physical_dims(self) -> List[int]:
        return [t.shape[1] for t in self.tensors]

    @property
    def bond_dims(self) -> List[int]:
        return [t.shape[2] for t in self.tensors[:-1]]

    @property
    def chi(self) -> int:
        """Largest bond extent (1 for a single site)."""
        return max(self.bond_dims, default=1)

    def copy(self) -> "MPS":
        return replace(self, tensors=[t.copy() for t in self.tensors], metadata=dict(self.metadata))


def product_state(vectors: Sequence[np.ndarray]) -> MPS:
    """Bond-dimension-1 MPS from one local vector per site."""
    return MPS([np.asarray(v, dtype=np.complex128).reshape(1, -1, 1) for v in vectors])


def random_mps(n_sites: int, chi: int, rng: np.random.Generator, d: int = 2) -> MPS:
    """Random right-canonical, normalized MPS with bonds capped at ``chi``."""
    bonds = [1] + [min(chi, d ** (k + 1), d ** (n_sites - k - 1)) for k in range(n_sites - 1)] + [1]
    tensors = [
        rng.normal(size=(bonds[k], d, bonds[k + 1])) + 1j * rng.normal(size=(bonds[k], d, bonds[k + 1]))
        for k in range(n_sites)
    ]
    result = right_canonicalize(MPS(tensors))
    result.log_scale = 0.0
    return result


def _drop_negligible(u: np.ndarray, s: np.ndarray, vh: np.ndarray):
    if s.size == 0 or s[0] == 0.0:
        return u[:, :1], s[:1], vh[:1, :]
    keep = max(1, int(np.count_nonzero(s > SVD_ZERO_TOL * s[0])))
    return u[:, :keep], s[:keep], vh[:keep, :]


def from_statevector(
    state: np.ndarray,
    chi_max: Optional[int] = None,
    cutoff: Optional[float] = None,
    phys_dims: Optional[Sequence[int]] = None,
) -> Tuple[MPS, float]:
    """
    Decompose a dense state into a truncated MPS.

    A left-to-right sweep of SVDs keeps at most ``chi_max`` singular values per bond
    (``None`` keeps all). The result is right-canonicalized and normalized.

    Returns:
        ``(mps, truncation_error)`` with ``truncation_error = 1 - |<psi|psi_mps>|^2``.
    """
    psi = np.asarray(state, dtype=np.complex128).reshape(-1)
    dims = list(phys_dims) if phys_dims is not None else [2] * num_qubits(psi)
    if int(np.prod(dims)) != psi.size:
        raise ShapeError(f"Physical dims {dims} do not match a state of length {psi.size}")
    if chi_max is not None and chi_max < 1:
        raise ValueError(f"chi_max must be at least 1, got {chi_max}")
    norm = np.linalg.norm(psi)
    if norm == 0.0:
        raise DomainError("Cannot decompose the zero vector")
    target = psi / norm

    tensors = []
    rest = target.reshape(1, -1)
    chi_left = 1
    for k, d in enumerate(dims[:-1]):
        mat = rest.reshape(chi_left * d, -1)
        u, s, vh, discarded = truncated_svd(mat, chi_max, cutoff)
        u, s, vh = _drop_negligible(u, s, vh)
        if discarded > 0.0:
            logger.debug(f"Bond {k}: kept {len(s)} singular values, discarded weight {discarded:.3e}")
        tensors.append(u.reshape(chi_left, d, len(s)))
        rest = s[:, None] * vh
        chi_left = len(s)
    tensors.append(rest.reshape(chi_left, dims[-1], 1))

    approx = right_canonicalize(MPS(tensors))
    approx.log_scale = 0.0
    approx.phase = 1.0 + 0.0j
    overlap = np.vdot(target, to_statevector(approx))
    error = max(0.0, 1.0 - float(abs(overlap) ** 2))
    approx.truncation_error = error
    return approx, error


def to_statevector(m: MPS, max_entries: int = DEFAULT_MAX_DENSE_ENTRIES) -> np.ndarray:
    """
    Contract an MPS into its dense amplitude vector.

    Raises:
        SizeError: If the dense vector would exceed ``max_entries`` entries.
    """
    total = math.prod(m.physical_dims)
    if total > max_entries:
        raise SizeError(f"Dense state would have {total} entries, cap is {max_entries}")
    acc = m.tensors[0].reshape(-1, m.tensors[0].shape[2])
    for t in m.tensors[1:]:
        acc = (acc @ t.reshape(t.shape[0], -1)).reshape(-1, t.shape[2])
    return acc.reshape(-1) * (math.exp(m.log_scale) * m.phase)


def right_canonicalize(m: MPS) -> MPS:
    """
    Bring every tensor into right-canonical (isometric) form.

    Sweeps right to left with QR factorizations; bonds shrink where they exceed the
    available rank. The overall norm ends up in ``log_scale``.
    """
    tensors = [np.asarray(t, dtype=np.complex128).copy() for t in m.tensors]
    log_scale = m.log_scale
    for k in range(len(tensors) - 1, 0, -1):
        chi_l, d, chi_r = tensors[k].shape
        q, r = np.linalg.qr(tensors[k].reshape(chi_l, d * chi_r).conj().T)
        tensors[k] = q.conj().T.reshape(-1, d, chi_r)
        absorbed = np.tensordot(tensors[k - 1], r.conj().T, axes=(2, 0))
        tensors[k - 1], log_norm = normalize(absorbed)
        if log_norm == float("-inf"):
            raise DomainError("Cannot canonicalize an MPS representing the zero state")
        log_scale += log_norm
    tensors[0], log_norm = normalize(tensors[0])
    if log_norm == float("-inf"):
        raise DomainError("Cannot canonicalize an MPS representing the zero state")
    return replace(m, tensors=tensors, log_scale=log_scale + log_norm, metadata=dict(m.metadata))


def isometry_deviation(m: MPS) -> float:
    """Largest deviation of any site from the right-canonical isometry condition."""
    worst = 0.0
    for t in m.tensors:
        mat = t.reshape(t.shape[0], -1)
        worst = max(worst, float(np.max(np.abs(mat @ mat.conj().T - np.eye(t.shape[0])))))
    return worst


def _check_bond(m: MPS, cut: int) -> None:
    if not 0 <= cut < len(m) - 1:
        raise ShapeError(f"Bond index {cut} out of range for an MPS with {len(m)} sites")


def _sweep_to_bond(m: MPS, cut: int, chi_max: Optional[int] = None):
    """Left-canonicalize sites ``0..cut`` of a right-canonical copy and split at bond ``cut``."""
    tensors = right_canonicalize(m).tensors
    carry = None
    for k in range(cut + 1):
        t = tensors[k] if carry is None else np.tensordot(carry, tensors[k], axes=(1, 0))
        chi_l, d, chi_r = t.shape
        mat = t.reshape(chi_l * d, chi_r)
        if k == cut:
            u, s, vh, _ = truncated_svd(mat, chi_max)
            full = svd(mat)[1] if chi_max is not None else s
        else:
            u, s, vh = svd(mat)
            full = s
        tensors[k] = u.reshape(chi_l, d, -1)
        carry = s[:, None] * vh
    return tensors, carry, s, full


def schmidt_values(m: MPS, cut: int) -> np.ndarray:
    """Normalized Schmidt coefficients across bond ``cut``, in descending order."""
    _check_bond(m, cut)
    _, _, s, _ = _sweep_to_bond(m, cut)
    return s / np.linalg.norm(s)


def truncate_cut(m: MPS, cut: int, chi_max: int) -> Tuple[MPS, float]:
    """
    Keep the ``chi_max`` largest Schmidt values across one bond.

    Returns:
        ``(normalized_mps, discarded_weight)``; the fidelity loss equals the discarded
        weight.
    """
    _check_bond(m, cut)
    tensors, carry, s, full = _sweep_to_bond(m, cut, chi_max)
    tensors[cut + 1] = np.tensordot(carry, tensors[cut + 1], axes=(1, 0))
    discarded = float(np.sum(full[len(s):] ** 2) / np.sum(full ** 2))
    result = right_canonicalize(MPS(tensors))
    result.log_scale = 0.0
    return result, discarded


def log_inner(a: MPS, b: MPS) -> Tuple[float, complex]:
    """
    ``<a|b>`` as ``(log |<a|b>|, phase)`` using a normalized transfer contraction.

    Raises:
        ShapeError: If the chains differ in length or physical dimensions.
    """
    if len(a) != len(b):
        raise ShapeError(f"Cannot contract MPS of {len(a)} and {len(b)} sites")
    env = np.ones((1, 1), dtype=np.complex128)
    log_acc = a.log_scale + b.log_scale
    for k, (ta, tb) in enumerate(zip(a.tensors, b.tensors)):
        if ta.shape[1] != tb.shape[1]:
            raise ShapeError(f"Physical dimension mismatch at site {k}: {ta.shape[1]} vs {tb.shape[1]}")
        tmp = np.tensordot(env, tb, axes=(1, 0))
        env = np.tensordot(ta.conj(), tmp, axes=([0, 1], [0, 1]))
        env, log_norm = normalize(env)
        if log_norm == float("-inf"):
            return float("-inf"), 0.0 + 0.0j
        log_acc += log_norm
    value = complex(env[0, 0])
    return log_acc, value / abs(value) * np.conj(a.phase) * b.phase


def inner(a: MPS, b: MPS) -> complex:
    """``<a|b>``."""
    log_abs, phase = log_inner(a, b)
    if log_abs == float("-inf"):
        return 0.0 + 0.0j
    return complex(phase * math.exp(log_abs))


def fidelity(a: MPS, b: MPS) -> float:
    """``|<a|b>|^2 / (<a|a> <b|b>)``."""
    log_ab, _ = log_inner(a, b)
    if log_ab == float("-inf"):
        return 0.0
    log_aa, _ = log_inner(a, a)
    log_bb, _ = log_inner(b, b)
    return float(math.exp(2.0 * log_ab - log_aa - log_bb))


def entanglement_entropy(m: MPS, cut: int) -> float:
    """Von Neumann entropy (nats) across bond ``cut``."""
    probs = schmidt_values(m, cut) ** 2
    probs = probs[probs > 0.0]
    return float(-np.sum(probs * np.log(probs)))


def compress_image_mps(
    img: np.ndarray,
    layout: PatchLayout,
    chi_img: Optional[int],
    cutoff: Optional[float] = None,
) -> List[MPS]:
    """
    FRQI-encode each patch and truncate it to bond dimension ``chi_img``.

    The per-patch truncation error is stored on each returned MPS.
    """
    compressed = []
    for index, state in enumerate(encode_patched(img, layout)):
        mps, error = from_statevector(state, chi_img, cutoff)
        compressed.append(mps)
        logger.debug(f"Patch {index}: {len(mps)} qubits, chi={mps.chi}, truncation error {error:.3e}")
    return compressed


def decode_image_mps(mps_list: Sequence[MPS], layout: PatchLayout, width: int, height: int) -> np.ndarray:
    """Reconstruct an image from its per-patch MPS."""
    return decode_patched([to_statevector(m) for m in mps_list], layout, width, height)
