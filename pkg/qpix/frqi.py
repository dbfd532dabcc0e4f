"""
FRQI encoding of pixel vectors as statevectors.

A statevector is a complex128 array of length ``2**n_qubits``. The address qubits come
first (most significant), the color qubit is the last (least significant) qubit, so the
amplitude of basis state ``(x, c)`` sits at index ``2 * x + c``.
"""

import logging
import math
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

from qpix.errors import DomainError, LayoutError, ShapeError
from qpix.imaging import PatchLayout, join_patches, snake_flatten, snake_unflatten, split_patches

# Module-level logger
logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class QubitBudget:
    """Qubit accounting for an image of ``pixels`` pixels split into ``patches`` patches."""

    pixels: int
    patches: int
    address_qubits: int
    color_qubits: int = 1

    @property
    def qubits_per_patch(self) -> int:
        return self.address_qubits + self.color_qubits

    @property
    def total(self) -> int:
        return self.qubits_per_patch * self.patches


def num_qubits(state: np.ndarray) -> int:
    """Number of qubits of a dense statevector."""
    size = len(state)
    n = size.bit_length() - 1
    if size < 1 or 1 << n != size:
        raise ShapeError(f"Statevector length {size} is not a power of two")
    return n


def is_power_of_two(value: int) -> bool:
    return value >= 1 and value & (value - 1) == 0


def encode_frqi(pixels: Sequence[float]) -> np.ndarray:
    """
    Encode ``N`` pixels (``N`` a power of two) into a ``log2(N) + 1`` qubit state.

    Raises:
        ShapeError: If ``N`` is not a power of two.
        DomainError: If a pixel lies outside [0, 1].
    """
    pixels = np.asarray(pixels, dtype=np.float64).reshape(-1)
    if not is_power_of_two(pixels.size):
        raise ShapeError(f"FRQI needs a power-of-two pixel count, got {pixels.size}; pad or patch first")
    if pixels.min() < 0.0 or pixels.max() > 1.0:
        raise DomainError("FRQI pixel values must lie in [0, 1]")
    angles = 0.5 * np.pi * pixels
    amplitudes = np.stack([np.cos(angles), np.sin(angles)], axis=1) / math.sqrt(pixels.size)
    return amplitudes.reshape(-1).astype(np.complex128)


def decode_frqi(state: np.ndarray) -> np.ndarray:
    """
    Recover pixel values from any state on ``n >= 1`` qubits.

    ``p_x = (2 / pi) * atan2(|a_{x,1}|, |a_{x,0}|)``; a pixel whose two amplitudes are
    both zero decodes to 0.
    """
    state = np.asarray(state)
    if num_qubits(state) < 1:
        raise ShapeError("decode_frqi needs at least one qubit")
    pairs = np.abs(state.reshape(-1, 2))
    return (2.0 / np.pi) * np.arctan2(pairs[:, 1], pairs[:, 0])


def qubit_budget(pixels: int, patches: int) -> QubitBudget:
    """
    Qubits needed to encode ``pixels`` pixels as ``patches`` independent FRQI patches.

    Raises:
        LayoutError: If ``patches`` does not divide ``pixels``.
    """
    if patches < 1 or pixels < patches or pixels % patches:
        raise LayoutError(f"{patches} patches do not divide {pixels} pixels")
    per_patch = pixels // patches
    return QubitBudget(pixels=pixels, patches=patches, address_qubits=math.ceil(math.log2(per_patch)))


def encode_patched(img: np.ndarray, layout: PatchLayout) -> List[np.ndarray]:
    """
    Encode each patch of ``img`` as its own FRQI state, in row-major patch order.

    Pixels inside a patch are snake-ordered.
    """
    return [encode_frqi(snake_flatten(patch)) for patch in split_patches(img, layout)]


def decode_patched(states: Sequence[np.ndarray], layout: PatchLayout, width: int, height: int) -> np.ndarray:
    """Inverse of :func:`encode_patched` (also used on lossy reconstructions)."""
    patch_height, patch_width = layout.patch_shape(height, width)
    patches = [snake_unflatten(decode_frqi(state), patch_width, patch_height) for state in states]
    return join_patches(patches, layout)
