"""Root-MUSIC direction estimation for a single interferer on a ULA.

Steps: sample covariance -> Hermitian eigendecomposition -> noise subspace
(the M - 1 smallest eigenvalues) -> null-spectrum polynomial -> roots ->
the admissible root closest to the unit circle -> angle.

The polynomial is rooted as sum_l c_l z^l with c_{-l} = conj(c_l). On the
unit circle z = exp(i*omega), omega = 2*pi*(d/lambda)*sin(theta), it equals
M * a(theta)^H E_n E_n^H a(theta), so arg(z) carries the sign of the
steering-vector phase progression.

Every stage works on stacks of covariance matrices so the GLR detector can
estimate all of its candidate windows in one pass; the single-window
functions are the stack-of-one case.
"""

import logging
import math
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np

from src.idlewatch.errors import InvalidArgumentError, NumericalFailureError
from src.idlewatch.signal_model import SnapshotWindow, UlaGeometry, as_matrix, steering_matrix

logger = logging.getLogger(__name__)

UNIT_CIRCLE_BAND = 1e-9
ROOT_TIE_TOLERANCE = 1e-9
LOADING_FACTOR = 1e-10
_EIGEN_TIE = 1e-12


@dataclass(frozen=True)
class SampleCovariance:
    matrix: np.ndarray
    num_snapshots: int


@dataclass(frozen=True)
class NoiseSubspace:
    basis: np.ndarray
    eigenvalues: np.ndarray


@dataclass(frozen=True)
class DoaEstimate:
    theta_hat: float
    root_modulus: float
    window: Optional[Tuple[int, int]] = None

    @property
    def theta_deg(self) -> float:
        return math.degrees(self.theta_hat)


@dataclass(frozen=True)
class DoaBatch:
    """Estimates for a stack of covariances; ``valid`` is False where no root qualified."""

    theta_hat: np.ndarray
    root_modulus: np.ndarray
    valid: np.ndarray
    root_moduli: np.ndarray


def covariance_from_scatter(scatter: np.ndarray, num_snapshots: int) -> SampleCovariance:
    """(1/N) * sum y_i y_i^H from an accumulated scatter matrix, symmetrized."""
    if num_snapshots < 1:
        raise InvalidArgumentError("covariance needs at least one snapshot")
    matrix = scatter / num_snapshots
    matrix = 0.5 * (matrix + matrix.conj().T)
    return SampleCovariance(matrix=matrix, num_snapshots=num_snapshots)


def sample_covariance(snapshots: SnapshotWindow) -> SampleCovariance:
    y = as_matrix(snapshots)
    if y.shape[0] == 0:
        raise InvalidArgumentError("covariance needs at least one snapshot")
    return covariance_from_scatter(y.T @ np.conj(y), y.shape[0])


def _noise_subspaces(matrices: np.ndarray, loading: bool) -> Tuple[np.ndarray, np.ndarray]:
    """Noise-subspace bases (B, M, M-1) and eigenvalues (B, M-1) for a stack (B, M, M).

    Columns are rotated so their largest-magnitude entry is real and
    positive. Eigenvalues equal to within a relative 1e-12 are ordered by
    the position of that entry, which makes the basis reproducible.
    """
    size = matrices.shape[-1]
    if loading:
        traces = np.real(np.trace(matrices, axis1=1, axis2=2))
        matrices = matrices + (LOADING_FACTOR * traces / size)[:, None, None] * np.eye(size)
    try:
        eigenvalues, eigenvectors = np.linalg.eigh(matrices)
    except np.linalg.LinAlgError as e:
        raise NumericalFailureError("eigendecomposition failed", {"error": str(e)}) from e

    pivots = np.argmax(np.abs(eigenvectors), axis=1)
    leading = np.take_along_axis(eigenvectors, pivots[:, None, :], axis=1)[:, 0, :]
    eigenvectors = eigenvectors * (np.abs(leading) / leading)[:, None, :]

    scale = np.maximum(np.max(np.abs(eigenvalues), axis=1, keepdims=True), np.finfo(float).tiny)
    clusters = np.round(eigenvalues / (scale * _EIGEN_TIE))
    order = np.lexsort((pivots, clusters), axis=-1)[:, : size - 1]

    basis = np.take_along_axis(eigenvectors, order[:, None, :], axis=2)
    return basis, np.take_along_axis(eigenvalues, order, axis=1)


def noise_subspace(
    covariance: SampleCovariance, num_sources: int = 1, loading: bool = False
) -> NoiseSubspace:
    """Eigenvectors of the M - 1 smallest eigenvalues, ascending."""
    if num_sources != 1:
        raise InvalidArgumentError("only a single interference source is modeled")
    if covariance.matrix.shape[0] < 2:
        raise InvalidArgumentError("noise subspace needs M >= 2")
    basis, eigenvalues = _noise_subspaces(covariance.matrix[np.newaxis], loading)
    return NoiseSubspace(basis=basis[0], eigenvalues=eigenvalues[0])


def _polynomial_coefficients(bases: np.ndarray) -> np.ndarray:
    """c_l, l = -(M-1) .. M-1, for a stack of noise bases (B, M, M-1)."""
    size = bases.shape[1]
    projectors = bases @ np.conj(np.swapaxes(bases, 1, 2))
    positive = np.stack(
        [np.trace(projectors, offset=l, axis1=1, axis2=2) for l in range(size)], axis=1
    )
    positive[:, 0] = positive[:, 0].real
    return np.concatenate([np.conj(positive[:, :0:-1]), positive], axis=1)


def rootmusic_polynomial(subspace: NoiseSubspace) -> np.ndarray:
    """Coefficients c_l for l = -(M-1) .. M-1, stored at index l + M - 1.

    c_l = sum_i sum_j E[i, j] conj(E[i + l, j]) for l >= 0, which is the l-th
    superdiagonal trace of E E^H, and c_{-l} = conj(c_l).
    """
    return _polynomial_coefficients(subspace.basis[np.newaxis])[0]


def polynomial_roots(coefficients: np.ndarray) -> np.ndarray:
    """All roots of a polynomial given highest degree first (companion-matrix eigenvalues)."""
    coeffs = np.asarray(coefficients, dtype=np.complex128)
    trimmed = np.trim_zeros(coeffs, "f")
    if trimmed.size == 0:
        raise InvalidArgumentError("polynomial coefficients are all zero")
    return np.roots(trimmed)


def _stacked_roots(coefficients: np.ndarray) -> np.ndarray:
    """Roots of each row (highest degree first); missing roots are padded with inf."""
    degree = coefficients.shape[1] - 1
    lead = coefficients[:, 0]
    regular = np.abs(lead) > np.finfo(float).eps * np.max(np.abs(coefficients), axis=1)
    roots = np.full((coefficients.shape[0], degree), np.inf, dtype=np.complex128)

    if regular.any():
        monic = coefficients[regular, 1:] / lead[regular, None]
        companion = np.zeros((monic.shape[0], degree, degree), dtype=np.complex128)
        companion[:, 0, :] = -monic
        companion[:, np.arange(1, degree), np.arange(degree - 1)] = 1.0
        roots[regular] = np.linalg.eigvals(companion)
    for row in np.flatnonzero(~regular):
        found = polynomial_roots(coefficients[row])
        roots[row, : found.size] = found
    return roots


def estimate_doa_batch(matrices: np.ndarray, geometry: UlaGeometry, loading: bool = False) -> DoaBatch:
    """Root-MUSIC on a stack of covariance matrices (B, M, M)."""
    size = geometry.num_elements
    if matrices.ndim != 3 or matrices.shape[1:] != (size, size):
        raise InvalidArgumentError(f"covariances have shape {matrices.shape}, geometry has M={size}")

    bases, _ = _noise_subspaces(matrices, loading)
    coefficients = _polynomial_coefficients(bases)
    # sum_l c_l z^l scaled by z^(M-1), highest power first
    roots = _stacked_roots(coefficients[:, ::-1])

    moduli = np.abs(roots)
    admissible = moduli <= 1.0 + UNIT_CIRCLE_BAND
    valid = admissible.any(axis=1)

    best = np.max(np.where(admissible, moduli, -np.inf), axis=1, keepdims=True)
    tied = admissible & (moduli >= best - ROOT_TIE_TOLERANCE)

    ratio = np.angle(roots) / (2.0 * np.pi * geometry.spacing_wavelengths)
    angles = np.arcsin(np.clip(ratio, -1.0, 1.0))
    steer = steering_matrix(geometry, angles)
    powers = np.real(np.einsum("bdi,bij,bdj->bd", np.conj(steer), matrices, steer))
    pick = np.argmax(np.where(tied, powers, -np.inf), axis=1)

    rows = np.arange(matrices.shape[0])
    return DoaBatch(
        theta_hat=angles[rows, pick],
        root_modulus=np.minimum(moduli[rows, pick], 1.0),
        valid=valid,
        root_moduli=moduli,
    )


def estimate_doa_from_covariance(
    covariance: SampleCovariance,
    geometry: UlaGeometry,
    window: Optional[Tuple[int, int]] = None,
    loading: bool = False,
) -> DoaEstimate:
    batch = estimate_doa_batch(covariance.matrix[np.newaxis], geometry, loading)
    if not batch.valid[0]:
        raise NumericalFailureError(
            "no Root-MUSIC root inside or on the unit circle",
            {"root_moduli": np.round(batch.root_moduli[0], 12).tolist()},
        )
    return DoaEstimate(
        theta_hat=float(batch.theta_hat[0]),
        root_modulus=float(batch.root_modulus[0]),
        window=window,
    )


def estimate_doa(
    snapshots: SnapshotWindow,
    geometry: UlaGeometry,
    window: Optional[Tuple[int, int]] = None,
    loading: bool = False,
) -> DoaEstimate:
    return estimate_doa_from_covariance(sample_covariance(snapshots), geometry, window, loading)
