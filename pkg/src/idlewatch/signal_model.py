"""Array geometry, idle-phase snapshot synthesis and matched-filter projection.

Angle convention: theta is measured from array broadside, so theta = 0 is a
plane wave arriving perpendicular to the array axis. An interferer described
as "90 degrees relative to the array axis" is therefore theta = 0 here.

Noise convention: CN(0, sigma_n^2) has total variance sigma_n^2 per complex
entry, sigma_n^2 / 2 on each of the real and imaginary parts. This is the
convention under which the projected amplitude is exactly Rayleigh (H0) or
Rice (H1) with the densities in ``sequential_stats``.
"""

import logging
import math
from dataclasses import dataclass
from typing import Literal, Optional, Sequence, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field

from src.idlewatch.errors import InvalidArgumentError

logger = logging.getLogger(__name__)

SPEED_OF_LIGHT = 299_792_458.0
L_BAND_CARRIER_HZ = 1.6e9


class UlaGeometry(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    num_elements: int = Field(..., ge=2)
    spacing_wavelengths: float = Field(0.5, gt=0.0)

    @classmethod
    def from_carrier(cls, num_elements: int, carrier_hz: float, spacing_m: float) -> "UlaGeometry":
        """Build a geometry from a physical element spacing at a carrier frequency."""
        if carrier_hz <= 0 or spacing_m <= 0:
            raise InvalidArgumentError("carrier_hz and spacing_m must be positive")
        wavelength = SPEED_OF_LIGHT / carrier_hz
        return cls(num_elements=num_elements, spacing_wavelengths=spacing_m / wavelength)


def reference_geometry() -> UlaGeometry:
    """Four-element half-wavelength ULA at the 1.6 GHz L-band carrier."""
    half_wavelength = SPEED_OF_LIGHT / L_BAND_CARRIER_HZ / 2.0
    return UlaGeometry.from_carrier(4, L_BAND_CARRIER_HZ, half_wavelength)


class InterferenceParams(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    amplitude: float = Field(..., ge=0.0)
    direction: float = Field(0.0, ge=-math.pi / 2, le=math.pi / 2)
    phase_model: Literal["uniform", "fixed"] = "uniform"
    fixed_phase: float = 0.0


class ScenarioConfig(BaseModel):
    """Full generative description of a snapshot stream.

    ``change_point`` is the first index carrying interference; ``None`` stands
    for an infinite change point, i.e. a pure H0 stream.
    """

    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1] = 1
    geometry: UlaGeometry = Field(default_factory=lambda: UlaGeometry(num_elements=4))
    noise_std: float = Field(1.0, gt=0.0)
    interference: Optional[InterferenceParams] = None
    change_point: Optional[int] = Field(1, ge=1)
    rng_seed: int = Field(0, ge=0, lt=2**64)

    @property
    def is_null(self) -> bool:
        return (
            self.interference is None
            or self.change_point is None
            or self.interference.amplitude == 0.0
        )


@dataclass(frozen=True)
class Snapshot:
    values: np.ndarray
    index: int

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.complex128)
        if values.ndim != 1:
            raise InvalidArgumentError(f"snapshot must be a vector, got shape {values.shape}")
        if self.index < 1:
            raise InvalidArgumentError(f"snapshot index must be >= 1, got {self.index}")
        object.__setattr__(self, "values", values)


SnapshotWindow = Union[np.ndarray, Sequence[Snapshot]]


def as_matrix(snapshots: SnapshotWindow) -> np.ndarray:
    """Stack snapshots into an (N, M) complex array."""
    if isinstance(snapshots, np.ndarray):
        matrix = np.asarray(snapshots, dtype=np.complex128)
        if matrix.ndim == 1:
            matrix = matrix[np.newaxis, :]
    else:
        rows = [s.values if isinstance(s, Snapshot) else np.asarray(s) for s in snapshots]
        if not rows:
            return np.empty((0, 0), dtype=np.complex128)
        matrix = np.vstack(rows).astype(np.complex128)
    if matrix.ndim != 2:
        raise InvalidArgumentError(f"expected an (N, M) snapshot window, got shape {matrix.shape}")
    return matrix


def inr_db_to_sigma(inr_db: float) -> float:
    """INR in dB (of sigma^2) to the amplitude ratio sigma = sigma_I / sigma_n."""
    return 10.0 ** (inr_db / 20.0)


def sigma_to_inr_db(sigma: float) -> float:
    return 20.0 * math.log10(sigma)


def steering_vector(geometry: UlaGeometry, theta: float) -> np.ndarray:
    if not math.isfinite(theta):
        raise InvalidArgumentError(f"theta must be finite, got {theta}")
    if abs(theta) > math.pi / 2:
        raise InvalidArgumentError(f"|theta| must not exceed pi/2, got {theta}")
    return steering_matrix(geometry, theta)


def steering_matrix(geometry: UlaGeometry, thetas: np.ndarray) -> np.ndarray:
    """Steering vectors for an array of angles, stacked on a trailing M axis."""
    m = np.arange(geometry.num_elements)
    phase = 2.0 * np.pi * geometry.spacing_wavelengths * np.sin(np.asarray(thetas))[..., np.newaxis] * m
    return np.exp(1j * phase) / math.sqrt(geometry.num_elements)


def synthesize_block(
    scenario: ScenarioConfig, start_k: int, count: int, rng: np.random.Generator
) -> np.ndarray:
    """Snapshots ``start_k .. start_k + count - 1`` as a (count, M) array.

    The generator is consumed noise first, then phases. Replaying a stream
    exactly requires the same block schedule.
    """
    if start_k < 1:
        raise InvalidArgumentError(f"snapshot index must be >= 1, got {start_k}")
    num_elements = scenario.geometry.num_elements
    parts = rng.standard_normal((count, num_elements, 2))
    block = scenario.noise_std / math.sqrt(2.0) * (parts[..., 0] + 1j * parts[..., 1])

    interference = scenario.interference
    if interference is None or scenario.change_point is None:
        return block

    if interference.phase_model == "uniform":
        phases = rng.uniform(0.0, 2.0 * np.pi, count)
    else:
        phases = np.full(count, interference.fixed_phase)

    indices = np.arange(start_k, start_k + count)
    active = indices >= scenario.change_point
    if active.any():
        steer = steering_vector(scenario.geometry, interference.direction)
        gains = interference.amplitude * np.exp(1j * phases[active])
        block[active] += gains[:, np.newaxis] * steer[np.newaxis, :]
    return block


def synthesize_snapshot(scenario: ScenarioConfig, k: int, rng: np.random.Generator) -> Snapshot:
    return Snapshot(values=synthesize_block(scenario, k, 1, rng)[0], index=k)


def project(snapshot: Union[Snapshot, np.ndarray], steer: np.ndarray) -> complex:
    """Matched-filter output steer^H y."""
    values = snapshot.values if isinstance(snapshot, Snapshot) else np.asarray(snapshot)
    if values.shape != steer.shape:
        raise InvalidArgumentError(
            f"dimension mismatch: snapshot {values.shape} vs steering vector {steer.shape}"
        )
    return complex(np.vdot(steer, values))


def project_many(snapshots: SnapshotWindow, steer: np.ndarray) -> np.ndarray:
    matrix = as_matrix(snapshots)
    if matrix.shape[1] != steer.shape[0]:
        raise InvalidArgumentError(
            f"dimension mismatch: snapshots have M={matrix.shape[1]}, steering vector {steer.shape[0]}"
        )
    return matrix @ np.conj(steer)


def amplitude(z: complex) -> float:
    return abs(z)
