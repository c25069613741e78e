"""Window-limited GLR detection for an interferer of unknown direction.

At sample k every candidate onset j in max(1, k-L+1) .. k is scored by

    sum_{i=j..k} llr(|a(theta_jk)^H y_i|),   theta_jk = Root-MUSIC on y_j .. y_k,

and G_k is the best score. Each candidate keeps its running scatter matrix,
so a new snapshot costs one rank-one update per candidate rather than a
fresh covariance. Per update the work is O(L * (M^3 + L * M)).

The interference amplitude sigma_I is taken as known; only the direction
and the onset are maximized over.
"""

import logging
import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.idlewatch.cusum_detector import DetectionOutcome, Verdict
from src.idlewatch.doa_rootmusic import estimate_doa, estimate_doa_batch
from src.idlewatch.errors import DetectorUsageError, InvalidArgumentError, NumericalFailureError
from src.idlewatch.sequential_stats import AmplitudeModel, llr
from src.idlewatch.signal_model import (
    Snapshot,
    SnapshotWindow,
    UlaGeometry,
    as_matrix,
    project_many,
    steering_matrix,
    steering_vector,
)

logger = logging.getLogger(__name__)


class GlrConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: AmplitudeModel
    threshold: float = Field(..., gt=0.0)
    max_window: int = Field(32, ge=1)
    geometry: UlaGeometry = Field(default_factory=lambda: UlaGeometry(num_elements=4))
    loading: bool = False

    @field_validator("model")
    @classmethod
    def _interference_present(cls, model: AmplitudeModel) -> AmplitudeModel:
        if model.sigma_I <= 0.0:
            raise ValueError("sigma_I must be positive for a likelihood-ratio detector")
        return model


@dataclass(frozen=True)
class GlrAlarm:
    stopping_index: int
    theta_hat: float
    change_index: int


@dataclass
class GlrState:
    buffer: Deque[Tuple[int, np.ndarray]]
    scatters: Deque[np.ndarray]
    k: int = 0
    last_statistic: float = -math.inf
    alarm: Optional[GlrAlarm] = None
    skipped_windows: int = 0


def glr_statistic(
    window: SnapshotWindow,
    model: AmplitudeModel,
    geometry: UlaGeometry,
    theta: Optional[float] = None,
    loading: bool = False,
) -> Tuple[float, float]:
    """Accumulated LLR of one candidate window and the direction it was projected on.

    With ``theta`` given the DoA step is skipped (known-direction oracle).
    """
    y = as_matrix(window)
    if y.shape[0] == 0:
        raise InvalidArgumentError("GLR window must not be empty")
    if theta is None:
        theta = estimate_doa(y, geometry, loading=loading).theta_hat
    r = np.abs(project_many(y, steering_vector(geometry, theta)))
    return float(np.sum(llr(r, model))), theta


class GlrDetector:
    def __init__(self, config: GlrConfig):
        self.config = config
        self.state = self._fresh_state()

    def _fresh_state(self) -> GlrState:
        size = self.config.max_window
        return GlrState(buffer=deque(maxlen=size), scatters=deque(maxlen=size))

    def _coerce(self, snapshot: Union[Snapshot, np.ndarray]) -> np.ndarray:
        expected = self.state.k + 1
        if isinstance(snapshot, Snapshot):
            if snapshot.index != expected:
                raise DetectorUsageError(f"expected snapshot index {expected}, got {snapshot.index}")
            values = snapshot.values
        else:
            values = np.asarray(snapshot, dtype=np.complex128)
        if values.shape != (self.config.geometry.num_elements,):
            raise InvalidArgumentError(
                f"snapshot has shape {values.shape}, geometry has M={self.config.geometry.num_elements}"
            )
        return values

    def update(self, snapshot: Union[Snapshot, np.ndarray]) -> DetectionOutcome:
        state = self.state
        if state.alarm is not None:
            raise DetectorUsageError(
                f"detector alarmed at k={state.alarm.stopping_index}; call reset() before updating"
            )
        y = self._coerce(snapshot)
        state.k += 1

        outer = np.outer(y, np.conj(y))
        for scatter in state.scatters:
            scatter += outer
        state.buffer.append((state.k, y))
        state.scatters.append(outer.copy())

        statistic, theta_hat, change_index = self._maximize()
        state.last_statistic = statistic
        if statistic >= self.config.threshold:
            state.alarm = GlrAlarm(state.k, theta_hat, change_index)
            return DetectionOutcome(Verdict.ALARM, statistic, state.k, theta_hat, change_index)
        return DetectionOutcome(Verdict.CONTINUE, statistic, None, theta_hat, change_index)

    def _maximize(self) -> Tuple[float, Optional[float], Optional[int]]:
        state = self.state
        config = self.config
        samples = np.vstack([values for _, values in state.buffer])
        starts = np.array([start for start, _ in state.buffer])
        count = samples.shape[0]
        offsets = np.arange(count)

        scatters = np.stack(state.scatters)
        covariances = scatters / (count - offsets)[:, None, None]
        covariances = 0.5 * (covariances + np.conj(np.swapaxes(covariances, 1, 2)))
        estimates = estimate_doa_batch(covariances, config.geometry, config.loading)

        failed = np.flatnonzero(~estimates.valid)
        if failed.size:
            state.skipped_windows += failed.size
            logger.debug("skipping GLR candidates j=%s at k=%d: no admissible root", starts[failed].tolist(), state.k)

        # projections of every buffered sample on every candidate direction
        steer = steering_matrix(config.geometry, estimates.theta_hat)
        r = np.abs(samples @ np.conj(steer).T)
        in_window = offsets[:, None] >= offsets[None, :]
        scores = np.sum(np.asarray(llr(r, config.model)) * in_window, axis=0)
        scores = np.where(estimates.valid, scores, -np.inf)

        best = int(np.argmax(scores))
        if not np.isfinite(scores[best]):
            return -math.inf, None, None
        return float(scores[best]), float(estimates.theta_hat[best]), int(starts[best])

    def recompute_statistic(self) -> float:
        """G_k rebuilt from the buffered snapshots alone, without the running scatters."""
        samples = [values for _, values in self.state.buffer]
        best = -math.inf
        for offset in range(len(samples)):
            try:
                score, _ = glr_statistic(
                    np.vstack(samples[offset:]), self.config.model, self.config.geometry, loading=self.config.loading
                )
            except NumericalFailureError:
                continue
            best = max(best, score)
        return best

    def reset(self) -> None:
        """Clear the window and the alarm; the sample counter keeps running."""
        k = self.state.k
        skipped = self.state.skipped_windows
        self.state = self._fresh_state()
        self.state.k = k
        self.state.skipped_windows = skipped
