"""CUSUM detection of interference with a known direction.

The detector consumes projected amplitudes r_k and runs

    g_0 = 0,   g_k = max(0, g_{k-1} + llr(r_k)),   alarm at the first g_k >= h.

It latches on alarm: further updates raise until ``reset`` is called, which
zeroes the statistic and keeps the sample counter (continual operation).
"""

import logging
from dataclasses import dataclass
from enum import Enum
from typing import Iterable, List, Optional, Protocol, Sequence

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator

from src.idlewatch.errors import DetectorUsageError, InvalidArgumentError
from src.idlewatch.sequential_stats import AmplitudeModel, llr

logger = logging.getLogger(__name__)


class Verdict(str, Enum):
    CONTINUE = "continue"
    ALARM = "alarm"


@dataclass(frozen=True)
class DetectionOutcome:
    verdict: Verdict
    statistic: float
    stopping_index: Optional[int] = None
    # GLR only: direction estimate and change index of the maximizing window.
    theta_hat: Optional[float] = None
    change_index: Optional[int] = None

    @property
    def alarm(self) -> bool:
        return self.verdict is Verdict.ALARM


class CusumConfig(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    model: AmplitudeModel
    threshold: float = Field(..., gt=0.0)

    @field_validator("model")
    @classmethod
    def _interference_present(cls, model: AmplitudeModel) -> AmplitudeModel:
        if model.sigma_I <= 0.0:
            raise ValueError("sigma_I must be positive for a likelihood-ratio detector")
        return model


class SampleConfig(CusumConfig):
    """Single-sample rule: alarm as soon as one llr(r_k) reaches the threshold."""


@dataclass
class CusumState:
    g: float = 0.0
    k: int = 0
    alarm_index: Optional[int] = None


class Detector(Protocol):
    def update(self, observation) -> DetectionOutcome: ...

    def reset(self) -> None: ...


class CusumDetector:
    def __init__(self, config: CusumConfig):
        self.config = config
        self.state = CusumState()

    def _check_idle(self) -> None:
        if self.state.alarm_index is not None:
            raise DetectorUsageError(
                f"detector alarmed at k={self.state.alarm_index}; call reset() before updating"
            )

    def _statistic(self, steps: np.ndarray, start: float) -> np.ndarray:
        """Statistic path over a block of LLR increments starting from ``start``."""
        path = start + np.cumsum(steps)
        return path - np.minimum(np.minimum.accumulate(path), 0.0)

    def update(self, r: float) -> DetectionOutcome:
        self._check_idle()
        state = self.state
        state.k += 1
        state.g = max(0.0, state.g + llr(r, self.config.model))
        if state.g >= self.config.threshold:
            state.alarm_index = state.k
            return DetectionOutcome(Verdict.ALARM, state.g, state.k)
        return DetectionOutcome(Verdict.CONTINUE, state.g)

    def update_many(self, amplitudes: Sequence[float]) -> Optional[int]:
        """Advance over a block of amplitudes; return the alarm index if one occurs.

        On alarm the state stops at the alarming sample and the rest of the
        block is not consumed.
        """
        self._check_idle()
        r = np.asarray(amplitudes, dtype=float)
        if r.size == 0:
            return None
        path = self._statistic(np.asarray(llr(r, self.config.model)), self.state.g)
        hits = np.flatnonzero(path >= self.config.threshold)
        if hits.size:
            first = int(hits[0])
            self.state.g = float(path[first])
            self.state.k += first + 1
            self.state.alarm_index = self.state.k
            return self.state.k
        self.state.g = float(path[-1])
        self.state.k += r.size
        return None

    def reset(self) -> None:
        self.state.g = 0.0
        self.state.alarm_index = None


class SampleDetector(CusumDetector):
    """Decides on each sample alone; kept as the no-memory baseline."""

    def _statistic(self, steps: np.ndarray, start: float) -> np.ndarray:
        return steps

    def update(self, r: float) -> DetectionOutcome:
        self._check_idle()
        state = self.state
        state.k += 1
        state.g = float(llr(r, self.config.model))
        if state.g >= self.config.threshold:
            state.alarm_index = state.k
            return DetectionOutcome(Verdict.ALARM, state.g, state.k)
        return DetectionOutcome(Verdict.CONTINUE, state.g)


def cusum_direct_statistic(history: Sequence[float], model: AmplitudeModel) -> float:
    """S_k = max over n of sum_{i=n..k} llr(r_i), by an explicit scan.

    Unlike the recursion this is not floored at zero.
    """
    r = np.asarray(history, dtype=float)
    if r.size == 0:
        raise InvalidArgumentError("history must not be empty")
    steps = np.asarray(llr(r, model))
    tail_sums = np.cumsum(steps[::-1])
    return float(tail_sums.max())


def run_continual(detector: Detector, stream: Iterable) -> List[int]:
    """Feed a whole stream, resetting after every alarm; return the alarm indices."""
    alarms = []
    for observation in stream:
        outcome = detector.update(observation)
        if outcome.alarm:
            alarms.append(outcome.stopping_index)
            detector.reset()
    if alarms:
        logger.info("continual run raised %d alarms", len(alarms))
    return alarms
