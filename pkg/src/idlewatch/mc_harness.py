"""Monte-Carlo estimation of detection delay (CADD) and false-alarm rate (FAR).

CADD is E_H1[tau] measured with interference present from the first sample
(change point 1). FAR is 1 / ARL under pure noise, where runs that reach the
cap T_max without alarm are counted as T_max; this underestimates the ARL and
so overstates the FAR, and the censored fraction is always reported.

Every trial owns a generator derived from (master seed, cell id, stream,
trial index), so results do not depend on how trials are spread over
worker processes.
"""

import hashlib
import json
import logging
import math
import os
import time
from dataclasses import dataclass
from multiprocessing import Pool
from pathlib import Path
from typing import Dict, Iterable, List, Literal, Optional, Union

import numpy as np
import pandas as pd
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator
from tqdm import tqdm

from src.idlewatch.configs import settings
from src.idlewatch.cusum_detector import CusumConfig, CusumDetector, SampleConfig, SampleDetector
from src.idlewatch.errors import CellFailedError, InvalidArgumentError, NumericalFailureError
from src.idlewatch.glr_detector import GlrConfig, GlrDetector
from src.idlewatch.sequential_stats import AmplitudeModel, kl_information, sample_amplitude, theorem1_bounds
from src.idlewatch.signal_model import (
    InterferenceParams,
    ScenarioConfig,
    UlaGeometry,
    inr_db_to_sigma,
    synthesize_block,
)
from src.idlewatch.snapshot_io import write_csv, write_json, write_jsonl

logger = logging.getLogger(__name__)

DetectorConfig = Union[CusumConfig, SampleConfig, GlrConfig]
DetectorKind = Literal["cusum", "glr", "sample"]

STREAM_CADD = 1
STREAM_FAR = 2
TRIALS_PER_TASK = 1000
_FIRST_CHUNK = 64
_MAX_AMPLITUDE_CHUNK = 1 << 16
_MAX_SNAPSHOT_CHUNK = 256
_CALIBRATION_BRACKET = (0.01, 50.0)
SPEC_FILE = "sweep_spec.json"
LOG_FILE = "completed.jsonl"


def neg_log_far(far: float) -> float:
    """-ln FAR; the natural log is used throughout."""
    return -math.log(far)


def far_from_neg_log(value: float) -> float:
    return math.exp(-value)


def default_far_cap(target_far: float) -> int:
    """Run-length cap T_max large enough that censoring rarely biases a FAR near ``target_far``."""
    return max(1000, int(math.ceil(50.0 / target_far)))


def trial_rng(master_seed: int, cell_id: int, stream: int, trial_index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([master_seed, cell_id, stream, trial_index]))


def cell_id_for(detector: str, inr_db: float, threshold: float) -> int:
    """Stable 64-bit id of a sweep cell, independent of process and hash seed."""
    digest = hashlib.sha256(f"{detector}|{inr_db!r}|{threshold!r}".encode()).digest()
    return int.from_bytes(digest[:8], "little")


def make_detector(config: DetectorConfig):
    if isinstance(config, GlrConfig):
        return GlrDetector(config)
    if isinstance(config, SampleConfig):
        return SampleDetector(config)
    if isinstance(config, CusumConfig):
        return CusumDetector(config)
    raise InvalidArgumentError(f"unknown detector configuration {type(config).__name__}")


def _amplitude_block(scenario: ScenarioConfig, start: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """Projected amplitudes r_start .. r_{start+count-1} on the known interference direction."""
    sigma_I = 0.0 if scenario.is_null else scenario.interference.amplitude
    model = AmplitudeModel(sigma_I=sigma_I, sigma_n=scenario.noise_std)
    if scenario.is_null:
        return sample_amplitude(model, "H0", rng, count)
    null_count = int(np.clip(scenario.change_point - start, 0, count))
    return np.concatenate(
        [
            sample_amplitude(model, "H0", rng, null_count),
            sample_amplitude(model, "H1", rng, count - null_count),
        ]
    )


def run_length(config: DetectorConfig, scenario: ScenarioConfig, rng: np.random.Generator, cap: int) -> Optional[int]:
    """Index of the first alarm, or None if the detector stays silent for ``cap`` samples."""
    detector = make_detector(config)
    k = 0
    chunk = _FIRST_CHUNK
    if isinstance(config, GlrConfig):
        while k < cap:
            count = min(chunk, cap - k)
            block = synthesize_block(scenario, k + 1, count, rng)
            for row in block:
                if detector.update(row).alarm:
                    return detector.state.k
            k += count
            chunk = min(2 * chunk, _MAX_SNAPSHOT_CHUNK)
        return None

    while k < cap:
        count = min(chunk, cap - k)
        alarm = detector.update_many(_amplitude_block(scenario, k + 1, count, rng))
        if alarm is not None:
            return alarm
        k += count
        chunk = min(2 * chunk, _MAX_AMPLITUDE_CHUNK)
    return None


@dataclass(frozen=True)
class _TrialTask:
    config: DetectorConfig
    scenario: ScenarioConfig
    master_seed: int
    cell_id: int
    stream: int
    start: int
    stop: int
    cap: int


def _run_task(task: _TrialTask) -> np.ndarray:
    """Run lengths for trials start .. stop-1; 0 marks a censored run."""
    lengths = np.zeros(task.stop - task.start, dtype=np.int64)
    for offset, trial in enumerate(range(task.start, task.stop)):
        rng = trial_rng(task.master_seed, task.cell_id, task.stream, trial)
        tau = run_length(task.config, task.scenario, rng, task.cap)
        lengths[offset] = 0 if tau is None else tau
    return lengths


def _run_trials(
    config: DetectorConfig,
    scenario: ScenarioConfig,
    trials: int,
    cap: int,
    seed: int,
    cell_id: int,
    stream: int,
    workers: int,
) -> np.ndarray:
    tasks = [
        _TrialTask(config, scenario, seed, cell_id, stream, start, min(start + TRIALS_PER_TASK, trials), cap)
        for start in range(0, trials, TRIALS_PER_TASK)
    ]
    if workers <= 1 or len(tasks) == 1:
        results = [_run_task(task) for task in tasks]
    else:
        with Pool(processes=workers) as pool:
            results = pool.map(_run_task, tasks)
    return np.concatenate(results)


def _mean_and_stderr(values: np.ndarray) -> tuple:
    n = values.size
    mean = math.fsum(values.tolist()) / n
    if n < 2:
        return mean, 0.0
    variance = math.fsum(((values - mean) ** 2).tolist()) / (n - 1)
    return mean, math.sqrt(variance / n)


@dataclass(frozen=True)
class CaddEstimate:
    mean: float
    stderr: float
    trials_used: int
    excluded: int
    premature: int

    @property
    def delay_after_onset(self) -> float:
        """E[tau - nu]: samples observed after the first interfered one before the alarm."""
        return self.mean - 1.0


@dataclass(frozen=True)
class FarEstimate:
    far: float
    stderr: float
    censored_fraction: float
    arl: float
    trials: int

    @property
    def neg_log_far(self) -> float:
        return neg_log_far(self.far)


def estimate_cadd(
    config: DetectorConfig,
    scenario: ScenarioConfig,
    trials: int,
    seed: int,
    cell_id: int = 0,
    workers: int = 1,
    max_samples: int = settings.cadd_run_cap,
) -> CaddEstimate:
    """Mean and standard error of the detection delay tau - nu + 1.

    Runs without an alarm within ``max_samples`` after the change are
    excluded and counted. With nu > 1, runs alarming before nu are excluded
    as premature, giving the conditional delay E[tau - nu + 1 | tau >= nu].
    """
    if scenario.is_null:
        raise InvalidArgumentError("CADD needs a scenario with interference present")
    if trials < 1:
        raise InvalidArgumentError("trials must be >= 1")
    nu = scenario.change_point
    lengths = _run_trials(config, scenario, trials, nu - 1 + max_samples, seed, cell_id, STREAM_CADD, workers)

    censored = int(np.count_nonzero(lengths == 0))
    premature = int(np.count_nonzero((lengths > 0) & (lengths < nu)))
    delays = lengths[lengths >= nu] - nu + 1
    if censored:
        logger.warning(
            "%d of %d CADD trials ran %d samples without alarm and were excluded; threshold may be mis-set",
            censored, trials, max_samples,
        )
    if delays.size == 0:
        raise NumericalFailureError(
            "no CADD trial produced a usable detection",
            {"trials": trials, "censored": censored, "premature": premature},
        )
    mean, stderr = _mean_and_stderr(delays.astype(float))
    return CaddEstimate(mean, stderr, int(delays.size), censored, premature)


def estimate_far(
    config: DetectorConfig,
    scenario: Optional[ScenarioConfig],
    trials: int,
    cap: int,
    seed: int,
    cell_id: int = 0,
    workers: int = 1,
) -> FarEstimate:
    """FAR = 1 / ARL under H0, with runs censored at ``cap`` counted as ``cap``."""
    if scenario is None:
        geometry = getattr(config, "geometry", UlaGeometry(num_elements=4))
        scenario = ScenarioConfig(geometry=geometry, noise_std=config.model.sigma_n, interference=None)
    if not scenario.is_null:
        raise InvalidArgumentError("FAR needs a pure-noise scenario")
    if trials < 1 or cap < 1:
        raise InvalidArgumentError("trials and cap must be >= 1")
    if cap < 50.0 * math.exp(config.threshold):
        logger.warning(
            "FAR cap %d is below 50*e^h = %.3g for h=%.3g; the FAR estimate is biased upward",
            cap, 50.0 * math.exp(config.threshold), config.threshold,
        )

    lengths = _run_trials(config, scenario, trials, cap, seed, cell_id, STREAM_FAR, workers)
    censored = lengths == 0
    run_lengths = np.where(censored, cap, lengths).astype(float)
    arl, arl_stderr = _mean_and_stderr(run_lengths)
    censored_fraction = float(np.count_nonzero(censored)) / trials
    if censored_fraction > 0:
        logger.warning("%.1f%% of FAR runs hit the cap of %d samples", 100.0 * censored_fraction, cap)
    return FarEstimate(
        far=1.0 / arl,
        stderr=arl_stderr / (arl * arl),
        censored_fraction=censored_fraction,
        arl=arl,
        trials=trials,
    )


def calibrate_threshold(
    config: DetectorConfig,
    target_far: float,
    tolerance: float,
    seed: int,
    trials: int = 10_000,
    cap: Optional[int] = None,
    scenario: Optional[ScenarioConfig] = None,
    workers: int = 1,
    initial: tuple = (0.5, 8.0),
) -> float:
    """Threshold h whose simulated FAR matches ``target_far`` to |ln FAR - ln target| <= tolerance.

    Every FAR evaluation reuses the same seed, so the simulated FAR is a
    nonincreasing step function of h and bisection is deterministic.
    """
    if not 0.0 < target_far < 1.0:
        raise InvalidArgumentError(f"target FAR must lie in (0, 1), got {target_far}")
    if not tolerance > 0.0:
        raise InvalidArgumentError(f"tolerance must be positive, got {tolerance}")
    if cap is None:
        cap = default_far_cap(target_far)
    log_target = math.log(target_far)

    def gap(h: float) -> float:
        trial_config = config.model_copy(update={"threshold": h})
        estimate = estimate_far(trial_config, scenario, trials, cap, seed, workers=workers)
        logger.debug("calibration: h=%.6g -ln FAR=%.4f", h, estimate.neg_log_far)
        return math.log(estimate.far) - log_target

    lowest, highest = _CALIBRATION_BRACKET
    lo, hi = initial
    gap_lo, gap_hi = gap(lo), gap(hi)
    while gap_lo < 0.0:
        if lo <= lowest:
            raise NumericalFailureError("cannot bracket the target FAR from below", {"h": lo, "gap": gap_lo})
        lo = max(lo / 2.0, lowest)
        gap_lo = gap(lo)
    while gap_hi > 0.0:
        if hi >= highest:
            raise NumericalFailureError("cannot bracket the target FAR from above", {"h": hi, "gap": gap_hi})
        hi = min(hi * 2.0, highest)
        gap_hi = gap(hi)

    for h, g in ((lo, gap_lo), (hi, gap_hi)):
        if abs(g) <= tolerance:
            return h
    best = (lo, gap_lo) if abs(gap_lo) < abs(gap_hi) else (hi, gap_hi)
    while hi - lo > 1e-6:
        mid = 0.5 * (lo + hi)
        g = gap(mid)
        if abs(g) < abs(best[1]):
            best = (mid, g)
        if abs(g) <= tolerance:
            return mid
        if g > 0.0:
            lo = mid
        else:
            hi = mid
    logger.warning(
        "calibration stopped on interval width; |ln FAR - ln target| = %.4f at h=%.6g", abs(best[1]), best[0]
    )
    return best[0]


class SweepSpec(BaseModel):
    model_config = ConfigDict(frozen=True, extra="forbid")

    schema_version: Literal[1] = 1
    detector: DetectorKind
    inr_db_list: List[float] = Field(..., min_length=1)
    threshold_list: List[float] = Field(..., min_length=1)
    trials: int = Field(settings.trials, ge=1)
    far_trials: Optional[int] = Field(None, ge=1)
    far_run_cap: int = Field(settings.far_run_cap, ge=1)
    cadd_run_cap: int = Field(settings.cadd_run_cap, ge=1)
    master_seed: int = Field(0, ge=0, lt=2**64)
    geometry: UlaGeometry = Field(default_factory=lambda: UlaGeometry(num_elements=4))
    theta: float = Field(0.0, ge=-math.pi / 2, le=math.pi / 2)
    noise_std: float = Field(1.0, gt=0.0)
    change_point: int = Field(1, ge=1)
    max_window: int = Field(settings.glr_window, ge=1)

    @field_validator("threshold_list")
    @classmethod
    def _positive_thresholds(cls, values: List[float]) -> List[float]:
        if any(not h > 0 for h in values):
            raise ValueError("thresholds must be positive")
        return values

    def detector_config(self, inr_db: float, threshold: float) -> DetectorConfig:
        model = AmplitudeModel(sigma_I=inr_db_to_sigma(inr_db) * self.noise_std, sigma_n=self.noise_std)
        if self.detector == "glr":
            return GlrConfig(model=model, threshold=threshold, max_window=self.max_window, geometry=self.geometry)
        if self.detector == "sample":
            return SampleConfig(model=model, threshold=threshold)
        return CusumConfig(model=model, threshold=threshold)

    def scenarios(self, inr_db: float) -> tuple:
        """(H1 scenario for CADD, H0 scenario for FAR) at one INR."""
        interference = InterferenceParams(
            amplitude=inr_db_to_sigma(inr_db) * self.noise_std, direction=self.theta
        )
        h1 = ScenarioConfig(
            geometry=self.geometry,
            noise_std=self.noise_std,
            interference=interference,
            change_point=self.change_point,
            rng_seed=self.master_seed,
        )
        h0 = ScenarioConfig(geometry=self.geometry, noise_std=self.noise_std, interference=None, rng_seed=self.master_seed)
        return h1, h0

    def digest(self) -> str:
        """sha256 of the canonical JSON form; equal digests reproduce equal records."""
        canonical = json.dumps(json.loads(self.model_dump_json()), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(canonical.encode()).hexdigest()


class RunRecord(BaseModel):
    model_config = ConfigDict(frozen=True, ser_json_inf_nan="constants")

    detector: DetectorKind
    inr_db: float
    threshold: float
    cadd_mean: float = Field(..., ge=1.0)
    cadd_stderr: float
    far: float = Field(..., ge=0.0, le=1.0)
    far_stderr: float
    censored_fraction: float = Field(..., ge=0.0, le=1.0)
    trials_used: int
    excluded_trials: int
    neg_log_far: float
    delay_ratio: float
    inverse_information: float
    bound_lower: float
    bound_upper: float
    wall_time: float

    @property
    def cell_key(self) -> str:
        return f"{self.detector}|{self.inr_db!r}|{self.threshold!r}"


RESULT_COLUMNS = list(RunRecord.model_fields)


def run_cell(spec: SweepSpec, inr_db: float, threshold: float, workers: int = 1) -> RunRecord:
    started = time.perf_counter()
    cell = cell_id_for(spec.detector, inr_db, threshold)
    config = spec.detector_config(inr_db, threshold)
    h1, h0 = spec.scenarios(inr_db)

    cadd = estimate_cadd(config, h1, spec.trials, spec.master_seed, cell, workers, spec.cadd_run_cap)
    far = estimate_far(config, h0, spec.far_trials or spec.trials, spec.far_run_cap, spec.master_seed, cell, workers)

    sigma = inr_db_to_sigma(inr_db)
    information = kl_information(sigma)
    lower, upper = theorem1_bounds(sigma)
    nlf = far.neg_log_far
    return RunRecord(
        detector=spec.detector,
        inr_db=inr_db,
        threshold=threshold,
        cadd_mean=cadd.mean,
        cadd_stderr=cadd.stderr,
        far=far.far,
        far_stderr=far.stderr,
        censored_fraction=far.censored_fraction,
        trials_used=cadd.trials_used,
        excluded_trials=cadd.excluded + cadd.premature,
        neg_log_far=nlf,
        delay_ratio=cadd.mean / nlf if nlf > 0 else math.inf,
        inverse_information=1.0 / information,
        bound_lower=lower,
        bound_upper=upper,
        wall_time=time.perf_counter() - started,
    )


def _load_completed(log_path: Path) -> Dict[str, RunRecord]:
    """Records from the completion log; a torn last line is dropped so its cell runs again."""
    completed = {}
    if not log_path.exists():
        return completed
    lines = log_path.read_text().splitlines()
    for number, line in enumerate(lines, start=1):
        if not line.strip():
            continue
        try:
            record = RunRecord.model_validate_json(line)
        except ValidationError as e:
            if number == len(lines):
                logger.warning("dropping unreadable last line of %s; that cell will be re-run", log_path)
                break
            raise CellFailedError(f"{log_path.name}:{number}", f"unreadable completion record: {e}") from e
        completed[record.cell_key] = record
    return completed


def _check_resumable(directory: Path, spec: SweepSpec) -> None:
    spec_path = directory / SPEC_FILE
    if not spec_path.exists():
        raise InvalidArgumentError(
            f"{directory / LOG_FILE} has no {SPEC_FILE} next to it; rerun without --resume or use another directory"
        )
    try:
        stored = json.loads(spec_path.read_text())
    except json.JSONDecodeError as e:
        raise InvalidArgumentError(f"{spec_path} is not valid JSON: {e}") from e
    if not isinstance(stored, dict):
        raise InvalidArgumentError(f"{spec_path} does not hold a sweep spec")
    if stored.get("digest") == spec.digest():
        return
    current = json.loads(spec.model_dump_json())
    previous = stored.get("spec") or {}
    changed = sorted(name for name in current if previous.get(name) != current[name])
    raise InvalidArgumentError(
        f"{directory} holds results of a different sweep (changed: {', '.join(changed) or 'unknown'}); "
        "rerun without --resume or use another directory"
    )


def run_sweep(
    spec: SweepSpec,
    out_dir: Optional[Union[str, Path]] = None,
    resume: bool = False,
    workers: int = settings.workers,
    progress: bool = True,
) -> List[RunRecord]:
    """One RunRecord per (INR, threshold) cell, in spec order.

    With ``out_dir`` the spec and its digest go to ``sweep_spec.json``, each
    finished cell is appended to ``completed.jsonl`` and the run ends with
    ``results.csv`` and ``summary.json``. ``resume`` skips cells already in
    the completion log, and refuses a log written for a different spec.
    """
    directory = Path(out_dir) if out_dir is not None else None
    log_path = directory / LOG_FILE if directory is not None else None
    completed: Dict[str, RunRecord] = {}
    if directory is not None:
        directory.mkdir(parents=True, exist_ok=True)
        if resume and log_path.exists():
            _check_resumable(directory, spec)
            completed = _load_completed(log_path)
            write_jsonl(log_path, [r.model_dump_json() for r in completed.values()])
            logger.info("resuming sweep: %d cells already complete", len(completed))
        elif log_path.exists():
            log_path.unlink()
        write_json(directory / SPEC_FILE, {"digest": spec.digest(), "spec": json.loads(spec.model_dump_json())})

    cells = [(inr, h) for inr in spec.inr_db_list for h in spec.threshold_list]
    records = []
    # disable=None lets tqdm switch itself off when stderr is not a terminal
    for inr_db, threshold in tqdm(cells, desc=f"{spec.detector} sweep", unit="cell", disable=not progress or None):
        key = f"{spec.detector}|{inr_db!r}|{threshold!r}"
        if key in completed:
            records.append(completed[key])
            continue
        record = run_cell(spec, inr_db, threshold, workers)
        logger.info(
            "cell inr=%.2f dB h=%.3f: CADD=%.3f -lnFAR=%.3f (%.1fs)",
            inr_db, threshold, record.cadd_mean, record.neg_log_far, record.wall_time,
        )
        if log_path is not None:
            try:
                with log_path.open("a") as handle:
                    handle.write(record.model_dump_json() + "\n")
                    handle.flush()
                    os.fsync(handle.fileno())
            except OSError as e:
                raise CellFailedError(key, str(e)) from e
        records.append(record)

    if directory is not None:
        try:
            write_csv(directory / "results.csv", records_frame(records))
            write_json(
                directory / "summary.json",
                {"spec": json.loads(spec.model_dump_json()), "records": [r.model_dump() for r in records]},
            )
        except OSError as e:
            raise CellFailedError("summary", str(e)) from e
    return records


def records_frame(records: Iterable[RunRecord]) -> pd.DataFrame:
    return pd.DataFrame([r.model_dump() for r in records], columns=RESULT_COLUMNS)
