"""Command-line entry point: ``python -m src.idlewatch <subcommand> ...``.

Units at this boundary: INR in dB (10*log10 of sigma_I^2 / sigma_n^2),
angles in degrees from broadside, FAR on the natural-log scale. Everything
below this module works in linear units and radians.
"""

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import pandas as pd
from pydantic import ValidationError

from src.idlewatch.configs import configure_logging, settings
from src.idlewatch.cusum_detector import CusumConfig, CusumDetector, SampleConfig, SampleDetector
from src.idlewatch.doa_rootmusic import estimate_doa
from src.idlewatch.errors import (
    EXIT_IO,
    EXIT_NUMERICAL,
    EXIT_OK,
    EXIT_USAGE,
    IdlewatchError,
    InvalidArgumentError,
    NumericalFailureError,
)
from src.idlewatch.glr_detector import GlrConfig, GlrDetector
from src.idlewatch.mc_harness import SweepSpec, calibrate_threshold, default_far_cap, estimate_far, run_sweep
from src.idlewatch.sequential_stats import AmplitudeModel, theorem1_row
from src.idlewatch.signal_model import (
    InterferenceParams,
    ScenarioConfig,
    UlaGeometry,
    inr_db_to_sigma,
    project_many,
    steering_vector,
    synthesize_block,
)
from src.idlewatch.snapshot_io import read_amplitudes_csv, read_iqsn, write_csv, write_iqsn, write_json

logger = logging.getLogger(__name__)

THEOREM1_DEFAULT_DB = [0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 8.0, 10.0]


class UsageError(InvalidArgumentError):
    """Bad command-line usage, reported with exit code 1."""


class ArgumentParser(argparse.ArgumentParser):
    """argparse with usage errors mapped to exit code 1 instead of 2."""

    def error(self, message: str):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _read_text(path: str) -> str:
    try:
        return Path(path).read_text()
    except OSError as e:
        raise IOError(f"cannot read {path}: {e}") from e


def _theta_from_degrees(theta_deg: float) -> float:
    if not math.isfinite(theta_deg) or abs(theta_deg) > 90.0:
        raise UsageError(f"--theta-deg must lie in [-90, 90], got {theta_deg}")
    return math.radians(theta_deg)


def _model_from_flags(args) -> AmplitudeModel:
    return AmplitudeModel(sigma_I=inr_db_to_sigma(args.inr_db) * args.noise_std, sigma_n=args.noise_std)


def _write_frame(frame: pd.DataFrame, out: Optional[str]) -> None:
    if out is None:
        frame.to_csv(sys.stdout, index=False)
    else:
        write_csv(out, frame)
        logger.info("wrote %d rows to %s", len(frame), out)


def cmd_simulate(args) -> int:
    scenario = ScenarioConfig.model_validate_json(_read_text(args.scenario))
    updates = {}
    if args.seed is not None:
        updates["rng_seed"] = args.seed
    if args.inr_db is not None or args.theta_deg is not None:
        base = scenario.interference or InterferenceParams(amplitude=0.0)
        interference = {}
        if args.inr_db is not None:
            interference["amplitude"] = inr_db_to_sigma(args.inr_db) * scenario.noise_std
        if args.theta_deg is not None:
            interference["direction"] = _theta_from_degrees(args.theta_deg)
        updates["interference"] = InterferenceParams.model_validate({**base.model_dump(), **interference})
    if updates:
        scenario = ScenarioConfig.model_validate({**scenario.model_dump(), **updates})
    if args.count < 1:
        raise UsageError(f"--count must be >= 1, got {args.count}")

    rng = np.random.default_rng(scenario.rng_seed)
    snapshots = synthesize_block(scenario, 1, args.count, rng)
    write_iqsn(args.out, snapshots)

    sidecar = {
        "scenario": json.loads(scenario.model_dump_json()),
        "count": args.count,
        "sigma_I": 0.0 if scenario.interference is None else scenario.interference.amplitude,
        "theta_deg": None if scenario.interference is None else math.degrees(scenario.interference.direction),
    }
    write_json(f"{args.out}.json", sidecar)
    logger.info("resolved scenario: %s", json.dumps(sidecar["scenario"]))
    print(f"wrote {args.count} snapshots (M={scenario.geometry.num_elements}) to {args.out}")
    return EXIT_OK


def _detect_amplitudes(args, amplitudes: np.ndarray) -> pd.DataFrame:
    config_cls, detector_cls = (SampleConfig, SampleDetector) if args.mode == "sample" else (CusumConfig, CusumDetector)
    detector = detector_cls(config_cls(model=_model_from_flags(args), threshold=args.threshold))
    rows = []
    for r in amplitudes:
        outcome = detector.update(float(r))
        rows.append({"k": detector.state.k, "r": float(r), "g": outcome.statistic, "alarm": int(outcome.alarm)})
        if outcome.alarm:
            if not args.continual:
                break
            detector.reset()
    return pd.DataFrame(rows, columns=["k", "r", "g", "alarm"])


def _detect_glr(args, snapshots: np.ndarray) -> pd.DataFrame:
    geometry = UlaGeometry(num_elements=snapshots.shape[1], spacing_wavelengths=args.spacing)
    config = GlrConfig(model=_model_from_flags(args), threshold=args.threshold, max_window=args.window, geometry=geometry)
    detector = GlrDetector(config)
    rows = []
    for y in snapshots:
        outcome = detector.update(y)
        rows.append(
            {
                "k": detector.state.k,
                "G": outcome.statistic,
                "theta_hat_deg": math.degrees(outcome.theta_hat) if outcome.theta_hat is not None else math.nan,
                "alarm": int(outcome.alarm),
                "j_hat": outcome.change_index if outcome.change_index is not None else -1,
            }
        )
        if outcome.alarm:
            if not args.continual:
                break
            detector.reset()
    if detector.state.skipped_windows:
        logger.warning("%d GLR candidate windows had no admissible root", detector.state.skipped_windows)
    return pd.DataFrame(rows, columns=["k", "G", "theta_hat_deg", "alarm", "j_hat"])


def cmd_detect(args) -> int:
    from_csv = Path(args.input).suffix.lower() == ".csv"
    if args.mode == "glr":
        if from_csv:
            raise UsageError("glr mode needs array snapshots (IQSN), not amplitudes")
        frame = _detect_glr(args, read_iqsn(args.input))
    else:
        if from_csv:
            amplitudes = read_amplitudes_csv(args.input)
        else:
            if args.theta_deg is None:
                raise UsageError(
                    f"{args.mode} mode assumes a known interference direction; pass --theta-deg"
                )
            snapshots = read_iqsn(args.input)
            geometry = UlaGeometry(num_elements=snapshots.shape[1], spacing_wavelengths=args.spacing)
            steer = steering_vector(geometry, _theta_from_degrees(args.theta_deg))
            amplitudes = np.abs(project_many(snapshots, steer))
        frame = _detect_amplitudes(args, amplitudes)

    _write_frame(frame, args.out)
    alarms = frame.loc[frame["alarm"] == 1, "k"].tolist()
    if args.continual:
        summary = f"alarms: {' '.join(str(k) for k in alarms) if alarms else 'none'}"
    else:
        summary = f"first alarm: {alarms[0] if alarms else 'none'}"
    print(summary, file=sys.stdout if args.out else sys.stderr)
    return EXIT_OK


def cmd_doa(args) -> int:
    snapshots = read_iqsn(args.input)
    count, num_elements = snapshots.shape
    geometry = UlaGeometry(num_elements=num_elements, spacing_wavelengths=args.spacing)
    step = args.step or args.window
    if args.window < 1 or step < 1:
        raise UsageError("--window and --step must be >= 1")

    rows = []
    failures = 0
    for start in range(0, count - args.window + 1, step):
        window = (start + 1, start + args.window)
        try:
            estimate = estimate_doa(snapshots[start : start + args.window], geometry, window=window)
            rows.append((*window, estimate.theta_deg, estimate.root_modulus))
        except NumericalFailureError as e:
            failures += 1
            logger.warning("window %d..%d: %s", window[0], window[1], e)
            rows.append((*window, math.nan, math.nan))
    _write_frame(pd.DataFrame(rows, columns=["window_start", "window_end", "theta_deg", "root_modulus"]), args.out)
    return EXIT_NUMERICAL if failures else EXIT_OK


def _detector_config(args, threshold: float):
    model = _model_from_flags(args)
    if args.mode == "glr":
        geometry = UlaGeometry(num_elements=args.elements, spacing_wavelengths=args.spacing)
        return GlrConfig(model=model, threshold=threshold, max_window=args.window, geometry=geometry)
    if args.mode == "sample":
        return SampleConfig(model=model, threshold=threshold)
    return CusumConfig(model=model, threshold=threshold)


def cmd_calibrate(args) -> int:
    if args.target_neg_log_far is not None:
        target = math.exp(-args.target_neg_log_far)
    else:
        target = args.target_far
    config = _detector_config(args, threshold=1.0)
    h = calibrate_threshold(
        config,
        target,
        args.tolerance,
        seed=args.seed,
        trials=args.trials,
        cap=args.cap,
        workers=args.workers,
    )
    cap = args.cap or default_far_cap(target)
    check = estimate_far(
        config.model_copy(update={"threshold": h}), None, args.trials, cap, args.seed, workers=args.workers
    )
    result = {
        "mode": args.mode,
        "inr_db": args.inr_db,
        "target_far": target,
        "threshold": h,
        "far": check.far,
        "neg_log_far": check.neg_log_far,
        "censored_fraction": check.censored_fraction,
    }
    if args.out:
        write_json(args.out, result)
    print(json.dumps(result))
    return EXIT_OK


def cmd_sweep(args) -> int:
    spec = SweepSpec.model_validate_json(_read_text(args.spec))
    if args.full_scale:
        spec = spec.model_copy(update={"trials": settings.full_scale_trials})
        logger.info("full-scale sweep: %d trials per cell", spec.trials)
    records = run_sweep(
        spec,
        out_dir=args.out,
        resume=args.resume,
        workers=args.workers,
        progress=not args.no_progress,
    )
    print(f"wrote {len(records)} cells to {args.out}")
    return EXIT_OK


def cmd_theorem1(args) -> int:
    rows = []
    status = EXIT_OK
    for sigma_db in args.sigma_db:
        try:
            row = theorem1_row(sigma_db)
        except NumericalFailureError as e:
            logger.error("sigma=%.3f dB: %s", sigma_db, e)
            rows.append((sigma_db, math.nan, math.nan, math.nan, math.nan, math.nan))
            status = EXIT_NUMERICAL
            continue
        if not row.within_bounds:
            logger.error(
                "sigma=%.3f dB: 1/I=%.12g outside [%.12g, %.12g]", sigma_db, row.inverse_information, row.lower, row.upper
            )
            status = EXIT_NUMERICAL
        rows.append((row.sigma_db, row.information, row.inverse_information, row.lower, row.upper, row.fitted_a))
    columns = ["sigma_db", "information", "inverse_information", "lower", "upper", "fitted_a"]
    _write_frame(pd.DataFrame(rows, columns=columns), args.out)
    return status


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--inr-db", type=float, required=True, help="INR sigma^2 = (sigma_I/sigma_n)^2 in dB")
    parser.add_argument("--noise-std", type=float, default=1.0, help="noise amplitude sigma_n, linear (default 1)")
    parser.add_argument(
        "--spacing", type=float, default=0.5, help="element spacing d/lambda in wavelengths (default 0.5)"
    )


def build_parser() -> ArgumentParser:
    parser = ArgumentParser(
        prog="idlewatch",
        description="Online detection of terrestrial interference in idle-phase array snapshots.",
    )
    parser.add_argument("--log-level", default=settings.log_level, help="logging level (default %(default)s)")
    commands = parser.add_subparsers(dest="command", required=True)

    simulate = commands.add_parser("simulate", help="synthesize snapshots from a scenario JSON into an IQSN file")
    simulate.add_argument("--scenario", required=True, help="scenario JSON (schema_version 1)")
    simulate.add_argument("--count", type=int, required=True, help="number of snapshots")
    simulate.add_argument("--out", required=True, help="IQSN output path; a <out>.json sidecar is written too")
    simulate.add_argument("--seed", type=int, help="override the scenario rng_seed")
    simulate.add_argument("--inr-db", type=float, help="override the interference INR, dB (linear sigma_I in sidecar)")
    simulate.add_argument("--theta-deg", type=float, help="override the interference direction, degrees from broadside")
    simulate.set_defaults(handler=cmd_simulate)

    detect = commands.add_parser("detect", help="run a detector over an IQSN file or amplitude CSV")
    detect.add_argument("--in", dest="input", required=True, help="IQSN snapshots, or a .csv of amplitudes r")
    detect.add_argument("--mode", choices=["cusum", "glr", "sample"], default="cusum")
    detect.add_argument("--threshold", type=float, required=True, help="threshold h on the LLR scale, natural log")
    detect.add_argument(
        "--theta-deg", type=float, help="known interference direction in degrees from broadside (cusum/sample)"
    )
    detect.add_argument("--window", type=int, default=settings.glr_window, help="GLR window length L in samples")
    detect.add_argument("--continual", action="store_true", help="reset after each alarm and keep going")
    detect.add_argument("--out", help="per-sample CSV output (default stdout)")
    _add_model_flags(detect)
    detect.set_defaults(handler=cmd_detect)

    doa = commands.add_parser("doa", help="Root-MUSIC direction estimates over sliding windows")
    doa.add_argument("--in", dest="input", required=True, help="IQSN snapshots")
    doa.add_argument("--window", type=int, required=True, help="snapshots per estimate N")
    doa.add_argument("--step", type=int, help="window advance in snapshots (default N)")
    doa.add_argument("--spacing", type=float, default=0.5, help="element spacing d/lambda (default 0.5)")
    doa.add_argument("--out", help="CSV output, angles in degrees (default stdout)")
    doa.set_defaults(handler=cmd_doa)

    calibrate = commands.add_parser("calibrate", help="find h for a target FAR by Monte-Carlo bisection")
    calibrate.add_argument("--mode", choices=["cusum", "glr", "sample"], default="cusum")
    target = calibrate.add_mutually_exclusive_group(required=True)
    target.add_argument("--target-far", type=float, help="target false-alarm rate per sample, in (0, 1)")
    target.add_argument("--target-neg-log-far", type=float, help="target -ln FAR (natural log)")
    calibrate.add_argument("--tolerance", type=float, default=0.1, help="allowed |ln FAR - ln target|")
    calibrate.add_argument("--trials", type=int, default=10_000, help="H0 runs per FAR evaluation")
    calibrate.add_argument("--cap", type=int, help="run-length cap T_max (default max(1000, 50/target))")
    calibrate.add_argument("--seed", type=int, default=0)
    calibrate.add_argument("--elements", type=int, default=4, help="array size M (glr)")
    calibrate.add_argument("--window", type=int, default=settings.glr_window, help="GLR window length L")
    calibrate.add_argument("--workers", type=int, default=settings.workers)
    calibrate.add_argument("--out", help="JSON result path")
    _add_model_flags(calibrate)
    calibrate.set_defaults(handler=cmd_calibrate)

    sweep = commands.add_parser("sweep", help="Monte-Carlo CADD/FAR sweep over (INR, h) cells")
    sweep.add_argument("--spec", required=True, help="sweep spec JSON (schema_version 1, INR in dB)")
    sweep.add_argument("--out", default=settings.results_dir, help="results directory (default %(default)s)")
    sweep.add_argument("--resume", action="store_true", help="skip cells already in completed.jsonl")
    sweep.add_argument("--full-scale", action="store_true", help=f"use {settings.full_scale_trials} trials per cell")
    sweep.add_argument("--workers", type=int, default=settings.workers, help="worker processes")
    sweep.add_argument("--no-progress", action="store_true", help="hide the progress bar")
    sweep.set_defaults(handler=cmd_sweep)

    theorem1 = commands.add_parser("theorem1", help="KL information 1/I(sigma) against its closed-form bounds")
    theorem1.add_argument(
        "--sigma-db", type=float, nargs="+", default=THEOREM1_DEFAULT_DB, help="INR values sigma^2 in dB"
    )
    theorem1.add_argument("--out", help="CSV output (default stdout)")
    theorem1.set_defaults(handler=cmd_theorem1)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    configure_logging(args.log_level)
    try:
        return args.handler(args)
    except ValidationError as e:
        logger.error("invalid input:\n%s", e)
        return EXIT_USAGE
    except IdlewatchError as e:
        logger.error("%s", e)
        return e.exit_code
    except OSError as e:
        logger.error("I/O error: %s", e)
        return EXIT_IO
