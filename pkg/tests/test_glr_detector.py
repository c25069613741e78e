import math

import numpy as np
import pytest
from pydantic import ValidationError

from src.idlewatch.errors import DetectorUsageError, InvalidArgumentError, NumericalFailureError
from src.idlewatch.glr_detector import GlrConfig, GlrDetector, glr_statistic
from src.idlewatch.mc_harness import estimate_cadd, estimate_far
from src.idlewatch.sequential_stats import AmplitudeModel, llr
from src.idlewatch.signal_model import Snapshot, project_many, steering_vector, synthesize_block


def _config(geometry, inr_db=3.0, threshold=1e9, max_window=8):
    return GlrConfig(
        model=AmplitudeModel.from_inr_db(inr_db), threshold=threshold, max_window=max_window, geometry=geometry
    )


def test_known_direction_statistic_is_projected_llr_sum(geometry, rng, scenario):
    window = synthesize_block(scenario(3.0, theta=0.5), 1, 12, rng)
    model = AmplitudeModel.from_inr_db(3.0)
    score, theta = glr_statistic(window, model, geometry, theta=0.5)
    expected = np.sum(llr(np.abs(project_many(window, steering_vector(geometry, 0.5))), model))
    assert theta == 0.5
    assert score == pytest.approx(expected, rel=1e-12)


def test_estimated_direction_is_root_music(geometry, rng, scenario):
    window = synthesize_block(scenario(15.0, theta=-0.4), 1, 40, rng)
    _, theta = glr_statistic(window, AmplitudeModel.from_inr_db(15.0), geometry)
    assert abs(theta + 0.4) < math.radians(2.0)


def test_glr_statistic_rejects_empty_window(geometry):
    with pytest.raises(InvalidArgumentError):
        glr_statistic(np.empty((0, 4), dtype=complex), AmplitudeModel(sigma_I=1.0), geometry)


def test_zero_window_scores_minus_sigma_squared_per_sample(geometry):
    model = AmplitudeModel.from_inr_db(3.0)
    window = np.zeros((6, 4), dtype=complex)
    known, _ = glr_statistic(window, model, geometry, theta=0.2)
    estimated, theta = glr_statistic(window, model, geometry)
    assert known == pytest.approx(-model.sigma ** 2 * 6, rel=1e-12)
    assert estimated == pytest.approx(-model.sigma ** 2 * 6, rel=1e-12)
    assert -math.pi / 2 <= theta <= math.pi / 2


def test_glr_statistic_is_deterministic(geometry, rng, scenario):
    window = synthesize_block(scenario(2.0, theta=0.1), 1, 25, rng)
    model = AmplitudeModel.from_inr_db(2.0)
    assert glr_statistic(window, model, geometry) == glr_statistic(window, model, geometry)


def test_incremental_statistic_matches_recomputation(geometry, rng, scenario):
    detector = GlrDetector(_config(geometry, max_window=6))
    block = synthesize_block(scenario(2.0, theta=0.3, change_point=5), 1, 20, rng)
    for y in block:
        outcome = detector.update(y)
        assert outcome.statistic == pytest.approx(detector.recompute_statistic(), rel=1e-6, abs=1e-6)


def test_windowed_statistic_equals_search_over_all_change_points(geometry, rng, scenario):
    config = _config(geometry, inr_db=2.0, max_window=32)
    detector = GlrDetector(config)
    history = synthesize_block(scenario(2.0, theta=-0.6, change_point=8), 1, 20, rng)
    for k, y in enumerate(history, start=1):
        outcome = detector.update(y)
        best = -math.inf
        for j in range(k):
            try:
                score, _ = glr_statistic(history[j:k], config.model, geometry)
            except NumericalFailureError:
                continue
            best = max(best, score)
        assert outcome.statistic == pytest.approx(best, rel=1e-6, abs=1e-6)


def test_delay_and_false_alarms_are_monotone_in_threshold(geometry, scenario):
    changed = scenario(3.0, theta=0.3)
    delays, rates = [], []
    for threshold in (1.0, 2.0, 4.0):
        config = _config(geometry, threshold=threshold, max_window=8)
        delays.append(estimate_cadd(config, changed, trials=60, seed=5, max_samples=2000).mean)
        rates.append(estimate_far(config, None, trials=60, cap=2000, seed=6).far)
    assert delays == sorted(delays)
    assert rates == sorted(rates, reverse=True)


def test_window_is_limited(geometry, rng, scenario):
    detector = GlrDetector(_config(geometry, max_window=5))
    for y in synthesize_block(scenario(None), 1, 12, rng):
        outcome = detector.update(y)
    assert len(detector.state.buffer) == 5
    assert len(detector.state.scatters) == 5
    assert detector.state.k == 12
    assert outcome.change_index is None or outcome.change_index >= 8


def test_high_inr_alarm_reports_direction(geometry, rng, scenario):
    theta = math.radians(20.0)
    detector = GlrDetector(_config(geometry, inr_db=20.0, threshold=50.0, max_window=32))
    for y in synthesize_block(scenario(20.0, theta=theta), 1, 10, rng):
        outcome = detector.update(y)
        if outcome.alarm:
            break
    assert outcome.alarm
    assert outcome.stopping_index <= 3
    assert outcome.change_index == 1
    assert abs(math.degrees(outcome.theta_hat) - 20.0) < 5.0
    assert detector.state.alarm.stopping_index == outcome.stopping_index


def test_noise_only_with_huge_threshold_stays_quiet(geometry, rng, scenario):
    detector = GlrDetector(_config(geometry, threshold=1e6))
    for y in synthesize_block(scenario(None), 1, 50, rng):
        assert not detector.update(y).alarm


def test_alarm_latches_and_reset_keeps_counter(geometry, rng, scenario):
    detector = GlrDetector(_config(geometry, inr_db=20.0, threshold=10.0))
    block = synthesize_block(scenario(20.0), 1, 3, rng)
    assert detector.update(block[0]).alarm
    with pytest.raises(DetectorUsageError):
        detector.update(block[1])
    detector.reset()
    assert detector.state.k == 1
    assert len(detector.state.buffer) == 0
    detector.update(Snapshot(values=block[1], index=2))
    assert detector.state.k == 2


def test_snapshot_index_and_shape_checked(geometry):
    detector = GlrDetector(_config(geometry))
    with pytest.raises(DetectorUsageError):
        detector.update(Snapshot(values=np.ones(4), index=3))
    with pytest.raises(InvalidArgumentError):
        detector.update(np.ones(3))


def test_config_validation(geometry):
    with pytest.raises(ValidationError):
        GlrConfig(model=AmplitudeModel(sigma_I=0.0), threshold=1.0, geometry=geometry)
    with pytest.raises(ValidationError):
        GlrConfig(model=AmplitudeModel(sigma_I=1.0), threshold=1.0, max_window=0, geometry=geometry)
