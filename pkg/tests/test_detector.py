import time

import numpy as np
import pytest

from services.detector import (
    DetectorConfig,
    OverloadDetector,
    Verdict,
    batch_verdicts,
    classify_window,
    detection_latency,
    parse_debounce,
    trip_sample_index,
    verdicts_to_csv,
)
from services.errors import ConfigurationError, DataError
from services.log_manager import EventJournal
from services.signal_sim import FaultSpec, MotorProfile, simulate_campaign, simulate_trace
from services.transform import Window

HOP = 256


@pytest.fixture
def mean_classifier(monkeypatch):
    """Remplace le réseau par un seuil sur la moyenne brute de la fenêtre"""
    def classify(net, window, threshold):
        probability = 0.9 if window.values.mean() > 2.0 else 0.1
        return probability, probability >= threshold

    monkeypatch.setattr('services.detector.classify_window', classify)


@pytest.fixture
def scripted(monkeypatch):
    """Verdicts imposés, dans l'ordre"""
    script = []

    def classify(net, window, threshold):
        probability = 0.9 if script.pop(0) else 0.1
        return probability, probability >= threshold

    monkeypatch.setattr('services.detector.classify_window', classify)
    return script


def _push_windows(detector, n_windows):
    verdicts = []
    for _ in range(1024 + (n_windows - 1) * HOP):
        verdict = detector.push_sample(1.0)
        if verdict is not None:
            verdicts.append(verdict)
    return verdicts


def test_config_validation():
    with pytest.raises(ConfigurationError):
        DetectorConfig(hop=0)
    with pytest.raises(ConfigurationError):
        DetectorConfig(debounce=(3, 2))
    with pytest.raises(ConfigurationError):
        DetectorConfig(score_threshold=1.0)


def test_parse_debounce():
    assert parse_debounce("2,3") == (2, 3)
    with pytest.raises(ConfigurationError):
        parse_debounce("2")
    with pytest.raises(ConfigurationError):
        parse_debounce("a,b")


def test_no_verdict_before_a_full_window(untrained_net):
    detector = OverloadDetector(untrained_net)
    for _ in range(1023):
        assert detector.push_sample(1.0) is None
    verdict = detector.push_sample(1.0)
    assert verdict is not None and verdict.window_seq == 0
    for _ in range(HOP - 1):
        assert detector.push_sample(1.0) is None
    assert detector.push_sample(1.0).window_seq == 1


def test_two_out_of_three_trips(untrained_net, scripted):
    scripted.extend([False, True, False, True, False])
    verdicts = _push_windows(OverloadDetector(untrained_net), 5)
    assert [v.tripped for v in verdicts] == [False, False, False, True, True]


def test_isolated_faults_do_not_trip(untrained_net, scripted):
    scripted.extend([True, False, False, True, False, False])
    verdicts = _push_windows(OverloadDetector(untrained_net), 6)
    assert [v.is_fault for v in verdicts] == [True, False, False, True, False, False]
    assert not any(v.tripped for v in verdicts)


def test_single_window_debounce(untrained_net, scripted):
    scripted.extend([False, True])
    detector = OverloadDetector(untrained_net, DetectorConfig(debounce=(1, 1)))
    assert [v.tripped for v in _push_windows(detector, 2)] == [False, True]


def test_latch_holds_until_reset(untrained_net, scripted):
    journal = EventJournal()
    calls = []
    scripted.extend([True, True, False, False, False])
    detector = OverloadDetector(untrained_net, on_trip=calls.append, journal=journal, detector_id='m1')
    verdicts = _push_windows(detector, 5)
    assert [v.tripped for v in verdicts] == [False, True, True, True, True]
    assert len(calls) == 1 and calls[0].window_seq == 1
    assert [e['stage'] for e in journal.events('m1')] == ['trip']

    detector.reset()
    assert not detector.tripped
    scripted.append(False)
    for _ in range(HOP):
        verdict = detector.push_sample(1.0)
    assert verdict is not None and not verdict.tripped
    assert journal.get_status('m1')['status'] == 'reset'


def test_inference_failure_trips_failsafe(untrained_net):
    journal = EventJournal()
    calls = []
    detector = OverloadDetector(untrained_net, on_trip=calls.append, journal=journal, detector_id='m2')
    for _ in range(1023):
        detector.push_sample(1.0)
    with pytest.raises(DataError):
        detector.push_sample(float('nan'))
    assert detector.tripped
    assert calls == [None]
    assert journal.events('m2', stage='failsafe')


def test_stream_matches_batch(untrained_net, faulty_trace):
    config = DetectorConfig(hop=512)
    streamed = OverloadDetector(untrained_net, config).feed(faulty_trace.currents)
    batch = batch_verdicts(untrained_net, faulty_trace.currents, config)
    assert len(streamed) == len(batch) == (6000 - 1024) // 512 + 1
    assert streamed == batch


def test_trip_sample_index():
    assert trip_sample_index(Verdict(0, 0.9, True, True), HOP) == 1024
    assert trip_sample_index(Verdict(3, 0.9, True, True), HOP) == 1024 + 3 * HOP


def test_latency_is_bounded(untrained_net, faulty_trace, mean_classifier):
    latency = detection_latency(faulty_trace, OverloadDetector(untrained_net))
    assert 0.0 < latency <= (1024 + 2 * HOP) * faulty_trace.sample_interval


def test_healthy_trace_never_trips(untrained_net, healthy_trace, mean_classifier):
    assert detection_latency(healthy_trace, OverloadDetector(untrained_net)) == float('inf')


def test_false_trip_is_timed_from_trace_start(untrained_net, healthy_trace, scripted):
    scripted.extend([True] * 20)
    latency = detection_latency(healthy_trace, OverloadDetector(untrained_net))
    assert latency == pytest.approx(healthy_trace.times[1024 + HOP - 1])


def test_latency_rejects_mismatched_sampling(untrained_net, faulty_trace):
    with pytest.raises(DataError):
        detection_latency(faulty_trace, OverloadDetector(untrained_net, sample_interval=2e-3))


def test_latency_replays_from_a_fresh_state(untrained_net, faulty_trace, mean_classifier):
    detector = OverloadDetector(untrained_net)
    first = detection_latency(faulty_trace, detector)
    assert detector.tripped
    assert detection_latency(faulty_trace, detector) == first


def test_verdict_csv(untrained_net, scripted):
    scripted.extend([True, True])
    text = verdicts_to_csv(_push_windows(OverloadDetector(untrained_net), 2))
    assert text.splitlines() == ['seq,probability,is_fault,tripped', '0,0.9,1,0', '1,0.9,1,1']


@pytest.mark.slow
def test_trained_detector_trips_on_overload_only(trained_model):
    net, _ = trained_model
    profile = MotorProfile()
    bound = (1024 + 2 * HOP) * profile.sample_interval
    for seed in range(5):
        faulty = simulate_trace(profile, 8.0, FaultSpec(onset_time=3.0 + 0.3 * seed), seed=100 + seed)
        assert detection_latency(faulty, OverloadDetector(net)) <= bound
        healthy = simulate_trace(profile, 8.0, seed=200 + seed)
        assert detection_latency(healthy, OverloadDetector(net)) == float('inf')


@pytest.mark.slow
def test_trained_stream_matches_batch_on_many_traces(trained_model):
    net, _ = trained_model
    for trace in simulate_campaign(MotorProfile(), 50, duration=6.0, seed=314):
        streamed = OverloadDetector(net).feed(trace.currents)
        assert streamed == batch_verdicts(net, trace.currents)


@pytest.mark.slow
def test_latency_does_not_grow_as_hop_shrinks(trained_model):
    net, _ = trained_model
    traces = simulate_campaign(MotorProfile(), 10, duration=9.0, fault_ratio=1.0, seed=271)
    for trace in traces:
        latencies = [
            detection_latency(trace, OverloadDetector(net, DetectorConfig(hop=hop)))
            for hop in (1024, 512, 256, 128)
        ]
        assert all(np.isfinite(latencies))
        assert latencies == sorted(latencies, reverse=True)


@pytest.mark.slow
def test_inference_fits_the_real_time_budget(trained_model, faulty_trace):
    net, _ = trained_model
    durations = []
    for start in range(0, len(faulty_trace) - 1024 + 1, 64):
        window = Window(faulty_trace.currents[start:start + 1024], faulty_trace.sample_interval)
        began = time.perf_counter()
        classify_window(net, window, 0.5)
        durations.append(time.perf_counter() - began)
    assert float(np.median(durations)) <= 0.005


@pytest.mark.slow
def test_detection_quality_over_a_campaign(trained_model):
    net, _ = trained_model
    traces = simulate_campaign(MotorProfile(), 200, duration=8.0, fault_ratio=0.5, seed=1618)
    bound = (1024 + 2 * HOP) * MotorProfile().sample_interval
    faulty = [t for t in traces if t.fault_onset is not None]
    healthy = [t for t in traces if t.fault_onset is None]
    assert len(faulty) == len(healthy) == 100

    latencies = [detection_latency(t, OverloadDetector(net)) for t in faulty]
    assert max(latencies) <= bound
    assert all(detection_latency(t, OverloadDetector(net)) == float('inf') for t in healthy)
