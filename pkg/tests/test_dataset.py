import numpy as np
import pytest

from services.dataset import (
    DatasetSplit,
    LabeledImage,
    as_arrays,
    build_from_traces,
    class_balance,
    dataset_file_size,
    load_dataset,
    read_dataset,
    save_dataset,
    split,
    window_and_label,
    write_dataset,
)
from services.errors import (
    BadMagicError,
    ChecksumError,
    ConfigurationError,
    DataError,
    FormatError,
    TruncatedError,
    VersionError,
)
from services.signal_sim import FaultSpec, SignalTrace, simulate_trace
from services.transform import FeatureImage


def _images(labels, seed=0):
    rng = np.random.default_rng(seed)
    return [
        LabeledImage(FeatureImage(rng.uniform(0, 1, size=(3, 32, 32)), start_index=i), int(label))
        for i, label in enumerate(labels)
    ]


def test_window_count(healthy_trace):
    images = window_and_label(healthy_trace, hop=256)
    assert len(images) == (6000 - 1024) // 256 + 1
    assert [item.image.start_index for item in images[:3]] == [0, 256, 512]
    assert all(item.image.trace_id == 'healthy' for item in images)


def test_healthy_trace_is_all_negative(healthy_trace):
    assert all(item.label == 0 for item in window_and_label(healthy_trace))


def test_labels_follow_fault_sample_count(faulty_trace):
    onset_index = int(np.searchsorted(faulty_trace.times, 2.5))
    for item in window_and_label(faulty_trace, hop=128):
        fault_samples = max(0, item.image.start_index + 1024 - onset_index)
        assert item.label == int(fault_samples >= 128)


def test_window_fully_on_plateau_is_positive(profile):
    trace = simulate_trace(profile, 4.0, FaultSpec(onset_time=1.0), seed=8)
    images = window_and_label(trace, hop=512)
    plateau = [item for item in images if item.image.start_index >= 1100]
    assert plateau and all(item.label == 1 for item in plateau)


def test_shutdown_samples_do_not_count_as_fault(profile):
    trace = simulate_trace(profile, 6.0, FaultSpec(onset_time=1.5, shutdown_time=3.0), seed=2)
    for item in window_and_label(trace, hop=256):
        if item.image.start_index >= 3000:
            assert item.label == 0


def test_short_trace_gives_no_windows():
    trace = SignalTrace(np.arange(1000) * 1e-3, np.ones(1000), 1e-3, trace_id='short')
    assert window_and_label(trace) == []


def test_invalid_hop():
    trace = SignalTrace(np.arange(2000) * 1e-3, np.ones(2000), 1e-3)
    with pytest.raises(ConfigurationError):
        window_and_label(trace, hop=0)


def test_label_must_be_binary():
    with pytest.raises(DataError):
        LabeledImage(FeatureImage(np.zeros((3, 32, 32))), 2)


def test_build_from_traces_concatenates(healthy_trace, faulty_trace):
    images = build_from_traces([healthy_trace, faulty_trace], hop=256)
    assert len(images) == 40
    assert 0.0 < class_balance(images) < 0.5
    assert class_balance([]) == 0.0


def test_split_sizes_and_disjointness(desk_split):
    assert (len(desk_split.train), len(desk_split.validation), len(desk_split.test)) == (1500, 200, 100)
    seen = set()
    for part in (desk_split.train, desk_split.validation, desk_split.test):
        keys = {(item.image.trace_id, item.image.start_index) for item in part}
        assert len(keys) == len(part)
        assert not keys & seen
        seen |= keys


def test_split_preserves_class_balance(desk_split):
    overall = class_balance(desk_split.train + desk_split.validation + desk_split.test)
    for part in (desk_split.train, desk_split.validation, desk_split.test):
        assert abs(class_balance(part) - overall) <= 0.05 + 1e-9


@pytest.mark.parametrize('n,expected', [(18, (15, 2, 1)), (37, (31, 4, 2)), (100, (84, 11, 5))])
def test_split_remainder_goes_to_training(n, expected):
    result = split(_images([i % 2 for i in range(n)]), seed=1)
    assert (len(result.train), len(result.validation), len(result.test)) == expected


def test_split_is_deterministic():
    images = _images([i % 3 == 0 for i in range(90)])
    first, second = split(images, seed=5), split(images, seed=5)
    for a, b in zip((first.train, first.validation, first.test), (second.train, second.validation, second.test)):
        assert [item.image.start_index for item in a] == [item.image.start_index for item in b]
    other = split(images, seed=6)
    assert [i.image.start_index for i in other.train] != [i.image.start_index for i in first.train]


def test_split_rejects_tiny_sets():
    with pytest.raises(ConfigurationError):
        split(_images([0, 1] * 5))


def test_split_stratifies_rare_class():
    result = split(_images([1] * 9 + [0] * 171), seed=0)
    assert isinstance(result, DatasetSplit)
    assert sum(len(part) for part in (result.train, result.validation, result.test)) == 180


def test_as_arrays():
    x, y = as_arrays(_images([0, 1, 1]))
    assert x.shape == (3, 3, 32, 32)
    assert y.tolist() == [0, 1, 1]
    x, y = as_arrays([])
    assert x.shape == (0, 3, 32, 32) and y.shape == (0,)


def test_file_size_and_round_trip():
    images = _images([0, 1, 0, 1, 1])
    blob = save_dataset(images)
    assert len(blob) == dataset_file_size(5) == 5 * 12289 + 14
    restored = load_dataset(blob)
    assert [item.label for item in restored] == [0, 1, 0, 1, 1]
    for original, loaded in zip(images, restored):
        assert np.array_equal(loaded.image.channels, original.image.channels.astype(np.float32))


def test_file_round_trip_on_disk(tmp_path):
    images = _images([1, 0])
    path = tmp_path / 'train.trnd'
    write_dataset(path, images)
    assert [item.label for item in read_dataset(path)] == [1, 0]
    assert list(tmp_path.iterdir()) == [path]


def test_empty_dataset_file():
    assert load_dataset(save_dataset([])) == []


def test_corrupted_dataset_files():
    blob = save_dataset(_images([0, 1, 1]))
    with pytest.raises(TruncatedError):
        load_dataset(blob[:-1])
    with pytest.raises(TruncatedError):
        load_dataset(blob[:8])
    with pytest.raises(FormatError):
        load_dataset(blob + b'\x00')
    with pytest.raises(BadMagicError):
        load_dataset(b'NOPE' + blob[4:])
    with pytest.raises(VersionError):
        load_dataset(blob[:4] + b'\x07\x00' + blob[6:])
    flipped = bytearray(blob)
    flipped[500] ^= 0x40
    with pytest.raises(ChecksumError):
        load_dataset(bytes(flipped))
