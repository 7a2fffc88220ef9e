"""
Service de constitution des jeux de données : fenêtrage, étiquetage, partition
15:2:1 et fichier binaire TRND
"""
import logging
import struct
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from services.artifact_writer import atomic_write_bytes
from services.errors import (
    BadMagicError,
    ChecksumError,
    ConfigurationError,
    DataError,
    FormatError,
    TruncatedError,
    VersionError,
)
from services.signal_sim import SignalTrace
from services.transform import (
    IMAGE_SIDE,
    N_CHANNELS,
    WINDOW_LENGTH,
    FeatureImage,
    Window,
    pid_transform,
    window_starts,
)

logger = logging.getLogger(__name__)

FAULT_SAMPLE_THRESHOLD = 128
DEFAULT_HOP = 256
SPLIT_PARTS = (15, 2, 1)
BALANCE_TOLERANCE = 0.05

DATASET_MAGIC = b'TRND'
DATASET_VERSION = 1
_HEADER = struct.Struct('<4sHI')
_CRC = struct.Struct('<I')
_PIXELS = N_CHANNELS * IMAGE_SIDE * IMAGE_SIDE
_RECORD = np.dtype([('pixels', '<f4', (_PIXELS,)), ('label', 'u1')])


@dataclass(frozen=True)
class LabeledImage:
    image: FeatureImage
    label: int

    def __post_init__(self):
        if self.label not in (0, 1):
            raise DataError(f"Étiquette hors de {{0, 1}}: {self.label}")


@dataclass(frozen=True)
class DatasetSplit:
    train: List[LabeledImage]
    validation: List[LabeledImage]
    test: List[LabeledImage]
    seed: int


def window_and_label(trace: SignalTrace, hop: int = DEFAULT_HOP,
                     threshold: int = FAULT_SAMPLE_THRESHOLD) -> List[LabeledImage]:
    """
    Découpe une trace en fenêtres glissantes, les transforme et les étiquette

    Une fenêtre est en défaut si au moins `threshold` de ses échantillons sont
    dans la surcharge (après l'apparition, avant l'arrêt).

    Args:
        trace: Trace source
        hop: Décalage entre deux fenêtres, en échantillons

    Returns:
        list: Images étiquetées (vide si la trace est plus courte qu'une fenêtre)
    """
    if hop < 1:
        raise ConfigurationError(f"hop doit être ≥ 1, reçu {hop}")
    starts = window_starts(len(trace), hop)
    if not starts:
        logger.warning(f"Trace {trace.trace_id or '?'} trop courte ({len(trace)} < {WINDOW_LENGTH}), aucune fenêtre")
        return []

    in_fault = np.concatenate([[0], np.cumsum(trace.fault_mask(), dtype=np.int64)])
    images = []
    for start in starts:
        window = Window(trace.currents[start:start + WINDOW_LENGTH], trace.sample_interval)
        fault_samples = in_fault[start + WINDOW_LENGTH] - in_fault[start]
        images.append(LabeledImage(
            image=pid_transform(window, start_index=start, trace_id=trace.trace_id),
            label=int(fault_samples >= threshold),
        ))
    return images


def build_from_traces(traces: Sequence[SignalTrace], hop: int = DEFAULT_HOP) -> List[LabeledImage]:
    """Fenêtre et étiquette un ensemble de traces"""
    images = []
    for trace in traces:
        images.extend(window_and_label(trace, hop))
    n_fault = sum(item.label for item in images)
    logger.info(f"Jeu de données: {len(images)} images ({n_fault} en défaut) depuis {len(traces)} traces")
    return images


def class_balance(images: Sequence[LabeledImage]) -> float:
    """Proportion d'images en défaut"""
    if not images:
        return 0.0
    return sum(item.label for item in images) / len(images)


def _split_sizes(n: int) -> Tuple[int, int, int]:
    total = sum(SPLIT_PARTS)
    n_val = n * SPLIT_PARTS[1] // total
    n_test = n * SPLIT_PARTS[2] // total
    return n - n_val - n_test, n_val, n_test


def _stratified(labels: np.ndarray, n_val: int, n_test: int, rng: np.random.Generator):
    classes = np.unique(labels)
    train, val, test = [], [], []
    val_left, test_left = n_val, n_test
    for i, cls in enumerate(classes):
        idx = rng.permutation(np.nonzero(labels == cls)[0])
        if i == len(classes) - 1:
            nv, nt = val_left, test_left
        else:
            share = len(idx) / len(labels)
            nv = min(int(round(n_val * share)), val_left)
            nt = min(int(round(n_test * share)), test_left)
        nv = min(nv, len(idx))
        nt = min(nt, len(idx) - nv)
        val.extend(idx[:nv].tolist())
        test.extend(idx[nv:nv + nt].tolist())
        train.extend(idx[nv + nt:].tolist())
        val_left -= nv
        test_left -= nt

    # complète depuis l'entraînement si une classe était trop petite
    train = rng.permutation(np.asarray(train, dtype=np.int64)).tolist()
    val.extend(train[:val_left])
    test.extend(train[val_left:val_left + test_left])
    train = train[val_left + test_left:]
    return (
        rng.permutation(np.asarray(train, dtype=np.int64)),
        rng.permutation(np.asarray(val, dtype=np.int64)),
        rng.permutation(np.asarray(test, dtype=np.int64)),
    )


def split(images: Sequence[LabeledImage], seed: int = 0) -> DatasetSplit:
    """
    Mélange déterministe puis partition 15/18, 2/18, 1/18 (reste à l'entraînement)

    Si une partie s'écarte de plus de 5 points de la proportion de défauts globale,
    la partition est refaite en stratifiant par classe.

    Args:
        images: Images étiquetées
        seed: Graine du mélange

    Returns:
        DatasetSplit: Parties disjointes
    """
    n = len(images)
    if n < sum(SPLIT_PARTS):
        raise ConfigurationError(f"Au moins {sum(SPLIT_PARTS)} images sont nécessaires, reçu {n}")
    n_train, n_val, n_test = _split_sizes(n)
    labels = np.array([item.label for item in images], dtype=np.int64)
    overall = labels.mean()

    rng = np.random.default_rng(seed)
    perm = rng.permutation(n)
    parts = (perm[:n_train], perm[n_train:n_train + n_val], perm[n_train + n_val:])
    if any(abs(labels[part].mean() - overall) > BALANCE_TOLERANCE for part in parts):
        logger.info("Partition déséquilibrée, nouveau tirage stratifié")
        parts = _stratified(labels, n_val, n_test, rng)
        if any(abs(labels[part].mean() - overall) > BALANCE_TOLERANCE for part in parts):
            logger.warning("Équilibre des classes hors tolérance même après stratification")

    seen = set()
    for part in parts:
        indices = set(part.tolist())
        assert not (indices & seen), "Une image apparaît dans deux parties"
        seen |= indices
    assert len(seen) == n

    train, val, test = ([images[i] for i in part] for part in parts)
    logger.info(f"Partition (graine {seed}): {len(train)} / {len(val)} / {len(test)}")
    return DatasetSplit(train=train, validation=val, test=test, seed=seed)


def as_arrays(images: Sequence[LabeledImage]) -> Tuple[np.ndarray, np.ndarray]:
    """Empile les images (N×3×32×32) et les étiquettes (N)"""
    if not images:
        return np.zeros((0, N_CHANNELS, IMAGE_SIDE, IMAGE_SIDE)), np.zeros(0, dtype=np.int64)
    x = np.stack([item.image.channels for item in images])
    y = np.array([item.label for item in images], dtype=np.int64)
    return x, y


def dataset_file_size(count: int) -> int:
    return _HEADER.size + count * _RECORD.itemsize + _CRC.size


def save_dataset(images: Sequence[LabeledImage]) -> bytes:
    """
    Sérialise des images étiquetées : en-tête TRND, enregistrements
    (3×32×32 float32 LE + étiquette u8), CRC-32 final

    Returns:
        bytes: Contenu du fichier
    """
    x, y = as_arrays(images)
    records = np.zeros(len(images), dtype=_RECORD)
    records['pixels'] = x.reshape(len(images), _PIXELS)
    records['label'] = y
    body = _HEADER.pack(DATASET_MAGIC, DATASET_VERSION, len(images)) + records.tobytes()
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def load_dataset(blob: bytes) -> List[LabeledImage]:
    """
    Relit un fichier TRND ; aucune donnée partielle n'est rendue en cas d'erreur

    Returns:
        list: Images étiquetées
    """
    blob = bytes(blob)
    if len(blob) < _HEADER.size + _CRC.size:
        raise TruncatedError(f"Fichier de données tronqué ({len(blob)} octets)")
    magic, version, count = _HEADER.unpack_from(blob, 0)
    if magic != DATASET_MAGIC:
        raise BadMagicError(f"Signature inattendue: {magic!r}")
    if version != DATASET_VERSION:
        raise VersionError(f"Version {version} non supportée (attendue {DATASET_VERSION})")
    expected = dataset_file_size(count)
    if len(blob) < expected:
        raise TruncatedError(f"{len(blob)} octets pour {count} images, {expected} attendus")
    if len(blob) > expected:
        raise FormatError(f"{len(blob) - expected} octets en trop")
    end = expected - _CRC.size
    (stored_crc,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(blob[:end]) & 0xFFFFFFFF != stored_crc:
        raise ChecksumError("CRC-32 du fichier de données invalide")

    records = np.frombuffer(blob, dtype=_RECORD, count=count, offset=_HEADER.size)
    images = []
    for i, record in enumerate(records):
        channels = record['pixels'].astype(np.float64).reshape(N_CHANNELS, IMAGE_SIDE, IMAGE_SIDE)
        images.append(LabeledImage(FeatureImage(channels, start_index=i), int(record['label'])))
    return images


def write_dataset(path: Union[str, Path], images: Sequence[LabeledImage]) -> str:
    """Écrit le fichier de façon atomique"""
    return atomic_write_bytes(path, save_dataset(images))


def read_dataset(path: Union[str, Path]) -> List[LabeledImage]:
    return load_dataset(Path(path).read_bytes())
