"""
Transformation PID : une fenêtre de 1024 échantillons devient une image 3×32×32
(signal brut, intégrale, dérivée), chaque canal normalisé dans [0, 1]
"""
import logging
from dataclasses import dataclass
from typing import List

import numpy as np
from scipy.integrate import cumulative_trapezoid

from services.errors import DataError

logger = logging.getLogger(__name__)

WINDOW_LENGTH = 1024
IMAGE_SIDE = 32
N_CHANNELS = 3
NORMALIZE_EPS = 1e-12


@dataclass(frozen=True, eq=False)
class Window:
    """Fenêtre de 1024 échantillons de courant"""
    values: np.ndarray
    sample_interval: float

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64)
        object.__setattr__(self, 'values', values)
        if values.shape != (WINDOW_LENGTH,):
            raise DataError(f"Une fenêtre contient exactement {WINDOW_LENGTH} valeurs, reçu {values.shape}")
        if not self.sample_interval > 0:
            raise DataError(f"sample_interval doit être > 0, reçu {self.sample_interval}")


@dataclass(frozen=True, eq=False)
class FeatureImage:
    """Image 3×32×32 (brut, intégrale, dérivée), valeurs dans [0, 1]"""
    channels: np.ndarray
    start_index: int = 0
    trace_id: str = ""

    def __post_init__(self):
        channels = np.asarray(self.channels, dtype=np.float64)
        object.__setattr__(self, 'channels', channels)
        if channels.shape != (N_CHANNELS, IMAGE_SIDE, IMAGE_SIDE):
            raise DataError(f"Image 3×32×32 attendue, reçu {channels.shape}")
        if not np.all(np.isfinite(channels)) or channels.min() < 0.0 or channels.max() > 1.0:
            raise DataError("Les valeurs d'une image doivent être dans [0, 1]")

    def __eq__(self, other):
        if not isinstance(other, FeatureImage):
            return NotImplemented
        return np.array_equal(self.channels, other.channels)

    __hash__ = None


def integrate(window: Window) -> np.ndarray:
    """Intégrale cumulée par la méthode des trapèzes, remise à 0 en début de fenêtre"""
    return cumulative_trapezoid(window.values, dx=window.sample_interval, initial=0.0)


def differentiate(window: Window) -> np.ndarray:
    """Différences centrées à l'intérieur, décentrées (avant/arrière) aux deux bords"""
    return np.gradient(window.values, window.sample_interval, edge_order=1)


def normalize(values: np.ndarray) -> np.ndarray:
    """
    Mise à l'échelle min-max dans [0, 1]

    Un canal constant (écart < 1e-12) donne 0.5 partout.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise DataError("Valeurs non finies dans le canal à normaliser")
    low = values.min()
    span = values.max() - low
    if span < NORMALIZE_EPS:
        return np.full_like(values, 0.5)
    return np.clip((values - low) / span, 0.0, 1.0)


def raw_channels(window: Window) -> np.ndarray:
    """Les trois canaux non normalisés (brut, intégrale, dérivée), forme 3×1024"""
    return np.stack([window.values, integrate(window), differentiate(window)])


def image_from_channels(channels: np.ndarray, start_index: int = 0, trace_id: str = "") -> FeatureImage:
    """
    Normalise chaque canal puis le remet en forme 32×32 (ordre ligne par ligne)

    Args:
        channels: Tableau 3×1024 produit par raw_channels
        start_index: Indice du premier échantillon de la fenêtre dans la trace
        trace_id: Identifiant de la trace d'origine

    Returns:
        FeatureImage: Image normalisée
    """
    channels = np.asarray(channels, dtype=np.float64)
    if channels.shape != (N_CHANNELS, WINDOW_LENGTH):
        raise DataError(f"Canaux 3×{WINDOW_LENGTH} attendus, reçu {channels.shape}")
    planes = np.stack([normalize(channel) for channel in channels])
    return FeatureImage(
        channels=planes.reshape(N_CHANNELS, IMAGE_SIDE, IMAGE_SIDE),
        start_index=start_index,
        trace_id=trace_id,
    )


def pid_transform(window: Window, start_index: int = 0, trace_id: str = "") -> FeatureImage:
    """Fenêtre → image PID 3×32×32"""
    return image_from_channels(raw_channels(window), start_index=start_index, trace_id=trace_id)


def window_starts(n_samples: int, hop: int) -> List[int]:
    """Indices de départ des fenêtres glissantes complètes"""
    if hop < 1:
        raise DataError(f"hop doit être ≥ 1, reçu {hop}")
    if n_samples < WINDOW_LENGTH:
        return []
    return list(range(0, n_samples - WINDOW_LENGTH + 1, hop))
