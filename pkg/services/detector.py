"""
Service de détection de surcharge en temps réel : tampon circulaire, fenêtres
glissantes, inférence, anti-rebond k-sur-m et verrou d'arrêt
"""
import logging
from collections import deque
from dataclasses import dataclass
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from services.artifact_writer import rows_to_csv
from services.errors import ConfigurationError, DataError, ServoGuardError
from services.log_manager import EventJournal
from services.signal_sim import DEFAULT_SAMPLE_INTERVAL, SignalTrace
from services.tensornet import Network, forward
from services.transform import WINDOW_LENGTH, Window, image_from_channels, raw_channels, window_starts

logger = logging.getLogger(__name__)

VERDICT_HEADER = ('seq', 'probability', 'is_fault', 'tripped')


@dataclass(frozen=True)
class DetectorConfig:
    hop: int = 256
    debounce: Tuple[int, int] = (2, 3)
    score_threshold: float = 0.5

    def __post_init__(self):
        if self.hop < 1:
            raise ConfigurationError(f"hop doit être ≥ 1, reçu {self.hop}")
        k, m = self.debounce
        if not 1 <= k <= m:
            raise ConfigurationError(f"Anti-rebond invalide ({k},{m}) : il faut 1 ≤ k ≤ m")
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigurationError(f"Le seuil doit être dans ]0, 1[, reçu {self.score_threshold}")


def parse_debounce(text: str) -> Tuple[int, int]:
    """Lit « k,m » (ex. "2,3")"""
    try:
        k, m = (int(part) for part in text.split(','))
    except ValueError:
        raise ConfigurationError(f"Anti-rebond attendu sous la forme k,m, reçu {text!r}")
    return k, m


@dataclass(frozen=True)
class Verdict:
    window_seq: int
    fault_probability: float
    is_fault: bool
    tripped: bool

    def to_row(self):
        return (self.window_seq, f"{self.fault_probability:.9g}", int(self.is_fault), int(self.tripped))


def verdicts_to_csv(verdicts: Iterable[Verdict]) -> str:
    return rows_to_csv(VERDICT_HEADER, (v.to_row() for v in verdicts))


class DetectorState:
    """
    État d'un détecteur : les 1024 derniers échantillons, le nombre
    d'échantillons vus, les m derniers verdicts et le verrou d'arrêt
    """

    def __init__(self, memory: int = 3):
        self.buffer = np.zeros(WINDOW_LENGTH)
        self.count = 0
        self.recent = deque(maxlen=memory)
        self.latched = False

    def push(self, sample: float):
        self.buffer[self.count % WINDOW_LENGTH] = sample
        self.count += 1

    def window_ready(self, hop: int) -> bool:
        return self.count >= WINDOW_LENGTH and (self.count - WINDOW_LENGTH) % hop == 0

    def window_seq(self, hop: int) -> int:
        return (self.count - WINDOW_LENGTH) // hop

    def window_values(self) -> np.ndarray:
        """Les 1024 derniers échantillons, du plus ancien au plus récent"""
        pos = self.count % WINDOW_LENGTH
        return np.concatenate([self.buffer[pos:], self.buffer[:pos]])

    def record(self, is_fault: bool, required: int) -> bool:
        """Ajoute un verdict ; le verrou se ferme dès que `required` des m derniers sont en défaut"""
        self.recent.append(bool(is_fault))
        if sum(self.recent) >= required:
            self.latched = True
        return self.latched

    def trip(self):
        self.latched = True

    def reset(self):
        self.recent.clear()
        self.latched = False


def classify_channels(net: Network, channels: np.ndarray, threshold: float) -> Tuple[float, bool]:
    """
    Classe une fenêtre déjà décomposée en canaux bruts (3×1024)

    Returns:
        tuple: (probabilité de défaut, défaut oui/non)
    """
    _, probs = forward(net, image_from_channels(channels))
    probability = float(probs[1])
    return probability, probability >= threshold


def classify_window(net: Network, window: Window, threshold: float) -> Tuple[float, bool]:
    return classify_channels(net, raw_channels(window), threshold)


class OverloadDetector:
    """Détecteur en flux, un échantillon à la fois (propriétaire unique, non réentrant)"""

    def __init__(self, net: Network, config: Optional[DetectorConfig] = None,
                 sample_interval: float = DEFAULT_SAMPLE_INTERVAL,
                 on_trip: Optional[Callable[[Optional[Verdict]], None]] = None,
                 journal: Optional[EventJournal] = None, detector_id: str = "detector"):
        """
        Args:
            net: Réseau chargé
            config: Pas, anti-rebond et seuil
            sample_interval: Période d'échantillonnage des courants poussés
            on_trip: Appelé une fois à la fermeture du verrou (None si repli de sécurité)
            journal: Journal d'événements optionnel
            detector_id: Identifiant dans le journal
        """
        if not sample_interval > 0:
            raise ConfigurationError(f"sample_interval doit être > 0, reçu {sample_interval}")
        self.net = net
        self.config = config or DetectorConfig()
        self.sample_interval = sample_interval
        self.on_trip = on_trip
        self.journal = journal
        self.detector_id = detector_id
        self.state = DetectorState(memory=self.config.debounce[1])

    @property
    def tripped(self) -> bool:
        return self.state.latched

    def _signal_trip(self, verdict: Optional[Verdict], stage: str, message: str):
        if self.journal is not None:
            data = {'seq': verdict.window_seq, 'probability': verdict.fault_probability} if verdict else None
            self.journal.log_status(self.detector_id, stage, message, data)
        if self.on_trip is not None:
            self.on_trip(verdict)

    def push_sample(self, sample: float) -> Optional[Verdict]:
        """
        Ajoute un échantillon ; rend un verdict à chaque pas de `hop` une fois la
        première fenêtre complète

        Returns:
            Verdict ou None
        """
        state = self.state
        state.push(sample)
        hop = self.config.hop
        if not state.window_ready(hop):
            return None

        seq = state.window_seq(hop)
        try:
            window = Window(state.window_values(), self.sample_interval)
            probability, is_fault = classify_window(self.net, window, self.config.score_threshold)
        except (ServoGuardError, ValueError) as e:
            was_latched = state.latched
            state.trip()
            logger.error(f"Erreur d'inférence sur la fenêtre {seq}, arrêt de sécurité: {e}", exc_info=True)
            if not was_latched:
                self._signal_trip(None, 'failsafe', f"Fenêtre {seq}: {e}")
            raise

        was_latched = state.latched
        tripped = state.record(is_fault, self.config.debounce[0])
        verdict = Verdict(seq, probability, is_fault, tripped)
        logger.debug(f"Fenêtre {seq}: p={probability:.4f} défaut={is_fault} verrou={tripped}")
        if tripped and not was_latched:
            self._signal_trip(verdict, 'trip', f"Surcharge confirmée à la fenêtre {seq}")
        return verdict

    def feed(self, samples: Iterable[float]) -> List[Verdict]:
        verdicts = []
        for sample in samples:
            verdict = self.push_sample(float(sample))
            if verdict is not None:
                verdicts.append(verdict)
        return verdicts

    def reset(self):
        """Réarme le verrou sans vider le tampon"""
        self.state.reset()
        if self.journal is not None:
            self.journal.log_status(self.detector_id, 'reset', "Verrou réarmé")


def batch_verdicts(net: Network, values: Sequence[float], config: Optional[DetectorConfig] = None,
                   sample_interval: float = DEFAULT_SAMPLE_INTERVAL) -> List[Verdict]:
    """
    Verdicts obtenus en découpant toute la trace d'un coup (référence du flux)

    Returns:
        list: Un verdict par fenêtre complète
    """
    config = config or DetectorConfig()
    values = np.asarray(values, dtype=np.float64)
    state = DetectorState(memory=config.debounce[1])
    verdicts = []
    for seq, start in enumerate(window_starts(len(values), config.hop)):
        window = Window(values[start:start + WINDOW_LENGTH], sample_interval)
        probability, is_fault = classify_window(net, window, config.score_threshold)
        verdicts.append(Verdict(seq, probability, is_fault, state.record(is_fault, config.debounce[0])))
    return verdicts


def trip_sample_index(verdict: Verdict, hop: int) -> int:
    """Nombre d'échantillons vus au moment du verdict"""
    return WINDOW_LENGTH + verdict.window_seq * hop


def detection_latency(trace: SignalTrace, detector: OverloadDetector) -> float:
    """
    Temps entre l'apparition du défaut et le premier verdict déclenché

    Le détecteur est réarmé puis rejoue toute la trace. Pour une trace saine,
    un déclenchement est mesuré depuis le début de la trace.

    Returns:
        float: Secondes, ou inf si le verrou ne se ferme jamais
    """
    if not np.isclose(detector.sample_interval, trace.sample_interval, rtol=1e-9, atol=0.0):
        raise DataError(
            f"Période du détecteur ({detector.sample_interval}) différente de celle de la trace ({trace.sample_interval})"
        )
    detector.state = DetectorState(memory=detector.config.debounce[1])
    first = None
    for sample in trace.currents:
        verdict = detector.push_sample(float(sample))
        if verdict is not None and verdict.tripped:
            first = verdict
            break
    if first is None:
        return float('inf')

    tripped_at = trace.times[trip_sample_index(first, detector.config.hop) - 1]
    if trace.fault_onset is None:
        logger.warning(f"Déclenchement intempestif sur la trace saine {trace.trace_id or '?'}")
        return float(tripped_at - trace.times[0])
    return float(tripped_at - trace.fault_onset)
