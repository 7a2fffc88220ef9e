"""
Service de simulation du courant de sortie d'un servomoteur DC
Génération de traces saines ou avec surcharge, lecture/écriture des traces CSV
"""
import io
import logging
import math
from dataclasses import dataclass, replace
from typing import IO, Iterator, List, Optional, Tuple, Union

import numpy as np
from scipy.integrate import trapezoid

from services.errors import ConfigurationError, DomainError, TraceParseError

logger = logging.getLogger(__name__)

WINDOW_LENGTH = 1024
DEFAULT_SAMPLE_INTERVAL = 1e-3  # 1 kHz
TRACE_HEADER = "time_s,current_a"
SPACING_TOLERANCE = 1e-9


def sense_current(voltage: float, resistance: float) -> float:
    """
    Courant de sortie à partir de la tension lue aux bornes de la résistance (I = V/R)

    Args:
        voltage: Tension mesurée (V)
        resistance: Résistance de mesure (Ω)

    Returns:
        float: Courant en ampères
    """
    if not resistance > 0:
        raise DomainError(f"Résistance non positive: {resistance}")
    if voltage < 0:
        raise DomainError(f"Tension négative: {voltage}")
    return voltage / resistance


@dataclass(frozen=True)
class MotorProfile:
    """Forme du courant en fonctionnement sain : pic de démarrage puis plateau bruité"""
    nominal_current: float = 1.0
    startup_peak: float = 2.5
    startup_duration: float = 0.3
    noise_amplitude: float = 0.08
    sample_interval: float = DEFAULT_SAMPLE_INTERVAL

    def __post_init__(self):
        for name in ('nominal_current', 'startup_peak', 'startup_duration', 'sample_interval'):
            if not getattr(self, name) > 0:
                raise ConfigurationError(f"MotorProfile.{name} doit être > 0")
        if self.noise_amplitude < 0:
            raise ConfigurationError("MotorProfile.noise_amplitude doit être ≥ 0")
        if self.startup_peak < self.nominal_current:
            raise ConfigurationError("Le pic de démarrage doit être ≥ au courant nominal")
        if self.noise_amplitude >= self.nominal_current:
            raise ConfigurationError("Le bruit doit rester inférieur au courant nominal")

    def scaled(self, factor: float) -> 'MotorProfile':
        """Même profil à une autre échelle (vitesse différente, même allure)"""
        if not factor > 0:
            raise ConfigurationError(f"Facteur d'échelle non positif: {factor}")
        return replace(
            self,
            nominal_current=self.nominal_current * factor,
            startup_peak=self.startup_peak * factor,
            noise_amplitude=self.noise_amplitude * factor,
        )


@dataclass(frozen=True)
class FaultSpec:
    """Surcharge : montée brutale puis fluctuation sur une plage jusqu'à l'arrêt"""
    onset_time: float
    rise_time: float = 0.1
    plateau_mean: float = 3.5
    plateau_band: float = 0.4
    shutdown_time: Optional[float] = None
    fluctuation_hold: int = 16  # échantillons par palier de fluctuation

    def __post_init__(self):
        if self.onset_time < 0:
            raise ConfigurationError("FaultSpec.onset_time doit être ≥ 0")
        if not self.rise_time > 0:
            raise ConfigurationError("FaultSpec.rise_time doit être > 0")
        if self.plateau_band < 0:
            raise ConfigurationError("FaultSpec.plateau_band doit être ≥ 0")
        if self.fluctuation_hold < 1:
            raise ConfigurationError("FaultSpec.fluctuation_hold doit être ≥ 1")
        if self.shutdown_time is not None and self.shutdown_time <= self.onset_time:
            raise ConfigurationError("L'arrêt doit suivre l'apparition du défaut")

    def check_against(self, profile: MotorProfile):
        """Vérifie que la surcharge reste séparable du régime nominal"""
        if not self.plateau_mean > 2 * profile.nominal_current:
            raise ConfigurationError(
                f"plateau_mean ({self.plateau_mean}) doit dépasser 2 × courant nominal "
                f"({2 * profile.nominal_current})"
            )


@dataclass(frozen=True, eq=False)
class SignalTrace:
    """Trace de courant échantillonnée à pas constant"""
    times: np.ndarray
    currents: np.ndarray
    sample_interval: float
    fault_onset: Optional[float] = None
    rng_seed: int = 0
    shutdown_time: Optional[float] = None
    trace_id: str = ""

    def __post_init__(self):
        times = np.asarray(self.times, dtype=np.float64)
        currents = np.asarray(self.currents, dtype=np.float64)
        object.__setattr__(self, 'times', times)
        object.__setattr__(self, 'currents', currents)
        if times.shape != currents.shape or times.ndim != 1:
            raise ConfigurationError("times et currents doivent être des vecteurs de même taille")
        if not self.sample_interval > 0:
            raise ConfigurationError("sample_interval doit être > 0")
        if np.any(currents < 0) or not np.all(np.isfinite(currents)):
            raise ConfigurationError("Les courants doivent être finis et ≥ 0")
        if len(times) > 1 and np.any(np.diff(times) <= 0):
            raise ConfigurationError("Les instants doivent être strictement croissants")
        if self.fault_onset is not None and len(times) > 0:
            if not times[0] <= self.fault_onset <= times[-1]:
                raise ConfigurationError(f"fault_onset {self.fault_onset} hors de la trace")

    def __len__(self) -> int:
        return len(self.currents)

    @property
    def samples(self) -> Iterator[Tuple[float, float]]:
        return zip(self.times.tolist(), self.currents.tolist())

    @property
    def duration(self) -> float:
        return len(self) * self.sample_interval

    def fault_mask(self) -> np.ndarray:
        """Échantillons situés dans la surcharge (après l'apparition, avant l'arrêt)"""
        if self.fault_onset is None:
            return np.zeros(len(self), dtype=bool)
        mask = self.times >= self.fault_onset
        if self.shutdown_time is not None:
            mask &= self.times < self.shutdown_time
        return mask

    def equals(self, other: 'SignalTrace', rtol: float = 1e-9) -> bool:
        """Égalité à tolérance relative près (aller-retour CSV)"""
        if len(self) != len(other):
            return False
        if self.fault_onset is None or other.fault_onset is None:
            if self.fault_onset != other.fault_onset:
                return False
        elif not math.isclose(self.fault_onset, other.fault_onset, rel_tol=rtol, abs_tol=1e-12):
            return False
        return (
            math.isclose(self.sample_interval, other.sample_interval, rel_tol=rtol)
            and np.allclose(self.times, other.times, rtol=rtol, atol=1e-12)
            and np.allclose(self.currents, other.currents, rtol=rtol, atol=1e-12)
        )


@dataclass(frozen=True)
class TraceFeatures:
    """Caractéristiques qu'un opérateur vérifierait à la main sur une trace"""
    peak_current: float
    fluctuation_range: float
    fluctuation_std: float
    max_rise_slope: float
    dissipated_charge: float
    overload_duration: float


def _healthy_baseline(profile: MotorProfile, times: np.ndarray) -> np.ndarray:
    """Pic de démarrage décroissant jusqu'au plateau nominal (exact après le démarrage)"""
    baseline = np.full_like(times, profile.nominal_current)
    in_startup = times < profile.startup_duration
    remaining = 1.0 - times[in_startup] / profile.startup_duration
    baseline[in_startup] += (profile.startup_peak - profile.nominal_current) * remaining ** 2
    return baseline


def simulate_trace(profile: MotorProfile, duration: float, fault: Optional[FaultSpec] = None,
                   seed: int = 0, trace_id: str = "") -> SignalTrace:
    """
    Génère une trace synthétique reproductible

    Args:
        profile: Profil du moteur sain
        duration: Durée de la trace en secondes
        fault: Surcharge à injecter (optionnelle)
        seed: Graine du générateur

    Returns:
        SignalTrace: Trace générée
    """
    dt = profile.sample_interval
    n = int(round(duration / dt))
    if n < WINDOW_LENGTH:
        raise ConfigurationError(
            f"Durée trop courte: {duration}s < {WINDOW_LENGTH} × {dt}s (une fenêtre complète)"
        )

    rng = np.random.default_rng(seed)
    times = np.arange(n, dtype=np.float64) * dt
    noise = rng.uniform(-profile.noise_amplitude, profile.noise_amplitude, size=n)
    currents = _healthy_baseline(profile, times) + noise

    fault_onset = None
    shutdown_time = None
    if fault is not None:
        fault.check_against(profile)
        if fault.onset_time > times[-1]:
            raise ConfigurationError(f"Apparition du défaut ({fault.onset_time}s) après la fin de la trace")
        fault_onset = fault.onset_time
        shutdown_time = fault.shutdown_time

        start = int(np.searchsorted(times, fault.onset_time, side='left'))
        healthy_max = float(currents[:start].max()) if start > 0 else 0.0
        floor = fault.plateau_mean - fault.plateau_band
        if not healthy_max < floor:
            raise ConfigurationError(
                f"Surcharge non séparable: max sain {healthy_max:.4f} ≥ plancher du plateau {floor:.4f}"
            )

        onset_level = float(_healthy_baseline(profile, np.array([fault.onset_time]))[0])
        elapsed = times[start:] - fault.onset_time
        ramp = onset_level + (fault.plateau_mean - onset_level) * np.clip(elapsed / fault.rise_time, 0.0, 1.0)

        # fluctuation lente : un tirage uniforme maintenu sur fluctuation_hold échantillons
        n_steps = -(-(n - start) // fault.fluctuation_hold)
        steps = rng.uniform(-fault.plateau_band, fault.plateau_band, size=n_steps)
        fluctuation = np.repeat(steps, fault.fluctuation_hold)[:n - start]

        in_rise = elapsed < fault.rise_time
        faulty = np.where(in_rise, ramp + noise[start:], fault.plateau_mean + fluctuation)
        currents[start:] = faulty
        if fault.shutdown_time is not None:
            currents[times >= fault.shutdown_time] = 0.0

    currents = np.clip(currents, 0.0, None)
    logger.debug(f"Trace simulée: {n} échantillons, défaut={fault_onset}, graine={seed}")
    return SignalTrace(
        times=times,
        currents=currents,
        sample_interval=dt,
        fault_onset=fault_onset,
        rng_seed=seed,
        shutdown_time=shutdown_time,
        trace_id=trace_id,
    )


def simulate_campaign(profile: MotorProfile, runs: int, duration: float = 10.0,
                      fault_ratio: float = 0.5, seed: int = 0) -> List[SignalTrace]:
    """
    Génère un lot de traces saines et défaillantes à différentes échelles

    Args:
        profile: Profil de référence
        runs: Nombre de traces
        duration: Durée de chaque trace
        fault_ratio: Proportion de traces avec surcharge
        seed: Graine maîtresse

    Returns:
        list: Traces générées
    """
    if runs < 1:
        raise ConfigurationError("runs doit être ≥ 1")
    if not 0.0 <= fault_ratio <= 1.0:
        raise ConfigurationError("fault_ratio doit être dans [0, 1]")

    rng = np.random.default_rng(seed)
    n_faulty = int(round(runs * fault_ratio))
    faulty_flags = np.zeros(runs, dtype=bool)
    faulty_flags[:n_faulty] = True
    rng.shuffle(faulty_flags)

    traces = []
    for i in range(runs):
        scale = float(rng.uniform(0.6, 1.6))
        run_profile = profile.scaled(scale)
        run_seed = int(rng.integers(0, 2 ** 63 - 1))
        fault = None
        if faulty_flags[i]:
            nominal = run_profile.nominal_current
            fault = FaultSpec(
                onset_time=float(rng.uniform(0.25, 0.65) * duration),
                rise_time=float(rng.uniform(0.02, 0.2)),
                plateau_mean=float(rng.uniform(3.3, 4.2) * nominal),
                plateau_band=float(rng.uniform(0.2, 0.5) * nominal),
                fluctuation_hold=int(rng.integers(8, 33)),
            )
        traces.append(simulate_trace(run_profile, duration, fault, seed=run_seed, trace_id=f"run{i:04d}"))

    logger.info(f"Campagne simulée: {runs} traces dont {n_faulty} avec surcharge")
    return traces


def describe_trace(trace: SignalTrace) -> TraceFeatures:
    """Extrait les caractéristiques de fluctuation, de pente et de charge d'une trace"""
    currents = trace.currents
    mask = trace.fault_mask()
    segment = currents[mask] if mask.any() else currents
    slopes = np.gradient(currents, trace.sample_interval) if len(currents) > 1 else np.zeros(1)
    return TraceFeatures(
        peak_current=float(currents.max()),
        fluctuation_range=float(segment.max() - segment.min()),
        fluctuation_std=float(segment.std()),
        max_rise_slope=float(slopes.max()),
        dissipated_charge=float(trapezoid(currents, dx=trace.sample_interval)),
        overload_duration=float(mask.sum() * trace.sample_interval),
    )


def write_trace(trace: SignalTrace) -> bytes:
    """
    Sérialise une trace au format CSV

    Returns:
        bytes: Contenu du fichier
    """
    out = io.StringIO()
    if trace.fault_onset is not None:
        out.write(f"# fault_onset_s={trace.fault_onset:.12g}\n")
    if trace.shutdown_time is not None:
        out.write(f"# shutdown_s={trace.shutdown_time:.12g}\n")
    out.write(f"# rng_seed={trace.rng_seed}\n")
    out.write(TRACE_HEADER + "\n")
    for t, c in zip(trace.times.tolist(), trace.currents.tolist()):
        out.write(f"{t:.12g},{c:.12g}\n")
    return out.getvalue().encode('ascii')


def _parse_comment(line: str, line_number: int, meta: dict):
    body = line[1:].strip()
    if '=' not in body:
        return
    key, value = (part.strip() for part in body.split('=', 1))
    try:
        if key == 'fault_onset_s':
            meta['fault_onset'] = float(value)
        elif key == 'shutdown_s':
            meta['shutdown_time'] = float(value)
        elif key == 'rng_seed':
            meta['rng_seed'] = int(value)
    except ValueError:
        raise TraceParseError(line_number, f"commentaire invalide: {line!r}")


def read_trace(source: Union[bytes, IO[bytes]], trace_id: str = "") -> SignalTrace:
    """
    Lit une trace CSV (`time_s,current_a`, commentaires `# clé=valeur`)

    Args:
        source: Contenu ou flux binaire du fichier

    Returns:
        SignalTrace: Trace validée
    """
    data = source if isinstance(source, (bytes, bytearray)) else source.read()
    try:
        text = bytes(data).decode('ascii')
    except UnicodeDecodeError:
        raise TraceParseError(1, "le fichier n'est pas en ASCII")

    meta = {}
    times: List[float] = []
    currents: List[float] = []
    for line_number, raw_line in enumerate(text.split('\n'), start=1):
        line = raw_line.strip()
        if not line:
            continue
        if line.startswith('#'):
            _parse_comment(line, line_number, meta)
            continue
        if line.replace(' ', '') == TRACE_HEADER:
            continue
        parts = line.split(',')
        if len(parts) != 2:
            raise TraceParseError(line_number, f"deux colonnes attendues: {line!r}")
        try:
            t, c = float(parts[0]), float(parts[1])
        except ValueError:
            raise TraceParseError(line_number, f"valeur numérique invalide: {line!r}")
        if not (math.isfinite(t) and math.isfinite(c)):
            raise TraceParseError(line_number, "valeur non finie")
        if c < 0:
            raise TraceParseError(line_number, f"courant négatif: {c}")
        if times and t <= times[-1]:
            raise TraceParseError(line_number, f"instant non croissant: {t} après {times[-1]}")
        times.append(t)
        currents.append(c)

    if len(times) < 2:
        raise TraceParseError(max(1, len(text.split('\n'))), "au moins deux échantillons sont requis")

    t = np.asarray(times)
    # pas arrondi à 12 chiffres significatifs, comme à l'écriture
    dt = float(f"{(t[-1] - t[0]) / (len(t) - 1):.12g}")
    expected = t[0] + np.arange(len(t)) * dt
    deviation = np.abs(t - expected)
    bound = SPACING_TOLERANCE * np.maximum(np.abs(t), dt)
    bad = np.nonzero(deviation > bound)[0]
    if len(bad):
        raise TraceParseError(_data_line_number(text, int(bad[0])), f"pas d'échantillonnage irrégulier à t={t[bad[0]]}")

    fault_onset = meta.get('fault_onset')
    if fault_onset is not None and not t[0] <= fault_onset <= t[-1]:
        raise TraceParseError(1, f"fault_onset {fault_onset} hors de la trace")

    return SignalTrace(
        times=t,
        currents=np.asarray(currents),
        sample_interval=dt,
        fault_onset=fault_onset,
        rng_seed=meta.get('rng_seed', 0),
        shutdown_time=meta.get('shutdown_time'),
        trace_id=trace_id,
    )


def _data_line_number(text: str, index: int) -> int:
    """Numéro de ligne (base 1) du index-ième échantillon"""
    seen = -1
    for line_number, raw_line in enumerate(text.split('\n'), start=1):
        line = raw_line.strip()
        if not line or line.startswith('#') or line.replace(' ', '') == TRACE_HEADER:
            continue
        seen += 1
        if seen == index:
            return line_number
    return line_number
