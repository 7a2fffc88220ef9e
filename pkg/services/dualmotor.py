"""
Simulation du système bimoteur synchronisé : modèle de pertes, partage du couple,
basculement sur défaut et comparaison énergétique simple / double
"""
import logging
import math
from dataclasses import dataclass, field
from enum import Enum
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.integrate import cumulative_trapezoid
from scipy.optimize import brentq

from services.artifact_writer import rows_to_csv
from services.errors import ConfigurationError, DomainError
from services.log_manager import EventJournal

logger = logging.getLogger(__name__)

MODES = ('single', 'dual')
LEDGER_HEADER = ('t', 'mode', 'motor', 'torque', 'speed', 'power', 'energy')

DEFAULT_IRON_COEFF = 0.004
DEFAULT_WINDAGE_COEFF = 2e-7
DEFAULT_FIXED_LOSS = 0.5
DEFAULT_TIME_STEP = 0.01
# fenêtre + deux pas de 256 à 1 kHz
DEFAULT_TRIP_LATENCY = (1024 + 2 * 256) * 1e-3
# courant de surcharge ≈ 3.5 × nominal
OVERLOAD_COPPER_FACTOR = 3.5 ** 2


@dataclass(frozen=True)
class EfficiencyModel:
    """Pertes : cuivre k_c·τ², fer k_i·ω, ventilation k_w·ω³, fixes k_f"""
    copper_coeff: float
    iron_coeff: float = DEFAULT_IRON_COEFF
    windage_coeff: float = DEFAULT_WINDAGE_COEFF
    fixed_loss: float = DEFAULT_FIXED_LOSS

    def __post_init__(self):
        for name in ('copper_coeff', 'iron_coeff', 'windage_coeff', 'fixed_loss'):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ConfigurationError(f"EfficiencyModel.{name} doit être fini et ≥ 0")
        if not (self.copper_coeff > 0 and self.fixed_loss > 0):
            raise ConfigurationError("k_c et k_f doivent être > 0 pour que le rendement ait un maximum")

    def speed_losses(self, speed: float) -> float:
        """Pertes indépendantes du couple : k_i·ω + k_w·ω³ + k_f"""
        return self.iron_coeff * speed + self.windage_coeff * speed ** 3 + self.fixed_loss

    def losses(self, torque: float, speed: float, copper_factor: float = 1.0) -> float:
        return copper_factor * self.copper_coeff * torque ** 2 + self.speed_losses(speed)


def _check_domain(torque: float, speed: float):
    if torque < 0 or speed < 0 or not (math.isfinite(torque) and math.isfinite(speed)):
        raise DomainError(f"Couple et vitesse doivent être finis et ≥ 0 (τ={torque}, ω={speed})")


def electrical_power(model: EfficiencyModel, torque: float, speed: float) -> float:
    """P = τω + pertes (W)"""
    _check_domain(torque, speed)
    return torque * speed + model.losses(torque, speed)


def efficiency(model: EfficiencyModel, torque: float, speed: float) -> float:
    """η = τω / P, nul sans puissance mécanique"""
    _check_domain(torque, speed)
    output = torque * speed
    if output == 0:
        return 0.0
    return output / (output + model.losses(torque, speed))


def optimal_torque(model: EfficiencyModel, speed: float) -> float:
    """Couple du rendement maximal à vitesse fixée"""
    _check_domain(0.0, speed)
    return math.sqrt(model.speed_losses(speed) / model.copper_coeff)


def break_even_torque(model: EfficiencyModel, speed: float) -> float:
    """
    Couple au-delà duquel deux moteurs à τ/2 consomment moins qu'un seul à τ
    (k_c·τ²/2 = pertes à vide)
    """
    _check_domain(0.0, speed)
    return math.sqrt(2.0 * model.speed_losses(speed) / model.copper_coeff)


class MotorState(Enum):
    HEALTHY = 'healthy'
    OVERLOADED = 'overloaded'
    SHUTDOWN = 'shutdown'


@dataclass
class MotorUnit:
    index: int
    state: MotorState = MotorState.HEALTHY
    torque: float = 0.0
    speed: float = 0.0
    energy_used: float = 0.0

    @property
    def running(self) -> bool:
        return self.state is not MotorState.SHUTDOWN

    def assign(self, torque: float, speed: float):
        if not self.running and torque > 0:
            raise DomainError(f"Moteur {self.index} arrêté : aucun couple ne peut lui être affecté")
        self.torque = torque
        self.speed = speed

    def overload(self):
        if self.state is MotorState.HEALTHY:
            self.state = MotorState.OVERLOADED

    def shutdown(self):
        self.state = MotorState.SHUTDOWN
        self.torque = 0.0


@dataclass(frozen=True)
class DutySegment:
    duration: float
    torque: float
    speed: float

    def __post_init__(self):
        if not self.duration > 0:
            raise ConfigurationError(f"Durée de segment non positive: {self.duration}")
        if self.torque < 0 or self.speed < 0:
            raise ConfigurationError("Couple et vitesse demandés doivent être ≥ 0")


@dataclass(frozen=True)
class DutyCycle:
    segments: Tuple[DutySegment, ...]

    def __post_init__(self):
        object.__setattr__(self, 'segments', tuple(self.segments))
        if not self.segments:
            raise ConfigurationError("Un cycle de service contient au moins un segment")

    @property
    def duration(self) -> float:
        return sum(segment.duration for segment in self.segments)


def reference_duty_cycle() -> DutyCycle:
    """Cycle de référence (durée s, couple N·m, vitesse rad/s) de la comparaison énergétique"""
    return DutyCycle((
        DutySegment(2.0, 1.5, 80.0),
        DutySegment(3.0, 2.5, 120.0),
        DutySegment(2.0, 3.0, 60.0),
        DutySegment(3.0, 1.0, 150.0),
        DutySegment(2.0, 2.0, 100.0),
    ))


@dataclass(frozen=True)
class FaultInjection:
    time: float
    motor: int = 0

    def __post_init__(self):
        if self.time < 0:
            raise ConfigurationError("L'instant d'injection doit être ≥ 0")


@dataclass(frozen=True)
class MotorEvent:
    time: float
    kind: str  # fault_injected, overloaded, shutdown, failover, peer_detected, mission_failure
    motor: Optional[int]
    message: str


@dataclass
class EnergyLedger:
    """Échantillons par moteur : couple, vitesse, puissance électrique et énergie cumulée"""
    mode: str
    times: np.ndarray
    demand: np.ndarray
    speed: np.ndarray
    torque: np.ndarray      # n × moteurs
    power: np.ndarray       # n × moteurs
    mechanical: np.ndarray  # n × moteurs
    loss: np.ndarray        # n × moteurs
    energy: np.ndarray      # n × moteurs, cumulée

    @property
    def n_motors(self) -> int:
        return self.torque.shape[1]

    def motor_energy(self, motor: int) -> float:
        return float(self.energy[-1, motor])

    def total_energy(self) -> float:
        return float(self.energy[-1].sum())

    def mechanical_work(self) -> float:
        return float(sum(cumulative_trapezoid(self.mechanical[:, i], self.times)[-1] for i in range(self.n_motors)))

    def loss_energy(self) -> float:
        return float(sum(cumulative_trapezoid(self.loss[:, i], self.times)[-1] for i in range(self.n_motors)))

    def delivered_torque(self) -> np.ndarray:
        return self.torque.sum(axis=1)

    def to_csv(self) -> str:
        rows = (
            (f"{self.times[j]:.6f}", self.mode, i, f"{self.torque[j, i]:.9g}", f"{self.speed[j]:.9g}",
             f"{self.power[j, i]:.9g}", f"{self.energy[j, i]:.9g}")
            for j in range(len(self.times))
            for i in range(self.n_motors)
        )
        return rows_to_csv(LEDGER_HEADER, rows)


@dataclass
class DutyResult:
    ledger: EnergyLedger
    motors: List[MotorUnit]
    events: List[MotorEvent] = field(default_factory=list)

    @property
    def mission_failed(self) -> bool:
        return any(event.kind == 'mission_failure' for event in self.events)

    def events_of(self, kind: str) -> List[MotorEvent]:
        return [event for event in self.events if event.kind == kind]


def _segment_times(start: float, duration: float, dt: float) -> np.ndarray:
    n_steps = max(1, int(math.ceil(duration / dt - 1e-9)))
    return start + np.linspace(0.0, duration, n_steps + 1)


def simulate_duty(model: EfficiencyModel, duty: DutyCycle, mode: str = 'dual',
                  faults: Sequence[FaultInjection] = (), dt: float = DEFAULT_TIME_STEP,
                  trip_latency: float = DEFAULT_TRIP_LATENCY,
                  journal: Optional[EventJournal] = None) -> DutyResult:
    """
    Simulation à pas fixe d'un cycle de service

    En mode double, le couple demandé est partagé à parts égales entre les moteurs
    en marche. Un moteur en défaut passe en surcharge à l'injection, puis à l'arrêt
    quand son détecteur déclenche (`trip_latency` plus tard) ; le survivant reprend
    alors tout le couple. Les énergies sont intégrées par la méthode des trapèzes.

    Args:
        model: Modèle de pertes
        duty: Cycle de service
        mode: 'single' ou 'dual'
        faults: Injections de défaut (instant, moteur)
        dt: Pas de simulation (s)
        trip_latency: Délai entre l'apparition de la surcharge et l'arrêt (inf = jamais)
        journal: Journal d'événements optionnel

    Returns:
        DutyResult: Registre énergétique, état final des moteurs, événements
    """
    if mode not in MODES:
        raise ConfigurationError(f"Mode inconnu: {mode} (attendu single ou dual)")
    if not dt > 0:
        raise ConfigurationError(f"dt doit être > 0, reçu {dt}")
    if not trip_latency >= 0:
        raise ConfigurationError(f"trip_latency doit être ≥ 0, reçu {trip_latency}")
    n_motors = 1 if mode == 'single' else 2
    for fault in faults:
        if not 0 <= fault.motor < n_motors:
            raise ConfigurationError(f"Moteur {fault.motor} inexistant en mode {mode}")

    motors = [MotorUnit(i) for i in range(n_motors)]
    events: List[MotorEvent] = []
    session_id = f"dualmotor-{mode}"

    def emit(t: float, kind: str, motor: Optional[int], message: str):
        events.append(MotorEvent(t, kind, motor, message))
        if journal is not None:
            journal.log_status(session_id, kind, message, {'t': t, 'motor': motor})

    schedule = []
    for fault in faults:
        schedule.append((fault.time, 0, fault.motor))
        if math.isfinite(trip_latency):
            schedule.append((fault.time + trip_latency, 1, fault.motor))
    schedule.sort()

    times, demand, speed, torque, mechanical, loss = [], [], [], [], [], []
    start = 0.0
    next_event = 0
    for segment in duty.segments:
        for t in _segment_times(start, segment.duration, dt):
            while next_event < len(schedule) and schedule[next_event][0] <= t + 1e-12:
                _, action, index = schedule[next_event]
                next_event += 1
                motor = motors[index]
                if action == 0 and motor.state is MotorState.HEALTHY:
                    emit(t, 'fault_injected', index, f"Défaut injecté sur le moteur {index}")
                    motor.overload()
                    emit(t, 'overloaded', index, f"Moteur {index} en surcharge")
                elif action == 1 and motor.running:
                    motor.shutdown()
                    emit(t, 'shutdown', index, f"Détecteur du moteur {index} déclenché, arrêt")
                    survivors = [m for m in motors if m.running]
                    if survivors:
                        for survivor in survivors:
                            emit(t, 'peer_detected', survivor.index,
                                 f"Le contrôleur du moteur {survivor.index} constate l'arrêt du moteur {index}")
                        emit(t, 'failover', survivors[0].index,
                             f"Le moteur {survivors[0].index} reprend la totalité du couple")
                    else:
                        emit(t, 'mission_failure', None, "Plus aucun moteur en marche")

            running = [m for m in motors if m.running]
            share = segment.torque / len(running) if running else 0.0
            row_torque, row_mech, row_loss = [], [], []
            for motor in motors:
                if motor.running:
                    motor.assign(share, segment.speed)
                    factor = OVERLOAD_COPPER_FACTOR if motor.state is MotorState.OVERLOADED else 1.0
                    row_mech.append(share * segment.speed)
                    row_loss.append(model.losses(share, segment.speed, factor))
                else:
                    row_mech.append(0.0)
                    row_loss.append(0.0)
                row_torque.append(motor.torque)
            times.append(t)
            demand.append(segment.torque)
            speed.append(segment.speed)
            torque.append(row_torque)
            mechanical.append(row_mech)
            loss.append(row_loss)
        start += segment.duration

    times = np.asarray(times)
    mechanical = np.asarray(mechanical)
    loss = np.asarray(loss)
    power = mechanical + loss
    # les instants dupliqués aux frontières de segments ont une largeur nulle
    energy = np.stack([cumulative_trapezoid(power[:, i], times, initial=0.0) for i in range(n_motors)], axis=1)
    for motor in motors:
        motor.energy_used = float(energy[-1, motor.index])

    ledger = EnergyLedger(
        mode=mode, times=times, demand=np.asarray(demand), speed=np.asarray(speed),
        torque=np.asarray(torque), power=power, mechanical=mechanical, loss=loss, energy=energy,
    )
    logger.info(f"Cycle simulé en mode {mode}: {ledger.total_energy():.3f} J, {len(events)} événements")
    return DutyResult(ledger=ledger, motors=motors, events=events)


@dataclass(frozen=True)
class ModeComparison:
    single_energy: float
    dual_energy: float

    @property
    def saving(self) -> float:
        """Économie relative du mode double"""
        return (self.single_energy - self.dual_energy) / self.single_energy


def compare_modes(model: EfficiencyModel, duty: DutyCycle, dt: float = DEFAULT_TIME_STEP) -> ModeComparison:
    single = simulate_duty(model, duty, 'single', dt=dt).ledger.total_energy()
    dual = simulate_duty(model, duty, 'dual', dt=dt).ledger.total_energy()
    return ModeComparison(single, dual)


def calibrate_model(duty: Optional[DutyCycle] = None, target_saving: float = 0.03,
                    iron_coeff: float = DEFAULT_IRON_COEFF, windage_coeff: float = DEFAULT_WINDAGE_COEFF,
                    fixed_loss: float = DEFAULT_FIXED_LOSS, dt: float = DEFAULT_TIME_STEP) -> EfficiencyModel:
    """
    Ajuste k_c pour que le mode double économise `target_saving` de l'énergie
    du mode simple sur le cycle donné

    Estimation analytique (segments à puissance constante) puis affinage par
    recherche de racine sur la simulation.

    Returns:
        EfficiencyModel: Modèle calibré
    """
    duty = duty or reference_duty_cycle()
    if not 0.0 < target_saving < 0.5:
        raise ConfigurationError(f"Économie cible hors de ]0, 0.5[: {target_saving}")

    def model_for(k_c: float) -> EfficiencyModel:
        return EfficiencyModel(k_c, iron_coeff, windage_coeff, fixed_loss)

    unit_model = model_for(1.0)
    work = sum(s.duration * s.torque * s.speed for s in duty.segments)
    squares = sum(s.duration * s.torque ** 2 for s in duty.segments)
    idle = sum(s.duration * unit_model.speed_losses(s.speed) for s in duty.segments)
    if squares == 0:
        raise ConfigurationError("Le cycle ne demande aucun couple : rien à calibrer")
    guess = (target_saving * work + (1 + target_saving) * idle) / (squares * (0.5 - target_saving))

    def gap(k_c: float) -> float:
        return compare_modes(model_for(k_c), duty, dt).saving - target_saving

    low, high = guess / 4.0, guess * 4.0
    if gap(low) * gap(high) > 0:
        raise ConfigurationError(f"Économie {target_saving:.3f} inatteignable autour de k_c={guess:.4g}")
    k_c = brentq(gap, low, high, xtol=1e-12)
    logger.info(f"Calibration: k_c={k_c:.6g} (estimation analytique {guess:.6g})")
    return model_for(k_c)
