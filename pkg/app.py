"""
Point d'entrée ServoGuard
Détection de surcharge des servomoteurs par classification d'images PID du courant
"""
import argparse
import logging
import math
import os
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Tuple

from dotenv import load_dotenv

from services.artifact_writer import atomic_write_bytes, atomic_write_text, image_to_csv, image_to_pgm, rows_to_csv
from services.dataset import DEFAULT_HOP, build_from_traces, read_dataset, split, write_dataset
from services.detector import (
    DetectorConfig,
    OverloadDetector,
    detection_latency,
    parse_debounce,
    verdicts_to_csv,
)
from services.dualmotor import (
    DEFAULT_TRIP_LATENCY,
    EfficiencyModel,
    FaultInjection,
    calibrate_model,
    compare_modes,
    reference_duty_cycle,
    simulate_duty,
)
from services.errors import ConfigurationError, DataError, DomainError, ServoGuardError
from services.log_manager import EventJournal
from services.signal_sim import (
    DEFAULT_SAMPLE_INTERVAL,
    FaultSpec,
    MotorProfile,
    SignalTrace,
    read_trace,
    simulate_campaign,
    simulate_trace,
    write_trace,
)
from services.tensornet import build_toy_resnet, load_weights, save_weights
from services.trainer import TrainConfig, evaluate, train
from services.transform import WINDOW_LENGTH, Window, pid_transform
from services.wire import client_session, connect, serve

logger = logging.getLogger('servoguard')

LOG_LEVELS = {'error': logging.ERROR, 'info': logging.INFO, 'debug': logging.DEBUG}

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_TRIPPED = 10


def load_environment():
    """Charge .env.local en priorité pour le développement local, puis .env"""
    if Path('.env.local').exists():
        load_dotenv('.env.local')
    else:
        load_dotenv()


def configure_logging():
    """Journalisation sur le flux d'erreur ; la sortie standard reste aux CSV"""
    name = os.getenv('SERVOGUARD_LOG', 'info').strip().lower()
    level = LOG_LEVELS.get(name)
    logging.basicConfig(
        level=level if level is not None else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        stream=sys.stderr,
        force=True,
    )
    if level is None:
        logger.warning(f"SERVOGUARD_LOG={name!r} inconnu, niveau info utilisé")


@dataclass(frozen=True)
class Settings:
    hop: int = DEFAULT_HOP
    debounce: Tuple[int, int] = (2, 3)
    threshold: float = 0.5
    timeout_ms: int = 500


def load_settings() -> Settings:
    """Valeurs par défaut lues dans l'environnement (les options CLI priment)"""
    try:
        return Settings(
            hop=int(os.getenv('SERVOGUARD_HOP', DEFAULT_HOP)),
            debounce=parse_debounce(os.getenv('SERVOGUARD_DEBOUNCE', '2,3')),
            threshold=float(os.getenv('SERVOGUARD_THRESHOLD', '0.5')),
            timeout_ms=int(os.getenv('SERVOGUARD_TIMEOUT_MS', '500')),
        )
    except ValueError as e:
        raise ConfigurationError(f"Variable d'environnement invalide: {e}")


class UsageParser(argparse.ArgumentParser):
    """Les erreurs d'usage deviennent des exceptions (diagnostic sur une ligne)"""

    def error(self, message):
        raise ConfigurationError(message)


def seed_value(text: str) -> int:
    value = int(text)
    if not 0 <= value < 2 ** 64:
        raise argparse.ArgumentTypeError(f"graine hors de l'intervalle u64: {text}")
    return value


def read_input(path: str) -> bytes:
    """Lit un fichier, ou l'entrée standard pour '-'"""
    if path == '-':
        return sys.stdin.buffer.read()
    return Path(path).read_bytes()


def load_trace(path: str) -> SignalTrace:
    trace_id = 'stdin' if path == '-' else Path(path).stem
    return read_trace(read_input(path), trace_id=trace_id)


def emit_text(text: str, out: Optional[str] = None):
    if out and out != '-':
        atomic_write_text(out, text)
    else:
        sys.stdout.write(text)
        sys.stdout.flush()


def emit_bytes(data: bytes, out: Optional[str] = None):
    if out and out != '-':
        atomic_write_bytes(out, data)
    else:
        sys.stdout.buffer.write(data)
        sys.stdout.buffer.flush()


def detector_config(args, settings: Settings) -> DetectorConfig:
    return DetectorConfig(
        hop=args.hop if args.hop is not None else settings.hop,
        debounce=parse_debounce(args.debounce) if args.debounce else settings.debounce,
        score_threshold=args.threshold if args.threshold is not None else settings.threshold,
    )


def cmd_simulate(args, settings: Settings) -> int:
    profile = MotorProfile(sample_interval=args.sample_interval)
    fault = None
    if args.fault:
        onset = args.onset if args.onset is not None else 0.4 * args.duration
        fault = FaultSpec(onset_time=onset, shutdown_time=args.shutdown)
    trace = simulate_trace(profile, args.duration, fault, seed=args.seed, trace_id=f"sim{args.seed}")
    emit_bytes(write_trace(trace), args.out)
    return EXIT_OK


def cmd_build_dataset(args, settings: Settings) -> int:
    traces = [load_trace(path) for path in args.trace]
    if args.simulate_runs:
        traces.extend(simulate_campaign(MotorProfile(), args.simulate_runs, duration=args.duration, seed=args.seed))
    if not traces:
        raise ConfigurationError("Aucune trace : utiliser --trace ou --simulate-runs")
    hop = args.hop if args.hop is not None else settings.hop
    images = build_from_traces(traces, hop)
    if not images:
        raise DataError("Aucune fenêtre complète dans les traces fournies")
    write_dataset(args.out, images)
    n_fault = sum(item.label for item in images)
    emit_text(rows_to_csv(('images', 'fault', 'healthy'), [(len(images), n_fault, len(images) - n_fault)]))
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    images = read_dataset(args.dataset)
    cfg = TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.learning_rate,
        seed=args.seed,
        patience=args.patience,
    )
    net, report = train(build_toy_resnet(args.seed), split(images, args.seed), cfg)
    atomic_write_bytes(args.out, save_weights(net))
    emit_text(report.to_csv(), args.report)
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    net = load_weights(read_input(args.weights))
    accuracy, ((tn, fp), (fn, tp)) = evaluate(net, read_dataset(args.dataset))
    emit_text(rows_to_csv(('accuracy', 'tn', 'fp', 'fn', 'tp'), [(f"{accuracy:.6f}", tn, fp, fn, tp)]))
    return EXIT_OK


def cmd_detect(args, settings: Settings) -> int:
    net = load_weights(read_input(args.weights))
    trace = load_trace(args.trace)
    journal = EventJournal(args.events)
    detector = OverloadDetector(
        net, detector_config(args, settings), sample_interval=trace.sample_interval,
        journal=journal, detector_id=trace.trace_id or 'detect',
    )
    verdicts = []
    try:
        for sample in trace.currents:
            verdict = detector.push_sample(float(sample))
            if verdict is not None:
                verdicts.append(verdict)
    except (ServoGuardError, ValueError) as e:
        # repli de sécurité : le verrou est fermé, la détection s'arrête là
        if not detector.tripped:
            raise
        logger.error(f"Détection interrompue après {len(verdicts)} verdicts: {e}")
    finally:
        journal.save()
    emit_text(verdicts_to_csv(verdicts), args.out)
    if detector.tripped:
        logger.warning(f"Verrou d'arrêt fermé sur {trace.trace_id}")
        return EXIT_TRIPPED
    return EXIT_OK


def cmd_serve(args, settings: Settings) -> int:
    net = load_weights(read_input(args.weights))
    journal = EventJournal(args.events)
    try:
        serve(args.listen, net, detector_config(args, settings), journal, max_sessions=args.sessions)
    finally:
        journal.save()
    return EXIT_OK


def cmd_client(args, settings: Settings) -> int:
    trace = load_trace(args.trace)
    hop = args.hop if args.hop is not None else settings.hop
    timeout_ms = args.timeout_ms if args.timeout_ms is not None else settings.timeout_ms
    journal = EventJournal(args.events)
    try:
        with connect(args.connect) as conn:
            report = client_session(
                trace.currents, conn, sample_interval=trace.sample_interval, hop=hop,
                timeout=timeout_ms / 1000.0, journal=journal, session_id=trace.trace_id or 'client',
            )
    finally:
        journal.save()
    rows = [(v.seq, f"{v.probability:.9g}", v.label) for v in report.verdicts]
    emit_text(rows_to_csv(('seq', 'probability', 'label'), rows), args.out)
    return EXIT_TRIPPED if report.shutdown else EXIT_OK


def parse_fault(text: str) -> FaultInjection:
    """"t" ou "t:moteur" """
    moment, _, motor = text.partition(':')
    try:
        return FaultInjection(float(moment), int(motor) if motor else 0)
    except ValueError:
        raise ConfigurationError(f"Défaut attendu sous la forme t[:moteur], reçu {text!r}")


def measured_trip_latency(args, settings: Settings) -> float:
    """Latence de déclenchement du détecteur réel sur une trace de surcharge simulée"""
    net = load_weights(read_input(args.weights))
    trace = simulate_trace(MotorProfile(), 10.0, FaultSpec(onset_time=4.0), seed=args.seed)
    detector = OverloadDetector(net, detector_config(args, settings), sample_interval=trace.sample_interval)
    latency = detection_latency(trace, detector)
    if math.isinf(latency):
        logger.warning("Le détecteur ne déclenche pas : le moteur en défaut ne sera jamais arrêté")
    else:
        logger.info(f"Latence de déclenchement mesurée: {latency:.3f}s")
    return latency


def cmd_dualmotor(args, settings: Settings) -> int:
    model = EfficiencyModel(args.copper_coeff) if args.copper_coeff is not None else calibrate_model()
    duty = reference_duty_cycle()
    if args.mode == 'both':
        comparison = compare_modes(model, duty, dt=args.dt)
        rows = [
            ('single', f"{comparison.single_energy:.6f}"),
            ('dual', f"{comparison.dual_energy:.6f}"),
            ('saving', f"{comparison.saving:.6f}"),
        ]
        emit_text(rows_to_csv(('mode', 'energy_j'), rows), args.out)
        return EXIT_OK

    latency = measured_trip_latency(args, settings) if args.weights else DEFAULT_TRIP_LATENCY
    faults = [parse_fault(text) for text in args.fault]
    journal = EventJournal(args.events)
    try:
        result = simulate_duty(model, duty, args.mode, faults, dt=args.dt, trip_latency=latency, journal=journal)
    finally:
        journal.save()
    emit_text(result.ledger.to_csv(), args.out)
    if result.mission_failed:
        logger.error("Échec de mission : plus aucun moteur en marche")
    return EXIT_OK


def cmd_export_image(args, settings: Settings) -> int:
    trace = load_trace(args.trace)
    start = args.start
    if start < 0 or start + WINDOW_LENGTH > len(trace):
        raise DataError(f"Fenêtre [{start}, {start + WINDOW_LENGTH}) hors de la trace ({len(trace)} échantillons)")
    window = Window(trace.currents[start:start + WINDOW_LENGTH], trace.sample_interval)
    image = pid_transform(window, start_index=start, trace_id=trace.trace_id)
    if args.format == 'pgm':
        emit_bytes(image_to_pgm(image.channels), args.out)
    else:
        emit_text(image_to_csv(image.channels), args.out)
    return EXIT_OK


def add_detection_flags(parser: argparse.ArgumentParser):
    parser.add_argument('--hop', type=int, default=None, help="Pas entre deux fenêtres (SERVOGUARD_HOP)")
    parser.add_argument('--debounce', default=None, help="Anti-rebond k,m (SERVOGUARD_DEBOUNCE)")
    parser.add_argument('--threshold', type=float, default=None, help="Seuil de probabilité (SERVOGUARD_THRESHOLD)")


def build_parser() -> argparse.ArgumentParser:
    parser = UsageParser(prog='servoguard', description="Détection de surcharge de servomoteurs")
    commands = parser.add_subparsers(dest='command')

    p = commands.add_parser('simulate', help="Génère une trace de courant")
    p.add_argument('--duration', type=float, default=10.0)
    p.add_argument('--fault', action='store_true', help="Injecte une surcharge")
    p.add_argument('--onset', type=float, default=None, help="Apparition du défaut (s), 40 %% de la durée par défaut")
    p.add_argument('--shutdown', type=float, default=None, help="Arrêt du moteur après la surcharge (s)")
    p.add_argument('--sample-interval', type=float, default=DEFAULT_SAMPLE_INTERVAL)
    p.add_argument('--seed', type=seed_value, default=0)
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_simulate)

    p = commands.add_parser('build-dataset', help="Fenêtre, transforme et étiquette des traces")
    p.add_argument('--trace', action='append', default=[], help="Trace CSV ('-' pour l'entrée standard)")
    p.add_argument('--simulate-runs', type=int, default=0, help="Ajoute une campagne simulée de N traces")
    p.add_argument('--duration', type=float, default=10.0)
    p.add_argument('--hop', type=int, default=None)
    p.add_argument('--seed', type=seed_value, default=0)
    p.add_argument('--out', required=True)
    p.set_defaults(handler=cmd_build_dataset)

    p = commands.add_parser('train', help="Entraîne le toy_resnet")
    p.add_argument('--dataset', required=True)
    p.add_argument('--out', required=True, help="Fichier de poids")
    p.add_argument('--report', default=None, help="CSV de l'historique (sortie standard par défaut)")
    p.add_argument('--seed', type=seed_value, default=0)
    p.add_argument('--epochs', type=int, default=30)
    p.add_argument('--batch-size', type=int, default=32)
    p.add_argument('--learning-rate', type=float, default=1e-3)
    p.add_argument('--patience', type=int, default=5)
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser('eval', help="Exactitude et matrice de confusion")
    p.add_argument('--weights', required=True)
    p.add_argument('--dataset', required=True)
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser('detect', help="Détection en flux sur une trace")
    p.add_argument('--weights', required=True)
    p.add_argument('--trace', required=True)
    p.add_argument('--out', default=None)
    p.add_argument('--events', default=None, help="Journal d'événements JSON")
    add_detection_flags(p)
    p.set_defaults(handler=cmd_detect)

    p = commands.add_parser('serve', help="Processeur externe : classe les fenêtres reçues")
    p.add_argument('--weights', required=True)
    p.add_argument('--listen', default='127.0.0.1:7450')
    p.add_argument('--sessions', type=int, default=None, help="Nombre de sessions avant arrêt")
    p.add_argument('--events', default=None, help="Journal d'événements JSON")
    add_detection_flags(p)
    p.set_defaults(handler=cmd_serve)

    p = commands.add_parser('client', help="Microcontrôleur : envoie les fenêtres d'une trace")
    p.add_argument('--trace', required=True)
    p.add_argument('--connect', default='127.0.0.1:7450')
    p.add_argument('--hop', type=int, default=None)
    p.add_argument('--timeout-ms', type=int, default=None, help="Délai d'attente d'un verdict (SERVOGUARD_TIMEOUT_MS)")
    p.add_argument('--events', default=None, help="Journal d'événements JSON")
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_client)

    p = commands.add_parser('dualmotor', help="Comparaison énergétique et basculement bimoteur")
    p.add_argument('--mode', choices=('single', 'dual', 'both'), default='both')
    p.add_argument('--fault', action='append', default=[], help="Injection t[:moteur], répétable")
    p.add_argument('--copper-coeff', type=float, default=None, help="k_c (calibré par défaut)")
    p.add_argument('--weights', default=None, help="Mesure la latence de déclenchement avec ce modèle")
    p.add_argument('--dt', type=float, default=0.01)
    p.add_argument('--seed', type=seed_value, default=0)
    p.add_argument('--events', default=None, help="Journal d'événements JSON (basculements)")
    p.add_argument('--out', default=None)
    add_detection_flags(p)
    p.set_defaults(handler=cmd_dualmotor)

    p = commands.add_parser('export-image', help="Exporte l'image PID d'une fenêtre")
    p.add_argument('--trace', required=True)
    p.add_argument('--start', type=int, default=0, help="Indice du premier échantillon")
    p.add_argument('--format', choices=('csv', 'pgm'), default='csv')
    p.add_argument('--out', default=None)
    p.set_defaults(handler=cmd_export_image)

    return parser


def _diagnostic(message: str):
    print(f"servoguard: {message}", file=sys.stderr)


def run(argv: Optional[List[str]] = None) -> int:
    """
    Exécute une sous-commande

    Returns:
        int: 0 succès, 2 usage, 3 données/format, 10 verrou d'arrêt fermé, 1 autre erreur
    """
    load_environment()
    configure_logging()
    try:
        args = build_parser().parse_args(argv)
        if args.command is None:
            raise ConfigurationError("sous-commande manquante")
        return args.handler(args, load_settings())
    except SystemExit as e:
        return e.code if isinstance(e.code, int) else EXIT_USAGE
    except (ConfigurationError, DomainError) as e:
        _diagnostic(f"erreur d'usage: {e}")
        return EXIT_USAGE
    except DataError as e:
        _diagnostic(f"données invalides: {e}")
        return EXIT_DATA
    except (FileNotFoundError, IsADirectoryError, PermissionError) as e:
        _diagnostic(f"fichier illisible: {e}")
        return EXIT_DATA
    except (ServoGuardError, OSError) as e:
        logger.debug("Détail de l'erreur", exc_info=True)
        _diagnostic(str(e))
        return EXIT_ERROR


if __name__ == '__main__':
    sys.exit(run())
