"""
Protocole filaire entre le microcontrôleur (client) et le processeur externe
(serveur) : trames binaires little-endian protégées par CRC-32

Trame : A5 5A | version u8 | type u8 | longueur u32 | charge utile | CRC-32 u32
Le CRC couvre les octets de la version jusqu'à la fin de la charge utile.
"""
import logging
import socket
import struct
import time
import zlib
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Optional, Tuple, Union

import numpy as np
from tenacity import retry, retry_if_exception_type, stop_after_attempt, wait_exponential

from services.detector import DetectorConfig, DetectorState, classify_channels
from services.errors import ConfigurationError, ProtocolError, ServoGuardError, SessionAbortedError
from services.log_manager import EventJournal
from services.signal_sim import DEFAULT_SAMPLE_INTERVAL
from services.tensornet import Network
from services.transform import N_CHANNELS, WINDOW_LENGTH, Window, raw_channels

logger = logging.getLogger(__name__)

MAGIC = b'\xa5\x5a'
PROTOCOL_VERSION = 1
_HEADER = struct.Struct('<2sBBI')
_CRC = struct.Struct('<I')
_SEQ = struct.Struct('<I')
_WINDOW_HEADER = struct.Struct('<III')
_VERDICT = struct.Struct('<IBf')

MSG_WINDOW_DATA = 1
MSG_VERDICT = 2
MSG_HEARTBEAT = 3
MSG_SHUTDOWN = 4

WINDOW_PAYLOAD = _WINDOW_HEADER.size + N_CHANNELS * WINDOW_LENGTH * 4
MAX_PAYLOAD = WINDOW_PAYLOAD
MAX_CRC_FAILURES = 3
DEFAULT_TIMEOUT = 0.5
RECV_SIZE = 65536

_U32_MAX = 0xFFFFFFFF


def crc32(data: bytes) -> int:
    """CRC-32 IEEE (polynôme réfléchi 0xEDB88320)"""
    return zlib.crc32(data) & 0xFFFFFFFF


def _check_seq(seq: int):
    if not 0 <= seq <= _U32_MAX:
        raise ProtocolError(f"Numéro de séquence hors u32: {seq}")


@dataclass(frozen=True, eq=False)
class WindowData:
    """Trois canaux bruts (signal, intégrale, dérivée) d'une fenêtre, en float32"""
    seq: int
    sample_interval_us: int
    channels: np.ndarray

    def __post_init__(self):
        _check_seq(self.seq)
        if not 0 < self.sample_interval_us <= _U32_MAX:
            raise ProtocolError(f"sample_interval_us hors plage: {self.sample_interval_us}")
        channels = np.asarray(self.channels, dtype='<f4')
        if channels.shape != (N_CHANNELS, WINDOW_LENGTH):
            raise ProtocolError(f"WindowData attend 3×{WINDOW_LENGTH} valeurs, reçu {channels.shape}")
        object.__setattr__(self, 'channels', channels)

    @property
    def sample_interval(self) -> float:
        return self.sample_interval_us * 1e-6

    def __eq__(self, other):
        if not isinstance(other, WindowData):
            return NotImplemented
        return (
            self.seq == other.seq
            and self.sample_interval_us == other.sample_interval_us
            and np.array_equal(self.channels, other.channels, equal_nan=True)
        )

    __hash__ = None


@dataclass(frozen=True)
class VerdictMsg:
    seq: int
    label: int
    probability: float

    def __post_init__(self):
        _check_seq(self.seq)
        if self.label not in (0, 1):
            raise ProtocolError(f"Étiquette hors de {{0, 1}}: {self.label}")
        # la valeur transportée est un float32
        object.__setattr__(self, 'probability', float(np.float32(self.probability)))


@dataclass(frozen=True)
class Heartbeat:
    seq: int

    def __post_init__(self):
        _check_seq(self.seq)


@dataclass(frozen=True)
class ShutdownCmd:
    seq: int

    def __post_init__(self):
        _check_seq(self.seq)


Message = Union[WindowData, VerdictMsg, Heartbeat, ShutdownCmd]


class DecodeResult(NamedTuple):
    message: Optional[Message]
    consumed: int
    status: str  # ok, need_more, resync, bad_version, bad_length, bad_crc, unknown_type, bad_payload


def _payload(msg: Message) -> Tuple[int, bytes]:
    if isinstance(msg, WindowData):
        return MSG_WINDOW_DATA, (
            _WINDOW_HEADER.pack(msg.seq, msg.sample_interval_us, WINDOW_LENGTH) + msg.channels.tobytes()
        )
    if isinstance(msg, VerdictMsg):
        return MSG_VERDICT, _VERDICT.pack(msg.seq, msg.label, msg.probability)
    if isinstance(msg, Heartbeat):
        return MSG_HEARTBEAT, _SEQ.pack(msg.seq)
    if isinstance(msg, ShutdownCmd):
        return MSG_SHUTDOWN, _SEQ.pack(msg.seq)
    raise ProtocolError(f"Type de message inconnu: {type(msg).__name__}")


def encode(msg: Message) -> bytes:
    """Message → trame complète"""
    msg_type, payload = _payload(msg)
    body = _HEADER.pack(MAGIC, PROTOCOL_VERSION, msg_type, len(payload)) + payload
    return body + _CRC.pack(crc32(body[len(MAGIC):]))


def _parse_payload(msg_type: int, payload: bytes) -> Message:
    if msg_type == MSG_WINDOW_DATA:
        if len(payload) != WINDOW_PAYLOAD:
            raise ProtocolError(f"WindowData de {len(payload)} octets")
        seq, interval_us, n_samples = _WINDOW_HEADER.unpack_from(payload, 0)
        if n_samples != WINDOW_LENGTH:
            raise ProtocolError(f"WindowData annonce {n_samples} échantillons")
        values = np.frombuffer(payload, dtype='<f4', offset=_WINDOW_HEADER.size)
        return WindowData(seq, interval_us, values.reshape(N_CHANNELS, WINDOW_LENGTH).copy())
    if msg_type == MSG_VERDICT:
        if len(payload) != _VERDICT.size:
            raise ProtocolError(f"VerdictMsg de {len(payload)} octets")
        return VerdictMsg(*_VERDICT.unpack(payload))
    if len(payload) != _SEQ.size:
        raise ProtocolError(f"Message de type {msg_type} de {len(payload)} octets")
    (seq,) = _SEQ.unpack(payload)
    return Heartbeat(seq) if msg_type == MSG_HEARTBEAT else ShutdownCmd(seq)


def _valid_frame_at(data, pos: int) -> bool:
    if len(data) - pos < _HEADER.size + _CRC.size:
        return False
    _, version, _, length = _HEADER.unpack_from(data, pos)
    if version != PROTOCOL_VERSION or length > MAX_PAYLOAD:
        return False
    end = pos + _HEADER.size + length
    if len(data) < end + _CRC.size:
        return False
    (stored,) = _CRC.unpack_from(data, end)
    return crc32(data[pos + len(MAGIC):end]) == stored


def _next_valid_frame(data, start: int) -> Optional[int]:
    """Position de la première trame complète et intègre à partir de `start`"""
    pos = data.find(MAGIC, start)
    while pos >= 0:
        if _valid_frame_at(data, pos):
            return pos
        pos = data.find(MAGIC, pos + 1)
    return None


def decode(data: Union[bytes, bytearray]) -> DecodeResult:
    """
    Extrait au plus une trame du début de `data`

    Les octets précédant la signature sont consommés (statut resync). Une trame
    incomplète ne consomme rien (need_more), sauf si une trame complète et
    intègre la suit : tout ce qui la précède est alors sauté (resync). Une trame
    rejetée pour CRC, version ou longueur ne consomme que la signature, la
    recherche reprend juste après.

    Returns:
        DecodeResult: (message ou None, octets consommés, statut)
    """
    if not isinstance(data, (bytes, bytearray)):
        data = bytes(data)
    start = data.find(MAGIC)
    if start < 0:
        # un A5 final peut être le début d'une signature
        keep = 1 if data[-1:] == MAGIC[:1] else 0
        skipped = len(data) - keep
        return DecodeResult(None, skipped, 'resync' if skipped else 'need_more')
    if start > 0:
        return DecodeResult(None, start, 'resync')
    if len(data) < _HEADER.size:
        return DecodeResult(None, 0, 'need_more')

    _, version, msg_type, length = _HEADER.unpack_from(data, 0)
    if version != PROTOCOL_VERSION:
        return DecodeResult(None, len(MAGIC), 'bad_version')
    if length > MAX_PAYLOAD:
        return DecodeResult(None, len(MAGIC), 'bad_length')
    total = _HEADER.size + length + _CRC.size
    if len(data) < total:
        # en-tête plausible mais trame incomplète : une trame intègre plus loin l'emporte
        later = _next_valid_frame(data, 1)
        if later is not None:
            return DecodeResult(None, later, 'resync')
        return DecodeResult(None, 0, 'need_more')

    end = _HEADER.size + length
    (stored,) = _CRC.unpack_from(data, end)
    if crc32(data[len(MAGIC):end]) != stored:
        return DecodeResult(None, len(MAGIC), 'bad_crc')
    if msg_type not in (MSG_WINDOW_DATA, MSG_VERDICT, MSG_HEARTBEAT, MSG_SHUTDOWN):
        return DecodeResult(None, total, 'unknown_type')
    try:
        message = _parse_payload(msg_type, bytes(data[_HEADER.size:end]))
    except ProtocolError as e:
        logger.warning(f"Charge utile rejetée: {e}")
        return DecodeResult(None, total, 'bad_payload')
    return DecodeResult(message, total, 'ok')


class FrameDecoder:
    """Tampon de réception : découpe un flux d'octets en messages"""

    def __init__(self, max_crc_failures: int = MAX_CRC_FAILURES):
        self.max_crc_failures = max_crc_failures
        self.crc_failures = 0
        self.rejected = 0
        self.skipped_bytes = 0
        self._buffer = bytearray()

    @property
    def pending(self) -> int:
        return len(self._buffer)

    def feed(self, data: bytes) -> List[Message]:
        """
        Ajoute des octets reçus et rend les messages complets

        Raises:
            SessionAbortedError: Plus de `max_crc_failures` échecs CRC consécutifs
        """
        self._buffer += data
        messages = []
        while self._buffer:
            result = decode(self._buffer)
            if result.consumed:
                del self._buffer[:result.consumed]
            if result.status == 'ok':
                self.crc_failures = 0
                messages.append(result.message)
            elif result.status == 'need_more':
                break
            elif result.status == 'resync':
                self.skipped_bytes += result.consumed
            else:
                self.rejected += 1
                logger.warning(f"Trame rejetée: {result.status}")
                if result.status == 'bad_crc':
                    self.crc_failures += 1
                    if self.crc_failures > self.max_crc_failures:
                        raise SessionAbortedError(f"{self.crc_failures} échecs CRC consécutifs")
        return messages


def parse_address(address: str) -> Tuple[str, int]:
    """"hôte:port" → (hôte, port)"""
    host, sep, port = address.rpartition(':')
    if not sep or not port.isdigit():
        raise ConfigurationError(f"Adresse attendue sous la forme hôte:port, reçu {address!r}")
    port_number = int(port)
    if not 0 <= port_number <= 65535:
        raise ConfigurationError(f"Port hors plage: {port_number}")
    return host or '127.0.0.1', port_number


@retry(
    stop=stop_after_attempt(5),
    wait=wait_exponential(multiplier=0.2, min=0.2, max=5),
    retry=retry_if_exception_type((ConnectionRefusedError, ConnectionResetError)),
    reraise=True,
)
def connect(address: str, timeout: float = 5.0) -> socket.socket:
    """
    Ouvre la liaison vers le processeur externe (nouvelles tentatives si refus)

    Returns:
        socket.socket: Connexion établie
    """
    host, port = parse_address(address)
    logger.info(f"Connexion à {host}:{port}")
    return socket.create_connection((host, port), timeout=timeout)


@dataclass
class ClientReport:
    sent: List[int] = field(default_factory=list)
    verdicts: List[VerdictMsg] = field(default_factory=list)
    missed_deadlines: List[int] = field(default_factory=list)
    round_trips: List[float] = field(default_factory=list)
    shutdown: bool = False
    shutdown_seq: Optional[int] = None


@dataclass
class ServerReport:
    windows: int = 0
    verdicts: List[VerdictMsg] = field(default_factory=list)
    heartbeats: int = 0
    shutdown_sent: bool = False
    shutdown_seq: Optional[int] = None


def _handle_client_message(msg: Message, report: ClientReport, journal: Optional[EventJournal], session_id: str):
    if isinstance(msg, ShutdownCmd):
        if not report.shutdown:
            report.shutdown = True
            report.shutdown_seq = msg.seq
            if journal is not None:
                journal.log_status(session_id, 'shutdown', f"Ordre d'arrêt reçu (fenêtre {msg.seq})")
    elif isinstance(msg, Heartbeat):
        logger.debug(f"Heartbeat {msg.seq} reçu")
    elif not isinstance(msg, VerdictMsg):
        logger.warning(f"Message inattendu côté client: {type(msg).__name__}")


def client_session(samples: Iterable[float], conn: socket.socket,
                   sample_interval: float = DEFAULT_SAMPLE_INTERVAL, hop: int = 256,
                   timeout: float = DEFAULT_TIMEOUT, journal: Optional[EventJournal] = None,
                   session_id: str = "client") -> ClientReport:
    """
    Côté microcontrôleur : fenêtre le flux, calcule les trois canaux bruts,
    envoie un WindowData à chaque pas et attend le verdict correspondant

    Args:
        samples: Courants échantillonnés
        conn: Liaison établie
        sample_interval: Période d'échantillonnage (s)
        hop: Pas entre deux fenêtres
        timeout: Délai d'attente d'un verdict (s)
        journal: Journal d'événements optionnel
        session_id: Identifiant dans le journal

    Returns:
        ClientReport: Verdicts reçus, échéances manquées, arrêt éventuel
    """
    if hop < 1:
        raise ConfigurationError(f"hop doit être ≥ 1, reçu {hop}")
    interval_us = int(round(sample_interval * 1e6))
    decoder = FrameDecoder()
    state = DetectorState()
    report = ClientReport()

    for sample in samples:
        if report.shutdown:
            logger.info("Arrêt verrouillé, fin de l'émission")
            break
        state.push(float(sample))
        if not state.window_ready(hop):
            continue

        seq = state.window_seq(hop)
        channels = raw_channels(Window(state.window_values(), sample_interval))
        sent_at = time.perf_counter()
        conn.sendall(encode(WindowData(seq, interval_us, channels)))
        report.sent.append(seq)

        deadline = sent_at + timeout
        answered = False
        while not answered:
            remaining = deadline - time.perf_counter()
            if remaining <= 0:
                break
            conn.settimeout(remaining)
            try:
                data = conn.recv(RECV_SIZE)
            except socket.timeout:
                break
            if not data:
                raise ProtocolError("Connexion fermée par le serveur")
            for msg in decoder.feed(data):
                if isinstance(msg, VerdictMsg):
                    if msg.seq == seq:
                        answered = True
                        report.verdicts.append(msg)
                        report.round_trips.append(time.perf_counter() - sent_at)
                    else:
                        logger.warning(f"Verdict tardif pour la fenêtre {msg.seq} ignoré")
                else:
                    _handle_client_message(msg, report, journal, session_id)

        if not answered:
            report.missed_deadlines.append(seq)
            logger.warning(f"Échéance manquée pour la fenêtre {seq}")
            if journal is not None:
                journal.log_status(session_id, 'missed_deadline', f"Pas de verdict pour la fenêtre {seq}")

    # fin du flux : on vide ce que le serveur a encore à dire
    try:
        conn.shutdown(socket.SHUT_WR)
        conn.settimeout(timeout)
        while True:
            data = conn.recv(RECV_SIZE)
            if not data:
                break
            for msg in decoder.feed(data):
                _handle_client_message(msg, report, journal, session_id)
    except (socket.timeout, OSError) as e:
        logger.debug(f"Fin de session client: {e}")

    logger.info(
        f"Session client terminée: {len(report.sent)} fenêtres, {len(report.verdicts)} verdicts, "
        f"{len(report.missed_deadlines)} échéances manquées, arrêt={report.shutdown}"
    )
    return report


def server_session(net: Network, conn: socket.socket, config: Optional[DetectorConfig] = None,
                   journal: Optional[EventJournal] = None, session_id: str = "server") -> ServerReport:
    """
    Côté processeur externe : classe chaque WindowData, répond par un VerdictMsg
    de même numéro et envoie un ShutdownCmd quand l'anti-rebond se ferme

    Returns:
        ServerReport: Bilan de la session
    """
    config = config or DetectorConfig()
    k, m = config.debounce
    state = DetectorState(memory=m)
    decoder = FrameDecoder()
    report = ServerReport()
    conn.settimeout(None)

    while True:
        data = conn.recv(RECV_SIZE)
        if not data:
            break
        try:
            messages = decoder.feed(data)
        except SessionAbortedError as e:
            logger.error(f"Session interrompue: {e}")
            if journal is not None:
                journal.log_status(session_id, 'aborted', str(e))
            raise

        for msg in messages:
            if isinstance(msg, WindowData):
                report.windows += 1
                reply = b''
                try:
                    probability, is_fault = classify_channels(net, msg.channels, config.score_threshold)
                    verdict = VerdictMsg(msg.seq, int(is_fault), probability)
                    report.verdicts.append(verdict)
                    reply += encode(verdict)
                    tripped = state.record(is_fault, k)
                except (ServoGuardError, ValueError) as e:
                    logger.error(f"Erreur d'inférence sur la fenêtre {msg.seq}, arrêt de sécurité: {e}", exc_info=True)
                    state.trip()
                    tripped = True
                if tripped and not report.shutdown_sent:
                    report.shutdown_sent = True
                    report.shutdown_seq = msg.seq
                    reply += encode(ShutdownCmd(msg.seq))
                    if journal is not None:
                        journal.log_status(session_id, 'trip', f"Ordre d'arrêt envoyé à la fenêtre {msg.seq}")
                conn.sendall(reply)
            elif isinstance(msg, Heartbeat):
                report.heartbeats += 1
                conn.sendall(encode(msg))
            elif isinstance(msg, ShutdownCmd):
                logger.info("Fin de session demandée par le client")
                return report
            else:
                logger.warning(f"Message inattendu côté serveur: {type(msg).__name__}")

    logger.info(f"Session serveur terminée: {report.windows} fenêtres, arrêt envoyé={report.shutdown_sent}")
    return report


def serve(address: str, net: Network, config: Optional[DetectorConfig] = None,
          journal: Optional[EventJournal] = None, max_sessions: Optional[int] = None) -> List[ServerReport]:
    """
    Écoute sur `address` et traite une connexion à la fois

    Args:
        max_sessions: Nombre de sessions avant de rendre la main (None = sans fin)

    Returns:
        list: Bilans des sessions traitées
    """
    host, port = parse_address(address)
    reports = []
    with socket.create_server((host, port)) as listener:
        logger.info(f"En écoute sur {host}:{listener.getsockname()[1]}")
        while max_sessions is None or len(reports) < max_sessions:
            conn, peer = listener.accept()
            session_id = f"{peer[0]}:{peer[1]}"
            with conn:
                try:
                    reports.append(server_session(net, conn, config, journal, session_id))
                except (ProtocolError, OSError) as e:
                    logger.error(f"Session {session_id} terminée sur erreur: {e}")
                    reports.append(ServerReport())
    return reports
