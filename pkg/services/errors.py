"""
Exceptions du projet ServoGuard
"""
from typing import Optional


class ServoGuardError(Exception):
    """Erreur de base du projet"""


class ConfigurationError(ServoGuardError, ValueError):
    """Paramètres invalides (durée trop courte, trop peu d'images, etc.)"""


class DomainError(ServoGuardError, ValueError):
    """Entrée physique hors domaine (résistance nulle, couple négatif...)"""


class DataError(ServoGuardError, ValueError):
    """Données invalides (valeurs non finies, invariants violés)"""


class TraceParseError(DataError):
    """Erreur de lecture d'un fichier de trace CSV"""

    def __init__(self, line_number: int, message: str):
        self.line_number = line_number
        super().__init__(f"ligne {line_number}: {message}")


class FormatError(DataError):
    """Fichier binaire (poids ou jeu de données) illisible"""


class BadMagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


class ShapeMismatchError(FormatError):
    pass


class StructuralError(ServoGuardError):
    """Entrée ou paramètres incompatibles avec le graphe du réseau"""


class TrainingError(ServoGuardError):
    """Divergence de l'entraînement (perte non finie)"""

    def __init__(self, epoch: int, batch: int, message: Optional[str] = None):
        self.epoch = epoch
        self.batch = batch
        super().__init__(message or f"perte non finie à l'epoch {epoch}, lot {batch}")


class ProtocolError(ServoGuardError):
    """Erreur du protocole filaire"""


class SessionAbortedError(ProtocolError):
    """Session interrompue (trop d'échecs CRC consécutifs)"""
