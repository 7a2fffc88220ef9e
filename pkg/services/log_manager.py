"""
Service de journalisation des événements (déclenchements, échéances, basculements)
"""
import json
import logging
import threading
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional

from services.artifact_writer import atomic_write_text

logger = logging.getLogger(__name__)


class EventJournal:
    """Garde l'historique des événements par session, en mémoire"""

    def __init__(self, history_file: Optional[str] = None):
        """
        Args:
            history_file: Fichier JSON où sauvegarder l'historique (optionnel)
        """
        self.history_file = Path(history_file) if history_file else None
        self._history: List[Dict[str, Any]] = []
        self._lock = threading.Lock()

    def log_status(self, session_id: str, stage: str, message: str, data: Any = None):
        """
        Enregistre un événement

        Args:
            session_id: ID de la session (détecteur, connexion, simulation)
            stage: Type d'événement (trip, failsafe, missed_deadline, failover...)
            message: Message lisible
            data: Données supplémentaires optionnelles
        """
        with self._lock:
            entry = None
            for item in self._history:
                if item['session_id'] == session_id:
                    entry = item
                    break

            if entry is None:
                entry = {
                    'session_id': session_id,
                    'created_at': datetime.now().isoformat(),
                    'status': stage,
                    'stages': []
                }
                self._history.append(entry)

            entry['stages'].append({
                'stage': stage,
                'message': message,
                'timestamp': datetime.now().isoformat(),
                'data': data
            })
            entry['status'] = stage
            entry['updated_at'] = datetime.now().isoformat()

        logger.info(f"[{session_id}] {stage}: {message}")

    def get_status(self, session_id: str) -> Dict[str, Any]:
        """Récupère l'état d'une session"""
        with self._lock:
            for entry in self._history:
                if entry['session_id'] == session_id:
                    return entry
        return {
            'session_id': session_id,
            'status': 'not_found',
            'message': 'Session introuvable'
        }

    def events(self, session_id: Optional[str] = None, stage: Optional[str] = None) -> List[Dict[str, Any]]:
        """
        Liste les événements, filtrés par session et/ou par type

        Returns:
            list: Événements dans l'ordre d'enregistrement
        """
        with self._lock:
            result = []
            for entry in self._history:
                if session_id is not None and entry['session_id'] != session_id:
                    continue
                for item in entry['stages']:
                    if stage is None or item['stage'] == stage:
                        result.append({'session_id': entry['session_id'], **item})
            return result

    def save(self, path: Optional[str] = None) -> Optional[str]:
        """
        Sauvegarde l'historique en JSON (écriture atomique)

        Returns:
            str: Chemin du fichier écrit, ou None si aucun fichier n'est configuré
        """
        target = Path(path) if path else self.history_file
        if target is None:
            return None
        with self._lock:
            payload = json.dumps(self._history, ensure_ascii=False, indent=2, default=str)
        atomic_write_text(target, payload)
        logger.debug(f"Historique sauvegardé: {target}")
        return str(target)
