"""
Service d'écriture des artefacts : écriture atomique, exports CSV et PGM
"""
import csv
import io
import logging
import os
import tempfile
from pathlib import Path
from typing import Iterable, Sequence, Union

import numpy as np
from PIL import Image

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]


def atomic_write_bytes(path: PathLike, data: bytes) -> str:
    """
    Écrit un fichier via un fichier temporaire renommé : jamais de fichier partiel

    Returns:
        str: Chemin écrit
    """
    target = Path(path)
    target.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp_path = tempfile.mkstemp(prefix=f".{target.name}.", suffix='.tmp', dir=str(target.parent))
    try:
        with os.fdopen(fd, 'wb') as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp_path, target)
    except BaseException:
        if os.path.exists(tmp_path):
            os.remove(tmp_path)
        raise
    logger.debug(f"Fichier écrit: {target} ({len(data)} octets)")
    return str(target)


def atomic_write_text(path: PathLike, text: str) -> str:
    return atomic_write_bytes(path, text.encode('utf-8'))


def rows_to_csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    """Rend un tableau en CSV (fins de ligne LF)"""
    out = io.StringIO()
    writer = csv.writer(out, lineterminator='\n')
    writer.writerow(header)
    for row in rows:
        writer.writerow(row)
    return out.getvalue()


def image_to_pgm(channels: np.ndarray) -> bytes:
    """
    Convertit une image 3×32×32 en trois plans PGM (P5, maxval 255) concaténés

    Args:
        channels: Tableau 3×H×W de valeurs dans [0, 1]

    Returns:
        bytes: Les trois fichiers PGM bout à bout
    """
    planes = []
    for plane in np.asarray(channels):
        pixels = np.round(np.clip(plane, 0.0, 1.0) * 255.0).astype(np.uint8)
        buffer = io.BytesIO()
        Image.fromarray(pixels).save(buffer, format='PPM')
        planes.append(buffer.getvalue())
    return b''.join(planes)


def image_to_csv(channels: np.ndarray) -> str:
    """Une ligne par pixel : canal, ligne, colonne, valeur"""
    channels = np.asarray(channels)
    rows = (
        (c, r, col, f"{channels[c, r, col]:.9g}")
        for c in range(channels.shape[0])
        for r in range(channels.shape[1])
        for col in range(channels.shape[2])
    )
    return rows_to_csv(('channel', 'row', 'col', 'value'), rows)
