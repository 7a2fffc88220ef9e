"""
Service d'entraînement et d'évaluation du toy_resnet
"""
import logging
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np

from services.artifact_writer import atomic_write_text, rows_to_csv
from services.dataset import DatasetSplit, LabeledImage, as_arrays
from services.errors import ConfigurationError, DataError, TrainingError
from services.tensornet import AdamState, Network, backward_batch, predict_batch, sgd_adam_step

logger = logging.getLogger(__name__)

EVAL_BATCH = 256
REPORT_HEADER = ('epoch', 'train_loss', 'train_acc', 'val_loss', 'val_acc')

Confusion = Tuple[Tuple[int, int], Tuple[int, int]]


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 30
    batch_size: int = 32
    learning_rate: float = 1e-3
    seed: int = 0
    patience: int = 5

    def __post_init__(self):
        if self.epochs < 0:
            raise ConfigurationError("epochs doit être ≥ 0")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size doit être ≥ 1")
        if not self.learning_rate > 0:
            raise ConfigurationError("learning_rate doit être > 0")
        if self.patience < 1:
            raise ConfigurationError("patience doit être ≥ 1")


@dataclass(frozen=True)
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_loss: float
    val_acc: float


@dataclass
class TrainReport:
    history: List[EpochRecord]
    test_accuracy: float
    confusion: Confusion
    best_epoch: Optional[int] = None
    wall_time: float = field(default=0.0, compare=False)

    def best_val_loss_trend(self) -> List[float]:
        """Meilleure perte de validation atteinte à chaque epoch"""
        return np.minimum.accumulate([record.val_loss for record in self.history]).tolist() if self.history else []

    def to_csv(self) -> str:
        return rows_to_csv(REPORT_HEADER, (
            (r.epoch, f"{r.train_loss:.9g}", f"{r.train_acc:.9g}", f"{r.val_loss:.9g}", f"{r.val_acc:.9g}")
            for r in self.history
        ))


def write_report_csv(path, report: TrainReport) -> str:
    """Exporte l'historique d'entraînement (courbes de perte et d'exactitude)"""
    return atomic_write_text(path, report.to_csv())


def _predict_probs(net: Network, x: np.ndarray) -> np.ndarray:
    chunks = [predict_batch(net, x[i:i + EVAL_BATCH])[1] for i in range(0, len(x), EVAL_BATCH)]
    return np.concatenate(chunks) if chunks else np.zeros((0, 2))


def _decide(probs: np.ndarray) -> np.ndarray:
    """argmax des probabilités ; une égalité exacte donne la classe 0"""
    return (probs[:, 1] > probs[:, 0]).astype(np.int64)


def _loss_and_accuracy(net: Network, x: np.ndarray, y: np.ndarray) -> Tuple[float, float]:
    probs = _predict_probs(net, x)
    picked = np.clip(probs[np.arange(len(y)), y], 1e-300, 1.0)
    return float(-np.log(picked).mean()), float((_decide(probs) == y).mean())


def evaluate(net: Network, images: Sequence[LabeledImage]) -> Tuple[float, Confusion]:
    """
    Exactitude et matrice de confusion (lignes : vérité, colonnes : prédiction)

    Returns:
        tuple: (exactitude, matrice 2×2)
    """
    if not images:
        raise ConfigurationError("Évaluation sur un ensemble vide")
    x, y = as_arrays(images)
    predicted = _decide(_predict_probs(net, x))
    matrix = np.zeros((2, 2), dtype=np.int64)
    np.add.at(matrix, (y, predicted), 1)
    accuracy = float(np.trace(matrix)) / len(y)
    return accuracy, tuple(tuple(int(v) for v in row) for row in matrix)


def train(net: Network, split: DatasetSplit, cfg: TrainConfig) -> Tuple[Network, TrainReport]:
    """
    Entraînement par mini-lots (Adam, entropie croisée), arrêt anticipé sur
    l'exactitude de validation ; le réseau rendu porte les meilleurs poids

    Args:
        net: Réseau initialisé (modifié en place)
        split: Partition du jeu de données
        cfg: Hyperparamètres

    Returns:
        tuple: (réseau, rapport)
    """
    if not split.train or not split.validation:
        raise ConfigurationError("La partition doit contenir des images d'entraînement et de validation")
    if cfg.batch_size > len(split.train):
        raise ConfigurationError(f"batch_size ({cfg.batch_size}) > taille d'entraînement ({len(split.train)})")

    started = time.perf_counter()
    x_train, y_train = as_arrays(split.train)
    x_val, y_val = as_arrays(split.validation)
    rng = np.random.default_rng(cfg.seed)
    state = AdamState()
    history: List[EpochRecord] = []
    best_acc = -1.0
    best_epoch = None
    best_params = None
    stale = 0

    logger.info(f"Début de l'entraînement: {len(x_train)} images, {cfg.epochs} epochs, lots de {cfg.batch_size}")
    for epoch in range(1, cfg.epochs + 1):
        order = rng.permutation(len(x_train))
        for batch, start in enumerate(range(0, len(order), cfg.batch_size)):
            idx = order[start:start + cfg.batch_size]
            try:
                loss, grads = backward_batch(net, x_train[idx], y_train[idx])
            except DataError as e:
                raise TrainingError(epoch, batch, f"Divergence à l'epoch {epoch}, lot {batch}: {e}") from e
            if not all(np.all(np.isfinite(g)) for g in grads.values()):
                raise TrainingError(epoch, batch)
            sgd_adam_step(net, grads, state, cfg.learning_rate)

        train_loss, train_acc = _loss_and_accuracy(net, x_train, y_train)
        val_loss, val_acc = _loss_and_accuracy(net, x_val, y_val)
        if not (np.isfinite(train_loss) and np.isfinite(val_loss)):
            raise TrainingError(epoch, batch)
        history.append(EpochRecord(epoch, train_loss, train_acc, val_loss, val_acc))
        logger.info(
            f"Epoch {epoch}/{cfg.epochs}: perte {train_loss:.4f} / exactitude {train_acc:.4f}, "
            f"validation {val_loss:.4f} / {val_acc:.4f}"
        )

        if val_acc > best_acc:
            best_acc, best_epoch, stale = val_acc, epoch, 0
            best_params = {k: v.copy() for k, v in net.parameters().items()}
        else:
            stale += 1
            if stale >= cfg.patience:
                logger.info(f"Arrêt anticipé à l'epoch {epoch} (meilleure validation à l'epoch {best_epoch})")
                break

    if best_params is not None:
        for key, value in net.parameters().items():
            value[...] = best_params[key]

    if split.test:
        test_accuracy, confusion = evaluate(net, split.test)
    else:
        test_accuracy, confusion = float('nan'), ((0, 0), (0, 0))
    report = TrainReport(
        history=history,
        test_accuracy=test_accuracy,
        confusion=confusion,
        best_epoch=best_epoch,
        wall_time=time.perf_counter() - started,
    )
    logger.info(f"Entraînement terminé en {report.wall_time:.1f}s, exactitude de test {test_accuracy:.4f}")
    return net, report
