"""
Moteur de tenseurs et de CNN sans framework : couches, passe avant, rétropropagation,
optimiseur Adam, sérialisation des poids et construction du toy_resnet (7 914 paramètres)
"""
import copy
import logging
import struct
import zlib
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from services.errors import (
    BadMagicError,
    ChecksumError,
    ConfigurationError,
    DataError,
    ShapeMismatchError,
    StructuralError,
    TruncatedError,
    VersionError,
)
from services.transform import FeatureImage

logger = logging.getLogger(__name__)

INPUT_SHAPE = (3, 32, 32)
N_CLASSES = 2
TOY_RESNET_PARAMS = 7914

WEIGHT_MAGIC = b'TRNW'
WEIGHT_VERSION = 1
_WEIGHT_HEADER = struct.Struct('<4sHH')
_LAYER_HEADER = struct.Struct('<B4H')
_CRC = struct.Struct('<I')

KIND_CODES = {
    'conv2d': 1,
    'maxpool': 2,
    'add': 3,
    'global_avg_pool': 4,
    'dense': 5,
    'relu': 6,
    'softmax': 7,
}

# Gradients : mêmes clés et mêmes formes que Network.parameters()
Gradients = Dict[str, np.ndarray]


@dataclass(frozen=True)
class LayerSpec:
    """Description d'un nœud du graphe"""
    name: str
    kind: str
    inputs: Tuple[str, ...]
    config: Dict[str, Any] = field(default_factory=dict)


class Layer:
    """Couche de base : pas de paramètres, une entrée"""
    kind = ''
    n_inputs = 1

    def params(self) -> Dict[str, np.ndarray]:
        return {}

    def config(self) -> Dict[str, Any]:
        return {}

    def output_shape(self, input_shapes: List[Tuple[int, ...]]) -> Tuple[int, ...]:
        return input_shapes[0]

    def forward(self, inputs: List[np.ndarray], **kwargs) -> Tuple[np.ndarray, Any]:
        raise NotImplementedError

    def backward(self, dout: np.ndarray, cache: Any) -> Tuple[List[np.ndarray], Dict[str, np.ndarray]]:
        raise NotImplementedError


class Conv2D(Layer):
    """Convolution 2D, pas de 1, remplissage 'valid' ou 'same'"""
    kind = 'conv2d'

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3, padding: str = 'valid'):
        if padding not in ('valid', 'same'):
            raise ConfigurationError(f"Remplissage inconnu: {padding}")
        if padding == 'same' and kernel_size % 2 == 0:
            raise ConfigurationError("Le remplissage 'same' exige un noyau impair")
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.kernel_size = kernel_size
        self.padding = padding
        self.pad = (kernel_size - 1) // 2 if padding == 'same' else 0
        self.weight = np.zeros((out_channels, in_channels, kernel_size, kernel_size))
        self.bias = np.zeros(out_channels)

    def params(self) -> Dict[str, np.ndarray]:
        return {'weight': self.weight, 'bias': self.bias}

    def config(self) -> Dict[str, Any]:
        return {
            'in_channels': self.in_channels,
            'out_channels': self.out_channels,
            'kernel': (self.kernel_size, self.kernel_size),
            'padding': self.padding,
            'stride': 1,
        }

    def output_shape(self, input_shapes):
        c, h, w = input_shapes[0]
        if c != self.in_channels:
            raise StructuralError(f"conv2d: {self.in_channels} canaux attendus, reçu {c}")
        k, p = self.kernel_size, self.pad
        ho, wo = h + 2 * p - k + 1, w + 2 * p - k + 1
        if ho < 1 or wo < 1:
            raise StructuralError(f"conv2d: entrée {h}×{w} trop petite pour un noyau {k}×{k}")
        return (self.out_channels, ho, wo)

    def _im2col(self, xp: np.ndarray) -> np.ndarray:
        k = self.kernel_size
        windows = sliding_window_view(xp, (k, k), axis=(2, 3))  # (N, C, Ho, Wo, k, k)
        n, c, ho, wo = windows.shape[:4]
        return windows.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * k * k)

    def forward(self, inputs, chunk_rows: Optional[int] = None, **kwargs):
        x = inputs[0]
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise StructuralError(f"conv2d: entrée de forme {x.shape} incompatible")
        if self.weight.shape != (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size):
            raise StructuralError(f"conv2d: poids de forme {self.weight.shape} incompatibles")
        p, k = self.pad, self.kernel_size
        xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x
        n = x.shape[0]
        ho, wo = xp.shape[2] - k + 1, xp.shape[3] - k + 1
        wmat = self.weight.reshape(self.out_channels, -1).astype(x.dtype, copy=False)
        bias = self.bias.astype(x.dtype, copy=False)

        if chunk_rows is None or chunk_rows >= ho:
            cols = self._im2col(xp)
            out = (cols @ wmat.T + bias).reshape(n, ho, wo, self.out_channels).transpose(0, 3, 1, 2)
            return np.ascontiguousarray(out), (x.shape, cols)

        # traitement par bandes de lignes de sortie : mémoire bornée à chunk_rows lignes
        out = np.empty((n, self.out_channels, ho, wo), dtype=x.dtype)
        for r0 in range(0, ho, chunk_rows):
            r1 = min(ho, r0 + chunk_rows)
            cols = self._im2col(xp[:, :, r0:r1 + k - 1, :])
            band = (cols @ wmat.T + bias).reshape(n, r1 - r0, wo, self.out_channels)
            out[:, :, r0:r1, :] = band.transpose(0, 3, 1, 2)
        return out, None

    def backward(self, dout, cache):
        if cache is None:
            raise StructuralError("conv2d: pas de cache (passe avant par morceaux)")
        x_shape, cols = cache
        n, _, ho, wo = dout.shape
        k, p = self.kernel_size, self.pad
        dmat = dout.transpose(0, 2, 3, 1).reshape(-1, self.out_channels)
        wmat = self.weight.reshape(self.out_channels, -1)
        d_weight = (dmat.T @ cols).reshape(self.weight.shape)
        d_bias = dmat.sum(axis=0)

        dcols = (dmat @ wmat).reshape(n, ho, wo, self.in_channels, k, k)
        dxp = np.zeros((n, self.in_channels, ho + k - 1, wo + k - 1), dtype=dout.dtype)
        for i in range(k):
            for j in range(k):
                dxp[:, :, i:i + ho, j:j + wo] += dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
        dx = dxp[:, :, p:p + x_shape[2], p:p + x_shape[3]] if p else dxp
        return [dx], {'weight': d_weight, 'bias': d_bias}


class MaxPool2D(Layer):
    """Max pooling, fenêtre = pas (3×3, pas de 3 par défaut), bords incomplets ignorés"""
    kind = 'maxpool'

    def __init__(self, size: int = 3, stride: int = 3):
        if stride != size:
            raise ConfigurationError("MaxPool2D: seul le cas pas = taille est supporté")
        self.size = size
        self.stride = stride

    def config(self):
        return {'size': self.size, 'stride': self.stride}

    def output_shape(self, input_shapes):
        c, h, w = input_shapes[0]
        ho, wo = (h - self.size) // self.stride + 1, (w - self.size) // self.stride + 1
        if ho < 1 or wo < 1:
            raise StructuralError(f"maxpool: entrée {h}×{w} trop petite")
        return (c, ho, wo)

    def forward(self, inputs, **kwargs):
        x = inputs[0]
        n, c, h, w = x.shape
        s = self.size
        ho, wo = (h - s) // s + 1, (w - s) // s + 1
        blocks = x[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
        flat = blocks.reshape(n, c, ho, wo, s * s)
        arg = flat.argmax(axis=-1)
        out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]
        return out, (x.shape, arg)

    def backward(self, dout, cache):
        x_shape, arg = cache
        n, c, ho, wo = dout.shape
        s = self.size
        mask = np.arange(s * s) == arg[..., None]
        routed = (mask * dout[..., None]).reshape(n, c, ho, wo, s, s).transpose(0, 1, 2, 4, 3, 5)
        dx = np.zeros(x_shape, dtype=dout.dtype)
        dx[:, :, :ho * s, :wo * s] = routed.reshape(n, c, ho * s, wo * s)
        return [dx], {}


class Add(Layer):
    """Connexion résiduelle : somme de deux tenseurs de même forme"""
    kind = 'add'
    n_inputs = 2

    def output_shape(self, input_shapes):
        left, right = input_shapes
        if tuple(left) != tuple(right):
            raise StructuralError(f"add: formes différentes {left} et {right}")
        return left

    def forward(self, inputs, **kwargs):
        left, right = inputs
        if left.shape != right.shape:
            raise StructuralError(f"add: formes différentes {left.shape} et {right.shape}")
        return left + right, None

    def backward(self, dout, cache):
        return [dout, dout], {}


class GlobalAvgPool(Layer):
    """Moyenne de chaque carte de caractéristiques"""
    kind = 'global_avg_pool'

    def output_shape(self, input_shapes):
        return (input_shapes[0][0],)

    def forward(self, inputs, **kwargs):
        x = inputs[0]
        return x.mean(axis=(2, 3)), x.shape

    def backward(self, dout, cache):
        n, c, h, w = cache
        dx = np.broadcast_to(dout[:, :, None, None] / (h * w), cache).copy()
        return [dx], {}


class Dense(Layer):
    kind = 'dense'

    def __init__(self, in_features: int, out_features: int):
        self.in_features = in_features
        self.out_features = out_features
        self.weight = np.zeros((out_features, in_features))
        self.bias = np.zeros(out_features)

    def params(self):
        return {'weight': self.weight, 'bias': self.bias}

    def config(self):
        return {'in': self.in_features, 'out': self.out_features}

    def output_shape(self, input_shapes):
        if tuple(input_shapes[0]) != (self.in_features,):
            raise StructuralError(f"dense: entrée ({self.in_features},) attendue, reçu {input_shapes[0]}")
        return (self.out_features,)

    def forward(self, inputs, **kwargs):
        x = inputs[0]
        if x.ndim != 2 or x.shape[1] != self.in_features:
            raise StructuralError(f"dense: entrée de forme {x.shape} incompatible")
        if self.weight.shape != (self.out_features, self.in_features):
            raise StructuralError(f"dense: poids de forme {self.weight.shape} incompatibles")
        out = x @ self.weight.T.astype(x.dtype, copy=False) + self.bias.astype(x.dtype, copy=False)
        return out, x

    def backward(self, dout, cache):
        x = cache
        return [dout @ self.weight], {'weight': dout.T @ x, 'bias': dout.sum(axis=0)}


class ReLU(Layer):
    kind = 'relu'

    def forward(self, inputs, **kwargs):
        x = inputs[0]
        mask = x > 0
        return np.where(mask, x, 0.0).astype(x.dtype, copy=False), mask

    def backward(self, dout, cache):
        return [dout * cache], {}


class Softmax(Layer):
    kind = 'softmax'

    def forward(self, inputs, **kwargs):
        z = inputs[0]
        shifted = z - z.max(axis=-1, keepdims=True)
        e = np.exp(shifted)
        p = e / e.sum(axis=-1, keepdims=True)
        return p, p

    def backward(self, dout, cache):
        p = cache
        return [p * (dout - (dout * p).sum(axis=-1, keepdims=True))], {}


@dataclass
class Node:
    name: str
    layer: Layer
    inputs: Tuple[str, ...]


class Network:
    """Graphe acyclique de couches nommées, entrée unique 'input'"""

    INPUT = 'input'

    def __init__(self, input_shape: Sequence[int] = INPUT_SHAPE):
        self.input_shape = tuple(input_shape)
        self.nodes: List[Node] = []
        self._shapes: Dict[str, Tuple[int, ...]] = {self.INPUT: self.input_shape}

    def add(self, name: str, layer: Layer, inputs: Union[str, Sequence[str]]) -> str:
        """
        Ajoute un nœud ; ses entrées doivent déjà exister, ce qui garantit l'acyclicité

        Returns:
            str: Nom du nœud, pour chaîner les appels
        """
        inputs = (inputs,) if isinstance(inputs, str) else tuple(inputs)
        if name in self._shapes:
            raise StructuralError(f"Nœud déjà défini: {name}")
        if len(inputs) != layer.n_inputs:
            raise StructuralError(f"{layer.kind} '{name}': {layer.n_inputs} entrée(s) attendue(s), reçu {len(inputs)}")
        for parent in inputs:
            if parent not in self._shapes:
                raise StructuralError(f"'{name}' dépend d'un nœud inconnu: {parent}")
        self._shapes[name] = layer.output_shape([self._shapes[parent] for parent in inputs])
        self.nodes.append(Node(name, layer, inputs))
        return name

    def shape_of(self, name: str) -> Tuple[int, ...]:
        return self._shapes[name]

    @property
    def output_name(self) -> str:
        return self.nodes[-1].name

    def layer_specs(self) -> List[LayerSpec]:
        return [LayerSpec(node.name, node.layer.kind, node.inputs, node.layer.config()) for node in self.nodes]

    def parameters(self) -> Dict[str, np.ndarray]:
        """Paramètres entraînables (références), dans l'ordre du graphe"""
        params = {}
        for node in self.nodes:
            for pname, value in node.layer.params().items():
                params[f"{node.name}.{pname}"] = value
        return params

    def parametric_nodes(self) -> List[Node]:
        return [node for node in self.nodes if node.layer.params()]

    def layer_parameter_counts(self) -> List[Tuple[str, int]]:
        return [
            (node.name, sum(p.size for p in node.layer.params().values()))
            for node in self.parametric_nodes()
        ]

    def parameter_count(self) -> int:
        return sum(count for _, count in self.layer_parameter_counts())

    def copy(self) -> 'Network':
        return copy.deepcopy(self)

    def initialize(self, seed: int = 0) -> 'Network':
        """Initialisation He-uniforme (échelle en fan-in), biais nuls"""
        rng = np.random.default_rng(seed)
        for node in self.parametric_nodes():
            layer = node.layer
            fan_in = int(np.prod(layer.weight.shape[1:]))
            limit = np.sqrt(6.0 / fan_in)
            layer.weight[...] = rng.uniform(-limit, limit, size=layer.weight.shape)
            layer.bias[...] = 0.0
        return self


def build_toy_resnet(seed: int = 0) -> Network:
    """
    Construit le toy_resnet : tronc de deux convolutions, max pooling, deux blocs
    résiduels, convolution finale, moyenne globale et tête dense à deux classes

    Args:
        seed: Graine de l'initialisation

    Returns:
        Network: Réseau initialisé (7 914 paramètres)
    """
    net = Network(INPUT_SHAPE)
    x = net.add('stem_conv1', Conv2D(3, 8), Network.INPUT)
    x = net.add('stem_conv1_relu', ReLU(), x)
    x = net.add('stem_conv2', Conv2D(8, 16), x)
    x = net.add('stem_conv2_relu', ReLU(), x)
    skip = net.add('stem_pool', MaxPool2D(3, 3), x)

    for block in ('block1', 'block2'):
        x = net.add(f'{block}_conv1', Conv2D(16, 8, padding='same'), skip)
        x = net.add(f'{block}_conv1_relu', ReLU(), x)
        x = net.add(f'{block}_conv2', Conv2D(8, 16, padding='same'), x)
        x = net.add(f'{block}_conv2_relu', ReLU(), x)
        skip = net.add(f'{block}_add', Add(), (x, skip))

    x = net.add('head_conv', Conv2D(16, 8), skip)
    x = net.add('head_conv_relu', ReLU(), x)
    x = net.add('gap', GlobalAvgPool(), x)
    x = net.add('dense1', Dense(8, 64), x)
    x = net.add('dense1_relu', ReLU(), x)
    x = net.add('dense2', Dense(64, N_CLASSES), x)
    net.add('softmax', Softmax(), x)

    total = net.parameter_count()
    if total != TOY_RESNET_PARAMS:
        raise StructuralError(f"toy_resnet: {total} paramètres au lieu de {TOY_RESNET_PARAMS}")
    net.initialize(seed)
    logger.debug(f"toy_resnet construit: {total} paramètres, graine {seed}")
    return net


def _as_batch(net: Network, images) -> np.ndarray:
    if isinstance(images, FeatureImage):
        x = images.channels[None]
    elif isinstance(images, (list, tuple)) and images and isinstance(images[0], FeatureImage):
        x = np.stack([image.channels for image in images])
    else:
        x = np.asarray(images, dtype=np.float64)
        if x.ndim == len(net.input_shape):
            x = x[None]
    if x.shape[1:] != net.input_shape:
        raise StructuralError(f"Entrée de forme {x.shape[1:]} incompatible avec {net.input_shape}")
    return x


def trace_activations(net: Network, images, dtype=np.float64, chunk_rows: Optional[int] = None,
                      keep_cache: bool = False) -> Tuple[Dict[str, np.ndarray], Dict[str, Any]]:
    """
    Passe avant complète, en conservant la sortie de chaque nœud

    Returns:
        tuple: (activations par nœud, caches pour la rétropropagation)
    """
    x = _as_batch(net, images).astype(dtype, copy=False)
    activations = {Network.INPUT: x}
    caches = {}
    for node in net.nodes:
        out, cache = node.layer.forward([activations[parent] for parent in node.inputs], chunk_rows=chunk_rows)
        activations[node.name] = out
        if keep_cache:
            caches[node.name] = cache
    return activations, caches


def _logits_node(net: Network) -> str:
    last = net.nodes[-1]
    if last.layer.kind != 'softmax':
        raise StructuralError("Le dernier nœud du réseau doit être un softmax")
    return last.inputs[0]


def predict_batch(net: Network, images, dtype=np.float64,
                  chunk_rows: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Logits et probabilités pour un lot d'images

    Returns:
        tuple: (logits N×2, probabilités N×2)
    """
    activations, _ = trace_activations(net, images, dtype=dtype, chunk_rows=chunk_rows)
    logits = activations[_logits_node(net)]
    probs = activations[net.output_name]
    if not (np.all(np.isfinite(logits)) and np.all(np.isfinite(probs))):
        raise DataError("Valeurs non finies en sortie du réseau")
    return logits, probs


def forward(net: Network, image, dtype=np.float64,
            chunk_rows: Optional[int] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Classe une image

    Args:
        net: Réseau
        image: FeatureImage ou tableau 3×32×32
        dtype: np.float64 (entraînement) ou np.float32 (inférence embarquée)
        chunk_rows: Hauteur des bandes de calcul des convolutions (None = d'un bloc)

    Returns:
        tuple: (logits, probabilités), deux valeurs chacun
    """
    logits, probs = predict_batch(net, image, dtype=dtype, chunk_rows=chunk_rows)
    if logits.shape[0] != 1:
        raise StructuralError("forward attend une seule image")
    return logits[0], probs[0]


def backward_batch(net: Network, images, labels) -> Tuple[float, Gradients]:
    """
    Perte d'entropie croisée moyenne et gradients sur un lot

    Returns:
        tuple: (perte, gradients par paramètre)
    """
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    activations, caches = trace_activations(net, images, dtype=np.float64, keep_cache=True)
    n = activations[Network.INPUT].shape[0]
    if labels.shape[0] != n:
        raise StructuralError(f"{n} images mais {labels.shape[0]} étiquettes")
    if np.any((labels < 0) | (labels >= N_CLASSES)):
        raise DataError("Étiquettes hors de {0, 1}")

    logits_name = _logits_node(net)
    logits = activations[logits_name]
    shifted = logits - logits.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    loss = float(-log_probs[np.arange(n), labels].mean())
    if not np.isfinite(loss):
        raise DataError("Perte non finie")

    one_hot = np.zeros_like(logits)
    one_hot[np.arange(n), labels] = 1.0
    upstream = {logits_name: (np.exp(log_probs) - one_hot) / n}

    grads: Gradients = {}
    for node in reversed(net.nodes[:-1]):
        dout = upstream.pop(node.name, None)
        if dout is None:
            continue
        d_inputs, d_params = node.layer.backward(dout, caches[node.name])
        for pname, g in d_params.items():
            grads[f"{node.name}.{pname}"] = g
        for parent, g in zip(node.inputs, d_inputs):
            if parent == Network.INPUT:
                continue
            upstream[parent] = upstream[parent] + g if parent in upstream else g

    ordered = {}
    for key, value in net.parameters().items():
        ordered[key] = grads.get(key, np.zeros_like(value))
    return loss, ordered


def backward(net: Network, image, label: int) -> Tuple[float, Gradients]:
    """Perte −log p[label] et gradients pour une image"""
    return backward_batch(net, image, [label])


@dataclass
class AdamState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def sgd_adam_step(net: Network, grads: Gradients, state: AdamState, lr: float) -> Tuple[Network, AdamState]:
    """
    Mise à jour Adam, appliquée en place

    Returns:
        tuple: (réseau, état de l'optimiseur)
    """
    state.step += 1
    t = state.step
    correction1 = 1.0 - state.beta1 ** t
    correction2 = 1.0 - state.beta2 ** t
    for key, param in net.parameters().items():
        g = grads.get(key)
        if g is None:
            continue
        if g.shape != param.shape:
            raise StructuralError(f"Gradient {key}: forme {g.shape} au lieu de {param.shape}")
        m = state.m.setdefault(key, np.zeros_like(param))
        v = state.v.setdefault(key, np.zeros_like(param))
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        param -= lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)
    return net, state


def parameters_equal(left: Network, right: Network) -> bool:
    """Égalité exacte paramètre par paramètre"""
    a, b = left.parameters(), right.parameters()
    return a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def _layer_dims(layer: Layer) -> Tuple[int, int, int, int]:
    if layer.kind == 'conv2d':
        return tuple(layer.weight.shape)
    return (layer.weight.shape[0], layer.weight.shape[1], 1, 1)


def save_weights(net: Network) -> bytes:
    """
    Sérialise les paramètres : en-tête TRNW, une entrée par couche paramétrée
    (type, 4 dimensions, poids puis biais en float32 LE), CRC-32 final

    Returns:
        bytes: Blob de poids
    """
    nodes = net.parametric_nodes()
    chunks = [_WEIGHT_HEADER.pack(WEIGHT_MAGIC, WEIGHT_VERSION, len(nodes))]
    for node in nodes:
        layer = node.layer
        chunks.append(_LAYER_HEADER.pack(KIND_CODES[layer.kind], *_layer_dims(layer)))
        chunks.append(layer.weight.astype('<f4').tobytes())
        chunks.append(layer.bias.astype('<f4').tobytes())
    body = b''.join(chunks)
    return body + _CRC.pack(zlib.crc32(body) & 0xFFFFFFFF)


def weight_blob_size(net: Network) -> int:
    """Taille attendue du blob : en-têtes + 4 octets par paramètre + CRC"""
    n_layers = len(net.parametric_nodes())
    return _WEIGHT_HEADER.size + n_layers * _LAYER_HEADER.size + 4 * net.parameter_count() + _CRC.size


def load_weights(blob: bytes, template: Optional[Network] = None) -> Network:
    """
    Recharge un blob de poids dans un réseau de même architecture

    Args:
        blob: Contenu produit par save_weights
        template: Réseau de référence (toy_resnet par défaut)

    Returns:
        Network: Nouveau réseau portant les paramètres chargés
    """
    blob = bytes(blob)
    if len(blob) < _WEIGHT_HEADER.size + _CRC.size:
        raise TruncatedError(f"Blob de poids tronqué ({len(blob)} octets)")
    magic, version, n_layers = _WEIGHT_HEADER.unpack_from(blob, 0)
    if magic != WEIGHT_MAGIC:
        raise BadMagicError(f"Signature inattendue: {magic!r}")
    if version != WEIGHT_VERSION:
        raise VersionError(f"Version {version} non supportée (attendue {WEIGHT_VERSION})")

    net = (template or build_toy_resnet()).copy()
    end = len(blob) - _CRC.size
    (stored_crc,) = _CRC.unpack_from(blob, end)
    if zlib.crc32(blob[:end]) & 0xFFFFFFFF != stored_crc:
        if len(blob) < weight_blob_size(net):
            raise TruncatedError(f"Blob de poids tronqué ({len(blob)} octets, {weight_blob_size(net)} attendus)")
        raise ChecksumError("CRC-32 du blob de poids invalide")

    offset = _WEIGHT_HEADER.size
    entries = []
    for index in range(n_layers):
        if offset + _LAYER_HEADER.size > end:
            raise TruncatedError(f"En-tête de la couche {index} tronqué")
        kind, *dims = _LAYER_HEADER.unpack_from(blob, offset)
        offset += _LAYER_HEADER.size
        n_weights = int(np.prod(dims))
        n_values = n_weights + dims[0]
        if offset + 4 * n_values > end:
            raise TruncatedError(f"Données de la couche {index} tronquées")
        values = np.frombuffer(blob, dtype='<f4', count=n_values, offset=offset)
        offset += 4 * n_values
        entries.append((kind, tuple(dims), values[:n_weights], values[n_weights:]))
    if offset != end:
        raise TruncatedError(f"{end - offset} octets inattendus avant le CRC")

    nodes = net.parametric_nodes()
    if len(nodes) != len(entries):
        raise ShapeMismatchError(f"{len(entries)} couches dans le blob, {len(nodes)} attendues")
    total = 0
    for node, (kind, dims, weights, biases) in zip(nodes, entries):
        layer = node.layer
        if kind != KIND_CODES[layer.kind] or dims != _layer_dims(layer):
            raise ShapeMismatchError(f"{node.name}: type {kind} dimensions {dims}, attendu {_layer_dims(layer)}")
        layer.weight[...] = weights.astype(np.float64).reshape(layer.weight.shape)
        layer.bias[...] = biases.astype(np.float64)
        total += weights.size + biases.size
    if total != net.parameter_count():
        raise ShapeMismatchError(f"{total} paramètres chargés, {net.parameter_count()} attendus")
    if not all(np.all(np.isfinite(p)) for p in net.parameters().values()):
        raise DataError("Paramètres non finis dans le blob de poids")
    logger.debug(f"Poids chargés: {total} paramètres")
    return net
