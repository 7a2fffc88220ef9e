import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.abspath(os.path.join(os.path.dirname(__file__), '..')))

from services.dataset import build_from_traces, split  # noqa: E402
from services.signal_sim import FaultSpec, MotorProfile, simulate_campaign, simulate_trace  # noqa: E402
from services.tensornet import (  # noqa: E402
    Add,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2D,
    Network,
    ReLU,
    Softmax,
    build_toy_resnet,
    trace_activations,
)
from services.trainer import TrainConfig, train  # noqa: E402

REDUCED_INPUT = (2, 6, 6)
KINK_MARGIN = 1e-3


def build_reduced_net(seed: int = 0) -> Network:
    """Réseau miniature reprenant chaque type de couche du toy_resnet"""
    net = Network(REDUCED_INPUT)
    x = net.add('conv', Conv2D(2, 3), Network.INPUT)           # 3×4×4
    x = net.add('conv_relu', ReLU(), x)
    skip = net.add('pool', MaxPool2D(2, 2), x)                  # 3×2×2
    x = net.add('res_conv', Conv2D(3, 3, padding='same'), skip)
    x = net.add('res_relu', ReLU(), x)
    x = net.add('res_add', Add(), (x, skip))
    x = net.add('gap', GlobalAvgPool(), x)
    x = net.add('dense1', Dense(3, 4), x)
    x = net.add('dense1_relu', ReLU(), x)
    x = net.add('dense2', Dense(4, 2), x)
    net.add('softmax', Softmax(), x)
    net.initialize(seed)
    rng = np.random.default_rng(seed + 1000)
    for node in net.parametric_nodes():
        node.layer.bias[...] = rng.uniform(-0.3, 0.3, size=node.layer.bias.shape)
    return net


def kink_margin(net: Network, x: np.ndarray) -> float:
    """Plus petite distance à un point non dérivable (entrée de ReLU nulle, ex aequo de max pooling)"""
    activations, _ = trace_activations(net, x)
    margin = np.inf
    for node in net.nodes:
        value = activations[node.inputs[0]]
        if node.layer.kind == 'relu':
            margin = min(margin, float(np.abs(value).min()))
        elif node.layer.kind == 'maxpool':
            s = node.layer.size
            n, c, h, w = value.shape
            ho, wo = h // s, w // s
            blocks = value[:, :, :ho * s, :wo * s].reshape(n, c, ho, s, wo, s).transpose(0, 1, 2, 4, 3, 5)
            ordered = np.sort(blocks.reshape(n, c, ho, wo, s * s), axis=-1)
            margin = min(margin, float((ordered[..., -1] - ordered[..., -2]).min()))
    return margin


@pytest.fixture
def reduced_case():
    """Réseau réduit, entrée et étiquettes loin de tout point anguleux"""
    for seed in range(200):
        net = build_reduced_net(seed)
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.0, 1.0, size=(2,) + REDUCED_INPUT)
        if kink_margin(net, x) > KINK_MARGIN:
            return net, x, np.array([0, 1])
    pytest.fail("aucune graine sans point anguleux")


@pytest.fixture
def profile():
    return MotorProfile()


@pytest.fixture
def healthy_trace(profile):
    return simulate_trace(profile, 6.0, seed=3, trace_id='healthy')


@pytest.fixture
def faulty_trace(profile):
    return simulate_trace(profile, 6.0, FaultSpec(onset_time=2.5), seed=4, trace_id='faulty')


@pytest.fixture(scope='session')
def desk_split():
    """1 800 images (50 traces de 10 s) partagées 1 500 / 200 / 100"""
    traces = simulate_campaign(MotorProfile(), 50, duration=10.0, seed=2024)
    images = build_from_traces(traces, hop=256)
    return split(images, seed=7)


@pytest.fixture(scope='session')
def trained_model(desk_split):
    """toy_resnet entraîné à l'échelle du poste de travail"""
    net, report = train(build_toy_resnet(seed=11), desk_split, TrainConfig(seed=11))
    return net, report


@pytest.fixture
def untrained_net():
    return build_toy_resnet(seed=0)
