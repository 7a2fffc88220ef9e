import numpy as np
import pytest

from services.errors import (
    BadMagicError,
    ChecksumError,
    ShapeMismatchError,
    StructuralError,
    TruncatedError,
    VersionError,
)
from services.tensornet import (
    TOY_RESNET_PARAMS,
    AdamState,
    Add,
    Conv2D,
    Dense,
    GlobalAvgPool,
    MaxPool2D,
    Network,
    ReLU,
    Softmax,
    backward,
    backward_batch,
    build_toy_resnet,
    forward,
    load_weights,
    parameters_equal,
    predict_batch,
    save_weights,
    sgd_adam_step,
    trace_activations,
    weight_blob_size,
)
from services.transform import FeatureImage

H = 1e-5


def _assert_gradients_close(analytic, numeric):
    analytic, numeric = np.asarray(analytic), np.asarray(numeric)
    small = np.maximum(np.abs(analytic), np.abs(numeric)) < 1e-3
    diff = np.abs(analytic - numeric)
    assert np.all(diff[small] <= 1e-8)
    scale = np.maximum(np.abs(analytic), np.abs(numeric))
    assert np.all(diff[~small] <= 1e-5 * scale[~small])


def _numeric_gradient(f, array):
    grad = np.zeros_like(array)
    it = np.nditer(array, flags=['multi_index'])
    for _ in it:
        idx = it.multi_index
        saved = array[idx]
        array[idx] = saved + H
        plus = f()
        array[idx] = saved - H
        minus = f()
        array[idx] = saved
        grad[idx] = (plus - minus) / (2 * H)
    return grad


def _check_layer(layer, inputs, seed=0):
    """Perte L = Σ sortie·R pour un R aléatoire ; compare entrées et paramètres"""
    out, _ = layer.forward(inputs)
    weights = np.random.default_rng(seed).normal(size=out.shape)

    def loss():
        return float((layer.forward(inputs)[0] * weights).sum())

    _, cache = layer.forward(inputs)
    d_inputs, d_params = layer.backward(weights, cache)
    for x, dx in zip(inputs, d_inputs):
        _assert_gradients_close(dx, _numeric_gradient(loss, x))
    for name, value in layer.params().items():
        _assert_gradients_close(d_params[name], _numeric_gradient(loss, value))


def _random_layer_params(layer, rng):
    for value in layer.params().values():
        value[...] = rng.normal(size=value.shape)


def test_toy_resnet_parameter_accounting():
    net = build_toy_resnet()
    assert net.parameter_count() == TOY_RESNET_PARAMS == 7914
    counts = [count for _, count in net.layer_parameter_counts()]
    assert counts == [224, 1168, 1160, 1168, 1160, 1168, 1160, 576, 130]


def test_toy_resnet_graph():
    net = build_toy_resnet()
    kinds = [spec.kind for spec in net.layer_specs()]
    assert kinds.count('conv2d') == 7
    assert kinds.count('add') == 2
    assert kinds[-1] == 'softmax'
    assert net.shape_of('stem_pool') == (16, 9, 9)
    assert net.shape_of('block2_add') == (16, 9, 9)
    assert net.shape_of('head_conv') == (8, 7, 7)
    for spec in net.layer_specs():
        if spec.kind == 'add':
            assert len(spec.inputs) == 2


def test_unknown_parent_is_rejected():
    net = Network((3, 8, 8))
    with pytest.raises(StructuralError):
        net.add('relu', ReLU(), 'missing')
    net.add('a', ReLU(), Network.INPUT)
    with pytest.raises(StructuralError):
        net.add('a', ReLU(), Network.INPUT)


def test_add_requires_identical_shapes():
    net = Network((3, 8, 8))
    left = net.add('left', Conv2D(3, 4), Network.INPUT)
    with pytest.raises(StructuralError):
        net.add('add', Add(), (left, Network.INPUT))


def test_single_conv_sums_ones():
    conv = Conv2D(1, 1, kernel_size=2)
    conv.weight[...] = 1.0
    out, _ = conv.forward([np.ones((1, 1, 2, 2))])
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 4.0


def test_softmax_symmetry_and_probability_vector():
    probs, _ = Softmax().forward([np.zeros((1, 2))])
    assert probs.tolist() == [[0.5, 0.5]]
    net = build_toy_resnet(seed=3)
    rng = np.random.default_rng(0)
    _, probs = predict_batch(net, rng.uniform(0, 1, size=(8, 3, 32, 32)))
    assert np.all((probs > 0) & (probs < 1))
    np.testing.assert_allclose(probs.sum(axis=1), 1.0, atol=1e-12)


def test_forward_is_deterministic_and_accepts_feature_image():
    net = build_toy_resnet(seed=1)
    image = FeatureImage(np.random.default_rng(1).uniform(0, 1, size=(3, 32, 32)))
    logits, probs = forward(net, image)
    again_logits, again_probs = forward(net, image.channels)
    assert logits.shape == probs.shape == (2,)
    assert np.array_equal(logits, again_logits) and np.array_equal(probs, again_probs)


def test_forward_rejects_wrong_shape():
    with pytest.raises(StructuralError):
        forward(build_toy_resnet(), np.zeros((3, 16, 16)))


def test_chunked_inference_matches_single_block():
    net = build_toy_resnet(seed=2)
    x = np.random.default_rng(2).uniform(0, 1, size=(3, 3, 32, 32))
    full = predict_batch(net, x)[0]
    for rows in (1, 4, 7):
        np.testing.assert_allclose(predict_batch(net, x, chunk_rows=rows)[0], full, rtol=0, atol=1e-12)


def test_float32_inference_close_to_float64():
    net = build_toy_resnet(seed=4)
    x = np.random.default_rng(4).uniform(0, 1, size=(16, 3, 32, 32))
    logits64 = predict_batch(net, x)[0]
    logits32 = predict_batch(net, x, dtype=np.float32)[0]
    assert np.abs(logits32 - logits64).max() <= 1e-4


def _zero_residual_branches(net):
    for block in ('block1', 'block2'):
        for name in (f'{block}_conv1', f'{block}_conv2'):
            layer = next(node.layer for node in net.nodes if node.name == name)
            layer.weight[...] = 0.0
            layer.bias[...] = 0.0


def _skip_only_network(source):
    """Même réseau sans les branches résiduelles"""
    net = Network((3, 32, 32))
    keep = {}
    for node in source.nodes:
        keep[node.name] = node.layer
    x = net.add('stem_conv1', keep['stem_conv1'], Network.INPUT)
    x = net.add('stem_conv1_relu', ReLU(), x)
    x = net.add('stem_conv2', keep['stem_conv2'], x)
    x = net.add('stem_conv2_relu', ReLU(), x)
    x = net.add('stem_pool', MaxPool2D(3, 3), x)
    x = net.add('head_conv', keep['head_conv'], x)
    x = net.add('head_conv_relu', ReLU(), x)
    x = net.add('gap', GlobalAvgPool(), x)
    x = net.add('dense1', keep['dense1'], x)
    x = net.add('dense1_relu', ReLU(), x)
    x = net.add('dense2', keep['dense2'], x)
    net.add('softmax', Softmax(), x)
    return net


def test_zero_residual_branch_is_identity():
    net = build_toy_resnet(seed=5)
    _zero_residual_branches(net)
    x = np.random.default_rng(5).uniform(0, 1, size=(2, 3, 32, 32))
    activations, _ = trace_activations(net, x)
    assert np.array_equal(activations['block1_add'], activations['stem_pool'])
    assert np.array_equal(activations['block2_add'], activations['stem_pool'])


def test_zero_residual_branch_matches_skip_only_network():
    net = build_toy_resnet(seed=6)
    _zero_residual_branches(net)
    skip_only = _skip_only_network(net)
    image = np.random.default_rng(6).uniform(0, 1, size=(3, 32, 32))
    loss, grads = backward(net, image, 1)
    skip_loss, skip_grads = backward(skip_only, image, 1)
    assert loss == pytest.approx(skip_loss, rel=1e-12)
    for name in ('stem_conv1.weight', 'stem_conv2.weight', 'head_conv.weight', 'dense2.weight'):
        assert np.any(grads[name] != 0.0)


def test_perfect_prediction_has_near_zero_loss():
    net = build_toy_resnet(seed=7)
    dense2 = next(node.layer for node in net.nodes if node.name == 'dense2')
    dense2.weight[...] = 0.0
    dense2.bias[...] = [-30.0, 30.0]
    loss, _ = backward(net, np.random.default_rng(7).uniform(0, 1, size=(3, 32, 32)), 1)
    assert loss < 1e-12


def test_gradients_mirror_parameters():
    net = build_toy_resnet(seed=8)
    x = np.random.default_rng(8).uniform(0, 1, size=(4, 3, 32, 32))
    loss, grads = backward_batch(net, x, [0, 1, 1, 0])
    params = net.parameters()
    assert grads.keys() == params.keys()
    for key in params:
        assert grads[key].shape == params[key].shape
        assert np.all(np.isfinite(grads[key]))
    assert np.isfinite(loss)


@pytest.mark.parametrize('padding', ['valid', 'same'])
def test_conv_gradient(padding):
    rng = np.random.default_rng(10)
    layer = Conv2D(2, 3, padding=padding)
    _random_layer_params(layer, rng)
    _check_layer(layer, [rng.normal(size=(2, 2, 5, 5))])


def test_dense_gradient():
    rng = np.random.default_rng(11)
    layer = Dense(4, 3)
    _random_layer_params(layer, rng)
    _check_layer(layer, [rng.normal(size=(3, 4))])


def test_maxpool_gradient():
    rng = np.random.default_rng(12)
    # valeurs distinctes et bien séparées dans chaque bloc
    x = rng.permutation(2 * 2 * 7 * 7).reshape(2, 2, 7, 7).astype(float) * 0.1
    _check_layer(MaxPool2D(3, 3), [x])


def test_relu_gradient():
    rng = np.random.default_rng(13)
    x = rng.uniform(0.1, 1.0, size=(2, 3, 4, 4)) * rng.choice([-1.0, 1.0], size=(2, 3, 4, 4))
    _check_layer(ReLU(), [x])


def test_add_gradient_flows_through_both_inputs():
    rng = np.random.default_rng(14)
    _check_layer(Add(), [rng.normal(size=(2, 3, 4, 4)), rng.normal(size=(2, 3, 4, 4))])


def test_global_avg_pool_gradient():
    rng = np.random.default_rng(15)
    _check_layer(GlobalAvgPool(), [rng.normal(size=(2, 3, 4, 5))])


def test_softmax_gradient():
    rng = np.random.default_rng(16)
    _check_layer(Softmax(), [rng.normal(size=(3, 2))])


def test_reduced_network_gradient_check(reduced_case):
    net, x, labels = reduced_case

    def loss():
        return backward_batch(net, x, labels)[0]

    _, grads = backward_batch(net, x, labels)
    for key, value in net.parameters().items():
        _assert_gradients_close(grads[key], _numeric_gradient(loss, value))


def test_adam_zero_gradient_leaves_parameters():
    net = build_toy_resnet(seed=9)
    before = net.copy()
    grads = {k: np.zeros_like(v) for k, v in net.parameters().items()}
    sgd_adam_step(net, grads, AdamState(), 1e-3)
    assert parameters_equal(net, before)


def test_adam_constant_positive_gradient_decreases_scalar():
    net = Network((1,))
    net.add('dense', Dense(1, 1), Network.INPUT)
    layer = net.nodes[0].layer
    layer.weight[...] = 0.5
    state = AdamState()
    values = []
    for _ in range(50):
        sgd_adam_step(net, {'dense.weight': np.full((1, 1), 0.3), 'dense.bias': np.zeros(1)}, state, 1e-2)
        values.append(float(layer.weight[0, 0]))
    assert all(b < a for a, b in zip(values, values[1:]))


def test_adam_is_deterministic():
    first, second = build_toy_resnet(seed=10), build_toy_resnet(seed=10)
    x = np.random.default_rng(10).uniform(0, 1, size=(4, 3, 32, 32))
    _, grads = backward_batch(first, x, [1, 0, 1, 0])
    state1, state2 = AdamState(), AdamState()
    for _ in range(3):
        sgd_adam_step(first, grads, state1, 1e-3)
        sgd_adam_step(second, grads, state2, 1e-3)
    assert parameters_equal(first, second)


def _as_float32(net):
    copy = net.copy()
    for value in copy.parameters().values():
        value[...] = value.astype(np.float32)
    return copy


def test_weight_round_trip():
    net = build_toy_resnet(seed=12)
    blob = save_weights(net)
    assert len(blob) == weight_blob_size(net) == 8 + 9 * 9 + 7914 * 4 + 4
    assert parameters_equal(load_weights(blob), _as_float32(net))


def test_flipped_payload_byte_is_a_checksum_error():
    blob = bytearray(save_weights(build_toy_resnet()))
    blob[100] ^= 0x01
    with pytest.raises(ChecksumError):
        load_weights(bytes(blob))


@pytest.mark.parametrize('position', [6, 8, 10])
def test_flipped_header_byte_is_a_checksum_error(position):
    blob = bytearray(save_weights(build_toy_resnet()))
    blob[position] ^= 0x01
    with pytest.raises(ChecksumError):
        load_weights(bytes(blob))


def test_weight_load_errors_are_distinct():
    blob = save_weights(build_toy_resnet())
    with pytest.raises(BadMagicError):
        load_weights(b'XXXX' + blob[4:])
    with pytest.raises(VersionError):
        load_weights(blob[:4] + b'\x02\x00' + blob[6:])
    with pytest.raises(TruncatedError):
        load_weights(blob[:-200])
    with pytest.raises(TruncatedError):
        load_weights(blob[:5])


def test_weight_shape_mismatch():
    small = Network((3, 32, 32))
    small.add('conv', Conv2D(3, 4), Network.INPUT)
    small.add('gap', GlobalAvgPool(), 'conv')
    small.add('dense', Dense(4, 2), 'gap')
    small.add('softmax', Softmax(), 'dense')
    small.initialize(0)
    with pytest.raises(ShapeMismatchError):
        load_weights(save_weights(small))
    assert parameters_equal(load_weights(save_weights(small), template=small), _as_float32(small))
