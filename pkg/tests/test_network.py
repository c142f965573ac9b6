import dataclasses
import json

import numpy as np
import pytest

from defnet.gradcheck import check_gradients, tie_free
from defnet.layers import LossKind, loss_forward_backward
from defnet.network import (
    DefBranchConfig,
    ModelFormatError,
    ModelVersionError,
    NetworkConfig,
    StagedNetwork,
    build_network,
    load_model,
    model_from_doc,
    model_to_doc,
    save_model,
)

SMALL = NetworkConfig(
    input_shape=(3, 16, 16),
    trunk_channels=(4, 8),
    fc_width=12,
    num_classes=3,
    def_branch=DefBranchConfig(filter_sizes=(3, 5), channels=4),
    num_stages=2,
    stage_hidden=6,
)


def test_initialize_is_deterministic():
    a = build_network(SMALL, seed=5)
    b = build_network(SMALL, seed=5)
    for name in a.params:
        np.testing.assert_array_equal(a.params[name], b.params[name])
    c = build_network(SMALL, seed=6)
    assert any(not np.array_equal(a.params[n], c.params[n]) for n in a.params)


def test_stage_params_start_zero():
    net = build_network(SMALL, seed=0)
    for name, arr in net.params.items():
        if name.startswith("stage"):
            assert not arr.any(), name


def test_deformation_coefficients_start_zero():
    net = build_network(SMALL, seed=0)
    for name, arr in net.params.items():
        if name.endswith("pool.coeff"):
            assert not arr.any(), name


def test_forward_output_shape_and_determinism():
    net = build_network(SMALL, seed=1)
    rng = np.random.default_rng(2)
    image = rng.uniform(0, 1, SMALL.input_shape)
    s1, _ = net.forward(image)
    s2, _ = net.forward(image)
    assert s1.shape == (3,)
    np.testing.assert_array_equal(s1, s2)


def test_branch_disabled_equals_enabled_at_init():
    """With fresh coefficients at zero and a zero-shielded classifier
    block, switching the deformation branch on must not move the output."""
    cfg_on = SMALL
    cfg_off = dataclasses.replace(
        SMALL, def_branch=dataclasses.replace(SMALL.def_branch, enabled=False))
    on = build_network(cfg_on, seed=3)
    off = build_network(cfg_off, seed=3)
    rng = np.random.default_rng(4)
    for _ in range(5):
        image = rng.uniform(0, 1, SMALL.input_shape)
        np.testing.assert_array_equal(on.forward(image)[0], off.forward(image)[0])


def test_full_model_gradients():
    net = build_network(SMALL, seed=7)
    # Wake up the branch and stages so their gradients are exercised.
    rng = np.random.default_rng(8)
    for name, arr in net.params.items():
        if name.endswith("pool.coeff"):
            arr[...] = rng.uniform(0.1, 0.5, arr.shape)
        if name.startswith("stage"):
            arr[...] = 0.1 * rng.standard_normal(arr.shape)
    image = np.clip(tie_free(rng, SMALL.input_shape, scale=0.5) + 0.5, 0.0, 1.0)

    def loss_of():
        scores, cache = net.forward(image)
        loss, ds = loss_forward_backward(scores, 1, LossKind.softmax())
        return loss, cache, ds

    loss, cache, ds = loss_of()
    grads = net.backward(cache, ds)
    checked = 0
    for name in ("trunk.conv0.weights", "trunk.fc7.bias", "head.weights",
                 "part.f3.conv.weights", "part.f3.pool.coeff",
                 "stage1.fc6.weights", "stage2.out.weights"):
        arr = net.params[name]
        saved = arr.copy()

        def f(v, _arr=arr, _saved=saved):
            _arr[...] = v
            try:
                return loss_of()[0]
            finally:
                _arr[...] = _saved

        report = check_gradients(f, saved, grads[name], rel_tol=2e-4)
        assert report.passed, f"{name}: {report}"
        checked += 1
    assert checked == 7


def test_save_load_roundtrip_bitwise(tmp_path):
    net = build_network(SMALL, seed=9)
    p = tmp_path / "model.json"
    save_model(net, p)
    back = load_model(p)
    assert back.config.to_dict() == net.config.to_dict()
    for name in net.params:
        np.testing.assert_array_equal(back.params[name], net.params[name])
    rng = np.random.default_rng(10)
    image = rng.uniform(0, 1, SMALL.input_shape)
    np.testing.assert_array_equal(net.forward(image)[0], back.forward(image)[0])


def test_save_is_byte_stable(tmp_path):
    net = build_network(SMALL, seed=11)
    a, b = tmp_path / "a.json", tmp_path / "b.json"
    save_model(net, a)
    save_model(net, b)
    assert a.read_bytes() == b.read_bytes()


def test_load_rejects_missing_tensor(tmp_path):
    net = build_network(SMALL, seed=0)
    doc = model_to_doc(net)
    del doc["tensors"]["head.weights"]
    p = tmp_path / "broken.json"
    p.write_text(json.dumps(doc))
    with pytest.raises(ModelFormatError):
        load_model(p)


def test_load_rejects_extra_tensor():
    net = build_network(SMALL, seed=0)
    doc = model_to_doc(net)
    doc["tensors"]["mystery.weights"] = doc["tensors"]["head.bias"]
    with pytest.raises(ModelFormatError):
        model_from_doc(doc)


def test_load_rejects_wrong_shape():
    net = build_network(SMALL, seed=0)
    doc = model_to_doc(net)
    doc["tensors"]["head.bias"] = "shape: 2 ; data: 1 2"
    with pytest.raises(ModelFormatError):
        model_from_doc(doc)


def test_load_rejects_future_version():
    net = build_network(SMALL, seed=0)
    doc = model_to_doc(net)
    doc["version"] = 99
    with pytest.raises(ModelVersionError):
        model_from_doc(doc)


def test_geometry_rejects_empty_pool_outputs():
    from defnet.network import NetworkGeometryError
    with pytest.raises(NetworkGeometryError):
        StagedNetwork(NetworkConfig(input_shape=(3, 1, 8),
                                    trunk_channels=(4,), fc_width=8))
    with pytest.raises(NetworkGeometryError):
        StagedNetwork(NetworkConfig(
            input_shape=(3, 8, 8), trunk_channels=(4,), fc_width=8,
            def_branch=DefBranchConfig(pool_stride=(16, 16), channels=2)))


def test_meta_survives_roundtrip(tmp_path):
    net = build_network(SMALL, seed=12)
    net.meta = {"seed": 12, "schedule": "plain"}
    p = tmp_path / "m.json"
    save_model(net, p)
    assert load_model(p).meta == net.meta
