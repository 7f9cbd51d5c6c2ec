import numpy as np
import pytest

from triad.autodiff import Tensor
from triad.layers import (BackboneSpec, DegenerateEmbeddingError,
                          ParameterSet, ShapeError, backbone_forward,
                          classifier_forward, init_path_params,
                          projection_forward)

CONV_SPEC = BackboneSpec(mode="conv", input_size=16, in_channels=1,
                         channels=(4, 6), kernel=3, stride=2, embed_dim=5)
VEC_SPEC = BackboneSpec(mode="vector", vector_dim=12, hidden=9,
                        vector_feature_dim=7, embed_dim=5)


def naive_conv(x, w, b, stride, pad):
    xb, cin, h, wdt = x.shape
    cout = w.shape[0]
    k = w.shape[2]
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - k) // stride + 1
    ow = (wdt + 2 * pad - k) // stride + 1
    out = np.zeros((xb, cout, oh, ow))
    for n in range(xb):
        for co in range(cout):
            for oy in range(oh):
                for ox in range(ow):
                    patch = xp[n, :, oy * stride:oy * stride + k,
                               ox * stride:ox * stride + k]
                    out[n, co, oy, ox] = (patch * w[co]).sum() + b[co]
    return out


# -- parameter sets -----------------------------------------------------------

def test_init_conv_parameter_names_and_shapes():
    pset = init_path_params(CONV_SPEC, np.random.default_rng(0), "common")
    assert pset.name == "common"
    shapes = {name: t.data.shape for name, t in pset.params.items()}
    assert shapes == {
        "bb.conv0.w": (4, 1, 3, 3), "bb.conv0.b": (4,),
        "bb.conv1.w": (6, 4, 3, 3), "bb.conv1.b": (6,),
        "head.fc0.w": (6, 6), "head.fc0.b": (6,),
        "head.fc1.w": (5, 6), "head.fc1.b": (5,),
        "clf.w": (1, 6), "clf.b": (1,),
    }
    assert all(t.requires_grad for t in pset.params.values())
    assert all(pset.opt_m[n].shape == t.data.shape
               for n, t in pset.params.items())


def test_init_vector_parameter_names_and_shapes():
    pset = init_path_params(VEC_SPEC, np.random.default_rng(0), "p")
    shapes = {name: t.data.shape for name, t in pset.params.items()}
    assert shapes["bb.fc0.w"] == (9, 12)
    assert shapes["bb.fc1.w"] == (7, 9)
    assert shapes["head.fc1.w"] == (5, 7)
    assert shapes["clf.w"] == (1, 7)


def test_init_deterministic_per_stream():
    a = init_path_params(CONV_SPEC, np.random.default_rng(42), "x")
    b = init_path_params(CONV_SPEC, np.random.default_rng(42), "x")
    c = init_path_params(CONV_SPEC, np.random.default_rng(43), "x")
    for name in a.params:
        assert np.array_equal(a.params[name].data, b.params[name].data)
    assert any(not np.array_equal(a.params[n].data, c.params[n].data)
               for n in a.params)


def test_parameter_sets_are_disjoint():
    rng = np.random.default_rng(0)
    a = init_path_params(CONV_SPEC, rng, "a")
    b = init_path_params(CONV_SPEC, rng, "b")
    a.params["clf.b"].data[:] = 123.0
    assert b.params["clf.b"].data[0] != 123.0


def test_duplicate_parameter_name_rejected():
    pset = ParameterSet("x")
    pset.add("w", np.zeros(3))
    with pytest.raises(ValueError, match="duplicate"):
        pset.add("w", np.zeros(3))


def test_zero_grad_and_grads_finite():
    pset = init_path_params(VEC_SPEC, np.random.default_rng(1), "x")
    pset.zero_grad()
    assert all(np.array_equal(t.grad, np.zeros_like(t.data))
               for t in pset.params.values())
    assert pset.grads_finite()
    pset.params["clf.b"].grad[:] = np.inf
    assert not pset.grads_finite()


def test_spec_validation():
    with pytest.raises(ValueError, match="mode"):
        BackboneSpec(mode="rnn")
    with pytest.raises(ValueError, match="nonlinearity"):
        BackboneSpec(nonlinearity="gelu")
    with pytest.raises(ValueError, match="stage"):
        BackboneSpec(channels=())
    assert CONV_SPEC.feature_dim == 6
    assert VEC_SPEC.feature_dim == 7


# -- forward passes -----------------------------------------------------------

def test_backbone_forward_matches_naive_conv_stack():
    rng = np.random.default_rng(3)
    pset = init_path_params(CONV_SPEC, rng, "x")
    x = rng.normal(size=(2, 1, 16, 16))
    got = backbone_forward(pset, CONV_SPEC, x).data

    h = naive_conv(x, pset["bb.conv0.w"].data, pset["bb.conv0.b"].data,
                   stride=2, pad=1)
    h = np.maximum(h, 0.0)
    h = naive_conv(h, pset["bb.conv1.w"].data, pset["bb.conv1.b"].data,
                   stride=2, pad=1)
    h = np.maximum(h, 0.0)
    expected = h.mean(axis=(2, 3))
    assert got.shape == (2, 6)
    assert np.allclose(got, expected, atol=1e-12)


def test_vector_backbone_matches_manual_mlp():
    # one hidden relu layer, linear output (features may be negative)
    rng = np.random.default_rng(4)
    pset = init_path_params(VEC_SPEC, rng, "x")
    x = rng.normal(size=(3, 12))
    got = backbone_forward(pset, VEC_SPEC, x).data
    h = np.maximum(x @ pset["bb.fc0.w"].data.T + pset["bb.fc0.b"].data, 0.0)
    expected = h @ pset["bb.fc1.w"].data.T + pset["bb.fc1.b"].data
    assert np.allclose(got, expected, atol=1e-12)
    assert (got < 0).any()


def test_projection_rows_unit_norm():
    rng = np.random.default_rng(5)
    pset = init_path_params(CONV_SPEC, rng, "x")
    h = backbone_forward(pset, CONV_SPEC, rng.normal(size=(4, 1, 16, 16)))
    z = projection_forward(pset, CONV_SPEC, h).data
    assert z.shape == (4, 5)
    assert np.allclose(np.linalg.norm(z, axis=1), 1.0, atol=1e-9)


def test_projection_degenerate_embedding_reported():
    rng = np.random.default_rng(6)
    pset = init_path_params(CONV_SPEC, rng, "x")
    # zero the head so every embedding collapses to the origin
    pset["head.fc1.w"].data[:] = 0.0
    pset["head.fc1.b"].data[:] = 0.0
    h = backbone_forward(pset, CONV_SPEC, rng.normal(size=(2, 1, 16, 16)))
    with pytest.raises(DegenerateEmbeddingError):
        projection_forward(pset, CONV_SPEC, h)


def test_classifier_logits_match_manual():
    rng = np.random.default_rng(7)
    pset = init_path_params(CONV_SPEC, rng, "x")
    h = backbone_forward(pset, CONV_SPEC, rng.normal(size=(3, 1, 16, 16)))
    logits = classifier_forward(pset, CONV_SPEC, h).data
    expected = h.data @ pset["clf.w"].data.T + pset["clf.b"].data
    assert logits.shape == (3,)
    assert np.allclose(logits, expected.reshape(-1), atol=1e-12)


def test_forward_accepts_tensor_and_array():
    rng = np.random.default_rng(8)
    pset = init_path_params(CONV_SPEC, rng, "x")
    x = rng.normal(size=(2, 1, 16, 16))
    a = backbone_forward(pset, CONV_SPEC, x).data
    b = backbone_forward(pset, CONV_SPEC, Tensor(x)).data
    assert np.array_equal(a, b)


def test_forward_shape_validation():
    rng = np.random.default_rng(9)
    pset = init_path_params(CONV_SPEC, rng, "x")
    with pytest.raises(ShapeError):
        backbone_forward(pset, CONV_SPEC, rng.normal(size=(2, 1, 16)))
    with pytest.raises(ShapeError):
        backbone_forward(pset, CONV_SPEC, rng.normal(size=(2, 3, 16, 16)))
    with pytest.raises(ShapeError):
        backbone_forward(pset, CONV_SPEC, rng.normal(size=(2, 1, 8, 8)))
    vec = init_path_params(VEC_SPEC, rng, "v")
    with pytest.raises(ShapeError):
        backbone_forward(vec, VEC_SPEC, rng.normal(size=(2, 5)))


def test_gradients_reach_every_parameter():
    rng = np.random.default_rng(10)
    pset = init_path_params(CONV_SPEC, rng, "x")
    pset.zero_grad()
    h = backbone_forward(pset, CONV_SPEC, rng.normal(size=(2, 1, 16, 16)))
    z = projection_forward(pset, CONV_SPEC, h)
    logits = classifier_forward(pset, CONV_SPEC, h)
    ((z * z).sum() + (logits * logits).sum()).backward()
    for name, t in pset.params.items():
        assert t.grad is not None and np.abs(t.grad).max() > 0.0, name
