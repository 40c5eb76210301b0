import numpy as np
import pytest

import numerics
from errors import ConfigError, DimensionError, FormatError, NumericError
from numerics import (
    Parameter, ParameterSet, add, affine, constant, conv1d, conv_transpose1d, div, frame,
    grad_check, grad_check_report, layer_norm, load_checkpoint, log, matmul, mul, multi_head_attention,
    overlap_add, relu, save_checkpoint, set_precision, sigmoid, softmax, tsum,
)


def _param(rng, *shape, name="p", low=-1.0, high=1.0):
    return Parameter(rng.uniform(low, high, size=shape), name)


def test_backward_through_shared_node():
    x = Parameter(np.array([2.0, -3.0]), "x")
    y = mul(x, x)                  # x used twice
    z = tsum(add(y, x))
    z.backward()
    np.testing.assert_allclose(x.grad, 2 * x.data + 1)


def test_broadcast_gradient_reduces_to_parameter_shape():
    b = Parameter(np.zeros(3), "b")
    x = constant(np.ones((4, 3)))
    tsum(add(x, b)).backward()
    np.testing.assert_allclose(b.grad, np.full(3, 4.0))


def test_constants_record_no_tape():
    out = mul(constant([1.0, 2.0]), 3.0)
    assert out._parents == ()
    assert not out.requires_grad


def test_non_finite_output_raises():
    with pytest.raises(NumericError):
        log(constant([0.0]))


def test_matmul_shape_mismatch():
    with pytest.raises(DimensionError):
        matmul(constant(np.ones((2, 3))), constant(np.ones((2, 3))))


def test_softmax_rows_sum_to_one(rng):
    out = softmax(constant(rng.normal(size=(3, 5)) * 50), axis=-1)
    np.testing.assert_allclose(out.data.sum(axis=-1), 1.0)


def test_layer_norm_zero_mean_unit_variance(rng):
    out = layer_norm(constant(rng.normal(3.0, 2.0, size=(4, 16))), axis=-1)
    np.testing.assert_allclose(out.data.mean(axis=-1), 0.0, atol=1e-12)
    np.testing.assert_allclose(out.data.var(axis=-1), 1.0, rtol=1e-4)


def test_conv1d_matches_direct_sum(rng):
    x = rng.normal(size=(1, 2, 11))
    k = rng.normal(size=(3, 2, 4))
    out = conv1d(constant(x), constant(k), stride=2).data
    assert out.shape == (1, 3, 4)
    expected = np.array([[np.sum(k[o] * x[0, :, 2 * t:2 * t + 4]) for t in range(4)] for o in range(3)])
    np.testing.assert_allclose(out[0], expected)


def test_conv1d_rejects_short_input():
    with pytest.raises(DimensionError):
        conv1d(constant(np.ones((1, 1, 3))), constant(np.ones((2, 1, 4))), stride=1)


def test_conv_transpose_is_adjoint_of_conv(rng):
    x = rng.normal(size=(1, 2, 12))
    y = rng.normal(size=(1, 3, 5))
    k = rng.normal(size=(3, 2, 4))
    forward = conv1d(constant(x), constant(k), stride=2).data
    adjoint = conv_transpose1d(constant(y), constant(k), stride=2).data
    assert np.isclose(np.sum(forward * y), np.sum(x[..., :adjoint.shape[-1]] * adjoint))


def test_conv_transpose_pairing_mismatch():
    with pytest.raises(ConfigError):
        conv_transpose1d(constant(np.ones((1, 2, 3))), constant(np.ones((2, 1, 4))), stride=2,
                         paired_kernel_size=8, paired_stride=2)


def test_frame_then_overlap_add_counts_overlaps():
    x = constant(np.ones((1, 10)))
    framed = frame(x, size=4, hop=2, n_frames=4)
    assert framed.shape == (1, 4, 4)
    summed = overlap_add(framed, hop=2, length=10).data[0]
    np.testing.assert_allclose(summed, [1, 1, 2, 2, 2, 2, 2, 2, 1, 1])


def test_attention_head_divisibility(rng):
    params = {f"{p}.{k}": constant(np.zeros((6, 6)) if k == "weight" else np.zeros(6))
              for p in ("q", "k", "v", "out") for k in ("weight", "bias")}
    x = constant(rng.normal(size=(2, 3, 6)))
    with pytest.raises(ConfigError):
        multi_head_attention(x, x, x, 4, params)


@pytest.mark.parametrize("name", ["add", "mul", "div", "affine", "sigmoid", "softmax", "layer_norm", "conv1d",
                                  "conv_transpose1d", "attention"])
def test_grad_check_per_op(name, rng):
    a, b = _param(rng, 3, 4, name="a"), _param(rng, 3, 4, name="b")
    pos = _param(rng, 3, 4, name="pos", low=0.5, high=2.0)
    w, bias = _param(rng, 5, 4, name="w"), _param(rng, 5, name="bias")
    x, k = _param(rng, 2, 3, 13, name="x"), _param(rng, 4, 3, 5, name="k")
    y, kt = _param(rng, 2, 4, 6, name="y"), _param(rng, 4, 3, 5, name="kt")
    seq = _param(rng, 2, 5, 4, name="seq")
    attn = {f"{p}.{kind}": _param(rng, *((4, 4) if kind == "weight" else (4,)), name=f"{p}.{kind}")
            for p in ("q", "k", "v", "out") for kind in ("weight", "bias")}

    cases = {
        "add": (lambda: mul(add(a, b), b), [a, b], 1e-5),
        "mul": (lambda: mul(a, b), [a, b], 1e-5),
        "div": (lambda: div(a, pos), [a, pos], 1e-4),
        "affine": (lambda: affine(a, w, bias), [a, w, bias], 1e-5),
        "sigmoid": (lambda: sigmoid(a), [a], 1e-4),
        "softmax": (lambda: mul(softmax(a, axis=0), b), [a], 1e-4),
        "layer_norm": (lambda: mul(layer_norm(a), b), [a], 1e-4),
        "conv1d": (lambda: mul(conv1d(x, k, 2), 1.5), [x, k], 1e-5),
        "conv_transpose1d": (lambda: mul(conv_transpose1d(y, kt, 3), 0.5), [y, kt], 1e-5),
        "attention": (lambda: mul(multi_head_attention(seq, seq, seq, 2, attn), seq), [seq] + list(attn.values()), 1e-4),
    }
    fn, inputs, tolerance = cases[name]
    assert grad_check(fn, inputs) < tolerance


def test_grad_check_report_labels_inputs(rng):
    x = _param(rng, 4, name="x")
    report = grad_check_report(lambda: relu(add(x, 2.0)), [x])
    assert set(report) == {"x"}
    assert report["x"] < 1e-6


def test_parameter_init_depends_only_on_seed_and_name():
    first = ParameterSet(seed=7)
    first.create("a.weight", (3, 3))
    w1 = first.create("b.weight", (2, 2)).data.copy()
    second = ParameterSet(seed=7)
    w2 = second.create("b.weight", (2, 2)).data
    np.testing.assert_array_equal(w1, w2)


def test_duplicate_parameter_name():
    params = ParameterSet()
    params.create("enc.kernel", (2, 1, 4))
    with pytest.raises(ConfigError):
        params.create("enc.kernel", (2, 1, 4))


def test_checkpoint_preserves_bytes(tmp_path):
    params = ParameterSet(seed=3)
    params.create("x.weight", (4, 5))
    params.create("x.bias", (5,), init="zeros")
    path = str(tmp_path / "model.ckpt")
    save_checkpoint(path, params.state_dict(), {"note": "hello"})

    tensors, header = load_checkpoint(path)
    assert header["note"] == "hello"
    for name, value in params.state_dict().items():
        assert tensors[name].tobytes() == value.tobytes()


def test_checkpoint_bad_magic(tmp_path):
    path = tmp_path / "bad.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 16)
    with pytest.raises(FormatError):
        load_checkpoint(str(path))


def test_load_state_dict_shape_mismatch():
    params = ParameterSet()
    params.create("w", (2, 2))
    with pytest.raises(ConfigError):
        params.load_state_dict({"w": np.zeros((3, 2))})


def test_small_conv_cases():
    x = constant(np.array([[[1.0, 2.0, 3.0, 4.0]]]))
    np.testing.assert_array_equal(conv1d(x, constant(np.ones((1, 1, 1))), stride=1).data[0, 0], [1, 2, 3, 4])
    np.testing.assert_array_equal(conv1d(x, constant(np.ones((1, 1, 2))), stride=2).data[0, 0], [3, 7])
    y = constant(np.array([[[3.0, 7.0]]]))
    np.testing.assert_array_equal(conv_transpose1d(y, constant(np.ones((1, 1, 2))), stride=2).data[0, 0],
                                  [3, 3, 7, 7])


def test_elementwise_values():
    np.testing.assert_array_equal(relu(constant([-1.0, 0.0, 2.0])).data, [0, 0, 2])
    np.testing.assert_allclose(softmax(constant([0.0, 0.0])).data, [0.5, 0.5])
    assert sigmoid(constant(0.0)).item() == 0.5


def test_batched_conv_kernel_gradients(rng):
    x = _param(rng, 2, 1, 32, name="x")
    k = _param(rng, 4, 1, 6, name="k")
    tsum(conv1d(x, k, 2)).backward()
    assert k.grad.shape == (4, 1, 6)
    assert grad_check(lambda: conv1d(x, k, 2), [x, k]) < 1e-6

    y = _param(rng, 2, 3, 4, 7, name="y")
    kt = _param(rng, 4, 2, 6, name="kt")
    assert grad_check(lambda: mul(conv_transpose1d(y, kt, 3), 1.0), [y, kt]) < 1e-6


def test_zero_gradient_passes_grad_check(rng):
    # a bias added to every score is invisible to the softmax
    scores = _param(rng, 3, 5, name="scores")
    shift = Parameter(np.array([0.3]), "shift")
    weights = constant(rng.normal(size=(3, 5)))
    report = grad_check_report(lambda: mul(softmax(add(scores, shift), axis=-1), weights), [scores, shift])
    assert report["shift"] == 0.0
    assert report["scores"] < 1e-6


def test_precision_switch(monkeypatch):
    monkeypatch.setattr(numerics, "DTYPE", numerics.DTYPE)
    set_precision("float32")
    assert Parameter(np.ones(3), "w").data.dtype == np.float32
    set_precision("float64")
    assert Parameter(np.ones(3), "w").data.dtype == np.float64
    with pytest.raises(ConfigError):
        set_precision("float16")
