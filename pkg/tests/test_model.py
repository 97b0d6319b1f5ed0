import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from inasbench.errors import NetworkValidationError, ParameterError, ShapeError
from inasbench.model import (
    Conv2D,
    FullyConnected,
    LayerParams,
    MaxPool2D,
    NetworkSpec,
    QTensor,
    check_network,
    conv_output_shape,
    count_macs,
    count_params,
    dequantize,
    quantize,
    requantize,
    validate_network,
)
from oracles import _round_shift, _sat


def test_quantize_examples():
    assert quantize(1.0, 8) == 256
    assert quantize(200.0, 8) == 32767
    assert quantize(-200.0, 8) == -32768
    assert quantize(-0.001953125, 8) == -1
    assert quantize(0.001953125, 8) == 1


@pytest.mark.parametrize("frac", [-1, 16, 2.5])
def test_quantize_rejects_frac(frac):
    with pytest.raises(ParameterError):
        quantize(1.0, frac)


@given(st.integers(-32768, 32767), st.integers(0, 15))
def test_dequantize_inverts_quantize(v, frac):
    assert quantize(dequantize(v, frac), frac) == v


@given(st.integers(-(1 << 40), 1 << 40), st.integers(0, 15))
def test_requantize_matches_integer_rounding(acc, shift):
    assert int(requantize(np.array([acc]), shift)[0]) == _sat(_round_shift(acc, shift))


def test_qtensor_invariants():
    t = QTensor.from_array(np.arange(6).reshape(1, 2, 3), 4)
    assert t.shape == (1, 2, 3) and t.data.dtype == np.int16
    assert not t.data.flags.writeable
    with pytest.raises(ShapeError):
        QTensor((2, 2), np.zeros(3, dtype=np.int64), 0)
    with pytest.raises(ParameterError):
        QTensor.from_array(np.array([40000]), 0)
    with pytest.raises(ParameterError):
        QTensor.from_array(np.array([0.5]), 0)
    assert t == QTensor.from_array(np.arange(6).reshape(1, 2, 3), 4)
    assert t != QTensor.from_array(np.arange(6).reshape(1, 2, 3), 5)
    assert hash(t) == hash(QTensor.from_array(np.arange(6).reshape(1, 2, 3), 4))


def test_output_shapes():
    assert conv_output_shape(Conv2D(3, 8, 3, 1, 1), (3, 32, 32)) == (8, 32, 32)
    assert conv_output_shape(Conv2D(3, 8, 5, 2, 0), (3, 9, 9)) == (8, 3, 3)
    assert conv_output_shape(MaxPool2D(2, 2), (4, 5, 5)) == (4, 2, 2)
    assert conv_output_shape(FullyConnected(12, 3), (3, 2, 2)) == (3, 1, 1)
    with pytest.raises(ShapeError):
        conv_output_shape(FullyConnected(10, 3), (3, 2, 2))
    with pytest.raises(ShapeError):
        conv_output_shape(Conv2D(1, 1, 5), (1, 3, 3))


def _w(*shape, frac=8):
    return LayerParams(QTensor.from_array(np.ones(shape, dtype=np.int64), frac))


def _msgs(net):
    return [v.message for v in validate_network(net)]


def test_validation_reports_violations():
    good = NetworkSpec((1, 4, 4), (Conv2D(1, 2, 3, 1, 1), MaxPool2D(2, 2), FullyConnected(8, 3)),
                       (_w(2, 1, 3, 3), None, _w(3, 8)), 3)
    assert validate_network(good) == []
    check_network(good)

    assert "no layers" in _msgs(NetworkSpec((1, 2, 2), (), (), 4))
    even = NetworkSpec((1, 4, 4), (Conv2D(1, 1, 2),), (_w(1, 1, 2, 2),), 9)
    assert any("odd" in m for m in _msgs(even))
    chain = NetworkSpec((2, 4, 4), (Conv2D(1, 1, 1),), (_w(1, 1, 1, 1),), 16)
    assert any("c_in" in m for m in _msgs(chain))
    classes = NetworkSpec((1, 2, 2), (Conv2D(1, 1, 1),), (_w(1, 1, 1, 1),), 5)
    assert any("output_classes" in m for m in _msgs(classes))
    wshape = NetworkSpec((1, 2, 2), (Conv2D(1, 1, 1),), (_w(2, 1, 1, 1),), 4)
    assert any("weight shape" in m for m in _msgs(wshape))
    bias = LayerParams(QTensor.from_array(np.ones((1, 1, 1, 1), dtype=np.int64), 8),
                       QTensor.from_array(np.ones(1, dtype=np.int64), 8))
    assert any("accumulator" in m for m in _msgs(NetworkSpec((1, 2, 2), (Conv2D(1, 1, 1),), (bias,), 4)))
    with pytest.raises(NetworkValidationError) as err:
        check_network(even)
    assert err.value.violations


def test_counts():
    net = NetworkSpec((3, 8, 8), (Conv2D(3, 4, 3, 1, 1), MaxPool2D(2, 2), FullyConnected(64, 10)),
                      (_w(4, 3, 3, 3), None, _w(10, 64)), 10)
    per_layer, total = count_macs(net)
    assert per_layer == [8 * 8 * 4 * 27, 0, 640]
    assert total == sum(per_layer)
    assert count_params(net) == 4 * 27 + 640


@given(st.integers(1, 4), st.integers(1, 4), st.sampled_from([1, 3, 5]), st.integers(1, 3), st.integers(5, 12))
def test_conv_macs_closed_form(c_in, c_out, k, s, hw):
    net = NetworkSpec((c_in, hw, hw), (Conv2D(c_in, c_out, k, s, k // 2),), (_w(c_out, c_in, k, k),),
                      c_out * ((hw + 2 * (k // 2) - k) // s + 1) ** 2)
    ho = (hw + 2 * (k // 2) - k) // s + 1
    assert count_macs(net)[1] == ho * ho * c_out * c_in * k * k
    assert count_params(net) == math.prod((c_out, c_in, k, k))
