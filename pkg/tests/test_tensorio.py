import numpy as np
import pytest

from defnet.tensorio import TensorRecordError, format_tensor, parse_tensor


def test_roundtrip_exact():
    rng = np.random.default_rng(3)
    for _ in range(50):
        ndim = int(rng.integers(1, 5))
        shape = tuple(int(rng.integers(1, 5)) for _ in range(ndim))
        arr = rng.standard_normal(shape)
        back = parse_tensor(format_tensor(arr))
        assert back.shape == arr.shape
        assert back.dtype == np.float64
        np.testing.assert_array_equal(back, arr)


def test_roundtrip_extreme_values():
    arr = np.array([0.0, -0.0, 1e-308, -1e308, np.pi, 2.0 ** -52])
    np.testing.assert_array_equal(parse_tensor(format_tensor(arr)), arr)


def test_format_rejects_scalar():
    with pytest.raises(TensorRecordError):
        format_tensor(np.float64(1.0))


@pytest.mark.parametrize("text", [
    "data: 1 2",                       # no shape section
    "shape: 2 ; data: 1",              # count mismatch
    "shape: 2 ; data: 1 2 3",          # count mismatch, too many
    "shape: 0 ; data:",                # non-positive dim
    "shape: -1 ; data: 1",             # negative dim
    "shape: x ; data: 1",              # non-integer dim
    "shape: 2 ; data: 1 nan",          # non-finite scalar
    "shape: 2 ; data: 1 inf",
    "shape: 2 ; data: 1 two",
    "shape: 1 ; data: 1 ; extra: 2",   # extra separator
    "shape: ; data:",                  # empty shape
])
def test_parse_rejects_malformed(text):
    with pytest.raises(TensorRecordError):
        parse_tensor(text)


def test_parse_rejects_non_string():
    with pytest.raises(TensorRecordError):
        parse_tensor([1, 2, 3])


def test_whitespace_is_flexible():
    a = parse_tensor("shape:  2   2 ;  data:   1 2  3   4")
    np.testing.assert_array_equal(a, [[1.0, 2.0], [3.0, 4.0]])
