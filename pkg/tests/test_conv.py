import numpy as np
import pytest

from helpers import check_against_fd

from mstp.autodiff import Tensor, conv3d, upsample_nearest3d
from mstp.errors import ContractError, ShapeError


def reference_conv3d(x, w, b=None, stride=1, padding=0):
    """Nested-loop cross-correlation, the oracle for the fast path."""
    c_out, c_in, kd, kh, kw = w.shape
    p = padding
    xp = np.pad(x, ((0, 0), (p, p), (p, p), (p, p)))
    do = (xp.shape[1] - kd) // stride + 1
    ho = (xp.shape[2] - kh) // stride + 1
    wo = (xp.shape[3] - kw) // stride + 1
    out = np.zeros((c_out, do, ho, wo))
    for co in range(c_out):
        for zi in range(do):
            for yi in range(ho):
                for xi in range(wo):
                    z0, y0, x0 = zi * stride, yi * stride, xi * stride
                    patch = xp[:, z0 : z0 + kd, y0 : y0 + kh, x0 : x0 + kw]
                    out[co, zi, yi, xi] = (patch * w[co]).sum()
        if b is not None:
            out[co] += b[co]
    return out


def rnd(*shape, seed=0):
    g = np.random.Generator(np.random.Philox(key=np.arange(2, dtype=np.uint64) + seed))
    return g.uniform(-1, 1, size=shape)


@pytest.mark.parametrize(
    "cin,cout,ext,k,stride,padding",
    [
        (1, 2, 5, 3, 1, 1),
        (2, 3, 6, 3, 2, 1),
        (3, 1, 4, 1, 1, 0),
        (2, 2, 5, 3, 2, 0),
        (1, 1, 7, 5, 2, 2),
    ],
)
def test_forward_matches_reference(cin, cout, ext, k, stride, padding):
    x = rnd(cin, ext, ext, ext, seed=ext + k)
    w = rnd(cout, cin, k, k, k, seed=stride + 10)
    b = rnd(cout, seed=3)
    want = reference_conv3d(x, w, b, stride, padding)
    got = conv3d(
        Tensor(x, dtype=np.float64), Tensor(w, dtype=np.float64),
        Tensor(b, dtype=np.float64), stride=stride, padding=padding,
    )
    np.testing.assert_allclose(got.data, want, rtol=1e-10, atol=1e-12)


def test_batched_forward_equals_per_sample():
    xb = rnd(3, 2, 5, 5, 5, seed=42)
    w = rnd(4, 2, 3, 3, 3, seed=43)
    batched = conv3d(Tensor(xb, dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1)
    singles = [
        conv3d(Tensor(xb[i], dtype=np.float64), Tensor(w, dtype=np.float64), stride=2, padding=1).data
        for i in range(3)
    ]
    np.testing.assert_allclose(batched.data, np.stack(singles), rtol=1e-10)


def test_gradients_match_finite_differences():
    x = rnd(2, 3, 3, 3, seed=1)
    w = rnd(2, 2, 3, 3, 3, seed=2)
    b = rnd(2, seed=3)
    check_against_fd(
        lambda xx, ww, bb: conv3d(xx, ww, bb, stride=1, padding=1).sum(), [x, w, b]
    )
    check_against_fd(
        lambda xx, ww: (conv3d(xx, ww, stride=2, padding=1) * Tensor(rnd(2, 2, 2, 2, seed=4), dtype=np.float64)).sum(),
        [x, w],
    )


def test_batched_gradients_match_finite_differences():
    x = rnd(2, 1, 4, 4, 4, seed=5)
    w = rnd(2, 1, 3, 3, 3, seed=6)
    check_against_fd(lambda xx, ww: conv3d(xx, ww, stride=2, padding=1).mean(), [x, w])


def test_empty_output_raises_shape_error():
    x = Tensor(np.ones((1, 2, 2, 2)))
    w = Tensor(np.ones((1, 1, 3, 3, 3)))
    with pytest.raises(ShapeError):
        conv3d(x, w, stride=2, padding=0)


def test_kernel_and_stride_contracts():
    x = Tensor(np.ones((1, 5, 5, 5)))
    with pytest.raises(ShapeError):
        conv3d(x, Tensor(np.ones((1, 1, 2, 2, 2))))  # even kernel
    with pytest.raises(ContractError):
        conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), stride=3)
    with pytest.raises(ShapeError):
        conv3d(x, Tensor(np.ones((1, 2, 3, 3, 3))))  # channel mismatch
    with pytest.raises(ShapeError):
        conv3d(x, Tensor(np.ones((1, 1, 3, 3, 3))), b=Tensor(np.ones(2)))


def test_upsample_forward_and_grad():
    x = np.arange(8, dtype=np.float64).reshape(1, 2, 2, 2)
    up = upsample_nearest3d(Tensor(x, dtype=np.float64), 2)
    assert up.shape == (1, 4, 4, 4)
    assert up.data[0, 0, 0, 0] == x[0, 0, 0, 0]
    assert up.data[0, 1, 1, 1] == x[0, 0, 0, 0]
    assert up.data[0, 3, 3, 3] == x[0, 1, 1, 1]
    check_against_fd(
        lambda a: (upsample_nearest3d(a, 2) * Tensor(rnd(1, 4, 4, 4, seed=7), dtype=np.float64)).sum(),
        [x],
    )
    with pytest.raises(ContractError):
        upsample_nearest3d(Tensor(x), 0)
    with pytest.raises(ShapeError):
        upsample_nearest3d(Tensor(np.ones((2, 2))), 2)


def test_upsample_batched_matches_stacked():
    xb = rnd(2, 3, 2, 2, 2, seed=8)
    up = upsample_nearest3d(Tensor(xb, dtype=np.float64), 2)
    singles = [upsample_nearest3d(Tensor(xb[i], dtype=np.float64), 2).data for i in range(2)]
    np.testing.assert_allclose(up.data, np.stack(singles))
