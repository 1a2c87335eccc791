import numpy as np
import pytest

from clearvae.autodiff import Tensor


def numeric_gradient(f, arrays, eps=1e-5):
    """Central finite differences of a scalar-valued f(*arrays)."""
    grads = []
    for pos, a in enumerate(arrays):
        g = np.zeros_like(a, dtype=np.float64)
        for idx in np.ndindex(a.shape):
            hi = [x.copy() for x in arrays]
            lo = [x.copy() for x in arrays]
            hi[pos][idx] += eps
            lo[pos][idx] -= eps
            g[idx] = (f(*hi) - f(*lo)) / (2 * eps)
        grads.append(g)
    return grads


def analytic_gradient(f, arrays):
    """Gradients of a Tensor-valued f via the reverse pass."""
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    out = f(*tensors)
    out.backward()
    return [t.grad for t in tensors]


def assert_grad_matches(f_tensor, f_value, arrays, eps=1e-5, rtol=1e-4):
    """Compare reverse-mode gradients against central differences.

    f_tensor consumes Tensors and returns a scalar Tensor; f_value consumes
    arrays and returns a float (defaults to f_tensor on constants).
    """
    ana = analytic_gradient(f_tensor, arrays)
    num = numeric_gradient(f_value, arrays, eps=eps)
    for a, b in zip(ana, num):
        scale = max(np.abs(b).max(), 1e-8)
        np.testing.assert_allclose(a, b, atol=rtol * scale, rtol=0,
                                   err_msg="analytic vs finite-difference gradient")


@pytest.fixture
def rng_np():
    return np.random.default_rng(12345)
