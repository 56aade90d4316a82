import numpy as np
import pytest

from evsnn.autograd import Tensor


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def numeric_grad(fn, arrays, wrt, eps=1e-5):
    """Central finite differences of scalar fn(*arrays) w.r.t. arrays[wrt]."""
    base = [a.copy() for a in arrays]
    g = np.zeros_like(base[wrt])
    flat = g.reshape(-1)
    src = base[wrt].reshape(-1)
    for i in range(src.size):
        orig = src[i]
        src[i] = orig + eps
        hi = fn(*base)
        src[i] = orig - eps
        lo = fn(*base)
        src[i] = orig
        flat[i] = (hi - lo) / (2 * eps)
    return g


def check_grad(build, arrays, tol, eps=1e-5):
    """Compare autodiff gradients of scalar-valued ``build(*tensors)``
    against central differences for every input array.

    ``build`` receives Tensors (requires_grad=True) and returns a Tensor
    whose .data is reduced to a scalar by summation against fixed random
    weights, so non-scalar outputs are exercised too.
    """
    arrays = [np.asarray(a) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    out = build(*tensors)
    w = np.random.default_rng(0).standard_normal(out.data.shape).astype(out.data.dtype)
    (out * Tensor(w)).sum().backward()

    def scalar(*arrs):
        ts = [Tensor(a) for a in arrs]
        return float((build(*ts).data * w).sum())

    for i, t in enumerate(tensors):
        num = numeric_grad(scalar, arrays, i, eps=eps)
        got = t.grad if t.grad is not None else np.zeros_like(arrays[i])
        denom = max(np.abs(num).max(), np.abs(got).max(), 1e-8)
        rel = np.abs(got - num).max() / denom
        assert rel <= tol, f"input {i}: max rel grad error {rel:.3e} > {tol}"
