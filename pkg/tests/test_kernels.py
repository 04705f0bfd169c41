import os
import subprocess
import sys

import numpy as np
import pytest

from gfnet.numcore import _kernels_py, kernels

ckernels = pytest.importorskip("gfnet.numcore._ckernels")


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
@pytest.mark.parametrize("stride,k", [(1, 3), (2, 3), (1, 1), (3, 2)])
def test_backends_bitwise_identical(dtype, stride, k):
    rng = np.random.default_rng(stride * 10 + k)
    xp = rng.standard_normal((3, 4, 11, 11)).astype(dtype)
    a = _kernels_py.im2col(xp, k, k, stride)
    b = ckernels.im2col(xp, k, k, stride)
    assert a.dtype == b.dtype == dtype
    assert a.tobytes() == b.tobytes()
    cols = rng.standard_normal(a.shape).astype(dtype)
    assert _kernels_py.col2im(cols, 11, 11, stride).tobytes() == ckernels.col2im(cols, 11, 11, stride).tobytes()


def test_im2col_layout():
    xp = np.arange(2 * 1 * 4 * 4, dtype=np.float32).reshape(2, 1, 4, 4)
    cols = kernels.im2col(xp, 2, 2, 2)
    assert cols.shape == (2, 2, 2, 1, 2, 2)
    np.testing.assert_array_equal(cols[1, 1, 0, 0], xp[1, 0, 2:4, 0:2])


def test_col2im_is_adjoint_of_im2col():
    # <im2col(x), c> == <x, col2im(c)>
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 7))
    cols = kernels.im2col(x, 3, 3, 2)
    c = rng.standard_normal(cols.shape)
    lhs = np.sum(cols * c)
    rhs = np.sum(x * kernels.col2im(c, 7, 7, 2))
    assert lhs == pytest.approx(rhs, rel=1e-12)


def test_backend_selected():
    assert kernels.BACKEND in ("cython", "python")


_PROBE = """
import hashlib, numpy as np
from gfnet.numcore import kernels, Tensor
from gfnet.model import GfModel, ModelConfig
m = GfModel(ModelConfig(channels=(4, 8), strides=(1, 2), T=2))
x = Tensor(np.random.default_rng(0).standard_normal((3, 3, 16, 16)).astype(np.float32))
out = m.step(x, 1, None)
out.logits.sum().backward()
g = m.global_encoder.layers[0].weight.grad
print(kernels.BACKEND, hashlib.sha256(out.logits.data.tobytes() + g.tobytes()).hexdigest())
"""


def _probe(pure: bool):
    env = dict(os.environ)
    env.pop("GFNET_PURE_PYTHON", None)
    if pure:
        env["GFNET_PURE_PYTHON"] = "1"
    out = subprocess.run([sys.executable, "-c", _PROBE], env=env, capture_output=True, text=True, check=True)
    return out.stdout.split()


def test_env_switch_forces_fallback_with_identical_results():
    backend_pure, digest_pure = _probe(True)
    backend_native, digest_native = _probe(False)
    assert backend_pure == "python" and backend_native == "cython"
    assert digest_pure == digest_native
