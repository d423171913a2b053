import json
import os
import subprocess
import sys

import numpy as np
import pytest
from hypothesis import given, strategies as st

from adbench.tensor import kernels
from adbench.tensor.checkpoint import CheckpointError, MAGIC, load_checkpoint, save_checkpoint, state_hash
from adbench.tensor.nn import Linear

BACKENDS = ["numpy"] + (["cython"] if kernels.BACKEND == "cython" else [])


@pytest.mark.skipif(kernels.BACKEND != "cython", reason="compiled extension not built")
@given(st.integers(1, 3), st.integers(1, 3), st.integers(3, 9), st.integers(3, 9), st.integers(1, 3), st.integers(1, 3),
       st.sampled_from([np.float32, np.float64]), st.integers(0, 2**31 - 1))
def test_backends_agree(n, c, h, w, k, s, dtype, seed):
    k = min(k, h, w)
    r = np.random.default_rng(seed)
    x = r.standard_normal((n, c, h, w)).astype(dtype)
    cy, npk = kernels.get_backend("cython"), kernels.get_backend("numpy")
    cols = cy.im2col(x, k, k, s)
    np.testing.assert_array_equal(cols, npk.im2col(x, k, k, s))
    g = r.standard_normal(cols.shape).astype(dtype)
    np.testing.assert_allclose(cy.col2im(g, c, h, w, k, k, s), npk.col2im(g, c, h, w, k, k, s), rtol=1e-5 if dtype == np.float32 else 1e-12)
    v1, i1 = cy.maxpool_forward(x, k, s)
    v2, i2 = npk.maxpool_forward(x, k, s)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_array_equal(i1, i2)
    gp = r.standard_normal(v1.shape).astype(dtype)
    np.testing.assert_allclose(cy.maxpool_backward(gp, i1, h, w), npk.maxpool_backward(gp, i2, h, w), rtol=1e-6)


@pytest.mark.parametrize("backend", BACKENDS)
def test_im2col_layout(backend):
    k = kernels.get_backend(backend)
    x = np.arange(9.0).reshape(1, 1, 3, 3)
    cols = k.im2col(x, 2, 2, 1)
    # rows: kernel offsets (c, i, j); columns: output positions row-major
    np.testing.assert_array_equal(cols[0, 0], [0, 1, 3, 4])
    np.testing.assert_array_equal(cols[0, 3], [4, 5, 7, 8])


def test_unknown_backend():
    with pytest.raises(ValueError):
        kernels.get_backend("fortran")


def test_pure_python_env_selects_numpy():
    code = "from adbench.tensor import kernels; print(kernels.BACKEND)"
    out = subprocess.run([sys.executable, "-c", code], env={**os.environ, "ADBENCH_PURE_PYTHON": "1"},
                         capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "numpy"


# -- checkpoints --------------------------------------------------------------------------
def test_checkpoint_round_trip(tmp_path, rng):
    lin = Linear(4, 3, rng)
    path = str(tmp_path / "m.ckpt")
    side = save_checkpoint(path, lin.state_dict(), "linear", "abc123", extra={"note": 1})
    state, header = load_checkpoint(path)
    assert header == {"format_version": 1, "model_id": "linear", "config_hash": "abc123"}
    for name, arr in lin.state_dict().items():
        np.testing.assert_array_equal(state[name], arr)
    assert state_hash(state) == state_hash(lin.state_dict())
    with open(path + ".json") as fh:
        assert json.load(fh) == json.loads(json.dumps(side))
    assert side["extra"] == {"note": 1}
    with open(path, "rb") as fh:
        blob = fh.read()
    assert blob.startswith(MAGIC)
    off = side["blocks"][0]["offset"]
    first = next(iter(lin.state_dict().values()))
    np.testing.assert_array_equal(np.frombuffer(blob[off:off + first.nbytes], "<f4").reshape(first.shape), first)


def test_checkpoint_truncated_and_bad_magic(tmp_path):
    path = str(tmp_path / "m.ckpt")
    save_checkpoint(path, {"w": np.ones((2, 2), np.float32)}, "m", "h")
    blob = open(path, "rb").read()
    open(path, "wb").write(blob[:-4])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(path)
    open(path, "wb").write(b"XXXXXXXX" + blob[8:])
    with pytest.raises(CheckpointError, match="not a checkpoint"):
        load_checkpoint(path)


def test_state_hash_detects_change():
    a = {"w": np.zeros(3, np.float32)}
    b = {"w": np.array([0, 0, 1e-7], np.float32)}
    assert state_hash(a) != state_hash(b)
