import os
import subprocess
import sys

import numpy as np
import pytest

from tcon import coattention as co
from tcon import kernels
from tcon import numerics as nx
from tcon.numerics import Tape

compiled_only = pytest.mark.skipif("compiled" not in kernels.BACKENDS,
                                   reason="compiled extension not built")


def _problem(seed, bs=3, bt=4, ks=5, kt=4, d=6, pairs=9):
    rng = np.random.default_rng(seed)
    fs = rng.normal(size=(bs, ks, d))
    ft = rng.normal(size=(bt, kt, d))
    ass = rng.dirichlet(np.ones(ks), bs)
    att = rng.dirichlet(np.ones(kt), bt)
    si = rng.integers(0, bs, pairs)
    ti = rng.integers(0, bt, pairs)
    return fs, ft, ass, att, si, ti, rng


def test_fallback_forward_matches_definition():
    fs, ft, ass, att, si, ti, _ = _problem(0)
    ast, raw = kernels.pair_forward(fs, ft, ass, att, si, ti, backend="python")
    for p, (i, j) in enumerate(zip(si, ti)):
        np.testing.assert_allclose(ast[p], fs[i] @ ft[j].T, atol=1e-13)
        np.testing.assert_allclose(raw[p], np.outer(ass[i], att[j]) * ast[p], atol=1e-13)


def test_fallback_backward_matches_finite_differences():
    fs, ft, ass, att, si, ti, rng = _problem(1, pairs=4)
    g_raw = rng.normal(size=(4, 5, 4))

    def f():
        return float(np.sum(kernels.pair_forward(fs, ft, ass, att, si, ti, backend="python")[1] * g_raw))

    ast, _ = kernels.pair_forward(fs, ft, ass, att, si, ti, backend="python")
    g_fs, g_ft, g_u, g_v = kernels.pair_backward(fs, ft, ass, att, si, ti, ast, g_raw, backend="python")
    # reduce per-pair slabs onto videos for comparison
    red = [np.zeros_like(fs), np.zeros_like(ft), np.zeros_like(ass), np.zeros_like(att)]
    np.add.at(red[0], si, g_fs)
    np.add.at(red[1], ti, g_ft)
    np.add.at(red[2], si, g_u)
    np.add.at(red[3], ti, g_v)
    for arr, analytic in zip((fs, ft, ass, att), red):
        num = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + 1e-6
            up = f()
            flat[k] = orig - 1e-6
            down = f()
            flat[k] = orig
            num.reshape(-1)[k] = (up - down) / 2e-6
        np.testing.assert_allclose(analytic, num, rtol=1e-6, atol=1e-8)


@compiled_only
@pytest.mark.parametrize("seed", range(5))
def test_compiled_matches_fallback(seed):
    fs, ft, ass, att, si, ti, rng = _problem(seed)
    ref = kernels.pair_forward(fs, ft, ass, att, si, ti, backend="python")
    got = kernels.pair_forward(fs, ft, ass, att, si, ti, backend="compiled")
    for a, b in zip(ref, got):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-13)
    g_raw = rng.normal(size=ref[1].shape)
    ref_b = kernels.pair_backward(fs, ft, ass, att, si, ti, ref[0], g_raw, backend="python")
    got_b = kernels.pair_backward(fs, ft, ass, att, si, ti, ref[0], g_raw, backend="compiled")
    for a, b in zip(ref_b, got_b):
        np.testing.assert_allclose(b, a, rtol=1e-12, atol=1e-13)


def test_kernels_accept_empty_pair_list():
    fs, ft, ass, att, _, _, _ = _problem(0)
    for name in kernels.BACKENDS:
        ast, raw = kernels.pair_forward(fs, ft, ass, att, [], [], backend=name)
        assert ast.shape == raw.shape == (0, 5, 4)


def _coattn_grads(fs_data, ft_data, si, ti, threads, backend):
    fs = nx.parameter(fs_data)
    ft = nx.parameter(ft_data)
    with Tape() as tape:
        raw, *_ = co.coattention_raw(fs, ft, si, ti, threads=threads, backend=backend)
        w = np.random.default_rng(0).normal(size=raw.shape)
        tape.backward(nx.sum(raw * w), [fs, ft])
    return raw.data, fs.grad, ft.grad


@pytest.mark.parametrize("backend", sorted(kernels.BACKENDS))
def test_threaded_is_bit_identical_to_serial(backend):
    fs, ft, _, _, si, ti, _ = _problem(7, bs=6, bt=6, pairs=25)
    serial = _coattn_grads(fs, ft, si, ti, 1, backend)
    for threads in (2, 3, 4):
        threaded = _coattn_grads(fs, ft, si, ti, threads, backend)
        for a, b in zip(serial, threaded):
            np.testing.assert_array_equal(a, b)


def test_environment_selects_fallback():
    env = dict(os.environ, TCON_KERNEL="python")
    out = subprocess.run([sys.executable, "-c", "from tcon import kernels; print(kernels.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"


def test_default_backend_prefers_compiled():
    expected = "compiled" if "compiled" in kernels.BACKENDS else "python"
    if os.environ.get("TCON_KERNEL") == "python":
        expected = "python"
    assert kernels.BACKEND == expected
