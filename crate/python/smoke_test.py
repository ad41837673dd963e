"""Smoke test for the softattn extension module.

Build it first with `cargo build --release -p soft-attn-py` (or `maturin develop`
inside crates/python), then run `python3 python/smoke_test.py`.
"""

import importlib.machinery
import importlib.util
import os
import pathlib
import sys

import numpy as np

ROOT = pathlib.Path(__file__).resolve().parent.parent


def load():
    try:
        import softattn

        return softattn
    except ImportError:
        pass
    candidates = [os.environ.get("SOFTATTN_LIB")] + [
        str(ROOT / "target" / profile / "libsoftattn.so") for profile in ("release", "debug")
    ]
    for path in filter(None, candidates):
        if os.path.exists(path):
            loader = importlib.machinery.ExtensionFileLoader("softattn", path)
            spec = importlib.util.spec_from_file_location("softattn", path, loader=loader)
            module = importlib.util.module_from_spec(spec)
            loader.exec_module(module)
            return module
    sys.exit("softattn extension not found; build it with cargo build --release -p soft-attn-py")


def main():
    sa = load()
    rng = np.random.default_rng(0)

    q = rng.normal(size=(64, 16))
    v = rng.normal(size=(64, 8))

    k = np.array(sa.gaussian_kernel(q.tolist(), q.tolist()))
    d2 = ((q[:, None, :] - q[None, :, :]) ** 2).sum(-1)
    assert np.allclose(k, np.exp(-d2 / (2 * np.sqrt(16))), atol=1e-12)

    a = k[:49, :49]
    res = sa.newton_pinv(a.tolist(), iterations=20)
    assert res.final_residual < 1e-5, res
    assert np.allclose(np.array(res.inverse), np.linalg.pinv(a), rtol=1e-4, atol=1e-6)
    assert np.allclose(np.array(sa.svd_pinv(a.tolist())), np.linalg.pinv(a), atol=1e-8)

    attn = sa.SoftAttention(16, 8, 8, heads=1, sampling="pool", window=2, normalized=True)
    out, diag = attn(q.tolist(), v.tolist())
    shat = np.array(attn.materialize(q.tolist())[0])
    assert np.abs(np.array(out) - shat @ v).max() < 1e-8
    assert attn.m == 16 and diag["m"] == 16

    exact = sa.SoftAttention(16, 8, 8, sampling="pool", window=1, normalized=False)
    full = np.array(exact.materialize(q.tolist())[0])
    assert np.linalg.norm(full - k) / np.linalg.norm(k) < 1e-5

    ok, lam = sa.check_softmax_bound((q * 50).tolist())
    assert ok and lam <= 1 + 1e-8
    ok, lam, tr = sa.check_gram_bound(q.tolist())
    assert ok and abs(tr - 64) < 1e-6

    sm = np.array(sa.softmax_attention(q.tolist(), q.tolist(), v.tolist()))
    logits = q @ q.T / np.sqrt(16)
    w = np.exp(logits - logits.max(1, keepdims=True))
    assert np.allclose(sm, (w / w.sum(1, keepdims=True)) @ v, atol=1e-12)

    try:
        sa.SoftAttention(16, 8, 8, sampling="dither")
    except ValueError:
        pass
    else:
        raise AssertionError("unknown sampling accepted")

    init, hist = sa.train_toy(epochs=2, samples=128)
    assert len(hist) == 2 and all(np.isfinite(row[1]) for row in hist)

    print("softattn smoke test passed")


if __name__ == "__main__":
    main()
