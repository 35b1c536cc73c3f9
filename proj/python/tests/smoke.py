"""Python smoke tests for the _pharnet extension.

Run via ctest (PHARNET_MODULE_DIR points at the built module) or manually:
    PHARNET_MODULE_DIR=build python3 python/tests/smoke.py
"""

import os
import sys
import tempfile

sys.path.insert(0, os.environ.get("PHARNET_MODULE_DIR", "build"))

import numpy as np  # noqa: E402

import _pharnet as phar  # noqa: E402


def test_conv_identity():
    x = np.arange(1, 5, dtype=np.float32).reshape(1, 1, 2, 2)
    w = np.ones((1, 1, 1, 1), dtype=np.float32)
    b = np.zeros(1, dtype=np.float32)
    y = phar.conv2d(x, w, b, stride=1, padding=0)
    assert np.array_equal(y, x), "identity kernel must reproduce the input"


def test_masked_moments_match_numpy():
    rng = np.random.default_rng(3)
    f = rng.uniform(0.1, 1.0, size=(2, 4, 8, 8)).astype(np.float32)
    m = np.zeros((2, 1, 8, 8), dtype=np.float32)
    m[:, :, 2:6, 1:7] = 1.0
    mu, sd = phar.masked_moments(f, m)
    sel = f[:, :, 2:6, 1:7]
    ref_mu = sel.mean(axis=(2, 3))
    ref_sd = np.sqrt(sel.var(axis=(2, 3)) + 1e-5)
    assert np.allclose(mu[:, :, 0, 0], ref_mu, atol=1e-5)
    assert np.allclose(sd[:, :, 0, 0], ref_sd, atol=1e-5)


def test_adain_transfers_statistics():
    rng = np.random.default_rng(5)
    fc = rng.uniform(0.1, 1.0, size=(1, 6, 16, 16)).astype(np.float32)
    fs = rng.uniform(0.2, 0.9, size=(1, 6, 16, 16)).astype(np.float32)
    m = np.zeros((1, 1, 16, 16), dtype=np.float32)
    m[:, :, 4:12, 4:12] = 1.0
    fa = phar.adain_stylize(fc, fs, m)
    # background bit-exact
    outside = m[0, 0] == 0.0
    assert np.array_equal(fa[0][:, outside], fc[0][:, outside])
    # foreground moments match whole-map background moments
    inside = fa[0][:, m[0, 0] == 1.0]
    assert np.allclose(inside.mean(axis=1), fs[0].mean(axis=(1, 2)), rtol=1e-4)
    ref_sd = np.sqrt(fs[0].var(axis=(1, 2)) + 1e-5)
    got_sd = np.sqrt(inside.var(axis=1) + 1e-5)
    assert np.allclose(got_sd, ref_sd, rtol=1e-3)


def test_mask_pyramid():
    m = np.zeros((1, 1, 32, 32), dtype=np.float32)
    m[0, 0, 0, 0] = 1.0
    levels = phar.resize_mask_pyramid(m)
    assert len(levels) == 4
    for k, level in enumerate(levels):
        assert level.shape == (1, 1, 32 >> k, 32 >> k)
        assert level.sum() == 1.0, "a single pixel survives every level"


def test_harmonizer_shapes():
    h = phar.Harmonizer(scale=8, seed=1)
    rng = np.random.default_rng(7)
    bg = rng.uniform(0.0, 1.0, size=(1, 3, 64, 64)).astype(np.float32)
    comp = bg.copy()
    mask = np.zeros((1, 1, 64, 64), dtype=np.float32)
    mask[:, :, 16:40, 16:40] = 1.0
    comp[:, :, 16:40, 16:40] = rng.uniform(0.3, 0.7, size=(1, 3, 24, 24))
    out, soft = h.harmonize(comp, bg, mask)
    assert out.shape == (1, 3, 64, 64)
    assert soft.shape == (1, 1, 64, 64)
    assert np.isfinite(out).all()
    # determinism
    out2, _ = h.harmonize(comp, bg, mask)
    assert np.array_equal(out, out2)


def test_bt_fit():
    scores = phar.bt_fit(["a", "b"], [[0.0, 10.0], [10.0, 0.0]])
    assert abs(scores["a"]) < 1e-9 and abs(scores["b"]) < 1e-9
    scores = phar.bt_fit(["a", "b"], [[0.0, 10.0], [0.0, 0.0]])
    assert scores["a"] > scores["b"]


def test_image_roundtrip():
    rng = np.random.default_rng(11)
    img = rng.uniform(0.0, 1.0, size=(1, 3, 9, 7)).astype(np.float32)
    with tempfile.TemporaryDirectory() as d:
        path = os.path.join(d, "t.ppm")
        phar.save_image(img, path)
        back = phar.load_image(path)
        assert back.shape == img.shape
        assert np.allclose(back, np.round(img * 255) / 255, atol=1e-6)


def main():
    tests = [v for k, v in sorted(globals().items()) if k.startswith("test_")]
    for test in tests:
        test()
        print(f"ok: {test.__name__}")
    print(f"{len(tests)} python smoke tests passed")


if __name__ == "__main__":
    main()
