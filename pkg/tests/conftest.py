import math

import numpy as np
import pytest

from corrverify.encoder4d import EncoderConfig


def conv2d_loops(x, k, stride=1, pad=0):
    """Direct nested-loop cross-correlation, float64."""
    cin, h, w = x.shape
    cout, _, kh, kw = k.shape
    xp = np.pad(np.asarray(x, dtype=np.float64), ((0, 0), (pad, pad), (pad, pad)))
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (w + 2 * pad - kw) // stride + 1
    y = np.zeros((cout, oh, ow))
    for o in range(cout):
        for i in range(oh):
            for j in range(ow):
                acc = 0.0
                for c in range(cin):
                    for a in range(kh):
                        for b in range(kw):
                            acc += xp[c, i * stride + a, j * stride + b] * k[o, c, a, b]
                y[o, i, j] = acc
    return y


def bilinear_point(src, y, x):
    """Half-pixel bilinear sample of a 2D grid at output-space source coordinates."""
    h, w = src.shape
    y = max(y, 0.0)
    x = max(x, 0.0)
    y0, x0 = min(int(math.floor(y)), h - 1), min(int(math.floor(x)), w - 1)
    y1, x1 = min(y0 + 1, h - 1), min(x0 + 1, w - 1)
    ly, lx = y - y0, x - x0
    top = src[y0, x0] * (1 - lx) + src[y0, x1] * lx
    bot = src[y1, x0] * (1 - lx) + src[y1, x1] * lx
    return top * (1 - ly) + bot * ly


def bilinear_loops(src, out_h, out_w):
    c, h, w = src.shape
    out = np.zeros((c, out_h, out_w))
    for ch in range(c):
        for i in range(out_h):
            for j in range(out_w):
                sy = (i + 0.5) * h / out_h - 0.5
                sx = (j + 0.5) * w / out_w - 0.5
                out[ch, i, j] = bilinear_point(src[ch].astype(np.float64), sy, sx)
    return out


def cosine_loops(fq, fk):
    """ReLU cosine between every query and key position, by explicit loops."""
    _, hq, wq = fq.shape
    _, hk, wk = fk.shape
    out = np.zeros((hq, wq, hk, wk))
    for a in range(hq):
        for b in range(wq):
            u = fq[:, a, b].astype(np.float64)
            for c in range(hk):
                for d in range(wk):
                    v = fk[:, c, d].astype(np.float64)
                    nu, nv = np.linalg.norm(u), np.linalg.norm(v)
                    out[a, b, c, d] = 0.0 if nu == 0 or nv == 0 else max(0.0, u @ v / (nu * nv))
    return out


def brute_force_volume(pq, pk):
    """All S^2 loop-cosine slices, each resized on both sides with the pointwise bilinear oracle."""
    s = len(pq)
    _, hq, wq = pq.levels[0].shape
    _, hk, wk = pk.levels[0].shape
    out = np.zeros((s * s, hq, wq, hk, wk))
    for a in range(s):
        for b in range(s):
            c = cosine_loops(pq.levels[a], pk.levels[b])
            ha, wa, hb, wb = c.shape
            # key side first: treat the query grid as channels
            t = bilinear_loops(c.reshape(ha * wa, hb, wb), hk, wk).reshape(ha, wa, hk, wk)
            t = t.transpose(2, 3, 0, 1).reshape(hk * wk, ha, wa)
            t = bilinear_loops(t, hq, wq).reshape(hk, wk, hq, wq).transpose(2, 3, 0, 1)
            out[a * s + b] = t
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return EncoderConfig(num_scales=2, feature_channels=3, reduced_channels=4,
                         block_channels=(4, 4), convs_per_block=1, mlp_hidden=5)


def fine_difference_error(f, x, analytic, probes=20, step=1e-6, seed=0):
    """Largest relative gap between ``analytic`` and small-step central differences.

    For end-to-end paths through many ReLUs, where a kink often lies within
    the coarser steps ``grad_check`` allows.
    """
    idx = np.random.default_rng(seed).choice(x.size, size=min(probes, x.size), replace=False)
    scale = max(float(np.max(np.abs(analytic))), 1e-12)
    worst = 0.0
    for i in idx:
        xp, xm = x.copy(), x.copy()
        xp.reshape(-1)[i] += step
        xm.reshape(-1)[i] -= step
        fd = (f(xp) - f(xm)) / (2 * step)
        worst = max(worst, abs(fd - analytic.reshape(-1)[i]) / scale)
    return worst


# acceptance results, printed as one line per criterion at the end of the run
ACCEPTANCE = {}


def record_acceptance(number, title, passed, detail):
    ACCEPTANCE[number] = (title, passed, detail)
    print(f"ACCEPTANCE {number} {'PASS' if passed else 'FAIL'}: {title} ({detail})")


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE):
        title, passed, detail = ACCEPTANCE[number]
        terminalreporter.write_line(f"{number}. {'PASS' if passed else 'FAIL'}  {title}: {detail}")
