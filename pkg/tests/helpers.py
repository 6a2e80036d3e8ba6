"""Shared test oracles: all independent, deliberately slow reference paths.

The convolution oracle is a literal seven-loop sliding window, the SSIM
oracle evaluates the formula window by window, and the gradient checker
uses central finite differences.  None of them share code with the fast
paths they verify.
"""

import math

import numpy as np

from mscanet.engine import Tape


def conv2d_naive(x, w, b, stride=1, dilation=1, padding=None):
    """Direct sliding-window convolution, one loop per index."""
    n, c_in, h, wd = x.shape
    c_out, _, k, _ = w.shape
    if padding is None:
        padding = ((k - 1) * dilation) // 2
    p = padding
    hp, wp = h + 2 * p, wd + 2 * p
    xp = np.zeros((n, c_in, hp, wp), dtype=np.float64)
    xp[:, :, p : p + h, p : p + wd] = x
    span = (k - 1) * dilation + 1
    h_out = (hp - span) // stride + 1
    w_out = (wp - span) // stride + 1
    out = np.zeros((n, c_out, h_out, w_out), dtype=np.float64)
    for ni in range(n):
        for co in range(c_out):
            for i in range(h_out):
                for j in range(w_out):
                    acc = b[co]
                    for ci in range(c_in):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (
                                    xp[ni, ci, i * stride + ki * dilation, j * stride + kj * dilation]
                                    * w[co, ci, ki, kj]
                                )
                    out[ni, co, i, j] = acc
    return out


def gradcheck(build_loss, tensors, h=1e-5, tol=1e-4, max_coords=None, rng=None,
              floor=1e-8):
    """Central finite-difference check against tape gradients.

    ``build_loss`` must run a fresh forward pass over the current tensor
    values and return a scalar engine tensor.  Returns the worst relative
    error seen; coordinates where both gradients are below ``floor`` are
    treated as matching zeros.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    analytic = []
    for t in tensors:
        assert t.grad is not None, "no gradient reached a checked tensor"
        analytic.append(t.grad.copy())

    worst = 0.0
    for t, ana in zip(tensors, analytic):
        flat = t.data.reshape(-1)
        ana_flat = ana.reshape(-1)
        if max_coords is not None and flat.size > max_coords:
            assert rng is not None
            coords = rng.choice(flat.size, size=max_coords, replace=False)
        else:
            coords = range(flat.size)
        for i in coords:
            orig = flat[i]
            flat[i] = orig + h
            f_plus = build_loss().item()
            flat[i] = orig - h
            f_minus = build_loss().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * h)
            denom = max(abs(numeric), abs(ana_flat[i]))
            if denom < floor:
                continue
            worst = max(worst, abs(numeric - ana_flat[i]) / denom)
    return worst


def gradcheck_directional(build_loss, tensors, probes=10, h=1e-5, seed=2024):
    """Central finite differences along random unit directions in the full
    parameter space.

    Per-coordinate differences on a deep ReLU network divide kink noise
    by tiny per-coordinate gradients; the directional derivative is
    dominated by the whole gradient, so it verifies the same backward
    pass without that ill-conditioning.  Returns the worst relative
    error over the probes.
    """
    for t in tensors:
        t.grad = None
    with Tape() as tape:
        loss = build_loss()
        tape.backward(loss)
    grads = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(probes):
        vs = [rng.standard_normal(t.shape) for t in tensors]
        norm = math.sqrt(sum(float((v * v).sum()) for v in vs))
        vs = [v / norm for v in vs]
        analytic = sum(float((g * v).sum()) for g, v in zip(grads, vs))
        saved = [t.data.copy() for t in tensors]
        for t, v in zip(tensors, vs):
            t.data = t.data + h * v
        f_plus = build_loss().item()
        for t, s, v in zip(tensors, saved, vs):
            t.data = s - h * v
        f_minus = build_loss().item()
        for t, s in zip(tensors, saved):
            t.data = s
        numeric = (f_plus - f_minus) / (2.0 * h)
        worst = max(worst, abs(numeric - analytic) / max(abs(numeric), abs(analytic), 1e-12))
    return worst


def bilinear_2x_oracle_2x2():
    """Hand-evaluated half-pixel bilinear upsample of [[0,1],[2,3]] to 4x4.

    Output sample i maps to input position (i + 0.5)/2 - 0.5, clamped:
    rows sample y = 0, 0.25, 0.75, 1 and columns likewise.
    """
    return np.array(
        [
            [0.0, 0.25, 0.75, 1.0],
            [0.5, 0.75, 1.25, 1.5],
            [1.5, 1.75, 2.25, 2.5],
            [2.0, 2.25, 2.75, 3.0],
        ]
    )


def knn_mean_brute(points, k):
    """Exhaustive-sort nearest-neighbor mean distances.

    Distances use sqrt(dx*dx + dy*dy) in plain float64 (not math.dist's
    scaled hypot) so the comparison against the vectorized path can be
    bit-exact.
    """
    pts = np.asarray(points, dtype=np.float64)
    out = []
    for i in range(len(pts)):
        dists = sorted(
            math.sqrt(
                (pts[i][0] - pts[j][0]) * (pts[i][0] - pts[j][0])
                + (pts[i][1] - pts[j][1]) * (pts[i][1] - pts[j][1])
            )
            for j in range(len(pts))
            if j != i
        )
        take = dists[: min(k, len(dists))]
        out.append(sum(take) / len(take) if take else float("nan"))
    return np.asarray(out)


def psnr_direct(pred, gt):
    """Direct-formula PSNR with the shared gt-peak scaling."""
    peak = gt.max()
    p = pred / peak
    g = gt / peak
    mse = float(np.mean((p - g) ** 2))
    if mse < 1e-10:
        return 100.0
    return 10.0 * math.log10(1.0 / mse)


def ssim_direct(pred, gt, window=11, sigma=1.5, k1=0.01, k2=0.03):
    """Window-by-window SSIM evaluation, no vectorized fast path."""
    peak = gt.max()
    p = pred / peak
    g = gt / peak
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    kern1 = np.exp(-(ax * ax) / (2.0 * sigma * sigma))
    kern = kern1[:, None] * kern1[None, :]
    kern /= kern.sum()
    c1, c2 = k1 * k1, k2 * k2
    h, w = g.shape
    vals = []
    for i in range(h - window + 1):
        for j in range(w - window + 1):
            pw = p[i : i + window, j : j + window]
            gw = g[i : i + window, j : j + window]
            mp = float((kern * pw).sum())
            mg = float((kern * gw).sum())
            vp = float((kern * pw * pw).sum()) - mp * mp
            vg = float((kern * gw * gw).sum()) - mg * mg
            cov = float((kern * pw * gw).sum()) - mp * mg
            num = (2 * mp * mg + c1) * (2 * cov + c2)
            den = (mp * mp + mg * mg + c1) * (vp + vg + c2)
            vals.append(num / den)
    return float(np.mean(vals))


def gaussian_peak_pixels(x, y, sigma, width, height, threshold):
    """Count pixels whose normalized truncated Gaussian value >= threshold.

    Direct evaluation of one head's kernel placed the same way the
    density builder places it (3-sigma window, unit normalization).
    """
    r = int(math.ceil(3.0 * sigma))
    cx = int(math.floor(x + 0.5))
    cy = int(math.floor(y + 0.5))
    total = 0.0
    vals = {}
    for py in range(cy - r, cy + r + 1):
        for px in range(cx - r, cx + r + 1):
            v = math.exp(-((px - x) ** 2 + (py - y) ** 2) / (2 * sigma * sigma))
            vals[(px, py)] = v
            total += v
    count = 0
    for (px, py), v in vals.items():
        if 0 <= px < width and 0 <= py < height and v / total >= threshold:
            count += 1
    return count
