"""Independent reference implementations shared by the unit and acceptance tests."""

import numpy as np


def sweep_eer(scores, labels):
    """Count FAR/FRR directly at every candidate threshold, then interpolate the crossing."""
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=bool)
    tgt, non = s[y], s[~y]
    thresholds = sorted(set(s.tolist())) + [np.inf]
    far, frr = [], []
    for i in range(0, len(thresholds), 512):
        th = np.array(thresholds[i:i + 512])[:, None]
        far.extend((non[None, :] >= th).mean(axis=1))
        frr.extend((tgt[None, :] < th).mean(axis=1))
    for i, (a, r) in enumerate(zip(far, frr)):
        if a - r <= 0:
            if i == 0 or a == r:
                return a
            d0, d1 = far[i - 1] - frr[i - 1], a - r
            w = d0 / (d0 - d1)
            return far[i - 1] + w * (a - far[i - 1])
    raise AssertionError("no crossing")


def random_eer_instance(rng, n):
    n_t = int(rng.integers(1, n))
    y = np.zeros(n, dtype=bool)
    y[rng.choice(n, n_t, replace=False)] = True
    s = rng.standard_normal(n) + 1.5 * rng.random() * y
    if rng.random() < 0.4:
        s = np.round(s, 1)
    return s, y


def brute_force_assign(x, c):
    """Nearest centroid by plain Python loops, first index on ties."""
    out = []
    for row in x:
        best, best_d = 0, None
        for j, cj in enumerate(c):
            d = sum((float(a) - float(b)) ** 2 for a, b in zip(row, cj))
            if best_d is None or d < best_d:
                best, best_d = j, d
        out.append(best)
    return np.array(out)


def cosine_loss_closed_form(X, Y):
    return sum(1 - float(x @ y) / (np.sqrt(x @ x) * np.sqrt(y @ y)) for x, y in zip(X, Y)) / len(X)


def central_difference(f, Y, h=1e-6):
    g = np.zeros_like(Y)
    for idx in np.ndindex(*Y.shape):
        up, dn = Y.copy(), Y.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g
