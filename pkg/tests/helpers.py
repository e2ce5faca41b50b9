"""Shared numeric helpers: finite differences and brute-force metric oracles.

The oracles here are deliberately written as plain double loops with
np.linalg.norm so they share no code path with the vectorized
implementations they check.
"""

import numpy as np


def fd_gradient(f, x, eps=1e-6):
    """Central-difference gradient of a scalar function of an array."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        xp = x.copy()
        xm = x.copy()
        xp[idx] += eps
        xm[idx] -= eps
        g[idx] = (f(xp) - f(xm)) / (2.0 * eps)
    return g


def rel_err(approx, exact):
    approx = np.asarray(approx, dtype=np.float64).ravel()
    exact = np.asarray(exact, dtype=np.float64).ravel()
    denom = max(float(np.linalg.norm(exact)), 1e-12)
    return float(np.linalg.norm(approx - exact) / denom)


def fd_directional(f, x, dx, eps=1e-6):
    """Central-difference directional derivative of scalar f along dx."""
    x = np.asarray(x, dtype=np.float64)
    dx = np.asarray(dx, dtype=np.float64)
    return (f(x + eps * dx) - f(x - eps * dx)) / (2.0 * eps)


def knn_radii_bruteforce(rows, k):
    rows = np.asarray(rows, dtype=np.float64)
    n = len(rows)
    radii = np.empty(n)
    for i in range(n):
        dists = sorted(np.linalg.norm(rows[i] - rows[j]) for j in range(n) if j != i)
        radii[i] = dists[k - 1]
    return radii


def precision_recall_bruteforce(real, fake, k):
    def fraction_on_manifold(queries, anchors, radii):
        hits = 0
        for q in queries:
            if any(np.linalg.norm(q - a) <= r for a, r in zip(anchors, radii)):
                hits += 1
        return hits / len(queries)

    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    real_radii = knn_radii_bruteforce(real, k)
    fake_radii = knn_radii_bruteforce(fake, k)
    precision = fraction_on_manifold(fake, real, real_radii)
    recall = fraction_on_manifold(real, fake, fake_radii)
    return precision, recall


def density_coverage_bruteforce(real, fake, k):
    real = np.asarray(real, dtype=np.float64)
    fake = np.asarray(fake, dtype=np.float64)
    radii = knn_radii_bruteforce(real, k)
    inside = 0
    for q in fake:
        inside += sum(
            1 for r, rad in zip(real, radii) if np.linalg.norm(q - r) <= rad
        )
    density = inside / (k * len(fake))
    covered = sum(
        1
        for r, rad in zip(real, radii)
        if any(np.linalg.norm(q - r) <= rad for q in fake)
    )
    return density, covered / len(real)


def fid_bruteforce(a, b):
    """Textbook Frechet distance via scipy's general-purpose matrix sqrt.

    Uses the asymmetric product form sqrtm(S1 @ S2), a genuinely different
    algorithm (Schur decomposition) from the eigh-based symmetric form.
    """
    import scipy.linalg

    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    mu1, mu2 = a.mean(axis=0), b.mean(axis=0)
    s1 = np.cov(a, rowvar=False)
    s2 = np.cov(b, rowvar=False)
    cross = scipy.linalg.sqrtm(s1 @ s2)
    if np.iscomplexobj(cross):
        cross = cross.real
    diff = mu1 - mu2
    return float(diff @ diff + np.trace(s1 + s2 - 2.0 * cross))


def random_spd(rng, dim, scale=1.0):
    a = rng.normal(size=(dim, dim))
    return scale * (a @ a.T) + 0.05 * np.eye(dim)
