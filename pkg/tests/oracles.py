"""Independent reference implementations used to derive frozen test values."""

import math

import numpy as np


def alpha_bar_direct(kind, n, b0, b1, t):
    """Product of (1 - beta_i) for i = 1..t, computed term by term."""
    prod = 1.0
    for i in range(t):
        frac = i / (n - 1) if n > 1 else 0.0
        if kind == "linear":
            beta = b0 + frac * (b1 - b0)
        else:
            beta = (math.sqrt(b0) + frac * (math.sqrt(b1) - math.sqrt(b0))) ** 2
        prod *= 1.0 - beta
    return prod


def ddim_move(z, eps, a_from, a_to):
    """Deterministic DDIM update in float64 numpy."""
    z = np.asarray(z, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    x0 = (z - np.sqrt(1 - a_from) * eps) / np.sqrt(a_from)
    return np.sqrt(a_to) * x0 + np.sqrt(1 - a_to) * eps


def mmd2_bruteforce(x, y):
    """Unbiased MMD^2 with k(a, b) = (a.b/d + 1)^3, explicit double loops."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    d = x.shape[1]
    k = lambda a, b: (float(np.dot(a, b)) / d + 1.0) ** 3  # noqa: E731
    m, n = len(x), len(y)
    sxx = sum(k(x[i], x[j]) for i in range(m) for j in range(m) if i != j) / (m * (m - 1))
    syy = sum(k(y[i], y[j]) for i in range(n) for j in range(n) if i != j) / (n * (n - 1))
    sxy = sum(k(x[i], y[j]) for i in range(m) for j in range(n)) / (m * n)
    return sxx + syy - 2 * sxy


def laplacian_variance(gray):
    """Variance of the 4-neighbour Laplacian over interior pixels, by loops."""
    g = np.asarray(gray, dtype=np.float64)
    h, w = g.shape
    vals = []
    for i in range(1, h - 1):
        for j in range(1, w - 1):
            vals.append(g[i - 1, j] + g[i + 1, j] + g[i, j - 1] + g[i, j + 1] - 4 * g[i, j])
    return float(np.var(vals))


def noun_rule(age, gender, enhanced):
    if not enhanced:
        return "person"
    child = age is not None and age < 15
    return {("male", True): "boy", ("female", True): "girl", ("male", False): "man", ("female", False): "woman"}[
        (gender, child)
    ]
