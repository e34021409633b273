"""Shared generators for the solver test batteries."""

import numpy as np


def signed_spectrum(rng, n, cond):
    """Signed eigenvalue magnitudes spanning [1/cond, 1].

    Above cond 1e2 the magnitudes are drawn from a few log-spaced levels:
    finite-precision Lanczos on a filled indefinite spectrum needs O(cond)
    iterations, while clustered spectra keep the exact-arithmetic iteration
    counts, which is also how the saddle-point systems this library builds
    actually look (damping block plus a low-rank constraint border).
    """
    if cond > 1e2 and n > 3:
        mmax = 6 if cond > 1e8 else (8 if cond > 1e5 else 16)
        m = int(rng.integers(3, min(n, mmax) + 1))
        levels = np.exp(np.linspace(np.log(1.0 / cond), 0.0, m))
        mags = levels[rng.integers(0, m, n)]
    else:
        mags = np.exp(rng.uniform(np.log(1.0 / cond), 0.0, n))
    mags[0] = 1.0
    if n >= 2:
        mags[1] = 1.0 / cond
    return mags * rng.choice([-1.0, 1.0], n)


def random_symmetric_system(rng):
    """One conformance case: (B, b, x_star, cond, deficient).

    Sizes 2..200, condition numbers up to 1e10 (smaller and more clustered
    at the extreme end), ranks full and deficient, right-hand sides both
    consistent and inconsistent.  x_star is the pseudoinverse solution
    computed exactly from the eigenfactors.
    """
    n = int(rng.integers(2, 201))
    cond = 10.0 ** rng.uniform(0, 10)
    deficient = rng.random() < 0.3
    consistent = rng.random() < 0.5
    if cond > 2e9:
        # at the extreme end assemble a random diagonal system: rotating the
        # basis rounds matrix entries by eps * ||B||, which already perturbs
        # the true solution by ~ eps * cond -- more than the tolerance
        # being verified; a diagonal matrix keeps the oracle exact
        n = min(n, 60)
        levels = np.exp(np.linspace(np.log(1.0 / cond), 0.0, 3))
        mags = levels[rng.integers(0, 3, n)]
        mags[0] = 1.0
        mags[1] = 1.0 / cond
        lam = mags * rng.choice([-1.0, 1.0], n)
        B = np.diag(lam)
        b = rng.standard_normal(n)
        b /= np.linalg.norm(b)
        x_star = b / lam
        return B, b, x_star, cond, False
    if cond > 1e9:
        n = min(n, 40)
    q, _ = np.linalg.qr(rng.standard_normal((n, n)))
    if cond > 1e9:
        levels = np.exp(np.linspace(np.log(1.0 / cond), 0.0, 3))
        mags = levels[rng.integers(0, 3, n)]
        mags[0] = 1.0
        mags[1] = 1.0 / cond
        lam = mags * rng.choice([-1.0, 1.0], n)
    elif deficient and n >= 3:
        # exact rank deficiency over a benign nonzero block, the shape
        # duplicated constraint rows produce
        lam = signed_spectrum(rng, n, min(cond, 1e4))
        k = int(rng.integers(1, max(2, n // 2 + 1)))
        idx = rng.choice(n, size=min(k, n - 2), replace=False)
        lam[idx] = 0.0
    else:
        lam = signed_spectrum(rng, n, cond)
    B = (q * lam) @ q.T
    B = (B + B.T) / 2
    b = rng.standard_normal(n)
    b /= np.linalg.norm(b)
    if consistent and (lam == 0).any():
        nz = lam != 0
        b = q[:, nz] @ (q[:, nz].T @ b)
        b /= max(np.linalg.norm(b), 1e-30)
    inv = np.where(lam != 0, 1.0 / np.where(lam == 0, 1.0, lam), 0.0)
    x_star = q @ (inv * (q.T @ b))
    deficient = bool((lam == 0).any())
    return B, b, x_star, cond, deficient


def dense_random_mlp(rng, max_hidden=3, max_width=64, in_dim=None, out_dim=None):
    """Widths for a random small ReLU network."""
    din = in_dim or int(rng.integers(2, 9))
    dout = out_dim or int(rng.integers(1, 9))
    hidden = [int(rng.integers(2, max_width + 1)) for _ in range(int(rng.integers(0, max_hidden + 1)))]
    return [din] + hidden + [dout]
