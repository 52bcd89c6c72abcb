"""Shared builders for the test suite."""

import numpy as np

from umm.losses import BatchCandidates, _soft_bins


def unit_rows(rng, shape):
    v = rng.standard_normal(shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def random_batch(rng, n, k, d):
    return BatchCandidates(unit_rows(rng, (n, k, d)), unit_rows(rng, (n, k, d)))


def kink_free_mask(z, bins, step):
    """True for coordinates of ``z`` (n, k, D) whose +-step perturbation keeps every bin index.

    Only those coordinates have a well-defined central difference for the
    histogram ranking loss.
    """
    n, k, d = z.shape
    flat = z.reshape(-1, d)
    mask = np.ones(z.size, dtype=bool)

    def bin_ids(rows):
        sims = rows @ rows.T
        np.fill_diagonal(sims, 1.0)
        lo, _, _ = _soft_bins(sims, bins)
        return lo

    base = bin_ids(flat)
    for c in range(z.size):
        for sgn in (1.0, -1.0):
            pert = flat.copy().reshape(-1)
            pert[c] += sgn * step
            if not np.array_equal(bin_ids(pert.reshape(-1, d)), base):
                mask[c] = False
    return mask.reshape(z.shape)
