"""Pure-numpy ISVD kernels.

Same call signatures as the compiled ``_kernels_cy`` module. Signals are passed
packed in CSR form: signal ``s`` owns ``indices[indptr[s]:indptr[s+1]]`` (its
observed grid positions) and the matching slice of ``values``. ``U`` is a
C-contiguous ``(N, K)`` float64 array that :func:`sweep` rewrites in place.
"""

import numpy as np

BACKEND = "python"


def solve_weights(U, idx, vals, rcond):
    """Minimum-norm least squares of ``vals`` on the rows ``idx`` of ``U``."""
    return np.linalg.lstsq(U[idx], vals, rcond=rcond)[0]


def batch_weights(U, indptr, indices, values, rcond):
    nsig = indptr.size - 1
    W = np.empty((nsig, U.shape[1]))
    for s in range(nsig):
        lo, hi = indptr[s], indptr[s + 1]
        W[s] = solve_weights(U, indices[lo:hi], values[lo:hi], rcond)
    return W


def reorthonormalize(U):
    q, r = np.linalg.qr(U)
    d = np.sign(np.diag(r))
    d[d == 0] = 1.0
    U[...] = q * d


def rotation(w, rn):
    """Top left singular direction of ``[[I, w], [0, rn]]`` outside the unit-singular block.

    The middle matrix has ``K - 1`` singular values equal to one (directions
    orthogonal to ``w``); the remaining pair lives in the plane of ``(w/|w|, 0)``
    and ``(0, 1)``. Returns ``(cos, sin, |w|, w_dir)`` of the kept direction in that
    plane. For ``w = 0`` the last basis column plays the role of ``w_dir``.
    """
    K = w.size
    wn = float(np.sqrt(w @ w))
    if wn > 0.0:
        wdir = w / wn
    else:
        wdir = np.zeros(K)
        wdir[K - 1] = 1.0
    phi = 0.5 * np.arctan2(2.0 * rn * wn, 1.0 + wn * wn - rn * rn)
    return float(np.cos(phi)), float(np.sin(phi)), wn, wdir


def sweep(U, indptr, indices, values, updates, reorth_every, skip_rtol, rcond):
    """Apply one rank-preserving update per signal, in order.

    Returns ``(updates, residual_norms, signal_norms, weights, skipped)``.
    ``weights`` are the projections against the basis *before* each update.
    """
    N, K = U.shape
    nsig = indptr.size - 1
    res = np.empty(nsig)
    sig = np.empty(nsig)
    W = np.empty((nsig, K))
    skipped = np.zeros(nsig, dtype=np.uint8)
    for s in range(nsig):
        lo, hi = indptr[s], indptr[s + 1]
        idx = indices[lo:hi]
        x = values[lo:hi]
        w = solve_weights(U, idx, x, rcond)
        W[s] = w
        uw = U @ w
        xs2 = float(x @ x)
        if xs2 == 0.0:
            raise ValueError(f"signal {s} has an all-zero observed part")
        r = x - uw[idx]
        rn = float(np.sqrt(r @ r))
        uw_obs = uw[idx]
        xt2 = xs2 + max(0.0, float(uw @ uw) - float(uw_obs @ uw_obs))
        res[s] = rn
        sig[s] = np.sqrt(xs2)
        if rn > 0.0 and rn > skip_rtol * np.sqrt(xt2):
            c, d, wn, wdir = rotation(w, rn)
            # U_new = U + ((c - 1) U w_dir + d r/|r|) w_dir^T ; r vanishes off the observed rows
            if wn > 0.0:
                v = (c - 1.0) * (uw / wn)
            else:
                v = (c - 1.0) * U[:, K - 1]
            v[idx] += d * (r / rn)
            U += np.outer(v, wdir)
            updates += 1
            if reorth_every > 0 and updates % reorth_every == 0:
                reorthonormalize(U)
        else:
            skipped[s] = 1
    return updates, res, sig, W, skipped
