"""Compiled stepping for systems whose joint drift is affine, ``F(u) = b - A u``.

Long single-trajectory runs of the Gaussian model need millions of steps,
which the generic numpy kernels cannot do at desk scale.  The loops here
run the same EM and S-ROCK recursions on the flattened joint vector
``u = (theta, z)`` and consume the same standard-normal draws, so results
agree with :func:`spcd.integrators.em_step` / ``srock_step`` to rounding.
All loops are explicit (no BLAS), so output does not depend on threading.
"""

import numpy as np
from numba import njit

EM, SROCK = 0, 1


@njit(cache=True)
def _drift(A, b, u, out):
    D = u.shape[0]
    for i in range(D):
        acc = b[i]
        for j in range(D):
            acc -= A[i, j] * u[j]
        out[i] = acc


@njit(cache=True)
def advance_block(u, A, b, sig, xi, h, method, m, d_theta, thresh, out_theta, out_znorm):
    """Advance every replica row of ``u`` through ``xi.shape[0]`` steps.

    ``sig`` scales the normals: the full one-step noise for EM, the stage
    ``m - 1`` noise for S-ROCK.  Writes theta and |z| after each step into
    ``out_theta`` / ``out_znorm``.  Returns the number of steps completed;
    a value below ``xi.shape[0]`` means the last written step diverged.
    """
    n_steps, R, D = xi.shape
    f = np.empty(D)
    k0 = np.empty(D)
    k1 = np.empty(D)
    k2 = np.empty(D)
    for s in range(n_steps):
        bad = False
        for r in range(R):
            if method == EM:
                _drift(A, b, u[r], f)
                for i in range(D):
                    u[r, i] = u[r, i] + h * f[i] + sig[i] * xi[s, r, i]
            else:
                k = h / (m * m)
                for i in range(D):
                    k0[i] = u[r, i]
                _drift(A, b, k0, f)
                for i in range(D):
                    k1[i] = k0[i] + k * f[i]
                    if m == 2:
                        k1[i] += sig[i] * xi[s, r, i]
                for stage in range(2, m + 1):
                    _drift(A, b, k1, f)
                    for i in range(D):
                        k2[i] = 2 * k * f[i] + 2 * k1[i] - k0[i]
                        if stage == m - 1:
                            k2[i] += sig[i] * xi[s, r, i]
                    for i in range(D):
                        k0[i] = k1[i]
                        k1[i] = k2[i]
                for i in range(D):
                    u[r, i] = k1[i]
            zn = 0.0
            for i in range(D):
                v = u[r, i]
                if not (abs(v) <= thresh):
                    bad = True
                if i < d_theta:
                    out_theta[s, r, i] = v
                else:
                    zn += v * v
            out_znorm[s, r] = np.sqrt(zn)
        if bad:
            return s + 1
    return n_steps
