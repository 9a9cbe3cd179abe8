"""Hot loops: sparse Cholesky, triangular solves, matvec and the Metropolis sweep.

Every kernel is written in the numba-compatible subset of Python. When numba is
importable and ``NGINLA_DISABLE_NUMBA`` is unset (or ``0``) the kernels are
compiled with ``@njit``; otherwise the same functions run as plain Python and
:mod:`nginla.linalg` routes factorizations through dense LAPACK instead.
"""
from __future__ import annotations

import math
import os

import numpy as np

_FLAG = os.environ.get("NGINLA_DISABLE_NUMBA", "0").strip().lower()

try:  # pragma: no cover - depends on the environment
    import numba

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    numba = None
    HAVE_NUMBA = False

USE_NUMBA = HAVE_NUMBA and _FLAG in ("", "0", "false", "no")


def _jit(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, nogil=True)(fn)
    return fn


# ---------------------------------------------------------------------------
# sparse symmetric matrices, full (both triangles) CSC storage
# ---------------------------------------------------------------------------


@_jit
def etree(n, Ap, Ai):
    """Elimination tree of a symmetric CSC matrix (upper entries are used)."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@_jit
def _ereach(Ap, Ai, k, parent, s, w):
    # pattern of row k of L, in topological order, returned in s[top:n]
    n = parent.shape[0]
    top = n
    w[k] = k
    for p in range(Ap[k], Ap[k + 1]):
        i = Ai[p]
        if i > k:
            continue
        length = 0
        while w[i] != k:
            s[length] = i
            length += 1
            w[i] = k
            i = parent[i]
        while length > 0:
            top -= 1
            length -= 1
            s[top] = s[length]
    return top


@_jit
def symbolic_cholesky(n, Ap, Ai, parent):
    """Column pointers of L for the given pattern and elimination tree."""
    counts = np.ones(n, dtype=np.int64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w)
        for t in range(top, n):
            counts[s[t]] += 1
    Lp = np.zeros(n + 1, dtype=np.int64)
    for k in range(n):
        Lp[k + 1] = Lp[k] + counts[k]
    return Lp


@_jit
def numeric_cholesky(n, Ap, Ai, Ax, parent, Lp, tol):
    """Up-looking Cholesky. Returns (Li, Lx, failed_column); -1 means success.

    A pivot (squared diagonal of L) at or below ``tol`` aborts the factorization.
    """
    nnz = Lp[n]
    Li = np.empty(nnz, dtype=np.int64)
    Lx = np.empty(nnz, dtype=np.float64)
    c = Lp[:n].copy()
    x = np.zeros(n, dtype=np.float64)
    s = np.empty(n, dtype=np.int64)
    w = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        top = _ereach(Ap, Ai, k, parent, s, w)
        x[k] = 0.0
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            if i <= k:
                x[i] += Ax[p]
        d = x[k]
        x[k] = 0.0
        for t in range(top, n):
            i = s[t]
            lki = x[i] / Lx[Lp[i]]
            x[i] = 0.0
            for p in range(Lp[i] + 1, c[i]):
                x[Li[p]] -= Lx[p] * lki
            d -= lki * lki
            p = c[i]
            c[i] += 1
            Li[p] = k
            Lx[p] = lki
        if not d > tol:
            return Li, Lx, k
        p = c[k]
        c[k] += 1
        Li[p] = k
        Lx[p] = math.sqrt(d)
    return Li, Lx, -1


@_jit
def lsolve(n, Lp, Li, Lx, b):
    """Solve L x = b for lower-triangular CSC L (diagonal first in each column)."""
    x = b.copy()
    for j in range(n):
        x[j] /= Lx[Lp[j]]
        xj = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            x[Li[p]] -= Lx[p] * xj
    return x


@_jit
def ltsolve(n, Lp, Li, Lx, b):
    """Solve L^T x = b for lower-triangular CSC L."""
    x = b.copy()
    for j in range(n - 1, -1, -1):
        acc = x[j]
        for p in range(Lp[j] + 1, Lp[j + 1]):
            acc -= Lx[p] * x[Li[p]]
        x[j] = acc / Lx[Lp[j]]
    return x


@_jit
def csc_matvec(n, Ap, Ai, Ax, v):
    out = np.zeros(n, dtype=np.float64)
    for j in range(n):
        vj = v[j]
        if vj == 0.0:
            continue
        for p in range(Ap[j], Ap[j + 1]):
            out[Ai[p]] += Ax[p] * vj
    return out


@_jit
def pin_coordinates(n, Ap, Ai, Ax, diag_pos, pinned):
    """Zero rows/columns of the pinned coordinates and put 1 on their diagonal."""
    for j in range(n):
        for p in range(Ap[j], Ap[j + 1]):
            if pinned[j] or pinned[Ai[p]]:
                Ax[p] = 0.0
    for j in range(n):
        if pinned[j]:
            Ax[diag_pos[j]] = 1.0


# ---------------------------------------------------------------------------
# Metropolis sweep over the exact (non-reformulated) joint density
# ---------------------------------------------------------------------------
# likelihood family codes
LIK_EXPONENTIAL = 0
LIK_GAUSSIAN = 1
LIK_STUDENT_T = 2
# latent prior codes; per component: pidx = (hyper index a, hyper index b),
# pconst = (mean, constant a, constant b). A negative index means "use the constant".
PRIOR_GAUSSIAN = 0  # mean pconst[0], precision a
PRIOR_LOGGAMMA = 1  # shape a
PRIOR_STUDENT_T = 2  # precision (1/scale) a, dof b
# hyper prior codes
HYPER_GAMMA = 0
HYPER_GAUSSIAN = 1

_LOG_2PI = math.log(2.0 * math.pi)


@_jit
def _lik_value(code, y, ev, eta, prec, dof):
    if code == LIK_EXPONENTIAL:
        return ev * eta - y * math.exp(eta)
    if code == LIK_GAUSSIAN:
        r = y - eta
        return 0.5 * math.log(prec) - 0.5 * _LOG_2PI - 0.5 * prec * r * r
    r = y - eta
    scale = dof / prec
    return (
        math.lgamma(0.5 * (dof + 1.0))
        - math.lgamma(0.5 * dof)
        - 0.5 * math.log(math.pi * scale)
        - 0.5 * (dof + 1.0) * math.log1p(r * r / scale)
    )


@_jit
def _prior_value(code, u, mean, a, b):
    if code == PRIOR_GAUSSIAN:
        d = u - mean
        return 0.5 * math.log(a) - 0.5 * _LOG_2PI - 0.5 * a * d * d
    if code == PRIOR_LOGGAMMA:
        return a * math.log(a) - math.lgamma(a) + a * (u - math.exp(u))
    scale = b / a
    return (
        math.lgamma(0.5 * (b + 1.0))
        - math.lgamma(0.5 * b)
        - 0.5 * math.log(math.pi * scale)
        - 0.5 * (b + 1.0) * math.log1p(u * u / scale)
    )


@_jit
def _hyper_values(theta, transform, shift, out):
    for h in range(theta.shape[0]):
        if transform[h] == 0:
            out[h] = theta[h]
        else:
            out[h] = shift[h] + math.exp(theta[h])


@_jit
def _hyper_log_prior(theta, values, hcode, hpar, transform, shift):
    # gamma priors live on the original scale (plus log-Jacobian),
    # gaussian priors directly on the internal scale
    acc = 0.0
    for h in range(theta.shape[0]):
        a = hpar[h, 0]
        b = hpar[h, 1]
        if hcode[h] == HYPER_GAMMA:
            v = values[h] - shift[h]
            acc += a * math.log(b) - math.lgamma(a) + (a - 1.0) * math.log(v) - b * v
            if transform[h] != 0:
                acc += theta[h]
        else:
            d = theta[h] - a
            acc += -0.5 * math.log(2.0 * math.pi * b) - 0.5 * d * d / b
    return acc


@_jit
def _param(idx, const, values):
    if idx >= 0:
        return values[idx]
    return const


@_jit
def _total_lik(y, ev, eta, lik_code, lik_prec_idx, lik_prec_const, lik_dof_idx, lik_dof_const, values):
    prec = _param(lik_prec_idx, lik_prec_const, values)
    dof = _param(lik_dof_idx, lik_dof_const, values)
    acc = 0.0
    for j in range(y.shape[0]):
        acc += _lik_value(lik_code, y[j], ev[j], eta[j], prec, dof)
    return acc


@_jit
def _component_prior(k, u, pcode, pidx, pconst, values):
    a = _param(pidx[k, 0], pconst[k, 1], values)
    b = _param(pidx[k, 1], pconst[k, 2], values)
    return _prior_value(pcode[k], u, pconst[k, 0], a, b)


@_jit
def _total_prior(u, pcode, pidx, pconst, values):
    acc = 0.0
    for k in range(u.shape[0]):
        acc += _component_prior(k, u[k], pcode, pidx, pconst, values)
    return acc


@_jit
def metropolis_sweeps(
    u, theta, eta, y, ev,
    Acp, Ari, Ax,
    lik_code, lik_prec_idx, lik_prec_const, lik_dof_idx, lik_dof_const,
    pcode, pidx, pconst,
    hcode, hpar, transform, shift,
    log_scales, normals, log_uniforms,
    adapt, adapt_offset, target_rate,
    keep_every, kept_u, kept_theta, kept_start,
    accepts,
):
    """Run ``normals.shape[0]`` componentwise random-walk sweeps in place.

    Latent components are updated first, then each hyperparameter on its
    internal scale. ``eta`` must equal ``A @ u`` on entry and is kept in sync.
    Returns the number of rows written to ``kept_u``.
    """
    nu = u.shape[0]
    nh = theta.shape[0]
    values = np.empty(nh, dtype=np.float64)
    _hyper_values(theta, transform, shift, values)
    lik_prec = _param(lik_prec_idx, lik_prec_const, values)
    lik_dof = _param(lik_dof_idx, lik_dof_const, values)
    lik = (lik_code, lik_prec_idx, lik_prec_const, lik_dof_idx, lik_dof_const)
    n_sweeps = normals.shape[0]
    row = kept_start
    for it in range(n_sweeps):
        for k in range(nu):
            step = math.exp(log_scales[k]) * normals[it, k]
            prop = u[k] + step
            delta = _component_prior(k, prop, pcode, pidx, pconst, values) - _component_prior(
                k, u[k], pcode, pidx, pconst, values
            )
            for p in range(Acp[k], Acp[k + 1]):
                j = Ari[p]
                e_new = eta[j] + Ax[p] * step
                delta += _lik_value(lik_code, y[j], ev[j], e_new, lik_prec, lik_dof) - _lik_value(
                    lik_code, y[j], ev[j], eta[j], lik_prec, lik_dof
                )
            ok = log_uniforms[it, k] < delta
            if ok:
                u[k] = prop
                for p in range(Acp[k], Acp[k + 1]):
                    eta[Ari[p]] += Ax[p] * step
                accepts[k] += 1
            if adapt:
                gain = (adapt_offset + it + 1.0) ** -0.6
                log_scales[k] += gain * ((1.0 if ok else 0.0) - target_rate)
        if nh > 0:
            base_lik = _total_lik(y, ev, eta, *lik, values)
            base_prior = _total_prior(u, pcode, pidx, pconst, values)
            base_hyper = _hyper_log_prior(theta, values, hcode, hpar, transform, shift)
            new_values = np.empty(nh, dtype=np.float64)
            for h in range(nh):
                kk = nu + h
                old = theta[h]
                theta[h] = old + math.exp(log_scales[kk]) * normals[it, kk]
                _hyper_values(theta, transform, shift, new_values)
                new_lik = _total_lik(y, ev, eta, *lik, new_values)
                pri = _total_prior(u, pcode, pidx, pconst, new_values)
                hyp = _hyper_log_prior(theta, new_values, hcode, hpar, transform, shift)
                delta = (new_lik + pri + hyp) - (base_lik + base_prior + base_hyper)
                ok = log_uniforms[it, kk] < delta
                if ok:
                    base_lik = new_lik
                    base_prior = pri
                    base_hyper = hyp
                    for q in range(nh):
                        values[q] = new_values[q]
                    accepts[kk] += 1
                else:
                    theta[h] = old
                if adapt:
                    gain = (adapt_offset + it + 1.0) ** -0.6
                    log_scales[kk] += gain * ((1.0 if ok else 0.0) - target_rate)
            lik_prec = _param(lik_prec_idx, lik_prec_const, values)
            lik_dof = _param(lik_dof_idx, lik_dof_const, values)
        if keep_every > 0 and (adapt_offset + it + 1) % keep_every == 0 and row < kept_u.shape[0]:
            for k in range(nu):
                kept_u[row, k] = u[k]
            for h in range(nh):
                kept_theta[row, h] = theta[h]
            row += 1
    return row


@_jit
def log_joint_exact(
    u, theta, eta, y, ev,
    lik_code, lik_prec_idx, lik_prec_const, lik_dof_idx, lik_dof_const,
    pcode, pidx, pconst,
    hcode, hpar, transform, shift,
):
    """Exact log joint density used by the sampler (eta = A u supplied)."""
    values = np.empty(theta.shape[0], dtype=np.float64)
    _hyper_values(theta, transform, shift, values)
    return (
        _total_lik(y, ev, eta, lik_code, lik_prec_idx, lik_prec_const, lik_dof_idx, lik_dof_const, values)
        + _total_prior(u, pcode, pidx, pconst, values)
        + _hyper_log_prior(theta, values, hcode, hpar, transform, shift)
    )
