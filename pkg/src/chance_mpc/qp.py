"""Dense convex quadratic programming by the dual active-set method.

Solves min 1/2 x^T H x + g^T x subject to equality rows C_eq x = b_eq
and inequality rows C_in x >= b_in, for strictly convex H.  The method
starts from the unconstrained minimizer and adds violated constraints
one at a time, keeping a triangular factorization of the active-set
normals in the metric of H, so every iteration costs O(n^2).  Dual
iterates stay feasible throughout, which gives a clean infeasibility
certificate: a violated primal constraint with no admissible dual step.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
from numpy.typing import NDArray

_VIOL_TOL = 1e-10
_ZERO_TOL = 1e-12


class QpInfeasibleError(RuntimeError):
    """The constraint system admits no feasible point."""


@dataclass
class QpResult:
    x: NDArray
    objective: float
    active: list = field(default_factory=list)
    multipliers: NDArray | None = None
    iterations: int = 0


def solve_qp(
    h: NDArray,
    g: NDArray,
    c_in: NDArray | None = None,
    b_in: NDArray | None = None,
    c_eq: NDArray | None = None,
    b_eq: NDArray | None = None,
    max_iter: int | None = None,
) -> QpResult:
    """Strictly convex QP with equalities first, then inequalities.

    Raises QpInfeasibleError when the constraints are inconsistent and
    ValueError when H is not positive definite.
    """
    h = np.asarray(h, dtype=float)
    g = np.asarray(g, dtype=float)
    n = g.shape[0]
    if h.shape != (n, n):
        raise ValueError("H and g disagree in size")
    rows = []
    rhs = []
    n_eq = 0
    if c_eq is not None and len(c_eq):
        c_eq = np.atleast_2d(np.asarray(c_eq, dtype=float))
        rows.append(c_eq)
        rhs.append(np.atleast_1d(np.asarray(b_eq, dtype=float)))
        n_eq = c_eq.shape[0]
    if c_in is not None and len(c_in):
        rows.append(np.atleast_2d(np.asarray(c_in, dtype=float)))
        rhs.append(np.atleast_1d(np.asarray(b_in, dtype=float)))
    if rows:
        c_all = np.vstack(rows)
        b_all = np.concatenate(rhs)
    else:
        c_all = np.zeros((0, n))
        b_all = np.zeros(0)
    m = c_all.shape[0]
    if max_iter is None:
        max_iter = 40 * (n + m + 10)

    try:
        chol = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise ValueError("H must be positive definite") from exc

    # j_op = inv(L)^T initially; rotations keep j_op^T H j_op = I.
    trtri = scipy.linalg.get_lapack_funcs(("trtri",), (chol,))[0]
    l_inv, info = trtri(chol, lower=1)
    if info != 0:
        raise ValueError("H must be positive definite")
    j_op = np.ascontiguousarray(l_inv.T)
    x = -scipy.linalg.cho_solve((chol, True), g, check_finite=False)
    r_fac = np.zeros((n, n))
    active: list[int] = []
    signs: list[float] = []  # equality rows may enter with flipped normals
    u = np.zeros(0)
    scale = np.maximum(1.0, np.abs(b_all)) if m else np.ones(0)

    def add_constraint(d):
        # one Householder reflection zeroes d[q+1:] against d[q] and is
        # applied to the trailing j_op block as a single rank-1 update
        q = len(active)
        tail_norm = float(np.linalg.norm(d[q + 1 :]))
        if tail_norm >= _ZERO_TOL:
            alpha = -float(np.copysign(np.hypot(d[q], tail_norm), d[q]))
            v = d[q:].copy()
            v[0] -= alpha
            w = j_op[:, q:] @ v
            j_op[:, q:] -= np.outer(w, (2.0 / float(v @ v)) * v)
            d[q] = alpha
            d[q + 1 :] = 0.0
        r_fac[: q + 1, q] = d[: q + 1]

    def drop_constraint(idx):
        nonlocal u
        q = len(active)
        active.pop(idx)
        signs.pop(idx)
        u = np.delete(u, idx)
        for col in range(idx, q - 1):
            r_fac[: q + 1, col] = r_fac[: q + 1, col + 1]
        r_fac[:, q - 1] = 0.0
        for i in range(idx, q - 1):
            a, b = r_fac[i, i], r_fac[i + 1, i]
            r = float(np.hypot(a, b))
            if r < _ZERO_TOL:
                continue
            c, s = a / r, b / r
            row_a = r_fac[i, : q - 1].copy()
            row_b = r_fac[i + 1, : q - 1].copy()
            r_fac[i, : q - 1] = c * row_a + s * row_b
            r_fac[i + 1, : q - 1] = -s * row_a + c * row_b
            col_a = j_op[:, i].copy()
            col_b = j_op[:, i + 1].copy()
            j_op[:, i] = c * col_a + s * col_b
            j_op[:, i + 1] = -s * col_a + c * col_b

    iterations = 0
    while iterations < max_iter:
        iterations += 1
        if m:
            resid = c_all @ x - b_all
            viol = resid / scale
            viol[:n_eq] = -np.abs(viol[:n_eq])
            if active:
                viol[active] = 0.0
            p = int(np.argmin(viol))
            if viol[p] >= -_VIOL_TOL:
                p = -1
        else:
            p = -1
        if p < 0:
            mult = np.zeros(m)
            for pos, ci in enumerate(active):
                mult[ci] = signs[pos] * u[pos]
            obj = 0.5 * float(x @ h @ x) + float(g @ x)
            return QpResult(
                x=x, objective=obj, active=sorted(active), multipliers=mult,
                iterations=iterations,
            )

        sign = 1.0
        if p < n_eq and float(c_all[p] @ x - b_all[p]) > 0.0:
            sign = -1.0
        n_plus = sign * c_all[p]
        b_p = sign * b_all[p]
        u_plus = 0.0

        while True:
            iterations += 1
            if iterations >= max_iter:
                raise RuntimeError("active-set iteration limit exceeded")
            q = len(active)
            d = j_op.T @ n_plus
            z = j_op[:, q:] @ d[q:]
            r_dir = (
                np.linalg.solve(r_fac[:q, :q], d[:q]) if q else np.zeros(0)
            )

            t1 = np.inf
            k_drop = -1
            if q:
                cand = (np.asarray(active) >= n_eq) & (r_dir > _ZERO_TOL)
                if cand.any():
                    pos_idx = np.nonzero(cand)[0]
                    ratios = u[pos_idx] / r_dir[pos_idx]
                    best = int(np.argmin(ratios))
                    t1 = float(ratios[best])
                    k_drop = int(pos_idx[best])
            z_dot = float(z @ n_plus)
            s_p = float(n_plus @ x - b_p)
            t2 = np.inf if z_dot < _ZERO_TOL else -s_p / z_dot
            t = min(t1, t2)
            if not np.isfinite(t):
                raise QpInfeasibleError(
                    "no admissible step for a violated constraint"
                )
            if t2 == np.inf:
                u = u - t * r_dir
                u_plus += t
                drop_constraint(k_drop)
                continue
            x = x + t * z
            u = u - t * r_dir
            u_plus += t
            if t == t2:
                add_constraint(d.copy())
                active.append(p)
                signs.append(sign)
                u = np.append(u, u_plus)
                break
            drop_constraint(k_drop)

    raise RuntimeError("active-set iteration limit exceeded")
