"""Dense operator-splitting (ADMM) solver for convex QPs in standard form.

Solves
    minimize    0.5 x' P x + q' x
    subject to  l <= A x <= u
with P symmetric positive semidefinite and equality constraints encoded as
l == u. The implementation follows the usual operator-splitting recipe:
modified Ruiz equilibration of the problem data, a quasi-definite KKT solve
with a cached LU factorization, relaxation, projection onto the box, and a
dual update, with residual-balancing adaptation of the penalty parameter.
Termination is decided on unscaled residuals.

The factorization is tied to (P, A, rho); receding-horizon callers that only
change q, l, u between solves pay one back-substitution per iteration.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import lu_factor, lu_solve

from .trajectory_data import DimensionMismatchError

_EQ_RHO_SCALE = 1e3
_RHO_MIN, _RHO_MAX = 1e-6, 1e6
_ADAPT_INTERVAL = 50
_ADAPT_TOLERANCE = 5.0
_INFEAS_INTERVAL = 25
_CHECK_INTERVAL = 5
_RUIZ_ITERATIONS = 10
_SCALING_REG = 1e-8

STATUS_SOLVED = "solved"
STATUS_MAX_ITER = "max_iter"
STATUS_PRIMAL_INFEASIBLE = "primal_infeasible"


class NonConvexError(ValueError):
    """P failed the positive-semidefiniteness check during factorization."""


@dataclass(frozen=True)
class QpSettings:
    eps_abs: float = 1e-5
    eps_rel: float = 1e-5
    max_iter: int = 4000
    rho: float = 0.1
    sigma: float = 1e-6
    alpha: float = 1.6
    adaptive_rho: bool = True
    scaling: bool = True
    polish: bool = True
    polish_delta: float = 1e-7
    polish_refine_iters: int = 3
    eps_infeasible: float = 1e-7


@dataclass(frozen=True)
class QpProblem:
    """Standard-form convex QP data. Equalities are rows with l == u."""

    P: np.ndarray
    q: np.ndarray
    A: np.ndarray
    l: np.ndarray
    u: np.ndarray

    def __post_init__(self):
        P = np.asarray(self.P, dtype=float)
        q = np.asarray(self.q, dtype=float).ravel()
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        l = np.asarray(self.l, dtype=float).ravel()
        u = np.asarray(self.u, dtype=float).ravel()
        n = q.size
        if P.shape != (n, n):
            raise DimensionMismatchError(f"P has shape {P.shape}, expected ({n}, {n})")
        if A.size == 0:
            A = A.reshape(0, n)
        if A.shape[1] != n:
            raise DimensionMismatchError(f"A has {A.shape[1]} columns, expected {n}")
        if l.shape != (A.shape[0],) or u.shape != (A.shape[0],):
            raise DimensionMismatchError("l and u must have one entry per constraint row")
        if not np.allclose(P, P.T, atol=1e-10):
            raise ValueError("P must be symmetric within 1e-10")
        if np.any(np.isnan(l)) or np.any(np.isnan(u)):
            raise ValueError("bounds must not contain NaN")
        if np.any(l > u):
            raise ValueError("lower bounds must not exceed upper bounds")
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "q", q)
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "l", l)
        object.__setattr__(self, "u", u)

    @property
    def n(self) -> int:
        return self.q.size

    @property
    def n_constraints(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ self.P @ x + self.q @ x)


@dataclass(frozen=True)
class QpSolution:
    x: np.ndarray
    status: str
    iterations: int
    primal_residual: float
    dual_residual: float
    objective: float
    y: np.ndarray = None  # dual iterate, kept for warm starting

    @property
    def solved(self) -> bool:
        return self.status == STATUS_SOLVED


def _inf_norm(v) -> float:
    return float(np.max(np.abs(v))) if np.size(v) else 0.0


def _equality_mask(l, u) -> np.ndarray:
    l = np.asarray(l, dtype=float).ravel()
    u = np.asarray(u, dtype=float).ravel()
    return np.isfinite(l) & np.isfinite(u) & (u - l < 1e-12)


class AdmmWorkspace:
    """Equilibrated, factorized workspace tied to one (P, A) structure.

    Reuse across solves with updated q, l, u as long as the equality pattern
    (which rows have l == u) is unchanged; a changed pattern triggers a
    refactorization because equality rows carry a larger penalty parameter.
    """

    def __init__(self, P: np.ndarray, A: np.ndarray, l: np.ndarray, u: np.ndarray,
                 settings: QpSettings = QpSettings(), q: np.ndarray | None = None):
        self.P = np.asarray(P, dtype=float)
        self.A = np.atleast_2d(np.asarray(A, dtype=float))
        if self.A.size == 0:
            self.A = self.A.reshape(0, self.P.shape[0])
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        self.settings = settings
        self._check_psd()
        self._equilibrate(np.zeros(self.n) if q is None else np.asarray(q, dtype=float).ravel())
        self._eq_mask = _equality_mask(l, u)
        self._factor(settings.rho)
        self.residual_history: dict[int, float] = {}

    # -- setup ---------------------------------------------------------------

    def _check_psd(self):
        P, n = self.P, self.n
        if n == 0:
            return
        diag = np.diag(P)
        scale = max(1.0, float(np.abs(diag).max()) if n else 1.0)
        if np.count_nonzero(P) == np.count_nonzero(diag):
            if np.any(diag < -1e-10 * scale):
                raise NonConvexError("P has a negative diagonal entry")
            return
        try:
            np.linalg.cholesky(P + 1e-8 * scale * np.eye(n))
        except np.linalg.LinAlgError as exc:
            raise NonConvexError("P is not positive semidefinite") from exc

    def _equilibrate(self, q: np.ndarray):
        """Modified Ruiz equilibration with cost normalization.

        ``q`` is a representative linear cost used only to pick the cost
        scale; later solves may use different q vectors with the same scaling.
        """
        n, m = self.n, self.m
        d = np.ones(n)
        e = np.ones(m)
        cost = 1.0
        Ps = self.P.copy()
        As = self.A.copy()
        qs = q.copy()
        if self.settings.scaling and n:
            for _ in range(_RUIZ_ITERATIONS):
                col_p = np.maximum(np.abs(Ps).max(axis=0), np.abs(As).max(axis=0) if m else 0.0)
                col_a = np.abs(As).max(axis=1) if m else np.zeros(0)
                dn = 1.0 / np.sqrt(np.maximum(col_p, _SCALING_REG))
                en = 1.0 / np.sqrt(np.maximum(col_a, _SCALING_REG))
                Ps *= dn[:, None] * dn[None, :]
                if m:
                    As *= en[:, None] * dn[None, :]
                qs *= dn
                d *= dn
                e *= en
                # cost normalization keeps the objective O(1) in scaled space
                p_norm = np.abs(Ps).max(axis=0).mean() if n else 0.0
                gamma = 1.0 / min(max(p_norm, _inf_norm(qs), _SCALING_REG), 1.0 / _SCALING_REG)
                Ps *= gamma
                qs *= gamma
                cost *= gamma
        self._Ps = Ps
        self._As = As
        self._d = d
        self._e = e
        self._cost = cost

    def _rho_vector(self, rho: float) -> np.ndarray:
        rho_vec = np.full(self.m, rho)
        rho_vec[self._eq_mask] = rho * _EQ_RHO_SCALE
        return np.clip(rho_vec, _RHO_MIN, _RHO_MAX)

    def _factor(self, rho: float):
        self._rho_cur = float(np.clip(rho, _RHO_MIN, _RHO_MAX))
        self.rho_vec = self._rho_vector(self._rho_cur)
        n, m = self.n, self.m
        kkt = np.zeros((n + m, n + m))
        kkt[:n, :n] = self._Ps + self.settings.sigma * np.eye(n)
        if m:
            kkt[:n, n:] = self._As.T
            kkt[n:, :n] = self._As
            kkt[n:, n:] = -np.diag(1.0 / self.rho_vec)
        self._lu = lu_factor(kkt)

    # -- solve ---------------------------------------------------------------

    def solve(self, q: np.ndarray, l: np.ndarray, u: np.ndarray,
              x0: np.ndarray | None = None, y0: np.ndarray | None = None) -> QpSolution:
        s = self.settings
        n, m = self.n, self.m
        q = np.asarray(q, dtype=float).ravel()
        l = np.asarray(l, dtype=float).ravel()
        u = np.asarray(u, dtype=float).ravel()
        if q.size != n or l.size != m or u.size != m:
            raise DimensionMismatchError("vector dimensions do not match workspace structure")
        mask = _equality_mask(l, u)
        if not np.array_equal(mask, self._eq_mask):
            self._eq_mask = mask
            self._factor(self._rho_cur)

        d, e, cost = self._d, self._e, self._cost
        qs = cost * d * q
        ls = e * l
        us = e * u
        # scaled iterates: x = d * xs, y = e * ys / cost
        xs = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float) / d
        ys = np.zeros(m) if y0 is None else cost * np.asarray(y0, dtype=float) / np.where(e > 0, e, 1.0)
        zs = np.clip(self._As @ xs, ls, us) if m else np.zeros(0)

        best = None
        status = STATUS_MAX_ITER
        iterations = s.max_iter
        r_prim = r_dual = np.inf
        ys_prev = ys
        self.residual_history = {}

        for k in range(1, s.max_iter + 1):
            rhs = np.concatenate([s.sigma * xs - qs, zs - ys / self.rho_vec]) if m \
                else (s.sigma * xs - qs)
            sol = lu_solve(self._lu, rhs)
            x_t = sol[:n]
            xs = s.alpha * x_t + (1.0 - s.alpha) * xs
            if m:
                z_t = zs + (sol[n:] - ys) / self.rho_vec
                zc = s.alpha * z_t + (1.0 - s.alpha) * zs + ys / self.rho_vec
                z_new = np.clip(zc, ls, us)
                ys_prev = ys
                ys = self.rho_vec * (zc - z_new)
                zs = z_new

            if not np.all(np.isfinite(xs)) or (m and not np.all(np.isfinite(ys))):
                iterations = k
                break
            if k != 1 and k % _CHECK_INTERVAL != 0 and k != s.max_iter:
                continue

            # unscaled residuals from scaled matvecs
            Axs = self._As @ xs if m else np.zeros(0)
            Pxs = self._Ps @ xs
            Atys = self._As.T @ ys if m else np.zeros(n)
            r_prim = _inf_norm((Axs - zs) / e) if m else 0.0
            r_dual = _inf_norm((Pxs + qs + Atys) * d) / cost
            prim_scale = max(_inf_norm(Axs / e), _inf_norm(zs / e)) if m else 0.0
            dual_scale = max(_inf_norm(Pxs * d), _inf_norm(Atys * d), _inf_norm(qs * d)) / cost
            eps_prim = s.eps_abs + s.eps_rel * prim_scale
            eps_dual = s.eps_abs + s.eps_rel * dual_scale
            self.residual_history[k] = r_prim + r_dual

            score = max(r_prim / max(eps_prim, 1e-30), r_dual / max(eps_dual, 1e-30))
            if best is None or score < best[0]:
                best = (score, xs.copy(), ys.copy(), r_prim, r_dual)

            if r_prim <= eps_prim and r_dual <= eps_dual:
                status = STATUS_SOLVED
                iterations = k
                break

            if m and k % _INFEAS_INTERVAL == 0:
                dy = e * (ys - ys_prev) / cost
                if self._primal_infeasible(l, u, dy):
                    status = STATUS_PRIMAL_INFEASIBLE
                    iterations = k
                    break

            if s.adaptive_rho and m and k % _ADAPT_INTERVAL == 0:
                rp_n = r_prim / max(prim_scale, 1e-30)
                rd_n = r_dual / max(dual_scale, 1e-30)
                rho_new = np.clip(self._rho_cur * np.sqrt(rp_n / max(rd_n, 1e-30)),
                                  _RHO_MIN, _RHO_MAX)
                if rho_new > self._rho_cur * _ADAPT_TOLERANCE or \
                        rho_new < self._rho_cur / _ADAPT_TOLERANCE:
                    self._factor(float(rho_new))

        if status == STATUS_SOLVED or best is None:
            xs_out, ys_out, rp, rd = xs, ys, r_prim, r_dual
        elif status == STATUS_PRIMAL_INFEASIBLE:
            xs_out, ys_out, rp, rd = xs, ys, r_prim, r_dual
        else:
            _, xs_out, ys_out, rp, rd = best
        x = d * xs_out
        y = e * ys_out / cost

        if s.polish and status in (STATUS_SOLVED, STATUS_MAX_ITER):
            polished = self._polish(q, l, u, x, y)
            if polished is not None:
                x_p, y_p, rp_p, rd_p = polished
                if max(rp_p, rd_p) < max(rp, rd) or status != STATUS_SOLVED:
                    scales = self._tolerance_scales(q, l, u, x_p, y_p)
                    eps_p = s.eps_abs + s.eps_rel * scales[0]
                    eps_d = s.eps_abs + s.eps_rel * scales[1]
                    if rp_p <= eps_p and rd_p <= eps_d:
                        x, y, rp, rd = x_p, y_p, rp_p, rd_p
                        status = STATUS_SOLVED
                    elif status == STATUS_SOLVED and max(rp_p, rd_p) < max(rp, rd):
                        x, y, rp, rd = x_p, y_p, rp_p, rd_p

        objective = float(0.5 * x @ self.P @ x + q @ x)
        return QpSolution(x=x, status=status, iterations=iterations,
                          primal_residual=float(rp), dual_residual=float(rd),
                          objective=objective, y=y)

    def _tolerance_scales(self, q, l, u, x, y):
        Ax = self.A @ x if self.m else np.zeros(0)
        z = np.clip(Ax, l, u) if self.m else np.zeros(0)
        prim = max(_inf_norm(Ax), _inf_norm(z))
        dual = max(_inf_norm(self.P @ x), _inf_norm(self.A.T @ y) if self.m else 0.0,
                   _inf_norm(q))
        return prim, dual

    def _polish(self, q, l, u, x, y):
        """Direct KKT solve on the guessed active set, with iterative refinement.

        Returns (x, y, r_prim, r_dual) or None when the regularized reduced
        system cannot be formed/solved.
        """
        if self.m == 0:
            return None
        s = self.settings
        z = np.clip(self.A @ x, l, u)
        eq = self._eq_mask
        low = ((z - l) < -y) & ~eq & np.isfinite(l)
        upp = ((u - z) < y) & ~eq & np.isfinite(u)
        active = eq | low | upp
        idx = np.where(active)[0]
        b = np.where(upp, u, l)[idx]
        Ared = self.A[idx]
        na = idx.size
        key = active.tobytes()
        if key != getattr(self, "_polish_key", None):
            n = self.n
            kkt = np.zeros((n + na, n + na))
            kkt[:n, :n] = self.P + s.polish_delta * np.eye(n)
            if na:
                kkt[:n, n:] = Ared.T
                kkt[n:, :n] = Ared
                kkt[n:, n:] = -s.polish_delta * np.eye(na)
            try:
                self._polish_lu = lu_factor(kkt)
            except Exception:
                return None
            self._polish_key = key
        rhs = np.concatenate([-q, b])
        try:
            sol = lu_solve(self._polish_lu, rhs)
        except Exception:
            return None
        x_p, nu = sol[:self.n], sol[self.n:]
        for _ in range(s.polish_refine_iters):
            r1 = -q - self.P @ x_p - (Ared.T @ nu if na else 0.0)
            r2 = b - Ared @ x_p if na else np.zeros(0)
            delta = lu_solve(self._polish_lu, np.concatenate([r1, r2]))
            x_p = x_p + delta[:self.n]
            nu = nu + delta[self.n:]
        if not np.all(np.isfinite(x_p)) or not np.all(np.isfinite(nu)):
            return None
        y_p = np.zeros(self.m)
        y_p[idx] = nu
        Ax = self.A @ x_p
        r_prim = _inf_norm(Ax - np.clip(Ax, l, u))
        r_dual = _inf_norm(self.P @ x_p + q + self.A.T @ y_p)
        return x_p, y_p, float(r_prim), float(r_dual)

    def _primal_infeasible(self, l, u, dy) -> bool:
        """Certificate that l <= Ax <= u is empty, from a dual direction."""
        eps = self.settings.eps_infeasible
        norm = _inf_norm(dy)
        if norm <= eps:
            return False
        v = dy / norm
        pos = v > eps
        neg = v < -eps
        # an infinite bound on a supporting row means no certificate
        if np.any(pos & ~np.isfinite(u)) or np.any(neg & ~np.isfinite(l)):
            return False
        total = float(u[pos] @ v[pos] + l[neg] @ v[neg])
        if total >= -eps:
            return False
        return _inf_norm(self.A.T @ v) <= eps


def solve(problem: QpProblem, settings: QpSettings = QpSettings(),
          warm_start: QpSolution | None = None) -> QpSolution:
    """One-shot solve; builds a workspace, optionally warm-started."""
    ws = AdmmWorkspace(problem.P, problem.A, problem.l, problem.u, settings, q=problem.q)
    x0 = warm_start.x if warm_start is not None else None
    y0 = warm_start.y if warm_start is not None else None
    return ws.solve(problem.q, problem.l, problem.u, x0=x0, y0=y0)


def warm_started_resolve(problem: QpProblem, previous: QpSolution,
                         settings: QpSettings = QpSettings()) -> QpSolution:
    """Re-solve starting from a previous solution of a same-shaped problem."""
    if previous.x.size != problem.n:
        raise DimensionMismatchError(
            f"warm start has {previous.x.size} variables, problem has {problem.n}"
        )
    if previous.y is not None and previous.y.size != problem.n_constraints:
        raise DimensionMismatchError(
            f"warm start has {previous.y.size} duals, problem has {problem.n_constraints} constraints"
        )
    return solve(problem, settings, warm_start=previous)
