import numpy as np
import pytest

from deepc_sampling.trajectory_data import DimensionMismatchError
from deepc_sampling.qp_solver import (
    AdmmWorkspace,
    NonConvexError,
    QpProblem,
    QpSettings,
    solve,
    warm_started_resolve,
)

TIGHT = QpSettings(eps_abs=1e-8, eps_rel=1e-8)


def random_strictly_convex(rng, n):
    M = rng.normal(size=(n, n))
    return M @ M.T + (0.1 + rng.uniform()) * np.eye(n)


def kkt_equality_oracle(P, q, A, b):
    """Direct solve of the stationarity system for equality-constrained QPs."""
    n, c = P.shape[0], A.shape[0]
    kkt = np.block([[P, A.T], [A, np.zeros((c, c))]])
    rhs = np.concatenate([-q, b])
    sol = np.linalg.solve(kkt, rhs)
    return sol[:n]


def box_active_set_oracle(P, q, l, u, tol=1e-9):
    """Enumerate every lower/upper/free assignment and return the KKT point."""
    n = P.shape[0]
    best = None
    for code in range(3 ** n):
        assign, c = [], code
        for _ in range(n):
            assign.append(c % 3)
            c //= 3
        x = np.empty(n)
        free = [i for i, a in enumerate(assign) if a == 0]
        for i, a in enumerate(assign):
            if a == 1:
                x[i] = l[i]
            elif a == 2:
                x[i] = u[i]
        if free:
            idx = np.array(free)
            fixed = np.array([i for i in range(n) if i not in free], dtype=int)
            rhs = -q[idx]
            if fixed.size:
                rhs = rhs - P[np.ix_(idx, fixed)] @ x[fixed]
            x[idx] = np.linalg.solve(P[np.ix_(idx, idx)], rhs)
        if np.any(x < l - tol) or np.any(x > u + tol):
            continue
        g = P @ x + q
        ok = True
        for i, a in enumerate(assign):
            if a == 0 and abs(g[i]) > 1e-7:
                ok = False
            elif a == 1 and g[i] < -1e-7:
                ok = False
            elif a == 2 and g[i] > 1e-7:
                ok = False
        if ok:
            obj = 0.5 * x @ P @ x + q @ x
            if best is None or obj < best[0]:
                best = (obj, x)
    assert best is not None, "active-set enumeration found no KKT point"
    return best[1]


def test_scalar_active_bound():
    # min (x-1)^2 s.t. x >= 2
    prob = QpProblem(P=[[2.0]], q=[-2.0], A=[[1.0]], l=[2.0], u=[np.inf])
    sol = solve(prob, TIGHT)
    assert sol.solved
    assert sol.x[0] == pytest.approx(2.0, abs=1e-6)


def test_symmetric_equality():
    # min x^2 + y^2 s.t. x + y = 1
    prob = QpProblem(P=2 * np.eye(2), q=np.zeros(2), A=[[1.0, 1.0]], l=[1.0], u=[1.0])
    sol = solve(prob, TIGHT)
    assert sol.solved
    assert sol.x == pytest.approx([0.5, 0.5], abs=1e-6)


def test_random_equality_constrained_matches_kkt_oracle():
    rng = np.random.default_rng(0)
    for trial in range(50):
        n = int(rng.integers(2, 11))
        c = int(rng.integers(1, n))
        P = random_strictly_convex(rng, n)
        q = rng.normal(size=n)
        A = rng.normal(size=(c, n))
        b = rng.normal(size=c)
        prob = QpProblem(P=P, q=q, A=A, l=b, u=b)
        sol = solve(prob, TIGHT)
        assert sol.solved, f"trial {trial} not solved"
        x_ref = kkt_equality_oracle(P, q, A, b)
        f_ref = 0.5 * x_ref @ P @ x_ref + q @ x_ref
        gap = abs(sol.objective - f_ref) / max(1.0, abs(f_ref))
        assert gap <= 1e-6, f"trial {trial}: gap {gap}"


def test_random_box_constrained_matches_active_set_oracle():
    rng = np.random.default_rng(1)
    for trial in range(50):
        n = int(rng.integers(1, 7))
        P = random_strictly_convex(rng, n)
        q = rng.normal(size=n)
        l = rng.uniform(-2, 0, size=n)
        u = rng.uniform(0.1, 2, size=n)
        prob = QpProblem(P=P, q=q, A=np.eye(n), l=l, u=u)
        sol = solve(prob, TIGHT)
        assert sol.solved
        x_ref = box_active_set_oracle(P, q, l, u)
        f_ref = 0.5 * x_ref @ P @ x_ref + q @ x_ref
        gap = abs(sol.objective - f_ref) / max(1.0, abs(f_ref))
        assert gap <= 1e-6, f"trial {trial}: gap {gap}"


def test_feasibility_at_solved_status():
    rng = np.random.default_rng(2)
    s = QpSettings()
    for trial in range(20):
        n = int(rng.integers(2, 8))
        c = int(rng.integers(1, 6))
        P = random_strictly_convex(rng, n)
        q = rng.normal(size=n)
        A = rng.normal(size=(c, n))
        l = rng.uniform(-2, -0.5, size=c)
        u = rng.uniform(0.5, 2, size=c)
        sol = solve(QpProblem(P=P, q=q, A=A, l=l, u=u), s)
        assert sol.solved
        Ax = A @ sol.x
        slack = s.eps_abs + s.eps_rel * np.max(np.abs(Ax))
        assert np.all(Ax >= l - slack)
        assert np.all(Ax <= u + slack)


def test_warm_start_fixed_point_few_iterations():
    rng = np.random.default_rng(3)
    P = random_strictly_convex(rng, 5)
    q = rng.normal(size=5)
    A = rng.normal(size=(3, 5))
    b = rng.normal(size=3)
    prob = QpProblem(P=P, q=q, A=A, l=b, u=b)
    first = solve(prob, TIGHT)
    assert first.solved
    again = warm_started_resolve(prob, first, TIGHT)
    assert again.solved
    assert again.iterations <= 5


def test_warm_start_small_q_perturbation():
    rng = np.random.default_rng(4)
    P = random_strictly_convex(rng, 6)
    q = rng.normal(size=6)
    A = rng.normal(size=(2, 6))
    b = rng.normal(size=2)
    prob = QpProblem(P=P, q=q, A=A, l=b, u=b)
    base = solve(prob, TIGHT)
    assert base.solved
    dq = rng.normal(size=6)
    dq *= 1e-6 / np.linalg.norm(dq)
    perturbed = QpProblem(P=P, q=q + dq, A=A, l=b, u=b)
    sol = warm_started_resolve(perturbed, base, TIGHT)
    assert sol.solved
    assert np.linalg.norm(sol.x - base.x) <= 1e-3


def test_warm_start_wrong_dimension_rejected():
    prob = QpProblem(P=np.eye(2), q=np.zeros(2), A=np.eye(2), l=-np.ones(2), u=np.ones(2))
    sol = solve(prob)
    bigger = QpProblem(P=np.eye(3), q=np.zeros(3), A=np.eye(3), l=-np.ones(3), u=np.ones(3))
    with pytest.raises(DimensionMismatchError):
        warm_started_resolve(bigger, sol)


def test_non_psd_rejected_during_factorization():
    P = np.array([[1.0, 0.0], [0.0, -1.0]])
    prob = QpProblem(P=P, q=np.zeros(2), A=np.eye(2), l=-np.ones(2), u=np.ones(2))
    with pytest.raises(NonConvexError):
        solve(prob)


def test_asymmetric_p_rejected():
    with pytest.raises(ValueError, match="symmetric"):
        QpProblem(P=[[1.0, 0.5], [0.0, 1.0]], q=[0.0, 0.0], A=np.eye(2),
                  l=-np.ones(2), u=np.ones(2))


def test_crossed_bounds_rejected():
    with pytest.raises(ValueError, match="lower bounds"):
        QpProblem(P=np.eye(1), q=[0.0], A=np.eye(1), l=[1.0], u=[-1.0])


def test_primal_infeasible_detected():
    # x >= 1 and x <= -1 simultaneously
    prob = QpProblem(P=np.eye(1), q=[0.0], A=[[1.0], [1.0]],
                     l=[1.0, -np.inf], u=[np.inf, -1.0])
    sol = solve(prob)
    assert sol.status == "primal_infeasible"


def test_monotone_residual_trend():
    # combined residual at iteration 10k is below its value at iteration k on a
    # small fixed corpus (empirical contraction check, not a theorem)
    rng = np.random.default_rng(5)
    for trial in range(5):
        n = 8
        P = random_strictly_convex(rng, n)
        q = rng.normal(size=n)
        A = rng.normal(size=(4, n))
        l = rng.uniform(-1.5, -0.5, size=4)
        u = rng.uniform(0.5, 1.5, size=4)
        # zero tolerances force a full-length run; residuals are recorded at
        # iteration 1 and every fifth iteration after that
        ws = AdmmWorkspace(P, A, l, u, QpSettings(eps_abs=0.0, eps_rel=0.0, max_iter=600))
        ws.solve(q, l, u)
        history = ws.residual_history
        for k in (1, 5, 10, 20, 50):
            assert history[10 * k] <= history[k]


def test_deterministic_given_identical_inputs():
    rng = np.random.default_rng(6)
    P = random_strictly_convex(rng, 4)
    q = rng.normal(size=4)
    A = rng.normal(size=(2, 4))
    prob = QpProblem(P=P, q=q, A=A, l=[-1.0, 0.0], u=[1.0, 0.0])
    a = solve(prob)
    b = solve(prob)
    assert np.array_equal(a.x, b.x)
    assert a.iterations == b.iterations
