"""Smooth convex program solver: log-barrier interior point with Newton steps.

A :class:`ConvexProgram` bundles twice-differentiable callbacks. Each
callback maps a point ``x`` to ``(value, gradient, hessian)`` where the
hessian is either ``None`` (affine) or a COO triple ``(rows, cols, vals)``
of the full symmetric matrix. Inequalities are ``g_i(x) <= 0`` and must be
convex on the open feasible set; box bounds are handled separately so the
barrier can exploit their diagonal structure.

The solver follows the classic path: minimize ``t*f(x) + phi(x)`` with
``phi`` the log barrier of all inequalities and finite bounds, re-center
with damped Newton, multiply ``t`` by ``mu`` until the duality-gap
surrogate ``m/t`` is below tolerance. Identical inputs produce identical
iterates; there is no randomness anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "ConvexProgram",
    "SolveOptions",
    "SolveReport",
    "OPTIMAL",
    "MAX_ITER",
    "INFEASIBLE",
    "solve",
    "check_derivatives",
]

# status values of a SolveReport
OPTIMAL = "Optimal"
MAX_ITER = "MaxIter"
INFEASIBLE = "Infeasible"

HessCoo = tuple[np.ndarray, np.ndarray, np.ndarray] | None
ProgFn = Callable[[np.ndarray], tuple[float, np.ndarray, HessCoo]]


@dataclass
class ConvexProgram:
    """Solver-facing description of one smooth convex subproblem."""

    n_vars: int
    objective: ProgFn
    constraints: list[ProgFn] = field(default_factory=list)
    lb: np.ndarray | None = None          # per-variable lower bounds (-inf allowed)
    ub: np.ndarray | None = None          # per-variable upper bounds (+inf allowed)
    a_eq: np.ndarray | None = None        # linear equalities A x = b
    b_eq: np.ndarray | None = None
    # Optional fused value-only path (objective value, all constraint values);
    # used by the line search and finite differencing to avoid gradient work.
    fast_values: Callable[[np.ndarray], tuple[float, np.ndarray]] | None = None

    def __post_init__(self):
        if self.lb is None:
            self.lb = np.full(self.n_vars, -np.inf)
        if self.ub is None:
            self.ub = np.full(self.n_vars, np.inf)
        self.lb = np.asarray(self.lb, dtype=float)
        self.ub = np.asarray(self.ub, dtype=float)

    def values(self, x: np.ndarray) -> tuple[float, np.ndarray]:
        """Objective and constraint values only (no derivatives)."""
        if self.fast_values is not None:
            return self.fast_values(x)
        f = self.objective(x)[0]
        g = np.array([c(x)[0] for c in self.constraints])
        return f, g


@dataclass
class SolveOptions:
    tol: float = 1e-8             # duality-gap surrogate target, scaled by objective size
    feas_tol: float = 1e-8        # max allowed constraint value at the returned point
    max_newton: int = 500         # total Newton step budget
    mu: float = 10.0              # barrier schedule factor
    armijo: float = 0.25
    backtrack: float = 0.5
    newton_tol: float = 1e-12     # final-stage centering decrement^2/2 target
    center_tol: float = 1e-7      # relaxed centering target for intermediate stages
    max_center_steps: int = 60
    t0: float | None = None       # override the automatic initial barrier weight
    t_cap: float = 1e13           # beyond this, active slacks drown in rounding


@dataclass
class SolveReport:
    x_opt: np.ndarray
    objective_value: float
    kkt_residual: float
    barrier_iterations: int
    newton_steps: int
    status: str
    final_t: float = math.nan
    final_decrement2: float = math.nan   # Newton decrement^2 at the last center
    message: str = ""


def _finite_mask(v: np.ndarray) -> np.ndarray:
    return np.isfinite(v)


def _strictly_feasible(prog: ConvexProgram, x: np.ndarray, g: np.ndarray) -> bool:
    if not np.all(np.isfinite(x)):
        return False
    lo, hi = _finite_mask(prog.lb), _finite_mask(prog.ub)
    if np.any(x[lo] <= prog.lb[lo]) or np.any(x[hi] >= prog.ub[hi]):
        return False
    return bool(np.all(np.isfinite(g)) and np.all(g < 0))


def _assemble(prog: ConvexProgram, x: np.ndarray):
    """Full evaluation: objective and constraints with derivatives."""
    f_val, f_grad, f_hess = prog.objective(x)
    m = len(prog.constraints)
    g = np.empty(m)
    grads = np.zeros((m, prog.n_vars))
    hessians: list[HessCoo] = []
    for i, c in enumerate(prog.constraints):
        gv, gg, gh = c(x)
        g[i] = gv
        grads[i] = gg
        hessians.append(gh)
    return f_val, f_grad, f_hess, g, grads, hessians


def _barrier_value(prog: ConvexProgram, x: np.ndarray, t: float,
                   f_val: float, g: np.ndarray) -> float:
    lo, hi = _finite_mask(prog.lb), _finite_mask(prog.ub)
    slack_lo = x[lo] - prog.lb[lo]
    slack_hi = prog.ub[hi] - x[hi]
    if np.any(g >= 0) or np.any(slack_lo <= 0) or np.any(slack_hi <= 0):
        return math.inf
    return (
        t * f_val
        - float(np.sum(np.log(-g)))
        - float(np.sum(np.log(slack_lo)))
        - float(np.sum(np.log(slack_hi)))
    )


def _solve_kkt(H: np.ndarray, grad: np.ndarray, a_eq: np.ndarray | None) -> tuple[np.ndarray, np.ndarray | None]:
    n = H.shape[0]
    scale = max(1.0, float(np.trace(H)) / n)
    ridge = 0.0
    for _ in range(8):
        Hr = H if ridge == 0.0 else H + ridge * np.eye(n)
        try:
            if a_eq is None:
                dx = np.linalg.solve(Hr, -grad)
                nu = None
            else:
                k = a_eq.shape[0]
                kkt = np.block([[Hr, a_eq.T], [a_eq, np.zeros((k, k))]])
                rhs = np.concatenate([-grad, np.zeros(k)])
                sol = np.linalg.solve(kkt, rhs)
                dx, nu = sol[:n], sol[n:]
        except np.linalg.LinAlgError:
            ridge = max(ridge * 100.0, 1e-14 * scale)
            continue
        if np.all(np.isfinite(dx)):
            slope = float(grad @ dx)
            # near an exact optimum the slope is 0 up to rounding; accept that too
            tol = 1e-10 * max(1e-300, float(np.linalg.norm(grad)) * float(np.linalg.norm(dx)))
            if slope <= tol:
                return dx, nu
        ridge = max(ridge * 100.0, 1e-14 * scale)
    raise np.linalg.LinAlgError("Newton system could not produce a descent direction")


def solve(prog: ConvexProgram, x0: np.ndarray, opts: SolveOptions | None = None) -> SolveReport:
    """Minimize ``prog`` from the strictly feasible start ``x0``.

    If ``x0`` is not strictly feasible a phase-I problem is attempted first;
    when that fails the report carries status ``Infeasible``. ``MaxIter``
    means the total Newton budget ran out; the best feasible center found so
    far is returned.
    """
    opts = opts or SolveOptions()
    x = np.asarray(x0, dtype=float).copy()
    if prog.a_eq is not None and prog.b_eq is not None:
        if not np.allclose(prog.a_eq @ x, prog.b_eq, atol=1e-9):
            # project onto the affine set before checking inequality feasibility
            a = prog.a_eq
            corr = a.T @ np.linalg.solve(a @ a.T, prog.b_eq - a @ x)
            x = x + corr

    _, g0 = prog.values(x)
    if not _strictly_feasible(prog, x, g0):
        found = _phase_one(prog, x, opts)
        if found is None:
            return SolveReport(
                x_opt=x, objective_value=math.nan, kkt_residual=math.inf,
                barrier_iterations=0, newton_steps=0, status=INFEASIBLE,
                message="no strictly feasible start and phase-I failed",
            )
        x = found

    return _barrier_minimize(prog, x, opts)


def _barrier_minimize(prog: ConvexProgram, x: np.ndarray, opts: SolveOptions,
                      stop_when: Callable[[np.ndarray], bool] | None = None) -> SolveReport:
    n = prog.n_vars
    lo, hi = _finite_mask(prog.lb), _finite_mask(prog.ub)
    m_bar = len(prog.constraints) + int(lo.sum()) + int(hi.sum())
    if m_bar == 0:
        m_bar = 1  # pure Newton on the objective; one "outer" pass

    f0, _ = prog.values(x)
    t = opts.t0 if opts.t0 is not None else m_bar / max(1.0, abs(f0))
    total_newton = 0
    outer = 0
    best_x, best_f = x.copy(), f0
    status = OPTIMAL
    message = ""
    last_decrement2 = math.inf

    scale = max(1.0, abs(f0))
    while True:
        outer += 1
        gap = m_bar / t
        # overshoot the gap target by one decade so the reported residual
        # (gap surrogate plus centering inexactness) lands safely under tol
        is_final = gap <= 0.1 * opts.tol * scale or t >= opts.t_cap
        center_tol = opts.newton_tol if is_final else max(opts.newton_tol, opts.center_tol)
        for _ in range(opts.max_center_steps):
            if total_newton >= opts.max_newton:
                status = MAX_ITER
                message = "Newton budget exhausted"
                break
            f_val, f_grad, f_hess, g, grads, hessians = _assemble(prog, x)
            if g.size and (not np.all(np.isfinite(g)) or g.max() >= 0):
                # an active slack fell below rounding resolution; the point is
                # on the boundary for this evaluation order, stop centering
                break
            inv_neg_g = 1.0 / (-g) if g.size else g
            grad_psi = t * f_grad
            H = np.zeros((n, n))
            if g.size:
                grad_psi = grad_psi + grads.T @ inv_neg_g
                H += (grads * (inv_neg_g**2)[:, None]).T @ grads
                for hc, w in zip(hessians, inv_neg_g):
                    if hc is not None:
                        rows, cols, vals = hc
                        np.add.at(H, (rows, cols), w * vals)
            if f_hess is not None:
                rows, cols, vals = f_hess
                np.add.at(H, (rows, cols), t * vals)
            slack_lo = x[lo] - prog.lb[lo]
            slack_hi = prog.ub[hi] - x[hi]
            bound_grad = np.zeros(n)
            bound_grad[lo] -= 1.0 / slack_lo
            bound_grad[hi] += 1.0 / slack_hi
            grad_psi = grad_psi + bound_grad
            diag = np.zeros(n)
            diag[lo] += 1.0 / slack_lo**2
            diag[hi] += 1.0 / slack_hi**2
            H[np.diag_indices(n)] += diag

            try:
                dx, _ = _solve_kkt(H, grad_psi, prog.a_eq)
            except np.linalg.LinAlgError as exc:
                status = MAX_ITER
                message = f"linear algebra failure during centering: {exc}"
                break
            decrement2 = max(0.0, float(-grad_psi @ dx))
            last_decrement2 = decrement2
            if decrement2 / 2.0 <= opts.newton_tol:
                break

            psi_here = _barrier_value(prog, x, t, f_val, g)
            step = 1.0
            slope = float(grad_psi @ dx)
            accepted = False
            while step >= 1e-14:
                x_try = x + step * dx
                f_try, g_try = prog.values(x_try)
                psi_try = _barrier_value(prog, x_try, t, f_try, g_try)
                if psi_try <= psi_here + opts.armijo * step * slope:
                    x = x_try
                    accepted = True
                    break
                step *= opts.backtrack
            total_newton += 1
            if not accepted:
                break  # stalled this center; move the barrier weight on
        else:
            pass

        f_center, g_center = prog.values(x)
        if _strictly_feasible(prog, x, g_center) and f_center < best_f:
            best_f, best_x = f_center, x.copy()
        if stop_when is not None and stop_when(x):
            break
        gap = m_bar / t
        if status != OPTIMAL:
            break
        # overshoot the gap target by one decade so the reported KKT residual
        # (gap surrogate plus centering inexactness) lands safely under tol
        if gap <= 0.1 * opts.tol * max(1.0, abs(f_center)):
            break
        if total_newton >= opts.max_newton:
            status = MAX_ITER
            message = "Newton budget exhausted"
            break
        t *= opts.mu

    # the central path is monotone in t, but centers are inexact; return the best
    f_best, g_best = prog.values(best_x)
    if _strictly_feasible(prog, best_x, g_best):
        x, f_final, g_final = best_x, f_best, g_best
    else:
        f_final, g_final = prog.values(x)

    kkt = _kkt_residual(prog, x, t, f_final, g_final)
    max_violation = float(np.max(g_final)) if g_final.size else -math.inf
    centered = last_decrement2 / 2.0 <= max(1e3 * opts.newton_tol, 1e-9)
    if status == OPTIMAL and (kkt > opts.tol or max_violation > opts.feas_tol or not centered):
        status = MAX_ITER
        message = message or "tolerance not met"
    return SolveReport(
        x_opt=x, objective_value=f_final, kkt_residual=kkt,
        barrier_iterations=outer, newton_steps=total_newton,
        status=status, final_t=t, final_decrement2=last_decrement2,
        message=message,
    )


def _kkt_residual(prog: ConvexProgram, x: np.ndarray, t: float, f_val: float,
                  g: np.ndarray) -> float:
    """Scaled optimality certificate: the barrier duality-gap surrogate.

    At a well-centered point the barrier multipliers ``1/(t*slack)`` are dual
    feasible and the suboptimality is bounded by ``m/t``; the final Newton
    decrement certifies the centering. The raw stationarity norm is not used
    because at large ``t`` it is dominated by rounding noise of the
    ``1/slack^2`` curvature.
    """
    lo, hi = _finite_mask(prog.lb), _finite_mask(prog.ub)
    m_bar = len(prog.constraints) + int(lo.sum()) + int(hi.sum())
    if g.size and np.any(g >= 0):
        return math.inf
    slack_lo = x[lo] - prog.lb[lo]
    slack_hi = prog.ub[hi] - x[hi]
    if np.any(slack_lo <= 0) or np.any(slack_hi <= 0):
        return math.inf
    return (m_bar / t) / max(1.0, abs(f_val)) if m_bar else 0.0


def _phase_one(prog: ConvexProgram, x0: np.ndarray, opts: SolveOptions) -> np.ndarray | None:
    """Find a strictly feasible point by minimizing the worst violation."""
    n = prog.n_vars
    x = np.asarray(x0, dtype=float).copy()
    lo, hi = _finite_mask(prog.lb), _finite_mask(prog.ub)
    # pull x strictly inside the box
    margin_lo = np.where(np.isfinite(prog.ub[lo]), 1e-3 * (prog.ub[lo] - prog.lb[lo]), 1.0)
    x[lo] = np.maximum(x[lo], prog.lb[lo] + np.minimum(margin_lo, 1.0))
    x[hi] = np.minimum(x[hi], prog.ub[hi] - 1e-3 * np.where(np.isfinite(prog.lb[hi]),
                                                            prog.ub[hi] - prog.lb[hi], 1.0))
    _, g = prog.values(x)
    if _strictly_feasible(prog, x, g):
        return x
    if not np.all(np.isfinite(g)):
        return None
    s0 = float(np.max(g)) + 1.0

    def aug_objective(z: np.ndarray):
        grad = np.zeros(n + 1)
        grad[n] = 1.0
        return z[n], grad, None

    def wrap(c: ProgFn) -> ProgFn:
        def g_aug(z: np.ndarray):
            v, gr, hc = c(z[:n])
            grad = np.zeros(n + 1)
            grad[:n] = gr
            grad[n] = -1.0
            return v - z[n], grad, hc
        return g_aug

    aug = ConvexProgram(
        n_vars=n + 1,
        objective=aug_objective,
        constraints=[wrap(c) for c in prog.constraints],
        lb=np.concatenate([prog.lb, [-1.0]]),
        ub=np.concatenate([prog.ub, [abs(s0) + 1.0]]),
        a_eq=None if prog.a_eq is None else np.hstack([prog.a_eq, np.zeros((prog.a_eq.shape[0], 1))]),
        b_eq=prog.b_eq,
    )
    z0 = np.concatenate([x, [s0]])
    report = _barrier_minimize(aug, z0, SolveOptions(
        tol=1e-6, max_newton=opts.max_newton, mu=opts.mu,
    ), stop_when=lambda z: z[n] < -1e-6)
    z = report.x_opt
    if z[n] < -1e-9:
        cand = z[:n]
        _, g = prog.values(cand)
        if _strictly_feasible(prog, cand, g):
            return cand
    return None


def check_derivatives(prog: ConvexProgram, x: np.ndarray, h: float = 1e-6) -> float:
    """Worst relative error between analytic and central-difference gradients.

    Covers the objective and every inequality constraint. ``h`` is a
    relative step: coordinate ``j`` is perturbed by ``h*max(|x_j|, 1)``.
    """
    if h <= 0:
        raise ValueError("h must be > 0")
    x = np.asarray(x, dtype=float)
    n = prog.n_vars
    m = len(prog.constraints)
    _, f_grad, _ = prog.objective(x)
    g_grads = np.array([c(x)[1] for c in prog.constraints]) if m else np.zeros((0, n))

    fd_f = np.zeros(n)
    fd_g = np.zeros((m, n))
    for j in range(n):
        hj = h * max(abs(x[j]), 1.0)
        xp, xm = x.copy(), x.copy()
        xp[j] += hj
        xm[j] -= hj
        fp, gp = prog.values(xp)
        fm, gm = prog.values(xm)
        fd_f[j] = (fp - fm) / (2.0 * hj)
        if m:
            fd_g[:, j] = (gp - gm) / (2.0 * hj)

    def rel_err(an: np.ndarray, fd: np.ndarray) -> float:
        denom = np.maximum(np.maximum(np.abs(an), np.abs(fd)), 1e-6)
        return float(np.max(np.abs(an - fd) / denom)) if an.size else 0.0

    worst = rel_err(f_grad, fd_f)
    if m:
        worst = max(worst, rel_err(g_grads, fd_g))
    return worst
