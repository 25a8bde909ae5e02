"""Solver contract for the synthesis linear programs.

The rest of the package depends only on this module's LinearProgram,
solve() and solve_centered(); the solver underneath (HiGHS via scipy,
plus a Newton centering step) can be swapped without touching callers.
Every optimal solution is re-checked against the constraints
independently of the solver's own report.

solve() returns a vertex optimum. solve_centered() returns the analytic
center of the near-optimal face instead, and exists because a vertex is
the worst representative of that face for this package: it zeroes out
whole columns of the obfuscation matrix, which starves the downstream
budget-reservation step (a row whose mass sits on <= delta columns
cannot be made prunable at all). The centered optimum keeps every
column alive that can be alive.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import sparse
from scipy.optimize import linprog

FEASIBILITY_TOLERANCE = 1e-9

STATUS_OPTIMAL = "optimal"
STATUS_INFEASIBLE = "infeasible"
STATUS_UNBOUNDED = "unbounded"
STATUS_ITERATION_LIMIT = "iteration_limit"

_STATUS_MAP = {
    0: STATUS_OPTIMAL,
    1: STATUS_ITERATION_LIMIT,
    2: STATUS_INFEASIBLE,
    3: STATUS_UNBOUNDED,
    4: STATUS_ITERATION_LIMIT,
}


@dataclass
class LinearProgram:
    """min c.x  s.t.  A_eq x = b_eq,  A_ub x <= b_ub,  lo <= x <= hi."""

    num_vars: int
    objective: np.ndarray
    a_eq: sparse.csr_matrix | None = None
    b_eq: np.ndarray | None = None
    a_ub: sparse.csr_matrix | None = None
    b_ub: np.ndarray | None = None
    bounds: np.ndarray | None = None  # (num_vars, 2)

    def __post_init__(self):
        self.objective = np.asarray(self.objective, dtype=float)
        if self.objective.shape != (self.num_vars,):
            raise ValueError(
                f"objective shape {self.objective.shape} != ({self.num_vars},)"
            )
        if self.bounds is None:
            self.bounds = np.tile([0.0, 1.0], (self.num_vars, 1))
        self.bounds = np.asarray(self.bounds, dtype=float)
        if self.bounds.shape != (self.num_vars, 2):
            raise ValueError(f"bounds shape {self.bounds.shape}")
        if np.any(self.bounds[:, 0] > self.bounds[:, 1]):
            raise ValueError("some lower bound exceeds its upper bound")
        if not np.all(np.isfinite(self.objective)):
            raise ValueError("objective must be finite")
        for mat, rhs, label in (
            (self.a_eq, self.b_eq, "eq"),
            (self.a_ub, self.b_ub, "ub"),
        ):
            if mat is None:
                continue
            if mat.shape[1] != self.num_vars:
                raise ValueError(f"{label} matrix has {mat.shape[1]} columns")
            if rhs is None or len(rhs) != mat.shape[0]:
                raise ValueError(f"{label} rhs length mismatch")
            if not np.all(np.isfinite(mat.data)) or not np.all(np.isfinite(rhs)):
                raise ValueError(f"{label} coefficients must be finite")

    @property
    def num_eq(self) -> int:
        return 0 if self.a_eq is None else self.a_eq.shape[0]

    @property
    def num_ineq(self) -> int:
        return 0 if self.a_ub is None else self.a_ub.shape[0]

    def eq_constraints(self):
        """Yield (sparse row as {var: coef}, rhs) for each equality."""
        yield from _iter_rows(self.a_eq, self.b_eq)

    def ineq_constraints(self):
        """Yield (sparse row as {var: coef}, rhs) meaning row.x <= rhs."""
        yield from _iter_rows(self.a_ub, self.b_ub)


def _iter_rows(mat, rhs):
    if mat is None:
        return
    csr = mat.tocsr()
    for r in range(csr.shape[0]):
        lo, hi = csr.indptr[r], csr.indptr[r + 1]
        row = dict(zip(csr.indices[lo:hi].tolist(), csr.data[lo:hi].tolist()))
        yield row, float(rhs[r])


class LpBuilder:
    """Streams sparse constraints into a LinearProgram."""

    def __init__(self, num_vars: int):
        self.num_vars = num_vars
        self.objective = np.zeros(num_vars)
        self.bounds = np.tile([0.0, 1.0], (num_vars, 1))
        self._eq = ([], [], [])  # rows, cols, data
        self._eq_rhs: list[float] = []
        self._ub = ([], [], [])
        self._ub_rhs: list[float] = []

    def _add(self, store, rhs_store, indices, coefs, rhs):
        if len(indices) != len(coefs):
            raise ValueError(
                f"{len(indices)} indices paired with {len(coefs)} coefficients"
            )
        row = len(rhs_store)
        for idx, coef in zip(indices, coefs):
            if not 0 <= idx < self.num_vars:
                raise ValueError(f"variable index {idx} out of range")
            store[0].append(row)
            store[1].append(idx)
            store[2].append(float(coef))
        rhs_store.append(float(rhs))

    def add_eq(self, indices, coefs, rhs):
        self._add(self._eq, self._eq_rhs, indices, coefs, rhs)

    def add_ub(self, indices, coefs, rhs):
        self._add(self._ub, self._ub_rhs, indices, coefs, rhs)

    def build(self) -> LinearProgram:
        def assemble(store, rhs_store):
            if not rhs_store:
                return None, None
            rows, cols, data = store
            mat = sparse.coo_matrix(
                (data, (rows, cols)), shape=(len(rhs_store), self.num_vars)
            ).tocsr()
            return mat, np.array(rhs_store)

        a_eq, b_eq = assemble(self._eq, self._eq_rhs)
        a_ub, b_ub = assemble(self._ub, self._ub_rhs)
        return LinearProgram(
            num_vars=self.num_vars,
            objective=self.objective,
            a_eq=a_eq,
            b_eq=b_eq,
            a_ub=a_ub,
            b_ub=b_ub,
            bounds=self.bounds,
        )


@dataclass
class LpSolution:
    status: str
    x: np.ndarray | None
    objective_value: float | None
    diagnostics: dict = field(default_factory=dict)


def residuals(lp: LinearProgram, x: np.ndarray) -> dict:
    """Independent constraint-violation measurements for a point."""
    out = {"eq": 0.0, "ub": 0.0, "bounds": 0.0}
    if lp.a_eq is not None:
        out["eq"] = float(np.max(np.abs(lp.a_eq @ x - lp.b_eq), initial=0.0))
    if lp.a_ub is not None:
        out["ub"] = float(np.max(lp.a_ub @ x - lp.b_ub, initial=0.0))
    out["bounds"] = float(
        max(
            np.max(lp.bounds[:, 0] - x, initial=0.0),
            np.max(x - lp.bounds[:, 1], initial=0.0),
        )
    )
    return out


def _refine(lp: LinearProgram, x: np.ndarray, passes: int = 4) -> np.ndarray:
    """Polish a near-feasible point by alternating projection.

    Centered points can drift from the equality manifold by round-off;
    the corrections here are on the order of that drift, so a few passes
    are enough and the objective moves by a negligible amount.
    """
    x = x.copy()
    gram = None
    if lp.a_eq is not None:
        gram = (lp.a_eq @ lp.a_eq.T).toarray()
    for _ in range(passes):
        if lp.a_eq is not None:
            gap = lp.b_eq - lp.a_eq @ x
            x += lp.a_eq.T @ np.linalg.solve(gram, gap)
        np.clip(x, lp.bounds[:, 0], lp.bounds[:, 1], out=x)
        if lp.a_ub is not None:
            excess = lp.a_ub @ x - lp.b_ub
            rows = np.flatnonzero(excess > 0)
            if rows.size:
                sub = lp.a_ub[rows]
                norms = np.asarray(sub.multiply(sub).sum(axis=1)).ravel()
                x -= sub.T @ (excess[rows] / norms)
        if max(residuals(lp, x).values()) <= FEASIBILITY_TOLERANCE:
            break
    return x


def solve(lp: LinearProgram) -> LpSolution:
    """Solve deterministically at feasibility tolerance 1e-9.

    A solver-reported optimum that fails the independent residual check
    is downgraded to iteration_limit with diagnostics instead of being
    returned as optimal.
    """
    res = linprog(
        c=lp.objective,
        A_ub=lp.a_ub,
        b_ub=lp.b_ub,
        A_eq=lp.a_eq,
        b_eq=lp.b_eq,
        bounds=lp.bounds,
        method="highs",
        options={
            "primal_feasibility_tolerance": FEASIBILITY_TOLERANCE,
            "dual_feasibility_tolerance": FEASIBILITY_TOLERANCE,
        },
    )
    status = _STATUS_MAP.get(res.status, STATUS_ITERATION_LIMIT)
    if status != STATUS_OPTIMAL:
        return LpSolution(
            status=status,
            x=None,
            objective_value=None,
            diagnostics={"solver_message": res.message, "solver_status": res.status},
        )
    x = np.asarray(res.x, dtype=float)
    resid = residuals(lp, x)
    worst = max(resid.values())
    objective_value = float(lp.objective @ x)
    if worst > FEASIBILITY_TOLERANCE:
        return LpSolution(
            status=STATUS_ITERATION_LIMIT,
            x=x,
            objective_value=objective_value,
            diagnostics={
                "solver_message": "residual check failed",
                "residuals": resid,
            },
        )
    return LpSolution(
        status=STATUS_OPTIMAL,
        x=x,
        objective_value=objective_value,
        diagnostics={"residuals": resid},
    )


def solve_centered(
    lp: LinearProgram,
    gap: float | None = None,
    rel_gap: float = 1e-6,
    interior_hint: np.ndarray | None = None,
) -> LpSolution:
    """Solve, then return the analytic center of the near-optimal slab.

    A vertex optimum is the worst representative of a large optimal
    face: it zeroes every variable it can. The point returned here
    instead maximizes the log-barrier over {feasible, objective <=
    optimum + gap}, which keeps every variable as large as the face
    allows. gap defaults to max(1e-8, rel_gap * |optimum|); a wider slab
    costs a bounded amount of objective but makes the selected point
    respond smoothly to perturbations of the program data.

    interior_hint, when given, must be a point satisfying the equality
    constraints exactly; it is blended with the vertex optimum to start
    the Newton iteration strictly inside every inequality. Without a
    hint a max-margin program is solved to manufacture one.
    """
    base = solve(lp)
    if base.status != STATUS_OPTIMAL:
        return base
    opt = base.objective_value
    if gap is None:
        gap = max(1e-8, rel_gap * abs(opt))
    hint = interior_hint if interior_hint is not None else _interior_point(lp)
    if hint is None:
        return base
    x = _center(lp, base.x, opt, gap, np.asarray(hint, dtype=float))
    if x is None:
        return base
    resid = residuals(lp, x)
    if max(resid.values()) > FEASIBILITY_TOLERANCE:
        x = _refine(lp, x)
        resid = residuals(lp, x)
        if max(resid.values()) > FEASIBILITY_TOLERANCE:
            return base
    return LpSolution(
        status=STATUS_OPTIMAL,
        x=x,
        objective_value=float(lp.objective @ x),
        diagnostics={"residuals": resid, "centered": True, "vertex_objective": opt},
    )


def _interior_point(lp: LinearProgram) -> np.ndarray | None:
    """Max-margin point: strictly inside every inequality and bound."""
    n = lp.num_vars
    ext = np.zeros(n + 1)
    ext[n] = -1.0  # maximize the shared margin
    rows = []
    rhs = []
    if lp.a_ub is not None:
        norms = np.sqrt(np.asarray(lp.a_ub.multiply(lp.a_ub).sum(axis=1)).ravel())
        rows.append(sparse.hstack([lp.a_ub, norms.reshape(-1, 1)]))
        rhs.append(lp.b_ub)
    rows.append(sparse.hstack([-sparse.identity(n, format="csr"), np.ones((n, 1))]))
    rhs.append(-lp.bounds[:, 0])
    rows.append(sparse.hstack([sparse.identity(n, format="csr"), np.ones((n, 1))]))
    rhs.append(lp.bounds[:, 1])
    a_ub = sparse.vstack(rows).tocsr()
    b_ub = np.concatenate(rhs)
    a_eq = None
    if lp.a_eq is not None:
        a_eq = sparse.hstack(
            [lp.a_eq, sparse.csr_matrix((lp.a_eq.shape[0], 1))]
        ).tocsr()
    margin_cap = float(np.max(lp.bounds[:, 1] - lp.bounds[:, 0]))
    aux = LinearProgram(
        num_vars=n + 1,
        objective=ext,
        a_eq=a_eq,
        b_eq=lp.b_eq,
        a_ub=a_ub,
        b_ub=b_ub,
        bounds=np.vstack([
            np.column_stack([np.full(n, -np.inf), np.full(n, np.inf)]),
            [0.0, margin_cap],
        ]),
    )
    sol = solve(aux)
    if sol.status != STATUS_OPTIMAL or sol.x is None or sol.x[n] <= 0:
        return None
    return sol.x[:n]


def _center(lp, x_opt, opt, gap, hint, max_iters=60):
    """Damped Newton on the log barrier of the gap slab; None on failure."""
    n = lp.num_vars
    c = lp.objective
    lo, hi = lp.bounds[:, 0], lp.bounds[:, 1]
    budget = opt + gap

    def slacks(x):
        parts = [x - lo, hi - x]
        if lp.a_ub is not None:
            parts.append(lp.b_ub - lp.a_ub @ x)
        parts.append(np.array([budget - c @ x]))
        return parts

    # blend the vertex toward the hint: slacks are linear, so any theta
    # in (0, 1) is strictly interior to the constraints the hint clears,
    # and theta is capped so the blend stays inside the objective slab
    excess = float(c @ hint) - opt
    theta = 0.9 if excess <= 0 else min(0.9, 0.5 * gap / excess)
    x = None
    for _ in range(8):
        cand = (1 - theta) * x_opt + theta * hint
        if float(c @ cand) <= opt + 0.9 * gap and all(
            p.min() > 0 for p in slacks(cand)
        ):
            x = cand
            break
        theta *= 0.5
    if x is None:
        return None
    for _ in range(max_iters):
        sx_lo = x - lo
        sx_hi = hi - x
        r_sl = budget - float(c @ x)
        grad = -1.0 / sx_lo + 1.0 / sx_hi + c / r_sl
        hdiag = 1.0 / sx_lo**2 + 1.0 / sx_hi**2
        if lp.a_ub is not None:
            r_ub = lp.b_ub - lp.a_ub @ x
            grad += lp.a_ub.T @ (1.0 / r_ub)
            hess = (lp.a_ub.multiply((1.0 / r_ub**2)[:, None]).T @ lp.a_ub).toarray()
        else:
            hess = np.zeros((n, n))
        hess[np.diag_indices(n)] += hdiag
        hess += np.outer(c, c) / r_sl**2
        m = lp.num_eq
        if m:
            kkt = np.zeros((n + m, n + m))
            kkt[:n, :n] = hess
            kkt[:n, n:] = lp.a_eq.T.toarray()
            kkt[n:, :n] = lp.a_eq.toarray()
            rhs = np.concatenate([-grad, np.zeros(m)])
        else:
            kkt = hess
            rhs = -grad
        try:
            step = np.linalg.solve(kkt, rhs)
        except np.linalg.LinAlgError:
            return None
        dx = step[:n]
        decrement = float(-grad @ dx)
        alpha = 1.0
        for s, ds in ((sx_lo, dx), (sx_hi, -dx)):
            shrinking = ds < 0
            if np.any(shrinking):
                alpha = min(alpha, 0.99 * float(np.min(s[shrinking] / -ds[shrinking])))
        if lp.a_ub is not None:
            dr = -(lp.a_ub @ dx)
            shrinking = dr < 0
            if np.any(shrinking):
                alpha = min(alpha, 0.99 * float(np.min(r_ub[shrinking] / -dr[shrinking])))
        d_sl = -float(c @ dx)
        if d_sl < 0:
            alpha = min(alpha, 0.99 * r_sl / -d_sl)
        x = x + alpha * dx
        if decrement < 1e-10 and alpha > 0.5:
            break
    return x


def to_lp_text(lp: LinearProgram) -> str:
    """Dump in CPLEX LP text form for cross-checking with other solvers."""
    lines = ["Minimize", " obj: " + _linear_expr(enumerate(lp.objective))]
    lines.append("Subject To")
    for r, (row, rhs) in enumerate(lp.eq_constraints()):
        lines.append(f" eq{r}: " + _linear_expr(sorted(row.items())) + f" = {float(rhs)!r}")
    for r, (row, rhs) in enumerate(lp.ineq_constraints()):
        lines.append(f" le{r}: " + _linear_expr(sorted(row.items())) + f" <= {float(rhs)!r}")
    lines.append("Bounds")
    for v in range(lp.num_vars):
        lo, hi = lp.bounds[v]
        lines.append(f" {float(lo)!r} <= x{v} <= {float(hi)!r}")
    lines.append("End")
    return "\n".join(lines) + "\n"


def _linear_expr(terms) -> str:
    parts = []
    for idx, coef in terms:
        coef = float(coef)
        if coef == 0:
            continue
        sign = "-" if coef < 0 else "+"
        if parts:
            parts.append(f"{sign} {abs(coef)!r} x{idx}")
        else:
            parts.append(f"{'-' if coef < 0 else ''}{abs(coef)!r} x{idx}")
    return " ".join(parts) if parts else "0 x0"
