"""Linear-programming backend for the restricted master problems.

The contract is intentionally tiny: add_columns / add_rows / fix_bounds /
solve_relaxation.  Duals are normalized so that the reduced cost of a column
is cost - sum(dual[row] * coef[row]) regardless of row sense; backend
tolerance is 1e-7.  The bundled implementation assembles dense arrays and
solves with scipy's HiGHS; an external solver can be dropped in by
implementing the same four methods.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import linprog


class LpBackendFailure(Exception):
    """The backend could not solve the relaxation."""


class LinearProgram:
    """Minimize c x subject to typed rows, 0 <= x <= ub."""

    def __init__(self):
        self.costs = []
        self.col_coefs = []     # per column: {row_id: coef}
        self.bounds = []        # per column: (lb, ub); ub None = +inf
        self.rows = []          # per row: (sense, rhs) with sense in =, <=, >=

    # -- model building ----------------------------------------------------

    def add_columns(self, cols):
        """cols: iterable of (cost, {row_id: coef}, lb, ub) -> column ids."""
        ids = []
        for (cost, coefs, lb, ub) in cols:
            ids.append(len(self.costs))
            self.costs.append(float(cost))
            self.col_coefs.append(dict(coefs))
            self.bounds.append((lb, ub))
        return ids

    def add_rows(self, rows):
        """rows: iterable of (sense, rhs, {col_id: coef}) -> row ids."""
        ids = []
        for (sense, rhs, coefs) in rows:
            if sense not in ("=", "<=", ">="):
                raise ValueError(f"bad row sense {sense!r}")
            rid = len(self.rows)
            ids.append(rid)
            self.rows.append((sense, float(rhs)))
            for col, coef in coefs.items():
                self.col_coefs[col][rid] = float(coef)
        return ids

    def fix_bounds(self, col, lb, ub):
        self.bounds[col] = (lb, ub)

    # -- solving -----------------------------------------------------------

    def solve_relaxation(self):
        """(objective, primal values, duals keyed by row id)."""
        ncol = len(self.costs)
        nrow = len(self.rows)
        if ncol == 0:
            raise LpBackendFailure("no columns")
        eq_rows = [i for i, (s, _) in enumerate(self.rows) if s == "="]
        ub_rows = [i for i, (s, _) in enumerate(self.rows) if s != "="]
        A_eq = np.zeros((len(eq_rows), ncol)) if eq_rows else None
        A_ub = np.zeros((len(ub_rows), ncol)) if ub_rows else None
        b_eq = np.array([self.rows[i][1] for i in eq_rows]) if eq_rows else None
        b_ub = np.zeros(len(ub_rows)) if ub_rows else None
        sign = {}
        for k, i in enumerate(ub_rows):
            sense, rhs = self.rows[i]
            # >= rows are negated into <= form; remember the flip
            sign[i] = -1.0 if sense == ">=" else 1.0
            b_ub[k] = rhs * sign[i]
        pos_eq = {i: k for k, i in enumerate(eq_rows)}
        pos_ub = {i: k for k, i in enumerate(ub_rows)}
        for j, coefs in enumerate(self.col_coefs):
            for rid, coef in coefs.items():
                if rid in pos_eq:
                    A_eq[pos_eq[rid], j] = coef
                else:
                    A_ub[pos_ub[rid], j] = coef * sign[rid]
        res = linprog(np.array(self.costs), A_ub=A_ub, b_ub=b_ub,
                      A_eq=A_eq, b_eq=b_eq, bounds=self.bounds, method="highs")
        if res.status == 2:
            raise LpBackendFailure("infeasible relaxation")
        if not res.success:
            raise LpBackendFailure(f"solver status {res.status}: {res.message}")
        duals = {}
        if eq_rows:
            for k, i in enumerate(eq_rows):
                duals[i] = float(res.eqlin.marginals[k])
        if ub_rows:
            for k, i in enumerate(ub_rows):
                # undo the >= negation so rc = c - sum(dual * original coef)
                duals[i] = float(res.ineqlin.marginals[k]) * sign[i]
        return float(res.fun), [float(v) for v in res.x], duals
