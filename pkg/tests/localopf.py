"""Independent local AC-OPF solve used as a test oracle.

Solves the polynomial model with scipy's SLSQP from several voltage-profile
starts and returns the best locally optimal point found.  This path shares
no code with the relaxation pipeline beyond the POP construction itself,
and it doubles as the provider of "known local solution" fixtures.
"""

from __future__ import annotations

import numpy as np
from scipy.optimize import minimize

from momentsos.acopf import AcopfOptions, AcopfPop, NetworkCase, build_pop
from momentsos.poly import Polynomial


def _poly_grad(p: Polynomial, x: np.ndarray) -> np.ndarray:
    g = np.zeros(len(x))
    for e, c in p.terms.items():
        for pos, (i, pw) in enumerate(e):
            v = c * pw * x[i - 1] ** (pw - 1)
            for j, (i2, pw2) in enumerate(e):
                if j != pos:
                    v *= x[i2 - 1] ** pw2
            g[i - 1] += v
    return g


def solve_local(case: NetworkCase, starts: int = 5, seed: int = 0):
    """Return (objective, point, apop) for the best local optimum found."""
    apop = build_pop(case, AcopfOptions(first_order_thermal=False))
    pop = apop.pop
    n = pop.nvars
    rng = np.random.default_rng(seed)

    cons = []
    for g in pop.inequalities:
        cons.append(
            {"type": "ineq", "fun": (lambda x, g=g: g.evaluate(x)),
             "jac": (lambda x, g=g: _poly_grad(g, x))}
        )
    for g in pop.equalities:
        cons.append(
            {"type": "eq", "fun": (lambda x, g=g: g.evaluate(x)),
             "jac": (lambda x, g=g: _poly_grad(g, x))}
        )
    fobj = lambda x: pop.objective.evaluate(x)
    fgrad = lambda x: _poly_grad(pop.objective, x)

    def initial_point(trial: int) -> np.ndarray:
        x0 = np.zeros(n)
        for bus in case.buses:
            re_i, im_i = apop.bus_vars[bus.id]
            vm = 0.5 * (bus.vmin + bus.vmax)
            theta = 0.0 if trial == 0 else rng.uniform(-0.05, 0.05)
            x0[re_i - 1] = vm * np.cos(theta)
            x0[im_i - 1] = vm * np.sin(theta)
        for k, gen in enumerate(case.generators):
            re_i, im_i = apop.gen_vars[k]
            frac = 0.5 if trial == 0 else rng.uniform(0.2, 0.8)
            x0[re_i - 1] = gen.smin.real + frac * (gen.smax.real - gen.smin.real)
            x0[im_i - 1] = 0.5 * (gen.smin.imag + gen.smax.imag)
        ref_im = apop.bus_vars[case.ref_bus][1]
        x0[ref_im - 1] = 0.0
        return x0

    best = (np.inf, None)
    for trial in range(starts):
        res = minimize(
            fobj, initial_point(trial), jac=fgrad, constraints=cons,
            method="SLSQP", options={"maxiter": 800, "ftol": 1e-10},
        )
        # SLSQP sometimes flags a line-search failure at the optimum; any
        # feasible point is a usable upper bound, so judge by violation.
        x = res.x
        viol = max(
            [0.0]
            + [max(0.0, -g.evaluate(x)) for g in pop.inequalities]
            + [abs(g.evaluate(x)) for g in pop.equalities]
        )
        if viol < 1e-6 and res.fun < best[0]:
            best = (float(res.fun), x.copy())
    return best[0], best[1], apop
