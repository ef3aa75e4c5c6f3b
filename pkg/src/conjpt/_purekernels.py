"""Pure-Python integration sweeps; numerical twin of the compiled kernels.

All four sweeps use classical fixed-step RK4 on one shared uniform grid.  The
extremal sweep runs backward from the terminal data, re-solving the pointwise
control minimization at every stage with warm starts.  The variational sweeps
run in a second pass along the stored trajectory, reconstructing stage
midpoints by cubic Hermite interpolation of (x, p) and re-solving the control
there, so first- and second-order sensitivities stay fourth-order accurate.

The compiled extension implements the same algorithms step for step; tests
compare the two backends directly.
"""

from __future__ import annotations

import numpy as np

from conjpt.errors import ControlSolveError, NonFiniteTrajectoryError

__all__ = [
    "newton_control",
    "control_first_order",
    "control_second_directional",
    "extremal_sweep",
    "variational_sweep",
    "w_forward_sweep",
    "replay_sweep",
]


def newton_control(bundles, x, p, guess, tol: float = 1e-12, max_iter: int = 50):
    """Solve p . f_u(x, u) + L_u(x, u) = 0 for u by damped Newton.

    The Jacobian of the residual in u is L_uu (the dynamics are affine in u),
    symmetric positive definite under uniform convexity, so the undamped step
    is the natural one; damping only guards bad scaling far from the solution.
    """
    u = np.array(guess, dtype=float)
    f_val, _ = bundles.f_low(x)
    fu_p = f_val[1:] @ p  # (m,) components p . f_i
    ll = bundles.L_low(x, u)
    r = ll.L_u + fu_p
    rnorm = float(np.max(np.abs(r)))
    if not np.isfinite(rnorm):
        raise NonFiniteTrajectoryError("control residual turned non-finite")
    for _ in range(max_iter):
        if rnorm <= tol:
            return u
        try:
            step = np.linalg.solve(ll.L_uu, -r)
        except np.linalg.LinAlgError as exc:
            raise ControlSolveError(f"singular L_uu at x={x!r}") from exc
        lam = 1.0
        for _ in range(30):
            u_try = u + lam * step
            ll_try = bundles.L_low(x, u_try)
            r_try = ll_try.L_u + fu_p
            rnorm_try = float(np.max(np.abs(r_try)))
            if rnorm_try < rnorm or rnorm_try <= tol:
                u, ll, r, rnorm = u_try, ll_try, r_try, rnorm_try
                break
            lam *= 0.5
        else:
            raise ControlSolveError(f"control line search stalled at x={x!r}")
    if rnorm <= tol:
        return u
    raise ControlSolveError(
        f"control Newton did not reach tolerance {tol:g} in {max_iter} iterations "
        f"(residual {rnorm:g})"
    )


def control_first_order(f_val, f_jac, L_uu, L_xu, p, Xz, Pz):
    """u_z from the differentiated stationarity identity.

    L_uu u_z = -(f_u^T p_z + C x_z) with C = p . f_ux + L_ux.
    Accepts Xz, Pz of shape (n, k) for any number of directions k.
    """
    fu = f_val[1:]  # (m, n): row i = f_i
    C = np.einsum("a,iab->ib", p, f_jac[1:]) + L_xu.T
    rhs = fu @ Pz + C @ Xz
    return np.linalg.solve(L_uu, -rhs)


def control_second_directional(fh, lh, p, q, w0, b0, xi, pi):
    """u_zz(v x v) from the twice-differentiated stationarity identity."""
    fu = fh.f_val[1:]
    rhs = fu @ pi
    rhs = rhs + 2.0 * np.einsum("a,iab,b->i", q, fh.f_jac[1:], w0)
    rhs = rhs + np.einsum("a,iabc,b,c->i", p, fh.f_hess[1:], w0, w0)
    rhs = rhs + np.einsum("a,iab,b->i", p, fh.f_jac[1:], xi)
    rhs = rhs + np.einsum("bci,b,c->i", lh.L_xxu, w0, w0)
    rhs = rhs + 2.0 * np.einsum("bij,b,j->i", lh.L_xuu, w0, b0)
    rhs = rhs + np.einsum("ijk,j,k->i", lh.L_uuu, b0, b0)
    rhs = rhs + lh.L_xu.T @ xi
    return np.linalg.solve(lh.L_uu, -rhs)


def _assemble_fx(f_jac, u):
    fx = f_jac[0].copy()
    for i in range(u.size):
        fx += f_jac[i + 1] * u[i]
    return fx


def _assemble_fval(f_val, u):
    out = f_val[0].copy()
    for i in range(u.size):
        out += f_val[i + 1] * u[i]
    return out


def _hermite_mid(y0, yd0, y1, yd1, h):
    # cubic Hermite value at the cell midpoint
    return 0.5 * (y0 + y1) + 0.125 * h * (yd0 - yd1)


def extremal_sweep(bundles, n, m, z, pT, T, steps, tol=1e-12, max_iter=50):
    """Integrate the state/costate system backward from (z, pT) at t = T.

    Returns node arrays on the ascending grid t_j = j T / N:
    x, p, u, xdot, pdot, udot, gamma (running-cost samples).
    """
    N = int(steps)
    dt = T / N
    hs = -dt
    x = np.empty((N + 1, n))
    p = np.empty((N + 1, n))
    u = np.empty((N + 1, m))
    xdot = np.empty((N + 1, n))
    pdot = np.empty((N + 1, n))
    udot = np.empty((N + 1, m))
    gamma = np.empty(N + 1)

    def node_data(j):
        xs, ps = x[j], p[j]
        us = u[j]
        f_val, f_jac = bundles.f_low(xs)
        ll = bundles.L_low(xs, us)
        fx = _assemble_fx(f_jac, us)
        xdot[j] = _assemble_fval(f_val, us)
        pdot[j] = -(ps @ fx) - ll.L_x
        gamma[j] = ll.L
        C = np.einsum("a,iab->ib", ps, f_jac[1:]) + ll.L_xu.T
        rhs_u = f_val[1:] @ pdot[j] + C @ xdot[j]
        udot[j] = np.linalg.solve(ll.L_uu, -rhs_u)

    with np.errstate(over="ignore", invalid="ignore"):
        x[N] = np.asarray(z, dtype=float)
        p[N] = np.asarray(pT, dtype=float)
        u[N] = newton_control(bundles, x[N], p[N], np.zeros(m), tol, max_iter)
        node_data(N)

        for j in range(N, 0, -1):
            xj, pj = x[j], p[j]

            def rhs_with_Lx(xs, ps, uw):
                us = newton_control(bundles, xs, ps, uw, tol, max_iter)
                f_val, f_jac = bundles.f_low(xs)
                ll = bundles.L_low(xs, us)
                fx = _assemble_fx(f_jac, us)
                return _assemble_fval(f_val, us), -(ps @ fx) - ll.L_x, us

            k1x, k1p, u1 = rhs_with_Lx(xj, pj, u[j])
            k2x, k2p, u2 = rhs_with_Lx(xj + 0.5 * hs * k1x, pj + 0.5 * hs * k1p, u1)
            k3x, k3p, u3 = rhs_with_Lx(xj + 0.5 * hs * k2x, pj + 0.5 * hs * k2p, u2)
            k4x, k4p, u4 = rhs_with_Lx(xj + hs * k3x, pj + hs * k3p, u3)
            x[j - 1] = xj + (hs / 6.0) * (k1x + 2 * k2x + 2 * k3x + k4x)
            p[j - 1] = pj + (hs / 6.0) * (k1p + 2 * k2p + 2 * k3p + k4p)
            if not (np.all(np.isfinite(x[j - 1])) and np.all(np.isfinite(p[j - 1]))):
                raise NonFiniteTrajectoryError(
                    f"state or costate blew up integrating backward past t={dt*(j-1):g}"
                )
            u[j - 1] = newton_control(bundles, x[j - 1], p[j - 1], u4, tol, max_iter)
            node_data(j - 1)

    return x, p, u, xdot, pdot, udot, gamma


def variational_sweep(bundles, n, m, traj_arrays, T, steps, XzT, PzT,
                      v=None, piT=None, tol=1e-12, max_iter=50):
    """Backward sweep of the first (and optionally second) order sensitivities.

    ``traj_arrays`` is (x, p, u, xdot, pdot, udot) on the shared grid.  With a
    direction v, also integrates the directional second-order state/costate
    pair (x_zz(vxv), p_zz(vxv)) with terminal data (0, piT).
    Returns (Xz, Pz, Uz[, xi, pi, mu]) as node arrays.
    """
    x, p, u, xdot, pdot, udot = traj_arrays
    N = int(steps)
    dt = T / N
    hs = -dt
    with_dir = v is not None
    Xz = np.empty((N + 1, n, n))
    Pz = np.empty((N + 1, n, n))
    Uz = np.empty((N + 1, m, n))
    xi = np.empty((N + 1, n)) if with_dir else None
    pi = np.empty((N + 1, n)) if with_dir else None
    mu = np.empty((N + 1, m)) if with_dir else None

    def basepoint(xs, ps, uw):
        us = newton_control(bundles, xs, ps, uw, tol, max_iter)
        return xs, ps, us, bundles.f_high(xs), bundles.L_high(xs, us)

    def rhs(base, S):
        xs, ps, us, fh, lh = base
        mu_s = None
        bXz, bPz = S[0], S[1]
        fx = _assemble_fx(fh.f_jac, us)
        fxx = fh.f_hess[0].copy()
        for i in range(m):
            fxx += fh.f_hess[i + 1] * us[i]
        fu = fh.f_val[1:]  # (m, n)
        U = control_first_order(fh.f_val, fh.f_jac, lh.L_uu, lh.L_xu, ps, bXz, bPz)
        dXz = fx @ bXz + fu.T @ U
        dPz = (
            -fx.T @ bPz
            - np.einsum("b,bac,cB->aB", ps, fxx, bXz)
            - np.einsum("b,iba,iB->aB", ps, fh.f_jac[1:], U)
            - lh.L_xx @ bXz
            - lh.L_xu @ U
        )
        out = [dXz, dPz]
        if with_dir:
            bxi, bpi = S[2], S[3]
            w0 = bXz @ v
            q = bPz @ v
            b0 = U @ v
            mu_s = control_second_directional(fh, lh, ps, q, w0, b0, bxi, bpi)
            fxxx = fh.f_third[0].copy()
            for i in range(m):
                fxxx += fh.f_third[i + 1] * us[i]
            dxi = (
                np.einsum("abc,b,c->a", fxx, w0, w0)
                + 2.0 * np.einsum("iab,b,i->a", fh.f_jac[1:], w0, b0)
                + fx @ bxi
                + fu.T @ mu_s
            )
            dpi = (
                -fx.T @ bpi
                - 2.0 * np.einsum("b,bac,c->a", q, fxx, w0)
                - 2.0 * np.einsum("b,iba,i->a", q, fh.f_jac[1:], b0)
                - np.einsum("b,bacd,c,d->a", ps, fxxx, w0, w0)
                - 2.0 * np.einsum("b,ibac,c,i->a", ps, fh.f_hess[1:], w0, b0)
                - np.einsum("b,bac,c->a", ps, fxx, bxi)
                - np.einsum("b,iba,i->a", ps, fh.f_jac[1:], mu_s)
                - np.einsum("acd,c,d->a", lh.L_xxx, w0, w0)
                - 2.0 * np.einsum("aci,c,i->a", lh.L_xxu, w0, b0)
                - np.einsum("aij,i,j->a", lh.L_xuu, b0, b0)
                - lh.L_xx @ bxi
                - lh.L_xu @ mu_s
            )
            out += [dxi, dpi]
        return out, U, (mu_s if with_dir else None)

    S = [np.eye(n) if XzT is None else np.array(XzT, dtype=float),
         np.array(PzT, dtype=float)]
    if with_dir:
        v = np.asarray(v, dtype=float)
        S += [np.zeros(n), np.array(piT, dtype=float)]
    Xz[N], Pz[N] = S[0], S[1]
    if with_dir:
        xi[N], pi[N] = S[2], S[3]

    node_base = basepoint(x[N], p[N], u[N])
    for j in range(N, 0, -1):
        h = dt
        xm = _hermite_mid(x[j - 1], xdot[j - 1], x[j], xdot[j], h)
        pm = _hermite_mid(p[j - 1], pdot[j - 1], p[j], pdot[j], h)
        um_guess = _hermite_mid(u[j - 1], udot[j - 1], u[j], udot[j], h)
        mid_base = basepoint(xm, pm, um_guess)
        next_base = basepoint(x[j - 1], p[j - 1], u[j - 1])

        K1, Uj, muj = rhs(node_base, S)
        Xz[j], Pz[j] = S[0], S[1]
        Uz[j] = Uj
        if with_dir:
            xi[j], pi[j] = S[2], S[3]
            mu[j] = muj
        S1 = [s + 0.5 * hs * k for s, k in zip(S, K1)]
        K2, _, _ = rhs(mid_base, S1)
        S2 = [s + 0.5 * hs * k for s, k in zip(S, K2)]
        K3, _, _ = rhs(mid_base, S2)
        S3 = [s + hs * k for s, k in zip(S, K3)]
        K4, _, _ = rhs(next_base, S3)
        S = [s + (hs / 6.0) * (a + 2 * b + 2 * c + d)
             for s, a, b, c, d in zip(S, K1, K2, K3, K4)]
        if not all(np.all(np.isfinite(s)) for s in S):
            raise NonFiniteTrajectoryError("sensitivity integration turned non-finite")
        node_base = next_base

    K0, U0, mu0 = rhs(node_base, S)
    Xz[0], Pz[0] = S[0], S[1]
    Uz[0] = U0
    if with_dir:
        xi[0], pi[0] = S[2], S[3]
        mu[0] = mu0
        return Xz, Pz, Uz, xi, pi, mu
    return Xz, Pz, Uz


def w_forward_sweep(bundles, n, m, traj_arrays, T, steps, w0, tol=1e-12, max_iter=50):
    """Forward sweep of wdot = f_x(x(t), u(t)) w from w(0) = w0.

    Stage data at cell midpoints comes from Hermite interpolation of the
    stored trajectory (state and control alike; no re-solve is needed for a
    linear homogeneous system driven by stored coefficients).
    """
    x, p, u, xdot, pdot, udot = traj_arrays
    N = int(steps)
    dt = T / N
    w = np.empty((N + 1, n))
    w[0] = np.asarray(w0, dtype=float)

    def fx_at(xs, us):
        _, f_jac = bundles.f_low(xs)
        return _assemble_fx(f_jac, us)

    for j in range(N):
        h = dt
        xm = _hermite_mid(x[j], xdot[j], x[j + 1], xdot[j + 1], h)
        um = _hermite_mid(u[j], udot[j], u[j + 1], udot[j + 1], h)
        A0 = fx_at(x[j], u[j])
        Am = fx_at(xm, um)
        A1 = fx_at(x[j + 1], u[j + 1])
        k1 = A0 @ w[j]
        k2 = Am @ (w[j] + 0.5 * h * k1)
        k3 = Am @ (w[j] + 0.5 * h * k2)
        k4 = A1 @ (w[j] + h * k3)
        w[j + 1] = w[j] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(w)):
        raise NonFiniteTrajectoryError("auxiliary linear sweep turned non-finite")
    return w


def replay_sweep(bundles, n, m, u_nodes, udot_nodes, x0, T, steps):
    """Forward integration of xdot = f(x, u(t)) with the frozen control u(t).

    The control between nodes is the cubic Hermite interpolant of the stored
    samples.  Returns the trajectory nodes and running-cost samples L(x, u)
    at the nodes (for quadrature by the caller).
    """
    N = int(steps)
    dt = T / N
    xt = np.empty((N + 1, n))
    lvals = np.empty(N + 1)
    xt[0] = np.asarray(x0, dtype=float)

    def fval(xs, us):
        f_val, _ = bundles.f_low(xs)
        return _assemble_fval(f_val, us)

    lvals[0] = bundles.L_low(xt[0], u_nodes[0]).L
    for j in range(N):
        h = dt
        um = _hermite_mid(u_nodes[j], udot_nodes[j], u_nodes[j + 1], udot_nodes[j + 1], h)
        k1 = fval(xt[j], u_nodes[j])
        k2 = fval(xt[j] + 0.5 * h * k1, um)
        k3 = fval(xt[j] + 0.5 * h * k2, um)
        k4 = fval(xt[j] + h * k3, u_nodes[j + 1])
        xt[j + 1] = xt[j] + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(xt[j + 1])):
            raise NonFiniteTrajectoryError("replay trajectory blew up")
        lvals[j + 1] = bundles.L_low(xt[j + 1], u_nodes[j + 1]).L
    return xt, lvals
