"""Problem data for control-affine Bolza problems.

A problem is the tuple (f, L, psi, T): drift and control vector fields
f_0..f_m with derivatives to third order, a running cost L(x, u) uniformly
convex in u with derivatives to third order, a terminal cost psi(z) with
derivatives to fourth order, and a horizon T.  Providers are either
expression-backed (exact symbolic derivatives, compiled to tapes) or
callback-backed with a finite-difference fill-in for missing derivative
levels.

Standing-assumption checks (uniform convexity of L in u, sublinear growth of
the fields, derivative consistency) are sampled on a working box and reported;
they are advisory, since the hypotheses are global and no finite sample can
certify them.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, NamedTuple, Sequence

import numpy as np

from conjpt import expr as ex
from conjpt.tape import Tape, compile_tape

__all__ = [
    "VectorField3",
    "RunningCost3",
    "TerminalCost4",
    "ProblemSpec",
    "PerturbationParams",
    "KernelTapes",
    "FLow",
    "FHigh",
    "LLow",
    "LHigh",
    "windowed_cost",
    "perturbed_cost",
    "bump_bundle",
    "validate",
    "ValidationReport",
    "cov_problem",
    "control_affine_problem",
]

_EPS = float(np.finfo(float).eps)
_FD_SCALE = _EPS ** (1.0 / 3.0)


def _fd_step(x: float) -> float:
    return _FD_SCALE * max(1.0, abs(x))


def fd_derivative(fn: Callable[[np.ndarray], np.ndarray], x: np.ndarray) -> np.ndarray:
    """4th-order central difference of ``fn`` along every coordinate.

    Returns an array of shape fn(x).shape + (len(x),).
    """
    x = np.asarray(x, dtype=float)
    base = np.asarray(fn(x), dtype=float)
    out = np.empty(base.shape + (x.size,))
    for j in range(x.size):
        h = _fd_step(x[j])
        e = np.zeros_like(x)
        e[j] = 1.0
        fp2 = np.asarray(fn(x + 2 * h * e), dtype=float)
        fp1 = np.asarray(fn(x + h * e), dtype=float)
        fm1 = np.asarray(fn(x - h * e), dtype=float)
        fm2 = np.asarray(fn(x - 2 * h * e), dtype=float)
        out[..., j] = (-fp2 + 8.0 * fp1 - 8.0 * fm1 + fm2) / (12.0 * h)
    return out


def _var_names(prefix: str, count: int) -> list[str]:
    return [f"{prefix}{i + 1}" for i in range(count)]


def _tensor_exprs(components: Sequence[ex.ExprNode], n_vars: int, order: int):
    """Nested derivative trees: result[order] is a flat list in row-major
    multi-index order over (component, i1, ..., i_order)."""
    levels = [list(components)]
    for _ in range(order):
        levels.append([ex.differentiate(node, j)
                       for node in levels[-1] for j in range(n_vars)])
    return levels


# ---------------------------------------------------------------------------
# vector fields

@dataclass(frozen=True)
class VectorField3:
    """A C^3 vector field on R^n with derivative evaluators.

    ``jac[a, b] = d f_a / d x_b``; higher orders append trailing derivative
    axes in the same convention.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    jac: Callable[[np.ndarray], np.ndarray]
    hess: Callable[[np.ndarray], np.ndarray]
    third: Callable[[np.ndarray], np.ndarray]
    exprs: tuple[ex.ExprNode, ...] | None = None

    @staticmethod
    def from_exprs(components: Sequence[str | ex.ExprNode], dim: int) -> "VectorField3":
        names = _var_names("x", dim)
        comps = tuple(
            c if isinstance(c, ex.ExprNode) else ex.parse(c, names) for c in components
        )
        if len(comps) != dim:
            raise ValueError(f"expected {dim} components, got {len(comps)}")
        levels = _tensor_exprs(comps, dim, 3)
        flat = [node for level in levels for node in level]
        tape = compile_tape(flat, dim)
        sizes = [dim, dim * dim, dim**3, dim**4]
        offs = np.cumsum([0] + sizes)

        def make(k: int, shape):
            lo, hi = offs[k], offs[k + 1]

            def call(x, _lo=lo, _hi=hi, _shape=shape):
                vals = tape.eval_point(np.asarray(x, dtype=float))
                return vals[_lo:_hi].reshape(_shape)

            return call

        return VectorField3(
            dim=dim,
            value=make(0, (dim,)),
            jac=make(1, (dim, dim)),
            hess=make(2, (dim, dim, dim)),
            third=make(3, (dim, dim, dim, dim)),
            exprs=comps,
        )

    @staticmethod
    def from_callbacks(
        dim: int,
        value: Callable[[np.ndarray], np.ndarray],
        jac: Callable | None = None,
        hess: Callable | None = None,
        third: Callable | None = None,
    ) -> "VectorField3":
        """Missing derivative levels are filled by differencing the best
        available lower level (4th-order central stencils)."""
        jac_ = jac if jac is not None else (lambda x: fd_derivative(value, x))
        hess_ = hess if hess is not None else (lambda x: fd_derivative(jac_, x))
        third_ = third if third is not None else (lambda x: fd_derivative(hess_, x))
        return VectorField3(dim=dim, value=value, jac=jac_, hess=hess_, third=third_)

    @staticmethod
    def constant(vec: Sequence[float]) -> "VectorField3":
        v = np.asarray(vec, dtype=float)
        n = v.size
        return VectorField3.from_exprs([ex.constant(c) for c in v], n)


# ---------------------------------------------------------------------------
# running cost

@dataclass(frozen=True)
class RunningCost3:
    """Running cost L(x, u) with partial derivatives to third order.

    ``convexity_modulus`` is the declared delta > 0 with
    L_uu - delta * I positive semidefinite; it is checked by :func:`validate`,
    not enforced here.
    """

    n: int
    m: int
    value: Callable[[np.ndarray, np.ndarray], float]
    grad_x: Callable
    grad_u: Callable
    hess_xx: Callable
    hess_xu: Callable  # (n, m)
    hess_uu: Callable
    third_xxx: Callable
    third_xxu: Callable  # (n, n, m)
    third_xuu: Callable  # (n, m, m)
    third_uuu: Callable
    convexity_modulus: float = 1e-8
    expr: ex.ExprNode | None = None  # over (x1..xn, u1..um)

    @staticmethod
    def from_expr(text: str | ex.ExprNode, n: int, m: int,
                  convexity_modulus: float = 1e-8) -> "RunningCost3":
        names = _var_names("x", n) + _var_names("u", m)
        node = text if isinstance(text, ex.ExprNode) else ex.parse(text, names)
        nv = n + m
        levels = _tensor_exprs([node], nv, 3)
        flat = [e for level in levels for e in level]
        tape = compile_tape(flat, nv)
        sizes = [1, nv, nv * nv, nv**3]
        offs = np.cumsum([0] + sizes)

        def bundle(x, u):
            z = np.concatenate([np.asarray(x, dtype=float), np.asarray(u, dtype=float)])
            vals = tape.eval_point(z)
            g = vals[offs[1]:offs[2]]
            h = vals[offs[2]:offs[3]].reshape(nv, nv)
            t = vals[offs[3]:offs[4]].reshape(nv, nv, nv)
            return vals[0], g, h, t

        def value(x, u):
            return bundle(x, u)[0]

        def grad_x(x, u):
            return bundle(x, u)[1][:n]

        def grad_u(x, u):
            return bundle(x, u)[1][n:]

        def hess_xx(x, u):
            return bundle(x, u)[2][:n, :n]

        def hess_xu(x, u):
            return bundle(x, u)[2][:n, n:]

        def hess_uu(x, u):
            return bundle(x, u)[2][n:, n:]

        def third_xxx(x, u):
            return bundle(x, u)[3][:n, :n, :n]

        def third_xxu(x, u):
            return bundle(x, u)[3][:n, :n, n:]

        def third_xuu(x, u):
            return bundle(x, u)[3][:n, n:, n:]

        def third_uuu(x, u):
            return bundle(x, u)[3][n:, n:, n:]

        return RunningCost3(
            n=n, m=m, value=value, grad_x=grad_x, grad_u=grad_u,
            hess_xx=hess_xx, hess_xu=hess_xu, hess_uu=hess_uu,
            third_xxx=third_xxx, third_xxu=third_xxu, third_xuu=third_xuu,
            third_uuu=third_uuu, convexity_modulus=convexity_modulus, expr=node,
        )

    @staticmethod
    def from_callbacks(n: int, m: int, value: Callable,
                       convexity_modulus: float = 1e-8, **partials) -> "RunningCost3":
        """Build from a value callback plus any subset of analytic partials;
        the rest come from nested 4th-order finite differences."""

        def joint(z):
            return np.atleast_1d(value(z[:n], z[n:]))

        def grad_joint(z):
            return fd_derivative(joint, z)[0]

        def hess_joint(z):
            return fd_derivative(grad_joint, z)

        def third_joint(z):
            return fd_derivative(hess_joint, z)

        def sl(fn, *blocks):
            def call(x, u):
                z = np.concatenate([np.asarray(x, float), np.asarray(u, float)])
                full = fn(z)
                idx = tuple(slice(0, n) if b == "x" else slice(n, n + m) for b in blocks)
                return full[idx]
            return call

        defaults = {
            "grad_x": sl(grad_joint, "x"),
            "grad_u": sl(grad_joint, "u"),
            "hess_xx": sl(hess_joint, "x", "x"),
            "hess_xu": sl(hess_joint, "x", "u"),
            "hess_uu": sl(hess_joint, "u", "u"),
            "third_xxx": sl(third_joint, "x", "x", "x"),
            "third_xxu": sl(third_joint, "x", "x", "u"),
            "third_xuu": sl(third_joint, "x", "u", "u"),
            "third_uuu": sl(third_joint, "u", "u", "u"),
        }
        defaults.update(partials)
        return RunningCost3(n=n, m=m, value=value,
                            convexity_modulus=convexity_modulus, **defaults)


# ---------------------------------------------------------------------------
# terminal cost

@dataclass(frozen=True)
class TerminalCost4:
    """Terminal cost psi on R^n with derivatives to fourth order.

    ``batch`` (optional) evaluates derivative bundles on a batch of points:
    batch(Z, order) -> [values (B,), grads (B,n), ... up to the given order].
    """

    n: int
    value: Callable[[np.ndarray], float]
    grad: Callable
    hess: Callable
    third: Callable
    fourth: Callable
    batch: Callable | None = None
    expr: ex.ExprNode | None = None

    def bundle(self, z: np.ndarray, order: int):
        parts = [self.value(z), self.grad(z)]
        if order >= 2:
            parts.append(self.hess(z))
        if order >= 3:
            parts.append(self.third(z))
        if order >= 4:
            parts.append(self.fourth(z))
        return parts

    def bundle_batch(self, Z: np.ndarray, order: int):
        if self.batch is not None:
            return self.batch(Z, order)
        # scalar fallback
        Z = np.asarray(Z, dtype=float)
        outs = [np.empty(Z.shape[0])] + [
            np.empty((Z.shape[0],) + (self.n,) * k) for k in range(1, order + 1)
        ]
        for i, z in enumerate(Z):
            for k, part in enumerate(self.bundle(z, order)):
                outs[k][i] = part
        return outs

    @staticmethod
    def from_expr(text: str | ex.ExprNode, n: int) -> "TerminalCost4":
        names = _var_names("z", n)
        node = text if isinstance(text, ex.ExprNode) else ex.parse(text, names)
        levels = _tensor_exprs([node], n, 4)
        flat = [e for level in levels for e in level]
        tape = compile_tape(flat, n)
        sizes = [1, n, n * n, n**3, n**4]
        offs = np.cumsum([0] + sizes)
        shapes = [(), (n,), (n, n), (n, n, n), (n, n, n, n)]

        def make(k):
            def call(z, _k=k):
                vals = tape.eval_point(np.asarray(z, dtype=float))
                return vals[offs[_k]:offs[_k + 1]].reshape(shapes[_k])
            return call

        def batch(Z, order):
            vals = tape.eval_batch(np.asarray(Z, dtype=float))
            B = vals.shape[0]
            return [
                vals[:, offs[k]:offs[k + 1]].reshape((B,) + shapes[k])
                for k in range(order + 1)
            ]

        return TerminalCost4(
            n=n, value=lambda z: float(make(0)(z)), grad=make(1), hess=make(2),
            third=make(3), fourth=make(4), batch=batch, expr=node,
        )

    @staticmethod
    def from_callbacks(n: int, value: Callable, grad: Callable | None = None,
                       hess: Callable | None = None, third: Callable | None = None,
                       fourth: Callable | None = None) -> "TerminalCost4":
        def val_vec(z):
            return np.atleast_1d(value(z))

        grad_ = grad if grad is not None else (lambda z: fd_derivative(val_vec, z)[0])
        hess_ = hess if hess is not None else (lambda z: fd_derivative(grad_, z))
        third_ = third if third is not None else (lambda z: fd_derivative(hess_, z))
        fourth_ = fourth if fourth is not None else (lambda z: fd_derivative(third_, z))
        return TerminalCost4(n=n, value=value, grad=grad_, hess=hess_,
                             third=third_, fourth=fourth_)


# ---------------------------------------------------------------------------
# smooth cutoff window and derived terminal costs

def _smoothstep_exprs():
    # S(t) = a / (a + b) with a = exp(-1/t), b = exp(-1/(1-t)); C-infinity on
    # (0, 1), flat at both endpoints.  Derivatives are generated symbolically.
    t = ex.variable(0)
    a = ex.exp(ex.div(ex.constant(-1.0), t))
    b = ex.exp(ex.div(ex.constant(-1.0), ex.sub(ex.constant(1.0), t)))
    s = ex.div(a, ex.add(a, b))
    nodes = [s]
    for _ in range(4):
        nodes.append(ex.differentiate(nodes[-1], 0))
    return nodes


_SMOOTHSTEP_TAPE: Tape | None = None


def _smoothstep_tape() -> Tape:
    global _SMOOTHSTEP_TAPE
    if _SMOOTHSTEP_TAPE is None:
        _SMOOTHSTEP_TAPE = compile_tape(_smoothstep_exprs(), 1)
    return _SMOOTHSTEP_TAPE


_T_CLIP = 1e-6  # exp(-1/t) underflows far above this; clipping is exact in doubles


def _bump_profile(s: float) -> np.ndarray:
    """Radial profile B(s) with B = 1 for s <= 1, B = 0 for s >= 4, smooth in
    between, together with its first four derivatives.  ``s`` is |y|^2."""
    if s <= 1.0 + _T_CLIP:
        return np.array([1.0, 0.0, 0.0, 0.0, 0.0])
    if s >= 4.0 - _T_CLIP:
        return np.zeros(5)
    t = (4.0 - s) / 3.0
    vals = np.asarray(_smoothstep_tape().eval_floats([t]))
    scale = np.array([(-1.0 / 3.0) ** k for k in range(5)])
    return vals * scale


def _bump_profile_batch(s: np.ndarray) -> np.ndarray:
    s = np.asarray(s, dtype=float)
    out = np.zeros(s.shape + (5,))
    out[s <= 1.0 + _T_CLIP, 0] = 1.0
    mid = (s > 1.0 + _T_CLIP) & (s < 4.0 - _T_CLIP)
    if np.any(mid):
        t = (4.0 - s[mid]) / 3.0
        vals = _smoothstep_tape().eval_batch(t[:, None])
        scale = np.array([(-1.0 / 3.0) ** k for k in range(5)])
        out[mid] = vals * scale
    return out


def bump_bundle(y: np.ndarray, order: int, radius: float = 1.0):
    """Smooth plateau window eta(y) = 1 for |y| <= radius, 0 for |y| >= 2*radius,
    with symmetric derivative tensors up to ``order`` (max 4).

    Built as B(|y|^2 / radius^2), so all derivatives are polynomial in y times
    profile derivatives and smooth across y = 0.
    """
    y = np.asarray(y, dtype=float)
    n = y.size
    r2 = radius * radius
    s = float(y @ y) / r2
    B = _bump_profile(s)
    g = 2.0 * y / r2  # ds/dy
    c = 2.0 / r2  # d2s/dy2 diagonal
    eye = np.eye(n)
    parts = [B[0]]
    if order >= 1:
        parts.append(B[1] * g)
    if order >= 2:
        parts.append(B[2] * np.outer(g, g) + B[1] * c * eye)
    if order >= 3:
        ggg = np.einsum("a,b,c->abc", g, g, g)
        dsym = (
            np.einsum("ab,c->abc", eye, g)
            + np.einsum("ac,b->abc", eye, g)
            + np.einsum("bc,a->abc", eye, g)
        )
        parts.append(B[3] * ggg + B[2] * c * dsym)
    if order >= 4:
        g4 = np.einsum("a,b,c,d->abcd", g, g, g, g)
        dgg = (
            np.einsum("ab,c,d->abcd", eye, g, g)
            + np.einsum("ac,b,d->abcd", eye, g, g)
            + np.einsum("ad,b,c->abcd", eye, g, g)
            + np.einsum("bc,a,d->abcd", eye, g, g)
            + np.einsum("bd,a,c->abcd", eye, g, g)
            + np.einsum("cd,a,b->abcd", eye, g, g)
        )
        dd = (
            np.einsum("ab,cd->abcd", eye, eye)
            + np.einsum("ac,bd->abcd", eye, eye)
            + np.einsum("ad,bc->abcd", eye, eye)
        )
        parts.append(B[4] * g4 + B[3] * c * dgg + B[2] * c * c * dd)
    return parts


def bump_bundle_batch(Y: np.ndarray, order: int, radius: float = 1.0):
    Y = np.asarray(Y, dtype=float)
    Bn, n = Y.shape
    r2 = radius * radius
    s = np.einsum("ba,ba->b", Y, Y) / r2
    prof = _bump_profile_batch(s)  # (B, 5)
    g = 2.0 * Y / r2
    c = 2.0 / r2
    eye = np.eye(n)
    parts = [prof[:, 0].copy()]
    if order >= 1:
        parts.append(prof[:, 1, None] * g)
    if order >= 2:
        gg = np.einsum("ba,bc->bac", g, g)
        parts.append(prof[:, 2, None, None] * gg + prof[:, 1, None, None] * c * eye)
    if order >= 3:
        ggg = np.einsum("bx,by,bz->bxyz", g, g, g)
        d1 = np.einsum("xy,bz->bxyz", eye, g)
        d2 = np.einsum("xz,by->bxyz", eye, g)
        d3 = np.einsum("yz,bx->bxyz", eye, g)
        parts.append(prof[:, 3, None, None, None] * ggg + prof[:, 2, None, None, None] * c * (d1 + d2 + d3))
    return parts


def _product_bundle(a_parts, b_parts, order: int):
    """Leibniz rule for tensor derivative bundles of a product a*b.

    Each bundle is [value, D1, D2, ...] of symmetric arrays; the result is the
    bundle of the pointwise product up to ``order``.
    """
    n = a_parts[1].shape[0] if order >= 1 else 0
    out = [a_parts[0] * b_parts[0]]
    for k in range(1, order + 1):
        total = np.zeros((n,) * k)
        for r in range(0, k + 1):
            # choose which r index positions differentiate the first factor
            for subset in itertools.combinations(range(k), r):
                rest = [i for i in range(k) if i not in subset]
                a_t = a_parts[r]
                b_t = b_parts[k - r]
                # build by outer product then transpose axes into position
                prod = np.multiply.outer(a_t, b_t)
                # axes of prod: subset positions then rest positions
                perm = list(subset) + rest
                inv = np.argsort(perm)
                total = total + np.transpose(prod, axes=inv)
        out.append(total)
    return out


@dataclass(frozen=True)
class PerturbationParams:
    """Localized quadratic + cubic perturbation data.

    For each anchor zbar^l the perturbation adds
    eta(z - zbar^l) * [sum_ij quad[l,i,j] (z_i - zbar_i)(z_j - zbar_j)
                       + sum_k cubic[l,k] (z_k - zbar_k)^3],
    with eta the smooth plateau window (1 inside radius 1, 0 outside 2).
    """

    anchors: np.ndarray  # (N, n)
    quad: np.ndarray  # (N, n, n)
    cubic: np.ndarray  # (N, n)

    def __post_init__(self):
        a = np.atleast_2d(np.asarray(self.anchors, dtype=float))
        object.__setattr__(self, "anchors", a)
        q = np.asarray(self.quad, dtype=float).reshape(a.shape[0], a.shape[1], a.shape[1])
        object.__setattr__(self, "quad", q)
        c = np.asarray(self.cubic, dtype=float).reshape(a.shape)
        object.__setattr__(self, "cubic", c)
        if not (np.all(np.isfinite(a)) and np.all(np.isfinite(q)) and np.all(np.isfinite(c))):
            raise ValueError("perturbation parameters must be finite")

    @staticmethod
    def zeros(anchors) -> "PerturbationParams":
        a = np.atleast_2d(np.asarray(anchors, dtype=float))
        N, n = a.shape
        return PerturbationParams(a, np.zeros((N, n, n)), np.zeros((N, n)))


def _poly_bundle(y: np.ndarray, quad: np.ndarray, cubic: np.ndarray, order: int):
    """Derivative bundle of P(y) = y.quad.y + sum_k cubic_k y_k^3."""
    n = y.size
    qs = quad + quad.T
    val = float(y @ quad @ y + cubic @ y**3)
    parts = [np.asarray(val)]
    if order >= 1:
        parts.append(qs @ y + 3.0 * cubic * y**2)
    if order >= 2:
        parts.append(qs + 6.0 * np.diag(cubic * y))
    if order >= 3:
        t3 = np.zeros((n, n, n))
        idx = np.arange(n)
        t3[idx, idx, idx] = 6.0 * cubic
        parts.append(t3)
    if order >= 4:
        parts.append(np.zeros((n,) * 4))
    return parts


def windowed_cost(inner: TerminalCost4, radius: float) -> TerminalCost4:
    """psi(z) * eta_R(z): equal to ``inner`` on |z| <= radius, compactly
    supported in |z| <= 2*radius, C-infinity in between.  Derivatives to
    fourth order are assembled analytically by the product rule."""
    n = inner.n

    def bundle(z, order):
        z = np.asarray(z, dtype=float)
        return _product_bundle(inner.bundle(z, order), bump_bundle(z, order, radius), order)

    def batch(Z, order):
        Z = np.asarray(Z, dtype=float)
        inner_parts = inner.bundle_batch(Z, order)
        win_parts = _bump_parts_batch_full(Z, order, radius)
        return _product_bundle_batch(inner_parts, win_parts, order)

    return TerminalCost4(
        n=n,
        value=lambda z: float(bundle(z, 0)[0]),
        grad=lambda z: bundle(z, 1)[1],
        hess=lambda z: bundle(z, 2)[2],
        third=lambda z: bundle(z, 3)[3],
        fourth=lambda z: bundle(z, 4)[4],
        batch=batch,
    )


def _bump_parts_batch_full(Z, order, radius):
    parts = bump_bundle_batch(Z, min(order, 3), radius)
    if order >= 4:
        # order-4 batch path is only needed by scalar-order callers; fall back
        out4 = np.empty((Z.shape[0],) + (Z.shape[1],) * 4)
        for i, z in enumerate(Z):
            out4[i] = bump_bundle(z, 4, radius)[4]
        parts.append(out4)
    return parts


def _product_bundle_batch(a_parts, b_parts, order: int):
    out = [a_parts[0] * b_parts[0]]
    k_axes = "xyzw"
    for k in range(1, order + 1):
        total = None
        for r in range(0, k + 1):
            for subset in itertools.combinations(range(k), r):
                rest = [i for i in range(k) if i not in subset]
                a_spec = "b" + "".join(k_axes[i] for i in subset)
                b_spec = "b" + "".join(k_axes[i] for i in rest)
                o_spec = "b" + k_axes[:k]
                term = np.einsum(f"{a_spec},{b_spec}->{o_spec}", a_parts[r], b_parts[k - r])
                total = term if total is None else total + term
        out.append(total)
    return out


def perturbed_cost(base: TerminalCost4, params: PerturbationParams) -> TerminalCost4:
    """The perturbed terminal cost psi + sum_l eta(z - zbar^l) * P_l(z)."""
    n = base.n
    if params.anchors.shape[1] != n:
        raise ValueError("anchor dimension mismatch")

    def extra_bundle(z, order):
        z = np.asarray(z, dtype=float)
        total = None
        for l in range(params.anchors.shape[0]):
            y = z - params.anchors[l]
            win = bump_bundle(y, order, 1.0)
            poly = _poly_bundle(y, params.quad[l], params.cubic[l], order)
            parts = _product_bundle(poly, win, order)
            total = parts if total is None else [t + p for t, p in zip(total, parts)]
        return total

    def bundle(z, order):
        bb = base.bundle(z, order)
        eb = extra_bundle(z, order)
        return [b + e for b, e in zip(bb, eb)]

    def batch(Z, order):
        Z = np.asarray(Z, dtype=float)
        if order >= 4:
            # the vectorized path stops at third order; assemble row by row
            outs = [np.empty(Z.shape[0])] + [
                np.empty((Z.shape[0],) + (n,) * k) for k in range(1, order + 1)
            ]
            for i, z in enumerate(Z):
                for k, part in enumerate(bundle(z, order)):
                    outs[k][i] = part
            return outs
        parts = base.bundle_batch(Z, order)
        parts = [p.copy() for p in parts]
        for l in range(params.anchors.shape[0]):
            Y = Z - params.anchors[l]
            win = bump_bundle_batch(Y, order, 1.0)
            qs = params.quad[l] + params.quad[l].T
            cub = params.cubic[l]
            pb = [np.einsum("ba,ac,bc->b", Y, params.quad[l], Y) + (Y**3) @ cub]
            if order >= 1:
                pb.append(Y @ qs.T + 3.0 * cub * Y**2)
            if order >= 2:
                d2 = np.broadcast_to(qs, (Z.shape[0], n, n)).copy()
                idx = np.arange(n)
                d2[:, idx, idx] += 6.0 * cub * Y
                pb.append(d2)
            if order >= 3:
                d3 = np.zeros((Z.shape[0], n, n, n))
                idx = np.arange(n)
                d3[:, idx, idx, idx] = 6.0 * cub
                pb.append(d3)
            extra = _product_bundle_batch(pb, win, order)
            parts = [p + e for p, e in zip(parts, extra)]
        return parts

    return TerminalCost4(
        n=n,
        value=lambda z: float(bundle(z, 0)[0]),
        grad=lambda z: bundle(z, 1)[1],
        hess=lambda z: bundle(z, 2)[2],
        third=lambda z: bundle(z, 3)[3],
        fourth=lambda z: bundle(z, 4)[4],
        batch=batch,
    )


# ---------------------------------------------------------------------------
# assembled problem

@dataclass(frozen=True)
class KernelTapes:
    """Instruction tapes in the layout the sweep kernels expect.

    f tape inputs: x.  Outputs, in order: all field values (m+1 blocks of n),
    all field Jacobians (blocks of n^2), and for the high tape additionally
    all field Hessians (n^3) and third derivatives (n^4).
    L tape inputs: (x, u).  Low outputs: L, L_x, L_u, L_uu, L_xu; high appends
    L_xx, L_xxx, L_xxu, L_xuu, L_uuu.
    """

    n: int
    m: int
    f_low: Tape
    f_high: Tape
    L_low: Tape
    L_high: Tape


class FLow(NamedTuple):
    f_val: np.ndarray  # (m+1, n)
    f_jac: np.ndarray  # (m+1, n, n)


class FHigh(NamedTuple):
    f_val: np.ndarray
    f_jac: np.ndarray
    f_hess: np.ndarray  # (m+1, n, n, n)
    f_third: np.ndarray  # (m+1, n, n, n, n)


class LLow(NamedTuple):
    L: float
    L_x: np.ndarray
    L_u: np.ndarray
    L_uu: np.ndarray
    L_xu: np.ndarray  # (n, m)


class LHigh(NamedTuple):
    L: float
    L_x: np.ndarray
    L_u: np.ndarray
    L_uu: np.ndarray
    L_xu: np.ndarray
    L_xx: np.ndarray
    L_xxx: np.ndarray
    L_xxu: np.ndarray  # (n, n, m)
    L_xuu: np.ndarray  # (n, m, m)
    L_uuu: np.ndarray


class _TapeBundles:
    """Bundle evaluator backed by the combined kernel tapes."""

    def __init__(self, tapes: KernelTapes):
        self.t = tapes

    def f_low(self, x) -> FLow:
        n, m = self.t.n, self.t.m
        nf = m + 1
        vals = self.t.f_low.eval_point(x)
        return FLow(vals[: nf * n].reshape(nf, n), vals[nf * n:].reshape(nf, n, n))

    def f_high(self, x) -> FHigh:
        n, m = self.t.n, self.t.m
        nf = m + 1
        vals = self.t.f_high.eval_point(x)
        o1 = nf * n
        o2 = o1 + nf * n * n
        o3 = o2 + nf * n**3
        return FHigh(
            vals[:o1].reshape(nf, n),
            vals[o1:o2].reshape(nf, n, n),
            vals[o2:o3].reshape(nf, n, n, n),
            vals[o3:].reshape(nf, n, n, n, n),
        )

    def L_low(self, x, u) -> LLow:
        n, m = self.t.n, self.t.m
        lv = self.t.L_low.eval_point(np.concatenate([x, u]))
        p = 1 + n + m
        return LLow(
            float(lv[0]), lv[1:1 + n], lv[1 + n:p],
            lv[p:p + m * m].reshape(m, m),
            lv[p + m * m:].reshape(n, m),
        )

    def L_high(self, x, u) -> LHigh:
        n, m = self.t.n, self.t.m
        lv = self.t.L_high.eval_point(np.concatenate([x, u]))
        p = 0
        L = float(lv[0]); p = 1
        L_x = lv[p:p + n]; p += n
        L_u = lv[p:p + m]; p += m
        L_uu = lv[p:p + m * m].reshape(m, m); p += m * m
        L_xu = lv[p:p + n * m].reshape(n, m); p += n * m
        L_xx = lv[p:p + n * n].reshape(n, n); p += n * n
        L_xxx = lv[p:p + n**3].reshape(n, n, n); p += n**3
        L_xxu = lv[p:p + n * n * m].reshape(n, n, m); p += n * n * m
        L_xuu = lv[p:p + n * m * m].reshape(n, m, m); p += n * m * m
        L_uuu = lv[p:].reshape(m, m, m)
        return LHigh(L, L_x, L_u, L_uu, L_xu, L_xx, L_xxx, L_xxu, L_xuu, L_uuu)


class _DirectBundles:
    """Bundle evaluator calling the provider callables (works for callbacks)."""

    def __init__(self, spec: "ProblemSpec"):
        self.spec = spec

    def f_low(self, x) -> FLow:
        s = self.spec
        return FLow(
            np.stack([f.value(x) for f in s.fields]),
            np.stack([f.jac(x) for f in s.fields]),
        )

    def f_high(self, x) -> FHigh:
        s = self.spec
        return FHigh(
            np.stack([f.value(x) for f in s.fields]),
            np.stack([f.jac(x) for f in s.fields]),
            np.stack([f.hess(x) for f in s.fields]),
            np.stack([f.third(x) for f in s.fields]),
        )

    def L_low(self, x, u) -> LLow:
        s = self.spec
        return LLow(
            float(s.cost.value(x, u)),
            np.asarray(s.cost.grad_x(x, u), dtype=float),
            np.asarray(s.cost.grad_u(x, u), dtype=float),
            np.asarray(s.cost.hess_uu(x, u), dtype=float),
            np.asarray(s.cost.hess_xu(x, u), dtype=float),
        )

    def L_high(self, x, u) -> LHigh:
        s = self.spec
        low = self.L_low(x, u)
        return LHigh(
            low.L, low.L_x, low.L_u, low.L_uu, low.L_xu,
            np.asarray(s.cost.hess_xx(x, u), dtype=float),
            np.asarray(s.cost.third_xxx(x, u), dtype=float),
            np.asarray(s.cost.third_xxu(x, u), dtype=float),
            np.asarray(s.cost.third_xuu(x, u), dtype=float),
            np.asarray(s.cost.third_uuu(x, u), dtype=float),
        )


@dataclass(frozen=True)
class ProblemSpec:
    """The full problem tuple (f, L, psi, T) plus the working-box radius.

    Immutable after construction; every solver treats it as read-only, so a
    single instance can be shared across parallel scans.
    """

    horizon: float
    n: int
    m: int
    fields: tuple[VectorField3, ...]  # f_0, f_1, ..., f_m
    cost: RunningCost3
    terminal: TerminalCost4
    box_radius: float = 5.0
    label: str = ""

    def __post_init__(self):
        if self.horizon <= 0:
            raise ValueError("horizon T must be positive")
        if self.n < 1 or self.m < 1:
            raise ValueError("state and control dimensions must be >= 1")
        if len(self.fields) != self.m + 1:
            raise ValueError(f"expected {self.m + 1} vector fields, got {len(self.fields)}")
        for f in self.fields:
            if f.dim != self.n:
                raise ValueError("vector field dimension mismatch")
        if self.cost.n != self.n or self.cost.m != self.m:
            raise ValueError("running cost dimension mismatch")
        if self.terminal.n != self.n:
            raise ValueError("terminal cost dimension mismatch")

    # -- assembled control-affine dynamics ---------------------------------

    def f(self, x, u) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if x.shape != (self.n,) or u.shape != (self.m,):
            raise ValueError("dimension mismatch in f(x, u)")
        out = self.fields[0].value(x).astype(float, copy=True)
        for i in range(self.m):
            out += self.fields[i + 1].value(x) * u[i]
        return out

    def f_x(self, x, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = self.fields[0].jac(x).astype(float, copy=True)
        for i in range(self.m):
            out += self.fields[i + 1].jac(x) * u[i]
        return out

    def f_u(self, x, u=None) -> np.ndarray:
        return np.stack([self.fields[i + 1].value(x) for i in range(self.m)], axis=1)

    def f_xx(self, x, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = self.fields[0].hess(x).astype(float, copy=True)
        for i in range(self.m):
            out += self.fields[i + 1].hess(x) * u[i]
        return out

    def f_xu(self, x, u=None) -> np.ndarray:
        # d^2 f_a / dx_b du_i = (Df_i)_{a b}
        return np.stack([self.fields[i + 1].jac(x) for i in range(self.m)], axis=2)

    def f_uu(self, x, u=None) -> np.ndarray:
        # exactly zero for control-affine dynamics
        return np.zeros((self.n, self.m, self.m))

    def f_xxx(self, x, u) -> np.ndarray:
        u = np.asarray(u, dtype=float)
        out = self.fields[0].third(x).astype(float, copy=True)
        for i in range(self.m):
            out += self.fields[i + 1].third(x) * u[i]
        return out

    def f_xxu(self, x, u=None) -> np.ndarray:
        return np.stack([self.fields[i + 1].hess(x) for i in range(self.m)], axis=3)

    # -- kernel plumbing ----------------------------------------------------

    @cached_property
    def kernel_tapes(self) -> KernelTapes | None:
        if any(f.exprs is None for f in self.fields) or self.cost.expr is None:
            return None
        n, m = self.n, self.m
        comps = [c for f in self.fields for c in f.exprs]
        levels = [comps]
        for _ in range(3):
            prev = levels[-1]
            levels.append([ex.differentiate(node, j) for node in prev for j in range(n)])
        f_low_exprs = levels[0] + levels[1]
        f_high_exprs = levels[0] + levels[1] + levels[2] + levels[3]
        f_low = compile_tape(f_low_exprs, n)
        f_high = compile_tape(f_high_exprs, n)

        nv = n + m
        L0 = self.cost.expr
        L1 = [ex.differentiate(L0, j) for j in range(nv)]
        L2 = [[ex.differentiate(L1[a], b) for b in range(nv)] for a in range(nv)]
        L3 = {}
        for a in range(nv):
            for b in range(nv):
                for c in range(nv):
                    L3[(a, b, c)] = ex.differentiate(L2[a][b], c)
        lx = list(range(n))
        lu = list(range(n, nv))
        L_low_exprs = [L0] + [L1[j] for j in lx] + [L1[j] for j in lu] + [
            L2[a][b] for a in lu for b in lu
        ] + [L2[a][b] for a in lx for b in lu]
        L_high_exprs = list(L_low_exprs)
        L_high_exprs += [L2[a][b] for a in lx for b in lx]
        L_high_exprs += [L3[(a, b, c)] for a in lx for b in lx for c in lx]
        L_high_exprs += [L3[(a, b, c)] for a in lx for b in lx for c in lu]
        L_high_exprs += [L3[(a, b, c)] for a in lx for b in lu for c in lu]
        L_high_exprs += [L3[(a, b, c)] for a in lu for b in lu for c in lu]
        L_low = compile_tape(L_low_exprs, nv)
        L_high = compile_tape(L_high_exprs, nv)
        return KernelTapes(n=n, m=m, f_low=f_low, f_high=f_high, L_low=L_low, L_high=L_high)

    @cached_property
    def bundles(self):
        tapes = self.kernel_tapes
        if tapes is not None:
            return _TapeBundles(tapes)
        return _DirectBundles(self)

    def terminal_bundle(self, z, order: int):
        return self.terminal.bundle(np.asarray(z, dtype=float), order)


# ---------------------------------------------------------------------------
# constructors

def cov_problem(L, psi, T: float, n: int, box_radius: float = 5.0,
                label: str = "", convexity_modulus: float = 1.0) -> ProblemSpec:
    """Calculus-of-variations special case: xdot = u, L = L(u), m = n.

    ``L`` is an expression over u1..un (or a RunningCost3); ``psi`` is an
    expression over z1..zn or a TerminalCost4.
    """
    if isinstance(L, RunningCost3):
        cost = L
    else:
        cost = RunningCost3.from_expr(L, n, n, convexity_modulus=convexity_modulus)
    if not isinstance(psi, TerminalCost4):
        psi = TerminalCost4.from_expr(psi, n)
    fields = [VectorField3.constant(np.zeros(n))]
    for i in range(n):
        e = np.zeros(n)
        e[i] = 1.0
        fields.append(VectorField3.constant(e))
    return ProblemSpec(horizon=T, n=n, m=n, fields=tuple(fields), cost=cost,
                       terminal=psi, box_radius=box_radius, label=label)


def control_affine_problem(f0, f_list, L, psi, T: float, n: int, m: int,
                           box_radius: float = 5.0, label: str = "",
                           convexity_modulus: float = 1.0) -> ProblemSpec:
    """General control-affine problem from expressions (or provider objects)."""
    fields = [f0 if isinstance(f0, VectorField3) else VectorField3.from_exprs(f0, n)]
    for fi in f_list:
        fields.append(fi if isinstance(fi, VectorField3) else VectorField3.from_exprs(fi, n))
    cost = L if isinstance(L, RunningCost3) else RunningCost3.from_expr(
        L, n, m, convexity_modulus=convexity_modulus)
    terminal = psi if isinstance(psi, TerminalCost4) else TerminalCost4.from_expr(psi, n)
    return ProblemSpec(horizon=T, n=n, m=m, fields=tuple(fields), cost=cost,
                       terminal=terminal, box_radius=box_radius, label=label)


# ---------------------------------------------------------------------------
# validation of the standing assumptions

@dataclass(frozen=True)
class CheckResult:
    name: str
    worst: float
    tol: float
    passed: bool
    note: str = ""


@dataclass(frozen=True)
class ValidationReport:
    checks: tuple[CheckResult, ...]
    samples: int
    growth_constant: float

    @property
    def ok(self) -> bool:
        return all(c.passed for c in self.checks)

    def __str__(self) -> str:
        lines = [f"validation over {self.samples} samples "
                 f"(reported growth constant c1 = {self.growth_constant:.6g})"]
        for c in self.checks:
            status = "pass" if c.passed else "FAIL"
            lines.append(f"  [{status}] {c.name}: worst {c.worst:.3e} (tol {c.tol:.1e}) {c.note}")
        return "\n".join(lines)


def _rel_err(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    scale = max(1.0, float(np.max(np.abs(a))), float(np.max(np.abs(b))))
    return float(np.max(np.abs(a - b))) / scale


def validate(spec: ProblemSpec, samples: int = 100, rng=None,
             fd_tol: float = 1e-6) -> ValidationReport:
    """Sampled check of the standing assumptions on the working box.

    Draws (x, u) pairs in the box of radius ``spec.box_radius``, checks
    uniform convexity of L in u against the declared modulus, reports the
    growth constant of the fields, verifies analytic derivatives against
    finite differences, and checks symmetry of second derivatives.  Failures
    are carried in the report, not raised.
    """
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(rng if rng is not None else 0)
    k = spec.box_radius
    # deterministic corner/center points plus random fill
    pts_x = [np.zeros(spec.n), np.full(spec.n, k), np.full(spec.n, -k)]
    pts_u = [np.zeros(spec.m), np.full(spec.m, k), np.full(spec.m, -k)]
    while len(pts_x) < samples:
        pts_x.append(rng.uniform(-k, k, spec.n))
        pts_u.append(rng.uniform(-k, k, spec.m))
    pts_x = pts_x[:samples]
    pts_u = pts_u[:samples]

    delta = spec.cost.convexity_modulus
    worst_convexity = math.inf
    growth = 0.0
    worst_fd_f = 0.0
    worst_fd_L = 0.0
    worst_fd_psi = 0.0
    worst_sym = 0.0
    for x, u in zip(pts_x, pts_u):
        luu = np.asarray(spec.cost.hess_uu(x, u), dtype=float)
        eigs = np.linalg.eigvalsh(0.5 * (luu + luu.T))
        worst_convexity = min(worst_convexity, float(eigs[0]))
        worst_sym = max(worst_sym, _rel_err(luu, luu.T))
        for f in spec.fields:
            growth = max(growth, float(np.linalg.norm(f.value(x))) / (np.linalg.norm(x) + 1.0))
        lxx = np.asarray(spec.cost.hess_xx(x, u), dtype=float)
        worst_sym = max(worst_sym, _rel_err(lxx, lxx.T))
        hp = np.asarray(spec.terminal.hess(x), dtype=float)
        worst_sym = max(worst_sym, _rel_err(hp, hp.T))

    for x, u in zip(pts_x, pts_u):
        for f in spec.fields:
            worst_fd_f = max(worst_fd_f, _rel_err(f.jac(x), fd_derivative(f.value, x)))
            worst_fd_f = max(worst_fd_f, _rel_err(f.hess(x), fd_derivative(f.jac, x)))
        z = np.concatenate([x, u])
        n = spec.n

        def L_of(zv):
            return np.atleast_1d(spec.cost.value(zv[:n], zv[n:]))

        gL = np.concatenate([spec.cost.grad_x(x, u), spec.cost.grad_u(x, u)])
        worst_fd_L = max(worst_fd_L, _rel_err(gL, fd_derivative(L_of, z)[0]))

        def gL_of(zv):
            return np.concatenate([spec.cost.grad_x(zv[:n], zv[n:]),
                                   spec.cost.grad_u(zv[:n], zv[n:])])

        hL = np.block([[spec.cost.hess_xx(x, u), spec.cost.hess_xu(x, u)],
                       [spec.cost.hess_xu(x, u).T, spec.cost.hess_uu(x, u)]])
        worst_fd_L = max(worst_fd_L, _rel_err(hL, fd_derivative(gL_of, z)))
        worst_fd_psi = max(worst_fd_psi, _rel_err(spec.terminal.grad(x),
                                                  fd_derivative(lambda zz: np.atleast_1d(spec.terminal.value(zz)), x)[0]))
        worst_fd_psi = max(worst_fd_psi, _rel_err(spec.terminal.hess(x),
                                                  fd_derivative(spec.terminal.grad, x)))
        worst_fd_psi = max(worst_fd_psi, _rel_err(spec.terminal.third(x),
                                                  fd_derivative(spec.terminal.hess, x)))

    checks = (
        CheckResult(
            name="uniform_convexity",
            worst=delta - worst_convexity,
            tol=1e-9,
            passed=worst_convexity >= delta - 1e-9,
            note=f"min eig L_uu = {worst_convexity:.6g}, declared modulus {delta:.6g}",
        ),
        CheckResult(
            name="growth_bound",
            worst=growth,
            tol=math.inf,
            passed=True,
            note="reported c1 (sup |f_i(x)| / (|x|+1) over samples)",
        ),
        CheckResult("dynamics_fd", worst_fd_f, fd_tol, worst_fd_f <= fd_tol),
        CheckResult("cost_fd", worst_fd_L, fd_tol, worst_fd_L <= fd_tol),
        CheckResult("terminal_fd", worst_fd_psi, fd_tol, worst_fd_psi <= fd_tol),
        CheckResult("second_derivative_symmetry", worst_sym, 1e-10, worst_sym <= 1e-10),
    )
    return ValidationReport(checks=checks, samples=samples, growth_constant=growth)
