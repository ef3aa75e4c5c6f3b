# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled integration sweeps.

Mirrors conjpt._purekernels step for step: backward RK4 extremal sweep with
per-stage Newton control solves, first/second-order variational sweeps with
Hermite-reconstructed stage midpoints, the forward auxiliary linear sweep and
the frozen-control replay.  Problem functions arrive as instruction tapes
(see conjpt.tape); terminal-cost data is supplied by the caller, so any
terminal-cost provider works with the compiled path.

def-level functions return an error code: 0 ok, 1 control solve failure,
2 non-finite values.
"""

from libc.math cimport sin, cos, exp, log, fabs, isfinite
from libc.stdlib cimport malloc, free


cdef inline void tape_run(const int[:, ::1] code, const double[::1] consts,
                          const int[::1] outputs, int n_inputs,
                          const double* xin, double* slots, double* out) noexcept nogil:
    cdef int i, k, op, a, b
    cdef double va, r
    cdef int nc = consts.shape[0]
    cdef int K = code.shape[0]
    cdef int base = n_inputs + nc
    for i in range(n_inputs):
        slots[i] = xin[i]
    for i in range(nc):
        slots[n_inputs + i] = consts[i]
    for k in range(K):
        op = code[k, 0]
        a = code[k, 1]
        b = code[k, 2]
        va = slots[a]
        if op == 0:
            r = va + slots[b]
        elif op == 1:
            r = va - slots[b]
        elif op == 2:
            r = va * slots[b]
        elif op == 3:
            r = va / slots[b]
        elif op == 4:
            r = -va
        elif op == 5:
            r = sin(va)
        elif op == 6:
            r = cos(va)
        elif op == 7:
            r = exp(va)
        else:
            r = log(va)
        slots[base + k] = r
    for i in range(outputs.shape[0]):
        out[i] = slots[outputs[i]]


def eval_tape(const int[:, ::1] code, const double[::1] consts,
              const int[::1] outputs, int n_inputs,
              const double[::1] x, double[::1] out):
    """Evaluate one tape at one point into ``out`` (len(outputs) entries)."""
    cdef int n_slots = n_inputs + consts.shape[0] + code.shape[0]
    cdef double* slots = <double*> malloc(n_slots * sizeof(double))
    if slots == NULL:
        raise MemoryError()
    tape_run(code, consts, outputs, n_inputs, &x[0], slots, &out[0])
    free(slots)


cdef int _solve_dense(double* A, double* B, int mdim, int ncols) noexcept nogil:
    """In-place LU solve with partial pivoting: A (mdim x mdim) is destroyed,
    B (mdim x ncols, row major) is overwritten with the solution.
    Returns 1 on a (near-)singular pivot."""
    cdef int i, j, k, piv, col
    cdef double big, tmp, factor
    for k in range(mdim):
        big = fabs(A[k * mdim + k])
        piv = k
        for i in range(k + 1, mdim):
            if fabs(A[i * mdim + k]) > big:
                big = fabs(A[i * mdim + k])
                piv = i
        if big < 1e-300:
            return 1
        if piv != k:
            for j in range(mdim):
                tmp = A[k * mdim + j]
                A[k * mdim + j] = A[piv * mdim + j]
                A[piv * mdim + j] = tmp
            for col in range(ncols):
                tmp = B[k * ncols + col]
                B[k * ncols + col] = B[piv * ncols + col]
                B[piv * ncols + col] = tmp
        for i in range(k + 1, mdim):
            factor = A[i * mdim + k] / A[k * mdim + k]
            A[i * mdim + k] = 0.0
            for j in range(k + 1, mdim):
                A[i * mdim + j] -= factor * A[k * mdim + j]
            for col in range(ncols):
                B[i * ncols + col] -= factor * B[k * ncols + col]
    for k in range(mdim - 1, -1, -1):
        for col in range(ncols):
            tmp = B[k * ncols + col]
            for j in range(k + 1, mdim):
                tmp -= A[k * mdim + j] * B[j * ncols + col]
            B[k * ncols + col] = tmp / A[k * mdim + k]
    return 0


cdef inline void hermite_mid(const double* y0, const double* yd0,
                             const double* y1, const double* yd1,
                             int dim, double h, double* out) noexcept nogil:
    cdef int i
    for i in range(dim):
        out[i] = 0.5 * (y0[i] + y1[i]) + 0.125 * h * (yd0[i] - yd1[i])


cdef int newton_u(const int[:, ::1] Lcode, const double[::1] Lconsts,
                  const int[::1] Louts, int n, int m,
                  const double* x, const double* fu_p, double* u,
                  double tol, int max_iter,
                  double* slots_L, double* Lbuf, double* xu,
                  double* scratch) noexcept nogil:
    """Damped Newton for L_u + p . f_u = 0 at fixed x.

    On success Lbuf holds the L-tape outputs at the converged control.
    scratch needs m*m + 4*m doubles."""
    cdef int i, j, it, half
    cdef double rnorm, rnorm_try, lam
    cdef double* A = scratch
    cdef double* step = scratch + m * m
    cdef double* r = scratch + m * m + m
    cdef double* utry = scratch + m * m + 2 * m
    cdef double* rtry = scratch + m * m + 3 * m
    cdef int offLu = 1 + n
    cdef int offLuu = 1 + n + m
    cdef bint accepted

    for i in range(n):
        xu[i] = x[i]
    for i in range(m):
        xu[n + i] = u[i]
    tape_run(Lcode, Lconsts, Louts, n + m, xu, slots_L, Lbuf)
    rnorm = 0.0
    for i in range(m):
        r[i] = Lbuf[offLu + i] + fu_p[i]
        if not isfinite(r[i]):
            return 2
        if fabs(r[i]) > rnorm:
            rnorm = fabs(r[i])
    for it in range(max_iter):
        if rnorm <= tol:
            return 0
        for i in range(m):
            for j in range(m):
                A[i * m + j] = Lbuf[offLuu + i * m + j]
            step[i] = -r[i]
        if _solve_dense(A, step, m, 1):
            return 1
        lam = 1.0
        accepted = False
        for half in range(30):
            for i in range(m):
                utry[i] = u[i] + lam * step[i]
                xu[n + i] = utry[i]
            tape_run(Lcode, Lconsts, Louts, n + m, xu, slots_L, Lbuf)
            rnorm_try = 0.0
            for i in range(m):
                rtry[i] = Lbuf[offLu + i] + fu_p[i]
                if fabs(rtry[i]) > rnorm_try:
                    rnorm_try = fabs(rtry[i])
            if rnorm_try < rnorm or rnorm_try <= tol:
                for i in range(m):
                    u[i] = utry[i]
                    r[i] = rtry[i]
                rnorm = rnorm_try
                accepted = True
                break
            lam *= 0.5
        if not accepted:
            return 1
    if rnorm <= tol:
        # Lbuf corresponds to the accepted u already
        return 0
    return 1


def extremal_sweep(int n, int m,
                   const int[:, ::1] fcode, const double[::1] fconsts,
                   const int[::1] fouts, int f_slots,
                   const int[:, ::1] Lcode, const double[::1] Lconsts,
                   const int[::1] Louts, int L_slots,
                   const double[::1] z, const double[::1] pT,
                   double T, int N, double tol, int max_newton,
                   double[:, ::1] x, double[:, ::1] p, double[:, ::1] u,
                   double[:, ::1] xdot, double[:, ::1] pdot, double[:, ::1] udot,
                   double[::1] gamma):
    cdef double dt = T / N
    cdef double hs = -dt
    cdef int nf = m + 1
    cdef int Fout = fouts.shape[0]
    cdef int Lout = Louts.shape[0]
    cdef int OF_JAC = nf * n
    cdef int OL_LX = 1
    cdef int OL_LUU = 1 + n + m
    cdef int OL_LXU = OL_LUU + m * m
    cdef int i, j, a, b, st, err
    cdef double acc

    cdef double* mem = <double*> malloc(
        (f_slots + L_slots + Fout + Lout + (n + m)
         + m * m + 4 * m            # newton scratch
         + m                        # fu_p
         + 8 * n                    # k1..k4 for x and p
         + 2 * n                    # xs, ps
         + m                        # us
         + n * n                    # fx
         + m * n                    # C
         + m * m + m                # udot solve
         ) * sizeof(double))
    if mem == NULL:
        raise MemoryError()
    cdef double* slots_f = mem
    cdef double* slots_L = slots_f + f_slots
    cdef double* fbuf = slots_L + L_slots
    cdef double* Lbuf = fbuf + Fout
    cdef double* xu = Lbuf + Lout
    cdef double* nsc = xu + (n + m)
    cdef double* fu_p = nsc + m * m + 4 * m
    cdef double* kx = fu_p + m
    cdef double* kp = kx + 4 * n
    cdef double* xs = kp + 4 * n
    cdef double* ps = xs + n
    cdef double* us = ps + n
    cdef double* fx = us + m
    cdef double* Cm = fx + n * n
    cdef double* Au = Cm + m * n
    cdef double* bu = Au + m * m

    cdef int stage, rc

    # rhs at one (xs, ps): solves the control, fills kx[st], kp[st]
    # (inlined below because cdef closures are unavailable)

    for i in range(n):
        x[N, i] = z[i]
        p[N, i] = pT[i]
    for i in range(m):
        u[N, i] = 0.0

    cdef int node
    cdef double lam

    # -- helper blocks implemented inline -----------------------------------
    # evaluate f tape at xs, compute fu_p from ps
    # solve control into us; then fx, kx, kp

    cdef int fail = 0
    cdef double* kxs
    cdef double* kps

    node = N
    while True:
        # node control solve + node derived data
        for i in range(n):
            xs[i] = x[node, i]
            ps[i] = p[node, i]
        for i in range(m):
            us[i] = u[node, i]
        tape_run(fcode, fconsts, fouts, n, xs, slots_f, fbuf)
        for i in range(m):
            acc = 0.0
            for a in range(n):
                acc += ps[a] * fbuf[(i + 1) * n + a]
            fu_p[i] = acc
        rc = newton_u(Lcode, Lconsts, Louts, n, m, xs, fu_p, us, tol, max_newton,
                      slots_L, Lbuf, xu, nsc)
        if rc:
            fail = rc
            break
        for i in range(m):
            u[node, i] = us[i]
        gamma[node] = Lbuf[0]
        # fx = Df0 + sum u_i Df_i
        for a in range(n):
            for b in range(n):
                acc = fbuf[OF_JAC + a * n + b]
                for i in range(m):
                    acc += us[i] * fbuf[OF_JAC + (i + 1) * n * n + a * n + b]
                fx[a * n + b] = acc
        for a in range(n):
            acc = fbuf[a]
            for i in range(m):
                acc += us[i] * fbuf[(i + 1) * n + a]
            xdot[node, a] = acc
        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += ps[b] * fx[b * n + a]
            pdot[node, a] = -acc - Lbuf[OL_LX + a]
        # udot: L_uu ud = -(f_u^T pdot + C xdot), C = p . f_ux + L_ux
        for i in range(m):
            for b in range(n):
                acc = Lbuf[OL_LXU + b * m + i]
                for a in range(n):
                    acc += ps[a] * fbuf[OF_JAC + (i + 1) * n * n + a * n + b]
                Cm[i * n + b] = acc
        for i in range(m):
            acc = 0.0
            for a in range(n):
                acc += fbuf[(i + 1) * n + a] * pdot[node, a]
            for b in range(n):
                acc += Cm[i * n + b] * xdot[node, b]
            bu[i] = -acc
        for i in range(m):
            for j in range(m):
                Au[i * m + j] = Lbuf[OL_LUU + i * m + j]
        if _solve_dense(Au, bu, m, 1):
            fail = 1
            break
        for i in range(m):
            udot[node, i] = bu[i]

        if node == 0:
            break

        # one backward RK4 step from node to node-1
        for st in range(4):
            if st == 0:
                for i in range(n):
                    xs[i] = x[node, i]
                    ps[i] = p[node, i]
                for i in range(m):
                    us[i] = u[node, i]
            elif st == 1 or st == 2:
                kxs = kx + (st - 1) * n
                kps = kp + (st - 1) * n
                for i in range(n):
                    xs[i] = x[node, i] + 0.5 * hs * kxs[i]
                    ps[i] = p[node, i] + 0.5 * hs * kps[i]
            else:
                kxs = kx + 2 * n
                kps = kp + 2 * n
                for i in range(n):
                    xs[i] = x[node, i] + hs * kxs[i]
                    ps[i] = p[node, i] + hs * kps[i]
            # us carries the warm start from the previous stage
            tape_run(fcode, fconsts, fouts, n, xs, slots_f, fbuf)
            for i in range(m):
                acc = 0.0
                for a in range(n):
                    acc += ps[a] * fbuf[(i + 1) * n + a]
                fu_p[i] = acc
            rc = newton_u(Lcode, Lconsts, Louts, n, m, xs, fu_p, us, tol, max_newton,
                          slots_L, Lbuf, xu, nsc)
            if rc:
                fail = rc
                break
            for a in range(n):
                for b in range(n):
                    acc = fbuf[OF_JAC + a * n + b]
                    for i in range(m):
                        acc += us[i] * fbuf[OF_JAC + (i + 1) * n * n + a * n + b]
                    fx[a * n + b] = acc
            kxs = kx + st * n
            kps = kp + st * n
            for a in range(n):
                acc = fbuf[a]
                for i in range(m):
                    acc += us[i] * fbuf[(i + 1) * n + a]
                kxs[a] = acc
            for a in range(n):
                acc = 0.0
                for b in range(n):
                    acc += ps[b] * fx[b * n + a]
                kps[a] = -acc - Lbuf[OL_LX + a]
        if fail:
            break
        for i in range(n):
            x[node - 1, i] = x[node, i] + hs / 6.0 * (
                kx[i] + 2.0 * kx[n + i] + 2.0 * kx[2 * n + i] + kx[3 * n + i])
            p[node - 1, i] = p[node, i] + hs / 6.0 * (
                kp[i] + 2.0 * kp[n + i] + 2.0 * kp[2 * n + i] + kp[3 * n + i])
            if not (isfinite(x[node - 1, i]) and isfinite(p[node - 1, i])):
                fail = 2
                break
        if fail:
            break
        for i in range(m):
            u[node - 1, i] = us[i]  # warm start for the node solve
        node -= 1

    free(mem)
    return fail


def variational_sweep(int n, int m,
                      const int[:, ::1] fcode, const double[::1] fconsts,
                      const int[::1] fouts, int f_slots,
                      const int[:, ::1] LLcode, const double[::1] LLconsts,
                      const int[::1] LLouts, int LL_slots,
                      const int[:, ::1] LHcode, const double[::1] LHconsts,
                      const int[::1] LHouts, int LH_slots,
                      const double[:, ::1] x, const double[:, ::1] p,
                      const double[:, ::1] u,
                      const double[:, ::1] xdot, const double[:, ::1] pdot,
                      const double[:, ::1] udot,
                      double T, int N,
                      const double[:, ::1] D2psi, int with_dir,
                      const double[::1] v, const double[::1] piT,
                      double tol, int max_newton,
                      double[:, :, ::1] Xz, double[:, :, ::1] Pz,
                      double[:, :, ::1] Uz,
                      double[:, ::1] xi, double[:, ::1] pi, double[:, ::1] mu):
    cdef double dt = T / N
    cdef double hs = -dt
    cdef int nf = m + 1
    cdef int Fout = fouts.shape[0]
    cdef int LHout = LHouts.shape[0]
    cdef int n2 = n * n
    cdef int n3 = n2 * n
    cdef int n4 = n3 * n
    cdef int OF_JAC = nf * n
    cdef int OF_HESS = OF_JAC + nf * n2
    cdef int OF_THIRD = OF_HESS + nf * n3
    cdef int OL_LX = 1
    cdef int OL_LUU = 1 + n + m
    cdef int OL_LXU = OL_LUU + m * m
    cdef int OL_LXX = OL_LXU + n * m
    cdef int OL_LXXX = OL_LXX + n2
    cdef int OL_LXXU = OL_LXXX + n3
    cdef int OL_LXUU = OL_LXXU + n2 * m
    cdef int OL_LUUU = OL_LXUU + n * m * m
    cdef int ns = 2 * n2 + 2 * n  # full state size (dir part may be unused)
    cdef int i, j, a, b, c, d, st, B, node
    cdef double acc, acc2

    # three base points: 0 = right node, 1 = mid, 2 = left node
    cdef double* mem = <double*> malloc(
        (f_slots + LH_slots + LL_slots
         + 3 * (2 * n + m + Fout + LHout)
         + (n + m)                       # xu
         + m * m + 4 * m                 # newton scratch (uses L_low buf)
         + LLouts.shape[0]               # newton L_low buffer
         + m                             # fu_p
         + 5 * ns                        # K1..K4 + Stmp
         + ns                            # S
         + n2 + n3 + n4                  # fx, fxx, fxxx
         + n2 + n * m                    # pfxx, pfxu
         + m * n + m * n                 # C, RHSU
         + m * m + m                     # A, rhs2/mu scratch
         + m * n                         # U
         + m                             # mu_s
         + 3 * n + m                     # w0, q, scratch vec, b0
         ) * sizeof(double))
    if mem == NULL:
        raise MemoryError()
    cdef double* ptr = mem
    cdef double* slots_f = ptr
    ptr += f_slots
    cdef double* slots_LH = ptr
    ptr += LH_slots
    cdef double* slots_LL = ptr
    ptr += LL_slots
    cdef double* base_x = ptr
    ptr += 3 * n
    cdef double* base_p = ptr
    ptr += 3 * n
    cdef double* base_u = ptr
    ptr += 3 * m
    cdef double* base_f = ptr
    ptr += 3 * Fout
    cdef double* base_L = ptr
    ptr += 3 * LHout
    cdef double* xu = ptr
    ptr += n + m
    cdef double* nsc = ptr
    ptr += m * m + 4 * m
    cdef double* LLbuf = ptr
    ptr += LLouts.shape[0]
    cdef double* fu_p = ptr
    ptr += m
    cdef double* K = ptr
    ptr += 4 * ns
    cdef double* Stmp = ptr
    ptr += ns
    cdef double* S = ptr
    ptr += ns
    cdef double* fx = ptr
    ptr += n2
    cdef double* fxx = ptr
    ptr += n3
    cdef double* fxxx = ptr
    ptr += n4
    cdef double* pfxx = ptr
    ptr += n2
    cdef double* pfxu = ptr
    ptr += n * m
    cdef double* Cm = ptr
    ptr += m * n
    cdef double* RHSU = ptr
    ptr += m * n
    cdef double* Am = ptr
    ptr += m * m
    cdef double* rhs2 = ptr
    ptr += m
    cdef double* U = ptr
    ptr += m * n
    cdef double* mu_s = ptr
    ptr += m
    cdef double* w0 = ptr
    ptr += n
    cdef double* qv = ptr
    ptr += n
    cdef double* b0 = ptr
    ptr += m

    cdef int fail = 0
    cdef int right = 0, mid = 1, left = 2, tswap
    cdef int nuse = 2 * n2 + (2 * n if with_dir else 0)  # active state length
    cdef double* SXz = S
    cdef double* SPz = S + n2
    cdef double* Sxi = S + 2 * n2
    cdef double* Spi = S + 2 * n2 + n

    # ---- terminal data (zero the full buffers so unused slots stay finite)
    for i in range(ns):
        S[i] = 0.0
        Stmp[i] = 0.0
    for i in range(4 * ns):
        K[i] = 0.0
    for a in range(n):
        for b in range(n):
            SXz[a * n + b] = 1.0 if a == b else 0.0
            SPz[a * n + b] = D2psi[a, b]
    if with_dir:
        for a in range(n):
            Sxi[a] = 0.0
            Spi[a] = piT[a]

    # ---- prepare base point data at a node index into slot k
    cdef int rc

    # (inline helper) fills base_x/p/u[k], base_f[k], base_L[k]
    # from (xs, ps, uguess); control re-solved with the low-order tape,
    # then the high-order tape is evaluated at the solution.

    node = N

    # prime the right-node base
    for i in range(n):
        base_x[right * n + i] = x[N, i]
        base_p[right * n + i] = p[N, i]
    for i in range(m):
        base_u[right * m + i] = u[N, i]
    tape_run(fcode, fconsts, fouts, n, base_x + right * n, slots_f, base_f + right * Fout)
    for i in range(n):
        xu[i] = base_x[right * n + i]
    for i in range(m):
        xu[n + i] = base_u[right * m + i]
    tape_run(LHcode, LHconsts, LHouts, n + m, xu, slots_LH, base_L + right * LHout)

    cdef double* bx
    cdef double* bp
    cdef double* bu_
    cdef double* bf
    cdef double* bl
    cdef double* Ksl
    cdef double* Sin
    cdef int kslot, bslot
    cdef double h = dt

    while node >= 1:
        # --- store node values from current state
        for a in range(n):
            for b in range(n):
                Xz[node, a, b] = SXz[a * n + b]
                Pz[node, a, b] = SPz[a * n + b]
        if with_dir:
            for a in range(n):
                xi[node, a] = Sxi[a]
                pi[node, a] = Spi[a]

        # --- mid base point (Hermite + control solve)
        hermite_mid(&x[node - 1, 0], &xdot[node - 1, 0], &x[node, 0], &xdot[node, 0],
                    n, h, base_x + mid * n)
        hermite_mid(&p[node - 1, 0], &pdot[node - 1, 0], &p[node, 0], &pdot[node, 0],
                    n, h, base_p + mid * n)
        hermite_mid(&u[node - 1, 0], &udot[node - 1, 0], &u[node, 0], &udot[node, 0],
                    m, h, base_u + mid * m)
        tape_run(fcode, fconsts, fouts, n, base_x + mid * n, slots_f, base_f + mid * Fout)
        for i in range(m):
            acc = 0.0
            for a in range(n):
                acc += base_p[mid * n + a] * base_f[mid * Fout + (i + 1) * n + a]
            fu_p[i] = acc
        rc = newton_u(LLcode, LLconsts, LLouts, n, m, base_x + mid * n, fu_p,
                      base_u + mid * m, tol, max_newton, slots_LL, LLbuf, xu, nsc)
        if rc:
            fail = rc
            break
        for i in range(n):
            xu[i] = base_x[mid * n + i]
        for i in range(m):
            xu[n + i] = base_u[mid * m + i]
        tape_run(LHcode, LHconsts, LHouts, n + m, xu, slots_LH, base_L + mid * LHout)

        # --- left node base point
        for i in range(n):
            base_x[left * n + i] = x[node - 1, i]
            base_p[left * n + i] = p[node - 1, i]
        for i in range(m):
            base_u[left * m + i] = u[node - 1, i]
        tape_run(fcode, fconsts, fouts, n, base_x + left * n, slots_f, base_f + left * Fout)
        for i in range(n):
            xu[i] = base_x[left * n + i]
        for i in range(m):
            xu[n + i] = base_u[left * m + i]
        tape_run(LHcode, LHconsts, LHouts, n + m, xu, slots_LH, base_L + left * LHout)

        # --- four stages
        for st in range(4):
            if st == 0:
                bslot = right
                Sin = S
            elif st == 1:
                bslot = mid
                Ksl = K  # K1
                for i in range(nuse):
                    Stmp[i] = S[i] + 0.5 * hs * Ksl[i]
                Sin = Stmp
            elif st == 2:
                bslot = mid
                Ksl = K + ns  # K2
                for i in range(nuse):
                    Stmp[i] = S[i] + 0.5 * hs * Ksl[i]
                Sin = Stmp
            else:
                bslot = left
                Ksl = K + 2 * ns  # K3
                for i in range(nuse):
                    Stmp[i] = S[i] + hs * Ksl[i]
                Sin = Stmp

            bx = base_x + bslot * n
            bp = base_p + bslot * n
            bu_ = base_u + bslot * m
            bf = base_f + bslot * Fout
            bl = base_L + bslot * LHout

            # assemble fx, fxx (+fxxx) at this base point
            for a in range(n):
                for b in range(n):
                    acc = bf[OF_JAC + a * n + b]
                    for i in range(m):
                        acc += bu_[i] * bf[OF_JAC + (i + 1) * n2 + a * n + b]
                    fx[a * n + b] = acc
            for a in range(n):
                for b in range(n):
                    for c in range(n):
                        acc = bf[OF_HESS + a * n2 + b * n + c]
                        for i in range(m):
                            acc += bu_[i] * bf[OF_HESS + (i + 1) * n3 + a * n2 + b * n + c]
                        fxx[a * n2 + b * n + c] = acc
            if with_dir:
                for a in range(n):
                    for b in range(n):
                        for c in range(n):
                            for d in range(n):
                                acc = bf[OF_THIRD + a * n3 + b * n2 + c * n + d]
                                for i in range(m):
                                    acc += bu_[i] * bf[OF_THIRD + (i + 1) * n4 + a * n3 + b * n2 + c * n + d]
                                fxxx[a * n3 + b * n2 + c * n + d] = acc
            for a in range(n):
                for c in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += bp[b] * fxx[b * n2 + a * n + c]
                    pfxx[a * n + c] = acc
            for a in range(n):
                for i in range(m):
                    acc = 0.0
                    for b in range(n):
                        acc += bp[b] * bf[OF_JAC + (i + 1) * n2 + b * n + a]
                    pfxu[a * m + i] = acc

            # U solve: L_uu U = -(f_u^T Pz + C Xz)
            for i in range(m):
                for b in range(n):
                    acc = bl[OL_LXU + b * m + i]
                    for a in range(n):
                        acc += bp[a] * bf[OF_JAC + (i + 1) * n2 + a * n + b]
                    Cm[i * n + b] = acc
            for i in range(m):
                for B in range(n):
                    acc = 0.0
                    for a in range(n):
                        acc += bf[(i + 1) * n + a] * Sin[n2 + a * n + B]  # Pz block
                    for b in range(n):
                        acc += Cm[i * n + b] * Sin[b * n + B]  # Xz block
                    RHSU[i * n + B] = -acc
            for i in range(m):
                for j in range(m):
                    Am[i * m + j] = bl[OL_LUU + i * m + j]
            if _solve_dense(Am, RHSU, m, n):
                fail = 1
                break
            for i in range(m * n):
                U[i] = RHSU[i]

            Ksl = K + st * ns
            # dXz
            for a in range(n):
                for B in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += fx[a * n + b] * Sin[b * n + B]
                    for i in range(m):
                        acc += bf[(i + 1) * n + a] * U[i * n + B]
                    Ksl[a * n + B] = acc
            # dPz
            for a in range(n):
                for B in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += fx[b * n + a] * Sin[n2 + b * n + B]
                    for c in range(n):
                        acc += (pfxx[a * n + c] + bl[OL_LXX + a * n + c]) * Sin[c * n + B]
                    for i in range(m):
                        acc += (pfxu[a * m + i] + bl[OL_LXU + a * m + i]) * U[i * n + B]
                    Ksl[n2 + a * n + B] = -acc

            if with_dir:
                for b in range(n):
                    acc = 0.0
                    for B in range(n):
                        acc += Sin[b * n + B] * v[B]
                    w0[b] = acc
                for a in range(n):
                    acc = 0.0
                    for B in range(n):
                        acc += Sin[n2 + a * n + B] * v[B]
                    qv[a] = acc
                for i in range(m):
                    acc = 0.0
                    for B in range(n):
                        acc += U[i * n + B] * v[B]
                    b0[i] = acc
                # mu solve
                for i in range(m):
                    acc = 0.0
                    for a in range(n):
                        acc += bf[(i + 1) * n + a] * Sin[2 * n2 + n + a]  # pi
                    for a in range(n):
                        acc2 = 0.0
                        for b in range(n):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + a * n + b] * w0[b]
                        acc += 2.0 * qv[a] * acc2
                    for a in range(n):
                        acc2 = 0.0
                        for b in range(n):
                            for c in range(n):
                                acc2 += bf[OF_HESS + (i + 1) * n3 + a * n2 + b * n + c] * w0[b] * w0[c]
                        acc += bp[a] * acc2
                    for a in range(n):
                        acc2 = 0.0
                        for b in range(n):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + a * n + b] * Sin[2 * n2 + b]  # xi
                        acc += bp[a] * acc2
                    for b in range(n):
                        for c in range(n):
                            acc += bl[OL_LXXU + b * n * m + c * m + i] * w0[b] * w0[c]
                    for b in range(n):
                        for j in range(m):
                            acc += 2.0 * bl[OL_LXUU + b * m * m + i * m + j] * w0[b] * b0[j]
                    for j in range(m):
                        for kslot in range(m):
                            acc += bl[OL_LUUU + i * m * m + j * m + kslot] * b0[j] * b0[kslot]
                    for b in range(n):
                        acc += bl[OL_LXU + b * m + i] * Sin[2 * n2 + b]
                    rhs2[i] = -acc
                for i in range(m):
                    for j in range(m):
                        Am[i * m + j] = bl[OL_LUU + i * m + j]
                if _solve_dense(Am, rhs2, m, 1):
                    fail = 1
                    break
                for i in range(m):
                    mu_s[i] = rhs2[i]
                # dxi
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        for c in range(n):
                            acc += fxx[a * n2 + b * n + c] * w0[b] * w0[c]
                    for i in range(m):
                        acc2 = 0.0
                        for b in range(n):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + a * n + b] * w0[b]
                        acc += 2.0 * acc2 * b0[i]
                    for b in range(n):
                        acc += fx[a * n + b] * Sin[2 * n2 + b]
                    for i in range(m):
                        acc += bf[(i + 1) * n + a] * mu_s[i]
                    Ksl[2 * n2 + a] = acc
                # dpi
                for a in range(n):
                    acc = 0.0
                    for b in range(n):
                        acc += fx[b * n + a] * Sin[2 * n2 + n + b]
                    for b in range(n):
                        acc2 = 0.0
                        for c in range(n):
                            acc2 += fxx[b * n2 + a * n + c] * w0[c]
                        for i in range(m):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + b * n + a] * b0[i]
                        acc += 2.0 * qv[b] * acc2
                    for b in range(n):
                        acc2 = 0.0
                        for c in range(n):
                            for d in range(n):
                                acc2 += fxxx[b * n3 + a * n2 + c * n + d] * w0[c] * w0[d]
                        for c in range(n):
                            for i in range(m):
                                acc2 += 2.0 * bf[OF_HESS + (i + 1) * n3 + b * n2 + a * n + c] * w0[c] * b0[i]
                        for c in range(n):
                            acc2 += fxx[b * n2 + a * n + c] * Sin[2 * n2 + c]
                        for i in range(m):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + b * n + a] * mu_s[i]
                        acc += bp[b] * acc2
                    for c in range(n):
                        for d in range(n):
                            acc += bl[OL_LXXX + a * n2 + c * n + d] * w0[c] * w0[d]
                    for c in range(n):
                        for i in range(m):
                            acc += 2.0 * bl[OL_LXXU + a * n * m + c * m + i] * w0[c] * b0[i]
                    for i in range(m):
                        for j in range(m):
                            acc += bl[OL_LXUU + a * m * m + i * m + j] * b0[i] * b0[j]
                    for c in range(n):
                        acc += bl[OL_LXX + a * n + c] * Sin[2 * n2 + c]
                    for i in range(m):
                        acc += bl[OL_LXU + a * m + i] * mu_s[i]
                    Ksl[2 * n2 + n + a] = -acc

            if st == 0:
                # store node U (and mu) computed from the node state
                for i in range(m):
                    for B in range(n):
                        Uz[node, i, B] = U[i * n + B]
                if with_dir:
                    for i in range(m):
                        mu[node, i] = mu_s[i]
        if fail:
            break

        # combine
        for i in range(nuse):
            S[i] = S[i] + hs / 6.0 * (K[i] + 2.0 * K[ns + i] + 2.0 * K[2 * ns + i] + K[3 * ns + i])
            if not isfinite(S[i]):
                fail = 2
                break
        if fail:
            break

        # rotate: left node becomes the right node of the next cell
        tswap = right
        right = left
        left = tswap
        node -= 1

    if not fail:
        # node == 0: store state and compute U, mu at the final node
        for a in range(n):
            for b in range(n):
                Xz[0, a, b] = SXz[a * n + b]
                Pz[0, a, b] = SPz[a * n + b]
        if with_dir:
            for a in range(n):
                xi[0, a] = Sxi[a]
                pi[0, a] = Spi[a]
        bx = base_x + right * n
        bp = base_p + right * n
        bu_ = base_u + right * m
        bf = base_f + right * Fout
        bl = base_L + right * LHout
        for i in range(m):
            for b in range(n):
                acc = bl[OL_LXU + b * m + i]
                for a in range(n):
                    acc += bp[a] * bf[OF_JAC + (i + 1) * n2 + a * n + b]
                Cm[i * n + b] = acc
        for i in range(m):
            for B in range(n):
                acc = 0.0
                for a in range(n):
                    acc += bf[(i + 1) * n + a] * SPz[a * n + B]
                for b in range(n):
                    acc += Cm[i * n + b] * SXz[b * n + B]
                RHSU[i * n + B] = -acc
        for i in range(m):
            for j in range(m):
                Am[i * m + j] = bl[OL_LUU + i * m + j]
        if _solve_dense(Am, RHSU, m, n):
            fail = 1
        else:
            for i in range(m):
                for B in range(n):
                    Uz[0, i, B] = RHSU[i * n + B]
            if with_dir:
                for b in range(n):
                    acc = 0.0
                    for B in range(n):
                        acc += SXz[b * n + B] * v[B]
                    w0[b] = acc
                for a in range(n):
                    acc = 0.0
                    for B in range(n):
                        acc += SPz[a * n + B] * v[B]
                    qv[a] = acc
                for i in range(m):
                    acc = 0.0
                    for B in range(n):
                        acc += RHSU[i * n + B] * v[B]
                    b0[i] = acc
                for i in range(m):
                    acc = 0.0
                    for a in range(n):
                        acc += bf[(i + 1) * n + a] * Spi[a]
                    for a in range(n):
                        acc2 = 0.0
                        for b in range(n):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + a * n + b] * w0[b]
                        acc += 2.0 * qv[a] * acc2
                    for a in range(n):
                        acc2 = 0.0
                        for b in range(n):
                            for c in range(n):
                                acc2 += bf[OF_HESS + (i + 1) * n3 + a * n2 + b * n + c] * w0[b] * w0[c]
                        acc += bp[a] * acc2
                    for a in range(n):
                        acc2 = 0.0
                        for b in range(n):
                            acc2 += bf[OF_JAC + (i + 1) * n2 + a * n + b] * Sxi[b]
                        acc += bp[a] * acc2
                    for b in range(n):
                        for c in range(n):
                            acc += bl[OL_LXXU + b * n * m + c * m + i] * w0[b] * w0[c]
                    for b in range(n):
                        for j in range(m):
                            acc += 2.0 * bl[OL_LXUU + b * m * m + i * m + j] * w0[b] * b0[j]
                    for j in range(m):
                        for kslot in range(m):
                            acc += bl[OL_LUUU + i * m * m + j * m + kslot] * b0[j] * b0[kslot]
                    for b in range(n):
                        acc += bl[OL_LXU + b * m + i] * Sxi[b]
                    rhs2[i] = -acc
                for i in range(m):
                    for j in range(m):
                        Am[i * m + j] = bl[OL_LUU + i * m + j]
                if _solve_dense(Am, rhs2, m, 1):
                    fail = 1
                else:
                    for i in range(m):
                        mu[0, i] = rhs2[i]

    free(mem)
    return fail


def w_forward_sweep(int n, int m,
                    const int[:, ::1] fcode, const double[::1] fconsts,
                    const int[::1] fouts, int f_slots,
                    const double[:, ::1] x, const double[:, ::1] u,
                    const double[:, ::1] xdot, const double[:, ::1] udot,
                    double T, int N,
                    const double[::1] w0, double[:, ::1] w):
    cdef double dt = T / N
    cdef int nf = m + 1
    cdef int Fout = fouts.shape[0]
    cdef int OF_JAC = nf * n
    cdef int i, a, b, j
    cdef double acc

    cdef double* mem = <double*> malloc(
        (f_slots + Fout + 3 * n * n + 2 * n + m + 5 * n) * sizeof(double))
    if mem == NULL:
        raise MemoryError()
    cdef double* slots_f = mem
    cdef double* fbuf = slots_f + f_slots
    cdef double* A0 = fbuf + Fout
    cdef double* Amid = A0 + n * n
    cdef double* A1 = Amid + n * n
    cdef double* xm = A1 + n * n
    cdef double* um = xm + n
    cdef double* k1 = um + m
    cdef double* k2 = k1 + n
    cdef double* k3 = k2 + n
    cdef double* k4 = k3 + n
    cdef double* tmp = k4 + n

    cdef int fail = 0
    for i in range(n):
        w[0, i] = w0[i]

    for j in range(N):
        # fx at left node
        tape_run(fcode, fconsts, fouts, n, &x[j, 0], slots_f, fbuf)
        for a in range(n):
            for b in range(n):
                acc = fbuf[OF_JAC + a * n + b]
                for i in range(m):
                    acc += u[j, i] * fbuf[OF_JAC + (i + 1) * n * n + a * n + b]
                A0[a * n + b] = acc
        # fx at midpoint (Hermite state and control)
        hermite_mid(&x[j, 0], &xdot[j, 0], &x[j + 1, 0], &xdot[j + 1, 0], n, dt, xm)
        hermite_mid(&u[j, 0], &udot[j, 0], &u[j + 1, 0], &udot[j + 1, 0], m, dt, um)
        tape_run(fcode, fconsts, fouts, n, xm, slots_f, fbuf)
        for a in range(n):
            for b in range(n):
                acc = fbuf[OF_JAC + a * n + b]
                for i in range(m):
                    acc += um[i] * fbuf[OF_JAC + (i + 1) * n * n + a * n + b]
                Amid[a * n + b] = acc
        # fx at right node
        tape_run(fcode, fconsts, fouts, n, &x[j + 1, 0], slots_f, fbuf)
        for a in range(n):
            for b in range(n):
                acc = fbuf[OF_JAC + a * n + b]
                for i in range(m):
                    acc += u[j + 1, i] * fbuf[OF_JAC + (i + 1) * n * n + a * n + b]
                A1[a * n + b] = acc

        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += A0[a * n + b] * w[j, b]
            k1[a] = acc
        for a in range(n):
            tmp[a] = w[j, a] + 0.5 * dt * k1[a]
        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += Amid[a * n + b] * tmp[b]
            k2[a] = acc
        for a in range(n):
            tmp[a] = w[j, a] + 0.5 * dt * k2[a]
        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += Amid[a * n + b] * tmp[b]
            k3[a] = acc
        for a in range(n):
            tmp[a] = w[j, a] + dt * k3[a]
        for a in range(n):
            acc = 0.0
            for b in range(n):
                acc += A1[a * n + b] * tmp[b]
            k4[a] = acc
        for a in range(n):
            w[j + 1, a] = w[j, a] + dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])
            if not isfinite(w[j + 1, a]):
                fail = 2
                break
        if fail:
            break

    free(mem)
    return fail


def replay_sweep(int n, int m,
                 const int[:, ::1] fcode, const double[::1] fconsts,
                 const int[::1] fouts, int f_slots,
                 const int[:, ::1] Lcode, const double[::1] Lconsts,
                 const int[::1] Louts, int L_slots,
                 const double[:, ::1] u, const double[:, ::1] udot,
                 const double[::1] x0, double T, int N,
                 double[:, ::1] xt, double[::1] lvals):
    cdef double dt = T / N
    cdef int Fout = fouts.shape[0]
    cdef int Lout = Louts.shape[0]
    cdef int i, a, j
    cdef double acc

    cdef double* mem = <double*> malloc(
        (f_slots + L_slots + Fout + Lout + (n + m) + m + 5 * n) * sizeof(double))
    if mem == NULL:
        raise MemoryError()
    cdef double* slots_f = mem
    cdef double* slots_L = slots_f + f_slots
    cdef double* fbuf = slots_L + L_slots
    cdef double* Lbuf = fbuf + Fout
    cdef double* xu = Lbuf + Lout
    cdef double* um = xu + (n + m)
    cdef double* k1 = um + m
    cdef double* k2 = k1 + n
    cdef double* k3 = k2 + n
    cdef double* k4 = k3 + n
    cdef double* tmp = k4 + n

    cdef int fail = 0
    for i in range(n):
        xt[0, i] = x0[i]
    for i in range(n):
        xu[i] = xt[0, i]
    for i in range(m):
        xu[n + i] = u[0, i]
    tape_run(Lcode, Lconsts, Louts, n + m, xu, slots_L, Lbuf)
    lvals[0] = Lbuf[0]

    for j in range(N):
        hermite_mid(&u[j, 0], &udot[j, 0], &u[j + 1, 0], &udot[j + 1, 0], m, dt, um)

        tape_run(fcode, fconsts, fouts, n, &xt[j, 0], slots_f, fbuf)
        for a in range(n):
            acc = fbuf[a]
            for i in range(m):
                acc += u[j, i] * fbuf[(i + 1) * n + a]
            k1[a] = acc
        for a in range(n):
            tmp[a] = xt[j, a] + 0.5 * dt * k1[a]
        tape_run(fcode, fconsts, fouts, n, tmp, slots_f, fbuf)
        for a in range(n):
            acc = fbuf[a]
            for i in range(m):
                acc += um[i] * fbuf[(i + 1) * n + a]
            k2[a] = acc
        for a in range(n):
            tmp[a] = xt[j, a] + 0.5 * dt * k2[a]
        tape_run(fcode, fconsts, fouts, n, tmp, slots_f, fbuf)
        for a in range(n):
            acc = fbuf[a]
            for i in range(m):
                acc += um[i] * fbuf[(i + 1) * n + a]
            k3[a] = acc
        for a in range(n):
            tmp[a] = xt[j, a] + dt * k3[a]
        tape_run(fcode, fconsts, fouts, n, tmp, slots_f, fbuf)
        for a in range(n):
            acc = fbuf[a]
            for i in range(m):
                acc += u[j + 1, i] * fbuf[(i + 1) * n + a]
            k4[a] = acc
        for a in range(n):
            xt[j + 1, a] = xt[j, a] + dt / 6.0 * (k1[a] + 2.0 * k2[a] + 2.0 * k3[a] + k4[a])
            if not isfinite(xt[j + 1, a]):
                fail = 2
                break
        if fail:
            break
        for i in range(n):
            xu[i] = xt[j + 1, i]
        for i in range(m):
            xu[n + i] = u[j + 1, i]
        tape_run(Lcode, Lconsts, Louts, n + m, xu, slots_L, Lbuf)
        lvals[j + 1] = Lbuf[0]

    free(mem)
    return fail
