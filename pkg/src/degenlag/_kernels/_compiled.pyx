# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels: analytic-model evaluation and stepping loops.

Mirrors the pure-Python implementations in degenlag.models /
degenlag.integrate for the three built-in models (kind codes 1=LV, 2=MCP,
3=GC). Semantics are kept identical; parity is enforced by tests.
"""

import numpy as np

cimport numpy as cnp
from libc.math cimport cos, sin, log, log1p, sqrt, fabs, isfinite, pow

cnp.import_array()

DEF MAXD = 2
DEF MAX2D = 4
DEF MAXQ = 64

cdef double BRANCH_SWITCH = 0.2  # |cos(theta)| below which GC uses quadrature


cdef struct Eval:
    int d
    double theta[MAXD]
    double ham
    double dxth[MAXD][MAXD]
    double dyth[MAXD][MAXD]
    double gxh[MAXD]
    double gyh[MAXD]
    double th_zz[MAXD][MAX2D][MAX2D]
    double h_zz[MAX2D][MAX2D]


cdef struct Params:
    int kind
    double a0, e0                      # massless particle
    double b0, r0, q0, mu              # guiding center
    int nq
    double nodes[MAXQ]
    double weights[MAXQ]


cdef int unpack_params(int kind, double[::1] raw, Params* p) except -1:
    p.kind = kind
    if kind == 2:
        p.a0 = raw[0]
        p.e0 = raw[1]
    elif kind == 3:
        p.b0 = raw[0]
        p.r0 = raw[1]
        p.q0 = raw[2]
        p.mu = raw[3]
        p.nq = (raw.shape[0] - 4) // 2
        if p.nq > MAXQ:
            raise ValueError("quadrature order exceeds compiled limit")
        for i in range(p.nq):
            p.nodes[i] = raw[4 + i]
            p.weights[i] = raw[4 + p.nq + i]
    return 0


# ---------------------------------------------------------------------------
# Model evaluations (return 0 = ok, 1 = domain error)
# ---------------------------------------------------------------------------


cdef int eval_lv(double* z, int order, Eval* ev) nogil:
    cdef double x = z[0]
    cdef double y = z[1]
    if x <= 0.0 or y <= 0.0:
        return 1
    cdef double lx = log(x)
    cdef double ly = log(y)
    ev.d = 1
    ev.theta[0] = -ly / x
    ev.ham = x + y - 2.0 * lx - ly
    if order == 0:
        return 0
    ev.dxth[0][0] = ly / (x * x)
    ev.dyth[0][0] = -1.0 / (x * y)
    ev.gxh[0] = 1.0 - 2.0 / x
    ev.gyh[0] = 1.0 - 1.0 / y
    if order < 2:
        return 0
    ev.th_zz[0][0][0] = -2.0 * ly / (x * x * x)
    ev.th_zz[0][0][1] = 1.0 / (x * x * y)
    ev.th_zz[0][1][0] = ev.th_zz[0][0][1]
    ev.th_zz[0][1][1] = 1.0 / (x * y * y)
    ev.h_zz[0][0] = 2.0 / (x * x)
    ev.h_zz[0][1] = 0.0
    ev.h_zz[1][0] = 0.0
    ev.h_zz[1][1] = 1.0 / (y * y)
    return 0


cdef int eval_mcp(double a0, double e0, double* z, int order, Eval* ev) nogil:
    cdef double x = z[0]
    cdef double y = z[1]
    ev.d = 1
    ev.theta[0] = -a0 * y * (1.0 + 2.0 * x * x + (2.0 / 3.0) * y * y)
    ev.ham = e0 * (2.0 - cos(x) - sin(y))
    if order == 0:
        return 0
    ev.dxth[0][0] = -4.0 * a0 * x * y
    ev.dyth[0][0] = -a0 * (1.0 + 2.0 * x * x + 2.0 * y * y)
    ev.gxh[0] = e0 * sin(x)
    ev.gyh[0] = -e0 * cos(y)
    if order < 2:
        return 0
    ev.th_zz[0][0][0] = -4.0 * a0 * y
    ev.th_zz[0][0][1] = -4.0 * a0 * x
    ev.th_zz[0][1][0] = -4.0 * a0 * x
    ev.th_zz[0][1][1] = -4.0 * a0 * y
    ev.h_zz[0][0] = e0 * cos(x)
    ev.h_zz[0][1] = 0.0
    ev.h_zz[1][0] = 0.0
    ev.h_zz[1][1] = e0 * sin(y)
    return 0


cdef int eval_gc(Params* p, double* z, int order, Eval* ev) nogil:
    # z = (theta, phi, r, u); x = (theta, phi), y = (r, u).
    cdef double th = z[0]
    cdef double r = z[2]
    cdef double u = z[3]
    cdef double b0 = p.b0, r0 = p.r0, q0 = p.q0, mu = p.mu
    cdef double c = cos(th)
    cdef double s = sin(th)
    cdef double rho = r * c / r0
    cdef double bz = r * s / r0
    cdef double one = 1.0 + rho
    if one <= 0.0:
        return 1

    # Poloidal-potential integrals I1, I2, I3 on [0, 1].
    cdef double i1, i2, i3, lp, sv, t, den
    cdef int k
    if fabs(c) < BRANCH_SWITCH or rho == 0.0:
        i1 = 0.0
        i2 = 0.0
        i3 = 0.0
        for k in range(p.nq):
            t = p.nodes[k]
            den = 1.0 + rho * t
            i1 += p.weights[k] * t / den
            i2 += p.weights[k] * t * t / (den * den)
            i3 += p.weights[k] * t * t * t / (den * den * den)
    else:
        lp = log1p(rho)
        sv = one
        i1 = (rho - lp) / (rho * rho)
        i2 = (sv - 1.0 / sv - 2.0 * lp) / (rho * rho * rho)
        i3 = (sv - 3.0 * lp - 3.0 / sv + 0.5 / (sv * sv) + 1.5) / (rho * rho * rho * rho)

    cdef double a = b0 * r * r * i1
    cdef double a_t = b0 * r * r * bz * i2
    cdef double a_tt = b0 * r * r * (rho * i2 + 2.0 * bz * bz * i3)
    cdef double a_r = b0 * r / one
    cdef double a_rr = b0 / (one * one)
    cdef double a_rt = b0 * r * bz / (one * one)

    # Field magnitude derivatives.
    cdef double av = 1.0 / (q0 * r0)
    cdef double rt = r * av
    cdef double g = sqrt(1.0 + rt * rt)
    cdef double g_r = rt * av / g
    cdef double g_rr = av * av / (g * g * g)
    cdef double b = b0 * g / one
    cdef double b_r = b0 * (g_r / one - g * (c / r0) / (one * one))
    cdef double b_t = b0 * g * bz / (one * one)
    cdef double b_rr = b0 * (
        g_rr / one - 2.0 * g_r * (c / r0) / (one * one)
        + 2.0 * g * (c / r0) * (c / r0) / (one * one * one)
    )
    cdef double b_rt = b0 * (
        g_r * bz / (one * one) + g * (s / r0) / (one * one)
        - 2.0 * g * bz * (c / r0) / (one * one * one)
    )
    cdef double b_tt = b0 * g * (rho / (one * one) + 2.0 * bz * bz / (one * one * one))

    cdef double big_r = r0 + r * c
    ev.d = 2
    ev.theta[0] = a
    ev.theta[1] = -b0 * r * r / (2.0 * q0) + u * big_r
    ev.ham = 0.5 * u * u + mu * b
    if order == 0:
        return 0
    ev.dxth[0][0] = a_t
    ev.dxth[0][1] = 0.0
    ev.dxth[1][0] = -u * r * s
    ev.dxth[1][1] = 0.0
    ev.dyth[0][0] = a_r
    ev.dyth[0][1] = 0.0
    ev.dyth[1][0] = -b0 * r / q0 + u * c
    ev.dyth[1][1] = big_r
    ev.gxh[0] = mu * b_t
    ev.gxh[1] = 0.0
    ev.gyh[0] = mu * b_r
    ev.gyh[1] = u
    if order < 2:
        return 0
    cdef int i, j
    for i in range(MAX2D):
        for j in range(MAX2D):
            ev.th_zz[0][i][j] = 0.0
            ev.th_zz[1][i][j] = 0.0
            ev.h_zz[i][j] = 0.0
    # theta component 1: A_theta(r, theta); z-order (theta, phi, r, u).
    ev.th_zz[0][0][0] = a_tt
    ev.th_zz[0][0][2] = a_rt
    ev.th_zz[0][2][0] = a_rt
    ev.th_zz[0][2][2] = a_rr
    # theta component 2: A_phi(r) + u (R0 + r cos theta).
    ev.th_zz[1][0][0] = -u * r * c
    ev.th_zz[1][0][2] = -u * s
    ev.th_zz[1][2][0] = -u * s
    ev.th_zz[1][0][3] = -r * s
    ev.th_zz[1][3][0] = -r * s
    ev.th_zz[1][2][2] = -b0 / q0
    ev.th_zz[1][2][3] = c
    ev.th_zz[1][3][2] = c
    ev.h_zz[0][0] = mu * b_tt
    ev.h_zz[0][2] = mu * b_rt
    ev.h_zz[2][0] = mu * b_rt
    ev.h_zz[2][2] = mu * b_rr
    ev.h_zz[3][3] = 1.0
    return 0


cdef int eval_model(Params* p, double* z, int order, Eval* ev) nogil:
    if p.kind == 1:
        return eval_lv(z, order, ev)
    if p.kind == 2:
        return eval_mcp(p.a0, p.e0, z, order, ev)
    return eval_gc(p, z, order, ev)


cdef int model_dim(int kind) nogil:
    return 2 if kind == 3 else 1


# ---------------------------------------------------------------------------
# Dense linear algebra for n <= 4 (partial pivoting)
# ---------------------------------------------------------------------------


cdef int lin_solve(int n, double* a, double* b, double* x) nogil:
    """Solve a (row-major n x n) system in place on local copies."""
    cdef double m[MAX2D][MAX2D]
    cdef double rhs[MAX2D]
    cdef int i, j, k, piv
    cdef double best, factor, tmp
    for i in range(n):
        rhs[i] = b[i]
        for j in range(n):
            m[i][j] = a[i * n + j]
    for k in range(n):
        piv = k
        best = fabs(m[k][k])
        for i in range(k + 1, n):
            if fabs(m[i][k]) > best:
                best = fabs(m[i][k])
                piv = i
        if best == 0.0 or not isfinite(best):
            return 1
        if piv != k:
            for j in range(n):
                tmp = m[k][j]
                m[k][j] = m[piv][j]
                m[piv][j] = tmp
            tmp = rhs[k]
            rhs[k] = rhs[piv]
            rhs[piv] = tmp
        for i in range(k + 1, n):
            factor = m[i][k] / m[k][k]
            m[i][k] = 0.0
            for j in range(k + 1, n):
                m[i][j] -= factor * m[k][j]
            rhs[i] -= factor * rhs[k]
    for i in range(n - 1, -1, -1):
        tmp = rhs[i]
        for j in range(i + 1, n):
            tmp -= m[i][j] * x[j]
        x[i] = tmp / m[i][i]
        if not isfinite(x[i]):
            return 1
    return 0


cdef int vector_field_c(Params* p, double* z, double* out, Eval* ev) nogil:
    """zdot from W zdot = grad H via the block solve; 0 = ok."""
    cdef int d, i, j
    cdef double at[MAXD * MAXD]
    cdef double rhs[MAXD]
    cdef double xdot[MAXD]
    cdef double ydot[MAXD]
    if eval_model(p, z, 1, ev) != 0:
        return 1
    d = ev.d
    # xdot: Dy theta^T xdot = grad_y H
    for i in range(d):
        for j in range(d):
            at[i * d + j] = ev.dyth[j][i]
        rhs[i] = ev.gyh[i]
    if lin_solve(d, at, rhs, xdot) != 0:
        return 1
    # ydot: Dy theta ydot = (Dx theta^T - Dx theta) xdot - grad_x H
    for i in range(d):
        rhs[i] = -ev.gxh[i]
        for j in range(d):
            rhs[i] += (ev.dxth[j][i] - ev.dxth[i][j]) * xdot[j]
        for j in range(d):
            at[i * d + j] = ev.dyth[i][j]
    if lin_solve(d, at, rhs, ydot) != 0:
        return 1
    for i in range(d):
        out[i] = xdot[i]
        out[d + i] = ydot[i]
    return 0


# ---------------------------------------------------------------------------
# DVI residual / Jacobian / Newton step
# ---------------------------------------------------------------------------


cdef int dvi_residual_c(Params* p, double* x_prev, Eval* ev1, double* z1,
                        double* z2, double h, double* s, Eval* ev2) nogil:
    """Scheme residual on (x_prev, z1, z2); ev1 is the cached z1 evaluation."""
    cdef int d = ev1.d
    cdef int i, j
    if eval_model(p, z2, 1, ev2) != 0:
        return 1
    for i in range(d):
        s[i] = ev2.theta[i] - ev1.theta[i] + h * ev1.gxh[i]
        for j in range(d):
            s[i] -= ev1.dxth[j][i] * (z1[j] - x_prev[j])
    for i in range(d):
        s[d + i] = -h * ev2.gyh[i]
        for j in range(d):
            s[d + i] += ev2.dyth[j][i] * (z2[j] - z1[j])
    return 0


cdef int dvi_jacobian_c(Params* p, double* z1, double* z2, double h,
                        double* jac, Eval* ev2) nogil:
    """d residual / d z2, needing second derivatives at z2."""
    cdef int d = model_dim(p.kind)
    cdef int n = 2 * d
    cdef int i, j, k
    cdef double acc
    if eval_model(p, z2, 2, ev2) != 0:
        return 1
    for i in range(d):
        for j in range(d):
            jac[i * n + j] = ev2.dxth[i][j]
            jac[i * n + d + j] = ev2.dyth[i][j]
    for i in range(d):
        for j in range(n):
            acc = 0.0
            for k in range(d):
                acc += ev2.th_zz[k][d + i][j] * (z2[k] - z1[k])
            acc -= h * ev2.h_zz[d + i][j]
            if j < d:
                acc += ev2.dyth[j][i]
            jac[(d + i) * n + j] = acc
    return 0


cdef double sup_norm(int n, double* v) nogil:
    cdef double out = 0.0
    cdef int i
    for i in range(n):
        if fabs(v[i]) > out:
            out = fabs(v[i])
    return out


cdef int dvi_step_c(Params* p, double* x_prev, double* z1, double h,
                    double abs_tol, int max_iter, double damping,
                    double* z2_out, int* iters_out, double* res_out) nogil:
    """One damped-Newton DVI step; 0 = converged, 1 = diverged."""
    cdef int d = model_dim(p.kind)
    cdef int n = 2 * d
    cdef Eval ev1, ev2
    cdef double f[MAX2D]
    cdef double z2[MAX2D]
    cdef double cand[MAX2D]
    cdef double best[MAX2D]
    cdef double s[MAX2D]
    cdef double s_cand[MAX2D]
    cdef double delta[MAX2D]
    cdef double jac[MAX2D * MAX2D]
    cdef double res_norm, cand_norm, best_norm, lam
    cdef int i, iters, ls, have_best

    if eval_model(p, z1, 1, &ev1) != 0:
        return 1
    if vector_field_c(p, z1, f, &ev2) != 0:
        return 1
    for i in range(n):
        z2[i] = z1[i] + h * f[i]
    if dvi_residual_c(p, x_prev, &ev1, z1, z2, h, s, &ev2) != 0:
        return 1
    res_norm = sup_norm(n, s)
    iters = 0
    while res_norm > abs_tol:
        if iters >= max_iter:
            res_out[0] = res_norm
            return 1
        if dvi_jacobian_c(p, z1, z2, h, jac, &ev2) != 0:
            return 1
        if lin_solve(n, jac, s, delta) != 0:
            return 1
        lam = damping
        have_best = 0
        best_norm = 0.0
        for ls in range(10):
            for i in range(n):
                cand[i] = z2[i] - lam * delta[i]
            if dvi_residual_c(p, x_prev, &ev1, z1, cand, h, s_cand, &ev2) == 0:
                cand_norm = sup_norm(n, s_cand)
                if isfinite(cand_norm):
                    if have_best == 0 or cand_norm < best_norm:
                        best_norm = cand_norm
                        for i in range(n):
                            best[i] = cand[i]
                        have_best = 1
                    if cand_norm < res_norm:
                        break
            lam *= 0.5
        if have_best == 0:
            res_out[0] = res_norm
            return 1
        for i in range(n):
            z2[i] = best[i]
        if dvi_residual_c(p, x_prev, &ev1, z1, z2, h, s, &ev2) != 0:
            return 1
        res_norm = best_norm
        iters += 1
    for i in range(n):
        z2_out[i] = z2[i]
    iters_out[0] = iters
    res_out[0] = res_norm
    return 0


# ---------------------------------------------------------------------------
# Public wrappers
# ---------------------------------------------------------------------------


def evaluate(int kind, double[::1] params, double[::1] z, int order):
    """Full evaluation as numpy pieces (parity testing hook)."""
    cdef Params p
    unpack_params(kind, params, &p)
    cdef Eval ev
    cdef double zb[MAX2D]
    cdef int n = z.shape[0]
    for i in range(n):
        zb[i] = z[i]
    if eval_model(&p, zb, order, &ev) != 0:
        raise ValueError("domain error in compiled evaluation")
    d = ev.d
    theta = np.array([ev.theta[i] for i in range(d)])
    if order == 0:
        return theta, ev.ham, None, None, None, None, None, None
    dxth = np.array([[ev.dxth[i][j] for j in range(d)] for i in range(d)])
    dyth = np.array([[ev.dyth[i][j] for j in range(d)] for i in range(d)])
    gxh = np.array([ev.gxh[i] for i in range(d)])
    gyh = np.array([ev.gyh[i] for i in range(d)])
    if order < 2:
        return theta, ev.ham, dxth, dyth, gxh, gyh, None, None
    th_zz = np.array(
        [[[ev.th_zz[k][i][j] for j in range(2 * d)] for i in range(2 * d)] for k in range(d)]
    )
    h_zz = np.array([[ev.h_zz[i][j] for j in range(2 * d)] for i in range(2 * d)])
    return theta, ev.ham, dxth, dyth, gxh, gyh, th_zz, h_zz


def trajectory(int kind, double[::1] params, double[::1] z0, double h, long n_steps,
               int scheme_code, double abs_tol, int max_iter, double damping,
               long record_every):
    """RK4 (scheme 0) or DVI (scheme 1) composition with diagnostics."""
    cdef Params p
    unpack_params(kind, params, &p)
    cdef int d = model_dim(kind)
    cdef int n = 2 * d
    cdef long n_rec = n_steps // record_every + (1 if n_steps % record_every else 0)
    times = np.zeros(n_rec + 1)
    states = np.zeros((n_rec + 1, n))
    energies = np.full(n_rec + 1, np.nan)
    iters_arr = np.zeros(n_rec + 1, dtype=np.int64)
    residuals = np.zeros(n_rec + 1)
    cdef double[::1] times_v = times
    cdef double[:, ::1] states_v = states
    cdef double[::1] energies_v = energies
    cdef long[::1] iters_v = iters_arr
    cdef double[::1] resid_v = residuals

    cdef Eval ev, scratch
    cdef double z[MAX2D]
    cdef double z_new[MAX2D]
    cdef double x_prev[MAXD]
    cdef double k1[MAX2D]
    cdef double k2[MAX2D]
    cdef double k3[MAX2D]
    cdef double k4[MAX2D]
    cdef double stage[MAX2D]
    cdef double at[MAXD * MAXD]
    cdef double rhs[MAXD]
    cdef double sol[MAXD]
    cdef double res_val
    cdef int it_val, ok, diverged = 0
    cdef long step, rec = 0
    cdef int i, j

    for i in range(n):
        z[i] = z0[i]
    times_v[0] = 0.0
    for i in range(n):
        states_v[0, i] = z[i]
    if eval_model(&p, z, 0, &ev) == 0:
        energies_v[0] = ev.ham

    if scheme_code == 1:
        # bootstrap x_{-1} = x0 - h Dy theta^-T grad_y H
        if eval_model(&p, z, 1, &ev) != 0:
            diverged = 1
        else:
            for i in range(d):
                for j in range(d):
                    at[i * d + j] = ev.dyth[j][i]
                rhs[i] = ev.gyh[i]
            if lin_solve(d, at, rhs, sol) != 0:
                diverged = 1
            else:
                for i in range(d):
                    x_prev[i] = z[i] - h * sol[i]

    step = 0
    while step < n_steps and diverged == 0:
        step += 1
        if scheme_code == 1:
            ok = dvi_step_c(&p, x_prev, z, h, abs_tol, max_iter, damping,
                            z_new, &it_val, &res_val)
            if ok != 0:
                diverged = 1
                break
            for i in range(d):
                x_prev[i] = z[i]
            for i in range(n):
                z[i] = z_new[i]
        else:
            it_val = 0
            res_val = 0.0
            if vector_field_c(&p, z, k1, &scratch) != 0:
                diverged = 1
                break
            for i in range(n):
                stage[i] = z[i] + 0.5 * h * k1[i]
            if vector_field_c(&p, stage, k2, &scratch) != 0:
                diverged = 1
                break
            for i in range(n):
                stage[i] = z[i] + 0.5 * h * k2[i]
            if vector_field_c(&p, stage, k3, &scratch) != 0:
                diverged = 1
                break
            for i in range(n):
                stage[i] = z[i] + h * k3[i]
            if vector_field_c(&p, stage, k4, &scratch) != 0:
                diverged = 1
                break
            for i in range(n):
                z[i] = z[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            for i in range(n):
                if not isfinite(z[i]):
                    diverged = 1
                    break
            if diverged:
                break
        if step % record_every == 0 or step == n_steps:
            rec += 1
            times_v[rec] = step * h
            for i in range(n):
                states_v[rec, i] = z[i]
            if eval_model(&p, z, 0, &ev) == 0:
                energies_v[rec] = ev.ham
            iters_v[rec] = it_val
            resid_v[rec] = res_val

    total = rec + 1
    return (
        times[:total],
        states[:total],
        energies[:total],
        iters_arr[:total],
        residuals[:total],
        diverged,
    )


def dopri(int kind, double[::1] params, double[::1] z0, double t0, double t1,
          double[::1] t_eval, int has_eval, double rtol, double atol,
          long max_steps):
    """Adaptive Dormand-Prince 5(4); same controller as the Python path."""
    cdef Params p
    unpack_params(kind, params, &p)
    cdef int n = 2 * model_dim(kind)
    cdef Eval scratch, ev

    # Butcher tableau
    cdef double a2[1]
    cdef double a3[2]
    cdef double a4[3]
    cdef double a5[4]
    cdef double a6[5]
    cdef double a7[6]
    a2[0] = 1.0 / 5.0
    a3[0] = 3.0 / 40.0; a3[1] = 9.0 / 40.0
    a4[0] = 44.0 / 45.0; a4[1] = -56.0 / 15.0; a4[2] = 32.0 / 9.0
    a5[0] = 19372.0 / 6561.0; a5[1] = -25360.0 / 2187.0
    a5[2] = 64448.0 / 6561.0; a5[3] = -212.0 / 729.0
    a6[0] = 9017.0 / 3168.0; a6[1] = -355.0 / 33.0; a6[2] = 46732.0 / 5247.0
    a6[3] = 49.0 / 176.0; a6[4] = -5103.0 / 18656.0
    a7[0] = 35.0 / 384.0; a7[1] = 0.0; a7[2] = 500.0 / 1113.0
    a7[3] = 125.0 / 192.0; a7[4] = -2187.0 / 6784.0; a7[5] = 11.0 / 84.0
    cdef double err_c[7]
    err_c[0] = 71.0 / 57600.0; err_c[1] = 0.0; err_c[2] = -71.0 / 16695.0
    err_c[3] = 71.0 / 1920.0; err_c[4] = -17253.0 / 339200.0
    err_c[5] = 22.0 / 525.0; err_c[6] = -1.0 / 40.0

    cdef double k[7][MAX2D]
    cdef double z[MAX2D]
    cdef double z_new[MAX2D]
    cdef double stage[MAX2D]
    cdef double err_vec[MAX2D]
    cdef double sc, err, d0, d1, d2, h0, h1, direction, t, h, hd, factor
    cdef double err_prev = 1e-4
    cdef long n_acc = 0, n_att = 0
    cdef int i, j, st
    cdef long next_target = 0
    cdef long n_targets = t_eval.shape[0] if has_eval else 0

    out_t = []
    out_z = []
    out_e = []

    direction = 1.0 if t1 >= t0 else -1.0
    t = t0
    for i in range(n):
        z[i] = z0[i]

    if has_eval:
        while next_target < n_targets and fabs(t_eval[next_target] - t) <= 1e-14 * max(1.0, fabs(t)):
            out_t.append(t_eval[next_target])
            out_z.append(np.array([z[i] for i in range(n)]))
            out_e.append(ev.ham if eval_model(&p, z, 0, &ev) == 0 else np.nan)
            next_target += 1
    else:
        out_t.append(t)
        out_z.append(np.array([z[i] for i in range(n)]))
        out_e.append(ev.ham if eval_model(&p, z, 0, &ev) == 0 else np.nan)

    # Starting step (same heuristic as the Python implementation).
    if vector_field_c(&p, z, k[0], &scratch) != 0:
        raise ValueError("vector field not evaluable at the initial state")
    d0 = 0.0
    d1 = 0.0
    for i in range(n):
        sc = atol + rtol * fabs(z[i])
        d0 += (z[i] / sc) ** 2
        d1 += (k[0][i] / sc) ** 2
    d0 = sqrt(d0 / n)
    d1 = sqrt(d1 / n)
    h0 = 1e-6 if (d0 < 1e-5 or d1 < 1e-5) else 0.01 * d0 / d1
    for i in range(n):
        stage[i] = z[i] + direction * h0 * k[0][i]
    if vector_field_c(&p, stage, k[1], &scratch) != 0:
        raise ValueError("vector field not evaluable near the initial state")
    d2 = 0.0
    for i in range(n):
        sc = atol + rtol * fabs(z[i])
        d2 += ((k[1][i] - k[0][i]) / sc) ** 2
    d2 = sqrt(d2 / n) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = pow(0.01 / max(d1, d2), 0.2)
    h = min(100.0 * h0, h1)
    h = min(h, fabs(t1 - t0))

    while direction * (t1 - t) > 1e-14 * max(1.0, fabs(t)):
        n_att += 1
        if n_att > max_steps:
            raise RuntimeError("maximum number of adaptive steps exceeded")
        h = min(h, fabs(t1 - t))
        if has_eval and next_target < n_targets:
            h = min(h, fabs(t_eval[next_target] - t))
        if h <= 16.0 * 2.220446049250313e-16 * max(1.0, fabs(t)):
            raise RuntimeError("step size underflow")
        hd = direction * h

        ok = 0
        for st in range(1, 7):
            for i in range(n):
                stage[i] = z[i]
            if st == 1:
                for i in range(n):
                    stage[i] += hd * a2[0] * k[0][i]
            elif st == 2:
                for i in range(n):
                    stage[i] += hd * (a3[0] * k[0][i] + a3[1] * k[1][i])
            elif st == 3:
                for i in range(n):
                    stage[i] += hd * (a4[0] * k[0][i] + a4[1] * k[1][i] + a4[2] * k[2][i])
            elif st == 4:
                for i in range(n):
                    stage[i] += hd * (a5[0] * k[0][i] + a5[1] * k[1][i]
                                      + a5[2] * k[2][i] + a5[3] * k[3][i])
            elif st == 5:
                for i in range(n):
                    stage[i] += hd * (a6[0] * k[0][i] + a6[1] * k[1][i] + a6[2] * k[2][i]
                                      + a6[3] * k[3][i] + a6[4] * k[4][i])
            else:
                for i in range(n):
                    stage[i] += hd * (a7[0] * k[0][i] + a7[1] * k[1][i] + a7[2] * k[2][i]
                                      + a7[3] * k[3][i] + a7[4] * k[4][i] + a7[5] * k[5][i])
            if vector_field_c(&p, stage, k[st], &scratch) != 0:
                ok = 1
                break
        if ok != 0:
            h *= 0.25
            continue
        for i in range(n):
            z_new[i] = stage[i]  # stage 7 argument equals the 5th-order solution
            err_vec[i] = 0.0
            for st in range(7):
                err_vec[i] += err_c[st] * k[st][i]
            err_vec[i] *= hd

        err = 0.0
        for i in range(n):
            sc = atol + rtol * max(fabs(z[i]), fabs(z_new[i]))
            err += (err_vec[i] / sc) ** 2
        err = sqrt(err / n)

        if not isfinite(err):
            h *= 0.25
            continue
        if err <= 1.0:
            t += hd
            for i in range(n):
                z[i] = z_new[i]
            for i in range(n):
                k[0][i] = k[6][i]  # FSAL
            if has_eval:
                while next_target < n_targets and fabs(t_eval[next_target] - t) <= 1e-12 * max(1.0, fabs(t)):
                    out_t.append(t_eval[next_target])
                    out_z.append(np.array([z[i] for i in range(n)]))
                    out_e.append(ev.ham if eval_model(&p, z, 0, &ev) == 0 else np.nan)
                    next_target += 1
            else:
                out_t.append(t)
                out_z.append(np.array([z[i] for i in range(n)]))
                out_e.append(ev.ham if eval_model(&p, z, 0, &ev) == 0 else np.nan)
            factor = 10.0 if err == 0.0 else 0.9 * pow(err, -0.17) * pow(err_prev, 0.04)
            err_prev = max(err, 1e-10)
            h *= min(10.0, max(0.2, factor))
        else:
            h *= max(0.2, 0.9 * pow(err, -0.2))

    return np.asarray(out_t), np.asarray(out_z), np.asarray(out_e)
