"""Compiled RK4 kernels for the transmission model.

The vector field here is kept in lockstep with model.rhs_controlled; the
forward sweep adds per-substep negativity clamping and an optional automatic
substep count sized from a conservative bound on the fastest per-capita loss
rate (classical RK4 is stable up to rate * h of about 2.785 on the stiff
linear part, so the sizing uses a safety value well below that). Kernels
return status codes instead of raising to stay nopython-compatible;
simulate.py converts them to IntegrationError.

Controls arrive as an array U of shape (n+1, 3+m) holding node values of
[u_a, u_s, u_k, u_m1..u_mm]; inside a step the kernels interpolate linearly
between the two surrounding nodes.
"""

from __future__ import annotations

import numpy as np
from numba import njit

STATUS_OK = 0
STATUS_NEGATIVE = 1
STATUS_NONFINITE = 2


@njit(cache=True, nogil=True)
def rhs_fill(x, sp, al, mu, th, ga, be, om, ua, us, uk, um, dx):
    """Controlled vector field into dx; sp packs the snail/free-stage rates.

    sp layout: [alpha_s, mu_s, kappa_s, gamma_s, beta_s, omega_s, nu_s,
    mu_e, mu_l].
    """
    m = al.size
    alpha_s, mu_s, kappa_s, gamma_s = sp[0], sp[1], sp[2], sp[3]
    beta_s, omega_s, nu_s, mu_e, mu_l = sp[4], sp[5], sp[6], sp[7], sp[8]
    E, Ss, Si, L = x[0], x[1], x[2], x[3]
    S = Ss + Si
    egg_in = 0.0
    graze = 0.0
    for j in range(m):
        egg_in += th[j] * x[5 + 2 * j]
        graze += om[j] * x[4 + 2 * j]
    cap = kappa_s / uk
    dx[0] = egg_in - omega_s * Ss * E - mu_e * E - ua * E
    dx[1] = (-omega_s * beta_s * Ss * E
             + alpha_s * S * (1.0 - S / cap) - mu_s * Ss - us * Ss)
    dx[2] = omega_s * beta_s * Ss * E - (mu_s + gamma_s) * Si - us * Si
    dx[3] = nu_s * Si - graze * L - mu_l * L - ua * L
    for j in range(m):
        Ms = x[4 + 2 * j]
        Mi = x[5 + 2 * j]
        inf = om[j] * be[j] * L * Ms
        dx[4 + 2 * j] = -inf + al[j] - mu[j] * Ms
        dx[5 + 2 * j] = inf - (mu[j] + ga[j]) * Mi - um[j] * Mi


@njit(cache=True, nogil=True)
def rate_bound(x, sp, al, mu, ga, be, om, ua, us, uk, um):
    """Upper bound on the fastest per-capita loss rate at this state.

    Diagonal (own-compartment) loss rates dominate the stiffness of the
    system, so the bound scans them row by row; the logistic term contributes
    at most alpha_s (1 + 2 uk S / kappa_s).
    """
    m = al.size
    E, Ss, Si, L = x[0], x[1], x[2], x[3]
    S = Ss + Si
    r = sp[5] * Ss + sp[7] + ua
    r2 = sp[5] * sp[4] * E + sp[0] * (1.0 + 2.0 * uk * S / sp[2]) + sp[1] + us
    if r2 > r:
        r = r2
    r3 = sp[1] + sp[3] + us
    if r3 > r:
        r = r3
    graze = 0.0
    for j in range(m):
        graze += om[j] * x[4 + 2 * j]
    r4 = graze + sp[8] + ua
    if r4 > r:
        r = r4
    for j in range(m):
        r5 = om[j] * be[j] * L + mu[j] + ga[j] + um[j]
        if r5 > r:
            r = r5
    return r


@njit(cache=True, nogil=True)
def forward_model(x0, dt, n, sp, al, mu, th, ga, be, om, U, eps, nsub_fixed,
                  safety, out):
    """RK4 forward sweep; fills out[(n+1), dim] and returns (status, step).

    nsub_fixed >= 1 forces that substep count; otherwise each output step is
    split into ceil(dt * rate / safety) + 1 substeps using the rate bound at
    the current state under the controls at both ends of the step. Negative
    components inside the per-component band eps snap to zero; anything lower
    aborts with STATUS_NEGATIVE at the offending output step.
    """
    dim = x0.size
    m = al.size
    x = x0.copy()
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    xt = np.empty(dim)
    u0 = np.empty(m)
    uh = np.empty(m)
    u1 = np.empty(m)
    out[0, :] = x
    for k in range(n):
        if nsub_fixed >= 1:
            nsub = nsub_fixed
        else:
            r = rate_bound(x, sp, al, mu, ga, be, om,
                           U[k, 0], U[k, 1], U[k, 2], U[k, 3:])
            rb = rate_bound(x, sp, al, mu, ga, be, om,
                            U[k + 1, 0], U[k + 1, 1], U[k + 1, 2], U[k + 1, 3:])
            if rb > r:
                r = rb
            nsub = int(np.ceil(dt * r / safety)) + 1
            if nsub < 1:
                nsub = 1
        h = dt / nsub
        for s in range(nsub):
            f0 = s / nsub
            fh = (s + 0.5) / nsub
            f1 = (s + 1.0) / nsub
            ua0 = U[k, 0] * (1.0 - f0) + U[k + 1, 0] * f0
            us0 = U[k, 1] * (1.0 - f0) + U[k + 1, 1] * f0
            uk0 = U[k, 2] * (1.0 - f0) + U[k + 1, 2] * f0
            uah = U[k, 0] * (1.0 - fh) + U[k + 1, 0] * fh
            ush = U[k, 1] * (1.0 - fh) + U[k + 1, 1] * fh
            ukh = U[k, 2] * (1.0 - fh) + U[k + 1, 2] * fh
            ua1 = U[k, 0] * (1.0 - f1) + U[k + 1, 0] * f1
            us1 = U[k, 1] * (1.0 - f1) + U[k + 1, 1] * f1
            uk1 = U[k, 2] * (1.0 - f1) + U[k + 1, 2] * f1
            for j in range(m):
                u0[j] = U[k, 3 + j] * (1.0 - f0) + U[k + 1, 3 + j] * f0
                uh[j] = U[k, 3 + j] * (1.0 - fh) + U[k + 1, 3 + j] * fh
                u1[j] = U[k, 3 + j] * (1.0 - f1) + U[k + 1, 3 + j] * f1
            rhs_fill(x, sp, al, mu, th, ga, be, om, ua0, us0, uk0, u0, k1)
            for i in range(dim):
                xt[i] = x[i] + 0.5 * h * k1[i]
            rhs_fill(xt, sp, al, mu, th, ga, be, om, uah, ush, ukh, uh, k2)
            for i in range(dim):
                xt[i] = x[i] + 0.5 * h * k2[i]
            rhs_fill(xt, sp, al, mu, th, ga, be, om, uah, ush, ukh, uh, k3)
            for i in range(dim):
                xt[i] = x[i] + h * k3[i]
            rhs_fill(xt, sp, al, mu, th, ga, be, om, ua1, us1, uk1, u1, k4)
            for i in range(dim):
                x[i] = x[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
                if x[i] < 0.0:
                    if x[i] >= -eps[i]:
                        x[i] = 0.0
                    else:
                        return STATUS_NEGATIVE, k
        for i in range(dim):
            if not np.isfinite(x[i]):
                return STATUS_NONFINITE, k
        out[k + 1, :] = x
    return STATUS_OK, -1


@njit(cache=True, nogil=True)
def adjoint_fill(lam, x, sp, al, mu, th, ga, be, om, ctrl, ua, us, uk, um, dl):
    """Costate vector field into dl (the negative state gradient of the
    control Hamiltonian).  ctrl holds 1.0 for controlled species, else 0.0;
    controlled infected-mammal compartments carry the running-cost seed -1.
    """
    m = al.size
    alpha_s, mu_s, kappa_s, gamma_s = sp[0], sp[1], sp[2], sp[3]
    beta_s, omega_s, nu_s, mu_e, mu_l = sp[4], sp[5], sp[6], sp[7], sp[8]
    E, Ss, Si, L = x[0], x[1], x[2], x[3]
    S = Ss + Si
    graze = 0.0
    coupling = 0.0
    for j in range(m):
        Ms = x[4 + 2 * j]
        graze += om[j] * Ms
        coupling += om[j] * be[j] * Ms * (lam[4 + 2 * j] - lam[5 + 2 * j])
    two_over_cap = 2.0 * S * uk / kappa_s
    dl[0] = ((omega_s * Ss + mu_e + ua) * lam[0]
             + omega_s * beta_s * Ss * (lam[1] - lam[2]))
    dl[1] = (omega_s * E * lam[0]
             + (omega_s * beta_s * E - alpha_s * (1.0 - two_over_cap)
                + mu_s + us) * lam[1]
             - omega_s * beta_s * E * lam[2])
    dl[2] = (alpha_s * (two_over_cap - 1.0) * lam[1]
             + (mu_s + gamma_s + us) * lam[2] - nu_s * lam[3])
    dl[3] = (graze + mu_l + ua) * lam[3] + coupling
    for j in range(m):
        dl[4 + 2 * j] = (om[j] * L * lam[3]
                         + (om[j] * be[j] * L + mu[j]) * lam[4 + 2 * j]
                         - om[j] * be[j] * L * lam[5 + 2 * j])
        dl[5 + 2 * j] = (-ctrl[j] - th[j] * lam[0]
                         + (mu[j] + ga[j] + um[j]) * lam[5 + 2 * j])


@njit(cache=True, nogil=True)
def backward_adjoint(X, U, dt, n, sp, al, mu, th, ga, be, om, ctrl,
                     nsub_fixed, safety, out):
    """RK4 backward sweep of the costate system from a zero terminal vector.

    X and U hold the forward state and control node values; inside a step
    both are sampled by linear interpolation.  Substep sizing reuses the
    forward rate bound: the costate diagonal decay rates are exactly the
    forward per-capita loss rates.  Fills out[(n+1), dim] in forward time
    order and returns (status, step).
    """
    dim = X.shape[1]
    m = al.size
    lam = np.zeros(dim)
    k1 = np.empty(dim)
    k2 = np.empty(dim)
    k3 = np.empty(dim)
    k4 = np.empty(dim)
    lt = np.empty(dim)
    xf = np.empty(dim)
    umf = np.empty(m)
    out[n, :] = 0.0
    for k in range(n - 1, -1, -1):
        if nsub_fixed >= 1:
            nsub = nsub_fixed
        else:
            r = rate_bound(X[k], sp, al, mu, ga, be, om,
                           U[k, 0], U[k, 1], U[k, 2], U[k, 3:])
            rb = rate_bound(X[k + 1], sp, al, mu, ga, be, om,
                            U[k + 1, 0], U[k + 1, 1], U[k + 1, 2], U[k + 1, 3:])
            if rb > r:
                r = rb
            nsub = int(np.ceil(dt * r / safety)) + 1
            if nsub < 1:
                nsub = 1
        h = -dt / nsub
        for s in range(nsub):
            f1 = (nsub - s) / nsub
            fm = (nsub - s - 0.5) / nsub
            f0 = (nsub - s - 1.0) / nsub
            for i in range(dim):
                xf[i] = X[k, i] * (1.0 - f1) + X[k + 1, i] * f1
            ua = U[k, 0] * (1.0 - f1) + U[k + 1, 0] * f1
            us = U[k, 1] * (1.0 - f1) + U[k + 1, 1] * f1
            uk = U[k, 2] * (1.0 - f1) + U[k + 1, 2] * f1
            for j in range(m):
                umf[j] = U[k, 3 + j] * (1.0 - f1) + U[k + 1, 3 + j] * f1
            adjoint_fill(lam, xf, sp, al, mu, th, ga, be, om, ctrl,
                         ua, us, uk, umf, k1)
            for i in range(dim):
                xf[i] = X[k, i] * (1.0 - fm) + X[k + 1, i] * fm
                lt[i] = lam[i] + 0.5 * h * k1[i]
            ua = U[k, 0] * (1.0 - fm) + U[k + 1, 0] * fm
            us = U[k, 1] * (1.0 - fm) + U[k + 1, 1] * fm
            uk = U[k, 2] * (1.0 - fm) + U[k + 1, 2] * fm
            for j in range(m):
                umf[j] = U[k, 3 + j] * (1.0 - fm) + U[k + 1, 3 + j] * fm
            adjoint_fill(lt, xf, sp, al, mu, th, ga, be, om, ctrl,
                         ua, us, uk, umf, k2)
            for i in range(dim):
                lt[i] = lam[i] + 0.5 * h * k2[i]
            adjoint_fill(lt, xf, sp, al, mu, th, ga, be, om, ctrl,
                         ua, us, uk, umf, k3)
            for i in range(dim):
                xf[i] = X[k, i] * (1.0 - f0) + X[k + 1, i] * f0
                lt[i] = lam[i] + h * k3[i]
            ua = U[k, 0] * (1.0 - f0) + U[k + 1, 0] * f0
            us = U[k, 1] * (1.0 - f0) + U[k + 1, 1] * f0
            uk = U[k, 2] * (1.0 - f0) + U[k + 1, 2] * f0
            for j in range(m):
                umf[j] = U[k, 3 + j] * (1.0 - f0) + U[k + 1, 3 + j] * f0
            adjoint_fill(lt, xf, sp, al, mu, th, ga, be, om, ctrl,
                         ua, us, uk, umf, k4)
            for i in range(dim):
                lam[i] = lam[i] + (h / 6.0) * (k1[i] + 2.0 * k2[i]
                                               + 2.0 * k3[i] + k4[i])
        for i in range(dim):
            if not np.isfinite(lam[i]):
                return STATUS_NONFINITE, k
        out[k, :] = lam
    return STATUS_OK, -1
