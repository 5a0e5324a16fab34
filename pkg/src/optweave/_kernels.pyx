# cython: language_level=3
"""Compiled rollout kernel for the planar tracking surrogate.

Same contract and operation order as ``_kernels_py.simulate``.
"""
from libc.math cimport exp, sqrt

DEF RUNNING = 0
DEF SUCCESS = 1
DEF FAILURE = 2


def simulate(const double[:, ::1] ref_pos, const double[:, ::1] ref_vel,
             const double[:, ::1] ref_acc, const double[:, ::1] impulses,
             Py_ssize_t imp_offset, Py_ssize_t t_start, Py_ssize_t n_steps,
             int controller, double[::1] state, const double[::1] params,
             double[:, ::1] out):
    cdef Py_ssize_t L = ref_pos.shape[0]
    cdef double kp_d = params[0], kd_d = params[1], kp_c = params[2], kd_c = params[3]
    cdef double mass = params[4], a_max = params[5], dt = params[6]
    cdef double e_fail = params[7], v_fail = params[8]
    cdef double sigma_v = params[9], sigma_q = params[10]
    cdef double beta_tau = params[11], beta_delta = params[12]
    cdef double px = state[0], py = state[1], vx = state[2], vy = state[3]
    cdef double apx = state[4], apy = state[5]
    cdef double epx, epy, evx, evy, ax, ay, dax, day, npx, npy, dx, dy
    cdef Py_ssize_t i, t, k
    cdef Py_ssize_t done = 0
    cdef int status = RUNNING

    for i in range(n_steps):
        t = t_start + i
        if t >= L:
            break
        epx = ref_pos[t, 0] - px
        epy = ref_pos[t, 1] - py
        evx = ref_vel[t, 0] - vx
        evy = ref_vel[t, 1] - vy
        if controller == 0:
            ax = kp_d * epx + kd_d * evx
            ay = kp_d * epy + kd_d * evy
        else:
            ax = mass * ref_acc[t, 0] + kp_c * epx + kd_c * evx
            ay = mass * ref_acc[t, 1] + kp_c * epy + kd_c * evy
        if ax > a_max:
            ax = a_max
        elif ax < -a_max:
            ax = -a_max
        if ay > a_max:
            ay = a_max
        elif ay < -a_max:
            ay = -a_max

        dax = ax - apx
        day = ay - apy
        out[i, 0] = exp(-(evx * evx + evy * evy) / sigma_v)
        out[i, 1] = exp(-(epx * epx + epy * epy) / sigma_q)
        out[i, 2] = -beta_tau * (ax * ax + ay * ay) - beta_delta * (dax * dax + day * day)

        k = t - imp_offset
        npx = px + vx * dt
        npy = py + vy * dt
        vx = vx + (ax / mass) * dt + impulses[k, 0]
        vy = vy + (ay / mass) * dt + impulses[k, 1]
        px = npx
        py = npy
        apx = ax
        apy = ay
        done = i + 1

        if t + 1 >= L:
            status = SUCCESS
            break
        dx = px - ref_pos[t + 1, 0]
        dy = py - ref_pos[t + 1, 1]
        if sqrt(dx * dx + dy * dy) > e_fail or sqrt(vx * vx + vy * vy) > v_fail:
            status = FAILURE
            break

    state[0] = px
    state[1] = py
    state[2] = vx
    state[3] = vy
    state[4] = apx
    state[5] = apy
    return done, status
