"""Pure-Python rollout kernel.

Mirrors ``_kernels.pyx`` operation for operation so both produce the same
floating-point results. Used when the compiled extension is unavailable or
``OPTWEAVE_PURE=1`` is set.
"""
from math import exp, sqrt

RUNNING, SUCCESS, FAILURE = 0, 1, 2


def simulate(ref_pos, ref_vel, ref_acc, impulses, imp_offset, t_start, n_steps,
             controller, state, params, out):
    L = ref_pos.shape[0]
    (kp_d, kd_d, kp_c, kd_c, mass, a_max, dt, e_fail, v_fail,
     sigma_v, sigma_q, beta_tau, beta_delta) = (float(p) for p in params[:13])
    px, py, vx, vy, apx, apy = (float(s) for s in state[:6])
    rp = ref_pos.tolist()
    rv = ref_vel.tolist()
    ra = ref_acc.tolist()
    imp = impulses.tolist()

    done = 0
    status = RUNNING
    for i in range(n_steps):
        t = t_start + i
        if t >= L:
            break
        epx = rp[t][0] - px
        epy = rp[t][1] - py
        evx = rv[t][0] - vx
        evy = rv[t][1] - vy
        if controller == 0:
            ax = kp_d * epx + kd_d * evx
            ay = kp_d * epy + kd_d * evy
        else:
            ax = mass * ra[t][0] + kp_c * epx + kd_c * evx
            ay = mass * ra[t][1] + kp_c * epy + kd_c * evy
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
        vx = vx + (ax / mass) * dt + imp[k][0]
        vy = vy + (ay / mass) * dt + imp[k][1]
        px = npx
        py = npy
        apx = ax
        apy = ay
        done = i + 1

        if t + 1 >= L:
            status = SUCCESS
            break
        dx = px - rp[t + 1][0]
        dy = py - rp[t + 1][1]
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
