"""Pure-Python closed-loop arm integrator (fallback for ``_kernels.pyx``).

Keep the arithmetic here in the same order as the Cython version: the two
backends are compared for exact agreement in the test suite.
"""
import math

import numpy as np

FREE, GRASPED, RELEASED = 0, 1, 2


def simulate_arm(q_des, q0, qd0, inertia, damping, kp, kd, q_lo, q_hi,
                 tool_mass, gravity, gc_fidelity, dt,
                 rc, obj, capture_radius, required, release_margin):
    """Run PD control + plant integration over a whole desired-joint stream.

    Returns ``(q, qd, obj_path, contact_tick, release_tick, fault_tick)``;
    ticks are ``-1`` when the event never happens.
    """
    n = q_des.shape[0]
    q_out = np.empty((n, 4))
    qd_out = np.empty((n, 4))
    obj_out = np.empty((n, 3))
    qdes = q_des.tolist()
    q = [float(v) for v in q0]
    qd = [float(v) for v in qd0]
    M = [float(v) for v in inertia]
    B = [float(v) for v in damping]
    KP = [float(v) for v in kp]
    KD = [float(v) for v in kd]
    lo = [float(v) for v in q_lo]
    hi = [float(v) for v in q_hi]
    rcx, rcy, rcz = (float(v) for v in rc)
    ox, oy, oz = (float(v) for v in obj)
    mg = tool_mass * gravity
    r2 = capture_radius * capture_radius
    state = FREE
    offx = offy = offz = 0.0
    contact_tick = release_tick = fault_tick = -1
    G = [0.0, 0.0, 0.0, 0.0]
    for k in range(n):
        qk = qdes[k]
        s2 = math.sin(q[1])
        c2 = math.cos(q[1])
        G[1] = mg * q[2] * s2
        G[2] = -mg * c2
        prev_grip = q[3]
        for j in range(4):
            tau = KP[j] * (qk[j] - q[j]) - KD[j] * qd[j] + gc_fidelity * G[j]
            if not math.isfinite(tau):
                fault_tick = k
                break
            acc = (tau - B[j] * qd[j] - G[j]) / M[j]
            qd[j] = qd[j] + dt * acc
            q[j] = q[j] + dt * qd[j]
            if q[j] < lo[j]:
                q[j] = lo[j]
                qd[j] = 0.0
            elif q[j] > hi[j]:
                q[j] = hi[j]
                qd[j] = 0.0
        if fault_tick >= 0:
            q_out = q_out[:k]
            qd_out = qd_out[:k]
            obj_out = obj_out[:k]
            break
        s1 = math.sin(q[0])
        c1 = math.cos(q[0])
        s2 = math.sin(q[1])
        c2 = math.cos(q[1])
        tx = rcx + q[2] * s2 * c1
        ty = rcy + q[2] * s2 * s1
        tz = rcz - q[2] * c2
        if state == FREE:
            if q[3] < required <= prev_grip:
                dx = tx - ox
                dy = ty - oy
                dz = tz - oz
                if dx * dx + dy * dy + dz * dz <= r2:
                    q[3] = required
                    qd[3] = 0.0
                    state = GRASPED
                    contact_tick = k
                    offx = ox - tx
                    offy = oy - ty
                    offz = oz - tz
        elif state == GRASPED:
            if q[3] < required:
                q[3] = required
                if qd[3] < 0.0:
                    qd[3] = 0.0
            elif q[3] > required + release_margin:
                state = RELEASED
                release_tick = k
        if state == GRASPED:
            ox = tx + offx
            oy = ty + offy
            oz = tz + offz
        q_out[k, 0] = q[0]
        q_out[k, 1] = q[1]
        q_out[k, 2] = q[2]
        q_out[k, 3] = q[3]
        qd_out[k, 0] = qd[0]
        qd_out[k, 1] = qd[1]
        qd_out[k, 2] = qd[2]
        qd_out[k, 3] = qd[3]
        obj_out[k, 0] = ox
        obj_out[k, 1] = oy
        obj_out[k, 2] = oz
    return q_out, qd_out, obj_out, contact_tick, release_tick, fault_tick
