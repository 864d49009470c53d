# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled closed-loop arm integrator; mirrors ``_kernels_py.simulate_arm``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport sin, cos, isfinite

cnp.import_array()

DEF FREE = 0
DEF GRASPED = 1
DEF RELEASED = 2


def simulate_arm(double[:, ::1] q_des, q0, qd0, inertia, damping, kp, kd, q_lo, q_hi,
                 double tool_mass, double gravity, double gc_fidelity, double dt,
                 rc, obj, double capture_radius, double required, double release_margin):
    cdef Py_ssize_t n = q_des.shape[0]
    cdef Py_ssize_t k, j
    cdef double q[4]
    cdef double qd[4]
    cdef double M[4]
    cdef double B[4]
    cdef double KP[4]
    cdef double KD[4]
    cdef double lo[4]
    cdef double hi[4]
    cdef double G[4]
    for j in range(4):
        q[j] = q0[j]
        qd[j] = qd0[j]
        M[j] = inertia[j]
        B[j] = damping[j]
        KP[j] = kp[j]
        KD[j] = kd[j]
        lo[j] = q_lo[j]
        hi[j] = q_hi[j]
        G[j] = 0.0
    cdef double rcx = rc[0], rcy = rc[1], rcz = rc[2]
    cdef double ox = obj[0], oy = obj[1], oz = obj[2]
    cdef double mg = tool_mass * gravity
    cdef double r2 = capture_radius * capture_radius
    cdef int state = FREE
    cdef double offx = 0.0, offy = 0.0, offz = 0.0
    cdef Py_ssize_t contact_tick = -1, release_tick = -1, fault_tick = -1
    cdef double s1, c1, s2, c2, tx, ty, tz, dx, dy, dz, tau, acc, prev_grip

    q_arr = np.empty((n, 4))
    qd_arr = np.empty((n, 4))
    obj_arr = np.empty((n, 3))
    cdef double[:, ::1] q_out = q_arr
    cdef double[:, ::1] qd_out = qd_arr
    cdef double[:, ::1] obj_out = obj_arr

    for k in range(n):
        s2 = sin(q[1])
        c2 = cos(q[1])
        G[1] = mg * q[2] * s2
        G[2] = -mg * c2
        prev_grip = q[3]
        for j in range(4):
            tau = KP[j] * (q_des[k, j] - q[j]) - KD[j] * qd[j] + gc_fidelity * G[j]
            if not isfinite(tau):
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
            return q_arr[:k], qd_arr[:k], obj_arr[:k], contact_tick, release_tick, fault_tick
        s1 = sin(q[0])
        c1 = cos(q[0])
        s2 = sin(q[1])
        c2 = cos(q[1])
        tx = rcx + q[2] * s2 * c1
        ty = rcy + q[2] * s2 * s1
        tz = rcz - q[2] * c2
        if state == FREE:
            if q[3] < required and required <= prev_grip:
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
        for j in range(4):
            q_out[k, j] = q[j]
            qd_out[k, j] = qd[j]
        obj_out[k, 0] = ox
        obj_out[k, 1] = oy
        obj_out[k, 2] = oz
    return q_arr, qd_arr, obj_arr, contact_tick, release_tick, fault_tick
