"""Slave-side control chain and the per-trial simulation driver.

The remote arm is a remote-centre RRP manipulator (yaw ``q1``, pitch
``q2``, insertion ``q3``) plus one gripper joint ``qg``. The tool tip sits
at ``rc + q3 * (sin q2 cos q1, sin q2 sin q1, -cos q2)``.

Per 1 ms tick: master state -> channel -> scaling map -> inverse
kinematics -> PD + gravity feed-forward -> plant. Everything up to the
desired joint angles is computed for the whole trial with numpy; the PD
loop and plant run in :mod:`teleograsp.kernels`.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .agents import REACH_DISTANCE, SubjectAgent, script_trial
from .channel import ChannelConfig, applied_schedule
from .model import Experiment, MasterLimits, ScalingConfig, StateVector, Trial, rng_from

DT = 0.001
SINGULAR_EPS = 1e-6


class UnreachableError(ValueError):
    def __init__(self, bound: str, message: str):
        super().__init__(message)
        self.bound = bound


class SimulationFault(RuntimeError):
    pass


@dataclass(frozen=True)
class ClutchRefs:
    x_local_ref: np.ndarray
    x_remote_ref: np.ndarray


def clutch_engage(master_state, slave_state) -> ClutchRefs:
    m = master_state.as_array() if isinstance(master_state, StateVector) else np.array(master_state, dtype=float)
    s = slave_state.as_array() if isinstance(slave_state, StateVector) else np.array(slave_state, dtype=float)
    return ClutchRefs(m.copy(), s.copy())


def scale_map(user_state, refs: ClutchRefs, scaling: ScalingConfig) -> np.ndarray:
    """Desired slave state: ``remote_ref + g * (user - local_ref)`` per component.

    Accepts one state ``(7,)`` or a stream ``(n, 7)``; the gripper result is
    clamped at zero.
    """
    u = user_state.as_array() if isinstance(user_state, StateVector) else np.asarray(user_state, dtype=float)
    out = refs.x_remote_ref + scaling.gains() * (u - refs.x_local_ref)
    out[..., 6] = np.maximum(out[..., 6], 0.0)
    return out


@dataclass(frozen=True)
class PDGains:
    kp: tuple = (0.3, 0.3, 0.15, 0.02)
    kd: tuple = (0.008, 0.008, 0.01, 0.0)

    def __post_init__(self):
        if any(k <= 0 for k in self.kp) or any(k < 0 for k in self.kd):
            raise ValueError("kp must be > 0 and kd >= 0")


@dataclass(frozen=True)
class ArmModel:
    """Plant parameters.

    With the default gains the three arm joints share one overdamped closed
    loop, ``(B + kd) / kp = 1/15 s`` and ``M / kp = 8e-4 s^2``. The light jaw
    is faster (poles near -29 and -170 1/s) so that the recorded aperture
    peak follows the commanded one closely.
    """

    inertia: tuple = (2.4e-4, 2.4e-4, 1.2e-4, 4e-6)
    damping: tuple = (0.012, 0.012, 0.0, 8e-4)
    tool_mass: float = 0.002  # kg at the tip
    gravity: float = 9.81
    gc_fidelity: float = 1.0
    remote_center: tuple = (0.0, 0.0, 0.0)
    q_lo: tuple = (-math.pi, 0.0, 0.03, 0.0)
    q_hi: tuple = (math.pi, 1.4, 0.25, math.pi)
    q_start: tuple = (0.0, 0.35, 0.10, 0.0)
    capture_radius: float = 0.005
    release_margin: float = 0.05

    def __post_init__(self):
        if any(m <= 0 for m in self.inertia) or any(b < 0 for b in self.damping):
            raise ValueError("inertia must be > 0 and damping >= 0")
        if not 0 < self.q_lo[2] < self.q_hi[2]:
            raise ValueError("insertion limits must satisfy 0 < q3_min < q3_max")

    @property
    def q3_min(self) -> float:
        return self.q_lo[2]

    @property
    def q3_max(self) -> float:
        return self.q_hi[2]


def fk(q, arm: ArmModel | None = None) -> np.ndarray:
    """Tool-tip position for joint vector(s) ``q`` (first three entries used)."""
    q = np.asarray(q, dtype=float)
    rc = np.asarray(arm.remote_center if arm else (0.0, 0.0, 0.0))
    q1, q2, q3 = q[..., 0], q[..., 1], q[..., 2]
    s2 = np.sin(q2)
    d = np.stack([s2 * np.cos(q1), s2 * np.sin(q1), -np.cos(q2)], axis=-1)
    return rc + q3[..., None] * d


def ik(position, arm: ArmModel | None = None, q1_prev: float = 0.0) -> np.ndarray:
    """Closed-form inverse kinematics for one point or an ``(n, 3)`` stream.

    On the singular ray (``sin q2 < 1e-6``) yaw is carried over from the
    previous solution (``q1_prev`` for the first sample).
    """
    arm = arm or ArmModel()
    p = np.asarray(position, dtype=float) - np.asarray(arm.remote_center)
    single = p.ndim == 1
    p = np.atleast_2d(p)
    r = np.linalg.norm(p, axis=1)
    tol = 1e-12
    if np.any(r < arm.q3_min - tol):
        raise UnreachableError("q3_min", f"position closer than q3_min={arm.q3_min} m to the remote centre")
    if np.any(r > arm.q3_max + tol):
        raise UnreachableError("q3_max", f"position farther than q3_max={arm.q3_max} m from the remote centre")
    q2 = np.arccos(np.clip(-p[:, 2] / r, -1.0, 1.0))
    q1 = np.arctan2(p[:, 1], p[:, 0])
    singular = np.sin(q2) < SINGULAR_EPS
    if singular.any():
        src = np.where(singular, -1, np.arange(len(p)))
        src = np.maximum.accumulate(src)
        q1 = np.where(src >= 0, q1[np.maximum(src, 0)], q1_prev)
    out = np.stack([q1, q2, r], axis=1)
    return out[0] if single else out


def gravity_torque(q, arm: ArmModel) -> np.ndarray:
    """Generalised gravity load from a point tool mass at the tip."""
    q = np.asarray(q, dtype=float)
    mg = arm.tool_mass * arm.gravity
    out = np.zeros(q.shape)
    out[..., 1] = mg * q[..., 2] * np.sin(q[..., 1])
    out[..., 2] = -mg * np.cos(q[..., 1])
    return out


def pd_torque(q_desired, q_s, qdot_s, gains: PDGains, tau_gc=0.0) -> np.ndarray:
    """Joint torques ``kp (q_des - q) - kd qdot + tau_gc``; no desired-velocity term."""
    kp = np.asarray(gains.kp, dtype=float)
    kd = np.asarray(gains.kd, dtype=float)
    q_desired, q_s, qdot_s = (np.asarray(a, dtype=float) for a in (q_desired, q_s, qdot_s))
    if not (q_desired.shape == q_s.shape == qdot_s.shape):
        raise ValueError("q_desired, q_s and qdot_s must have the same shape")
    n = q_s.shape[-1]
    return kp[:n] * (q_desired - q_s) - kd[:n] * qdot_s + tau_gc


def plant_step(q, qdot, tau, arm: ArmModel, dt: float = DT):
    """Semi-implicit Euler step of ``M qdd = tau - B qdot - g(q)`` with joint stops."""
    tau = np.asarray(tau, dtype=float)
    if not np.all(np.isfinite(tau)):
        raise SimulationFault(f"non-finite torque {tau}")
    q = np.array(q, dtype=float)
    qdot = np.array(qdot, dtype=float)
    acc = (tau - np.asarray(arm.damping) * qdot - gravity_torque(q, arm)) / np.asarray(arm.inertia)
    qdot = qdot + dt * acc
    q = q + dt * qdot
    lo, hi = np.asarray(arm.q_lo), np.asarray(arm.q_hi)
    stop = (q < lo) | (q > hi)
    q = np.clip(q, lo, hi)
    qdot[stop] = 0.0
    return q, qdot


# -- trial driver ------------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    arm: ArmModel = field(default_factory=ArmModel)
    gains: PDGains = field(default_factory=PDGains)
    limits: MasterLimits = field(default_factory=MasterLimits)
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    g_cartesian: float = 0.5
    g_orientation: float = 0.0
    dt: float = DT

    def scaling(self, condition) -> ScalingConfig:
        return ScalingConfig.for_condition(condition, g_cartesian=self.g_cartesian, g_orientation=self.g_orientation)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        kw = {}
        for key, typ in (("arm", ArmModel), ("gains", PDGains), ("limits", MasterLimits), ("channel", ChannelConfig)):
            if key in d:
                kw[key] = typ(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.pop(key).items()})
        return cls(**kw, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "SimConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass
class TrialLog:
    """1 kHz record of one trial.

    ``events`` maps marker names to sample indices. UI markers (``go``,
    ``confirm``, ``reach_go``) are observable by the analysis; the others
    are ground truth for validation only.
    """

    t: np.ndarray
    pos: np.ndarray  # (n, 3) slave tool tip, m
    aperture: np.ndarray  # slave jaw angle, rad
    master_aperture: np.ndarray  # rad
    events: dict
    meta: dict


OBSERVABLE_EVENTS = ("go", "confirm", "reach_go")


def _first_above(x, thr, start, stop):
    idx = np.flatnonzero(x[start:stop] > thr)
    return int(start + idx[0]) if idx.size else -1


def run_trial(agent: SubjectAgent, trial: Trial, experiment, config: SimConfig | None = None,
              seed: int = 0, meta: dict | None = None) -> TrialLog:
    """Simulate one trial end to end and return its log."""
    cfg = config or SimConfig()
    experiment = Experiment(experiment)
    arm = cfg.arm
    scaling = cfg.scaling(agent.condition)
    rng = rng_from(seed, 0x54524C)
    d = trial.object.diameter
    script = script_trial(agent, d, experiment, scaling, cfg.limits, rng, cfg.dt)
    n = script.t.size

    q0 = np.asarray(arm.q_start, dtype=float)
    slave0 = np.zeros(7)
    slave0[:3] = fk(q0, arm)
    slave0[6] = q0[3]
    refs = clutch_engage(script.master[0], slave0)
    obj = slave0[:3] + np.array([REACH_DISTANCE, 0.0, 0.0])

    chan = ChannelConfig(**{**asdict(cfg.channel), "seed": int(rng.integers(2**62))})
    applied = applied_schedule(chan, n, cfg.dt)
    desired = scale_map(script.master, refs, scaling)
    desired = np.where((applied >= 0)[:, None], desired[np.maximum(applied, 0)], refs.x_remote_ref)
    q_des = np.empty((n, 4))
    q_des[:, :3] = ik(desired[:, :3], arm, q1_prev=q0[0])
    q_des[:, 3] = desired[:, 6]

    q, qd, obj_path, contact, release, fault = kernels.simulate_arm(
        np.ascontiguousarray(q_des), q0, np.zeros(4),
        arm.inertia, arm.damping, cfg.gains.kp, cfg.gains.kd, arm.q_lo, arm.q_hi,
        arm.tool_mass, arm.gravity, arm.gc_fidelity, cfg.dt,
        arm.remote_center, obj, arm.capture_radius, script.required, arm.release_margin,
    )
    if fault >= 0:
        raise SimulationFault(f"non-finite torque at tick {fault}")
    pos = fk(q, arm)

    ev = dict(script.events)
    reach_go = ev.get("reach_go", ev["go"])
    end_reach = contact if contact >= 0 else ev["contact_cmd"]
    speed = np.zeros(n)
    speed[1:] = np.linalg.norm(np.diff(pos, axis=0), axis=1) / cfg.dt
    peak = speed[reach_go:end_reach + 1].max() if end_reach > reach_go else 0.0
    onset = _first_above(speed, 0.05 * peak, reach_go, end_reach + 1) if peak > 0 else -1
    if onset >= 0:
        ev["onset"] = onset
    if end_reach > reach_go:
        ev["mga"] = int(reach_go + np.argmax(q[reach_go:end_reach + 1, 3]))
    if contact >= 0:
        ev["contact"] = contact
        stop = release if release >= 0 else n
        vz = np.zeros(stop - contact)
        vz[1:] = np.diff(obj_path[contact:stop, 2]) / cfg.dt
        top = int(np.argmax(vz))
        below = np.flatnonzero(vz[top:] < 0.05 * vz[top])
        if vz[top] > 0 and below.size:
            ev["lift_end"] = contact + top + int(below[0])
    if release >= 0:
        ev["release"] = release

    info = dict(script.info)
    info.update(
        object_x=float(obj[0]), object_y=float(obj[1]), object_z=float(obj[2]),
        start_x=float(slave0[0]), start_y=float(slave0[1]), start_z=float(slave0[2]),
        ceiling=float(cfg.limits.slave_ceiling(scaling)), g_grasper=scaling.g_grasper,
        grasped=contact >= 0, phenotype=agent.params.phenotype.value,
        injected_timing_fraction=agent.params.mga_timing_fraction,
    )
    md = dict(meta or {})
    md.update(subject=agent.subject, condition=agent.condition.value, experiment=experiment.value,
              trial=trial.index, diameter_mm=d, is_training=trial.is_training, seed=int(seed))
    md.update(info)
    return TrialLog(script.t, pos, q[:, 3].copy(), script.master[:, 6].copy(), ev, md)
