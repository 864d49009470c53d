"""Synthetic participants for reach-to-grasp and pantomimed size estimation.

An agent turns a trial (object, scaling condition) into a 1 kHz master
command stream: hand position follows a minimum-jerk reach, and the grip
aperture follows a phenotype-specific opening/closing profile whose peak
(MGA) or held value (pantomimed size, PS) is drawn from the agent's
psychophysics:

* action: MGA mean linear in object size, size-independent noise
  (violates Weber's law);
* perception: tip-opening noise proportional to size (Weber fraction).

Near the master's aperture ceiling the agent trades opening for accuracy:
its noise shrinks in proportion to the remaining headroom, draws that would
cross the guard band are folded back below it, and draws far past the limit
pin the master gripper at its stop.
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from .model import Condition, Experiment, MasterLimits, ScalingConfig, rng_from

READY_PERIOD = 0.300
REACH_DISTANCE = 0.040  # slave side, m
LIFT_HEIGHT = 0.020  # slave side, m


class Phenotype(str, enum.Enum):
    DURING_REACH = "during_reach"
    PRE_OPENER = "pre_opener"
    LATE_OPENER = "late_opener"


class InfeasibleTrial(ValueError):
    """The object needs more aperture than the scaled master can command."""


@dataclass(frozen=True)
class AgentParams:
    reaction_mean: float = 0.45
    reaction_sd: float = 0.06
    transport_duration_mean: float = 0.90
    transport_duration_sd: float = 0.08
    mga_intercept: float = 0.80  # rad at d = 0
    mga_slope: float = 0.06  # rad/mm
    mga_sd: float = 0.08  # rad, size independent
    mga_timing_fraction: float = 0.65
    late_fraction: float = 0.93
    ps_bias: float = 0.5  # mm
    weber_fraction: float = 0.08
    phenotype: Phenotype = Phenotype.DURING_REACH
    jaw_length: float = 0.010  # m
    mga_guard: float = 0.05  # rad below the ceiling
    mga_active_headroom: float = 1.2  # rad; noise shrinks below this headroom
    ps_guard: float = 0.10
    ps_active_headroom: float = 1.2
    grasp_settle: float = 0.15
    squeeze: float = 0.15
    lift_duration: float = 0.6
    hold_after_lift: float = 0.25
    release_opening: float = 0.35
    pantomime_open: float = 0.45
    pantomime_hold_mean: float = 0.9
    pantomime_hold_sd: float = 0.15
    perception_reaction_mean: float = 0.55

    def __post_init__(self):
        object.__setattr__(self, "phenotype", Phenotype(self.phenotype))
        if not (self.mga_sd > 0 and self.weber_fraction > 0):
            raise ValueError("mga_sd and weber_fraction must be > 0")
        if not self.mga_slope > 0:
            raise ValueError("mga_slope must be > 0")
        if self.phenotype is Phenotype.DURING_REACH and not 0 < self.mga_timing_fraction < 1:
            raise ValueError("mga_timing_fraction must lie in (0, 1)")


@dataclass(frozen=True)
class PopulationParams:
    """Population means plus between-subject spread of the agent parameters."""

    phenotype_probs: tuple = (17 / 31, 10 / 31, 4 / 31)
    base: AgentParams = field(default_factory=AgentParams)
    reaction_mean_sd: float = 0.05
    transport_duration_mean_sd: float = 0.08
    mga_intercept_sd: float = 0.05
    mga_slope_sd: float = 0.006
    mga_sd_logsd: float = 0.15
    timing_fraction_sd: float = 0.03
    ps_bias_sd: float = 0.4
    weber_logsd: float = 0.10

    def __post_init__(self):
        p = np.asarray(self.phenotype_probs, dtype=float)
        if p.shape != (3,) or np.any(p < 0) or not math.isclose(p.sum(), 1.0, rel_tol=1e-9):
            raise ValueError("phenotype_probs must be three non-negative values summing to 1")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["phenotype_probs"] = list(self.phenotype_probs)
        d["base"]["phenotype"] = self.base.phenotype.value
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PopulationParams":
        d = dict(d)
        base = AgentParams(**d.pop("base", {}))
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown population keys {sorted(unknown)}")
        if "phenotype_probs" in d:
            d["phenotype_probs"] = tuple(d["phenotype_probs"])
        return cls(base=base, **d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path) -> "PopulationParams":
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class SubjectAgent:
    params: AgentParams
    condition: Condition
    seed: int
    subject: str = ""


# -- geometry ----------------------------------------------------------------

def aperture_for_diameter(d_mm, jaw_length: float = 0.010):
    """Smallest jaw angle whose tip opening equals ``d_mm``."""
    half = np.asarray(d_mm, dtype=float) * 1e-3 / (2.0 * jaw_length)
    if np.any(half > 1.0) or np.any(half < 0):
        raise ValueError(f"object of {d_mm} mm does not fit jaws of length {jaw_length} m")
    out = 2.0 * np.arcsin(half)
    return float(out) if out.ndim == 0 else out


def diameter_for_aperture(angle, jaw_length: float = 0.010):
    """Tip opening (mm) of jaws opened to ``angle`` rad."""
    return 2.0 * jaw_length * np.sin(np.asarray(angle, dtype=float) / 2.0) * 1e3


# -- trajectory primitives ---------------------------------------------------

def min_jerk(tau):
    """Normalised minimum-jerk position profile, clamped outside [0, 1]."""
    s = np.clip(tau, 0.0, 1.0)
    return s * s * s * (10.0 - 15.0 * s + 6.0 * s * s)


def keyframes(t, knots):
    """Piecewise minimum-jerk interpolation through ``(time, value)`` knots.

    Values hold constant before the first and after the last knot.
    """
    times = np.array([k[0] for k in knots], dtype=float)
    vals = np.array([k[1] for k in knots], dtype=float)
    if np.any(np.diff(times) < 0):
        raise ValueError("knot times must be non-decreasing")
    seg = np.clip(np.searchsorted(times, t, side="right") - 1, 0, len(times) - 2)
    t0, t1 = times[seg], times[seg + 1]
    span = np.where(t1 > t0, t1 - t0, 1.0)
    s = min_jerk((t - t0) / span)
    out = vals[seg] + (vals[seg + 1] - vals[seg]) * s
    out = np.where(t < times[0], vals[0], out)
    return np.where(t >= times[-1], vals[-1], out)


def gen_transport(distance: float, duration: float, reaction: float, dt: float = 0.001, tail: float = 0.2):
    """Straight-line reach: stationary for ``reaction`` s, then a minimum-jerk move.

    Returns ``(t, displacement)`` sampled at ``dt``.
    """
    if not (distance > 0 and duration > 0):
        raise ValueError("distance and duration must be > 0")
    n = int(round((reaction + duration + tail) / dt)) + 1
    t = np.arange(n) * dt
    return t, distance * min_jerk((t - reaction) / duration)


# -- psychophysics -----------------------------------------------------------

def _limit(mu, natural, required, ceiling, guard, active_headroom, floor):
    """Ceiling-aware accuracy trade-off shared by MGA and PS draws."""
    cap = ceiling - guard
    headroom = cap - required
    if headroom <= 0:
        raise InfeasibleTrial(f"required aperture {required:.4f} rad leaves no headroom under {cap:.4f} rad")
    info = {"raw": float(natural), "hit": False, "compressed": False, "shrink": 1.0}
    if natural >= ceiling + guard:
        info["hit"] = True
        return float(ceiling), info
    shrink = min(1.0, headroom / active_headroom)
    info["shrink"] = shrink
    m = min(mu, cap) + shrink * (natural - mu)
    if m > cap:
        m = 2.0 * cap - m
        info["compressed"] = True
    return float(max(m, floor)), info


def mga_mean(params: AgentParams, d_mm):
    return params.mga_intercept + params.mga_slope * np.asarray(d_mm, dtype=float)


def sample_mga(params: AgentParams, d_mm: float, scaling: ScalingConfig, limits: MasterLimits,
               rng: np.random.Generator | None = None, z: float | None = None):
    """Intended slave MGA (rad) and a dict describing ceiling effects."""
    if z is None:
        z = rng.standard_normal()
    required = aperture_for_diameter(d_mm, params.jaw_length)
    mu = float(mga_mean(params, d_mm))
    natural = mu + params.mga_sd * z
    return _limit(mu, natural, required, limits.slave_ceiling(scaling),
                  params.mga_guard, params.mga_active_headroom, required)


def sample_ps(params: AgentParams, d_mm: float, scaling: ScalingConfig, limits: MasterLimits,
              rng: np.random.Generator | None = None, z: float | None = None):
    """Pantomimed slave aperture (rad): Weber-noisy tip opening mapped to jaw angle."""
    if z is None:
        z = rng.standard_normal()
    L = params.jaw_length
    tip_max = 2e3 * L
    mu_tip = min(d_mm + params.ps_bias, tip_max)
    tip = float(np.clip(mu_tip + params.weber_fraction * d_mm * z, 0.0, tip_max))
    required = aperture_for_diameter(d_mm, L)
    return _limit(aperture_for_diameter(mu_tip, L), aperture_for_diameter(tip, L), required,
                  limits.slave_ceiling(scaling), params.ps_guard, params.ps_active_headroom, 0.0)


# -- subjects ----------------------------------------------------------------

def make_subject(seed: int, condition, population: PopulationParams | None = None, subject: str = "") -> SubjectAgent:
    pop = population or PopulationParams()
    rng = rng_from(seed, 0x4147454E)
    b = pop.base
    phen = list(Phenotype)[int(rng.choice(3, p=np.asarray(pop.phenotype_probs)))]
    z = rng.standard_normal(9)
    frac = float(np.clip(b.mga_timing_fraction + pop.timing_fraction_sd * z[6], 0.05, 0.95))
    params = replace(
        b,
        phenotype=phen,
        reaction_mean=max(0.15, b.reaction_mean + pop.reaction_mean_sd * z[0]),
        transport_duration_mean=max(0.45, b.transport_duration_mean + pop.transport_duration_mean_sd * z[1]),
        mga_intercept=b.mga_intercept + pop.mga_intercept_sd * z[2],
        mga_slope=max(1e-3, b.mga_slope + pop.mga_slope_sd * z[3]),
        mga_sd=b.mga_sd * math.exp(pop.mga_sd_logsd * z[4]),
        weber_fraction=b.weber_fraction * math.exp(pop.weber_logsd * z[5]),
        mga_timing_fraction=frac,
        ps_bias=b.ps_bias + pop.ps_bias_sd * z[7],
        perception_reaction_mean=max(0.2, b.perception_reaction_mean + pop.reaction_mean_sd * z[8]),
    )
    return SubjectAgent(params, Condition(condition), int(seed), subject)


# -- per-trial command streams -----------------------------------------------

@dataclass
class MasterScript:
    """1 kHz master command stream for one trial plus agent-side ground truth."""

    t: np.ndarray
    master: np.ndarray  # (n, 7), already clamped to the master limits
    events: dict  # name -> tick
    info: dict
    required: float


def gen_aperture_profile(params: AgentParams, mga: float, required: float, onset: float, duration: float,
                         go: float, start_value: float = 0.0):
    """Aperture keyframes (slave target, rad) from object appearance to contact.

    Returns ``(knots, t_peak)``.
    """
    end = onset + duration
    phen = params.phenotype
    if phen is Phenotype.PRE_OPENER:
        t_peak = max(go + 0.05, onset - 0.15)
        t_open = go + 0.25 * (t_peak - go)
        knots = [(t_open, start_value), (t_peak, mga), (end, required)]
    else:
        frac = params.mga_timing_fraction if phen is Phenotype.DURING_REACH else params.late_fraction
        t_peak = onset + frac * duration
        knots = [(onset, start_value), (t_peak, mga), (end, required)]
    return knots, t_peak


def _reach_knots(params, rng, t_go, required, mga, x_exc, z_exc, ceiling):
    rt = max(0.15, params.reaction_mean + params.reaction_sd * rng.standard_normal())
    T = max(0.4, params.transport_duration_mean + params.transport_duration_sd * rng.standard_normal())
    onset = t_go + rt
    end = onset + T
    ap_knots, t_peak = gen_aperture_profile(params, mga, required, onset, T, t_go)
    t_sq = end + params.grasp_settle
    t_lift = t_sq + 0.15
    t_lift_end = t_lift + params.lift_duration
    t_rel = t_lift_end + params.hold_after_lift
    t_done = t_rel + 0.2
    squeeze = max(required - params.squeeze, 0.0)
    release_to = min(required + params.release_opening, 0.95 * ceiling)
    ap_knots = ap_knots + [(t_sq, required), (t_sq + 0.1, squeeze), (t_rel, squeeze), (t_done, release_to)]
    x_knots = [(onset, 0.0), (end, x_exc)]
    z_knots = [(t_lift, 0.0), (t_lift_end, z_exc)]
    marks = {"onset_cmd": onset, "mga_cmd": t_peak, "contact_cmd": end, "lift_cmd": t_lift,
             "lift_end_cmd": t_lift_end, "release_cmd": t_rel}
    timing = {"reaction": rt, "transport_duration": T}
    return ap_knots, x_knots, z_knots, marks, timing, t_done


def script_trial(agent: SubjectAgent, diameter: float, experiment, scaling: ScalingConfig,
                 limits: MasterLimits, rng: np.random.Generator, dt: float = 0.001) -> MasterScript:
    """Generate the master command stream for one trial.

    Master coordinates are relative to the clutch pose (all zeros, gripper
    closed). Slave targets are divided by the scaling gains to get master
    commands; the gripper command is clamped to the master range and every
    clamped tick is reported.
    """
    p = agent.params
    experiment = Experiment(experiment)
    required = aperture_for_diameter(diameter, p.jaw_length)
    x_exc = REACH_DISTANCE / scaling.g_cartesian
    z_exc = LIFT_HEIGHT / scaling.g_cartesian
    g = scaling.g_grasper
    go = READY_PERIOD
    # draw order is fixed: mga, ps, then the timing variables
    mga, mga_info = sample_mga(p, diameter, scaling, limits, z=rng.standard_normal())
    info = {"required": required, "mga_target": mga, "mga_raw": mga_info["raw"], "mga_hit": mga_info["hit"],
            "mga_compressed": mga_info["compressed"], "shrink": mga_info["shrink"]}
    events = {"go": go}
    if experiment is Experiment.PERCEPTION:
        ps, ps_info = sample_ps(p, diameter, scaling, limits, z=rng.standard_normal())
        info.update(ps_target=ps, ps_raw=ps_info["raw"], ps_hit=ps_info["hit"],
                    ps_compressed=ps_info["compressed"])
        prt = max(0.2, p.perception_reaction_mean + p.reaction_sd * rng.standard_normal())
        hold = max(0.4, p.pantomime_hold_mean + p.pantomime_hold_sd * rng.standard_normal())
        t_open = go + prt
        t_shown = t_open + p.pantomime_open
        t_confirm = t_shown + hold
        t_closed = t_confirm + 0.35
        reach_go = t_closed + 0.3
        ps_cmd = ps_info["raw"] if ps_info["hit"] else ps
        pre = [(t_open, 0.0), (t_shown, ps_cmd), (t_confirm, ps_cmd), (t_closed, 0.0)]
        events.update(pantomime_shown=t_shown, confirm=t_confirm, reach_go=reach_go)
        info["perception_time_cmd"] = t_shown - go
    else:
        pre, reach_go = [], go
    mga_cmd = mga_info["raw"] if mga_info["hit"] else mga
    ap_knots, x_knots, z_knots, marks, timing, t_done = _reach_knots(
        p, rng, reach_go, required, mga_cmd, x_exc, z_exc, limits.slave_ceiling(scaling))
    events.update(marks)
    info.update(timing)
    n = int(round((t_done + 0.3) / dt)) + 1
    t = np.arange(n) * dt
    master = np.zeros((n, 7))
    master[:, 0] = keyframes(t, x_knots)
    master[:, 2] = keyframes(t, z_knots)
    slave_ap = keyframes(t, pre + ap_knots) if pre else keyframes(t, ap_knots)
    raw = slave_ap / g
    clamped = raw > limits.gripper_range
    master[:, 6] = np.clip(raw, 0.0, limits.gripper_range)
    info["clamped_ticks"] = int(clamped.sum())
    if clamped.any():
        events["clamp"] = float(t[np.argmax(clamped)])
    ticks = {k: int(round(v / dt)) for k, v in events.items()}
    return MasterScript(t, master, ticks, info, required)
