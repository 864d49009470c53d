"""Trial analysis: resampling, zero-phase filtering, event detection, metrics.

Event detection looks only at the slave kinematics plus the UI events a
real rig records (object appearance ``go``, the perception ``confirm`` key
press and the second ``reach_go`` prompt). The remaining log markers are
ground truth and are used for validation only.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from functools import lru_cache
from pathlib import Path

import numpy as np
import pandas as pd
from scipy import signal

from .teleop import OBSERVABLE_EVENTS, TrialLog

RAW_RATE = 1000.0
RATE = 100.0
DECIMATE = 10
FILTER_ORDER = 4
CUTOFF_HZ = 10.0
PADLEN = 3 * FILTER_ORDER
LOG_FORMAT = "teleograsp-triallog v1"
METRICS_FORMAT = "teleograsp-metrics v1"

METRIC_NAMES = (
    "mga", "mga_time_fraction", "ps", "reaction_time", "transport_time", "total_time",
    "perception_time", "path_length", "peak_endpoint_speed", "peak_aperture_speed",
)
ACTION_METRICS = ("mga", "mga_time_fraction", "reaction_time", "transport_time", "total_time",
                  "path_length", "peak_endpoint_speed", "peak_aperture_speed")
PERCEPTION_METRICS = ("ps", "perception_time")


class Unanalyzable(ValueError):
    """Trial lacks the kinematic features needed for a metric set."""


@dataclass(frozen=True)
class AnalysisConfig:
    onset_fraction: float = 0.05
    onset_hold: float = 0.050  # s above threshold
    capture_radius: float = 0.008  # m around the object for end of transport
    lift_threshold: float = 0.015  # m
    hold_fraction: float = 0.05  # of peak aperture speed
    hold_min: float = 0.200  # s
    hold_min_aperture: float = 0.05  # rad
    min_peak_speed: float = 0.005  # m/s


@dataclass
class FilteredTrial:
    t: np.ndarray
    pos: np.ndarray
    aperture: np.ndarray
    ui: dict  # observable UI event times, s
    meta: dict


@dataclass
class TrialMetrics:
    mga: float = math.nan
    mga_time_fraction: float = math.nan
    ps: float = math.nan
    reaction_time: float = math.nan
    transport_time: float = math.nan
    total_time: float = math.nan
    perception_time: float = math.nan
    path_length: float = math.nan
    peak_endpoint_speed: float = math.nan
    peak_aperture_speed: float = math.nan


# -- preprocessing ------------------------------------------------------------

@lru_cache(maxsize=None)
def butter_coefficients(order: int = FILTER_ORDER, cutoff: float = CUTOFF_HZ, fs: float = RATE):
    return signal.butter(order, cutoff, btype="low", fs=fs)


def zero_phase_filter(x, axis: int = 0):
    """Forward-backward Butterworth with odd-reflection padding of ``3 * order`` samples."""
    x = np.asarray(x, dtype=float)
    if x.shape[axis] <= PADLEN:
        raise ValueError(f"stream of {x.shape[axis]} samples too short for padding of {PADLEN}")
    b, a = butter_coefficients()
    return signal.filtfilt(b, a, x, axis=axis, padtype="odd", padlen=PADLEN)


def preprocess_array(x, axis: int = 0):
    """Decimate a 1 kHz array to 100 Hz (every 10th sample) and zero-phase filter it."""
    x = np.asarray(x, dtype=float)
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(None, None, DECIMATE)
    return zero_phase_filter(x[tuple(sl)], axis=axis)


def preprocess(log: TrialLog) -> FilteredTrial:
    raw = np.column_stack([log.pos, log.aperture])
    out = preprocess_array(raw)
    t = log.t[::DECIMATE]
    ui = {k: float(log.t[v]) for k, v in log.events.items() if k in OBSERVABLE_EVENTS}
    return FilteredTrial(t, out[:, :3], out[:, 3], ui, log.meta)


# -- event detection ----------------------------------------------------------

def _crossing(t, x, i, thr):
    """Time at which ``x`` crosses ``thr`` between samples ``i - 1`` and ``i``."""
    if i <= 0:
        return float(t[0])
    x0, x1 = x[i - 1], x[i]
    if x1 == x0:
        return float(t[i])
    return float(t[i - 1] + (thr - x0) / (x1 - x0) * (t[i] - t[i - 1]))


def _interp(t, y, when):
    return np.array([np.interp(when, t, y[:, k]) for k in range(y.shape[1])]) if y.ndim == 2 else np.interp(when, t, y)


def _runs(mask):
    """``(start, stop)`` index pairs of True runs."""
    m = np.concatenate([[False], mask, [False]]).astype(np.int8)
    d = np.diff(m)
    return list(zip(np.flatnonzero(d == 1), np.flatnonzero(d == -1)))


def detect_events(ft: FilteredTrial, cfg: AnalysisConfig | None = None) -> dict:
    """Estimate event times (s) from filtered kinematics.

    Keys: ``onset``, ``transport_end``, ``mga_time``, ``mga``, ``lift``,
    ``lift_end`` for the reach; ``pantomime_time``, ``pantomime_end``,
    ``ps`` for perception trials. Raises :class:`Unanalyzable` when the
    reach cannot be segmented.
    """
    cfg = cfg or AnalysisConfig()
    t, pos, ap = ft.t, ft.pos, ft.aperture
    h = t[1] - t[0]
    go = ft.ui["go"]
    ev: dict = {"go": go}
    if ft.meta.get("experiment") == "perception":
        ev.update(_detect_pantomime(ft, cfg))
    start_t = ft.ui.get("reach_go", go)
    i0 = int(np.searchsorted(t, start_t))

    obj = np.array([ft.meta["object_x"], ft.meta["object_y"], ft.meta["object_z"]])
    home = np.array([ft.meta["start_x"], ft.meta["start_y"], ft.meta["start_z"]])
    axis = obj - home
    axis[2] = 0.0
    axis /= np.linalg.norm(axis)
    proj = pos @ axis
    vproj = np.gradient(proj, h)
    seg = vproj[i0:]
    if seg.size == 0 or seg.max() < cfg.min_peak_speed:
        raise Unanalyzable("no speed peak")
    ipk = i0 + int(np.argmax(seg))
    peak = vproj[ipk]
    thr = cfg.onset_fraction * peak
    hold = max(1, int(round(cfg.onset_hold / h)))
    above = vproj > thr
    onset_i = -1
    for a, b in _runs(above[i0:ipk + 1]):
        if b - a >= hold or i0 + b > ipk:
            onset_i = i0 + a
            break
    if onset_i < 0:
        raise Unanalyzable("no sustained onset")
    ev["onset"] = _crossing(t, vproj, onset_i, thr)

    near = np.linalg.norm(pos - obj, axis=1) <= cfg.capture_radius
    cand = np.flatnonzero((vproj[ipk:] < thr) & near[ipk:])
    if cand.size == 0:
        raise Unanalyzable("no transport end near the object")
    end_i = ipk + int(cand[0])
    ev["transport_end"] = _crossing(t, vproj, end_i, thr) if vproj[end_i - 1] >= thr else float(t[end_i])

    w = (t >= start_t) & (t <= ev["transport_end"])
    iw = np.flatnonzero(w)
    k = iw[int(np.argmax(ap[iw]))]
    ev["mga_time"], ev["mga"] = float(t[k]), float(ap[k])

    z_end = np.interp(ev["transport_end"], t, pos[:, 2])
    after = np.flatnonzero((t > ev["transport_end"]) & (pos[:, 2] - z_end > cfg.lift_threshold))
    if after.size:
        il = int(after[0])
        ev["lift"] = _crossing(t, pos[:, 2] - z_end, il, cfg.lift_threshold)
        vz = np.gradient(pos[:, 2], h)
        j_end = np.searchsorted(t, ev["transport_end"])
        jpk = j_end + int(np.argmax(vz[j_end:]))
        vthr = cfg.onset_fraction * vz[jpk]
        below = np.flatnonzero(vz[max(jpk, il):] < vthr)
        if below.size:
            j = max(jpk, il) + int(below[0])
            ev["lift_end"] = _crossing(t, vz, j, vthr)
    return ev


def _detect_pantomime(ft: FilteredTrial, cfg: AnalysisConfig) -> dict:
    t, ap = ft.t, ft.aperture
    h = t[1] - t[0]
    go, confirm = ft.ui["go"], ft.ui.get("confirm")
    if confirm is None:
        raise Unanalyzable("perception trial without confirm event")
    i0, i1 = int(np.searchsorted(t, go)), int(np.searchsorted(t, confirm))
    speed = np.abs(np.gradient(ap, h))
    win = speed[i0:i1 + 1]
    if win.size == 0 or win.max() <= 0:
        raise Unanalyzable("no pantomime gesture")
    low = win < cfg.hold_fraction * win.max()
    need = int(round(cfg.hold_min / h))
    for a, b in reversed(_runs(low)):
        a, b = i0 + a, i0 + b
        if b - a >= need and ap[a:b].mean() > cfg.hold_min_aperture:
            mid = (a + b - 1) // 2
            return {"pantomime_time": float(t[a]), "pantomime_end": float(t[b - 1]), "ps": float(ap[mid])}
    raise Unanalyzable("no pantomime hold before confirm")


# -- metrics ------------------------------------------------------------------

def compute_metrics(ft: FilteredTrial, ev: dict) -> TrialMetrics:
    m = TrialMetrics()
    t, pos, ap = ft.t, ft.pos, ft.aperture
    h = t[1] - t[0]
    go = ev["go"]
    if ft.meta.get("experiment") == "perception":
        if "ps" in ev:
            m.ps = ev["ps"]
            m.perception_time = ev["pantomime_time"] - go
        return m
    onset, end = ev.get("onset"), ev.get("transport_end")
    if onset is None or end is None:
        return m
    m.reaction_time = onset - go
    m.transport_time = end - onset
    if "lift_end" in ev:
        m.total_time = ev["lift_end"] - go
    m.mga = ev["mga"]
    if m.transport_time > 0:
        m.mga_time_fraction = float(np.clip((ev["mga_time"] - onset) / m.transport_time, 0.0, 1.0))
    inside = (t > go) & (t < end)
    pts = np.vstack([_interp(t, pos, go), pos[inside], _interp(t, pos, end)])
    m.path_length = float(np.linalg.norm(np.diff(pts, axis=0), axis=1).sum() * 1e3)
    tw = (t >= onset) & (t <= end)
    if tw.any():
        v = np.linalg.norm(np.gradient(pos, h, axis=0), axis=1)
        m.peak_endpoint_speed = float(v[tw].max() * 1e3)
        m.peak_aperture_speed = float(np.abs(np.gradient(ap, h))[tw].max())
    return m


def analyze_trial(log: TrialLog, cfg: AnalysisConfig | None = None) -> dict:
    """One metrics-table row for a trial (metadata + metrics + exclusion reason)."""
    row = {k: log.meta.get(k) for k in ("subject", "condition", "experiment", "trial", "diameter_mm", "is_training")}
    row.update({k: math.nan for k in METRIC_NAMES})
    row["analyzable"], row["reason"] = True, ""
    try:
        ft = preprocess(log)
        ev = detect_events(ft, cfg)
        row.update(asdict(compute_metrics(ft, ev)))
    except (Unanalyzable, ValueError, KeyError) as exc:
        row["analyzable"], row["reason"] = False, str(exc) or type(exc).__name__
    row["ceiling_hit"] = bool(log.meta.get("mga_hit") or log.meta.get("ps_hit"))
    return row


def aggregate(rows, min_n: int = 3) -> pd.DataFrame:
    """Per subject x experiment x object mean and SD (ddof=1) of every metric.

    Training trials and unanalyzable trials are dropped first; missing
    metric values are excluded from that metric's count.
    """
    df = pd.DataFrame(rows) if not isinstance(rows, pd.DataFrame) else rows
    df = df[(~df["is_training"].astype(bool)) & df["analyzable"].astype(bool)]
    keys = ["subject", "condition", "experiment", "diameter_mm"]
    g = df.groupby(keys, sort=True)[list(METRIC_NAMES)]
    mean = g.mean().add_suffix("_mean")
    sd = g.std(ddof=1).add_suffix("_sd")
    n = g.count().add_suffix("_n")
    out = pd.concat([mean, sd, n], axis=1).reset_index()
    for name in METRIC_NAMES:
        out[f"{name}_low_confidence"] = out[f"{name}_n"] < min_n
    cols = keys + [f"{m}_{s}" for m in METRIC_NAMES for s in ("mean", "sd", "n", "low_confidence")]
    return out[cols]


# -- files --------------------------------------------------------------------

def write_log(log: TrialLog, path) -> Path:
    """CSV body ``t,x,y,z,aperture,master_aperture,event`` plus a ``.meta.json`` sidecar."""
    path = Path(path)
    marks: dict = {}
    for name, tick in sorted(log.events.items(), key=lambda kv: (kv[1], kv[0])):
        if 0 <= tick < log.t.size:
            marks.setdefault(tick, []).append(name)
    lines = [f"# {LOG_FORMAT}", "t,x,y,z,aperture,master_aperture,event"]
    for i in range(log.t.size):
        x, y, z = log.pos[i]
        lines.append(f"{log.t[i]:.3f},{x:.12g},{y:.12g},{z:.12g},{log.aperture[i]:.12g},"
                     f"{log.master_aperture[i]:.12g},{';'.join(marks.get(i, ()))}")
    path.write_text("\n".join(lines) + "\n")
    meta = {"format": LOG_FORMAT, **_jsonable(log.meta)}
    sidecar_path(path).write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n")
    return path


def sidecar_path(path) -> Path:
    path = Path(path)
    return path.with_name(path.name.removesuffix(".csv") + ".meta.json")


def read_log(path) -> TrialLog:
    path = Path(path)
    with open(path) as fh:
        head = fh.readline().strip()
        if head != f"# {LOG_FORMAT}":
            raise ValueError(f"{path}: not a {LOG_FORMAT} file")
        df = pd.read_csv(fh, keep_default_na=False, dtype={"event": str})
    meta = json.loads(sidecar_path(path).read_text())
    if meta.pop("format", None) != LOG_FORMAT:
        raise ValueError(f"{path}: sidecar format mismatch")
    events = {}
    for i, cell in zip(np.flatnonzero(df["event"].to_numpy() != ""), df["event"][df["event"] != ""]):
        for name in cell.split(";"):
            events[name] = int(i)
    arr = df[["t", "x", "y", "z", "aperture", "master_aperture"]].to_numpy(float)
    return TrialLog(arr[:, 0], arr[:, 1:4], arr[:, 4], arr[:, 5], events, meta)


def _jsonable(d: dict) -> dict:
    out = {}
    for k, v in d.items():
        if isinstance(v, (np.floating, np.integer, np.bool_)):
            v = v.item()
        out[k] = v
    return out


def write_metrics(df: pd.DataFrame, path) -> Path:
    path = Path(path)
    with open(path, "w") as fh:
        fh.write(f"# {METRICS_FORMAT}\n")
        df.to_csv(fh, index=False, float_format="%.12g", lineterminator="\n")
    return path


def read_metrics(path) -> pd.DataFrame:
    with open(path) as fh:
        head = fh.readline().strip()
        if head != f"# {METRICS_FORMAT}":
            raise ValueError(f"{path}: not a {METRICS_FORMAT} file")
        return pd.read_csv(fh, keep_default_na=True)
