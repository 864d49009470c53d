"""Domain types, experiment planning and plan validation.

All quantities are SI (m, rad, s) except object diameters, which are kept
in millimetres because that is how the objects are named throughout the
analysis (4, 6, 8, 10 and 12 mm).
"""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

DIAMETERS_MM = (4.0, 6.0, 8.0, 10.0, 12.0)
N_TRIALS = 110
BLOCK_SIZE = 10
N_TRAINING = 10
REPEATS_PER_BLOCK = 2
PLAN_FORMAT_VERSION = 1


class Condition(str, enum.Enum):
    FINE = "fine"
    NORMAL = "normal"
    QUICK = "quick"

    @property
    def g_grasper(self) -> float:
        return {"fine": 3.0, "normal": 5.0, "quick": 7.0}[self.value]

    @property
    def code(self) -> int:
        return ("fine", "normal", "quick").index(self.value)


class Experiment(str, enum.Enum):
    ACTION = "action"
    PERCEPTION = "perception"

    @property
    def code(self) -> int:
        return 0 if self is Experiment.ACTION else 1


CONDITIONS = (Condition.FINE, Condition.NORMAL, Condition.QUICK)
EXPERIMENTS = (Experiment.ACTION, Experiment.PERCEPTION)


def rng_from(*key: int) -> np.random.Generator:
    """PCG64 generator seeded from an integer key path.

    The first element is the entropy, the rest form the SeedSequence spawn
    key, so sibling streams never overlap.
    """
    entropy, *spawn = (int(k) for k in key)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy, spawn_key=tuple(spawn))))


def derive_seed(*key: int) -> int:
    entropy, *spawn = (int(k) for k in key)
    ss = np.random.SeedSequence(entropy, spawn_key=tuple(spawn))
    return int(ss.generate_state(1, np.uint64)[0] >> np.uint64(1))


@dataclass(frozen=True)
class StateVector:
    """Pose plus grip aperture: ``[x, y, z, ax, ay, az, gripper]``."""

    x: float = 0.0
    y: float = 0.0
    z: float = 0.0
    ax: float = 0.0
    ay: float = 0.0
    az: float = 0.0
    gripper: float = 0.0

    def __post_init__(self):
        vals = self.as_array()
        if not np.all(np.isfinite(vals)):
            raise ValueError(f"non-finite state component in {vals}")
        if self.gripper < 0:
            raise ValueError(f"gripper aperture must be >= 0, got {self.gripper}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.ax, self.ay, self.az, self.gripper], dtype=float)

    @classmethod
    def from_array(cls, arr) -> "StateVector":
        a = np.asarray(arr, dtype=float)
        if a.shape != (7,):
            raise ValueError(f"state vector must have 7 components, got shape {a.shape}")
        return cls(*(float(v) for v in a))


@dataclass(frozen=True)
class ScalingConfig:
    g_grasper: float
    g_cartesian: float = 0.5
    g_orientation: float = 0.0

    def __post_init__(self):
        if not self.g_grasper > 0:
            raise ValueError("g_grasper must be > 0")
        if self.g_cartesian < 0 or self.g_orientation < 0:
            raise ValueError("Cartesian and orientation gains must be >= 0")

    @classmethod
    def for_condition(cls, condition: Condition | str, **kw) -> "ScalingConfig":
        return cls(g_grasper=Condition(condition).g_grasper, **kw)

    def gains(self) -> np.ndarray:
        """Per-component gain vector in state-vector order."""
        c, o = self.g_cartesian, self.g_orientation
        return np.array([c, c, c, o, o, o, self.g_grasper])


@dataclass(frozen=True)
class MasterLimits:
    gripper_range: float = math.radians(30.0)
    grip_span: float = 0.03

    def __post_init__(self):
        if not self.gripper_range > 0:
            raise ValueError("gripper_range must be > 0")

    def slave_ceiling(self, scaling: ScalingConfig) -> float:
        """Largest slave aperture the master can command."""
        return scaling.g_grasper * self.gripper_range


@dataclass(frozen=True)
class ObjectSpec:
    diameter: float  # mm

    def __post_init__(self):
        if not self.diameter > 0:
            raise ValueError("object diameter must be > 0")


@dataclass(frozen=True)
class Trial:
    index: int
    object: ObjectSpec
    is_training: bool


@dataclass(frozen=True)
class ExperimentPlan:
    condition: Condition
    experiment: Experiment
    trials: tuple[Trial, ...]
    seed: int
    subject: str = ""

    def diameters(self) -> np.ndarray:
        return np.array([t.object.diameter for t in self.trials])


@dataclass(frozen=True)
class Subject:
    id: str
    index: int
    condition: Condition
    seed: int
    order: tuple[Experiment, Experiment]
    plan_seed: int | None = None  # per-subject override of the shared order


@dataclass(frozen=True)
class CohortPlan:
    seed: int
    sizes: dict
    subjects: tuple[Subject, ...]
    plan_seeds: dict = field(default_factory=dict)  # (condition, experiment) -> seed

    def group(self, condition: Condition | str) -> list[Subject]:
        c = Condition(condition)
        return [s for s in self.subjects if s.condition is c]

    def plan_seed_for(self, subject: Subject, experiment: Experiment) -> int:
        if subject.plan_seed is not None:
            return subject.plan_seed
        return self.plan_seeds[(subject.condition.value, Experiment(experiment).value)]

    def plans_for(self, subject: Subject) -> list[ExperimentPlan]:
        out = []
        for exp in subject.order:
            p = make_plan(subject.condition, exp, self.plan_seed_for(subject, exp))
            out.append(ExperimentPlan(p.condition, p.experiment, p.trials, p.seed, subject.id))
        return out


def make_plan(condition, experiment, seed: int) -> ExperimentPlan:
    """Block-randomised object order: every block of 10 holds each object twice.

    Blocks are shuffled independently with a PCG64 stream keyed on
    ``(seed, condition, experiment)``.
    """
    condition = Condition(condition)
    experiment = Experiment(experiment)
    rng = rng_from(seed, 0x504C414E, condition.code, experiment.code)
    bag = np.repeat(np.array(DIAMETERS_MM), REPEATS_PER_BLOCK)
    trials = []
    for block in range(N_TRIALS // BLOCK_SIZE):
        for j, d in enumerate(rng.permutation(bag)):
            idx = block * BLOCK_SIZE + j + 1
            trials.append(Trial(idx, ObjectSpec(float(d)), idx <= N_TRAINING))
    return ExperimentPlan(condition, experiment, tuple(trials), int(seed))


def validate_plan(plan: ExperimentPlan) -> list[str]:
    problems = []
    trials = plan.trials
    if len(trials) != N_TRIALS:
        problems.append("trial count")
    if [t.index for t in trials] != list(range(1, len(trials) + 1)):
        problems.append("trial indices")
    diam = [t.object.diameter for t in trials]
    if len(trials) == N_TRIALS and any(diam.count(d) != 22 for d in DIAMETERS_MM):
        problems.append("objects per plan")
    if any(d not in DIAMETERS_MM for d in diam):
        problems.append("unknown object")
    for start in range(0, len(trials), BLOCK_SIZE):
        block = diam[start:start + BLOCK_SIZE]
        if len(block) == BLOCK_SIZE and any(block.count(d) != REPEATS_PER_BLOCK for d in DIAMETERS_MM):
            problems.append("block constraint")
            break
    if any(t.is_training != (t.index <= N_TRAINING) for t in trials):
        problems.append("training flags")
    return problems


def make_cohort(seed: int, sizes=None) -> CohortPlan:
    """Randomly assign subjects to scaling groups with balanced experiment order."""
    if sizes is None:
        sizes = {Condition.FINE: 10, Condition.NORMAL: 11, Condition.QUICK: 10}
    sizes = {Condition(k): int(v) for k, v in dict(sizes).items()}
    if any(v < 0 for v in sizes.values()) or sum(sizes.values()) == 0:
        raise ValueError(f"invalid cohort sizes {sizes}")
    rng = rng_from(seed, 0x434F484F)
    labels = np.concatenate([[c.code] * sizes.get(c, 0) for c in CONDITIONS]).astype(int)
    labels = rng.permutation(labels)
    orders = {}
    for c in CONDITIONS:
        n = sizes.get(c, 0)
        first = [Experiment.ACTION] * (n // 2) + [Experiment.PERCEPTION] * (n // 2)
        if n % 2:
            first.append(EXPERIMENTS[int(rng.integers(2))])
        orders[c] = list(rng.permutation(np.array([e.value for e in first], dtype=object)))
    subjects = []
    for i, code in enumerate(labels):
        cond = CONDITIONS[code]
        first = Experiment(orders[cond].pop(0))
        second = Experiment.PERCEPTION if first is Experiment.ACTION else Experiment.ACTION
        subjects.append(Subject(f"S{i + 1:02d}", i, cond, derive_seed(seed, 0x5355424A, i), (first, second)))
    plan_seeds = {
        (c.value, e.value): derive_seed(seed, 0x504C414E, c.code, e.code) for c in CONDITIONS for e in EXPERIMENTS
    }
    return CohortPlan(int(seed), {c.value: sizes.get(c, 0) for c in CONDITIONS}, tuple(subjects), plan_seeds)


# -- plan files --------------------------------------------------------------

def format_plan(plan: ExperimentPlan) -> str:
    lines = [
        "# teleograsp experiment plan",
        f"format_version: {PLAN_FORMAT_VERSION}",
        f"subject: {plan.subject}",
        f"condition: {plan.condition.value}",
        f"experiment: {plan.experiment.value}",
        f"seed: {plan.seed}",
        f"n_trials: {len(plan.trials)}",
        "trials:",
        "index,diameter_mm,is_training",
    ]
    lines += [f"{t.index},{t.object.diameter:g},{int(t.is_training)}" for t in plan.trials]
    return "\n".join(lines) + "\n"


def parse_plan(text: str) -> ExperimentPlan:
    header, trials, in_table = {}, [], False
    for raw in text.splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if in_table:
            if line.startswith("index"):
                continue
            i, d, tr = line.split(",")
            trials.append(Trial(int(i), ObjectSpec(float(d)), bool(int(tr))))
        elif line == "trials:":
            in_table = True
        else:
            key, _, value = line.partition(":")
            header[key.strip()] = value.strip()
    if int(header.get("format_version", -1)) != PLAN_FORMAT_VERSION:
        raise ValueError(f"unsupported plan format version {header.get('format_version')!r}")
    if int(header["n_trials"]) != len(trials):
        raise ValueError("plan header n_trials does not match the trial table")
    return ExperimentPlan(
        Condition(header["condition"]), Experiment(header["experiment"]), tuple(trials),
        int(header["seed"]), header.get("subject", ""),
    )


def write_plan(plan: ExperimentPlan, path) -> Path:
    path = Path(path)
    path.write_text(format_plan(plan))
    return path


def read_plan(path) -> ExperimentPlan:
    return parse_plan(Path(path).read_text())


# -- cohort manifest -------------------------------------------------------------

def cohort_to_dict(cohort: CohortPlan) -> dict:
    return {
        "format_version": PLAN_FORMAT_VERSION,
        "seed": cohort.seed,
        "sizes": dict(cohort.sizes),
        "plan_seeds": {f"{c}/{e}": s for (c, e), s in sorted(cohort.plan_seeds.items())},
        "subjects": [
            {"id": s.id, "index": s.index, "condition": s.condition.value, "seed": s.seed,
             "order": [e.value for e in s.order], "plan_seed": s.plan_seed}
            for s in cohort.subjects
        ],
    }


def cohort_from_dict(d: dict) -> CohortPlan:
    if int(d.get("format_version", -1)) != PLAN_FORMAT_VERSION:
        raise ValueError(f"unsupported cohort format version {d.get('format_version')!r}")
    subjects = tuple(
        Subject(s["id"], int(s["index"]), Condition(s["condition"]), int(s["seed"]),
                (Experiment(s["order"][0]), Experiment(s["order"][1])), s.get("plan_seed"))
        for s in d["subjects"]
    )
    plan_seeds = {tuple(k.split("/")): int(v) for k, v in d["plan_seeds"].items()}
    return CohortPlan(int(d["seed"]), dict(d["sizes"]), subjects, plan_seeds)


def write_cohort(cohort: CohortPlan, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(cohort_to_dict(cohort), indent=2, sort_keys=True) + "\n")
    return path


def read_cohort(path) -> CohortPlan:
    return cohort_from_dict(json.loads(Path(path).read_text()))
