"""Random-intercept linear mixed models and the transparency verdict.

Model for one statistic (e.g. per-subject mean MGA per object)::

    y = b0 + b_cond + (b_d + b_d:cond) * (d - 8) + u_subject + e

with treatment coding against the first condition present (``fine``
normally). Because diameter is centred at 8 mm, ``b0 + b_cond`` is the
adjusted mean of each condition and ``b_d + b_d:cond`` its slope.

REML is profiled down to the variance ratio ``lam = s2_u / s2_e``: for a
given ``lam`` the GLS coefficients and residual variance have closed forms,
so only a 1-D search remains. A bounded Brent search over ``log lam``
locates the optimum, which is then polished by root-finding on the analytic
derivative of the profiled objective.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import pandas as pd
from scipy import linalg, optimize
from scipy import stats as sps

CONDITION_ORDER = ("fine", "normal", "quick")
CENTER_MM = 8.0
LOG_METRICS = ("reaction_time", "transport_time", "total_time", "perception_time")


class RankDeficientError(ValueError):
    def __init__(self, columns):
        super().__init__(f"design matrix is rank deficient; collinear columns: {', '.join(columns)}")
        self.columns = list(columns)


class ConvergenceError(RuntimeError):
    pass


@dataclass
class LongTable:
    """One row per subject x object for a single statistic."""

    subject: np.ndarray
    condition: np.ndarray
    diameter: np.ndarray
    value: np.ndarray
    metric: str = ""
    transform: str = "identity"

    def __post_init__(self):
        self.subject = np.asarray(self.subject).astype(str)
        self.condition = np.asarray(self.condition).astype(str)
        self.diameter = np.asarray(self.diameter, dtype=float)
        self.value = np.asarray(self.value, dtype=float)
        n = self.value.size
        if not (self.subject.size == self.condition.size == self.diameter.size == n):
            raise ValueError("LongTable columns must have equal length")
        if self.transform not in ("identity", "log"):
            raise ValueError(f"unknown transform {self.transform!r}")
        pairs = pd.Series(list(zip(self.subject, self.diameter)))
        if pairs.duplicated().any():
            raise ValueError("LongTable must have one row per subject x object")

    def response(self) -> np.ndarray:
        if self.transform == "log":
            if np.any(self.value <= 0):
                raise ValueError("log transform needs strictly positive values")
            return np.log(self.value)
        return self.value

    def dropna(self) -> "LongTable":
        keep = np.isfinite(self.value)
        return LongTable(self.subject[keep], self.condition[keep], self.diameter[keep], self.value[keep],
                         self.metric, self.transform)

    @classmethod
    def from_frame(cls, df: pd.DataFrame, column: str, metric: str | None = None,
                   transform: str | None = None) -> "LongTable":
        if transform is None:
            base = column.rsplit("_", 1)[0]
            transform = "log" if base in LOG_METRICS and column.endswith("_mean") else "identity"
        return cls(df["subject"].to_numpy(), df["condition"].to_numpy(), df["diameter_mm"].to_numpy(),
                   df[column].to_numpy(), metric or column, transform).dropna()


@dataclass
class SlopeTest:
    condition: str
    slope: float
    se: float
    t: float
    df: float
    p: float
    alternative: str


@dataclass
class FitResult:
    metric: str
    transform: str
    levels: list
    coef_names: list
    beta: np.ndarray
    cov_beta: np.ndarray
    sigma2_u: float
    sigma2_e: float
    lam: float
    boundary: bool
    n_obs: int
    n_subjects: int
    reml_criterion: float
    df_method: str
    fitted: np.ndarray
    residuals: np.ndarray  # conditional: y - X beta - Z u
    random_effects: dict
    center: float = CENTER_MM
    slopes: dict = field(default_factory=dict)
    adjusted: dict = field(default_factory=dict)
    anova: dict = field(default_factory=dict)
    _sat: object = field(default=None, repr=False)

    @property
    def se(self) -> np.ndarray:
        return np.sqrt(np.diag(self.cov_beta))

    def coef(self) -> dict:
        return dict(zip(self.coef_names, self.beta))

    def contrast(self, L) -> tuple[float, float, float]:
        """Estimate, SE and denominator df of ``L @ beta``."""
        L = np.asarray(L, dtype=float)
        est = float(L @ self.beta)
        var = float(L @ self.cov_beta @ L)
        return est, math.sqrt(max(var, 0.0)), self._sat.df(L)

    def slope_vector(self, cond: str) -> np.ndarray:
        L = np.zeros(len(self.coef_names))
        L[self.coef_names.index("diameter")] = 1.0
        if cond != self.levels[0]:
            L[self.coef_names.index(f"diameter:cond[{cond}]")] = 1.0
        return L

    def mean_vector(self, cond: str) -> np.ndarray:
        L = np.zeros(len(self.coef_names))
        L[0] = 1.0
        if cond != self.levels[0]:
            L[self.coef_names.index(f"cond[{cond}]")] = 1.0
        return L

    def to_dict(self) -> dict:
        return {
            "metric": self.metric, "transform": self.transform, "levels": list(self.levels),
            "coefficients": {n: {"estimate": float(b), "se": float(s)}
                             for n, b, s in zip(self.coef_names, self.beta, self.se)},
            "sigma2_subject": self.sigma2_u, "sigma2_residual": self.sigma2_e, "variance_ratio": self.lam,
            "boundary": self.boundary, "n_obs": self.n_obs, "n_subjects": self.n_subjects,
            "reml_criterion": self.reml_criterion, "df_method": self.df_method,
            "slopes": {c: vars(s) for c, s in self.slopes.items()},
            "adjusted_means": self.adjusted,
            "anova": self.anova,
        }


# -- design -------------------------------------------------------------------

def design(table: LongTable, center: float = CENTER_MM):
    present = set(table.condition)
    levels = [c for c in CONDITION_ORDER if c in present] + sorted(present - set(CONDITION_ORDER))
    d = table.diameter - center
    cols, names = [np.ones_like(d)], ["intercept"]
    for c in levels[1:]:
        cols.append((table.condition == c).astype(float))
        names.append(f"cond[{c}]")
    cols.append(d)
    names.append("diameter")
    for c in levels[1:]:
        cols.append(d * (table.condition == c))
        names.append(f"diameter:cond[{c}]")
    return np.column_stack(cols), names, levels


def _check_rank(X, names):
    _, r, piv = linalg.qr(X, mode="economic", pivoting=True)
    tol = np.abs(r[0, 0]) * max(X.shape) * np.finfo(float).eps
    rank = int(np.sum(np.abs(np.diag(r)) > tol))
    if rank < X.shape[1]:
        raise RankDeficientError([names[i] for i in sorted(piv[rank:])])


class _Profile:
    """Sufficient statistics for the REML profile in the variance ratio."""

    def __init__(self, X, y, groups):
        self.X, self.y = X, y
        self.N, self.p = X.shape
        codes, uniq = pd.factorize(groups, sort=True)
        self.codes, self.subjects = codes, np.asarray(uniq)
        m = len(uniq)
        self.n_i = np.bincount(codes, minlength=m).astype(float)
        self.S = np.zeros((m, self.p))
        np.add.at(self.S, codes, X)
        self.ty = np.bincount(codes, weights=y, minlength=m)
        self.XtX = X.T @ X
        self.Xty = X.T @ y
        self.yty = float(y @ y)

    def solve(self, lam):
        c = lam / (1.0 + lam * self.n_i)
        A = self.XtX - (self.S.T * c) @ self.S
        b = self.Xty - self.S.T @ (c * self.ty)
        cf = linalg.cho_factor(A)
        beta = linalg.cho_solve(cf, b)
        rHr = self.yty - float(self.ty @ (c * self.ty)) - float(b @ beta)
        return A, cf, beta, rHr

    def objective(self, lam) -> float:
        """-2 x restricted log-likelihood, profiled over beta and s2_e (constants dropped)."""
        _, cf, _, rHr = self.solve(lam)
        dof = self.N - self.p
        logdet = 2.0 * np.sum(np.log(np.diag(cf[0])))
        return dof * math.log(rHr / dof) + float(np.sum(np.log1p(lam * self.n_i))) + logdet

    def gradient(self, lam) -> float:
        A, cf, beta, rHr = self.solve(lam)
        dc = 1.0 / (1.0 + lam * self.n_i) ** 2
        R = self.ty - self.S @ beta
        D = (self.S.T * dc) @ self.S
        tr = float(np.trace(linalg.cho_solve(cf, D)))
        dof = self.N - self.p
        return -dof * float(np.sum(dc * R * R)) / rHr + float(np.sum(self.n_i / (1.0 + lam * self.n_i))) - tr


def _optimize_ratio(prof: _Profile, rtol: float = 1e-10):
    lo_u, hi_u = math.log(1e-10), math.log(1e10)
    res = optimize.minimize_scalar(lambda u: prof.objective(math.exp(u)), bounds=(lo_u, hi_u),
                                   method="bounded", options={"xatol": 1e-6, "maxiter": 500})
    f0 = prof.objective(0.0)
    if prof.gradient(0.0) >= 0 and f0 <= res.fun + 1e-12:
        return 0.0, True
    lam0 = math.exp(res.x)
    lo, hi = lam0, lam0
    for _ in range(200):
        if prof.gradient(lo) < 0:
            break
        lo /= 2.0
    for _ in range(200):
        if prof.gradient(hi) > 0:
            break
        hi *= 2.0
    glo, ghi = prof.gradient(lo), prof.gradient(hi)
    if not (glo < 0 < ghi):
        if f0 <= res.fun:
            return 0.0, True
        raise ConvergenceError(
            f"could not bracket the REML optimum: lam in [{lo:.3g}, {hi:.3g}], score [{glo:.3g}, {ghi:.3g}]")
    lam = optimize.brentq(prof.gradient, lo, hi, xtol=1e-300, rtol=max(rtol * 1e-4, 4 * np.finfo(float).eps),
                          maxiter=500)
    if prof.objective(lam) > f0:
        return 0.0, True
    return lam, False


class _Satterthwaite:
    def __init__(self, X, groups_codes, s2u, s2e, method="satterthwaite"):
        self.method = method
        N, p = X.shape
        self.resid_df = float(N - p)
        Z = np.zeros((N, groups_codes.max() + 1))
        Z[np.arange(N), groups_codes] = 1.0
        ZZ = Z @ Z.T
        V = s2u * ZZ + s2e * np.eye(N)
        Vinv = linalg.inv(V, check_finite=False)
        Vinv = 0.5 * (Vinv + Vinv.T)
        XtVi = X.T @ Vinv
        C = linalg.inv(XtVi @ X)
        P = Vinv - XtVi.T @ C @ XtVi
        mats = (ZZ, np.eye(N))
        PV = [P @ M for M in mats]
        info = np.array([[0.5 * np.sum(PV[k] * PV[l].T) for l in range(2)] for k in range(2)])
        self.C = C
        self.G = [C @ XtVi @ M @ XtVi.T @ C for M in mats]
        try:
            self.A = linalg.inv(info)
            self.ok = bool(np.all(np.isfinite(self.A)))
        except linalg.LinAlgError:
            self.ok = False
        if method == "satterthwaite" and not self.ok:
            self.method = "residual"

    def df(self, L) -> float:
        if self.method != "satterthwaite":
            return self.resid_df
        L = np.asarray(L, dtype=float)
        var = float(L @ self.C @ L)
        g = np.array([float(L @ G @ L) for G in self.G])
        denom = float(g @ self.A @ g)
        if denom <= 0 or not np.isfinite(denom):
            return self.resid_df
        return 2.0 * var * var / denom

    def f_test(self, Lmat, beta):
        Lmat = np.atleast_2d(np.asarray(Lmat, dtype=float))
        q = Lmat.shape[0]
        LCL = Lmat @ self.C @ Lmat.T
        est = Lmat @ beta
        F = float(est @ linalg.solve(LCL, est)) / q
        if self.method != "satterthwaite":
            den = self.resid_df
        else:
            w, U = linalg.eigh(LCL)
            nus = np.array([self.df(U[:, m] @ Lmat) for m in range(q)])
            E = float(np.sum(nus[nus > 2] / (nus[nus > 2] - 2)))
            den = 2 * E / (E - q) if E > q else self.resid_df
        return {"F": F, "num_df": q, "den_df": float(den), "p": float(sps.f.sf(F, q, den))}


def fit_lmm(table: LongTable, df_method: str = "satterthwaite", center: float = CENTER_MM) -> FitResult:
    """REML fit of the random-intercept model; see the module docstring."""
    if df_method not in ("satterthwaite", "residual"):
        raise ValueError(f"unknown df_method {df_method!r}")
    tab = table.dropna()
    y = tab.response()
    X, names, levels = design(tab, center)
    counts = pd.Series(tab.subject).groupby(tab.condition).nunique()
    if (counts < 2).any():
        raise ValueError(f"need >= 2 subjects per condition, got {counts.to_dict()}")
    _check_rank(X, names)
    prof = _Profile(X, y, tab.subject)
    # as lam -> inf the residual tends to the within-subject residual
    if prof.solve(1e10)[3] <= 1e-8 * prof.solve(0.0)[3]:
        raise ConvergenceError("within-subject residual variance is zero; the data are fitted exactly")
    lam, boundary = _optimize_ratio(prof)
    A, cf, beta, rHr = prof.solve(lam)
    s2e = rHr / (prof.N - prof.p)
    s2u = lam * s2e
    cov = s2e * linalg.cho_solve(cf, np.eye(prof.p))
    fitted = X @ beta
    c = lam / (1.0 + lam * prof.n_i)
    u = c * (prof.ty - prof.S @ beta)
    resid = y - fitted - u[prof.codes]
    sat = _Satterthwaite(X, prof.codes, s2u, s2e, df_method)
    fit = FitResult(
        metric=tab.metric, transform=tab.transform, levels=levels, coef_names=names, beta=beta, cov_beta=cov,
        sigma2_u=float(s2u), sigma2_e=float(s2e), lam=float(lam), boundary=boundary, n_obs=prof.N,
        n_subjects=len(prof.subjects), reml_criterion=prof.objective(lam), df_method=sat.method,
        fitted=fitted, residuals=resid, random_effects=dict(zip(prof.subjects.tolist(), u.tolist())),
        center=center, _sat=sat,
    )
    fit.slopes = {c: _test(fit, c, fit.slope_vector(c), "two-sided") for c in levels}
    fit.adjusted = adjusted_means(fit)
    fit.anova = _anova(fit)
    return fit


def reml_profile(table: LongTable, center: float = CENTER_MM):
    """Callable ``lam -> profiled -2 REML`` for diagnostics (e.g. stationarity checks)."""
    tab = table.dropna()
    X, _, _ = design(tab, center)
    return _Profile(X, tab.response(), tab.subject).objective


def _anova(fit: FitResult) -> dict:
    names, p = fit.coef_names, len(fit.coef_names)
    out = {}
    k = len(fit.levels) - 1
    if k:
        L = np.zeros((k, p))
        for i, c in enumerate(fit.levels[1:]):
            L[i, names.index(f"cond[{c}]")] = 1.0
        out["condition"] = fit._sat.f_test(L, fit.beta)
        Li = np.zeros((k, p))
        for i, c in enumerate(fit.levels[1:]):
            Li[i, names.index(f"diameter:cond[{c}]")] = 1.0
        out["interaction"] = fit._sat.f_test(Li, fit.beta)
    Ld = np.mean([fit.slope_vector(c) for c in fit.levels], axis=0)
    out["diameter"] = fit._sat.f_test(Ld[None, :], fit.beta)
    return out


def _p_value(t, df, alternative):
    if alternative == "greater":
        return float(sps.t.sf(t, df))
    if alternative == "less":
        return float(sps.t.cdf(t, df))
    if alternative == "two-sided":
        return float(2 * sps.t.sf(abs(t), df))
    raise ValueError(f"unknown alternative {alternative!r}")


def _test(fit, cond, L, alternative):
    est, se, df = fit.contrast(L)
    t = est / se if se > 0 else (math.copysign(math.inf, est) if est else 0.0)
    return SlopeTest(cond, est, se, t, df, _p_value(t, df, alternative), alternative)


def slope_tests(fit: FitResult, alternative="greater") -> dict:
    """Per-condition slope t-tests. ``alternative`` is one string or a dict per condition."""
    alt = alternative if isinstance(alternative, dict) else {c: alternative for c in fit.levels}
    return {c: _test(fit, c, fit.slope_vector(c), alt.get(c, "two-sided")) for c in fit.levels}


def adjusted_means(fit: FitResult, level: float = 0.95) -> dict:
    out = {}
    for c in fit.levels:
        est, se, df = fit.contrast(fit.mean_vector(c))
        q = sps.t.ppf(0.5 + level / 2, df)
        out[c] = {"estimate": est, "se": se, "df": df, "ci_low": est - q * se, "ci_high": est + q * se,
                  "diameter_mm": fit.center}
    return out


def equivalence_test(fit: FitResult, cond: str, margin: float) -> float:
    """Two one-sided tests that the slope lies within ``(-margin, margin)``; returns the TOST p."""
    est, se, df = fit.contrast(fit.slope_vector(cond))
    p_low = float(sps.t.sf((est + margin) / se, df))
    p_high = float(sps.t.cdf((est - margin) / se, df))
    return max(p_low, p_high)


# -- oracles and diagnostics --------------------------------------------------

@dataclass
class TwoStageResult:
    condition: str
    mean_slope: float
    sd_slope: float
    n: int
    t: float
    df: int
    p: float
    mean_intercept: float
    subject_slopes: dict


def two_stage_ols(table: LongTable, center: float = CENTER_MM, alternative: str = "two-sided") -> dict:
    """Per-subject OLS lines, then a one-sample t-test of slopes per condition."""
    tab = table.dropna()
    y = tab.response()
    out = {}
    present = [c for c in CONDITION_ORDER if c in set(tab.condition)]
    for cond in present:
        slopes, intercepts = {}, []
        for subj in sorted(set(tab.subject[tab.condition == cond])):
            m = (tab.subject == subj)
            d = tab.diameter[m]
            if np.unique(d).size < 2:
                warnings.warn(f"subject {subj} has < 2 diameters; dropped from two-stage OLS", stacklevel=2)
                continue
            dc = d - center
            X = np.column_stack([np.ones_like(dc), dc])
            coef, *_ = np.linalg.lstsq(X, y[m], rcond=None)
            slopes[subj] = float(coef[1])
            intercepts.append(float(coef[0]))
        s = np.array(list(slopes.values()))
        n = s.size
        sd = float(s.std(ddof=1)) if n > 1 else math.nan
        mean = float(s.mean()) if n else math.nan
        se = sd / math.sqrt(n) if n > 1 else math.nan
        if n > 1 and se > 0:
            t = mean / se
            p = _p_value(t, n - 1, alternative)
        else:
            t, p = (math.copysign(math.inf, mean) if mean else math.nan), (0.0 if mean else math.nan)
        out[cond] = TwoStageResult(cond, mean, sd, n, t, n - 1, p, float(np.mean(intercepts)) if n else math.nan,
                                   slopes)
    return out


def anova_variance_components(table: LongTable, center: float = CENTER_MM) -> tuple[float, float]:
    """Method-of-moments ``(s2_u, s2_e)`` for a balanced design.

    ``s2_e`` is the within-subject residual mean square after per-subject
    intercepts and per-condition slopes; ``s2_u = max(0, (MS_subject -
    MS_error) / J)`` with ``J`` observations per subject.
    """
    tab = table.dropna()
    y = tab.response()
    d = tab.diameter - center
    subjects = sorted(set(tab.subject))
    J = {int(np.sum(tab.subject == s)) for s in subjects}
    if len(J) != 1:
        raise ValueError("ANOVA estimators need a balanced design")
    J = J.pop()
    conds = [c for c in CONDITION_ORDER if c in set(tab.condition)]
    ss_err, ss_subj = 0.0, 0.0
    for c in conds:
        mc = tab.condition == c
        subs = sorted(set(tab.subject[mc]))
        dev_d = np.concatenate([d[tab.subject == s] - d[tab.subject == s].mean() for s in subs])
        dev_y = np.concatenate([y[tab.subject == s] - y[tab.subject == s].mean() for s in subs])
        b = float(dev_d @ dev_y / (dev_d @ dev_d))
        ss_err += float(np.sum((dev_y - b * dev_d) ** 2))
        means = np.array([y[tab.subject == s].mean() for s in subs])
        ss_subj += J * float(np.sum((means - means.mean()) ** 2))
    n_subj = len(subjects)
    ms_err = ss_err / (tab.value.size - n_subj - len(conds))
    ms_subj = ss_subj / (n_subj - len(conds))
    return max(0.0, (ms_subj - ms_err) / J), ms_err


def bartlett(*groups) -> tuple[float, int, float]:
    """Bartlett's test for equal variances; returns ``(statistic, df, p)``."""
    if len(groups) == 1 and not np.isscalar(groups[0][0]):
        groups = tuple(groups[0])
    k = len(groups)
    if k < 2:
        raise ValueError("Bartlett's test needs at least two groups")
    n = np.array([len(g) for g in groups], dtype=float)
    if np.any(n < 2):
        raise ValueError("every group needs n >= 2")
    v = np.array([np.var(np.asarray(g, dtype=float), ddof=1) for g in groups])
    if np.any(v <= 0):
        raise ValueError("Bartlett's test is undefined for a zero-variance group")
    w = n - 1.0
    W = w.sum()
    # ln(pooled / s_i^2) computed as a ratio so identical groups give exactly 0
    log_ratio = np.array([math.log(float(np.sum(w * (v / vi))) / W) for vi in v])
    num = float(np.sum(w * log_ratio))
    corr = 1.0 + (np.sum(1.0 / w) - 1.0 / W) / (3.0 * (k - 1))
    stat = num / corr
    return stat, k - 1, float(sps.chi2.sf(stat, k - 1))


def residual_bartlett(fit: FitResult, table: LongTable) -> dict:
    tab = table.dropna()
    groups = [fit.residuals[tab.condition == c] for c in fit.levels]
    stat, df, p = bartlett(*groups)
    return {"statistic": stat, "df": df, "p": p}


def qq_residuals(fit_or_residuals) -> pd.DataFrame:
    r = fit_or_residuals.residuals if isinstance(fit_or_residuals, FitResult) else np.asarray(fit_or_residuals)
    r = np.sort(np.asarray(r, dtype=float))
    n = r.size
    theo = sps.norm.ppf((np.arange(1, n + 1) - 0.5) / n)
    return pd.DataFrame({"theoretical": theo, "empirical": r})


# -- verdict ------------------------------------------------------------------

@dataclass
class ConditionVerdict:
    condition: str
    action_mean_ok: bool
    action_sd_weber_violated: bool
    perception_mean_ok: bool
    perception_sd_weber_obeyed: bool
    evidence: dict

    @property
    def transparent(self) -> bool:
        return (self.action_mean_ok and self.action_sd_weber_violated
                and self.perception_mean_ok and self.perception_sd_weber_obeyed)

    def to_dict(self) -> dict:
        return {"condition": self.condition, "transparent": self.transparent,
                "action_mean_ok": self.action_mean_ok, "action_sd_weber_violated": self.action_sd_weber_violated,
                "perception_mean_ok": self.perception_mean_ok,
                "perception_sd_weber_obeyed": self.perception_sd_weber_obeyed, "evidence": self.evidence}


@dataclass
class TransparencyVerdict:
    conditions: dict
    alpha: float
    sd_mode: str

    @property
    def transparent(self) -> dict:
        return {c: v.transparent for c, v in self.conditions.items()}

    def to_dict(self) -> dict:
        return {"alpha": self.alpha, "sd_mode": self.sd_mode, "transparent": self.transparent,
                "conditions": {c: v.to_dict() for c, v in self.conditions.items()}}


def transparency_verdict(action_mean: FitResult, action_sd: FitResult, perception_mean: FitResult,
                         perception_sd: FitResult, alpha: float = 0.05, sd_mode: str = "nonsignificant",
                         margin: float | None = None) -> TransparencyVerdict:
    """Per-condition human-centred transparency decision.

    A condition is transparent when mean MGA and mean PS both grow with
    object size, MGA variability does not (non-significant two-sided slope,
    or TOST equivalence within ``margin`` when ``sd_mode='equivalence'``)
    and PS variability does. Conditions are never compared with each other.
    """
    if sd_mode not in ("nonsignificant", "equivalence"):
        raise ValueError(f"unknown sd_mode {sd_mode!r}")
    if sd_mode == "equivalence" and margin is None:
        raise ValueError("equivalence mode needs a margin")
    am = slope_tests(action_mean, "greater")
    asd = slope_tests(action_sd, "two-sided")
    pm = slope_tests(perception_mean, "greater")
    psd = slope_tests(perception_sd, "greater")
    out = {}
    for c in action_mean.levels:
        if sd_mode == "equivalence":
            p_eq = equivalence_test(action_sd, c, margin)
            violated = p_eq < alpha
        else:
            p_eq = None
            violated = asd[c].p >= alpha
        ev = {
            "action_mean": {"slope": am[c].slope, "t": am[c].t, "df": am[c].df, "p": am[c].p},
            "action_sd": {"slope": asd[c].slope, "t": asd[c].t, "df": asd[c].df, "p": asd[c].p,
                          "p_less": _p_value(asd[c].t, asd[c].df, "less"), "p_equivalence": p_eq},
            "perception_mean": {"slope": pm[c].slope, "t": pm[c].t, "df": pm[c].df, "p": pm[c].p},
            "perception_sd": {"slope": psd[c].slope, "t": psd[c].t, "df": psd[c].df, "p": psd[c].p},
        }
        out[c] = ConditionVerdict(
            c,
            action_mean_ok=bool(am[c].slope > 0 and am[c].p < alpha),
            action_sd_weber_violated=bool(violated),
            perception_mean_ok=bool(pm[c].slope > 0 and pm[c].p < alpha),
            perception_sd_weber_obeyed=bool(psd[c].slope > 0 and psd[c].p < alpha),
            evidence=ev,
        )
    return TransparencyVerdict(out, alpha, sd_mode)
