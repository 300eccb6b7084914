"""Monte Carlo coverage studies for the group-mean estimators and intervals.

Two designs are supported, both with covariate row (1, X, U, t):

* time: two treatment arms observed at t = 0 and t = 1, with dropout only
  at t = 1 realized as deterministic truncation to the configured counts;
  groups are treatment x time, one observation per subject in each group.
* gender: four groups of treatment x gender with t constant within subject
  and two repeated observations per subject, so the random-intercept
  variance stays identifiable from within-subject agreement.  Group sizes
  are arm_sizes[0] female and arm_sizes[3] male observations per arm,
  keeping the total information at the time design's scale.

Replications are independent streams spawned from one seed and may run in
parallel processes; aggregation is an ordered reduction, so reports are
reproducible bit for bit regardless of worker count.
"""

from __future__ import annotations

import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .families import Family, family_ops
from .conditional import conditional_estimates, predictor_at_mean_covariate
from .fitter import FitConfig, fit
from .marginal import marginal_estimates, mean_at_mean_covariate
from .model import Dataset, ModelSpec, SubjectBlock
from .quadrature import logistic_normal_integral

LOGISTIC_BETA = (-0.3, -3.0, 2.0, 0.2)
NEGBIN_BETA = (0.3, -0.2, 0.3, 0.4)


@dataclass(frozen=True)
class SimDesign:
    family: Family
    beta: tuple[float, float, float, float]
    sigma: float
    kappa: float | None = None
    baseline: str = "bernoulli"  # T1 = 1; "uniform" is T1 = 2
    control: str = "gender"      # T2 = 1; "time" is T2 = 2
    arm_sizes: tuple[int, int, int, int] = (200, 180, 200, 160)
    replications: int = 500
    seed: int = 0
    alpha: float = 0.05

    def __post_init__(self):
        if self.baseline not in ("bernoulli", "uniform"):
            raise ValueError(f"unknown baseline type {self.baseline!r}")
        if self.control not in ("gender", "time"):
            raise ValueError(f"unknown control type {self.control!r}")
        if any(n <= 0 for n in self.arm_sizes):
            raise ValueError("arm sizes must be positive")
        if self.replications < 1:
            raise ValueError("replications must be >= 1")
        if self.family is Family.NEGBIN and (self.kappa is None or self.kappa <= 0):
            raise ValueError("negative-binomial designs need kappa > 0")

    @property
    def t1(self) -> int:
        return 1 if self.baseline == "bernoulli" else 2

    @property
    def t2(self) -> int:
        return 1 if self.control == "gender" else 2

    @property
    def p(self) -> int:
        return 4


def logistic_design(**kwargs) -> SimDesign:
    """Logistic study: default coefficients (-0.3, -3.0, 2.0, 0.2) and sigma = 0.5."""
    kwargs.setdefault("beta", LOGISTIC_BETA)
    kwargs.setdefault("sigma", 0.5)
    return SimDesign(family=Family.LOGISTIC, **kwargs)


def negbin_design(**kwargs) -> SimDesign:
    """Negative-binomial study with kappa = 50 and sigma = 0.1 defaults."""
    kwargs.setdefault("beta", NEGBIN_BETA)
    kwargs.setdefault("sigma", 0.1)
    kwargs.setdefault("kappa", 50.0)
    return SimDesign(family=Family.NEGBIN, **kwargs)


def group_label(u: int, t: int) -> str:
    return f"u{u}_t{t}"


# ---- the covariate frame ----------------------------------------------------
#
# The covariate layout is a fixed property of the design, not redrawn per
# replication: the baseline covariate is allocated deterministically with
# the composition of its nominal distribution (alternating 0/1 for the
# Bernoulli type, a van der Corput sequence for the Uniform type, whose
# prefixes stay uniform under dropout).  Only the random intercepts and the
# responses are drawn.  This makes the fixed group mean of each design an
# exact population target, so confidence-interval coverage is measured
# against a constant.


def _van_der_corput(n: int) -> np.ndarray:
    out = np.empty(n)
    for i in range(1, n + 1):
        v, denom, k = 0.0, 1.0, i
        while k:
            denom *= 2.0
            k, r = divmod(k, 2)
            v += r / denom
        out[i - 1] = v
    return out


def _baseline_values(design: SimDesign, n: int) -> np.ndarray:
    if design.baseline == "bernoulli":
        return (np.arange(n) % 2).astype(float)
    return _van_der_corput(n)


@dataclass(frozen=True, eq=False)
class _Frame:
    X: np.ndarray           # (N, 4) rows (1, x, u, t)
    subj: np.ndarray        # (N,) subject index
    groups: np.ndarray      # (N,) group labels
    slices: tuple           # per-subject (start, n_rows)
    n_subjects: int


def _build_frame(design: SimDesign) -> _Frame:
    subj_rows: list[list[tuple[float, int, int]]] = []  # per subject: [(x, u, t), ...]
    if design.control == "time":
        plan = [(1, design.arm_sizes[0], design.arm_sizes[1]),
                (0, design.arm_sizes[2], design.arm_sizes[3])]
        for u, n_total, n_second in plan:
            x_arm = _baseline_values(design, n_total)
            for i in range(n_total):
                rows = [(x_arm[i], u, 0)]
                if i < n_second:
                    rows.append((x_arm[i], u, 1))
                subj_rows.append(rows)
    else:
        n_female = design.arm_sizes[0] // 2
        n_male = design.arm_sizes[3] // 2
        for u in (1, 0):
            for t, n_subj in ((0, n_female), (1, n_male)):
                x_cell = _baseline_values(design, n_subj)
                for i in range(n_subj):
                    subj_rows.append([(x_cell[i], u, t), (x_cell[i], u, t)])

    rows_x, rows_subj, rows_group, slices = [], [], [], []
    pos = 0
    for i, rows in enumerate(subj_rows):
        slices.append((pos, len(rows)))
        for x_val, u, t in rows:
            rows_x.append([1.0, x_val, float(u), float(t)])
            rows_subj.append(i)
            rows_group.append(group_label(u, t))
        pos += len(rows)
    return _Frame(
        X=np.asarray(rows_x),
        subj=np.asarray(rows_subj),
        groups=np.asarray(rows_group),
        slices=tuple(slices),
        n_subjects=len(subj_rows),
    )


_FRAME_CACHE: dict[tuple, _Frame] = {}


def _covariate_frame(design: SimDesign) -> _Frame:
    key = (design.family, design.baseline, design.control, design.arm_sizes)
    frame = _FRAME_CACHE.get(key)
    if frame is None:
        frame = _FRAME_CACHE[key] = _build_frame(design)
    return frame


def _generate(design: SimDesign, rng):
    """One replication: the dataset, plus realized conditional group means."""
    frame = _covariate_frame(design)
    xi = rng.normal(0.0, design.sigma, size=frame.n_subjects)
    eta_true = frame.X @ np.asarray(design.beta) + xi[frame.subj]

    ops = family_ops(design.family)
    mu = ops.inverse_link(eta_true)
    y = ops.sample(rng, mu, design.kappa)

    subjects = []
    for i, (pos, n_i) in enumerate(frame.slices):
        sl = slice(pos, pos + n_i)
        subjects.append(
            SubjectBlock(
                subject_id=f"s{i:05d}",
                y=y[sl],
                X=frame.X[sl],
                groups=tuple(frame.groups[sl]),
            )
        )
    dataset = Dataset(subjects)

    lam = {
        gid: float(np.mean(mu[frame.groups == gid]))
        for gid in dict.fromkeys(frame.groups.tolist())
    }
    return dataset, lam


def generate_dataset(design: SimDesign, seed: int | None = None) -> Dataset:
    """Draw one synthetic dataset for the design (see `generate_replication`)."""
    return generate_replication(design, seed)[0]


def generate_replication(design: SimDesign, seed: int | None = None):
    """Draw one dataset together with its realized conditional group means."""
    rng = np.random.default_rng(design.seed if seed is None else seed)
    return _generate(design, rng)


# ---- true group means ------------------------------------------------------


def true_marginal_means(design: SimDesign) -> dict[str, float]:
    """Fixed marginal mean of each group: the group average of E g^{-1}(x'beta + b).

    Computed once per design over the design's covariate rows, with the
    random intercept integrated out by quadrature (logistic) or in closed
    form (NB).  The balanced covariate allocation makes these match the
    population values of the generating model.
    """
    frame = _covariate_frame(design)
    s2 = design.sigma**2
    eta0 = frame.X @ np.asarray(design.beta)
    if design.family is Family.LOGISTIC:
        vals = np.array([logistic_normal_integral(e, s2) for e in eta0])
    else:
        vals = np.exp(eta0 + s2 / 2.0)
    return {
        gid: float(np.mean(vals[frame.groups == gid]))
        for gid in dict.fromkeys(frame.groups.tolist())
    }


# ---- the study loop ---------------------------------------------------------


def _replicate(args):
    design, seed_seq = args
    rng = np.random.default_rng(seed_seq)
    try:
        dataset, lam_true = _generate(design, rng)
        spec = ModelSpec(family=design.family, p=design.p)
        fitted = fit(dataset, spec, FitConfig())
        if not fitted.converged:
            return {"ok": False, "reason": "non-convergence"}
        marg = marginal_estimates(fitted, design.alpha)
        cond = conditional_estimates(fitted, design.alpha)
        params = {
            "beta": tuple(float(b) for b in fitted.params.beta),
            "sigma2": fitted.params.sigma2,
            "kappa": fitted.params.kappa,
        }
        groups = {}
        for gid in dataset.group_index.group_ids:
            m, c = marg[gid], cond[gid]
            groups[gid] = {
                "ybar": dataset.ybar(gid),
                "mu_point": m.point,
                "mu_var": m.variance,
                "mu_star": mean_at_mean_covariate(fitted, gid),
                "mu_intervals": {k: (iv.lower, iv.upper) for k, iv in m.intervals.items()},
                "lam_point": c.point,
                "lam_var": c.variance,
                "lam_star": predictor_at_mean_covariate(fitted, gid),
                "lam_true": lam_true[gid],
                "lam_intervals": {k: (iv.lower, iv.upper) for k, iv in c.intervals.items()},
            }
        return {"ok": True, "groups": groups, "params": params}
    except Exception as exc:  # a failed replication must not kill the study
        return {"ok": False, "reason": f"{type(exc).__name__}: {exc}"}


@dataclass(frozen=True)
class SimGroupSummary:
    group_id: str
    kind: str  # "marginal" or "conditional"
    u: int
    t: int
    n_obs: int
    truth: float
    ybar_bias_mean: float
    ybar_bias_sd: float
    star_bias_mean: float
    star_bias_sd: float
    est_bias_mean: float
    est_bias_sd: float
    coverage: dict[str, float]


@dataclass(frozen=True)
class SimReport:
    family: str
    t1: int
    t2: int
    arm_sizes: tuple[int, int, int, int]
    replications: int
    seed: int
    alpha: float
    failures: int
    flagged: bool
    marginal: tuple[SimGroupSummary, ...]
    conditional: tuple[SimGroupSummary, ...]
    records: tuple = field(default=(), repr=False, compare=False)

    def row(self, kind: str, group_id: str) -> SimGroupSummary:
        rows = self.marginal if kind == "marginal" else self.conditional
        for r in rows:
            if r.group_id == group_id:
                return r
        raise KeyError(f"no {kind} row for group {group_id!r}")

    def to_rows(self) -> list[dict]:
        out = []
        for row in list(self.marginal) + list(self.conditional):
            out.append(
                {
                    "kind": row.kind,
                    "T1": self.t1,
                    "T2": self.t2,
                    "U": row.u,
                    "t": row.t,
                    "n_obs": row.n_obs,
                    "truth": row.truth,
                    "ybar_bias_mean": row.ybar_bias_mean,
                    "ybar_bias_sd": row.ybar_bias_sd,
                    "star_bias_mean": row.star_bias_mean,
                    "star_bias_sd": row.star_bias_sd,
                    "est_bias_mean": row.est_bias_mean,
                    "est_bias_sd": row.est_bias_sd,
                    "cp_inverse": row.coverage.get("inverse"),
                    "cp_direct": row.coverage.get("direct"),
                    "cp_lognormal": row.coverage.get("lognormal"),
                }
            )
        return out


def _resolve_workers(max_workers: int | None) -> int:
    if max_workers is None:
        env = os.environ.get("GLMM_GM_THREADS")
        max_workers = int(env) if env else (os.cpu_count() or 1)
    return max(1, min(int(max_workers), 16))


def _covers(bounds: tuple[float, float], target: float) -> bool:
    return bounds[0] <= target <= bounds[1]


def run_study(design: SimDesign, max_workers: int | None = None,
              return_records: bool = False) -> SimReport:
    """Replicated generate -> fit -> estimate -> interval pipeline.

    CI coverage is counted against the fixed population mean mu_q; PI
    coverage against each replication's realized conditional mean, which is
    a random target.  Failed or non-converged replications are excluded and
    counted; a study with more than 2% failures is flagged.
    """
    mu_true = true_marginal_means(design)
    seeds = np.random.SeedSequence(design.seed).spawn(design.replications)
    args = [(design, s) for s in seeds]

    workers = _resolve_workers(max_workers)
    if workers > 1 and design.replications >= 4:
        chunk = max(1, design.replications // (workers * 8))
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_replicate, args, chunksize=chunk))
    else:
        results = [_replicate(a) for a in args]

    good = [r for r in results if r["ok"]]
    failures = len(results) - len(good)
    if not good:
        raise RuntimeError("every replication failed; study cannot be summarized")

    group_ids = list(good[0]["groups"].keys())
    marginal_rows = []
    conditional_rows = []
    for gid in group_ids:
        recs = [r["groups"][gid] for r in good]
        u, t = int(gid[1]), int(gid[-1])
        n_obs = _group_n_obs(design, u, t)
        mu = mu_true[gid]

        ybar = np.array([r["ybar"] for r in recs])
        mu_hat = np.array([r["mu_point"] for r in recs])
        mu_star = np.array([r["mu_star"] for r in recs])
        cov_m = {
            lab: float(np.mean([_covers(r["mu_intervals"][lab], mu) for r in recs]))
            for lab in recs[0]["mu_intervals"]
        }
        marginal_rows.append(
            SimGroupSummary(
                group_id=gid, kind="marginal", u=u, t=t, n_obs=n_obs, truth=mu,
                ybar_bias_mean=float(np.mean(ybar - mu)), ybar_bias_sd=float(np.std(ybar - mu)),
                star_bias_mean=float(np.mean(mu_star - mu)), star_bias_sd=float(np.std(mu_star - mu)),
                est_bias_mean=float(np.mean(mu_hat - mu)), est_bias_sd=float(np.std(mu_hat - mu)),
                coverage=cov_m,
            )
        )

        lam = np.array([r["lam_true"] for r in recs])
        lam_hat = np.array([r["lam_point"] for r in recs])
        lam_star = np.array([r["lam_star"] for r in recs])
        cov_c = {
            lab: float(np.mean([_covers(r["lam_intervals"][lab], r["lam_true"]) for r in recs]))
            for lab in recs[0]["lam_intervals"]
        }
        conditional_rows.append(
            SimGroupSummary(
                group_id=gid, kind="conditional", u=u, t=t, n_obs=n_obs, truth=float(np.mean(lam)),
                ybar_bias_mean=float(np.mean(ybar - lam)), ybar_bias_sd=float(np.std(ybar - lam)),
                star_bias_mean=float(np.mean(lam_star - lam)), star_bias_sd=float(np.std(lam_star - lam)),
                est_bias_mean=float(np.mean(lam_hat - lam)), est_bias_sd=float(np.std(lam_hat - lam)),
                coverage=cov_c,
            )
        )

    return SimReport(
        family=design.family.value,
        t1=design.t1,
        t2=design.t2,
        arm_sizes=design.arm_sizes,
        replications=design.replications,
        seed=design.seed,
        alpha=design.alpha,
        failures=failures,
        flagged=failures > 0.02 * design.replications,
        marginal=tuple(marginal_rows),
        conditional=tuple(conditional_rows),
        records=tuple(good) if return_records else (),
    )


def _group_n_obs(design: SimDesign, u: int, t: int) -> int:
    frame = _covariate_frame(design)
    return int(np.sum(frame.groups == group_label(u, t)))
