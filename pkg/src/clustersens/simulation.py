"""Monte Carlo studies of adjusted treatment-effect estimators.

Data are generated under a mechanism where an unmeasured confounder U
drives both the measured covariate and treatment assignment through
threshold rules, making all three dependent. Single-study scenarios fit
the confounded mixed model, remove the analytically known bias factor,
and score bias / spread / interval coverage of the adjusted estimator.
Meta scenarios pool per-study confounded effects and score the estimated
probability of a meaningful effect.

Replicates are keyed counter-based streams (see ``rng``), so results are
identical across worker counts and replicate orderings.
"""

from __future__ import annotations

import json
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import special

from . import normal
from .dataset import ClusteredDataset, ObservationRecord
from .errors import ConvergenceError, DomainError, SingularDesignError, ValidationError
from .meta import BiasDistribution, MetaFit, StudyEffect, dl_variance_of_v_hat, p_of_q, pool
from .mixed_models import LOGISTIC_LATENT_VARIANCE, fit_glmm_logit, fit_lmm
from .rng import replicate_stream
from .sensitivity import confounded_effect

SINGLE_CONTINUOUS = "single_continuous"
SINGLE_BINARY = "single_binary"
META = "meta"
_KINDS = (SINGLE_CONTINUOUS, SINGLE_BINARY, META)

_NONCONVERGENCE_FLAG_FRACTION = 0.05


def nu_from_icc(icc: float) -> float:
    """Random-intercept variance giving a target logistic intraclass correlation."""
    if not 0.0 <= icc < 1.0:
        raise DomainError(f"icc must lie in [0, 1), got {icc}")
    return icc * LOGISTIC_LATENT_VARIANCE / (1.0 - icc)


@dataclass(frozen=True)
class MechanismParams:
    """Threshold rules tying covariate and treatment to the confounder.

    P(X=1|U) switches from x_prob_below to x_prob_above at U = x_threshold;
    P(A=1|U,X) switches from a_prob_below to a_prob_above at U + X = a_threshold.
    """

    x_prob_below: float = 0.5
    x_prob_above: float = 0.4
    x_threshold: float = 1.0
    a_prob_below: float = 0.4
    a_prob_above: float = 0.5
    a_threshold: float = 2.0


@dataclass(frozen=True)
class MetaEffectDistribution:
    """Bivariate normal law of per-study (treatment, interaction) coefficients."""

    mu1: float = 3.0
    mu3: float = 4.0
    v11: float = 2.0
    v33: float = 6.0
    v13: float = 0.05

    def __post_init__(self):
        if self.v11 < 0 or self.v33 < 0 or self.v11 * self.v33 - self.v13**2 <= 0:
            raise ValidationError("effect distribution covariance must be positive definite")

    def conditional_mean(self, x: float) -> float:
        return self.mu1 + x * self.mu3

    def conditional_variance(self, x: float) -> float:
        return self.v11 + x * x * self.v33 + 2.0 * x * self.v13


@dataclass(frozen=True)
class ScenarioConfig:
    """Declarative description of one simulation scenario.

    ``clusters`` is the cluster count J for single-study kinds and the
    mean cluster count for the meta kind (per-study counts are uniform on
    clusters +/- 50). ``theta`` is the confounder effect; for the meta
    kind it is the mean of a per-study normal effect with variance
    ``theta_var``.
    """

    kind: str
    clusters: int
    cluster_size: int
    replications: int
    seed: int
    true_betas: tuple[float, float, float, float] = (1.0, -1.0, 3.0, 1.0)
    theta: float = 0.5
    theta_var: float = 0.0
    sigma_u2: float = 0.25
    nu: float = 4.0
    phi: float = 1.0
    studies: int = 0
    effect_dist: MetaEffectDistribution = field(default_factory=MetaEffectDistribution)
    q: Optional[float] = None
    r: float = 0.4
    quadrature_points: int = 15
    mechanism: MechanismParams = field(default_factory=MechanismParams)

    def __post_init__(self):
        if self.kind not in _KINDS:
            raise ValidationError(f"unknown scenario kind {self.kind!r}")
        for name in ("sigma_u2", "nu", "phi", "theta_var"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0, got {getattr(self, name)}")
        if self.clusters < 2 or self.cluster_size < 1:
            raise ValidationError("need at least 2 clusters of at least 1 unit")
        if self.replications < 1:
            raise ValidationError("replications must be >= 1")
        if self.kind == META and self.studies < 2:
            raise ValidationError("meta scenarios need at least 2 studies")
        if len(self.true_betas) != 4:
            raise ValidationError("true_betas must have 4 entries")


# ---------------------------------------------------------------------------
# The confounder mechanism: exact conditional means and data generation
# ---------------------------------------------------------------------------


def _piecewise_weight(mech: MechanismParams, a: int, x: int):
    """Breakpoints and per-segment weights of P(X=x|u) * P(A=a|u,x)."""
    points = sorted({mech.x_threshold, mech.a_threshold - x})
    edges = [-math.inf, *points, math.inf]
    weights = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        if math.isfinite(lo) and math.isfinite(hi):
            probe = (lo + hi) / 2.0
        elif math.isfinite(hi):
            probe = hi - 1.0
        else:
            probe = lo + 1.0
        px1 = mech.x_prob_below if probe < mech.x_threshold else mech.x_prob_above
        pa1 = mech.a_prob_below if probe + x < mech.a_threshold else mech.a_prob_above
        wx = px1 if x == 1 else 1.0 - px1
        wa = pa1 if a == 1 else 1.0 - pa1
        weights.append(wx * wa)
    return edges, weights


def true_conditional_means(config: ScenarioConfig, a: int, x: int) -> float:
    """E(U | A=a, X=x) under the generating mechanism, by exact integration.

    The conditional probabilities are piecewise constant in U, so the
    integral reduces to truncated-normal masses and first moments per
    segment; the absolute error is at machine level, far below 1e-8.
    """
    if a not in (0, 1) or x not in (0, 1):
        raise DomainError(f"conditioning values must be 0/1, got a={a}, x={x}")
    sigma = math.sqrt(config.sigma_u2)
    if sigma == 0.0:
        return 0.0
    edges, weights = _piecewise_weight(config.mechanism, a, x)
    numerator = 0.0
    denominator = 0.0
    for lo, hi, w in zip(edges[:-1], edges[1:], weights):
        mass = normal.cdf(hi / sigma if math.isfinite(hi) else math.inf) - normal.cdf(
            lo / sigma if math.isfinite(lo) else -math.inf
        )
        pdf_lo = normal.pdf(lo / sigma) / sigma if math.isfinite(lo) else 0.0
        pdf_hi = normal.pdf(hi / sigma) / sigma if math.isfinite(hi) else 0.0
        first_moment = config.sigma_u2 * (pdf_lo - pdf_hi)
        numerator += w * first_moment
        denominator += w * mass
    return numerator / denominator


def bias_factor_true(config: ScenarioConfig, x: int) -> float:
    """theta * (E(U|A=1,X=x) - E(U|A=0,X=x)) under the generating mechanism."""
    return config.theta * (
        true_conditional_means(config, 1, x) - true_conditional_means(config, 0, x)
    )


def _draw_mechanism(rng, n, mech: MechanismParams, sigma_u2: float):
    """U, X, A draws; order is fixed so streams are stable across versions."""
    u = rng.normal(0.0, math.sqrt(sigma_u2), n) if sigma_u2 > 0 else np.zeros(n)
    px = np.where(u < mech.x_threshold, mech.x_prob_below, mech.x_prob_above)
    x = (rng.random(n) < px).astype(float)
    pa = np.where(u + x < mech.a_threshold, mech.a_prob_below, mech.a_prob_above)
    a = (rng.random(n) < pa).astype(float)
    return u, x, a


def _records_from_arrays(y, a, x, u, cluster_size, study_id=None):
    records = []
    for i in range(y.size):
        cluster = i // cluster_size
        records.append(
            ObservationRecord(
                cluster_id=str(cluster + 1),
                unit_index=i % cluster_size,
                outcome=float(y[i]),
                treatment=int(a[i]),
                covariate_x=float(x[i]),
                study_id=study_id,
                truth_u=float(u[i]),
            )
        )
    return records


def _generate_single(config: ScenarioConfig, rng, study_id=None, clusters=None, betas=None, theta=None):
    j = config.clusters if clusters is None else clusters
    b0, b1, b2, b3 = config.true_betas if betas is None else betas
    th = config.theta if theta is None else theta
    n = j * config.cluster_size
    zeta = rng.normal(0.0, math.sqrt(config.nu), j) if config.nu > 0 else np.zeros(j)
    u, x, a = _draw_mechanism(rng, n, config.mechanism, config.sigma_u2)
    eps = rng.normal(0.0, math.sqrt(config.phi), n) if config.phi > 0 else np.zeros(n)
    linear = b0 + b1 * a + b2 * x + b3 * a * x + th * u + np.repeat(zeta, config.cluster_size) + eps
    if config.kind == SINGLE_BINARY:
        y = (rng.random(n) < special.expit(linear)).astype(float)
        scale = "binary"
    else:
        y = linear
        scale = "continuous"
    records = _records_from_arrays(y, a, x, u, config.cluster_size, study_id)
    return ClusteredDataset.from_records(records, scale)


def generate(config: ScenarioConfig, replicate_index: int):
    """Deterministic data for one replicate: a dataset, or a list for meta."""
    rng = replicate_stream(config.seed, replicate_index)
    if config.kind in (SINGLE_CONTINUOUS, SINGLE_BINARY):
        return _generate_single(config, rng)
    # meta: study sizes, per-study effects, then each study's data in order
    k = config.studies
    sizes = rng.integers(config.clusters - 50, config.clusters + 51, size=k)
    dist = config.effect_dist
    cov = np.array([[dist.v11, dist.v13], [dist.v13, dist.v33]])
    study_betas = rng.multivariate_normal([dist.mu1, dist.mu3], cov, size=k)
    thetas = rng.normal(config.theta, math.sqrt(config.theta_var), k)
    b0, _, b2, _ = config.true_betas
    datasets = []
    for s in range(k):
        betas = (b0, study_betas[s, 0], b2, study_betas[s, 1])
        datasets.append(
            _generate_single(
                config,
                rng,
                study_id=str(s + 1),
                clusters=int(sizes[s]),
                betas=betas,
                theta=float(thetas[s]),
            )
        )
    return datasets


# ---------------------------------------------------------------------------
# Replicate workers and metric aggregation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MetricRow:
    x: int
    bias: Optional[float]  # None when no replicate was usable
    se: Optional[float]  # None when fewer than 2 usable replicates
    cp: Optional[float]
    replications_used: int
    truth: float


@dataclass(frozen=True)
class SimMetrics:
    """Bias / spread / coverage per conditioning value.

    se is the empirical standard deviation of the estimator across
    replicates (not a mean reported standard error). flagged marks a
    non-convergence rate above 5%.
    """

    kind: str
    rows: tuple[MetricRow, ...]
    replications: int
    non_converged: int
    flagged: bool
    seed: int
    runtime_seconds: float


def _single_replicate(config: ScenarioConfig, index: int):
    """(estimate, lb, ub) triples at x = 0, 1 for one replicate, or None.

    Non-convergence, separation, and degenerate designs all drop the
    replicate; dropped replicates are counted, never resampled.
    """
    ds = generate(config, index)
    try:
        if config.kind == SINGLE_CONTINUOUS:
            fit = fit_lmm(ds)
        else:
            fit = fit_glmm_logit(ds, config.quadrature_points)
    except (ConvergenceError, SingularDesignError):
        return None
    out = []
    for x in (0, 1):
        eff = confounded_effect(fit, x)
        shift = bias_factor_true(config, x)
        out.append((eff.estimate - shift, eff.lb - shift, eff.ub - shift))
    return out


def _meta_replicate(config: ScenarioConfig, index: int):
    """(p_hat, lo, hi) per x for one replicate, or None when unusable."""
    datasets = generate(config, index)
    fits = []
    for ds in datasets:
        try:
            fits.append(fit_lmm(ds))
        except (ConvergenceError, SingularDesignError):
            return None
    out = []
    for x in (0, 1):
        studies = []
        for ds, fit in zip(datasets, fits):
            eff = confounded_effect(fit, x)
            studies.append(
                StudyEffect(
                    study_id=ds.records[0].study_id or "?",
                    estimate=eff.estimate,
                    within_variance=eff.std_error**2,
                )
            )
        meta_fit = pool(studies)
        delta_m = true_conditional_means(config, 1, x) - true_conditional_means(config, 0, x)
        bias = BiasDistribution(mu_b=config.theta * delta_m, v_b=config.theta_var * delta_m**2)
        if meta_fit.v_hat <= bias.v_b:
            return None
        q = _meta_q(config, x)
        p_hat = p_of_q(meta_fit, bias, q, "positive")
        lo, hi = _delta_interval(meta_fit, bias, q, studies)
        out.append((p_hat, lo, hi))
    return out


def _meta_q(config: ScenarioConfig, x: int) -> float:
    """Meaningful effect size: configured q, else mean - sd/2 of the true law."""
    if config.q is not None:
        return config.q
    dist = config.effect_dist
    return dist.conditional_mean(x) - 0.5 * math.sqrt(dist.conditional_variance(x))


def true_p_of_q(config: ScenarioConfig, x: int) -> float:
    """Closed-form P(study effect > q) under the generating effect law."""
    dist = config.effect_dist
    spread = math.sqrt(dist.conditional_variance(x))
    q = _meta_q(config, x)
    if spread == 0.0:
        return 1.0 if dist.conditional_mean(x) > q else 0.0
    return 1.0 - normal.cdf((q - dist.conditional_mean(x)) / spread)


def _delta_interval(meta_fit: MetaFit, bias: BiasDistribution, q: float, studies):
    """Delta-method 95% interval for the estimated exceedance probability.

    Treats (mu_hat, v_hat) as independent normals: mu_hat with the pooled
    standard error, v_hat with the large-sample moment variance. The
    interval is truncated to [0, 1].
    """
    spread2 = meta_fit.v_hat - bias.v_b
    spread = math.sqrt(spread2)
    z = (q + bias.mu_b - meta_fit.mu_hat) / spread
    dense = normal.pdf(z)
    d_mu = dense / spread
    d_v = dense * z / (2.0 * spread2)
    var_v = dl_variance_of_v_hat(studies, meta_fit.v_hat)
    var_p = d_mu**2 * meta_fit.se_mu**2 + d_v**2 * var_v
    half = normal.ppf(0.975) * math.sqrt(max(var_p, 0.0))
    p_hat = 1.0 - normal.cdf(z)
    return max(0.0, p_hat - half), min(1.0, p_hat + half)


def _run_replicates(config: ScenarioConfig, worker, workers: int):
    indices = range(config.replications)
    if workers <= 1:
        return [worker(config, i) for i in indices]
    with ProcessPoolExecutor(max_workers=workers) as pool_:
        chunk = max(1, config.replications // (8 * workers))
        return list(pool_.map(worker, [config] * config.replications, indices, chunksize=chunk))


def _aggregate(config: ScenarioConfig, results, truths, started) -> SimMetrics:
    usable = [r for r in results if r is not None]
    non_converged = len(results) - len(usable)
    rows = []
    for xi, x in enumerate((0, 1)):
        truth = truths[xi]
        estimates = np.array([r[xi][0] for r in usable])
        covered = np.array([r[xi][1] <= truth <= r[xi][2] for r in usable])
        used = estimates.size
        bias = float(np.mean(estimates) - truth) if used else None
        se = float(np.std(estimates, ddof=1)) if used >= 2 else None
        cp = float(np.mean(covered)) if used else None
        rows.append(MetricRow(x=x, bias=bias, se=se, cp=cp, replications_used=used, truth=truth))
    return SimMetrics(
        kind=config.kind,
        rows=tuple(rows),
        replications=config.replications,
        non_converged=non_converged,
        flagged=non_converged > _NONCONVERGENCE_FLAG_FRACTION * config.replications,
        seed=config.seed,
        runtime_seconds=time.perf_counter() - started,
    )


def run_single_study(config: ScenarioConfig, workers: int = 1) -> SimMetrics:
    """Monte Carlo bias / SE / coverage of the adjusted effect at x = 0, 1."""
    if config.kind not in (SINGLE_CONTINUOUS, SINGLE_BINARY):
        raise ValidationError(f"run_single_study cannot run a {config.kind!r} scenario")
    started = time.perf_counter()
    results = _run_replicates(config, _single_replicate, workers)
    _, b1, _, b3 = config.true_betas
    return _aggregate(config, results, (b1, b1 + b3), started)


def run_meta(config: ScenarioConfig, workers: int = 1) -> SimMetrics:
    """Monte Carlo bias / SE / coverage of the exceedance probability estimator."""
    if config.kind != META:
        raise ValidationError(f"run_meta cannot run a {config.kind!r} scenario")
    started = time.perf_counter()
    results = _run_replicates(config, _meta_replicate, workers)
    truths = (true_p_of_q(config, 0), true_p_of_q(config, 1))
    return _aggregate(config, results, truths, started)


def run_scenario(config: ScenarioConfig, workers: int = 1) -> SimMetrics:
    if config.kind == META:
        return run_meta(config, workers)
    return run_single_study(config, workers)


# ---------------------------------------------------------------------------
# Declarative scenario files
# ---------------------------------------------------------------------------

_SCALAR_KEYS = {
    "kind": str,
    "clusters": int,
    "cluster_size": int,
    "replications": int,
    "seed": int,
    "theta": float,
    "theta_var": float,
    "sigma_u2": float,
    "nu": float,
    "phi": float,
    "studies": int,
    "q": float,
    "r": float,
    "quadrature_points": int,
}


def load_scenario(path) -> ScenarioConfig:
    """Read a scenario config from a JSON file.

    Accepts the ScenarioConfig field names plus "icc" as an alternative to
    "nu" (mapped through the logistic latent variance) and nested
    "effect_dist" / "mechanism" objects. Unknown keys are rejected.
    """
    with open(path, "r", encoding="utf-8") as fh:
        try:
            raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{path}: malformed JSON: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError(f"{path}: scenario file must hold a JSON object")
    kwargs = {}
    for key, value in raw.items():
        if key in _SCALAR_KEYS:
            kwargs[key] = _SCALAR_KEYS[key](value)
        elif key == "true_betas":
            kwargs["true_betas"] = tuple(float(v) for v in value)
        elif key == "icc":
            kwargs["nu"] = nu_from_icc(float(value))
        elif key == "effect_dist":
            kwargs["effect_dist"] = MetaEffectDistribution(**{k: float(v) for k, v in value.items()})
        elif key == "mechanism":
            kwargs["mechanism"] = MechanismParams(**{k: float(v) for k, v in value.items()})
        else:
            raise ValidationError(f"{path}: unknown scenario key {key!r}")
    if "icc" in raw and "nu" in raw:
        raise ValidationError(f"{path}: give either icc or nu, not both")
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ValidationError(f"{path}: incomplete scenario: {exc}") from exc


def metrics_rows(metrics: SimMetrics):
    """Flat rows for CSV emission; runtime is intentionally not included
    so repeated runs of the same scenario are byte-identical."""
    header = ["x", "truth", "bias", "se", "cp", "replications_used", "non_converged", "flagged", "seed"]
    rows = []
    for row in metrics.rows:
        rows.append(
            [
                row.x,
                row.truth,
                row.bias,
                row.se,
                row.cp,
                row.replications_used,
                metrics.non_converged,
                metrics.flagged,
                metrics.seed,
            ]
        )
    return header, rows
