"""Two-step GMM for the precision-dependence model ``theta_i = s_i**beta * v_i``.

Baseline moments use the studentised residual ``T_i``; the hierarchical variant
(``v_i = eta_k * xi_i``) adds two industry-level moments built from the group
means of ``theta_hat_i / s_i**beta``.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy import optimize, stats

from .ingest import UnitRecord


class EstimationError(RuntimeError):
    """Optimisation failed; ``best`` holds the best iterate found."""

    def __init__(self, message: str, best=None):
        super().__init__(message)
        self.best = best


@dataclass(frozen=True)
class PrecisionModelParams:
    beta: float
    mu_v: float
    sigma_v: float
    sigma_eta: float | None = None
    sigma_xi: float | None = None
    vcov: np.ndarray = field(default_factory=lambda: np.zeros((0, 0)), compare=False)
    param_names: tuple[str, ...] = ()
    j_stat: float = 0.0
    j_df: int = 0
    n_obs: int = 0
    seed: int | None = None

    @property
    def hierarchical(self) -> bool:
        return self.sigma_eta is not None

    @property
    def within_share(self) -> float:
        """Share of Var(v) coming from within-group variation (hierarchical only)."""
        if not self.hierarchical:
            raise ValueError("within share is defined for the hierarchical model only")
        return (self.sigma_eta**2 + 1.0) * self.sigma_xi**2 / self.sigma_v**2

    def std_errors(self) -> dict[str, float]:
        return {k: float(np.sqrt(self.vcov[i, i])) for i, k in enumerate(self.param_names)}

    def sub_vcov(self, names: Sequence[str]) -> np.ndarray:
        idx = [self.param_names.index(k) for k in names]
        return self.vcov[np.ix_(idx, idx)]

    def to_dict(self) -> dict:
        out = {"beta": self.beta, "mu_v": self.mu_v}
        if self.hierarchical:
            out.update(sigma_eta=self.sigma_eta, sigma_xi=self.sigma_xi)
        else:
            out["sigma_v"] = self.sigma_v
        out.update(
            vcov=np.asarray(self.vcov).tolist(),
            param_names=list(self.param_names),
            j_stat=self.j_stat,
            j_df=self.j_df,
            n_obs=self.n_obs,
            seed=self.seed,
        )
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d: dict) -> "PrecisionModelParams":
        if "sigma_eta" in d:
            sv = hierarchical_sigma_v(d["mu_v"], d["sigma_eta"], d["sigma_xi"])
            extra = dict(sigma_eta=d["sigma_eta"], sigma_xi=d["sigma_xi"])
        else:
            sv, extra = d["sigma_v"], {}
        return cls(
            beta=d["beta"],
            mu_v=d["mu_v"],
            sigma_v=sv,
            vcov=np.asarray(d.get("vcov", []), dtype=float).reshape(len(d.get("param_names", [])), -1),
            param_names=tuple(d.get("param_names", ())),
            j_stat=d.get("j_stat", 0.0),
            j_df=d.get("j_df", 0),
            n_obs=d.get("n_obs", 0),
            seed=d.get("seed"),
            **extra,
        )

    @classmethod
    def from_json(cls, text: str) -> "PrecisionModelParams":
        return cls.from_dict(json.loads(text))


def hierarchical_sigma_v(mu_v: float, sigma_eta: float, sigma_xi: float) -> float:
    return math.sqrt(sigma_eta**2 * sigma_xi**2 + sigma_eta**2 * mu_v**2 + sigma_xi**2)


def studentize(theta_hat, s, params: PrecisionModelParams):
    """Centered, scaled estimate; mean zero and unit variance under the model."""
    theta_hat = np.asarray(theta_hat, dtype=float)
    s = np.asarray(s, dtype=float)
    sb = s**params.beta
    denom = np.sqrt(sb**2 * params.sigma_v**2 + s**2)
    out = (theta_hat - sb * params.mu_v) / denom
    return float(out) if out.ndim == 0 else out


def _firm_moments(theta, s, beta, mu, sigma_v):
    sb = s**beta
    t = (theta - sb * mu) / np.sqrt(sb**2 * sigma_v**2 + s**2)
    u = t**2 - 1.0
    return np.column_stack([t, t * s, u, u * s])


class _Problem:
    """Per-unit moment contributions as a function of natural parameters."""

    def __init__(self, units: Sequence[UnitRecord], hierarchical: bool):
        self.theta = np.array([u.estimate for u in units], dtype=float)
        self.s = np.array([u.se for u in units], dtype=float)
        self.n = len(units)
        self.hierarchical = hierarchical
        labels = [u.group for u in units]
        if any(g is None for g in labels):
            self.groups = None
        else:
            _, self.groups = np.unique(np.array(labels, dtype=object).astype(str), return_inverse=True)
        if hierarchical:
            if self.groups is None:
                raise ValueError("hierarchical model requires group labels on every unit")
            self.nk = np.bincount(self.groups).astype(float)
            if len(self.nk) < 2:
                raise ValueError("hierarchical model requires at least two groups")
            self.sbar = np.bincount(self.groups, self.s) / self.nk
        self.names = ("beta", "mu_v", "sigma_eta", "sigma_xi") if hierarchical else ("beta", "mu_v", "sigma_v")

    @property
    def n_moments(self) -> int:
        return 6 if self.hierarchical else 4

    def contributions(self, p: np.ndarray) -> np.ndarray:
        if not self.hierarchical:
            beta, mu, sv = p
            return _firm_moments(self.theta, self.s, beta, mu, sv)
        beta, mu, se, sx = p
        sv = hierarchical_sigma_v(mu, se, sx)
        m = _firm_moments(self.theta, self.s, beta, mu, sv)
        g, nk = self.groups, self.nk
        vbar = np.bincount(g, self.theta / self.s**beta) / nk
        noise = np.bincount(g, self.s ** (2.0 * (1.0 - beta))) / nk**2
        vk = se**2 * sx**2 / nk + se**2 * mu**2 + sx**2 / nk + noise
        r = (vbar - mu) ** 2 - vk
        # group moments are attached to each member unit (firm-weighted)
        h = np.column_stack([r, r * self.sbar])[g]
        return np.column_stack([m, h])

    def moment_cov(self, p: np.ndarray, cluster: bool) -> np.ndarray:
        c = self.contributions(p)
        c = c - c.mean(axis=0)
        if cluster:
            c = np.column_stack([np.bincount(self.groups, c[:, j]) for j in range(c.shape[1])])
        return c.T @ c / self.n


def _natural(x: np.ndarray) -> np.ndarray:
    # beta is free; scale parameters are optimised on the log scale
    return np.concatenate([[x[0]], np.exp(np.clip(x[1:], -30, 30))])


def _expand(x: np.ndarray, fixed_beta: float | None) -> np.ndarray:
    return x if fixed_beta is None else np.concatenate([[fixed_beta], x])


def _minimise(prob: _Problem, W: np.ndarray, subset, rng: np.random.Generator, restarts: int, warm=None, fixed_beta=None):
    k = len(prob.names)
    free = slice(0 if fixed_beta is None else 1, None)

    def crit(x):
        with np.errstate(all="ignore"):
            g = prob.contributions(_natural(_expand(x, fixed_beta))).mean(axis=0)[subset]
        val = float(g @ W @ g)
        return val if np.isfinite(val) else 1e300

    opts = dict(xatol=1e-10, fatol=1e-16, maxiter=20000, maxfev=20000)
    starts = []
    sd0 = np.log(max(np.std(prob.theta), 1e-3))
    mu0 = np.log(max(abs(np.mean(prob.theta)), 1e-3))
    for b in np.linspace(-1.0, 2.0, 13) if fixed_beta is None else [fixed_beta]:
        x = np.full(k, sd0)
        x[0], x[1] = b, mu0
        starts.append((crit(x[free]), x[free]))
    starts.sort(key=lambda t: t[0])
    cand = [x for _, x in starts[:4]]
    for _ in range(restarts):
        x = np.empty(k)
        x[0] = rng.uniform(-1.0, 2.0)
        x[1:] = rng.normal(sd0, 1.0, size=k - 1)
        cand.append(x[free])
    if warm is not None:
        cand.insert(0, warm)
    best = None
    for x0 in cand:
        res = optimize.minimize(crit, x0, method="Nelder-Mead", options=opts)
        # a second polish from the simplex optimum guards against early stalls
        res = optimize.minimize(crit, res.x, method="Nelder-Mead", options=opts)
        if best is None or res.fun < best.fun:
            best = res
    if best is None or not np.isfinite(best.fun) or best.fun >= 1e299:
        raise EstimationError("GMM criterion could not be evaluated at any start", best)
    return best


def _jacobian(prob: _Problem, p: np.ndarray, subset, columns=None) -> np.ndarray:
    columns = list(range(len(p))) if columns is None else list(columns)
    G = np.empty((len(subset), len(columns)))
    for c, j in enumerate(columns):
        h = 1e-5 * max(abs(p[j]), 1e-3)
        up, dn = p.copy(), p.copy()
        up[j] += h
        dn[j] -= h
        G[:, c] = (prob.contributions(up).mean(0)[subset] - prob.contributions(dn).mean(0)[subset]) / (2 * h)
    return G


def fit_gmm(
    units: Sequence[UnitRecord],
    hierarchical: bool = False,
    *,
    cluster: bool | None = None,
    seed: int = 0,
    restarts: int = 20,
    moment_subset: Sequence[int] | None = None,
    fixed_beta: float | None = None,
) -> PrecisionModelParams:
    """Two-step optimally weighted GMM (identity weight in the first step).

    ``cluster=None`` clusters the second-step weight by group whenever every unit
    carries a group label. ``moment_subset`` restricts the moment vector, e.g. to
    an exactly identified set. ``fixed_beta`` holds the precision exponent at a
    given value (it then has zero variance in ``vcov``).
    """
    if len(units) < 10:
        raise ValueError(f"need at least 10 units, got {len(units)}")
    prob = _Problem(units, hierarchical)
    if cluster is None:
        cluster = prob.groups is not None
    if cluster and prob.groups is None:
        raise ValueError("clustered weighting requires group labels")
    subset = list(range(prob.n_moments)) if moment_subset is None else list(moment_subset)
    k = len(prob.names) - (fixed_beta is not None)
    if len(subset) < k:
        raise ValueError("fewer moments than parameters")
    rng = np.random.default_rng(seed)

    first = _minimise(prob, np.eye(len(subset)), subset, rng, restarts, fixed_beta=fixed_beta)
    p1 = _natural(_expand(first.x, fixed_beta))
    S = prob.moment_cov(p1, cluster)[np.ix_(subset, subset)]
    W = np.linalg.pinv(S)
    second = _minimise(prob, W, subset, rng, restarts, warm=first.x, fixed_beta=fixed_beta)
    p = _natural(_expand(second.x, fixed_beta))
    if not np.all(np.isfinite(p)):
        raise EstimationError("non-finite GMM estimate", second)

    cols = list(range(len(prob.names) - k, len(prob.names)))
    G = _jacobian(prob, p, subset, cols)
    S2 = prob.moment_cov(p, cluster)[np.ix_(subset, subset)]
    try:
        bread = np.linalg.inv(G.T @ W @ G)
    except np.linalg.LinAlgError:
        bread = np.linalg.pinv(G.T @ W @ G)
    free_vcov = bread @ G.T @ W @ S2 @ W @ G @ bread / prob.n
    vcov = np.zeros((len(prob.names), len(prob.names)))
    vcov[np.ix_(cols, cols)] = (free_vcov + free_vcov.T) / 2
    j_stat = float(prob.n * second.fun)
    j_df = len(subset) - k
    if hierarchical:
        beta, mu, se, sx = p
        return PrecisionModelParams(
            beta=float(beta), mu_v=float(mu), sigma_v=hierarchical_sigma_v(mu, se, sx),
            sigma_eta=float(se), sigma_xi=float(sx), vcov=vcov, param_names=prob.names,
            j_stat=j_stat, j_df=j_df, n_obs=prob.n, seed=seed,
        )
    beta, mu, sv = p
    return PrecisionModelParams(
        beta=float(beta), mu_v=float(mu), sigma_v=float(sv), vcov=vcov, param_names=prob.names,
        j_stat=j_stat, j_df=j_df, n_obs=prob.n, seed=seed,
    )


def sample_moments(units: Sequence[UnitRecord], params: PrecisionModelParams) -> np.ndarray:
    """Empirical moment vector evaluated at ``params``."""
    prob = _Problem(units, params.hierarchical)
    if params.hierarchical:
        p = np.array([params.beta, params.mu_v, params.sigma_eta, params.sigma_xi])
    else:
        p = np.array([params.beta, params.mu_v, params.sigma_v])
    return prob.contributions(p).mean(axis=0)


def j_test(params_or_stat, df: int | None = None) -> tuple[float, int, float]:
    """Over-identification test; returns ``(stat, df, p)`` with a chi-square reference."""
    if isinstance(params_or_stat, PrecisionModelParams):
        stat, df = params_or_stat.j_stat, params_or_stat.j_df
    else:
        stat = float(params_or_stat)
    if df is None or df < 1:
        raise ValueError("J test needs at least one over-identifying restriction")
    return float(stat), int(df), float(stats.chi2.sf(stat, df))
