"""Posterior distributions of unit effects and pairwise ordering probabilities.

Baseline posteriors are exact on the prior grid. Pairwise probabilities
``pi_ij = Pr(theta_i > theta_j | Y)`` are evaluated with a prefix CDF over the
scaled grid; exact ties get half mass so ``pi_ij + pi_ji = 1``.
"""

from __future__ import annotations

import csv
import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.special import logsumexp

from .deconvolution import SplineMixing, _group_index, v_scale
from .ingest import UnitRecord

MAGIC = b"RGPIMAT1"


class PosteriorError(RuntimeError):
    pass


@dataclass(frozen=True)
class UnitPosterior:
    id: str
    grid: np.ndarray  # v-scale support points
    weights: np.ndarray
    scale: float  # s_i**beta, maps v to theta

    @property
    def theta_grid(self) -> np.ndarray:
        return self.scale * self.grid

    def mean(self) -> float:
        return float(self.scale * (self.weights @ self.grid))

    def second_moment(self) -> float:
        return float(self.scale**2 * (self.weights @ self.grid**2))


@dataclass(frozen=True)
class PosteriorSummary:
    id: str
    mean: float
    lo: float
    hi: float
    second_moment: float


@dataclass
class PairwiseMatrices:
    ids: list[str]
    pi: np.ndarray
    p: int = 0
    mu: np.ndarray | None = None  # E[max(theta_i - theta_j, 0)^p]
    m: np.ndarray | None = None  # E[(theta_i - theta_j)^p]
    pi_se: np.ndarray | None = None  # Monte Carlo standard errors, when simulated

    @property
    def n(self) -> int:
        return len(self.ids)

    def transposed(self) -> "PairwiseMatrices":
        """Matrices for the negated estimand (ordering reversed)."""
        return PairwiseMatrices(
            list(self.ids),
            self.pi.T.copy(),
            self.p,
            None if self.mu is None else self.mu.T.copy(),
            None if self.m is None else self.m.T.copy(),
            None if self.pi_se is None else self.pi_se.T.copy(),
        )

    def subset(self, idx: Sequence[int]) -> "PairwiseMatrices":
        ix = np.ix_(idx, idx)
        pick = lambda a: None if a is None else a[ix].copy()  # noqa: E731
        return PairwiseMatrices([self.ids[i] for i in idx], self.pi[ix].copy(), self.p,
                                pick(self.mu), pick(self.m), pick(self.pi_se))


# ---------------------------------------------------------------------------
# Baseline posteriors
# ---------------------------------------------------------------------------

def unit_posteriors(units: Sequence[UnitRecord], G: SplineMixing, beta: float) -> list[UnitPosterior]:
    """Grid posteriors for ``v_i``; weights proportional to likelihood times prior mass."""
    x, sd = v_scale(units, beta)
    with np.errstate(divide="ignore"):
        logg = np.log(G.masses)
    z = (x[:, None] - G.support[None, :]) / sd[:, None]
    a = -0.5 * z**2 + logg[None, :]
    lse = logsumexp(a, axis=1)
    out = []
    for i, u in enumerate(units):
        if not np.isfinite(lse[i]):
            raise PosteriorError(f"unit {u.id}: likelihood is zero on the whole grid")
        w = np.exp(a[i] - lse[i])
        w /= w.sum()
        out.append(UnitPosterior(u.id, G.support, w, float(u.se**beta)))
    return out


def _interp_quantiles(values: np.ndarray, weights: np.ndarray, qs: Sequence[float]) -> list[float]:
    """Quantiles of a discrete distribution by linear interpolation of its CDF.

    Only points carrying mass are used as interpolation nodes, so an atom
    returns itself for every level. Results are clamped to the support.
    """
    order = np.argsort(values, kind="stable")
    v, w = values[order], weights[order]
    keep = w > 0
    v, w = v[keep], w[keep]
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return [float(np.interp(q, cdf, v)) for q in qs]


def posterior_summary(up: UnitPosterior, level: float = 0.95) -> PosteriorSummary:
    if not 0 < level < 1:
        raise ValueError("level must lie in (0, 1)")
    a = (1 - level) / 2
    lo, hi = _interp_quantiles(up.theta_grid, up.weights, [a, 1 - a])
    mean = up.mean()
    # interpolation can place a bound marginally past the mean for lopsided atoms
    lo, hi = min(lo, mean), max(hi, mean)
    return PosteriorSummary(up.id, mean, lo, hi, up.second_moment())


def _pair_stats(ai, wi, aj, wj, cum_w, cum_b, cum_b2, want_mu):
    """``Pr(theta_i > theta_j)`` (+ half ties) and ``E[max(theta_i - theta_j, 0)^2]``."""
    left = np.searchsorted(aj, ai, side="left")
    right = np.searchsorted(aj, ai, side="right")
    less = cum_w[left]
    pi = float(wi @ (less + 0.5 * (cum_w[right] - less)))
    mu = None
    if want_mu:
        mu = float(wi @ (ai**2 * less - 2 * ai * cum_b[left] + cum_b2[left]))
        mu = max(mu, 0.0)
    return pi, mu


def pairwise_matrices(posteriors: Sequence[UnitPosterior], p: float = 0) -> PairwiseMatrices:
    """Ordering probabilities and, for ``p > 0``, p-th power contrast moments.

    ``p = 2`` uses prefix sums; other positive exponents fall back to a full
    double sum over grid pairs (intended for small problems and checks).
    """
    n = len(posteriors)
    pi = np.full((n, n), 0.5)
    mu = m = None
    if p not in (0, 2) and p <= 0:
        raise ValueError("p must be 0 or positive")
    if p:
        mu = np.zeros((n, n))
        m = np.zeros((n, n))
    grids = [up.theta_grid for up in posteriors]
    for i, up in enumerate(posteriors):
        if np.any(np.diff(grids[i]) < 0):
            raise ValueError("posterior grids must be ascending")
    prefix = []
    for j, up in enumerate(posteriors):
        b, w = grids[j], up.weights
        prefix.append((
            np.concatenate([[0.0], np.cumsum(w)]),
            np.concatenate([[0.0], np.cumsum(w * b)]),
            np.concatenate([[0.0], np.cumsum(w * b * b)]),
        ))
    e1 = np.array([up.weights @ g for up, g in zip(posteriors, grids)])
    e2 = np.array([up.weights @ g**2 for up, g in zip(posteriors, grids)])
    for i in range(n):
        for j in range(i + 1, n):
            if p in (0, 2):
                pij, muij = _pair_stats(grids[i], posteriors[i].weights, grids[j], posteriors[j].weights,
                                        *prefix[j], want_mu=(p == 2))
                pi[i, j], pi[j, i] = pij, 1.0 - pij
                if p == 2:
                    mij = e2[i] - 2 * e1[i] * e1[j] + e2[j]
                    m[i, j] = m[j, i] = mij
                    mu[i, j] = muij
                    mu[j, i] = max(mij - muij, 0.0)
            else:
                pi[i, j], mu[i, j], m[i, j] = _brute_pair(grids[i], posteriors[i].weights,
                                                          grids[j], posteriors[j].weights, p)
                pi[j, i], mu[j, i], m[j, i] = _brute_pair(grids[j], posteriors[j].weights,
                                                          grids[i], posteriors[i].weights, p)
    return PairwiseMatrices([up.id for up in posteriors], pi, int(p) if p in (0, 2) else p, mu, m)


def _brute_pair(ai, wi, aj, wj, p):
    d = ai[:, None] - aj[None, :]
    W = wi[:, None] * wj[None, :]
    pi = float((W * ((d > 0) + 0.5 * (d == 0))).sum())
    mu = float((W * np.maximum(d, 0.0) ** p).sum()) if p else None
    m = float((W * np.abs(d) ** p).sum()) if p else None
    return pi, mu, m


def brute_force_pi(posteriors: Sequence[UnitPosterior]) -> np.ndarray:
    """Double loop over grid pairs; a slow reference for ``pairwise_matrices``."""
    n = len(posteriors)
    pi = np.full((n, n), 0.5)
    for i in range(n):
        for j in range(n):
            if i != j:
                pi[i, j] = _brute_pair(posteriors[i].theta_grid, posteriors[i].weights,
                                       posteriors[j].theta_grid, posteriors[j].weights, 0)[0]
    return pi


# ---------------------------------------------------------------------------
# Hierarchical posteriors
# ---------------------------------------------------------------------------

@dataclass
class HierarchicalPosteriors:
    summaries: list[PosteriorSummary]
    matrices: PairwiseMatrices
    draws: int
    seed: int
    ess: float


def _hier_conditionals(units, gidx, G_eta, G_xi, beta):
    """Per-unit conditional masses over ``xi`` given each ``eta`` and group ``eta`` posteriors."""
    x, sd = v_scale(units, beta)
    prod = np.outer(G_eta.support, G_xi.support)
    z = (x[:, None, None] - prod[None]) / sd[:, None, None]
    with np.errstate(divide="ignore"):
        loge, logx = np.log(G_eta.masses), np.log(G_xi.masses)
    a = -0.5 * z**2 - np.log(sd)[:, None, None] + logx[None, None, :]
    logA = logsumexp(a, axis=2)  # (n, Me)
    W = np.exp(a - logA[:, :, None])  # xi | eta, Y_i
    K = int(gidx.max()) + 1
    S = np.zeros((K, len(G_eta.support)))
    np.add.at(S, gidx, logA)
    b = S + loge[None, :]
    if not np.all(np.isfinite(logsumexp(b, axis=1))):
        raise PosteriorError("zero likelihood for some group under the fitted priors")
    P = np.exp(b - logsumexp(b, axis=1)[:, None])
    return P, W


def hierarchical_posteriors(
    units: Sequence[UnitRecord],
    G_eta: SplineMixing,
    G_xi: SplineMixing,
    beta: float,
    draws: int = 100_000,
    seed: int = 0,
    p: int = 0,
    groups: Sequence[str] | None = None,
    level: float = 0.95,
) -> HierarchicalPosteriors:
    """Joint group posteriors: exact moments and intervals, simulated ordering probabilities.

    Each draw takes ``eta`` from its exact posterior on the grid, then each unit's
    ``xi`` from its conditional given that ``eta``. Groups use separate random
    streams, so draws are independent across groups.
    """
    if draws < 10_000:
        raise ValueError("use at least 10,000 draws")
    gidx = _group_index(units, groups)
    n = len(units)
    P, W = _hier_conditionals(units, gidx, G_eta, G_xi, beta)
    eta, xi = G_eta.support, G_xi.support
    scale = np.array([u.se**beta for u in units])

    summaries = []
    for i, u in enumerate(units):
        Pi = P[gidx[i]]
        vals = np.outer(eta, xi).ravel() * scale[i]
        wts = (Pi[:, None] * W[i]).ravel()
        mean = float(wts @ vals)
        lo, hi = _interp_quantiles(vals, wts, [(1 - level) / 2, (1 + level) / 2])
        summaries.append(PosteriorSummary(u.id, mean, min(lo, mean), max(hi, mean), float(wts @ vals**2)))

    theta = np.empty((n, draws))
    ss = np.random.SeedSequence(seed)
    K = P.shape[0]
    streams = [np.random.default_rng(s) for s in ss.spawn(K)]
    for k in range(K):
        rng = streams[k]
        members = np.flatnonzero(gidx == k)
        ell = np.searchsorted(np.cumsum(P[k]), rng.random(draws) * P[k].sum(), side="right")
        ell = np.minimum(ell, len(eta) - 1)
        order = np.argsort(ell, kind="stable")
        levels, starts = np.unique(ell[order], return_index=True)
        bounds = list(zip(levels, starts, [*starts[1:], draws]))
        for i in members:
            cw = np.cumsum(W[i], axis=1)  # (Me, Mx)
            u01 = rng.random(draws)
            mm = np.empty(draws, dtype=np.int64)
            for l, a, b in bounds:
                sel = order[a:b]
                mm[sel] = np.searchsorted(cw[l], u01[sel] * cw[l, -1], side="right")
            mm = np.minimum(mm, len(xi) - 1)
            theta[i] = scale[i] * eta[ell] * xi[mm]

    pi = np.full((n, n), 0.5)
    se = np.zeros((n, n))
    mu = m = None
    if p == 2:
        mu = np.zeros((n, n))
        m = np.zeros((n, n))
    for i in range(n):
        d = theta[i][None, :] - theta[i + 1:]
        z = (d > 0) + 0.5 * (d == 0)
        pij = z.mean(axis=1)
        sij = z.std(axis=1) / math.sqrt(draws)
        pi[i, i + 1:], pi[i + 1:, i] = pij, 1 - pij
        se[i, i + 1:] = se[i + 1:, i] = sij
        if p == 2:
            d2 = d**2
            mp = (d2 * (d > 0)).mean(axis=1)
            mt = d2.mean(axis=1)
            mu[i, i + 1:], mu[i + 1:, i] = mp, mt - mp
            m[i, i + 1:] = m[i + 1:, i] = mt
    mats = PairwiseMatrices([u.id for u in units], pi, p, mu, m, se)
    # draws are exact, not importance weighted, so the effective sample size is the draw count
    return HierarchicalPosteriors(summaries, mats, draws, seed, float(draws))


# ---------------------------------------------------------------------------
# Between-grade variance
# ---------------------------------------------------------------------------

def between_grade_variance(
    grades: Sequence[int],
    means: Sequence[float],
    second_moments: Sequence[float],
    marginal_variance: float | None = None,
) -> tuple[float, float | None]:
    """Firm-weighted between-grade variance of ``theta`` and its share of ``marginal_variance``.

    Grade means use averages of posterior means; squared grade means use the
    posterior expectation that keeps each unit's own second moment.
    """
    grades = np.asarray(grades)
    mean = np.asarray(means, dtype=float)
    sec = np.asarray(second_moments, dtype=float)
    n = len(grades)
    labels = np.unique(grades)
    w = np.array([(grades == g).mean() for g in labels])
    tbar = np.array([mean[grades == g].mean() for g in labels])
    tsq = np.array([
        (sec[grades == g].sum() + mean[grades == g].sum() ** 2 - (mean[grades == g] ** 2).sum()) / (n * wg) ** 2
        for g, wg in zip(labels, w)
    ])
    cross = np.outer(w * tbar, w * tbar)
    between = float(np.sum(w * (1 - w) * tsq) - (cross.sum() - np.trace(cross)))
    if len(labels) == 1:
        between = 0.0
    r2 = None if not marginal_variance else between / marginal_variance
    return between, r2


# ---------------------------------------------------------------------------
# Serialisation
# ---------------------------------------------------------------------------

def write_matrix_csv(path: str | Path, ids: Sequence[str], mat: np.ndarray) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh)
        wr.writerow(["id", *ids])
        for uid, row in zip(ids, mat):
            wr.writerow([uid, *(f"{v:.6g}" for v in row)])


def read_matrix_csv(path: str | Path) -> tuple[list[str], np.ndarray]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    ids = rows[0][1:]
    mat = np.array([[float(v) for v in r[1:]] for r in rows[1:]])
    return ids, mat


def write_matrix_binary(path: str | Path, mat: np.ndarray) -> None:
    """Magic, row and column counts (little-endian uint64), then row-major float64 values."""
    mat = np.ascontiguousarray(mat, dtype="<f8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<QQ", *mat.shape))
        fh.write(mat.tobytes(order="C"))


def read_matrix_binary(path: str | Path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(8) != MAGIC:
            raise ValueError(f"{path}: not a pairwise-matrix cache")
        rows, cols = struct.unpack("<QQ", fh.read(16))
        data = np.frombuffer(fh.read(), dtype="<f8")
    if data.size != rows * cols:
        raise ValueError(f"{path}: truncated matrix cache")
    return data.reshape(rows, cols).astype(float)
