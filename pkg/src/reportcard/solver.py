"""Risk-minimising weak orders (grades) from pairwise posterior quantities.

Internally a larger grade means a larger latent value (for the firm application,
more biased). The cost of grading ``i`` strictly above ``j`` is
``disc - lam * conc`` where ``disc`` is the posterior weight of the ordering being
wrong and ``conc`` of it being right; ties cost nothing.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .posterior import PairwiseMatrices

logger = logging.getLogger(__name__)

I_WORSE, J_WORSE, TIE = "i_worse", "j_worse", "tie"
FUBINI = [1, 1, 3, 13, 75, 541, 4683, 47293, 545835, 7087261]


def pairwise_threshold(pi_ij: float, lam: float) -> str:
    """Unconstrained optimal decision for one pair: strict only above ``1/(1+lam)``."""
    if not (0.0 <= pi_ij <= 1.0 and 0.0 <= lam <= 1.0):
        raise ValueError("pi and lambda must lie in [0, 1]")
    cut = 1.0 / (1.0 + lam)
    if pi_ij > cut:
        return I_WORSE
    if 1.0 - pi_ij > cut:
        return J_WORSE
    return TIE


@dataclass(frozen=True)
class RiskSpec:
    """Objective coefficients: ``cost[i, j]`` is the contribution of grading ``i`` above ``j``."""

    lam: float
    p: int
    cost: np.ndarray
    disc: np.ndarray  # disc[i, j]: discordance weight when i is graded above j
    conc: np.ndarray  # conc[i, j]: concordance weight when i is graded above j
    norm: float
    ids: tuple[str, ...] = ()

    @property
    def n(self) -> int:
        return self.cost.shape[0]

    def pair_costs(self, i: int, j: int) -> tuple[float, float, float]:
        """Contributions of (i above j, j above i, tie)."""
        return float(self.cost[i, j]), float(self.cost[j, i]), 0.0


def assemble_objective(matrices: PairwiseMatrices, lam: float, p: int | None = None) -> RiskSpec:
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    p = matrices.p if p is None else p
    n = matrices.n
    if p == 0:
        w = matrices.pi.astype(float).copy()
        norm = n * (n - 1) / 2
    elif p == 2:
        if matrices.mu is None or matrices.m is None:
            raise ValueError("p = 2 needs contrast moments in the matrices")
        w = matrices.mu.astype(float).copy()
        norm = float(np.triu(matrices.m, 1).sum())
    else:
        raise ValueError("p must be 0 or 2")
    np.fill_diagonal(w, 0.0)
    conc = w  # i above j is right when theta_i > theta_j
    disc = w.T.copy()
    cost = disc - lam * conc
    np.fill_diagonal(cost, 0.0)
    return RiskSpec(lam, p, cost, disc, conc, norm if norm > 0 else 1.0, tuple(matrices.ids))


@dataclass
class GradeAssignment:
    grades: np.ndarray  # 1..n_grades, larger = larger latent value
    risk: float
    dr: float
    tau_bar: float
    n_grades: int
    lam: float
    p: int
    method: str = ""
    ids: tuple[str, ...] = ()
    condorcet_rank: np.ndarray | None = None
    multiple_optima: bool = False

    def to_dict(self) -> dict:
        return {
            "lambda": self.lam,
            "p": self.p,
            "risk": self.risk,
            "dr": self.dr,
            "tau_bar": self.tau_bar,
            "n_grades": self.n_grades,
            "method": self.method,
            "multiple_optima": self.multiple_optima,
            "grades": {k: int(g) for k, g in zip(self.ids, self.grades)},
        }


# ---------------------------------------------------------------------------
# Evaluation helpers
# ---------------------------------------------------------------------------

def relabel(grades: Sequence[int]) -> np.ndarray:
    """Map arbitrary ordered labels onto consecutive integers starting at 1."""
    g = np.asarray(grades)
    _, inv = np.unique(g, return_inverse=True)
    return inv.astype(int) + 1


def raw_cost(spec: RiskSpec, grades: Sequence[int]) -> float:
    g = np.asarray(grades)
    above = g[:, None] > g[None, :]
    return float(spec.cost[above].sum())


def evaluate(spec: RiskSpec, grades: Sequence[int]) -> tuple[float, float, float]:
    """(risk, DR, expected tau) of a grade vector under ``spec``."""
    g = np.asarray(grades)
    above = g[:, None] > g[None, :]
    disc = spec.disc[above].sum()
    conc = spec.conc[above].sum()
    dr = disc / spec.norm
    tau = (conc - disc) / spec.norm
    risk = spec.cost[above].sum() / spec.norm
    return float(risk), float(dr), float(tau)


def _assignment(spec: RiskSpec, grades, method: str, multiple=False) -> GradeAssignment:
    g = relabel(grades) if len(grades) else np.zeros(0, dtype=int)
    risk, dr, tau = evaluate(spec, g) if len(g) else (0.0, 0.0, 0.0)
    return GradeAssignment(g, risk, dr, tau, int(g.max()) if len(g) else 0, spec.lam, spec.p,
                           method, spec.ids, None, multiple)


def induced_indicators(grades: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    g = np.asarray(grades)
    return (g[:, None] > g[None, :]).astype(int), (g[:, None] == g[None, :]).astype(int)


def satisfies_transitivity(grades: Sequence[int]) -> bool:
    """Direct scan of all triple constraints on the induced pairwise indicators."""
    d, e = induced_indicators(grades)
    n = len(d)
    for i in range(n):
        for j in range(n):
            if i == j:
                continue
            if e[i, j] + d[i, j] + d[j, i] != 1:
                return False
            for k in range(n):
                if k in (i, j):
                    continue
                if d[i, j] + d[j, k] > 1 + d[i, k]:
                    return False
                if d[i, k] + (1 - d[j, k]) > 1 + d[i, j]:
                    return False
                if e[i, j] + e[j, k] > 1 + e[i, k]:
                    return False
    return True


# ---------------------------------------------------------------------------
# Enumeration oracle
# ---------------------------------------------------------------------------

def weak_orders(n: int) -> np.ndarray:
    """All ordered set partitions of ``n`` items as 0-based grade vectors."""
    by_k: dict[int, np.ndarray] = {0: np.zeros((1, 0), dtype=np.int8)}
    for _ in range(n):
        nxt: dict[int, list[np.ndarray]] = {}
        for k, rows in by_k.items():
            for h in range(k):  # join an existing grade
                nxt.setdefault(k, []).append(np.column_stack([rows, np.full(len(rows), h, np.int8)]))
            for h in range(k + 1):  # open a new grade at position h
                shifted = rows + (rows >= h).astype(np.int8)
                nxt.setdefault(k + 1, []).append(np.column_stack([shifted, np.full(len(rows), h, np.int8)]))
        by_k = {k: np.concatenate(v) for k, v in nxt.items()}
    return np.concatenate([by_k[k] for k in sorted(by_k)])


def enumerate_oracle(spec: RiskSpec, tol: float = 1e-12) -> GradeAssignment:
    """Exhaustive minimum over every weak order (``n <= 9``)."""
    n = spec.n
    if n > 9:
        raise ValueError("enumeration is limited to n <= 9")
    if n == 0:
        return _assignment(spec, [], "enumerate")
    W = weak_orders(n)
    total = np.zeros(len(W))
    for i in range(n):
        for j in range(i + 1, n):
            gi, gj = W[:, i], W[:, j]
            total += np.where(gi > gj, spec.cost[i, j], np.where(gj > gi, spec.cost[j, i], 0.0))
    best = total.min()
    cand = np.flatnonzero(total <= best + tol)
    rows = W[cand]
    # lexicographically smallest grade vector among the minimisers
    pick = cand[np.lexsort(rows.T[::-1])[0]]
    return _assignment(spec, W[pick].astype(int) + 1, "enumerate", multiple=len(cand) > 1)


# ---------------------------------------------------------------------------
# Heuristic: order segmentation + local search
# ---------------------------------------------------------------------------

def _segment(cost: np.ndarray, order: np.ndarray) -> tuple[np.ndarray, float]:
    """Optimal split of a fixed order (ascending) into contiguous grades."""
    n = len(order)
    Cp = cost[np.ix_(order, order)]
    # P[b, a]: prefix sums so cross(j, k) = sum of Cp[b, a] for j <= b < k, a < j
    P = np.zeros((n + 1, n + 1))
    P[1:, 1:] = Cp.cumsum(0).cumsum(1)
    f = np.full(n + 1, np.inf)
    f[0] = 0.0
    arg = np.zeros(n + 1, dtype=int)
    for k in range(1, n + 1):
        j = np.arange(k)
        cross = P[k, j] - P[j, j]
        vals = f[:k] + cross
        jb = int(np.argmin(vals))
        f[k], arg[k] = vals[jb], jb
    grades = np.empty(n, dtype=int)
    k, label = n, 0
    cuts = []
    while k > 0:
        cuts.append((arg[k], k))
        k = arg[k]
    for label, (a, b) in enumerate(reversed(cuts)):
        grades[order[a:b]] = label
    return grades, float(f[n])


def _local_search(cost: np.ndarray, grades: np.ndarray, score: np.ndarray, max_passes: int = 200) -> np.ndarray:
    n = len(grades)
    g = relabel(grades) - 1
    for _ in range(max_passes):
        improved = False
        # unit relocations: to any existing grade or to a new singleton grade
        for u in range(n):
            G = g.max() + 1
            mask = np.ones(n, dtype=bool)
            mask[u] = False
            A = np.bincount(g[mask], cost[u, mask], minlength=G)  # u above grade h
            B = np.bincount(g[mask], cost[mask, u], minlength=G)  # grade h above u
            cA = np.concatenate([[0.0], np.cumsum(A)])
            cB = np.concatenate([[0.0], np.cumsum(B[::-1])])[::-1]
            # existing grade h: A below, B above
            join = cA[:G] + cB[1:]
            # new grade inserted before grade h (h = 0..G): all h' < h below, h' >= h above
            new = cA + cB
            cur = join[g[u]]
            hj = int(np.argmin(join))
            hn = int(np.argmin(new))
            if join[hj] < cur - 1e-12 and hj != g[u]:
                g[u] = hj
                g = relabel(g) - 1
                improved = True
            elif new[hn] < cur - 1e-12:
                g = np.where(g >= hn, g + 1, g)
                g[u] = hn
                g = relabel(g) - 1
                improved = True
        # merge adjacent grades
        G = g.max() + 1
        for h in range(G - 1):
            lo, hi = np.flatnonzero(g == h), np.flatnonzero(g == h + 1)
            if lo.size and hi.size and cost[np.ix_(hi, lo)].sum() > 1e-12:
                g = np.where(g > h, g - 1, g)
                improved = True
                break
        # split a grade at the best cut of its score ordering
        G = g.max() + 1
        for h in range(G):
            mem = np.flatnonzero(g == h)
            if mem.size < 2:
                continue
            mem = mem[np.argsort(score[mem], kind="stable")]
            sub = cost[np.ix_(mem, mem)]
            Ps = np.zeros((mem.size + 1, mem.size + 1))
            Ps[1:, 1:] = sub.cumsum(0).cumsum(1)
            k = np.arange(1, mem.size)
            # upper part mem[k:] above lower part mem[:k]
            vals = (Ps[-1, k] - Ps[k, k])
            kb = int(np.argmin(vals))
            if vals[kb] < -1e-12:
                g = np.where(g > h, g + 1, g)
                g[mem[k[kb]:]] = h + 1
                improved = True
                break
        if not improved:
            break
    return g


def _copeland_score(cost: np.ndarray) -> np.ndarray:
    """Higher score = more pairwise wins for being graded above the others."""
    pref = cost.T - cost  # positive when grading i above j is cheaper than j above i
    wins = (pref > 0).sum(axis=1) + 0.5 * (pref == 0).sum(axis=1)
    net = pref.sum(axis=1)
    return wins + 1e-6 * net / (np.abs(net).max() + 1e-300)


def heuristic_solve(spec: RiskSpec, restarts: int = 50, seed: int = 0) -> GradeAssignment:
    n = spec.n
    if n <= 1:
        return _assignment(spec, np.ones(n, dtype=int), "heuristic")
    cost = spec.cost
    score = _copeland_score(cost)
    rng = np.random.default_rng(seed)
    best_g, best_v = None, np.inf
    spread = score.std() + 1e-12
    for r in range(max(restarts, 1)):
        s = score if r == 0 else score + rng.normal(scale=spread * (0.05 + 0.5 * r / restarts), size=n)
        order = np.lexsort((np.arange(n), s))
        g, _ = _segment(cost, order)
        for _ in range(20):
            g = _local_search(cost, g, s)
            # re-segment the current weak order's induced ordering
            order = np.lexsort((s, g))
            g2, v2 = _segment(cost, order)
            if v2 < raw_cost(spec, g) - 1e-12:
                g = g2
            else:
                break
        v = raw_cost(spec, g)
        if v < best_v - 1e-12:
            best_g, best_v = g, v
    return _assignment(spec, best_g, "heuristic")


# ---------------------------------------------------------------------------
# Exact branch and bound
# ---------------------------------------------------------------------------

class _BranchAndBound:
    """Depth-first search over pair decisions with transitive closure on bitmasks.

    State per unit: ``eq[i]`` (tied set, includes i) and ``gt[i]`` (units graded
    strictly below i). Decisions forced by closure are costed immediately; the
    bound adds, for every undecided pair, the cheapest of its three options.
    """

    def __init__(self, spec: RiskSpec):
        self.n = n = spec.n
        self.cost = spec.cost.tolist()
        mins = np.minimum(np.minimum(spec.cost, spec.cost.T), 0.0)
        self.minp = mins.tolist()
        pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
        pairs.sort(key=lambda t: (-abs(spec.cost[t[0], t[1]] - spec.cost[t[1], t[0]]), t))
        self.pairs = pairs
        self.best = math.inf
        self.best_state = None
        self.nodes = 0

    def _decided(self, eq, gt, i, j):
        bj = 1 << j
        return (eq[i] & bj) or (gt[i] & bj) or (gt[j] & (1 << i))

    def _bits(self, m):
        while m:
            b = m & -m
            yield b.bit_length() - 1
            m ^= b

    def _tie(self, eq, gt, i, j, lb):
        n = self.n
        C = eq[i] | eq[j]
        G = gt[i] | gt[j]
        if C & G:
            return None
        eq, gt = list(eq), list(gt)
        cost, minp = self.cost, self.minp
        for a in self._bits(eq[i]):
            for b in self._bits(eq[j]):
                lb -= minp[a][b]
        for c in self._bits(C):
            new = G & ~gt[c]
            for b in self._bits(new):
                lb += cost[c][b] - minp[c][b]
            eq[c] = C
            gt[c] = G
        CG = C | G
        for k in range(n):
            if gt[k] & C:
                new = CG & ~gt[k]
                for b in self._bits(new):
                    lb += cost[k][b] - minp[k][b]
                gt[k] |= CG
        return eq, gt, lb

    def _strict(self, eq, gt, i, j, lb):
        """Grade i above j."""
        n = self.n
        B = eq[j] | gt[j]
        if B & eq[i]:
            return None
        A = [k for k in range(n) if (eq[i] >> k) & 1 or gt[k] & eq[i]]
        if any((B >> a) & 1 for a in A):
            return None
        gt = list(gt)
        cost, minp = self.cost, self.minp
        for a in A:
            new = B & ~gt[a]
            for b in self._bits(new):
                lb += cost[a][b] - minp[a][b]
            gt[a] |= B
        return list(eq), gt, lb

    def run(self, upper: float = math.inf):
        n = self.n
        self.best = upper + 1e-12 if upper < math.inf else math.inf
        self.best_state = None
        eq = [1 << i for i in range(n)]
        gt = [0] * n
        lb0 = sum(self.minp[i][j] for i in range(n) for j in range(i + 1, n))
        self._search(eq, gt, lb0, 0)
        return self.best_state, self.best

    def _search(self, eq, gt, lb, k):
        self.nodes += 1
        pairs = self.pairs
        while k < len(pairs) and self._decided(eq, gt, *pairs[k]):
            k += 1
        if k == len(pairs):
            if lb < self.best - 1e-12:
                self.best = lb
                self.best_state = (list(eq), list(gt))
            return
        i, j = pairs[k]
        children = []
        for kind in (0, 1, 2):
            if kind == 0:
                res = self._strict(eq, gt, i, j, lb)
            elif kind == 1:
                res = self._strict(eq, gt, j, i, lb)
            else:
                res = self._tie(eq, gt, i, j, lb)
            if res is not None:
                children.append(res)
        children.sort(key=lambda t: t[2])
        for ceq, cgt, clb in children:
            if clb < self.best - 1e-12:
                self._search(ceq, cgt, clb, k + 1)

    def grades(self, state) -> np.ndarray:
        eq, gt = state
        reps = [min(self._bits(eq[i])) for i in range(self.n)]
        out = np.empty(self.n, dtype=int)
        for i in range(self.n):
            below = {reps[b] for b in self._bits(gt[i])}
            out[i] = len(below) + 1
        return out


def exact_solve(spec: RiskSpec, restarts: int = 10, seed: int = 0) -> GradeAssignment:
    n = spec.n
    if n <= 1:
        return _assignment(spec, np.ones(n, dtype=int), "exact")
    warm = heuristic_solve(spec, restarts=restarts, seed=seed)
    bb = _BranchAndBound(spec)
    state, _ = bb.run(raw_cost(spec, warm.grades))
    if state is None:
        g = warm.grades
    else:
        g = bb.grades(state)
    return _assignment(spec, g, "exact")


def solve(
    spec: RiskSpec,
    mode: str = "auto",
    exact_limit: int = 12,
    restarts: int = 50,
    seed: int = 0,
) -> GradeAssignment:
    """Minimise posterior risk over weak orders (``exact``, ``heuristic`` or ``auto``)."""
    if mode not in ("auto", "exact", "heuristic"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "exact" or (mode == "auto" and spec.n <= exact_limit):
        return exact_solve(spec, seed=seed)
    return heuristic_solve(spec, restarts=restarts, seed=seed)


def condorcet_ranks(grades_at_one: Sequence[int]) -> np.ndarray:
    """Rank 1 for the largest latent value; ties share the best rank."""
    g = np.asarray(grades_at_one)
    return 1 + (g[None, :] > g[:, None]).sum(axis=1)


def lambda_sweep(
    matrices: PairwiseMatrices,
    lambdas: Iterable[float],
    p: int | None = None,
    **solve_kw,
) -> list[tuple[float, GradeAssignment]]:
    """Independent solves on a grid of ``lambda``; the ``lambda = 1`` solution supplies Condorcet ranks."""
    lams = sorted(set(float(x) for x in lambdas) | {1.0})
    for lam in lams:
        if not 0 <= lam <= 1:
            raise ValueError("lambdas must lie in [0, 1]")
    results = [(lam, solve(assemble_objective(matrices, lam, p), **solve_kw)) for lam in lams]
    ranks = condorcet_ranks(results[-1][1].grades)
    for _, a in results:
        a.condorcet_rank = ranks
    return results


# ---------------------------------------------------------------------------
# LP export
# ---------------------------------------------------------------------------

@dataclass
class MilpModel:
    names: list[str]
    c: np.ndarray
    rows: list[tuple[dict[int, float], str, float]]  # (coefficients, sense, rhs)


def milp_model(spec: RiskSpec) -> MilpModel:
    """Binary program over ``d_i_j`` (i above j) and ``e_i_j`` (tie, i < j).

    Constraints: one state per pair, strict transitivity for every ordered
    triple and tie transitivity for every triple (the remaining mixed family is
    implied by these two).
    """
    n = spec.n
    names: list[str] = []
    index: dict[tuple, int] = {}
    for i in range(n):
        for j in range(i + 1, n):
            for key in (("d", i, j), ("d", j, i), ("e", i, j)):
                index[key] = len(names)
                names.append(f"{key[0]}_{key[1]}_{key[2]}")
    c = np.zeros(len(names))
    for i in range(n):
        for j in range(n):
            if i != j:
                c[index[("d", i, j)]] = spec.cost[i, j]

    def e(i, j):
        return index[("e", min(i, j), max(i, j))]

    rows = []
    for i in range(n):
        for j in range(i + 1, n):
            rows.append(({index[("d", i, j)]: 1.0, index[("d", j, i)]: 1.0, e(i, j): 1.0}, "=", 1.0))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if len({i, j, k}) < 3:
                    continue
                rows.append(({index[("d", i, j)]: 1.0, index[("d", j, k)]: 1.0, index[("d", i, k)]: -1.0}, "<=", 1.0))
    for i in range(n):
        for j in range(n):
            for k in range(n):
                if len({i, j, k}) < 3 or i > k:
                    continue
                rows.append(({e(i, j): 1.0, e(j, k): 1.0, e(i, k): -1.0}, "<=", 1.0))
    return MilpModel(names, c, rows)


def export_lp(spec: RiskSpec, path: str | Path) -> Path:
    """Write the grading problem in CPLEX LP format (objective in unnormalised units)."""
    model = milp_model(spec)
    path = Path(path)

    def term(coef, name, first):
        sign = "-" if coef < 0 else ("" if first else "+")
        return f"{sign} {abs(coef):.17g} {name}".strip()

    lines = ["\\ weak-order grading problem", "Minimize"]
    obj = [term(v, model.names[k], idx == 0) for idx, (k, v) in enumerate((k, v) for k, v in enumerate(model.c) if v != 0)]
    lines.append(" obj: " + (" ".join(obj) if obj else "0"))
    lines.append("Subject To")
    for r, (coefs, sense, rhs) in enumerate(model.rows):
        parts = [term(v, model.names[k], idx == 0) for idx, (k, v) in enumerate(coefs.items())]
        lines.append(f" c{r}: {' '.join(parts)} {sense} {rhs:g}")
    if model.names:
        lines.append("Binary")
        lines.extend(f" {nm}" for nm in model.names)
    lines.append("End")
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")
    return path
