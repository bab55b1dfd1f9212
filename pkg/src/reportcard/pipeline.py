"""End-to-end grading pipeline driven by a single configuration file.

Each stage reads its inputs from, and writes its outputs to, the run's output
directory, so stages can be rerun one at a time. ``manifest.json`` records the
configuration, and for every completed stage its input and output hashes, seed
and wall time.
"""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
import yaml
from threadpoolctl import threadpool_limits

from .deconvolution import (
    ConvergenceError,
    SplineMixing,
    build_support,
    calibrate_hierarchical,
    calibrate_penalty,
    default_hierarchical_supports,
    fit_hierarchical,
    fit_logspline,
    mixing_moments,
    v_scale,
)
from .ingest import TRANSFORMS, DomainError, IngestError, Schema, UnitRecord, firm_data_path, load_units
from .metrics import conditional_dr_matrix, frontier_table, write_dr_matrix_csv, write_frontier_csv
from .posterior import (
    PairwiseMatrices,
    PosteriorError,
    PosteriorSummary,
    between_grade_variance,
    hierarchical_posteriors,
    pairwise_matrices,
    posterior_summary,
    read_matrix_binary,
    unit_posteriors,
    write_matrix_binary,
    write_matrix_csv,
)
from .precision import EstimationError, PrecisionModelParams, fit_gmm
from .solver import GradeAssignment, assemble_objective, evaluate, export_lp, lambda_sweep

logger = logging.getLogger(__name__)

THREADS_ENV = "REPORTCARD_THREADS"
STAGES = ("ingest", "fit-gmm", "fit-prior", "posteriors", "grade", "report")
POLARITIES = ("more-stars-lower", "more-stars-higher")
BUILTIN_FIRMS = "builtin:firms"

EXIT_OK, EXIT_VALIDATION, EXIT_ESTIMATION, EXIT_SOLVER, EXIT_IO = 0, 2, 3, 4, 5


class ConfigError(ValueError):
    """Invalid pipeline configuration."""


class StageError(RuntimeError):
    """A pipeline stage failed; ``exit_code`` follows the CLI convention."""

    def __init__(self, stage: str, exit_code: int, cause: BaseException):
        self.stage = stage
        self.exit_code = exit_code
        self.cause = cause
        super().__init__(f"stage {stage!r} failed: {cause}")


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------

@dataclass
class PipelineConfig:
    """Every pipeline setting with its default; the full set is dumped into the manifest."""

    input: str = BUILTIN_FIRMS
    schema: dict = field(default_factory=dict)
    transform: str = "passthrough"
    model: str = "baseline"
    lambdas: list = field(default_factory=lambda: [0.25, 1.0])
    report_lambda: float = 0.25
    p: int = 0
    solver_mode: str = "auto"
    exact_limit: int = 12
    heuristic_restarts: int = 50
    spline_order: int = 5
    grid_points: Any = None  # int (baseline) or [eta, xi] (hierarchical); None uses 1000 or [200, 200]
    penalty: Any = None  # fixed penalty; a pair for the hierarchical model
    calibrate: bool = True
    tie_tolerance: float = 0.0
    gmm_restarts: int = 20
    fixed_beta: Any = None
    cluster: Any = None
    draws: int = 100_000
    level: float = 0.95
    seed: int = 0
    output_dir: str = "reportcard-out"
    polarity: str = "more-stars-lower"
    anonymize: bool = False
    threads: Any = None
    export_lp: bool = False

    @classmethod
    def from_mapping(cls, raw: Mapping[str, Any] | None) -> "PipelineConfig":
        raw = dict(raw or {})
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(raw) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {unknown}")
        if "threads" not in raw and os.environ.get(THREADS_ENV):
            raw["threads"] = os.environ[THREADS_ENV]
        cfg = cls(**raw)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path, overrides: Mapping[str, Any] | None = None) -> "PipelineConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as err:
            raise ConfigError(f"cannot read config {path}: {err}") from None
        try:
            raw = yaml.safe_load(text) or {}
        except yaml.YAMLError as err:
            raise ConfigError(f"config {path} is not valid YAML: {err}") from None
        if not isinstance(raw, dict):
            raise ConfigError("config must be a mapping of keys to values")
        raw.update({k: v for k, v in (overrides or {}).items() if v is not None})
        return cls.from_mapping(raw)

    def validate(self) -> None:
        if self.transform not in TRANSFORMS:
            raise ConfigError(f"transform must be one of {TRANSFORMS}, got {self.transform!r}")
        if self.model not in ("baseline", "hierarchical"):
            raise ConfigError(f"model must be 'baseline' or 'hierarchical', got {self.model!r}")
        try:
            self.lambdas = sorted({float(x) for x in self.lambdas})
            self.report_lambda = float(self.report_lambda)
        except (TypeError, ValueError):
            raise ConfigError("lambdas must be a list of numbers") from None
        if not self.lambdas or any(not 0.0 <= x <= 1.0 for x in self.lambdas):
            raise ConfigError("lambda values must lie in [0, 1]")
        if self.report_lambda not in self.lambdas and self.report_lambda != 1.0:
            raise ConfigError(f"report_lambda {self.report_lambda} is not among the lambdas")
        if self.p not in (0, 2):
            raise ConfigError(f"p must be 0 or 2, got {self.p!r}")
        if self.solver_mode not in ("auto", "exact", "heuristic"):
            raise ConfigError(f"solver_mode must be auto, exact or heuristic, got {self.solver_mode!r}")
        if self.polarity not in POLARITIES:
            raise ConfigError(f"polarity must be one of {POLARITIES}, got {self.polarity!r}")
        if not isinstance(self.seed, int) or isinstance(self.seed, bool) or self.seed < 0:
            raise ConfigError("seed must be a nonnegative integer")
        if self.draws < 10_000:
            raise ConfigError("draws must be at least 10,000")
        if not 0 < self.level < 1:
            raise ConfigError("level must lie in (0, 1)")
        if self.spline_order < 1:
            raise ConfigError("spline_order must be positive")
        if self.threads is not None:
            try:
                self.threads = int(self.threads)
            except (TypeError, ValueError):
                raise ConfigError(f"threads must be an integer, got {self.threads!r}") from None
            if self.threads < 1:
                raise ConfigError("threads must be positive")
        hier = self.model == "hierarchical"
        # lists rather than tuples so the config survives a JSON round trip unchanged
        if isinstance(self.penalty, tuple):
            self.penalty = list(self.penalty)
        if isinstance(self.grid_points, tuple):
            self.grid_points = list(self.grid_points)
        if self.penalty is not None:
            ok = (isinstance(self.penalty, (list, tuple)) and len(self.penalty) == 2) if hier else isinstance(self.penalty, (int, float))
            if not ok:
                raise ConfigError("penalty must be a number (baseline) or a pair (hierarchical)")
        if not self.calibrate and self.penalty is None:
            raise ConfigError("calibrate is off, so a penalty must be given")
        if self.grid_points is not None:
            ok = (isinstance(self.grid_points, (list, tuple)) and len(self.grid_points) == 2) if hier else isinstance(self.grid_points, int)
            if not ok:
                raise ConfigError("grid_points must be an integer (baseline) or a pair (hierarchical)")
        try:
            self.schema_obj()
        except IngestError as err:
            raise ConfigError(str(err)) from None

    def schema_obj(self) -> Schema:
        if self.input == BUILTIN_FIRMS and not self.schema:
            base = {"id_col": "firm", "estimate_col": "estimate", "se_col": "se", "group_col": "sic"}
        else:
            base = dict(self.schema)
        base["transform"] = self.transform
        return Schema.from_mapping(base)

    def input_path(self) -> Path:
        return firm_data_path() if self.input == BUILTIN_FIRMS else Path(self.input)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# File helpers
# ---------------------------------------------------------------------------

def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


def _write_json(path: Path, obj: Any) -> Path:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _read_json(path: Path) -> Any:
    return json.loads(path.read_text(encoding="utf-8"))


def _g6(x: float) -> str:
    return f"{x:.6g}"


def _units_to_json(units: Sequence[UnitRecord]) -> list[dict]:
    return [
        {"id": u.id, "estimate": u.estimate, "se": u.se, "group": u.group,
         "counts": list(u.counts) if u.counts else None, "aux": u.aux}
        for u in units
    ]


def _units_from_json(rows: list[dict]) -> list[UnitRecord]:
    return [
        UnitRecord(r["id"], r["estimate"], r["se"], r["group"],
                   tuple(r["counts"]) if r["counts"] else None, r.get("aux") or {})
        for r in rows
    ]


# ---------------------------------------------------------------------------
# Report card
# ---------------------------------------------------------------------------

def stars_from_grades(grades: Sequence[int], polarity: str = "more-stars-lower") -> np.ndarray:
    """Star counts from internal grades (larger grade, larger latent value)."""
    g = np.asarray(grades, dtype=int)
    if polarity not in POLARITIES:
        raise ValueError(f"unknown polarity {polarity!r}")
    if g.size == 0:
        return g
    return g.max() + 1 - g if polarity == "more-stars-lower" else g.copy()


def anonymized_ids(units: Sequence[UnitRecord]) -> list[str]:
    """Replace ids by the 1-based rank of the estimate (ascending, ties by input order)."""
    est = np.array([u.estimate for u in units])
    order = np.argsort(est, kind="stable")
    rank = np.empty(len(units), dtype=int)
    rank[order] = np.arange(1, len(units) + 1)
    return [str(r) for r in rank]


@dataclass
class ReportCard:
    rows: list[dict]
    caterpillar: dict


def emit_reportcard(
    units: Sequence[UnitRecord],
    summaries: Sequence[PosteriorSummary],
    assignment: GradeAssignment,
    condorcet_rank: Sequence[int],
    polarity: str = "more-stars-lower",
    anonymize: bool = False,
    out_dir: str | Path | None = None,
) -> ReportCard:
    """Per-unit report table and the caterpillar layout ordered by Condorcet rank."""
    ids = [u.id for u in units]
    if [s.id for s in summaries] != ids or (assignment.ids and list(assignment.ids) != ids):
        raise ValueError("units, posterior summaries and grades do not cover the same ids")
    grades = np.asarray(assignment.grades, dtype=int)
    ranks = np.asarray(condorcet_rank, dtype=int)
    if len(grades) != len(ids) or len(ranks) != len(ids):
        raise ValueError("grade or rank vector length does not match the units")
    stars = stars_from_grades(grades, polarity)
    shown = anonymized_ids(units) if anonymize else ids
    aux_cols = sorted({k for u in units for k in u.aux})
    rows = []
    for i, u in enumerate(units):
        s = summaries[i]
        row = {
            "id": shown[i], "group": u.group or "", "estimate": u.estimate, "se": u.se,
            "post_mean": s.mean, "ci_lo": s.lo, "ci_hi": s.hi, "grade": int(stars[i]),
            "condorcet_rank": int(ranks[i]),
        }
        row.update({k: u.aux.get(k, "") for k in aux_cols})
        rows.append(row)
    # Condorcet order, ties broken by posterior mean (largest latent value first)
    means = np.array([s.mean for s in summaries])
    order = np.lexsort((-means, ranks))
    seq = grades[order]
    breaks = [int(order[k]) for k in range(1, len(seq)) if seq[k] > seq[k - 1]]
    contiguous = not breaks
    if not contiguous:
        logger.warning("grades are not contiguous in Condorcet order for %d units", len(breaks))
    caterpillar = {
        "polarity": polarity,
        "lambda": assignment.lam,
        "contiguous": contiguous,
        "exceptions": [shown[i] for i in breaks],
        "units": [
            {"id": shown[i], "position": pos + 1, "condorcet_rank": int(ranks[i]), "post_mean": float(means[i]),
             "ci_lo": summaries[i].lo, "ci_hi": summaries[i].hi, "grade": int(stars[i])}
            for pos, i in enumerate(order)
        ],
    }
    if out_dir is not None:
        out = Path(out_dir)
        with (out / "reportcard.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            header = ["id", "group", "estimate", "se", "post_mean", "ci_lo", "ci_hi", "grade", "condorcet_rank", *aux_cols]
            w.writerow(header)
            for r in rows:
                w.writerow([_g6(r[k]) if isinstance(r[k], float) else r[k] for k in header])
        _write_json(out / "caterpillar.json", caterpillar)
    return ReportCard(rows, caterpillar)


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def _exit_code(stage: str, err: BaseException) -> int:
    if isinstance(err, (ConfigError, IngestError, DomainError)):
        return EXIT_VALIDATION
    if isinstance(err, (OSError, json.JSONDecodeError)):
        return EXIT_IO
    if isinstance(err, (EstimationError, ConvergenceError, PosteriorError)):
        return EXIT_ESTIMATION
    if stage == "grade":
        return EXIT_SOLVER
    if stage in ("fit-gmm", "fit-prior", "posteriors"):
        return EXIT_ESTIMATION
    return EXIT_VALIDATION if isinstance(err, ValueError) else EXIT_IO


class Pipeline:
    """Stage runner bound to one configuration and output directory."""

    def __init__(self, config: PipelineConfig):
        self.config = config
        self.out = Path(config.output_dir)
        self.manifest_path = self.out / "manifest.json"

    # -- manifest -----------------------------------------------------------
    def _manifest(self) -> dict:
        if self.manifest_path.exists():
            m = _read_json(self.manifest_path)
            if m.get("config") == self.config.to_dict():
                return m
        return {"config": self.config.to_dict(), "stages": {}}

    def _record(self, stage: str, inputs: list[Path], outputs: list[Path], seconds: float, error: str | None = None):
        m = self._manifest()
        m["stages"][stage] = {
            "inputs": {p.name: _sha256(p) for p in inputs if p.exists()},
            "outputs": {p.name: _sha256(p) for p in outputs if p.exists()},
            "seed": self.config.seed,
            "wall_time_s": round(seconds, 3),
            "status": "failed" if error else "ok",
            **({"error": error} if error else {}),
        }
        m["stage_order"] = [s for s in STAGES if s in m["stages"]]
        _write_json(self.manifest_path, m)

    def path(self, name: str) -> Path:
        return self.out / name

    def run(self, stages: Sequence[str] | None = None) -> dict:
        stages = list(STAGES if stages is None else stages)
        for s in stages:
            if s not in STAGES:
                raise ConfigError(f"unknown stage {s!r}")
        try:
            self.out.mkdir(parents=True, exist_ok=True)
        except OSError as err:
            raise StageError("setup", EXIT_IO, err) from err
        with threadpool_limits(limits=self.config.threads):
            for s in stages:
                self._run_stage(s)
        return self._manifest()

    def _run_stage(self, stage: str) -> None:
        fn: Callable[[], tuple[list[Path], list[Path]]] = getattr(self, "stage_" + stage.replace("-", "_"))
        start = time.perf_counter()
        logger.info("stage %s started", stage)
        try:
            inputs, outputs = fn()
        except Exception as err:  # recorded, then re-raised with an exit code
            self._record(stage, [], [], time.perf_counter() - start, f"{type(err).__name__}: {err}")
            raise StageError(stage, _exit_code(stage, err), err) from err
        self._record(stage, inputs, outputs, time.perf_counter() - start)
        logger.info("stage %s finished in %.2fs", stage, time.perf_counter() - start)

    # -- loaders --------------------------------------------------------------
    def units(self) -> list[UnitRecord]:
        return _units_from_json(_read_json(self.path("units.json")))

    def params(self) -> PrecisionModelParams:
        return PrecisionModelParams.from_json(self.path("gmm.json").read_text(encoding="utf-8"))

    def prior(self) -> dict:
        d = _read_json(self.path("prior.json"))
        return {k: SplineMixing.from_dict(v) if isinstance(v, dict) and "alpha" in v else v for k, v in d.items()}

    def summaries(self) -> list[PosteriorSummary]:
        return [PosteriorSummary(**r) for r in _read_json(self.path("posteriors.json"))]

    def matrices(self) -> PairwiseMatrices:
        ids = [s.id for s in self.summaries()]
        pi = read_matrix_binary(self.path("pi.bin"))
        mu = m = None
        if self.config.p == 2:
            mu, m = read_matrix_binary(self.path("mu.bin")), read_matrix_binary(self.path("m.bin"))
        return PairwiseMatrices(ids, pi, self.config.p, mu, m)

    # -- stages ---------------------------------------------------------------
    def stage_ingest(self):
        src = self.config.input_path()
        units = load_units(src, self.config.schema_obj())
        if not units:
            raise IngestError(f"no units in {src}")
        if self.config.model == "hierarchical" and any(u.group is None for u in units):
            raise IngestError("hierarchical model needs a group column")
        out_json = _write_json(self.path("units.json"), _units_to_json(units))
        out_csv = self.path("units.csv")
        with out_csv.open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "group", "estimate", "se"])
            for u in units:
                w.writerow([u.id, u.group or "", _g6(u.estimate), _g6(u.se)])
        return [src], [out_json, out_csv]

    def stage_fit_gmm(self):
        cfg = self.config
        units = self.units()
        params = fit_gmm(
            units, cfg.model == "hierarchical", cluster=cfg.cluster, seed=cfg.seed,
            restarts=cfg.gmm_restarts, fixed_beta=cfg.fixed_beta,
        )
        out = self.path("gmm.json")
        out.write_text(params.to_json() + "\n", encoding="utf-8")
        return [self.path("units.json")], [out]

    def stage_fit_prior(self):
        cfg = self.config
        units, params = self.units(), self.params()
        if cfg.model == "baseline":
            m = cfg.grid_points or 1000
            x, _ = v_scale(units, params.beta)
            support = build_support(x, params.mu_v, params.sigma_v, m)
            if cfg.calibrate and cfg.penalty is None:
                res = calibrate_penalty(units, params, support, cfg.spline_order, tie_tolerance=cfg.tie_tolerance)
                G, c, crit = res.G, res.penalty, res.criterion
            else:
                G, c, crit = fit_logspline(units, params.beta, support, float(cfg.penalty), cfg.spline_order), float(cfg.penalty), None
            body = {"model": "baseline", "G": G.to_dict(), "penalty": c, "criterion": crit,
                    "moments_v": list(mixing_moments(G))}
        else:
            me, mx = cfg.grid_points or (200, 200)
            es, xs = default_hierarchical_supports(units, params, int(me), int(mx))
            if cfg.calibrate and cfg.penalty is None:
                res = calibrate_hierarchical(units, params, es, xs, spline_order=cfg.spline_order)
                Ge, Gx, pen, crit = res.G_eta, res.G_xi, res.penalties, res.criterion
            else:
                pen = tuple(float(v) for v in cfg.penalty)
                Ge, Gx = fit_hierarchical(units, params.beta, es, xs, pen, spline_order=cfg.spline_order)
                crit = None
            body = {"model": "hierarchical", "G_eta": Ge.to_dict(), "G_xi": Gx.to_dict(), "penalty": list(pen),
                    "criterion": crit, "moments_eta": list(mixing_moments(Ge)), "moments_xi": list(mixing_moments(Gx))}
        out = _write_json(self.path("prior.json"), body)
        return [self.path("units.json"), self.path("gmm.json")], [out]

    def stage_posteriors(self):
        cfg = self.config
        units, params, prior = self.units(), self.params(), self.prior()
        if prior["model"] == "baseline":
            ups = unit_posteriors(units, prior["G"], params.beta)
            summaries = [posterior_summary(u, cfg.level) for u in ups]
            mats = pairwise_matrices(ups, cfg.p)
        else:
            hp = hierarchical_posteriors(units, prior["G_eta"], prior["G_xi"], params.beta, cfg.draws, cfg.seed, cfg.p,
                                         level=cfg.level)
            summaries, mats = hp.summaries, hp.matrices
        outs = [_write_json(self.path("posteriors.json"), [asdict(s) for s in summaries])]
        with self.path("posteriors.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", "post_mean", "ci_lo", "ci_hi", "second_moment"])
            for s in summaries:
                w.writerow([s.id, _g6(s.mean), _g6(s.lo), _g6(s.hi), _g6(s.second_moment)])
        outs.append(self.path("posteriors.csv"))
        write_matrix_binary(self.path("pi.bin"), mats.pi)
        write_matrix_csv(self.path("pi.csv"), mats.ids, mats.pi)
        outs += [self.path("pi.bin"), self.path("pi.csv")]
        if cfg.p == 2:
            write_matrix_binary(self.path("mu.bin"), mats.mu)
            write_matrix_binary(self.path("m.bin"), mats.m)
            outs += [self.path("mu.bin"), self.path("m.bin")]
        return [self.path("units.json"), self.path("gmm.json"), self.path("prior.json")], outs

    def _sweep(self) -> list[tuple[float, GradeAssignment]]:
        cfg = self.config
        return lambda_sweep(self.matrices(), cfg.lambdas, cfg.p, mode=cfg.solver_mode, exact_limit=cfg.exact_limit,
                            restarts=cfg.heuristic_restarts, seed=cfg.seed)

    def stage_grade(self):
        cfg = self.config
        sweep = self._sweep()
        ids = [s.id for s in self.summaries()]
        body = {"lambdas": [lam for lam, _ in sweep], "condorcet_rank": [int(r) for r in sweep[0][1].condorcet_rank],
                "assignments": [a.to_dict() for _, a in sweep]}
        outs = [_write_json(self.path("grades.json"), body)]
        with self.path("grades.csv").open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh)
            w.writerow(["id", *(f"grade_lambda_{_g6(lam)}" for lam, _ in sweep), "condorcet_rank"])
            for i, uid in enumerate(ids):
                w.writerow([uid, *(int(a.grades[i]) for _, a in sweep), body["condorcet_rank"][i]])
        outs.append(self.path("grades.csv"))
        if cfg.export_lp:
            spec = assemble_objective(self.matrices(), cfg.report_lambda, cfg.p)
            outs.append(export_lp(spec, self.path("grading.lp")))
        inputs = [self.path(n) for n in ("pi.bin", "mu.bin", "m.bin", "posteriors.json") if self.path(n).exists()]
        return inputs, outs

    def load_grades(self) -> tuple[list[tuple[float, GradeAssignment]], np.ndarray]:
        body = _read_json(self.path("grades.json"))
        mats = self.matrices()
        out = []
        for d in body["assignments"]:
            g = np.array([d["grades"][k] for k in mats.ids], dtype=int)
            spec = assemble_objective(mats, d["lambda"], d["p"])
            risk, dr, tau = evaluate(spec, g)
            out.append((d["lambda"], GradeAssignment(g, risk, dr, tau, int(g.max()), d["lambda"], d["p"],
                                                     d["method"], tuple(mats.ids), None, d["multiple_optima"])))
        ranks = np.array(body["condorcet_rank"], dtype=int)
        for _, a in out:
            a.condorcet_rank = ranks
        return out, ranks

    def frontier(self):
        units = self.units()
        sweep, _ = self.load_grades()
        points = frontier_table(sweep, self.matrices(), estimates=[u.estimate for u in units],
                                posterior_means=[s.mean for s in self.summaries()], p=self.config.p)
        return write_frontier_csv(self.path("frontier.csv"), points)

    def stage_report(self):
        cfg = self.config
        units, summaries = self.units(), self.summaries()
        sweep, ranks = self.load_grades()
        mats = self.matrices()
        outs = [self.frontier()]
        chosen = dict(sweep)[cfg.report_lambda]
        card = emit_reportcard(units, summaries, chosen, ranks, cfg.polarity, cfg.anonymize, self.out)
        outs += [self.path("reportcard.csv"), self.path("caterpillar.json")]
        means = [s.mean for s in summaries]
        seconds = [s.second_moment for s in summaries]
        marginal = self._marginal_variance()
        summary = {"marginal_variance": marginal, "contiguous": card.caterpillar["contiguous"], "by_lambda": []}
        for lam, a in sweep:
            between, r2 = between_grade_variance(a.grades, means, seconds, marginal)
            entry = {"lambda": lam, "n_grades": a.n_grades, "dr": a.dr, "tau_bar": a.tau_bar, "risk": a.risk,
                     "between_sd": math.sqrt(max(between, 0.0)), "r2": r2,
                     "grade_sizes": [int((a.grades == g).sum()) for g in range(1, a.n_grades + 1)]}
            if a.n_grades >= 2:
                cond = conditional_dr_matrix(a.grades, mats, cfg.p)
                stars = stars_from_grades(cond.labels, cfg.polarity)
                name = f"dr_matrix_lambda_{_g6(lam)}.csv"
                outs.append(write_dr_matrix_csv(self.path(name), cond, [f"{s}-star" for s in stars]))
            summary["by_lambda"].append(entry)
        outs.append(_write_json(self.path("summary.json"), summary))
        inputs = [self.path(n) for n in ("units.json", "posteriors.json", "grades.json", "pi.bin")]
        return inputs, outs

    def _marginal_variance(self) -> float | None:
        """Prior variance of ``theta`` implied by the fitted mixing distribution(s)."""
        prior, units, params = self.prior(), self.units(), self.params()
        scales = [u.se**params.beta for u in units]
        if prior["model"] == "baseline":
            _, sd, _, _ = mixing_moments(prior["G"], scales=scales)
        else:
            _, sd, _, _ = mixing_moments(prior["G_xi"], scales=scales, factor=prior["G_eta"])
        return sd**2


def run_pipeline(config: PipelineConfig | Mapping[str, Any], stages: Sequence[str] | None = None) -> dict:
    """Run the given stages (all by default) and return the manifest."""
    if not isinstance(config, PipelineConfig):
        config = PipelineConfig.from_mapping(config)
    return Pipeline(config).run(stages)


def dump_default_config() -> str:
    return yaml.safe_dump(PipelineConfig().to_dict(), sort_keys=False)
