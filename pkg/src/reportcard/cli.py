"""Command-line entry point: ``reportcard <stage> --config run.yaml``.

Exit codes: 0 success, 2 validation, 3 estimation, 4 solver, 5 I/O.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from .pipeline import (
    EXIT_IO,
    EXIT_OK,
    EXIT_VALIDATION,
    STAGES,
    THREADS_ENV,
    ConfigError,
    Pipeline,
    PipelineConfig,
    StageError,
    dump_default_config,
)

DEFAULTS_HELP = "Defaults (YAML keys):\n\n" + "\n".join(f"  {line}" for line in dump_default_config().splitlines())


def _load(ctx: click.Context) -> PipelineConfig:
    opts = ctx.obj
    overrides = {k: v for k, v in opts["overrides"].items() if v is not None}
    if opts["config"] is None:
        return PipelineConfig.from_mapping(overrides)
    return PipelineConfig.load(opts["config"], overrides)


def _run(ctx: click.Context, stages, extra=None) -> None:
    try:
        cfg = _load(ctx)
        pipe = Pipeline(cfg)
        if stages:
            pipe.run(stages)
        if extra is not None:
            pipe.out.mkdir(parents=True, exist_ok=True)
            extra(pipe)
    except ConfigError as err:
        click.echo(f"config error: {err}", err=True)
        sys.exit(EXIT_VALIDATION)
    except StageError as err:
        click.echo(f"error in stage {err.stage}: {err.cause}", err=True)
        sys.exit(err.exit_code)
    except OSError as err:
        click.echo(f"I/O error: {err}", err=True)
        sys.exit(EXIT_IO)
    sys.exit(EXIT_OK)


@click.group(help=__doc__, epilog=DEFAULTS_HELP, context_settings={"max_content_width": 100})
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None, help="YAML run configuration.")
@click.option("--output-dir", default=None, help="Overrides output_dir.")
@click.option("--seed", type=int, default=None, help="Overrides seed.")
@click.option("--model", type=click.Choice(["baseline", "hierarchical"]), default=None, help="Overrides model.")
@click.option("--spline-order", type=int, default=None, help="Overrides spline_order (default 5).")
@click.option("--penalty", type=float, default=None, help="Fixed baseline penalty; skips calibration.")
@click.option("--threads", type=int, default=None, help=f"BLAS thread cap (default from ${THREADS_ENV}).")
@click.option("-v", "--verbose", count=True, help="More logging (-v info, -vv debug).")
@click.pass_context
def main(ctx, config, output_dir, seed, model, spline_order, penalty, threads, verbose):
    level = logging.WARNING - 10 * min(verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {
        "config": config,
        "overrides": {"output_dir": output_dir, "seed": seed, "model": model, "spline_order": spline_order,
                      "penalty": penalty, "threads": threads},
    }


@main.command(help="Read and transform the unit data.")
@click.pass_context
def ingest(ctx):
    _run(ctx, ["ingest"])


@main.command("fit-gmm", help="Estimate the precision-dependence model by two-step GMM.")
@click.pass_context
def fit_gmm_cmd(ctx):
    _run(ctx, ["fit-gmm"])


@main.command("fit-prior", help="Fit (and calibrate) the log-spline mixing distribution(s).")
@click.pass_context
def fit_prior(ctx):
    _run(ctx, ["fit-prior"])


@main.command(help="Posterior summaries and pairwise ordering matrices.")
@click.pass_context
def posteriors(ctx):
    _run(ctx, ["posteriors"])


@main.command(help="Solve for grades at every configured lambda.")
@click.option("--lp", is_flag=True, help="Also export the integer program in LP format.")
@click.pass_context
def grade(ctx, lp):
    if lp:
        ctx.obj["overrides"]["export_lp"] = True
    _run(ctx, ["grade"])


@main.command(help="Write the DR / expected-tau frontier with naive ranking comparators.")
@click.pass_context
def frontier(ctx):
    _run(ctx, [], extra=lambda pipe: click.echo(str(pipe.frontier())))


@main.command(help="Write the report card, DR matrices and summary.")
@click.pass_context
def report(ctx):
    _run(ctx, ["report"])


@main.command("all", help="Run every stage in order.")
@click.pass_context
def run_all(ctx):
    _run(ctx, list(STAGES), extra=lambda pipe: click.echo(json.dumps(pipe._manifest()["stage_order"])))


if __name__ == "__main__":  # pragma: no cover
    main()
