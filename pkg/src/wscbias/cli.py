"""Command-line entry point: ``wscbias <stage> --out DIR [options]``.

Every stage reads its inputs from, and writes its outputs to, ``--out``.
The effective configuration is saved there as ``config.yaml`` so later
stages can run without repeating ``--config``.
"""

from __future__ import annotations

import json
import logging
import sys

import click

from . import pipeline as pl
from .errors import ConfigError, WSCError
from .nullsim import MODES, THREADS_ENV


def _config(ctx, require_saved=False):
    opts = ctx.obj
    out = opts["out"]
    overrides = list(opts["set"])
    if opts["seed"] is not None:
        overrides.append(f"scenario.rng_seed={opts['seed']}")
    if opts["replicates"] is not None:
        overrides.append(f"nullsim.replicates={opts['replicates']}")
    if opts["strict_matching"] is not None:
        overrides.append(f"analysis.strict_matching={opts['strict_matching']}")
    if opts["caliper"] is not None:
        overrides.append(f"analysis.caliper={opts['caliper']}")
    saved = out / pl.FILES["config"]
    if opts["config"] is not None:
        return pl.load_config(opts["config"], overrides)
    if saved.exists():
        return pl.load_config(saved, overrides)
    if require_saved:
        raise ConfigError("config", f"pass --config or run 'generate' into {out} first")
    return pl.load_config(None, overrides)


def _workspace(ctx, stage) -> pl.Workspace:
    cfg = _config(ctx, require_saved=stage != "generate")
    ws = pl.Workspace(ctx.obj["out"], cfg)
    if stage != "generate":
        snap = ws.root / pl.FILES["snapshot"]
        if snap.exists():
            generated = json.loads(snap.read_text())["config"]
            if generated != cfg.scenario.to_dict():
                raise ConfigError("scenario", "differs from the generated population; rerun 'generate'")
        cfg.dump(ws.path("config"))
    return ws


def _finish(ws, stage, error=None):
    report = pl.build_report(ws, error)
    pl.write_report(ws, report)
    if error:
        click.echo(f"{stage} failed: {error['type']}: {error['message']}", err=True)
        sys.exit(1)
    click.echo(f"{stage}: ok ({ws.root})")


def _run(ctx, stage, fn):
    try:
        ws = _workspace(ctx, stage)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    try:
        ws.timed(stage, fn, ws)
    except (WSCError, OSError, KeyError, ValueError) as exc:
        _finish(ws, stage, {"stage": stage, "type": type(exc).__name__, "message": str(exc)})
    _finish(ws, stage)


@click.group()
@click.option("--config", "config", type=click.Path(dir_okay=False), default=None,
              help="YAML config file or the name of a bundled config.")
@click.option("--out", "out", type=click.Path(file_okay=False), required=True,
              help="Output directory.")
@click.option("--seed", type=click.IntRange(0, 2**64 - 1), default=None,
              help="Master seed (overrides scenario.rng_seed).")
@click.option("--replicates", type=click.IntRange(0), default=None,
              help="Null-simulation replicates.")
@click.option("--threads", type=click.IntRange(1), default=None, envvar=THREADS_ENV,
              help=f"Worker processes for the null simulation [env {THREADS_ENV}].")
@click.option("--strict-matching", type=bool, default=None,
              help="Fail when a control school finds no match.")
@click.option("--caliper", type=click.FloatRange(min=0, min_open=True), default=None,
              help="Caliper width on the logit scale.")
@click.option("--set", "set_", multiple=True, metavar="SECTION.KEY=VALUE",
              help="Override any config key; repeatable.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx, config, out, seed, replicates, threads, strict_matching, caliper, set_, verbose):
    """Selection-bias estimates from within-study comparisons on synthetic schools."""
    from pathlib import Path

    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    ctx.obj = {"config": config, "out": Path(out), "seed": seed, "replicates": replicates,
               "threads": threads, "strict_matching": strict_matching, "caliper": caliper,
               "set": set_}


@main.command()
@click.pass_context
def generate(ctx):
    """Generate a synthetic population (schools.csv, students.csv)."""
    _run(ctx, "generate", pl.stage_generate)


@main.command()
@click.pass_context
def prepare(ctx):
    """Build the standardized school design matrix."""
    _run(ctx, "prepare", pl.stage_prepare)


@main.command()
@click.pass_context
def match(ctx):
    """Propensity search, matching and balance for every intervention."""
    _run(ctx, "match", pl.stage_match)


@main.command()
@click.pass_context
def estimate(ctx):
    """Naive and matched bias estimates (estimates.csv)."""
    _run(ctx, "estimate", pl.stage_estimate)


@main.command()
@click.option("--mode", "modes", type=click.Choice(MODES), multiple=True,
              help="Restrict to one mode; repeatable. Defaults to the config.")
@click.pass_context
def nullsim(ctx, modes):
    """Placebo reference distributions."""
    threads = ctx.obj["threads"]
    _run(ctx, "nullsim", lambda ws: pl.stage_nullsim(ws, modes or None, threads=threads))


@main.command()
@click.pass_context
def meta(ctx):
    """Meta-analysis, placebo p-values and magnitude regressions."""
    def fn(ws):
        pl.stage_meta(ws)
        pl.stage_regressions(ws)
    _run(ctx, "meta", fn)


@main.command()
@click.pass_context
def report(ctx):
    """Rebuild report.json from the files in the output directory."""
    _run(ctx, "report", lambda ws: None)


@main.command("pipeline")
@click.pass_context
def pipeline_cmd(ctx):
    """Run every stage in order."""
    try:
        cfg = _config(ctx)
    except ConfigError as exc:
        raise click.UsageError(str(exc)) from None
    rep = pl.run_pipeline(cfg, ctx.obj["out"], threads=ctx.obj["threads"])
    if rep["status"] != "ok":
        err = rep["error"]
        click.echo(f"pipeline failed in {err['stage']}: {err['type']}: {err['message']}", err=True)
        sys.exit(1)
    click.echo(f"pipeline: ok ({ctx.obj['out']})")


if __name__ == "__main__":
    main()
