"""Command-line interface.

Subcommands: train, eval, scenario, check-grad, bench-steps.
Exit codes: 0 success, 2 config error, 3 numerical failure.
Set METAFN_LOG (DEBUG/INFO/WARNING/...) to control verbosity.
"""

from __future__ import annotations

import logging
import os
import sys
from dataclasses import replace

import click
import numpy as np

from . import harness
from .errors import ConfigError, NonFiniteLoss, NotPositiveDefinite

EXIT_CONFIG = 2
EXIT_NUMERICAL = 3


def _setup_logging():
    level = os.environ.get("METAFN_LOG", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING), format="%(message)s")


def _load_config(config, seed, out, threads, dump_weights) -> harness.RunConfig:
    cfg = harness.RunConfig.from_toml(config) if config else harness.RunConfig()
    overrides = {}
    if seed is not None:
        overrides["seed"] = seed
    if out is not None:
        overrides["out"] = out
    if threads is not None:
        overrides["threads"] = threads
    if dump_weights:
        overrides["dump_weights"] = True
    return replace(cfg, **overrides) if overrides else cfg


def _run(fn):
    try:
        return fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except (NonFiniteLoss, NotPositiveDefinite) as exc:
        click.echo(f"numerical failure: {exc}", err=True)
        sys.exit(EXIT_NUMERICAL)


def common_options(fn):
    fn = click.option("--config", type=click.Path(exists=True), default=None)(fn)
    fn = click.option("--seed", type=int, default=None)(fn)
    fn = click.option("--out", type=click.Path(), default=None)(fn)
    fn = click.option("--threads", type=int, default=None)(fn)
    fn = click.option("--dump-weights", is_flag=True, default=False)(fn)
    return fn


@click.group()
def main():
    """Few-shot meta-learning with a closed-form kernel inner loop."""
    _setup_logging()


@main.command()
@common_options
def train(config, seed, out, threads, dump_weights):
    """Meta-train and write metrics.csv (plus params.npz) to --out."""

    def go():
        cfg = _load_config(config, seed, out, threads, dump_weights)
        model, records = harness.train(cfg, out_dir=cfg.out)
        if cfg.out is not None:
            np.savez(os.path.join(cfg.out, "params.npz"), flat=model.get_flat())
        if records:
            last = records[-1]
            click.echo(f"final train loss {last.train_loss:.6f}")
            if last.eval_summary is not None:
                s = last.eval_summary
                click.echo(f"eval {s.metric_kind} {s.mean_metric:.4f} ± {s.ci95_halfwidth:.4f}")
        return model

    _run(go)


@main.command("eval")
@common_options
@click.option("--params", "params_path", type=click.Path(exists=True), default=None,
              help="params.npz from a previous train run; fresh init if omitted")
def eval_cmd(config, seed, out, threads, dump_weights, params_path):
    """Evaluate on fresh episodes; write summary.csv to --out."""

    def go():
        cfg = _load_config(config, seed, out, threads, dump_weights)
        dist = harness.build_distribution(cfg.task, default_seed=cfg.seed)
        model = harness.build_model(cfg, dist)
        if params_path is not None:
            model.set_flat(np.load(params_path)["flat"])
        summary = harness.evaluate(model, cfg, dist, eval_index=0)
        click.echo(
            f"{summary.metric_kind} {summary.mean_metric:.4f} ± {summary.ci95_halfwidth:.4f} "
            f"over {summary.n_episodes} episodes"
        )
        if cfg.out is not None:
            os.makedirs(cfg.out, exist_ok=True)
            harness.write_summary(
                os.path.join(cfg.out, "summary.csv"),
                [("eval", cfg.inner_algorithm, cfg.outer_aggregator, summary)],
            )
        return summary

    _run(go)


@main.command()
@common_options
def scenario(config, seed, out, threads, dump_weights):
    """Train on [task], evaluate on [task] and [task_test]; write summary.csv."""

    def go():
        cfg = _load_config(config, seed, out, threads, dump_weights)
        in_dist, out_of_dist = harness.scenario(cfg, out_dir=cfg.out)
        for label, s in (("in-dist", in_dist), ("out-of-dist", out_of_dist)):
            click.echo(
                f"{label}: {s.metric_kind} {s.mean_metric:.4f} ± {s.ci95_halfwidth:.4f}"
            )
        return in_dist, out_of_dist

    _run(go)


@main.command("check-grad")
@common_options
@click.option("--corrupt", is_flag=True, default=False,
              help="inject a gradient fault to prove the check can fail")
def check_grad(config, seed, out, threads, dump_weights, corrupt):
    """Finite-difference check of every meta-gradient path."""

    def go():
        cfg = _load_config(config, seed, out, threads, dump_weights)
        results = harness.check_gradients(cfg, corrupt=corrupt)
        ok = True
        for name, rep in results:
            status = "PASS" if rep.passed else "FAIL"
            ok &= rep.passed
            click.echo(f"{status} {name}: max rel err {rep.max_rel_err:.3e} (tol {rep.tol:g})")
        if not ok:
            sys.exit(EXIT_NUMERICAL)
        return results

    _run(go)


@main.command("bench-steps")
@common_options
def bench_steps(config, seed, out, threads, dump_weights):
    """Inner-step sweep: MAML at 1..5 steps vs one-solve kernel adaptation."""

    def go():
        cfg = _load_config(config, seed, out, threads, dump_weights)
        maml, amfs = harness.bench_steps(cfg, out_dir=cfg.out)
        for steps, s in sorted(maml.items()):
            click.echo(f"maml steps={steps}: {s.metric_kind} {s.mean_metric:.4f} ± {s.ci95_halfwidth:.4f}")
        click.echo(f"i_amfs (1 solve): {amfs.metric_kind} {amfs.mean_metric:.4f} ± {amfs.ci95_halfwidth:.4f}")
        return maml, amfs

    _run(go)


if __name__ == "__main__":
    main()
