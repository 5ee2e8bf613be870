"""``rerankkit`` command line: a thin layer over :mod:`rerankkit.pipeline`."""

from __future__ import annotations

import json
import logging
import sys

import click

from rerankkit import pipeline
from rerankkit.config import load_config
from rerankkit.errors import RerankKitError


def _report(result: pipeline.StageResult) -> None:
    payload = {
        "records": result.n_records,
        "errors": len(result.errors),
        "outputs": {k: str(v) for k, v in result.outputs.items()},
        "summary": result.summary,
    }
    click.echo(json.dumps(payload, ensure_ascii=False, sort_keys=True))
    if not result.ok:
        click.echo(f"{len(result.errors)} record(s) failed; see {result.outputs['errors']}", err=True)
        sys.exit(1)


def _run(fn, *args, **kwargs) -> None:
    try:
        result = fn(*args, **kwargs)
    except (RerankKitError, OSError) as exc:
        raise click.ClickException(str(exc)) from None
    _report(result)


@click.group()
@click.option("--config", "config_path", type=click.Path(exists=True, dir_okay=False), help="YAML pipeline config.")
@click.option("--seed", type=int, default=None, help="Override the config seed.")
@click.option("--cache-dir", type=click.Path(file_okay=False), default=None, help="Override the cache directory.")
@click.option("-v", "--verbose", count=True)
@click.pass_context
def main(ctx: click.Context, config_path, seed, cache_dir, verbose) -> None:
    """Data curation and evaluation for structured-output rerankers."""
    logging.basicConfig(level=logging.WARNING - 10 * min(verbose, 2), format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(config_path)
    except RerankKitError as exc:
        raise click.ClickException(str(exc)) from None
    ctx.obj = cfg.with_overrides(seed=seed, cache_dir=cache_dir)


_in = click.Path(exists=True, dir_okay=False)
_out = click.Path(dir_okay=False)


@main.command()
@click.option("--corpus", type=_in, default=None, help="Open-corpus pairs JSONL.")
@click.option("--queries", type=_in, default=None, help="Queries JSONL for web search.")
@click.option("-o", "--output", type=_out, required=True)
@click.pass_obj
def collect(cfg, corpus, queries, output):
    """Gather pairs from an open corpus, web search and keyword rewrites."""
    if corpus is None and queries is None:
        raise click.UsageError("give --corpus and/or --queries")
    _run(pipeline.cmd_collect, output, cfg, queries_file=queries, corpus_file=corpus)


@main.command()
@click.argument("pairs_file", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.pass_obj
def annotate(cfg, pairs_file, output):
    """Teacher scores plus judge-ensemble labels."""
    _run(pipeline.cmd_annotate, pairs_file, output, cfg)


@main.command()
@click.argument("labeled_file", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.option("--report", type=_out, default=None)
@click.pass_obj
def balance(cfg, labeled_file, output, report):
    """Entropy-targeted under-sampling over the score x length grid."""
    _run(pipeline.cmd_balance, labeled_file, output, cfg, report_file=report)


@main.command("build-samples")
@click.argument("balanced_file", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.pass_obj
def build_samples(cfg, balanced_file, output):
    """Attach SFT targets ("no" for negatives, generated fields for positives)."""
    _run(pipeline.cmd_build_samples, balanced_file, output, cfg)


@main.command()
@click.argument("samples_file", type=_in)
@click.option("--train", "train_file", type=_out, required=True)
@click.option("--dev", "dev_file", type=_out, required=True)
@click.pass_obj
def split(cfg, samples_file, train_file, dev_file):
    """Query-level train/dev split."""
    _run(pipeline.cmd_split, samples_file, train_file, dev_file, cfg)


@main.command("eval-rank")
@click.argument("qrels", type=_in)
@click.argument("run", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.option("--force-insert/--no-force-insert", default=None, help="Append missing annotated positives.")
@click.pass_obj
def eval_rank(cfg, qrels, run, output, force_insert):
    """NDCG@k of a TREC run against qrels."""
    _run(pipeline.cmd_eval_rank, qrels, run, output, cfg, force_insert=force_insert)


@main.command("eval-quality")
@click.argument("outputs_file", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.option("--pairs-csv", type=_out, default=None)
@click.option("--skip-judge", is_flag=True, help="Rule-based metrics only.")
@click.pass_obj
def eval_quality(cfg, outputs_file, output, pairs_csv, skip_judge):
    """Label match, format, entity fidelity, compression and judged dimensions."""
    _run(pipeline.cmd_eval_quality, outputs_file, output, cfg, skip_judge=skip_judge, csv_file=pairs_csv)


@main.command("judge-kappa")
@click.argument("labeled_file", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.option("-k", "k", type=int, default=None, help="Panel size (default judges.panel_size).")
@click.pass_obj
def judge_kappa(cfg, labeled_file, output, k):
    """Pairwise Cohen's kappa and greedy panel selection."""
    _run(pipeline.cmd_judge_kappa, labeled_file, output, cfg, k=k)


@main.command("loss-oracle")
@click.argument("records_file", type=_in)
@click.option("-o", "--output", type=_out, required=True)
@click.pass_obj
def loss_oracle(cfg, records_file, output):
    """Evaluate score and loss formulas over a batch of records."""
    _run(pipeline.cmd_loss_oracle, records_file, output, cfg)


if __name__ == "__main__":
    main()
