#!/usr/bin/env python

"""Command-line tool for planning, verifying, training and benchmarking adapters

Example usage:

  $ klora plan --d-in 4096 --d-out 4096 --rank 8 --json
  $ klora --seed 7 verify --trials 200
  $ klora --out runs/seq sequential experiment.ini

"""

import json
import logging
import os
import sys

import click

from . import checkpoint
from .adapters import init_adapter
from .bench import REFERENCE_GPU_THROUGHPUT, bench_plans
from .config import build_layer, build_plan, build_task, load_config
from .linalg import Rng
from .planner import AdapterKind, LayerSpec, lora_ratio, param_count, plan_for
from .reports import (
    BenchSuiteReport,
    PlanReport,
    PlanRow,
    RunManifest,
    TrainRunReport,
    VerifyReport,
    report_schemas,
)
from .train import run_comparison, train
from .verify import run_suites

CONTEXT_SETTINGS = dict(help_option_names=['-h', '--help'])

KIND_CHOICE = click.Choice([kind.name for kind in AdapterKind], case_sensitive=False)

logger = logging.getLogger('klora')


def configure_logging(verbosity):
    log_level = max(10, 30 - 10 * verbosity)
    logging.basicConfig(stream=sys.stderr, level=log_level)


def emit(ctx, command, report, summary):
    """Write ``report`` to ``<out>/<command>.json`` and stdout as requested."""
    text = report.model_dump_json(indent=2)
    out = ctx.obj['out']
    if out is not None:
        os.makedirs(out, exist_ok=True)
        path = os.path.join(out, '%s.json' % command)
        with open(path, 'w', encoding='utf-8') as file:
            file.write(text)
            file.write('\n')
        logger.info("Wrote %s", path)
    if ctx.obj['json']:
        click.echo(text)
    else:
        click.echo(summary)


def run_command(fn):
    """Log and exit 1 on any exception, the way every subcommand ends."""
    try:
        return fn()
    except Exception:
        logger.exception("Failed. Exception caught")
        sys.exit(1)


@click.group(context_settings=CONTEXT_SETTINGS)
@click.option('--verbose', '-v', count=True, help="Increase verbosity.")
@click.option('--quiet', '-q', count=True, help="Decrease verbosity.")
@click.option('--seed', type=click.IntRange(0, 2 ** 64 - 1), default=None,
              help="Seed for every random stream; overrides a config file seed.")
@click.option('--out', 'out', type=click.Path(file_okay=False), default=None,
              help="Directory for JSON reports and checkpoints.")
@click.option('--json', 'as_json', is_flag=True,
              help="Print the JSON report to stdout.")
@click.pass_context
def cli(ctx, verbose, quiet, seed, out, as_json):
    """Kron-LoRA, LoRA and KronA adapters for frozen linear layers."""
    configure_logging(verbose - quiet)
    ctx.ensure_object(dict)
    ctx.obj.update(seed=seed, out=out, json=as_json)


def command_seed(ctx):
    seed = ctx.obj['seed']
    return 0 if seed is None else seed


@cli.command(short_help="Run the oracle, rank and gradient suites.")
@click.option('--trials', type=click.IntRange(min=1), default=200, show_default=True,
              help="Random configurations in the oracle suite.")
@click.option('--sabotage', is_flag=True,
              help="Switch vec/unvec to row-major; the oracle suite must fail.")
@click.pass_context
def verify(ctx, trials, sabotage):
    """Exit 0 only if every suite stays under its threshold."""
    seed = command_seed(ctx)

    def body():
        suites = run_suites(seed, trials, sabotage=sabotage)
        config = dict(trials=trials, sabotage=sabotage)
        return VerifyReport(
            passed=all(suite.passed for suite in suites),
            sabotage=sabotage,
            suites=suites,
            manifest=RunManifest.create('verify', seed, config),
        )

    report = run_command(body)
    summary = '\n'.join(
        '%-8s %s  max error %.3e (threshold %.0e, %d cases)'
        % (s.name, 'ok  ' if s.passed else 'FAIL', s.max_error, s.threshold, s.cases)
        for s in report.suites
    )
    emit(ctx, 'verify', report, summary)
    sys.exit(0 if report.passed else 1)


def plan_rows(layer, kinds, ranks, target_slice, d_A2, lora_rank):
    """One PlanRow per kind, and per rank for the kinds that have one."""
    rows = []
    for kind in kinds:
        for r in ((None,) if kind is AdapterKind.KRONA else ranks):
            plan = plan_for(kind, layer, r=r or 8, target_slice=target_slice, d_A2=d_A2)
            note = None
            if kind is AdapterKind.KRONA:
                note = "accuracy-risk: pure Kronecker"
                if plan.prime_fallback:
                    note += "; prime dimension fallback"
            rows.append(
                PlanRow(
                    kind=kind.name,
                    rank=r,
                    plan=plan.as_dict(),
                    param_count=param_count(plan),
                    checkpoint_bytes=checkpoint.checkpoint_size(plan),
                    lora_rank=lora_rank,
                    ratio_vs_lora=lora_ratio(plan, lora_rank),
                    note=note,
                )
            )
    return rows


@cli.command(short_help="Report adapter shapes and parameter budgets.")
@click.option('--d-in', type=click.IntRange(min=1), required=True)
@click.option('--d-out', type=click.IntRange(min=1), required=True)
@click.option('--rank', '-r', 'ranks', type=click.IntRange(min=1), multiple=True,
              help="Adapter rank; repeat for several.  [default: 8]")
@click.option('--kind', 'kinds', type=KIND_CHOICE, multiple=True,
              help="Adapter kind; repeat for several.  [default: all]")
@click.option('--target-slice', type=click.IntRange(min=1), default=200,
              show_default=True, help="Desired d_B2 for Kron-LoRA.")
@click.option('--d-a2', 'd_A2', type=click.IntRange(min=1), default=None,
              help="Explicit Kron-LoRA d_A2, overriding --target-slice.")
@click.option('--vocab', is_flag=True, help="Layer is a vocabulary projection.")
@click.option('--lora-rank', type=click.IntRange(min=1), default=8, show_default=True,
              help="LoRA rank the ratios are taken against.")
@click.pass_context
def plan(ctx, d_in, d_out, ranks, kinds, target_slice, d_A2, vocab, lora_rank):
    """Emit per-kind plans, parameter counts, checkpoint sizes and LoRA ratios."""
    ranks = ranks or (8,)
    kinds = [AdapterKind[k.upper()] for k in kinds] or [
        AdapterKind.KRONLORA, AdapterKind.KRONA, AdapterKind.LORA]

    def body():
        layer = LayerSpec(d_in, d_out, vocab)
        config = dict(
            ranks=list(ranks), kinds=[k.name for k in kinds], target_slice=target_slice,
            d_A2=d_A2, lora_rank=lora_rank,
        )
        return PlanReport(
            d_in=d_in,
            d_out=d_out,
            is_vocab_projection=vocab,
            rows=plan_rows(layer, kinds, ranks, target_slice, d_A2, lora_rank),
            manifest=RunManifest.create('plan', command_seed(ctx), config),
        )

    report = run_command(body)
    summary = '\n'.join(
        '%-8s r=%-4s params %-8d bytes %-8d x%.2f vs LoRA-%d%s'
        % (row.kind, row.rank if row.rank is not None else '-', row.param_count,
           row.checkpoint_bytes, row.ratio_vs_lora, row.lora_rank,
           '  (%s)' % row.note if row.note else '')
        for row in report.rows
    )
    emit(ctx, 'plan', report, summary)


@cli.command(short_help="Time the adapter branches.")
@click.option('--kind', 'kinds', type=KIND_CHOICE, multiple=True,
              help="Adapter kind; repeat for several.  [default: LORA KRONLORA]")
@click.option('--d-in', type=click.IntRange(min=1), default=4096, show_default=True)
@click.option('--d-out', type=click.IntRange(min=1), default=4096, show_default=True)
@click.option('--rank', '-r', type=click.IntRange(min=1), default=8, show_default=True)
@click.option('--target-slice', type=click.IntRange(min=1), default=200,
              show_default=True)
@click.option('--batch', type=click.IntRange(min=1), default=8, show_default=True)
@click.option('--repeats', type=click.IntRange(min=3), default=5, show_default=True)
@click.option('--warmup', type=click.IntRange(min=0), default=1, show_default=True)
@click.pass_context
def bench(ctx, kinds, d_in, d_out, rank, target_slice, batch, repeats, warmup):
    """Throughput, workspace and checkpoint-save time per adapter kind."""
    kinds = [AdapterKind[k.upper()] for k in kinds] or [
        AdapterKind.LORA, AdapterKind.KRONLORA]
    seed = command_seed(ctx)

    def body():
        layer = LayerSpec(d_in, d_out)
        plans = [plan_for(kind, layer, r=rank, target_slice=target_slice)
                 for kind in kinds]
        config = dict(
            kinds=[k.name for k in kinds], d_in=d_in, d_out=d_out, r=rank,
            target_slice=target_slice, batch=batch, repeats=repeats, warmup=warmup,
        )
        return BenchSuiteReport(
            results=bench_plans(plans, batch, repeats, warmup, seed),
            reference_gpu_throughput=REFERENCE_GPU_THROUGHPUT,
            manifest=RunManifest.create('bench', seed, config),
        )

    report = run_command(body)
    summary = '\n'.join(
        '%-8s fwd %10.1f ex/s  fwd+bwd %10.1f ex/s  workspace %d B  ckpt %d B%s'
        % (r.kind, r.forward_throughput, r.forward_backward_throughput,
           r.workspace_bytes, r.adapter_bytes,
           '' if r.throughput_ratio_vs_lora is None
           else '  x%.3f vs LoRA' % r.throughput_ratio_vs_lora)
        for r in report.results
    )
    emit(ctx, 'bench', report, summary)


@cli.command('train', short_help="Train one adapter on a toy task.")
@click.argument('config', type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def train_command(ctx, config):
    """Train the adapter described by CONFIG; see docs/config_format.md."""
    seed = ctx.obj['seed']
    out = ctx.obj['out']

    def body():
        cfg = load_config(config, mode='train', seed=seed)
        layer = build_layer(cfg)
        plan = build_plan(cfg, cfg.run.kinds[0])
        task = build_task(cfg, 0, layer, plan)
        adapter = init_adapter(plan, Rng(cfg.run.init_seed))
        checkpoint_dir = None
        if out is not None:
            checkpoint_dir = os.path.join(out, 'checkpoints')
            os.makedirs(checkpoint_dir, exist_ok=True)
        result = train(adapter, layer, task, cfg.trains[0], checkpoint_dir=checkpoint_dir)
        final, size = None, None
        if out is not None:
            final = '%s.klora' % plan.kind.name.lower()
            size = checkpoint.save(adapter, os.path.join(out, final))
        return TrainRunReport(
            train=result,
            checkpoint=final,
            checkpoint_bytes=size,
            manifest=RunManifest.create('train', cfg.run.seed, cfg.as_dict()),
        )

    report = run_command(body)
    result = report.train
    summary = '%s on %s: val loss %.6g -> %.6g, test loss %.6g%s' % (
        result.kind, result.task, result.initial_val_loss, result.final_val_loss,
        result.test_loss,
        '' if result.test_accuracy is None else ', test accuracy %.4f' % result.test_accuracy,
    )
    emit(ctx, 'train', report, summary)


@cli.command(short_help="Train on two tasks in turn and measure forgetting.")
@click.argument('config', type=click.Path(exists=True, dir_okay=False))
@click.pass_context
def sequential(ctx, config):
    """Run the sequential protocol for every [run] kind in CONFIG."""
    seed = ctx.obj['seed']
    out = ctx.obj['out']

    def body():
        cfg = load_config(config, mode='sequential', seed=seed)
        layer = build_layer(cfg)
        task1, task2 = build_task(cfg, 0, layer), build_task(cfg, 1, layer)
        plans = [build_plan(cfg, kind) for kind in cfg.run.kinds]
        checkpoint_dir = None
        if out is not None:
            checkpoint_dir = os.path.join(out, 'checkpoints')
            os.makedirs(checkpoint_dir, exist_ok=True)
        report = run_comparison(
            plans, layer, task1, task2, cfg.trains[0], cfg.trains[1],
            cfg.run.init_seed,
            reverse=cfg.run.reverse,
            continue_training=cfg.run.continue_training,
            checkpoint_dir=checkpoint_dir,
        )
        report.manifest = RunManifest.create('sequential', cfg.run.seed, cfg.as_dict())
        return report

    report = run_command(body)
    lines = []
    for arm in report.arms:
        for run in (arm.forward, arm.reverse):
            if run is not None:
                lines.append(
                    '%-8s %s  first %.4f  second %.4f  first after second %.4f'
                    '  delta %+.4f'
                    % (arm.kind, run.order, run.acc_T1_after_T1, run.acc_T2_after_T2,
                       run.acc_T1_after_T2, run.delta_T1)
                )
    emit(ctx, 'sequential', report, '\n'.join(lines))


@cli.command(short_help="Print the JSON Schema of every report.")
@click.pass_context
def schema(ctx):
    text = json.dumps(report_schemas(), indent=2, sort_keys=True)
    out = ctx.obj['out']
    if out is not None:
        os.makedirs(out, exist_ok=True)
        with open(os.path.join(out, 'schema.json'), 'w', encoding='utf-8') as file:
            file.write(text)
            file.write('\n')
    click.echo(text)


if __name__ == '__main__':
    cli()
