#!/usr/bin/env python3
"""
Modality Complementarity Toolkit - command line front end

Subcommands:
  gen            Generate a synthetic multimodal dataset (train + val splits)
  estimate       Estimate the complementarity report of a dataset
  sweep          Grid x seed sweep: generate, estimate, train, evaluate
  verify-bounds  Check the Bayes-error bounds on random discrete joints
  train-missing  Train and compare missing-modality strategies
"""

import logging
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace
from pathlib import Path
from typing import List, Optional, Tuple

import click
import humanize
import numpy as np
import pandas as pd

from complementarity import ComplementarityReport, estimate_complementarity, save_report
from datagen import MultiModalDataset, load_dataset, save_dataset
from discrete_oracle import label_copies_z_joint, verify_bounds, verify_many
from errors import EXIT_INTERRUPTED, EXIT_UNDEFINED_METRIC, DivergenceError, GenerationError, ToolkitError
from html_report import card, write_report
from missing_harness import (build_model_spec, drop_probability_sweep, evaluate_missing, save_model,
                             train as train_strategy)
from numeric_core import derive_seed, make_rng, write_manifest
from sweep_tables import (SweepTable, comparison_frame, export_excel, summarize, summary_frame,
                          write_comparison_csv)
from toolkit_config import (EstimateSettings, Preset, estimate_settings, gen_settings, generate,
                            load_configuration, setup_logging, strategy_config, sweep_settings,
                            train_missing_settings, verify_settings)

logger = logging.getLogger('complementarity.cli')

VERSION = '1.0.1'
# Stream key of the label-destruction shuffle
_SHUFFLE = 7


@dataclass
class RunContext:
    config: dict
    out_dir: Path
    seed: Optional[int]
    preset: Optional[str]
    parallel: int
    show_progress: bool

    @property
    def formats(self) -> List[str]:
        return self.config['output']['formats']


def banner(title: str):
    click.echo("=" * 70)
    click.echo(title)
    click.echo("=" * 70)


def _elapsed(start: float) -> str:
    return humanize.naturaldelta(time.monotonic() - start)


def _with_parallel(preset: Preset, run: RunContext, seed: int) -> Preset:
    estimator = replace(preset.estimator,
                        parallel=run.parallel,
                        show_progress=run.show_progress,
                        train=replace(preset.estimator.train, seed=seed))
    return replace(preset, estimator=estimator)


def _load_splits(path: str) -> Tuple[MultiModalDataset, Optional[MultiModalDataset]]:
    """A directory written by `gen`, or a manifest path whose sibling val.json is picked up."""
    source = Path(path)
    manifest = source / 'train.json' if source.is_dir() else source
    train = load_dataset(manifest)
    val_path = manifest.with_name('val.json')
    val = load_dataset(val_path) if val_path.exists() and manifest.stem != 'val' else None
    return train, val


@click.group()
@click.option('--config', 'config_path', type=click.Path(dir_okay=False), default=None,
              help='Configuration file (default: $COMPLEMENTARITY_CONFIG or ./config.yaml)')
@click.option('--out', 'out_dir', type=click.Path(file_okay=False), default=None,
              help='Output directory (default: output.output_dir)')
@click.option('--seed', type=click.IntRange(min=0), default=None, help='Seed override')
@click.option('--preset', default=None, help='Hyperparameter preset name')
@click.option('--parallel', type=click.IntRange(min=1), default=None,
              help='Concurrent estimator trainings / sweep cells')
@click.version_option(VERSION)
@click.pass_context
def cli(ctx, config_path, out_dir, seed, preset, parallel):
    """Modality complementarity toolkit."""
    config = load_configuration(config_path)
    setup_logging(config)
    run = config.get('run') or {}
    ctx.obj = RunContext(
        config=config,
        out_dir=Path(out_dir or config['output']['output_dir']),
        seed=seed,
        preset=preset,
        parallel=parallel or int(run.get('parallel', 1)),
        show_progress=bool(run.get('show_progress', False)),
    )


# ============================================================================
# gen
# ============================================================================

@cli.command()
@click.option('--alpha', type=float, default=None, help='Latent overlap (two_modal / multi_modal)')
@click.option('--sigma', type=float, default=None, help='Label-shift spread (remix)')
@click.pass_obj
def gen(run: RunContext, alpha, sigma):
    """Generate a dataset and write train/val manifests."""
    settings = gen_settings(run.config, run.preset, run.seed)
    if alpha is not None:
        settings.alpha = alpha
    if sigma is not None:
        settings.sigma = sigma
    banner(f"Generating dataset ({settings.preset.name}, seed {settings.seed})")
    start = time.monotonic()
    try:
        train, val = generate(settings.preset, settings.seed, settings.alpha, settings.sigma,
                              show_progress=run.show_progress)
    except GenerationError as e:
        raise GenerationError(f"preset '{settings.preset.name}' alpha={settings.alpha} "
                              f"sigma={settings.sigma} seed={settings.seed}: {e}") from e

    target = run.out_dir / f"{settings.preset.name}_seed{settings.seed}"
    target.mkdir(parents=True, exist_ok=True)
    for ds in (train, val):
        path = save_dataset(ds, target / ds.split)
        click.echo(f"✓ {ds.split}: {ds.n_rows:,} rows, dims {ds.dims} -> {path}")
        click.echo(f"  class histogram: {ds.class_histogram()}")

    stats = train.provenance.get('stats', {})
    for key, value in stats.items():
        click.echo(f"  {key}: {value}")
    click.echo(f"\n✅ Generated in {_elapsed(start)}")
    return 0


# ============================================================================
# estimate
# ============================================================================

def _shuffled(ds: MultiModalDataset, seed: int) -> MultiModalDataset:
    rng = make_rng(derive_seed(seed, _SHUFFLE, 0 if ds.split == 'train' else 1))
    return ds.with_labels(rng.permutation(ds.labels))


def _report_frames(report: ComplementarityReport) -> Tuple[pd.DataFrame, pd.DataFrame]:
    terms = pd.DataFrame([
        {'term': name, 'value': est.value, 'mean': est.mean, 'std': est.std,
         'replicates': len(est.replicate_values)}
        for name, est in report.terms.items()
    ])
    stats = pd.DataFrame([
        {'quantity': name, **values} for name, values in report.replicate_stats.items()
    ])
    return terms, stats


def _emit_report(report: ComplementarityReport, settings: EstimateSettings, run: RunContext,
                 dataset: str) -> Path:
    target = run.out_dir / 'estimate'
    target.mkdir(parents=True, exist_ok=True)
    stem = f"{settings.preset.name}_s1-{'-'.join(str(i + 1) for i in report.subset)}_seed{settings.seed}"
    context = {'dataset': dataset, 'preset': settings.preset.name, 'seed': settings.seed,
               'shuffle_labels': settings.shuffle_labels,
               'estimator': settings.preset.estimator.to_dict()}
    path = save_report(report, target / f"{stem}.json", context)
    terms, stats = _report_frames(report)
    if 'csv' in run.formats:
        terms.to_csv(target / f"{stem}_terms.csv", index=False, lineterminator='\n')
    if 'excel' in run.formats:
        export_excel({'terms': terms, 'replicates': stats}, target / f"{stem}.xlsx")
    if 'html' in run.formats:
        cards = [card('Metric (subset)', report.metric_subset, not report.metric_defined),
                 card('Metric (pair)', report.metric_pair, not report.metric_defined),
                 card('Gamma S1 (nats)', report.gamma_x),
                 card('Gamma S2 (nats)', report.gamma_z)]
        write_report(target / f"{stem}.html", 'Complementarity Report',
                     [('MI terms (nats)', terms), ('Replicate statistics', stats)], cards,
                     subtitle=f"Dataset {dataset} | preset {settings.preset.name} | "
                              f"S1 = {[i + 1 for i in report.subset]}")
    return path


@cli.command()
@click.argument('dataset', type=click.Path(exists=True))
@click.option('--subset', default=None, help='1-based modality numbers of S1, e.g. "2" or "1,2"')
@click.pass_obj
def estimate(run: RunContext, dataset, subset):
    """Estimate the four MI terms and both complementarity metrics."""
    settings = estimate_settings(run.config, run.preset, run.seed, subset)
    settings.preset = _with_parallel(settings.preset, run, settings.seed)
    train, val = _load_splits(dataset)
    if settings.shuffle_labels:
        train = _shuffled(train, settings.seed)
        val = None if val is None else _shuffled(val, settings.seed)

    banner(f"Estimating complementarity ({settings.preset.name}, S1 = "
           f"{[i + 1 for i in settings.subset.s1]})")
    start = time.monotonic()
    report = estimate_complementarity(train, settings.subset, settings.preset.estimator, val,
                                      settings.normalizer_mode, settings.normalizer_floor)
    path = _emit_report(report, settings, run, dataset)

    for name, est in report.terms.items():
        click.echo(f"  {name:7s} = {est.mean:.4f} ± {est.std:.4f} nats")
    click.echo(f"  Gamma_S1 = {report.gamma_x_raw:.4f}   Gamma_S2 = {report.gamma_z_raw:.4f}")
    click.echo(f"✓ Report saved to: {path}")
    if not report.metric_defined:
        click.echo(f"⚠ I(S;Y) is below the normalizer floor {settings.normalizer_floor}; "
                   f"metrics are undefined")
        return EXIT_UNDEFINED_METRIC
    click.echo(f"  metric_subset = {report.metric_subset:.4f}   metric_pair = {report.metric_pair:.4f}")
    click.echo(f"\n✅ Estimated in {_elapsed(start)}")
    return 0


# ============================================================================
# sweep
# ============================================================================

def _sweep_cell(settings, preset: Preset, section: dict, value: float, seed: int) -> dict:
    row = {'parameter': settings.parameter, 'value': value, 'seed': seed}
    start = time.monotonic()
    try:
        grid = {settings.parameter: value}
        train, val = generate(preset, seed, alpha=grid.get('alpha'), sigma=grid.get('sigma'))
        estimator = replace(preset.estimator, parallel=1, show_progress=False,
                            train=replace(preset.estimator.train, seed=seed,
                                          replicates=settings.replicates))
        report = estimate_complementarity(train, settings.subset, estimator, val)
        row.update({name: est.value for name, est in report.terms.items()})
        row.update(gamma_x_raw=report.gamma_x_raw, gamma_z_raw=report.gamma_z_raw,
                   gamma_x=report.gamma_x, gamma_z=report.gamma_z,
                   metric_subset=report.metric_subset, metric_pair=report.metric_pair,
                   metric_defined=report.metric_defined)
        for name in settings.strategies:
            cfg = strategy_config(preset, section, name, seed)
            spec = build_model_spec(train.dims, train.num_classes, name, cfg.hidden)
            result = evaluate_missing(train_strategy(train, spec, cfg), val)
            row[f"{name}_clean"] = result.clean_accuracy
            row[f"{name}_missing_mean"] = float(np.mean(result.missing_accuracy))
            row[f"{name}_ratio"] = result.robustness_ratio
    except ToolkitError as e:
        logger.warning(f"Sweep cell {settings.parameter}={value} seed={seed} failed: {e}")
        row['error'] = f"{type(e).__name__}: {e}"
    except Exception as e:
        logger.error(f"Sweep cell {settings.parameter}={value} seed={seed} crashed: {e}", exc_info=True)
        row['error'] = f"{type(e).__name__}: {e}"
    row['seconds'] = round(time.monotonic() - start, 3)
    return row


@cli.command()
@click.pass_obj
def sweep(run: RunContext):
    """Run every grid value x seed cell and summarize the trends."""
    settings = sweep_settings(run.config, run.preset, run.seed)
    preset = _with_parallel(settings.preset, run, settings.seeds[0])
    run.out_dir.mkdir(parents=True, exist_ok=True)
    table = SweepTable(run.out_dir / settings.table, settings.strategies)
    section = run.config.get('train_missing') or {}

    cells = [(v, s) for v in settings.values for s in settings.seeds if not table.is_done(v, s)]
    banner(f"Sweep over {settings.parameter} ({settings.preset.name}): "
           f"{len(cells)} cells to run, {len(table.completed)} already done")
    start = time.monotonic()
    failed = 0
    with ThreadPoolExecutor(max_workers=run.parallel) as executor:
        futures = [executor.submit(_sweep_cell, settings, preset, section, v, s) for v, s in cells]
        # Rows land in submission order so reruns write identical tables
        for (value, seed), future in zip(cells, futures):
            row = future.result()
            table.append(row)
            if row.get('error'):
                failed += 1
                click.echo(f"⚠ {settings.parameter}={value} seed={seed}: {row['error']}")
            else:
                click.echo(f"✓ {settings.parameter}={value} seed={seed}: "
                           f"metric_pair={row.get('metric_pair')} ({row['seconds']:.1f}s)")

    summary = summarize(table.path)
    stem = Path(settings.table).stem
    write_manifest(run.out_dir / f"{stem}_summary.json", summary)
    per_value = summary_frame(summary)
    spearman = pd.DataFrame([{'column': k, 'spearman': v} for k, v in summary['spearman'].items()])
    if 'csv' in run.formats:
        per_value.to_csv(run.out_dir / f"{stem}_summary.csv", index=False, lineterminator='\n')
    if 'excel' in run.formats:
        export_excel({'per_value': per_value, 'spearman': spearman}, run.out_dir / f"{stem}_summary.xlsx")
    if 'html' in run.formats:
        cards = [card(f"Spearman {k} vs {settings.parameter}", v) for k, v in summary['spearman'].items()]
        write_report(run.out_dir / f"{stem}_summary.html", 'Sweep Summary',
                     [('Per-value statistics', per_value), ('Spearman correlations', spearman)],
                     cards, subtitle=f"{summary['rows']} rows, {summary['failed']} failed")

    click.echo("")
    for column, rho in summary['spearman'].items():
        click.echo(f"  Spearman({column}, {settings.parameter}) = "
                   f"{'n/a' if rho is None else f'{rho:+.3f}'}")
    if failed:
        click.echo(f"⚠ {failed} cell(s) failed; rerun to retry them")
    click.echo(f"\n✅ Sweep finished in {_elapsed(start)}")
    return 0


# ============================================================================
# verify-bounds
# ============================================================================

@cli.command('verify-bounds')
@click.pass_obj
def verify_bounds_cmd(run: RunContext):
    """Check the Bayes-error bounds and information identities on random joints."""
    settings = verify_settings(run.config, run.seed)
    banner(f"Verifying bounds on {settings.count:,} random joints (cap {settings.cap})")
    start = time.monotonic()
    summary = verify_many(settings.count, settings.cap, settings.seed, settings.with_y_values,
                          show_progress=run.show_progress)
    counterexample = verify_bounds(label_copies_z_joint())
    payload = {'summary': summary.to_dict(), 'counterexample': counterexample.to_dict(),
               'settings': {'count': settings.count, 'cap': settings.cap, 'seed': settings.seed,
                            'with_y_values': settings.with_y_values}}
    run.out_dir.mkdir(parents=True, exist_ok=True)
    path = run.out_dir / 'bound_check.json'
    write_manifest(path, payload)

    click.echo(f"  classification lower/upper violations: {summary.eq1_violations} / "
               f"{summary.eq2_violations}")
    click.echo(f"  regression 2*Gamma violations:        {summary.two_gamma_violations} "
               f"of {summary.regression_joints}")
    click.echo(f"  regression 1/2*Gamma exceedances:     {summary.half_gamma_exceedances}")
    residual = max(summary.max_chain_rule_residual, summary.max_gamma_identity_residual,
                   summary.max_decomposition_residual)
    click.echo(f"  max identity residual:                {residual:.2e}")
    flag = '⚠' if not counterexample.gap_le_half_gamma else '✓'
    click.echo(f"{flag} counterexample (X independent of Z, Y = Z): gap {counterexample.gap:.4f} "
               f"vs 1/2*Gamma {counterexample.half_gamma:.4f}")
    click.echo(f"✓ Report saved to: {path}")

    if summary.eq1_violations or summary.eq2_violations or summary.two_gamma_violations:
        click.echo("⚠ A bound was violated; see the report")
        return 1
    click.echo(f"\n✅ Verified in {_elapsed(start)}")
    return 0


# ============================================================================
# train-missing
# ============================================================================

@cli.command('train-missing')
@click.argument('dataset', type=click.Path(exists=True))
@click.pass_obj
def train_missing(run: RunContext, dataset):
    """Train every configured strategy and compare robustness to a missing modality."""
    settings = train_missing_settings(run.config, run.preset, run.seed)
    train, val = _load_splits(dataset)
    if val is None:
        raise click.UsageError(f"{dataset} has no val split next to it")
    banner(f"Training {len(settings.strategies)} strategies ({settings.preset.name}, "
           f"seed {settings.seed})")
    start = time.monotonic()
    target = run.out_dir / 'models'
    target.mkdir(parents=True, exist_ok=True)

    reports, failures = [], {}
    for name in settings.strategies:
        cfg = strategy_config(settings.preset, settings.section, name, settings.seed)
        spec = build_model_spec(train.dims, train.num_classes, name, cfg.hidden)
        try:
            model = train_strategy(train, spec, cfg, show_progress=run.show_progress)
        except DivergenceError as e:
            failures[name] = str(e.tagged(name))
            click.echo(f"⚠ {name}: {failures[name]}")
            continue
        save_model(model, target / f"{name}_seed{settings.seed}")
        result = evaluate_missing(model, val)
        reports.append(result.to_dict())
        click.echo(f"✓ {name}: clean {result.clean_accuracy:.4f}, missing "
                   f"{[round(a, 4) for a in result.missing_accuracy]}, ratio {result.robustness_ratio:.4f}")

    comparison = comparison_frame(reports)
    sheets = {'comparison': comparison}
    if settings.drop_probs_grid:
        base = strategy_config(settings.preset, settings.section, 'UmeMma', settings.seed)
        ablation = drop_probability_sweep(train, val, base, settings.drop_probs_grid, run.show_progress)
        sheets['drop_probs'] = pd.DataFrame([
            {'drop_prob': prob, 'clean': rep.clean_accuracy,
             'missing_mean': float(np.mean(rep.missing_accuracy)), 'ratio': rep.robustness_ratio}
            for prob, rep in ablation
        ])

    stem = f"comparison_{settings.preset.name}_seed{settings.seed}"
    write_manifest(run.out_dir / f"{stem}.json", {'reports': reports, 'failures': failures,
                                                 **{k: v.to_dict('records') for k, v in sheets.items()
                                                    if k != 'comparison'}})
    if 'csv' in run.formats:
        path = write_comparison_csv(comparison, run.out_dir / f"{stem}.csv")
        click.echo(f"✓ Comparison table saved to: {path}")
    if 'excel' in run.formats:
        export_excel(sheets, run.out_dir / f"{stem}.xlsx")
    if 'html' in run.formats:
        write_report(run.out_dir / f"{stem}.html", 'Missing-Modality Robustness',
                     list(sheets.items()), subtitle=f"Dataset {dataset}")

    if not reports:
        click.echo("⚠ Every strategy diverged")
        return DivergenceError.exit_code
    click.echo(f"\n✅ Trained in {_elapsed(start)}")
    return 0


# ============================================================================
# Entry point
# ============================================================================

def main(argv: Optional[List[str]] = None) -> int:
    """Run the CLI and map failures onto exit codes."""
    try:
        result = cli.main(args=argv, prog_name='complementarity', standalone_mode=False)
        return result if isinstance(result, int) else 0
    except (KeyboardInterrupt, click.Abort):
        click.echo("\n\nInterrupted by user.", err=True)
        return EXIT_INTERRUPTED
    except click.ClickException as e:
        e.show()
        return e.exit_code
    except ToolkitError as e:
        click.echo(f"\nERROR: {e}", err=True)
        logging.getLogger('complementarity').debug("Toolkit error", exc_info=True)
        return e.exit_code
    except Exception as e:
        click.echo(f"\nERROR: {e}", err=True)
        logging.error("Fatal error", exc_info=True)
        return 1


if __name__ == '__main__':
    sys.exit(main())
