import datetime
import logging
import os
import sys
from dataclasses import dataclass
from pathlib import Path

import click
from dotenv import load_dotenv

sys.path.insert(1, os.path.dirname(os.path.abspath(__file__)))

from process_classes.domain_classes import DEFAULT_EPOCH, DEFAULT_LANGUAGE, BoundKind, as_date
from process_classes.errors import FlowLensError, InputValidationError
from process_classes.ingest_classes import (CollectionPlan, HttpAudienceClient, ReplayAudienceClient, SnapshotStore,
                                            load_diaspora, load_origin_population, load_penetration, load_unhcr)
from process_classes.pipeline_classes import (DEFAULT_MIN_SHARE, FigureReport, FlowEstimation, ProxyValidation,
                                              collect_snapshots, update_manifest)
from process_classes.simulate_class import ScenarioConfig, run_scenario

'''

Command line entry point for flowlens: nowcasting displacement flows from advertising audience estimates.

    collect   fetch audience estimates (live or from a replay directory) into the snapshot store
    estimate  per-country flow estimates and shares between a baseline and a target week
    validate  correlation of the prewar audience with official diaspora stocks
    simulate  run a ground truth scenario and export it in the ingest formats with a bias report
    report    plot data and plot spec for the three figures

Exit codes: 0 success, 1 invalid input, 2 transport failure.

'''

# ------------------------------------------------------------------------------------------------------------
# Inputs

load_dotenv(os.path.join(os.path.dirname(__file__), 'flowlens_environments.env'))

# ------------------------------------------------------------------------------------------------------------
# Functions

def iso_date(ctx, param, value):
    if value is None:
        return DEFAULT_EPOCH
    try:
        return as_date(value)
    except InputValidationError as e:
        raise click.BadParameter(str(e))


def start_timer(message:str) -> datetime.datetime:
    starttime = datetime.datetime.now()
    click.echo(f'Start Time: {starttime}')
    click.echo(message)
    return starttime


def finish(settings:'Settings', command:str, paths:list, starttime:datetime.datetime) -> None:
    update_manifest(settings.out_dir, command, paths)
    for path in paths:
        click.echo(f'Wrote {path}')
    click.echo(f'Total Runtime: {datetime.datetime.now() - starttime}')
    click.echo('DONE!')


# ------------------------------------------------------------------------------------------------------------
# Logic

@dataclass
class Settings:
    epoch_date: datetime.date
    store_path: Path
    replay_dir: Path
    out_dir: Path

    def store(self, create:bool=False) -> SnapshotStore:
        if not create and not self.store_path.is_file():
            raise InputValidationError('snapshot store not found, run collect first', path=self.store_path)
        return SnapshotStore(self.store_path)


class FlowLensGroup(click.Group):
    '''Turns flowlens errors into their exit codes instead of tracebacks'''

    def invoke(self, ctx):
        try:
            return super().invoke(ctx)
        except FlowLensError as e:
            click.echo(f'Error: {e}', err=True)
            ctx.exit(e.exit_code)


@click.group(cls=FlowLensGroup)
@click.option('--epoch-date', envvar='FLOWLENS_EPOCH_DATE', callback=iso_date, help='Date of w0 (YYYY-MM-DD).')
@click.option('--store', 'store_path', envvar='FLOWLENS_STORE', default='snapshots.jsonl', type=click.Path(path_type=Path),
              show_default=True, help='Snapshot store (JSON lines).')
@click.option('--replay-dir', envvar='FLOWLENS_REPLAY_DIR', type=click.Path(path_type=Path),
              help='Directory of recorded audience estimates. Without it collection goes to the live API.')
@click.option('--out', 'out_dir', default='out', type=click.Path(path_type=Path), show_default=True,
              help='Directory for every output file.')
@click.option('--verbose', '-v', is_flag=True, help='Log at DEBUG level.')
@click.pass_context
def cli(ctx, epoch_date, store_path, replay_dir, out_dir, verbose):
    '''Displacement nowcasting from advertising audience estimates.'''
    logging.basicConfig(level=logging.DEBUG if verbose else logging.WARNING,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    ctx.obj = Settings(epoch_date, store_path, replay_dir, out_dir)


@cli.command()
@click.option('--plan', 'plan_path', required=True, type=click.Path(path_type=Path), help='Collection plan JSON.')
@click.option('--workers', default=4, show_default=True, type=click.IntRange(min=1), help='Concurrent fetches.')
@click.option('--record-dir', type=click.Path(path_type=Path), help='Also record live responses here for replay.')
@click.pass_obj
def collect(settings:Settings, plan_path, workers, record_dir):
    '''Fetch the planned audience estimates into the snapshot store.'''
    starttime = start_timer('Loading in collection plan')
    plan = CollectionPlan.from_json(plan_path)
    live = settings.replay_dir is None
    if live:
        client = HttpAudienceClient.from_env(epoch=settings.epoch_date, record_dir=record_dir)
    else:
        client = ReplayAudienceClient(settings.replay_dir, epoch=settings.epoch_date)
    store = settings.store(create=True)
    click.echo(f'Fetching audience estimates for {len(plan.countries)} countries ({"live" if live else "replay"})')
    added, skipped = collect_snapshots(store, client, plan, settings.epoch_date, max_workers=workers, live=live)
    click.echo(f'Added {added} observations, {skipped} already stored')
    finish(settings, 'collect', [settings.store_path], starttime)


@cli.command()
@click.option('--diaspora', required=True, type=click.Path(path_type=Path), help='Diaspora stock CSV.')
@click.option('--penetration', required=True, type=click.Path(path_type=Path), help='Penetration rate CSV.')
@click.option('--baseline-week', default=0, show_default=True, type=int)
@click.option('--target-week', default=5, show_default=True, type=int)
@click.option('--min-share', default=DEFAULT_MIN_SHARE, show_default=True, type=click.FloatRange(min=0, max=1),
              help='Display threshold for the share table.')
@click.option('--language', default=DEFAULT_LANGUAGE, show_default=True)
@click.pass_obj
def estimate(settings:Settings, diaspora, penetration, baseline_week, target_week, min_share, language):
    '''Flow estimates (lower and upper bound) between two weeks.'''
    starttime = start_timer('Loading in diaspora and penetration data')
    estimation = FlowEstimation(settings.store(), load_diaspora(diaspora), load_penetration(penetration),
                                baseline_week, target_week, language, settings.epoch_date)
    click.echo(estimation.display_table(min_share).to_string(index=False))
    paths = estimation.export_results(settings.out_dir, min_share)
    finish(settings, 'estimate', paths, starttime)


@cli.command()
@click.option('--diaspora', required=True, type=click.Path(path_type=Path), help='Diaspora stock CSV.')
@click.option('--penetration', required=True, type=click.Path(path_type=Path), help='Penetration rate CSV.')
@click.option('--prewar-week', default=0, show_default=True, type=int)
@click.option('--origin-population', type=click.Path(path_type=Path),
              help='Origin population CSV; adds the origin penetration estimate.')
@click.option('--language', default=DEFAULT_LANGUAGE, show_default=True)
@click.pass_obj
def validate(settings:Settings, diaspora, penetration, prewar_week, origin_population, language):
    '''Correlate the prewar audience with official diaspora stocks.'''
    starttime = start_timer('Loading in diaspora and penetration data')
    population = load_origin_population(origin_population) if origin_population else None
    validation = ProxyValidation(settings.store(), load_diaspora(diaspora), load_penetration(penetration), prewar_week,
                                 language, population, settings.epoch_date)
    click.echo(f'Original: r={validation.original.r:.4f} p={validation.original.p_value:.2e} n={validation.original.n}')
    click.echo(f'Adjusted: r={validation.adjusted.r:.4f} p={validation.adjusted.p_value:.2e} n={validation.adjusted.n}')
    if validation.origin_penetration:
        click.echo(f"Origin penetration: {validation.origin_penetration['rate']:.4f}")
    paths = validation.export_results(settings.out_dir)
    finish(settings, 'validate', paths, starttime)


@cli.command()
@click.argument('scenario', type=click.Path(path_type=Path))
@click.option('--bound', type=click.Choice([b.value for b in BoundKind]), default=BoundKind.LOWER.value,
              show_default=True, help='Bound used for the bias report.')
@click.pass_obj
def simulate(settings:Settings, scenario, bound):
    '''Run a ground truth scenario and export it with a bias report.'''
    starttime = start_timer('Loading in scenario')
    config = ScenarioConfig.from_json(scenario)
    click.echo(f'Simulating {sum(c.size for c in config.cohorts)} agents over {config.horizon_days} days')
    dataset = run_scenario(config)
    paths = dataset.export(settings.out_dir, BoundKind(bound))
    finish(settings, 'simulate', list(paths.values()), starttime)


@cli.command()
@click.option('--penetration', required=True, type=click.Path(path_type=Path), help='Penetration rate CSV.')
@click.option('--unhcr', type=click.Path(path_type=Path), help='UNHCR cumulative arrivals CSV for the overlay.')
@click.option('--min-share', default=DEFAULT_MIN_SHARE, show_default=True, type=click.FloatRange(min=0, max=1))
@click.option('--language', default=DEFAULT_LANGUAGE, show_default=True)
@click.pass_obj
def report(settings:Settings, penetration, unhcr, min_share, language):
    '''Plot data for the three figures from the estimate and validate outputs.'''
    starttime = start_timer('Loading in estimate and validate outputs')
    arrivals = load_unhcr(unhcr) if unhcr else None
    figures = FigureReport(settings.out_dir, settings.store(), load_penetration(penetration), arrivals, min_share,
                           language, settings.epoch_date)
    paths = figures.export_results()
    finish(settings, 'report', paths, starttime)


if __name__ == '__main__':
    cli()
