import datetime
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import pandas as pd

from process_classes.domain_classes import (DEFAULT_EPOCH, DEFAULT_LANGUAGE, ORIGIN_COUNTRY, BoundKind,
                                            CountryCode, WeekIndex, as_date, format_utc)
from process_classes.errors import InputValidationError
from process_classes.estimator_class import (arrival_changes, compare_trends, estimate_flows, estimate_penetration,
                                             normalize_series, pearson, weekly_changes)
from process_classes.ingest_classes import (AudienceClient, CollectionPlan, SnapshotStore, fetch_many,
                                            read_checked_csv)

'''

Process classes behind the flowlens commands. Each one does its work on construction and writes its outputs with
export_results, so nothing lands on disk until every table has been built.

Fixed output names under the --out directory:

    flow_estimates.csv    every country and bound, no display filter
    fig2_shares.csv       lower bound shares above the display threshold
    fig1_scatter.csv      prewar diaspora stock against original and adjusted audience
    validation.json       both correlation results and the origin penetration estimate
    fig3_ribbons.csv      normalized weekly change ribbons, week over week increments and the UNHCR overlay
    fig3_trend_gaps.csv   per week gap between audience and UNHCR trends
    plot_spec.json        axes, scales and series of the three figures
    exclusions.csv        countries left out of a table and why
    manifest.json         run timestamps and output checksums

'''

logger = logging.getLogger(__name__)

# ------------------------------------------------------------------------------------------------------------
# Inputs

FLOW_ESTIMATES = 'flow_estimates.csv'
FIG1_SCATTER = 'fig1_scatter.csv'
FIG2_SHARES = 'fig2_shares.csv'
FIG3_RIBBONS = 'fig3_ribbons.csv'
FIG3_TREND_GAPS = 'fig3_trend_gaps.csv'
VALIDATION = 'validation.json'
PLOT_SPEC = 'plot_spec.json'
EXCLUSIONS = 'exclusions.csv'
MANIFEST = 'manifest.json'

EXCLUSION_COLUMNS = ['step', 'country', 'bound', 'reason']
DEFAULT_MIN_SHARE = 0.02

# ------------------------------------------------------------------------------------------------------------
# Functions

def csv_text(df:pd.DataFrame, index:bool=False) -> str:
    return df.to_csv(index=index, lineterminator='\n')


def json_text(payload) -> str:
    return json.dumps(payload, sort_keys=True, indent=2) + '\n'


def write_outputs(out_dir, contents:dict) -> list:
    '''Writes {file name: text} once everything has been rendered'''
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = []
    for name, text in contents.items():
        path = out_dir / name
        with open(path, 'w', encoding='utf-8', newline='\n') as f:
            f.write(text)
        paths.append(path)
    return paths


def exclusion_row(step:str, country, bound, reason:str) -> dict:
    return {'step': step, 'country': str(country), 'bound': bound.value if isinstance(bound, BoundKind) else bound,
            'reason': reason}


def merged_exclusions(out_dir, step:str, rows:list) -> str:
    '''exclusions.csv text with this step's rows replaced, so re-running a command never duplicates notes'''
    path = Path(out_dir) / EXCLUSIONS
    existing = read_checked_csv(path, EXCLUSION_COLUMNS) if path.is_file() else pd.DataFrame(columns=EXCLUSION_COLUMNS)
    existing = existing[existing['step'] != step]
    merged = pd.concat([existing, pd.DataFrame(rows, columns=EXCLUSION_COLUMNS)], ignore_index=True)
    merged = merged.sort_values(EXCLUSION_COLUMNS, kind='mergesort')
    return csv_text(merged)


def update_manifest(out_dir, command:str, paths:list, finished_at:datetime.datetime=None) -> Path:
    '''Sidecar with the run time and sha256 of every file a command wrote'''
    Path(out_dir).mkdir(parents=True, exist_ok=True)
    path = Path(out_dir) / MANIFEST
    manifest = {}
    if path.is_file():
        with open(path, encoding='utf-8') as f:
            manifest = json.load(f)
    finished_at = finished_at or datetime.datetime.now(datetime.timezone.utc)
    manifest[command] = {
        'finished_at': format_utc(finished_at),
        'outputs': {Path(p).name: hashlib.sha256(Path(p).read_bytes()).hexdigest() for p in paths},
    }
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json_text(manifest))
    return path


def require_outputs(out_dir, names:list) -> None:
    missing = [name for name in names if not (Path(out_dir) / name).is_file()]
    if missing:
        raise InputValidationError(f'missing upstream output(s) {", ".join(missing)}; run estimate and validate first',
                                   path=Path(out_dir))


def share_display_table(estimates:pd.DataFrame, min_share:float) -> pd.DataFrame:
    '''
    Fig. 2 rows: lower bound share strictly above min_share, largest first, with the upper bound alongside and a flag
    for countries bordering the origin
    '''
    wide = estimates.pivot(index='country', columns='bound', values=['delta_ua', 'share'])
    wide.columns = [f'{bound}_{value}' for value, bound in wide.columns]
    wide = wide.reset_index()
    for column in ('lower_delta_ua', 'lower_share', 'upper_delta_ua', 'upper_share'):
        if column not in wide.columns:
            wide[column] = np.nan
    wide = wide[wide['lower_share'] > min_share]
    wide = wide.sort_values(['lower_share', 'country'], ascending=[False, True], kind='mergesort')
    wide = wide.assign(bordering=[CountryCode(c).borders_origin for c in wide['country']])
    return wide[['country', 'bordering', 'lower_share', 'upper_share', 'lower_delta_ua',
                 'upper_delta_ua']].reset_index(drop=True)


def collect_snapshots(store:SnapshotStore, client:AudienceClient, plan:CollectionPlan, epoch=DEFAULT_EPOCH,
                      max_workers:int=4, live:bool=False) -> tuple:
    '''
    Fetches every planned (country, week) and appends the results in (country, week) order. Conflicts are checked
    for the whole batch before the first write. Returns (added, already_stored).
    '''
    weeks = [client.current_week().index] if live else None
    observations = fetch_many(client, plan.pairs(epoch, weeks), max_workers=max_workers)
    store.check(observations)
    added = 0
    for obs in sorted(observations, key=lambda o: (str(o.country), o.week.index)):
        added += store.append(obs)
    return added, len(observations) - added


# ------------------------------------------------------------------------------------------------------------
# Logic

class FlowEstimation:
    '''Flow estimates between two weeks for every destination with the inputs to support them'''

    def __init__(self, store:SnapshotStore, diaspora:dict, penetration:dict, baseline_week:int=0, target_week:int=5,
                 language:str=DEFAULT_LANGUAGE, epoch=DEFAULT_EPOCH) -> None:
        self.baseline_week = WeekIndex(baseline_week, as_date(epoch))
        self.target_week = WeekIndex(target_week, as_date(epoch))
        if self.target_week.index <= self.baseline_week.index:
            raise InputValidationError(f'target week {self.target_week} must come after baseline {self.baseline_week}')
        series = store.series(language)
        countries = sorted((set(series) | set(diaspora)) - {ORIGIN_COUNTRY})

        self.exclusions = []
        self.fallback_weeks = {}
        stocks, baseline, target, rates = {}, {}, {}, {}
        for country in countries:
            reason = None
            country_series = series.get(country)
            used = None
            if country not in diaspora:
                reason = 'no diaspora stock'
            elif country_series is None or self.baseline_week.index not in country_series:
                reason = f'missing baseline week {self.baseline_week}'
            elif country_series[self.baseline_week.index] == 0:
                reason = f'baseline audience is 0 in {self.baseline_week}'
            else:
                used = self.last_available_week(country_series)
                if used is None:
                    reason = f'no week after {self.baseline_week} up to {self.target_week}'
            if reason is not None:
                self.exclusions.append(exclusion_row('estimate', country, 'both', reason))
                continue
            if used != self.target_week:
                logger.warning(f'{country}: missing target week {self.target_week}, estimated on {used}')
                self.fallback_weeks[country] = used
            stocks[country] = diaspora[country]
            baseline[country] = int(country_series[self.baseline_week.index])
            target[country] = int(country_series[used.index])
            if country in penetration:
                rates[country] = penetration[country]
            else:
                self.exclusions.append(exclusion_row('estimate', country, BoundKind.UPPER, 'no penetration rate'))

        for exclusion in self.exclusions:
            logger.warning(f"{exclusion['country']} excluded from {exclusion['bound']} bound: {exclusion['reason']}")
        if not baseline:
            raise InputValidationError(f'no country has both {self.baseline_week} and {self.target_week}')

        self.estimates = estimate_flows(stocks, baseline, target, rates, self.target_week, self.fallback_weeks)
        self.table = pd.DataFrame(
            [[str(e.country), e.week.index, e.bound.value, e.delta_ua, e.share] for e in self.estimates],
            columns=['country', 'week', 'bound', 'delta_ua', 'share'],
        ).sort_values(['bound', 'country'], kind='mergesort').reset_index(drop=True)

    def last_available_week(self, country_series) -> WeekIndex:
        '''Target week, or the latest stored week between baseline and target when the target was not collected'''
        candidates = [w for w in country_series.weeks if self.baseline_week.index < w.index <= self.target_week.index]
        if not candidates:
            return None
        return WeekIndex(max(w.index for w in candidates), self.target_week.epoch_date)

    def shares(self, bound:BoundKind=BoundKind.LOWER) -> dict:
        rows = self.table[self.table['bound'] == bound.value]
        return dict(zip(rows['country'], rows['share']))

    def display_table(self, min_share:float=DEFAULT_MIN_SHARE) -> pd.DataFrame:
        return share_display_table(self.table, min_share)

    def export_results(self, out_dir, min_share:float=DEFAULT_MIN_SHARE) -> list:
        return write_outputs(out_dir, {
            FLOW_ESTIMATES: csv_text(self.table),
            FIG2_SHARES: csv_text(self.display_table(min_share)),
            EXCLUSIONS: merged_exclusions(out_dir, 'estimate', self.exclusions),
        })


class ProxyValidation:
    '''
    Correlates the prewar audience of every destination with its official diaspora stock, once on the raw audience
    and once on the penetration adjusted audience. With the origin population the origin penetration rate is
    estimated as well.
    '''

    def __init__(self, store:SnapshotStore, diaspora:dict, penetration:dict, prewar_week:int=0,
                 language:str=DEFAULT_LANGUAGE, origin_population:dict=None, epoch=DEFAULT_EPOCH) -> None:
        self.prewar_week = WeekIndex(prewar_week, as_date(epoch))
        self.language = language
        series = store.series(language)
        self.exclusions = []
        rows = []
        for country in sorted((set(series) | set(diaspora)) - {ORIGIN_COUNTRY}):
            if country not in diaspora:
                self.exclusions.append(exclusion_row('validate', country, 'both', 'no diaspora stock'))
                continue
            if country not in series or self.prewar_week.index not in series[country]:
                self.exclusions.append(exclusion_row('validate', country, 'both', f'missing prewar week {self.prewar_week}'))
                continue
            mau = int(series[country][self.prewar_week.index])
            adjusted = mau / penetration[country].rate if country in penetration else np.nan
            if country not in penetration:
                self.exclusions.append(exclusion_row('validate', country, BoundKind.UPPER, 'no penetration rate'))
            rows.append([str(country), diaspora[country].stock, mau, adjusted])
        self.scatter = pd.DataFrame(rows, columns=['country', 'stock', 'mau_original', 'mau_adjusted'])

        self.original = pearson(self.scatter['stock'], self.scatter['mau_original'])
        adjusted_rows = self.scatter.dropna(subset=['mau_adjusted'])
        self.adjusted = pearson(adjusted_rows['stock'], adjusted_rows['mau_adjusted'])

        self.origin_penetration = None
        if origin_population:
            origin = origin_population.get(ORIGIN_COUNTRY)
            origin_series = series.get(ORIGIN_COUNTRY)
            if origin is None or origin_series is None or self.prewar_week.index not in origin_series:
                raise InputValidationError(f'origin penetration needs {ORIGIN_COUNTRY} population and its '
                                           f'{self.prewar_week} audience')
            mau_prewar = int(origin_series[self.prewar_week.index])
            rate = estimate_penetration(mau_prewar, origin.population_13plus, origin.country)
            self.origin_penetration = {'country': ORIGIN_COUNTRY, 'mau_prewar': mau_prewar,
                                       'population_13plus': origin.population_13plus, 'rate': rate.rate}

    def summary(self) -> dict:
        return {
            'language': self.language,
            'prewar_week': self.prewar_week.index,
            'original': self.original.to_dict(),
            'adjusted': self.adjusted.to_dict(),
            'origin_penetration': self.origin_penetration,
        }

    def export_results(self, out_dir) -> list:
        return write_outputs(out_dir, {
            FIG1_SCATTER: csv_text(self.scatter),
            VALIDATION: json_text(self.summary()),
            EXCLUSIONS: merged_exclusions(out_dir, 'validate', self.exclusions),
        })


@dataclass(frozen=True, eq=False)
class ReportBundle:
    '''Plot data for the three figures plus the notes on what was left out'''
    scatter: pd.DataFrame
    shares: pd.DataFrame
    ribbons: pd.DataFrame
    trend_gaps: pd.DataFrame
    plot_spec: dict
    exclusions: list


class FigureReport:
    '''
    Assembles the figure data from the estimate and validate outputs plus the store. Ribbons run from the original
    (lower) to the adjusted (upper) weekly change, both divided by the adjusted max so the lower bound keeps its
    distance from the upper one. UNHCR arrivals, when given, are overlaid on their own max. Only the countries shown
    in the shares figure get ribbons.
    '''

    def __init__(self, out_dir, store:SnapshotStore, penetration:dict, unhcr:dict=None, min_share:float=DEFAULT_MIN_SHARE,
                 language:str=DEFAULT_LANGUAGE, epoch=DEFAULT_EPOCH) -> None:
        self.out_dir = Path(out_dir)
        epoch = as_date(epoch)
        require_outputs(self.out_dir, [FLOW_ESTIMATES, FIG1_SCATTER, VALIDATION])
        estimates = read_checked_csv(self.out_dir / FLOW_ESTIMATES, ['country', 'week', 'bound', 'delta_ua', 'share'])
        estimates[['delta_ua', 'share']] = estimates[['delta_ua', 'share']].astype('float64')
        scatter = pd.read_csv(self.out_dir / FIG1_SCATTER)
        with open(self.out_dir / VALIDATION, encoding='utf-8') as f:
            validation = json.load(f)

        series = store.series(language)
        shares = share_display_table(estimates, min_share)
        exclusions = [exclusion_row('report', c, 'both', f'lower share not above {min_share}')
                      for c in sorted(set(estimates['country']) - set(shares['country']))]
        ribbon_frames, gap_frames = [], []
        for country in sorted(shares['country']):
            country = CountryCode(country)
            if country not in penetration:
                exclusions.append(exclusion_row('report', country, BoundKind.UPPER, 'no penetration rate'))
                continue
            if country not in series:
                raise InputValidationError(f'{country} is in {FLOW_ESTIMATES} but has no {language} audience in the '
                                           f'store; rerun estimate on the same store')
            original = series[country]
            adjusted = original.adjusted(penetration[country])
            lower = weekly_changes(original)
            upper = weekly_changes(adjusted)
            if upper.min() < 0 or upper.max() <= 0:
                exclusions.append(exclusion_row('report', country, 'both', 'weekly change is not a positive increase'))
                continue
            upper_norm = normalize_series(upper, country=country)
            lower_norm = normalize_series(lower, normalizer=upper_norm.normalizer, country=country)
            # increments over the previous week on the same scale, they can be negative
            frame = pd.DataFrame({'country': str(country), 'bordering': country.borders_origin,
                                  'week': lower.index.astype(int),
                                  'lower': lower_norm.values.to_numpy(), 'upper': upper_norm.values.to_numpy(),
                                  'lower_increment': (weekly_changes(original, cumulative=False)
                                                      / upper_norm.normalizer).to_numpy(),
                                  'upper_increment': (weekly_changes(adjusted, cumulative=False)
                                                      / upper_norm.normalizer).to_numpy(),
                                  'unhcr': np.nan})

            if unhcr and country in unhcr:
                arrivals = unhcr[country]
                covered = [int(w) for w in [0, *lower.index]
                           if arrivals.first_date <= WeekIndex(int(w), epoch).start_date <= arrivals.last_date]
                if 0 not in covered or len(covered) < 2:
                    raise InputValidationError(f'{country}: UNHCR arrivals ({arrivals.first_date} to {arrivals.last_date}) '
                                               f'do not overlap the audience weeks')
                unhcr_norm = normalize_series(arrival_changes(arrivals, covered, epoch), country=country)
                frame['unhcr'] = frame['week'].map(unhcr_norm.values)
                comparison = compare_trends(normalize_series(lower, country=country), unhcr_norm)
                gaps = comparison.table.reset_index()
                gaps.insert(0, 'country', str(country))
                gap_frames.append(gaps)
                logger.info(f'{country}: largest UNHCR gap {comparison.max_gap:.3f} in w{comparison.max_gap_week}')
            ribbon_frames.append(frame)

        if not ribbon_frames:
            raise InputValidationError('no country has data for the weekly change ribbons')
        self.bundle = ReportBundle(
            scatter=scatter,
            shares=shares,
            ribbons=pd.concat(ribbon_frames, ignore_index=True),
            trend_gaps=pd.concat(gap_frames, ignore_index=True) if gap_frames else
                       pd.DataFrame(columns=['country', 'week', 'facebook', 'unhcr', 'gap']),
            plot_spec=self.plot_spec(validation, min_share),
            exclusions=exclusions,
        )

    @staticmethod
    def plot_spec(validation:dict, min_share:float) -> dict:
        return {
            'fig1': {
                'file': FIG1_SCATTER,
                'kind': 'scatter',
                'x': {'column': 'stock', 'label': 'Official diaspora stock', 'scale': 'log'},
                'y': {'columns': ['mau_original', 'mau_adjusted'], 'label': 'Prewar audience', 'scale': 'log'},
                'series': {'mau_original': {'label': 'original', 'r': validation['original']['r']},
                           'mau_adjusted': {'label': 'adjusted', 'r': validation['adjusted']['r']}},
            },
            'fig2': {
                'file': FIG2_SHARES,
                'kind': 'bar',
                'x': {'column': 'country', 'label': 'Country'},
                'y': {'columns': ['lower_share', 'upper_share'], 'label': 'Share of the total change', 'scale': 'linear'},
                'threshold': {'column': 'lower_share', 'min_share': min_share},
            },
            'fig3': {
                'file': FIG3_RIBBONS,
                'kind': 'ribbon',
                'facet': 'country',
                'x': {'column': 'week', 'label': 'Week since the epoch'},
                'y': {'label': 'Normalized weekly absolute change', 'scale': 'log'},
                'ribbon': {'lower': 'lower', 'upper': 'upper'},
                'segments': {'lower': 'lower_increment', 'upper': 'upper_increment',
                             'label': 'Increase over the previous week'},
                'group': {'column': 'bordering', 'labels': {'true': 'bordering', 'false': 'not bordering'}},
                'overlay': {'column': 'unhcr', 'label': 'UNHCR arrivals'},
            },
        }

    def export_results(self) -> list:
        bundle = self.bundle
        return write_outputs(self.out_dir, {
            FIG2_SHARES: csv_text(bundle.shares),
            FIG3_RIBBONS: csv_text(bundle.ribbons),
            FIG3_TREND_GAPS: csv_text(bundle.trend_gaps),
            PLOT_SPEC: json_text(bundle.plot_spec),
            EXCLUSIONS: merged_exclusions(self.out_dir, 'report', bundle.exclusions),
        })
