import datetime
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import pandas as pd

from process_classes.domain_classes import (DEFAULT_EPOCH, DEFAULT_LANGUAGE, ORIGIN_COUNTRY, ArrivalSeries,
                                            BoundKind, CountryCode, DiasporaStock, MauObservation, MauSeries,
                                            MIN_WEEK_INDEX, PenetrationRate, WeekIndex, as_date, check_count,
                                            check_language)
from process_classes.errors import InputValidationError
from process_classes.estimator_class import flow_bounds
from process_classes.ingest_classes import SnapshotStore, save_diaspora, save_penetration, save_unhcr

'''

Ground truth displacement simulator. Agents start in their cohort's country and move only when a scheduled flow
picks them. Each agent is a platform user with probability equal to the origin penetration rate.

A platform user counts towards a country's audience on day d when they were present there on any day of the
trailing window [d - window + 1, d] (truncated at day 0). Presence is taken as activity, so a user who crossed a
border inside the window shows up in both countries.

Week k of the synthetic series is observed on simulation day epoch_day + 7k, the first day of the week bin.

'''

logger = logging.getLogger(__name__)

# ------------------------------------------------------------------------------------------------------------
# Inputs

DEFAULT_WINDOW_DAYS = 30

@dataclass(frozen=True)
class Cohort:
    name: str
    country: CountryCode
    size: int

    def __post_init__(self):
        if not isinstance(self.name, str) or not self.name:
            raise InputValidationError(f'cohort name must be a non-empty string, got {self.name!r}')
        object.__setattr__(self, 'country', CountryCode(self.country))
        object.__setattr__(self, 'size', check_count(self.size, f'cohort {self.name} size'))


@dataclass(frozen=True)
class Flow:
    day: int
    from_country: CountryCode
    to_country: CountryCode
    count: int
    cohort: Optional[str] = None

    def __post_init__(self):
        object.__setattr__(self, 'day', check_count(self.day, 'flow day'))
        object.__setattr__(self, 'from_country', CountryCode(self.from_country))
        object.__setattr__(self, 'to_country', CountryCode(self.to_country))
        object.__setattr__(self, 'count', check_count(self.count, 'flow count'))
        if self.from_country == self.to_country:
            raise InputValidationError(f'flow on day {self.day} starts and ends in {self.from_country}')


@dataclass(frozen=True)
class ScenarioConfig:
    countries: tuple
    origin_penetration: float
    cohorts: tuple
    flows: tuple
    horizon_days: int
    seed: int
    epoch_day: int = 0
    epoch_date: datetime.date = DEFAULT_EPOCH
    window_days: int = DEFAULT_WINDOW_DAYS
    language: str = DEFAULT_LANGUAGE

    def __post_init__(self):
        countries = tuple(CountryCode(c) for c in self.countries)
        if not countries or len(set(countries)) != len(countries):
            raise InputValidationError('scenario needs a non-empty list of distinct countries')
        object.__setattr__(self, 'countries', countries)
        object.__setattr__(self, 'origin_penetration', PenetrationRate(ORIGIN_COUNTRY, self.origin_penetration).rate)
        object.__setattr__(self, 'horizon_days', check_count(self.horizon_days, 'horizon_days'))
        object.__setattr__(self, 'seed', check_count(self.seed, 'seed'))
        object.__setattr__(self, 'epoch_day', check_count(self.epoch_day, 'epoch_day'))
        object.__setattr__(self, 'window_days', check_count(self.window_days, 'window_days'))
        object.__setattr__(self, 'epoch_date', as_date(self.epoch_date))
        check_language(self.language)
        if self.horizon_days < 1:
            raise InputValidationError('horizon_days must be at least 1')
        if self.window_days < 1:
            raise InputValidationError('window_days must be at least 1')
        if self.epoch_day >= self.horizon_days:
            raise InputValidationError(f'epoch_day {self.epoch_day} is outside the {self.horizon_days} day horizon')

        known = set(countries)
        cohort_names = set()
        for cohort in self.cohorts:
            if cohort.country not in known:
                raise InputValidationError(f'cohort {cohort.name} lives in unknown country {cohort.country}')
            if cohort.name in cohort_names:
                raise InputValidationError(f'cohort {cohort.name} is defined twice')
            cohort_names.add(cohort.name)
        if sum(c.size for c in self.cohorts) == 0:
            raise InputValidationError('scenario has no agents')
        for flow in self.flows:
            for country in (flow.from_country, flow.to_country):
                if country not in known:
                    raise InputValidationError(f'flow on day {flow.day} references unknown country {country}')
            if not 1 <= flow.day < self.horizon_days:
                raise InputValidationError(f'flow day {flow.day} must lie in [1, {self.horizon_days - 1}]')
            if flow.cohort is not None and flow.cohort not in cohort_names:
                raise InputValidationError(f'flow on day {flow.day} references unknown cohort {flow.cohort}')

    @classmethod
    def from_dict(cls, raw:dict) -> 'ScenarioConfig':
        try:
            cohorts = tuple(Cohort(c['name'], c['country'], c['size']) for c in raw['cohorts'])
            flows = tuple(Flow(f['day'], f['from'], f['to'], f['count'], f.get('cohort')) for f in raw.get('flows', []))
            return cls(
                countries=tuple(raw['countries']),
                origin_penetration=raw['origin_penetration'],
                cohorts=cohorts,
                flows=flows,
                horizon_days=raw['horizon_days'],
                seed=raw['seed'],
                epoch_day=raw.get('epoch_day', 0),
                epoch_date=raw.get('epoch_date', DEFAULT_EPOCH.isoformat()),
                window_days=raw.get('window_days', DEFAULT_WINDOW_DAYS),
                language=raw.get('language', DEFAULT_LANGUAGE),
            )
        except KeyError as e:
            raise InputValidationError(f'scenario is missing {e}')
        except TypeError as e:
            raise InputValidationError(f'scenario has a malformed entry: {e}')

    @classmethod
    def from_json(cls, path) -> 'ScenarioConfig':
        path = Path(path)
        try:
            with open(path, encoding='utf-8') as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise InputValidationError('scenario file not found', path=path)
        except json.JSONDecodeError as e:
            raise InputValidationError(f'scenario is not valid JSON: {e}', path=path)
        if not isinstance(raw, dict):
            raise InputValidationError('scenario must be a JSON object', path=path)
        return cls.from_dict(raw)

    def day_date(self, day:int) -> datetime.date:
        return self.epoch_date + datetime.timedelta(days=day - self.epoch_day)


@dataclass(frozen=True)
class Agent:
    id: int
    is_platform_user: bool
    location_history: tuple

    def __post_init__(self):
        days = [day for day, _ in self.location_history]
        if not days or any(b <= a for a, b in zip(days, days[1:])):
            raise InputValidationError(f'agent {self.id}: history days must be strictly increasing')

    def location_on(self, day:int) -> CountryCode:
        current = None
        for start, country in self.location_history:
            if start > day:
                break
            current = country
        return current


# ------------------------------------------------------------------------------------------------------------
# Logic

class World:
    '''
    Simulator state: one row per day, one column per agent, holding the index of the country the agent is in.
    Flows are applied in day order; movers are drawn without replacement from the agents (of the cohort, when
    given) that were in the source country the day before and have not moved yet that day.
    '''

    def __init__(self, config:ScenarioConfig) -> None:
        self.config = config
        self.countries = list(config.countries)
        self.country_index = {country: i for i, country in enumerate(self.countries)}
        rng = np.random.default_rng(config.seed)

        sizes = [cohort.size for cohort in config.cohorts]
        self.n_agents = sum(sizes)
        self.cohort_of = np.repeat(np.arange(len(config.cohorts)), sizes)
        home = np.repeat([self.country_index[c.country] for c in config.cohorts], sizes).astype(np.int16)
        self.is_platform_user = rng.random(self.n_agents) < config.origin_penetration
        self.location = np.tile(home, (config.horizon_days, 1))

        cohort_index = {cohort.name: i for i, cohort in enumerate(config.cohorts)}
        moved_on = np.full(self.n_agents, -1)
        for flow in sorted(config.flows, key=lambda f: f.day):
            day = flow.day
            source = self.country_index[flow.from_country]
            eligible = (self.location[day - 1] == source) & (moved_on != day)
            if flow.cohort is not None:
                eligible &= self.cohort_of == cohort_index[flow.cohort]
            candidates = np.flatnonzero(eligible)
            if len(candidates) < flow.count:
                raise InputValidationError(f'flow on day {day} {flow.from_country}->{flow.to_country} moves {flow.count} '
                                           f'agents but only {len(candidates)} are available')
            chosen = np.sort(rng.choice(candidates, size=flow.count, replace=False))
            self.location[day:, chosen] = self.country_index[flow.to_country]
            moved_on[chosen] = day

    def present(self, country, first_day:int, last_day:int) -> np.ndarray:
        '''Boolean mask of agents present in country on any day of [first_day, last_day]'''
        if country not in self.country_index:
            raise InputValidationError(f'unknown country {country}')
        if not 0 <= last_day < self.config.horizon_days:
            raise InputValidationError(f'day {last_day} is outside the {self.config.horizon_days} day horizon')
        first_day = max(0, first_day)
        return (self.location[first_day:last_day + 1] == self.country_index[country]).any(axis=0)

    def agents(self) -> list:
        agents = []
        for agent_id in range(self.n_agents):
            track = self.location[:, agent_id]
            change_days = [0] + [int(d) for d in np.flatnonzero(np.diff(track)) + 1]
            history = tuple((day, self.countries[track[day]]) for day in change_days)
            agents.append(Agent(agent_id, bool(self.is_platform_user[agent_id]), history))
        return agents


class SimulatedDataset:
    '''Ground truth presence and arrivals next to the synthetic audience series they would produce'''

    def __init__(self, world:World) -> None:
        self.world = world
        self.config = world.config
        config = world.config
        n_countries = len(world.countries)

        counts = np.stack([np.bincount(day_row, minlength=n_countries) for day_row in world.location])
        platform_counts = np.stack([np.bincount(day_row[world.is_platform_user], minlength=n_countries)
                                    for day_row in world.location])
        self.presence = pd.DataFrame(counts, columns=[str(c) for c in world.countries])
        self.presence.index.name = 'day'
        self.platform_presence = pd.DataFrame(platform_counts, columns=[str(c) for c in world.countries])
        self.platform_presence.index.name = 'day'

        first_week = max(MIN_WEEK_INDEX, -(config.epoch_day // 7))
        last_week = (config.horizon_days - 1 - config.epoch_day) // 7
        self.observation_days = {k: config.epoch_day + 7 * k for k in range(first_week, last_week + 1)}

        self.mau_series = {}
        for country in world.countries:
            values = {k: self.observe_mau(country, day) for k, day in self.observation_days.items()}
            self.mau_series[country] = MauSeries(country, values, epoch_date=config.epoch_date)

        # Arrivals straight from the origin, the only crossings a border count sees
        self.arrivals = {}
        if ORIGIN_COUNTRY in world.country_index:
            origin = world.country_index[ORIGIN_COUNTRY]
            from_origin = (world.location[:-1] == origin)
            dates = [config.day_date(day) for day in range(config.horizon_days)]
            for country in world.countries:
                if country == ORIGIN_COUNTRY:
                    continue
                entered = from_origin & (world.location[1:] == world.country_index[country])
                cumulative = np.concatenate([[0], np.cumsum(entered.sum(axis=1))])
                self.arrivals[country] = ArrivalSeries(country, pd.Series(cumulative, index=dates))

    def observe_mau(self, country, day:int, window_days:int=None) -> int:
        '''Distinct platform users present in country during the trailing window ending on day'''
        window_days = window_days or self.config.window_days
        mask = self.world.present(country, day - window_days + 1, day) & self.world.is_platform_user
        return int(mask.sum())

    def true_presence(self, country, day:int) -> int:
        return int(self.presence.loc[day, str(CountryCode(country))])

    def platform_users(self) -> int:
        return int(self.world.is_platform_user.sum())

    def double_count_excess(self, day:int, window_days:int=None) -> int:
        '''Audience summed over countries minus the distinct platform users behind it'''
        total = sum(self.observe_mau(country, day, window_days) for country in self.world.countries)
        return total - self.platform_users()

    def agents(self) -> list:
        return self.world.agents()

    def observations(self) -> list:
        records = []
        for country in sorted(self.world.countries):
            for k, value in self.mau_series[country].values.items():
                week = WeekIndex(int(k), self.config.epoch_date)
                collected_at = datetime.datetime.combine(week.start_date, datetime.time(), datetime.timezone.utc)
                records.append(MauObservation(country, week, int(value), collected_at, self.config.language))
        return records

    def diaspora_stocks(self) -> dict:
        '''True presence of every destination on the w0 observation day'''
        day = self.observation_days[0]
        return {country: DiasporaStock(country, self.true_presence(country, day), self.config.epoch_date.year)
                for country in self.world.countries if country != ORIGIN_COUNTRY}

    def penetration_rates(self) -> dict:
        return {country: PenetrationRate(country, self.config.origin_penetration)
                for country in self.world.countries if country != ORIGIN_COUNTRY}

    def export(self, out_dir, bound:BoundKind=BoundKind.LOWER) -> dict:
        '''Writes the dataset with the same schemas the ingest loaders read, plus presence and bias tables'''
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        paths = {name: out_dir / name for name in ('snapshots.jsonl', 'diaspora.csv', 'penetration.csv',
                                                   'unhcr_arrivals.csv', 'presence.csv', 'bias_report.csv')}
        bias = estimator_bias_report(self, estimate_dataset_flows(self, bound))

        paths['snapshots.jsonl'].unlink(missing_ok=True)
        store = SnapshotStore(paths['snapshots.jsonl'])
        for obs in self.observations():
            store.append(obs)
        save_diaspora(self.diaspora_stocks(), paths['diaspora.csv'])
        save_penetration(self.penetration_rates(), paths['penetration.csv'])
        save_unhcr(self.arrivals, paths['unhcr_arrivals.csv'])
        presence = self.presence.copy()
        presence.insert(0, 'date', [self.config.day_date(day).isoformat() for day in presence.index])
        presence.to_csv(paths['presence.csv'], lineterminator='\n')
        bias.to_csv(paths['bias_report.csv'], index=False, lineterminator='\n')
        return paths


def run_scenario(config:ScenarioConfig) -> SimulatedDataset:
    return SimulatedDataset(World(config))


def estimate_dataset_flows(dataset:SimulatedDataset, bound:BoundKind=BoundKind.LOWER) -> pd.DataFrame:
    '''
    Runs the flow estimator on the synthetic series, with the exported stocks and penetration rates. Destinations
    with no baseline audience are skipped.
    '''
    stocks = dataset.diaspora_stocks()
    rows = []
    for country, stock in stocks.items():
        series = dataset.mau_series[country]
        baseline = int(series[0])
        if baseline == 0:
            logger.warning(f'{country}: no baseline audience, left out of the estimates')
            continue
        for week in series.values.index[series.values.index >= 1]:
            lower, upper = flow_bounds(stock, int(series[week]), baseline, dataset.config.origin_penetration)
            rows.append([str(country), int(week), lower if bound is BoundKind.LOWER else upper])
    return pd.DataFrame(rows, columns=['country', 'week', 'estimated_delta'])


def estimator_bias_report(dataset:SimulatedDataset, estimates:pd.DataFrame) -> pd.DataFrame:
    '''Estimated change minus the true change in presence, per country and week'''
    report = estimates[['country', 'week', 'estimated_delta']].copy()
    baseline_day = dataset.observation_days[0]
    report['true_net_inflow'] = [
        dataset.true_presence(country, dataset.observation_days[int(week)]) - dataset.true_presence(country, baseline_day)
        for country, week in zip(report['country'], report['week'])
    ]
    report['bias'] = report['estimated_delta'] - report['true_net_inflow']
    return report.sort_values(['country', 'week'], kind='mergesort').reset_index(drop=True)
