import datetime
import json
import logging
import os
import re
import threading
import time
from abc import ABC, abstractmethod
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Iterable, Optional

import pandas as pd
import requests

from process_classes.domain_classes import (DEFAULT_EPOCH, DEFAULT_LANGUAGE, ArrivalSeries, CountryCode,
                                            DiasporaStock, MauObservation, MauSeries, OriginPopulation,
                                            PenetrationRate, WeekIndex, as_date, as_utc, check_language,
                                            format_utc, make_week_index)
from process_classes.errors import (FlowLensError, InputValidationError, MalformedResponseError, QuotaError,
                                    SnapshotConflictError, TransportError)

'''

Everything that reads data into flowlens or writes it back out:

- audience estimate clients (live HTTP and directory replay) and the fetch helpers built on them
- the append-only snapshot store holding one JSON line per audience observation
- loaders and writers for the official statistics CSV files (diaspora stocks, penetration rates, UNHCR
  arrivals, origin population) and the collection plan JSON

CSV loaders read every column as text and validate row by row so each rejected row is reported with its line
number, header being line 1.

'''

logger = logging.getLogger(__name__)

# ------------------------------------------------------------------------------------------------------------
# Inputs

MIN_PLATFORM_AGE = 13
DIASPORA_COLUMNS = ['country', 'stock', 'reference_year']
PENETRATION_COLUMNS = ['country', 'rate']
UNHCR_COLUMNS = ['date', 'country', 'cumulative_arrivals']
ORIGIN_POPULATION_COLUMNS = ['country', 'population_13plus', 'reference_year']

# Platform error codes for throttling and token problems
QUOTA_ERROR_CODES = {4, 17, 32, 190, 613, 80004}
_INTEGER_PATTERN = re.compile(r'^-?\d+$')

# ------------------------------------------------------------------------------------------------------------
# Functions

def utc_now() -> datetime.datetime:
    return datetime.datetime.now(datetime.timezone.utc)


def parse_estimate(payload) -> int:
    '''Pulls the audience size out of a delivery estimate response body'''
    try:
        entry = payload['data'][0]
        if 'estimate_mau' in entry:
            mau = entry['estimate_mau']
        else:
            mau = (entry['estimate_mau_lower_bound'] + entry['estimate_mau_upper_bound']) // 2
        if isinstance(mau, bool) or not isinstance(mau, int) or mau < 0:
            raise ValueError(f'estimate is not a non-negative integer: {mau!r}')
    except (KeyError, IndexError, TypeError, ValueError) as e:
        logger.error(f'Malformed audience response: {json.dumps(payload, sort_keys=True, default=str)}')
        raise MalformedResponseError(f'malformed audience response: {e}', payload=payload)
    return mau


def fetch_audience(client:'AudienceClient', query:'AudienceQuery', week:Optional[WeekIndex]=None) -> MauObservation:
    '''One observation for the query. Without a week the client's current week is requested'''
    if week is None:
        week = client.current_week()
    recorded = client.estimate(query, week)
    mau = parse_estimate(recorded.payload)
    return MauObservation(query.country, week, mau, recorded.collected_at, query.language)


def fetch_many(client:'AudienceClient', pairs:Iterable, max_workers:int=4) -> list:
    '''Fetches (query, week) pairs on a bounded thread pool. Results come back in input order'''
    pairs = list(pairs)
    with ThreadPoolExecutor(max_workers=max_workers) as executor:
        return list(executor.map(lambda pair: fetch_audience(client, pair[0], pair[1]), pairs))


def read_checked_csv(path, columns:list) -> pd.DataFrame:
    '''Reads a CSV as text after checking that the header matches columns exactly'''
    path = Path(path)
    if not path.is_file():
        raise InputValidationError('file not found', path=path)
    try:
        df = pd.read_csv(path, dtype=str, keep_default_na=False, skip_blank_lines=False, encoding='utf-8')
    except pd.errors.EmptyDataError:
        raise InputValidationError('file is empty', path=path)
    except (pd.errors.ParserError, UnicodeDecodeError) as e:
        raise InputValidationError(f'cannot parse CSV: {e}', path=path)
    if list(df.columns) != columns:
        raise InputValidationError(f'header must be {",".join(columns)}, got {",".join(map(str, df.columns))}', path=path)
    return df


def rows_with_lines(df:pd.DataFrame):
    '''Yields (line_number, row) where line 1 is the header'''
    for position, row in enumerate(df.itertuples(index=False)):
        yield position + 2, row


def parse_int(text:str, name:str) -> int:
    text = text.strip()
    if not _INTEGER_PATTERN.match(text):
        raise InputValidationError(f'{name} must be a whole number without separators, got {text!r}')
    value = int(text)
    if value < 0:
        raise InputValidationError(f'{name} must be non-negative, got {value}')
    return value


def parse_rows(path, columns:list, parse_row:Callable) -> list:
    '''
    Applies parse_row to every row and returns (line, key, value) for the good ones. Bad rows and duplicated keys
    are collected and raised together.
    '''
    df = read_checked_csv(path, columns)
    parsed, errors, seen = [], [], {}
    for line, row in rows_with_lines(df):
        try:
            key, value = parse_row(row)
        except InputValidationError as e:
            errors.append((line, str(e)))
            continue
        if key in seen:
            label = ' '.join(map(str, key)) if isinstance(key, tuple) else key
            errors.append((line, f'duplicate {label} (first seen on line {seen[key]})'))
            continue
        seen[key] = line
        parsed.append((line, key, value))
    if errors:
        raise InputValidationError(f'{len(errors)} invalid row(s)', errors=errors, path=path)
    return parsed


def load_diaspora(path) -> dict:
    '''country,stock,reference_year -> {CountryCode: DiasporaStock}'''
    def parse_row(row):
        stock = DiasporaStock(CountryCode(row.country.strip()), parse_int(row.stock, 'stock'),
                              parse_int(row.reference_year, 'reference_year'))
        return stock.country, stock
    return {key: value for _, key, value in parse_rows(path, DIASPORA_COLUMNS, parse_row)}


def save_diaspora(stocks:dict, path) -> None:
    df = pd.DataFrame([[str(s.country), s.stock, s.reference_year] for s in stocks.values()], columns=DIASPORA_COLUMNS)
    df.to_csv(path, index=False, lineterminator='\n')


def load_penetration(path) -> dict:
    '''country,rate -> {CountryCode: PenetrationRate}. Rates outside (0, 1] are rejected'''
    def parse_row(row):
        try:
            rate = float(row.rate.strip())
        except ValueError:
            raise InputValidationError(f'rate is not a number: {row.rate!r}')
        rate = PenetrationRate(CountryCode(row.country.strip()), rate)
        return rate.country, rate
    return {key: value for _, key, value in parse_rows(path, PENETRATION_COLUMNS, parse_row)}


def save_penetration(rates:dict, path) -> None:
    # repr keeps the shortest string that parses back to the same float
    df = pd.DataFrame([[str(r.country), repr(r.rate)] for r in rates.values()], columns=PENETRATION_COLUMNS)
    df.to_csv(path, index=False, lineterminator='\n')


def load_origin_population(path) -> dict:
    '''country,population_13plus,reference_year -> {CountryCode: OriginPopulation}'''
    def parse_row(row):
        population = OriginPopulation(CountryCode(row.country.strip()), parse_int(row.population_13plus, 'population_13plus'),
                                      parse_int(row.reference_year, 'reference_year'))
        return population.country, population
    return {key: value for _, key, value in parse_rows(path, ORIGIN_POPULATION_COLUMNS, parse_row)}


def load_unhcr(path) -> dict:
    '''
    date,country,cumulative_arrivals -> {CountryCode: ArrivalSeries}. Rows may come in any order; within a
    country the cumulative value may never drop from one date to the next.
    '''
    def parse_row(row):
        country = CountryCode(row.country.strip())
        date = as_date(row.date)
        return (country, date), parse_int(row.cumulative_arrivals, 'cumulative_arrivals')

    parsed = parse_rows(path, UNHCR_COLUMNS, parse_row)
    by_country = {}
    for line, (country, date), value in parsed:
        by_country.setdefault(country, []).append((date, value, line))

    series, errors = {}, []
    for country, rows in by_country.items():
        rows.sort()
        for (prev_date, prev_value, _), (date, value, line) in zip(rows, rows[1:]):
            if value < prev_value:
                errors.append((line, f'{country} cumulative arrivals drop on {date.isoformat()} '
                                     f'({value} < {prev_value} on {prev_date.isoformat()})'))
        series[country] = pd.Series([v for _, v, _ in rows], index=[d for d, _, _ in rows])
    if errors:
        raise InputValidationError('non-monotone cumulative arrivals', errors=errors, path=path)
    return {country: ArrivalSeries(country, values) for country, values in series.items()}


def save_unhcr(arrivals:dict, path) -> None:
    rows = []
    for country, series in arrivals.items():
        for stamp, value in series.values.items():
            rows.append([stamp.date().isoformat(), str(country), int(value)])
    df = pd.DataFrame(rows, columns=UNHCR_COLUMNS).sort_values(['date', 'country'], kind='mergesort')
    df.to_csv(path, index=False, lineterminator='\n')


# ------------------------------------------------------------------------------------------------------------
# Logic

@dataclass(frozen=True)
class AudienceQuery:
    country: CountryCode
    language: str = DEFAULT_LANGUAGE
    min_age: int = MIN_PLATFORM_AGE

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        check_language(self.language)
        if isinstance(self.min_age, bool) or not isinstance(self.min_age, int) or self.min_age < MIN_PLATFORM_AGE:
            raise InputValidationError(f'min_age must be an integer of at least {MIN_PLATFORM_AGE}, got {self.min_age!r}')

    def fixture_key(self, week:WeekIndex) -> str:
        return f'{self.country}-{self.language}-{week.label}'

    def to_dict(self) -> dict:
        return {'country': str(self.country), 'language': self.language, 'min_age': self.min_age}


@dataclass(frozen=True)
class RecordedEstimate:
    '''Raw response body plus the moment it was collected'''
    payload: dict
    collected_at: datetime.datetime


@dataclass(frozen=True)
class CollectionPlan:
    countries: tuple
    language: str = DEFAULT_LANGUAGE
    min_age: int = MIN_PLATFORM_AGE
    weeks: tuple = (0,)

    @classmethod
    def from_json(cls, path) -> 'CollectionPlan':
        path = Path(path)
        try:
            with open(path, encoding='utf-8') as f:
                raw = json.load(f)
        except FileNotFoundError:
            raise InputValidationError('collection plan not found', path=path)
        except json.JSONDecodeError as e:
            raise InputValidationError(f'collection plan is not valid JSON: {e}', path=path)
        if not isinstance(raw, dict) or not raw.get('countries'):
            raise InputValidationError('collection plan needs a non-empty "countries" list', path=path)
        weeks = raw.get('weeks', [0])
        if not isinstance(weeks, list) or not all(isinstance(w, int) and not isinstance(w, bool) for w in weeks):
            raise InputValidationError('"weeks" must be a list of integers', path=path)
        countries = [CountryCode(c) for c in raw['countries']]
        if len(set(countries)) != len(countries):
            raise InputValidationError('collection plan lists a country twice', path=path)
        return cls(tuple(countries), raw.get('language', DEFAULT_LANGUAGE), raw.get('min_age', MIN_PLATFORM_AGE),
                   tuple(sorted(set(weeks))))

    def queries(self) -> list:
        return [AudienceQuery(country, self.language, self.min_age) for country in self.countries]

    def pairs(self, epoch=DEFAULT_EPOCH, weeks=None) -> list:
        '''(query, week) pairs in plan order, each country's weeks ascending'''
        weeks = self.weeks if weeks is None else weeks
        return [(query, WeekIndex(w, epoch)) for query in self.queries() for w in weeks]


class AudienceClient(ABC):
    '''Source of raw audience estimate responses'''

    epoch_date = DEFAULT_EPOCH

    @abstractmethod
    def estimate(self, query:AudienceQuery, week:WeekIndex) -> RecordedEstimate:
        ...

    def current_week(self) -> WeekIndex:
        raise InputValidationError(f'{type(self).__name__} needs an explicit week')


class HttpAudienceClient(AudienceClient):
    '''
    Talks to a delivery estimate endpoint. Only the current week can be collected live, the API has no history.
    When record_dir is set every response is also written there as a replay fixture.
    '''

    def __init__(self, base_url:str, token:str, session:requests.Session=None, session_factory:Callable=None,
                 epoch=DEFAULT_EPOCH, max_attempts:int=5, backoff_seconds:float=1.0, timeout:float=30.0, record_dir=None,
                 sleep:Callable=time.sleep, clock:Callable=utc_now) -> None:
        if not base_url or not token:
            raise InputValidationError('live collection needs FLOWLENS_API_BASE_URL and FLOWLENS_API_TOKEN')
        self.base_url = base_url.rstrip('/')
        self.token = token
        # one session per worker thread unless a shared one is injected
        self.session_factory = session_factory or ((lambda: session) if session is not None else requests.Session)
        self._local = threading.local()
        self.epoch_date = as_date(epoch)
        self.max_attempts = max_attempts
        self.backoff_seconds = backoff_seconds
        self.timeout = timeout
        self.record_dir = Path(record_dir) if record_dir else None
        self.sleep = sleep
        self.clock = clock

    @classmethod
    def from_env(cls, **kwargs) -> 'HttpAudienceClient':
        return cls(os.getenv('FLOWLENS_API_BASE_URL'), os.getenv('FLOWLENS_API_TOKEN'), **kwargs)

    def current_week(self) -> WeekIndex:
        return make_week_index(self.clock(), self.epoch_date)

    @property
    def session(self) -> requests.Session:
        if getattr(self._local, 'session', None) is None:
            self._local.session = self.session_factory()
        return self._local.session

    def _request_once(self, query:AudienceQuery) -> dict:
        targeting = {'geo_locations': {'countries': [str(query.country)]}, 'age_min': query.min_age,
                     'languages': [query.language]}
        params = {'access_token': self.token, 'optimization_goal': 'REACH',
                  'targeting_spec': json.dumps(targeting, sort_keys=True)}
        try:
            response = self.session.get(f'{self.base_url}/delivery_estimate', params=params, timeout=self.timeout)
        except (requests.ConnectionError, requests.Timeout) as e:
            raise TransportError(f'{query.country}: {e}')
        except requests.RequestException as e:
            raise TransportError(f'{query.country}: {type(e).__name__}: {e}')

        if response.status_code in (401, 403, 429):
            raise QuotaError(f'{query.country}: API refused the request ({response.status_code})', response.status_code)
        if response.status_code >= 500:
            raise TransportError(f'{query.country}: server error {response.status_code}')
        try:
            payload = response.json()
        except ValueError:
            logger.error(f'Malformed audience response for {query.country}: {response.text!r}')
            raise MalformedResponseError(f'{query.country}: response is not JSON', payload=response.text)
        if isinstance(payload, dict) and 'error' in payload:
            error = payload['error'] if isinstance(payload['error'], dict) else {'message': payload['error']}
            code = error.get('code')
            if code in QUOTA_ERROR_CODES:
                raise QuotaError(f'{query.country}: API error {code}: {error.get("message")}', response.status_code)
            logger.error(f'API error for {query.country}: {json.dumps(payload, sort_keys=True, default=str)}')
            raise MalformedResponseError(f'{query.country}: API error {code}: {error.get("message")}', payload=payload)
        if response.status_code >= 400:
            raise QuotaError(f'{query.country}: request rejected ({response.status_code})', response.status_code)
        return payload

    def estimate(self, query:AudienceQuery, week:WeekIndex) -> RecordedEstimate:
        current = self.current_week()
        if week.index != current.index:
            raise InputValidationError(f'live estimates only exist for the current week {current.label}, not {week.label}')

        attempt = 1
        while True:
            try:
                payload = self._request_once(query)
                break
            except TransportError as e:
                if not e.retryable or attempt >= self.max_attempts:
                    raise
                delay = self.backoff_seconds * 2 ** (attempt - 1)
                logger.warning(f'Attempt {attempt}/{self.max_attempts} failed ({e}), retrying in {delay:g}s')
                self.sleep(delay)
                attempt += 1

        recorded = RecordedEstimate(payload, as_utc(self.clock()))
        if self.record_dir is not None:
            write_cassette(self.record_dir, query, week, recorded)
        return recorded


class ReplayAudienceClient(AudienceClient):
    '''Serves responses recorded earlier, one JSON file per <country>-<language>-w<week> key'''

    def __init__(self, replay_dir, epoch=DEFAULT_EPOCH) -> None:
        self.replay_dir = Path(replay_dir)
        self.epoch_date = as_date(epoch)
        if not self.replay_dir.is_dir():
            raise InputValidationError('replay directory not found', path=self.replay_dir)

    def estimate(self, query:AudienceQuery, week:WeekIndex) -> RecordedEstimate:
        key = query.fixture_key(week)
        path = self.replay_dir / f'{key}.json'
        if not path.is_file():
            raise InputValidationError(f'no recorded estimate for {key}', path=self.replay_dir)
        try:
            with open(path, encoding='utf-8') as f:
                cassette = json.load(f)
            response = cassette['response']
            collected_at = as_utc(cassette['collected_at'])
        except (json.JSONDecodeError, KeyError, TypeError, InputValidationError) as e:
            raise InputValidationError(f'unreadable replay fixture: {e}', path=path)
        recorded_query = cassette.get('query', {})
        if recorded_query.get('country', query.country) != query.country or \
                recorded_query.get('language', query.language) != query.language:
            raise InputValidationError(f'fixture was recorded for a different query: {recorded_query}', path=path)
        if make_week_index(collected_at, self.epoch_date).index != week.index:
            logger.warning(f'{key}: collected {format_utc(collected_at)}, outside {week.label} of epoch {self.epoch_date}')
        return RecordedEstimate(response, collected_at)


def write_cassette(record_dir, query:AudienceQuery, week:WeekIndex, recorded:RecordedEstimate) -> Path:
    record_dir = Path(record_dir)
    record_dir.mkdir(parents=True, exist_ok=True)
    key = query.fixture_key(week)
    cassette = {'key': key, 'query': query.to_dict(), 'week': week.index,
                'collected_at': format_utc(recorded.collected_at), 'response': recorded.payload}
    path = record_dir / f'{key}.json'
    with open(path, 'w', encoding='utf-8', newline='\n') as f:
        f.write(json.dumps(cassette, sort_keys=True, indent=2) + '\n')
    return path


class SnapshotStore:
    '''
    Append-only JSON lines file of audience observations keyed by (country, language, week). Appends go through
    one lock; a record already stored with the same audience is skipped, a different audience is a conflict.
    '''

    def __init__(self, path) -> None:
        self.path = Path(path)
        self._lock = threading.Lock()
        self._records = {}
        self.epoch_date = None
        if self.path.exists():
            self._load()
        else:
            self.path.parent.mkdir(parents=True, exist_ok=True)
            self.path.touch()
            logger.info(f'Snapshot store created at {self.path}')

    def _load(self) -> None:
        errors = []
        with open(self.path, encoding='utf-8') as f:
            for line_number, line in enumerate(f, start=1):
                if not line.strip():
                    continue
                try:
                    obs = MauObservation.from_record(json.loads(line))
                    self._check(obs)
                except json.JSONDecodeError as e:
                    errors.append((line_number, f'not JSON: {e}'))
                    continue
                except FlowLensError as e:
                    errors.append((line_number, str(e)))
                    continue
                if obs.key not in self._records:
                    self._records[obs.key] = obs
                    self.epoch_date = self.epoch_date or obs.week.epoch_date
        if errors:
            raise InputValidationError('corrupt snapshot store', errors=errors, path=self.path)

    def _check(self, obs:MauObservation) -> bool:
        '''True when obs is new, False when already stored with the same audience'''
        if self.epoch_date is not None and obs.week.epoch_date != self.epoch_date:
            raise InputValidationError(f'{obs.key}: epoch {obs.week.epoch_date} differs from the store epoch {self.epoch_date}')
        existing = self._records.get(obs.key)
        if existing is None:
            return True
        if existing.mau != obs.mau:
            raise SnapshotConflictError(obs.key, existing.mau, obs.mau)
        return False

    def check(self, observations:Iterable[MauObservation]) -> None:
        '''Raises on the first conflict without writing anything'''
        with self._lock:
            pending = {}
            for obs in observations:
                self._check(obs)
                if obs.key in pending and pending[obs.key].mau != obs.mau:
                    raise SnapshotConflictError(obs.key, pending[obs.key].mau, obs.mau)
                pending[obs.key] = obs

    def append(self, obs:MauObservation) -> bool:
        '''Writes obs unless it is already stored. Returns whether a line was added'''
        with self._lock:
            if not self._check(obs):
                return False
            with open(self.path, 'a', encoding='utf-8', newline='\n') as f:
                f.write(json.dumps(obs.to_record(), sort_keys=True) + '\n')
            self._records[obs.key] = obs
            self.epoch_date = self.epoch_date or obs.week.epoch_date
            return True

    def scan(self, country=None, language:str=None, weeks:Iterable=None) -> list:
        '''Stored observations matching the filter, ordered by (country, week)'''
        weeks = None if weeks is None else {w.index if isinstance(w, WeekIndex) else int(w) for w in weeks}
        with self._lock:
            records = list(self._records.values())
        if country is not None:
            countries = {CountryCode(country)} if isinstance(country, str) else {CountryCode(c) for c in country}
            records = [r for r in records if r.country in countries]
        if language is not None:
            records = [r for r in records if r.language == language]
        if weeks is not None:
            records = [r for r in records if r.week.index in weeks]
        return sorted(records, key=lambda r: (str(r.country), r.week.index, r.language))

    def series(self, language:str=DEFAULT_LANGUAGE) -> dict:
        '''{country: MauSeries} built from every stored week of the language'''
        by_country = {}
        for obs in self.scan(language=language):
            by_country.setdefault(obs.country, []).append(obs)
        return {country: MauSeries.from_observations(obs) for country, obs in by_country.items()}

    def __len__(self) -> int:
        return len(self._records)
