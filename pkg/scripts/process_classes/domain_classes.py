import datetime
import math
import re
import string
from dataclasses import dataclass
from enum import Enum
from typing import Iterable

import numpy as np
import pandas as pd

from process_classes.errors import InputValidationError

'''

Value types shared by the ingest, estimator, simulate and report steps. Everything here is immutable once built
(series hold pandas objects that are copied on the way in and never handed out for editing), so the objects can be
passed between the collection threads without any locking.

Weeks are 7 day bins counted from an epoch date (the start of the displacement event), not ISO calendar weeks.

'''

# ------------------------------------------------------------------------------------------------------------
# Inputs

DEFAULT_EPOCH = datetime.date(2022, 2, 24)
ORIGIN_COUNTRY = 'UA'
# land neighbours of the origin
BORDERING_COUNTRIES = frozenset({'BY', 'HU', 'MD', 'PL', 'RO', 'RU', 'SK'})
DEFAULT_LANGUAGE = 'uk'
MIN_WEEK_INDEX = -4
TIMESTAMP_FORMAT = '%Y-%m-%dT%H:%M:%SZ'

_LANGUAGE_PATTERN = re.compile(r'^[a-z]{2,3}(-[A-Za-z0-9]+)*$')
_WEEK_LABEL_PATTERN = re.compile(r'^w(-?\d+)$')

# ------------------------------------------------------------------------------------------------------------
# Functions

def as_date(value) -> datetime.date:
    '''Accepts a date, datetime, pandas Timestamp or ISO string and returns a plain date'''
    if isinstance(value, pd.Timestamp):
        return value.date()
    if isinstance(value, datetime.datetime):
        return value.date()
    if isinstance(value, datetime.date):
        return value
    if isinstance(value, str):
        try:
            return datetime.date.fromisoformat(value.strip())
        except ValueError:
            raise InputValidationError(f'not an ISO-8601 date: {value!r}')
    raise InputValidationError(f'not a date: {value!r}')


def as_utc(value) -> datetime.datetime:
    '''Normalizes a timestamp to an aware UTC datetime truncated to whole seconds. Naive values are taken as UTC'''
    if isinstance(value, str):
        try:
            value = datetime.datetime.strptime(value, TIMESTAMP_FORMAT)
        except ValueError:
            raise InputValidationError(f'timestamp must look like YYYY-MM-DDTHH:MM:SSZ, got {value!r}')
    if isinstance(value, pd.Timestamp):
        value = value.to_pydatetime()
    if not isinstance(value, datetime.datetime):
        raise InputValidationError(f'not a timestamp: {value!r}')
    if value.tzinfo is None:
        value = value.replace(tzinfo=datetime.timezone.utc)
    return value.astimezone(datetime.timezone.utc).replace(microsecond=0)


def format_utc(value:datetime.datetime) -> str:
    return as_utc(value).strftime(TIMESTAMP_FORMAT)


def check_language(language:str) -> str:
    if not isinstance(language, str) or not _LANGUAGE_PATTERN.match(language):
        raise InputValidationError(f'invalid language tag: {language!r}')
    return language


def check_count(value, name:str) -> int:
    '''Non-negative integer check used for audiences, stocks and agent counts'''
    if isinstance(value, bool) or not isinstance(value, (int, np.integer)):
        if isinstance(value, (float, np.floating)) and float(value).is_integer():
            value = int(value)
        else:
            raise InputValidationError(f'{name} must be an integer, got {value!r}')
    if value < 0:
        raise InputValidationError(f'{name} must be non-negative, got {value}')
    return int(value)


def make_week_index(date, epoch=DEFAULT_EPOCH) -> 'WeekIndex':
    '''Bins a calendar date into the 7 day week it falls in, counted from the epoch'''
    date = as_date(date)
    epoch = as_date(epoch)
    return WeekIndex((date - epoch).days // 7, epoch)


def parse_week_label(label:str, epoch=DEFAULT_EPOCH) -> 'WeekIndex':
    '''Turns "w5" or "w-1" back into a WeekIndex'''
    match = _WEEK_LABEL_PATTERN.match(str(label).strip())
    if match is None:
        raise InputValidationError(f'invalid week label: {label!r}')
    return WeekIndex(int(match.group(1)), as_date(epoch))


def week_number(week) -> int:
    '''Plain integer for a WeekIndex or int, used as pandas index values'''
    if isinstance(week, WeekIndex):
        return week.index
    if isinstance(week, bool) or not isinstance(week, (int, np.integer)):
        raise InputValidationError(f'not a week index: {week!r}')
    return int(week)


# ------------------------------------------------------------------------------------------------------------
# Logic

class CountryCode(str):
    '''ISO 3166-1 alpha-2 code. Behaves as the plain string so it works as a dict key or DataFrame value.'''

    def __new__(cls, code):
        if isinstance(code, CountryCode):
            return code
        if not isinstance(code, str) or len(code) != 2 or any(c not in string.ascii_uppercase for c in code):
            raise InputValidationError(f'country code must be two uppercase ASCII letters, got {code!r}')
        return super().__new__(cls, code)

    @property
    def code(self) -> str:
        return str(self)

    @property
    def is_origin(self) -> bool:
        return self == ORIGIN_COUNTRY

    @property
    def borders_origin(self) -> bool:
        return self in BORDERING_COUNTRIES

    def as_destination(self) -> 'CountryCode':
        '''The origin country is never a destination of a flow'''
        if self.is_origin:
            raise InputValidationError(f'{self} is the origin country and cannot be used as a destination')
        return self


@dataclass(frozen=True, order=True)
class WeekIndex:
    index: int
    epoch_date: datetime.date = DEFAULT_EPOCH

    def __post_init__(self):
        if isinstance(self.index, bool) or not isinstance(self.index, (int, np.integer)):
            raise InputValidationError(f'week index must be an integer, got {self.index!r}')
        if self.index < MIN_WEEK_INDEX:
            raise InputValidationError(f'week index {self.index} is earlier than w{MIN_WEEK_INDEX}')
        object.__setattr__(self, 'index', int(self.index))
        object.__setattr__(self, 'epoch_date', as_date(self.epoch_date))

    @property
    def label(self) -> str:
        return f'w{self.index}'

    @property
    def start_date(self) -> datetime.date:
        return self.epoch_date + datetime.timedelta(days=7 * self.index)

    @property
    def end_date(self) -> datetime.date:
        return self.start_date + datetime.timedelta(days=6)

    def contains(self, date) -> bool:
        return self.start_date <= as_date(date) <= self.end_date

    def __str__(self) -> str:
        return self.label


class SeriesKind(Enum):
    ORIGINAL = 'original'
    ADJUSTED = 'adjusted'


class BoundKind(Enum):
    LOWER = 'lower'
    UPPER = 'upper'


@dataclass(frozen=True)
class MauObservation:
    '''One audience estimate for a (country, language, week)'''
    country: CountryCode
    week: WeekIndex
    mau: int
    collected_at: datetime.datetime
    language: str = DEFAULT_LANGUAGE

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        if not isinstance(self.week, WeekIndex):
            object.__setattr__(self, 'week', WeekIndex(self.week))
        object.__setattr__(self, 'mau', check_count(self.mau, 'mau'))
        object.__setattr__(self, 'collected_at', as_utc(self.collected_at))
        check_language(self.language)

    @property
    def key(self) -> tuple:
        return (str(self.country), self.language, self.week.index)

    def to_record(self) -> dict:
        return {
            'country': str(self.country),
            'language': self.language,
            'week': self.week.index,
            'epoch_date': self.week.epoch_date.isoformat(),
            'mau': self.mau,
            'collected_at': format_utc(self.collected_at),
        }

    @classmethod
    def from_record(cls, record:dict) -> 'MauObservation':
        missing = [k for k in ('country', 'week', 'mau', 'collected_at') if k not in record]
        if missing:
            raise InputValidationError(f'observation record is missing {", ".join(missing)}')
        epoch = record.get('epoch_date', DEFAULT_EPOCH)
        return cls(
            country=record['country'],
            week=WeekIndex(record['week'], as_date(epoch)),
            mau=record['mau'],
            collected_at=record['collected_at'],
            language=record.get('language', DEFAULT_LANGUAGE),
        )


@dataclass(frozen=True, eq=False)
class MauSeries:
    '''Weekly audience values for one country, indexed by integer week relative to the epoch'''
    country: CountryCode
    values: pd.Series
    kind: SeriesKind = SeriesKind.ORIGINAL
    epoch_date: datetime.date = DEFAULT_EPOCH

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        object.__setattr__(self, 'epoch_date', as_date(self.epoch_date))
        values = self.values
        if isinstance(values, dict):
            values = pd.Series(list(values.values()), index=[week_number(w) for w in values.keys()], dtype='float64')
        elif isinstance(values, pd.Series):
            values = pd.Series(values.to_numpy(dtype='float64'), index=[week_number(w) for w in values.index])
        else:
            raise InputValidationError('series values must be a dict or pandas Series keyed by week')
        if len(values) == 0:
            raise InputValidationError(f'{self.country}: empty audience series')
        weeks = values.index.to_numpy()
        if np.any(np.diff(weeks) <= 0):
            raise InputValidationError(f'{self.country}: week indices must be strictly increasing without duplicates')
        if weeks[0] < MIN_WEEK_INDEX:
            raise InputValidationError(f'{self.country}: week w{weeks[0]} is earlier than w{MIN_WEEK_INDEX}')
        if values.isna().any() or np.any(values.to_numpy() < 0):
            raise InputValidationError(f'{self.country}: audience values must be non-negative numbers')
        values.index.name = 'week'
        values.name = str(self.country)
        object.__setattr__(self, 'values', values)

    @classmethod
    def from_observations(cls, observations:Iterable[MauObservation], country=None, epoch_date=None) -> 'MauSeries':
        observations = sorted(observations, key=lambda obs: obs.week.index)
        if not observations:
            raise InputValidationError(f'no observations for {country}')
        country = CountryCode(country or observations[0].country)
        values = {}
        for obs in observations:
            if obs.country != country:
                raise InputValidationError(f'observation for {obs.country} mixed into the {country} series')
            if obs.week.index in values:
                raise InputValidationError(f'{country}: duplicate observation for {obs.week.label}')
            values[obs.week.index] = obs.mau
        epoch_date = epoch_date or observations[0].week.epoch_date
        return cls(country, values, SeriesKind.ORIGINAL, epoch_date)

    @property
    def weeks(self) -> list:
        return [WeekIndex(int(w), self.epoch_date) for w in self.values.index]

    def __contains__(self, week) -> bool:
        return week_number(week) in self.values.index

    def __getitem__(self, week) -> float:
        number = week_number(week)
        if number not in self.values.index:
            raise KeyError(f'{self.country} has no value for w{number}')
        return self.values.loc[number].item()

    def __len__(self) -> int:
        return len(self.values)

    def __eq__(self, other) -> bool:
        if not isinstance(other, MauSeries):
            return NotImplemented
        return (self.country == other.country and self.kind == other.kind and self.epoch_date == other.epoch_date
                and self.values.equals(other.values))

    def adjusted(self, rate:'PenetrationRate') -> 'MauSeries':
        '''Divides every week by the penetration rate. Only original series can be adjusted'''
        if self.kind is not SeriesKind.ORIGINAL:
            raise InputValidationError(f'{self.country}: series is already adjusted')
        return MauSeries(self.country, self.values / rate.rate, SeriesKind.ADJUSTED, self.epoch_date)


@dataclass(frozen=True)
class DiasporaStock:
    country: CountryCode
    stock: int
    reference_year: int

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        object.__setattr__(self, 'stock', check_count(self.stock, 'stock'))
        if isinstance(self.reference_year, bool) or not isinstance(self.reference_year, (int, np.integer)):
            raise InputValidationError(f'reference_year must be an integer, got {self.reference_year!r}')
        object.__setattr__(self, 'reference_year', int(self.reference_year))


@dataclass(frozen=True)
class PenetrationRate:
    country: CountryCode
    rate: float

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        rate = self.rate
        if isinstance(rate, bool) or not isinstance(rate, (int, float, np.integer, np.floating)):
            raise InputValidationError(f'{self.country}: penetration rate must be a number, got {rate!r}')
        rate = float(rate)
        if not math.isfinite(rate) or rate <= 0 or rate > 1:
            raise InputValidationError(f'{self.country}: penetration rate must be in (0, 1], got {rate}')
        object.__setattr__(self, 'rate', rate)


@dataclass(frozen=True)
class OriginPopulation:
    '''Population aged 13 and over in the origin country'''
    country: CountryCode
    population_13plus: int
    reference_year: int

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        population = check_count(self.population_13plus, 'population_13plus')
        if population == 0:
            raise InputValidationError(f'{self.country}: population_13plus must be positive')
        object.__setattr__(self, 'population_13plus', population)


@dataclass(frozen=True, eq=False)
class ArrivalSeries:
    '''Cumulative border arrivals for one country, indexed by calendar date'''
    country: CountryCode
    values: pd.Series

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country))
        values = self.values
        if isinstance(values, dict):
            values = pd.Series(list(values.values()), index=list(values.keys()))
        if not isinstance(values, pd.Series) or len(values) == 0:
            raise InputValidationError(f'{self.country}: arrivals must be a non-empty dict or pandas Series')
        values = pd.Series(values.to_numpy(), index=pd.DatetimeIndex([pd.Timestamp(as_date(d)) for d in values.index]))
        if not values.index.is_unique or not values.index.is_monotonic_increasing:
            raise InputValidationError(f'{self.country}: arrival dates must be unique and increasing')
        counts = [check_count(v, 'cumulative_arrivals') for v in values.to_numpy()]
        values = pd.Series(counts, index=values.index, dtype='int64', name=str(self.country))
        drops = values.diff() < 0
        if drops.any():
            bad_date = values.index[drops.to_numpy().argmax()].date().isoformat()
            raise InputValidationError(f'{self.country}: cumulative arrivals decrease on {bad_date}')
        values.index.name = 'date'
        object.__setattr__(self, 'values', values)

    @property
    def first_date(self) -> datetime.date:
        return self.values.index[0].date()

    @property
    def last_date(self) -> datetime.date:
        return self.values.index[-1].date()

    def value_on(self, date) -> int:
        '''Cumulative count on the last reported date not after date, 0 before the first report'''
        stamp = pd.Timestamp(as_date(date))
        if stamp < self.values.index[0]:
            return 0
        return int(self.values.asof(stamp))


@dataclass(frozen=True)
class FlowEstimate:
    '''Estimated change in the displaced population of one destination, with its share of the all-country change'''
    country: CountryCode
    week: WeekIndex
    delta_ua: float
    share: float
    bound: BoundKind

    def __post_init__(self):
        object.__setattr__(self, 'country', CountryCode(self.country).as_destination())
        if not isinstance(self.bound, BoundKind):
            object.__setattr__(self, 'bound', BoundKind(self.bound))
        for name in ('delta_ua', 'share'):
            value = float(getattr(self, name))
            if not math.isfinite(value):
                raise InputValidationError(f'{self.country}: {name} must be finite')
            object.__setattr__(self, name, value)
