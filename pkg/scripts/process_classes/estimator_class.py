import logging
import math
from dataclasses import dataclass
from typing import Mapping, Optional

import numpy as np
import pandas as pd
from scipy import special

from process_classes.domain_classes import (DEFAULT_EPOCH, ArrivalSeries, BoundKind, CountryCode, DiasporaStock,
                                            FlowEstimate, MauSeries, PenetrationRate, WeekIndex, as_date,
                                            check_count)
from process_classes.errors import InputValidationError

'''

Numerical core of the nowcast. Every function here is a pure function of its arguments:

- penetration adjustment of raw audiences and estimation of the origin country penetration rate
- relative change of the audience scaled onto the official diaspora stock, and each country's share of the total
- max normalization so trends of different magnitude can be compared on one axis
- Pearson correlation with a two sided t-test p-value, used to validate language as a nationality proxy
- weekly change series and the comparison of those against border crossing data

Flow bounds: the lower bound applies the relative change to the raw audience, the upper bound additionally divides
the change by the penetration rate. The envelope of the two is reported so Upper >= Lower holds for any sign.

'''

logger = logging.getLogger(__name__)

# ------------------------------------------------------------------------------------------------------------
# Inputs

@dataclass(frozen=True)
class CorrelationResult:
    r: float
    p_value: float
    n: int

    def __post_init__(self):
        if not -1.0 <= self.r <= 1.0:
            raise InputValidationError(f'correlation outside [-1, 1]: {self.r}')
        if not 0.0 <= self.p_value <= 1.0:
            raise InputValidationError(f'p-value outside [0, 1]: {self.p_value}')
        if self.n < 3:
            raise InputValidationError(f'correlation needs at least 3 pairs, got {self.n}')

    def to_dict(self) -> dict:
        return {'r': self.r, 'p_value': self.p_value, 'n': self.n}


@dataclass(frozen=True, eq=False)
class NormalizedSeries:
    '''Series divided by a normalizer (its own max unless one is supplied). Values are indexed by week'''
    country: Optional[CountryCode]
    values: pd.Series
    normalizer: float

    def __post_init__(self):
        if self.normalizer <= 0 or not math.isfinite(self.normalizer):
            raise InputValidationError(f'normalizer must be a positive number, got {self.normalizer}')
        if np.any(self.values.to_numpy() < 0) or np.any(self.values.to_numpy() > 1):
            raise InputValidationError(f'{self.country}: normalized values must lie in [0, 1]')


@dataclass(frozen=True, eq=False)
class TrendComparison:
    '''Per week table with facebook, unhcr and gap columns plus where the largest gap sits'''
    table: pd.DataFrame
    max_gap: float
    max_gap_week: int


# ------------------------------------------------------------------------------------------------------------
# Functions

def rate_value(rate) -> float:
    '''Penetration rate as a float, accepting PenetrationRate or a bare number'''
    if isinstance(rate, PenetrationRate):
        return rate.rate
    if isinstance(rate, bool) or not isinstance(rate, (int, float, np.integer, np.floating)):
        raise InputValidationError(f'invalid penetration rate: {rate!r}')
    rate = float(rate)
    if not math.isfinite(rate) or rate <= 0 or rate > 1:
        raise InputValidationError(f'penetration rate must be in (0, 1], got {rate}')
    return rate


def adjust_mau(mau, rate) -> float:
    '''Raw audience divided by the platform penetration rate of the country'''
    if isinstance(mau, (float, np.floating)) and math.isfinite(mau) and mau >= 0:
        return float(mau) / rate_value(rate)
    return check_count(mau, 'mau') / rate_value(rate)


def estimate_penetration(mau_prewar:int, population_13plus:int, country=CountryCode('UA')) -> PenetrationRate:
    '''Prewar audience of the origin country over its population old enough to hold an account'''
    mau_prewar = check_count(mau_prewar, 'mau_prewar')
    population_13plus = check_count(population_13plus, 'population_13plus')
    if population_13plus == 0:
        raise InputValidationError('population_13plus must be positive')
    if mau_prewar > population_13plus:
        raise InputValidationError(f'prewar audience {mau_prewar} exceeds the 13+ population {population_13plus}')
    return PenetrationRate(country, mau_prewar / population_13plus)


def delta_ua(stock, mau_now, mau_baseline) -> float:
    '''Stock scaled by the relative audience change since the baseline week'''
    stock_value = stock.stock if isinstance(stock, DiasporaStock) else check_count(stock, 'stock')
    mau_now = check_count(mau_now, 'mau_now')
    mau_baseline = check_count(mau_baseline, 'mau_baseline')
    if mau_baseline == 0:
        raise InputValidationError('baseline audience is 0, relative change is undefined')
    return stock_value * (mau_now - mau_baseline) / mau_baseline


def flow_bounds(stock, mau_now, mau_baseline, rate=None) -> tuple:
    '''(lower, upper) change for one country. Upper is None without a penetration rate'''
    original = delta_ua(stock, mau_now, mau_baseline)
    if rate is None:
        return original, None
    adjusted = original / rate_value(rate)
    return min(original, adjusted), max(original, adjusted)


def shares(deltas:Mapping) -> dict:
    '''Each country's change as a fraction of the summed change'''
    if not deltas:
        raise InputValidationError('no deltas to share out')
    values = {}
    for country, delta in deltas.items():
        delta = float(delta)
        if not math.isfinite(delta):
            raise InputValidationError(f'{country}: delta must be finite')
        values[country] = delta
    total = math.fsum(values.values())
    if total == 0:
        raise InputValidationError('deltas sum to 0, shares are undefined')
    if any(v > 0 for v in values.values()) and any(v < 0 for v in values.values()):
        logger.warning('Deltas have mixed signs; shares can fall outside [0, 1]')
    return {country: delta / total for country, delta in values.items()}


def estimate_flows(stocks:Mapping, baseline:Mapping, target:Mapping, rates:Mapping, week:WeekIndex,
                   weeks:Mapping=None) -> list:
    '''
    Flow estimates for every country in baseline, both bounds. Countries without a penetration rate only get a
    lower bound. stocks, target and baseline must cover the same countries. weeks names the week a country's target
    audience was taken from when it is not week.
    '''
    weeks = weeks or {}
    countries = sorted(baseline)
    missing = [c for c in countries if c not in stocks or c not in target]
    if missing:
        raise InputValidationError(f'no stock or target audience for {", ".join(missing)}')
    lower, upper = {}, {}
    for country in countries:
        low, high = flow_bounds(stocks[country], target[country], baseline[country], rates.get(country))
        lower[country] = low
        if high is not None:
            upper[country] = high

    estimates = []
    for bound, deltas in ((BoundKind.LOWER, lower), (BoundKind.UPPER, upper)):
        if not deltas:
            continue
        for country, share in shares(deltas).items():
            estimates.append(FlowEstimate(country, weeks.get(country, week), deltas[country], share, bound))
    return estimates


def normalize_series(series, normalizer=None, country=None) -> NormalizedSeries:
    '''Divides by the series max, or by an explicit normalizer such as the max of a related series'''
    if isinstance(series, MauSeries):
        country = country or series.country
        values = series.values.astype('float64')
    elif isinstance(series, pd.Series):
        values = series.astype('float64')
    else:
        values = pd.Series(list(series), dtype='float64')
    if len(values) == 0:
        raise InputValidationError('cannot normalize an empty series')
    if values.isna().any():
        raise InputValidationError('cannot normalize a series with missing values')

    if normalizer is None:
        normalizer = float(values.max())
        if normalizer <= 0:
            raise InputValidationError(f'{country}: series max is {normalizer}, give an explicit normalizer')
    else:
        normalizer = float(normalizer)
        if not math.isfinite(normalizer) or normalizer <= 0:
            raise InputValidationError(f'normalizer must be positive, got {normalizer}')

    normalized = values / normalizer
    normalized.name = None if country is None else str(country)
    return NormalizedSeries(CountryCode(country) if country else None, normalized, normalizer)


def pearson(x, y) -> CorrelationResult:
    '''Sample Pearson r with the two sided p-value of the t-test on n - 2 degrees of freedom'''
    x = np.asarray(x, dtype='float64')
    y = np.asarray(y, dtype='float64')
    if x.ndim != 1 or x.shape != y.shape:
        raise InputValidationError(f'x and y must be vectors of the same length, got {x.shape} and {y.shape}')
    n = len(x)
    if n < 3:
        raise InputValidationError(f'correlation needs at least 3 pairs, got {n}')
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise InputValidationError('correlation inputs must be finite')

    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(np.dot(dx, dx))
    syy = float(np.dot(dy, dy))
    if sxx == 0 or syy == 0:
        raise InputValidationError('correlation is undefined for a constant vector')
    r = float(np.dot(dx, dy)) / math.sqrt(sxx * syy)
    r = min(1.0, max(-1.0, r))

    if abs(r) == 1.0:
        p_value = 0.0
    else:
        # P(|T| >= t) for t = r * sqrt(df / (1 - r^2)) is I_{df/(df+t^2)}(df/2, 1/2) and df/(df+t^2) = 1 - r^2
        df = n - 2
        p_value = float(special.betainc(df / 2.0, 0.5, 1.0 - r * r))
        p_value = min(1.0, max(0.0, p_value))
    return CorrelationResult(r, p_value, n)


def weekly_changes(series:MauSeries, cumulative:bool=True) -> pd.Series:
    '''
    Absolute change for every week after w0. Cumulative measures from w0; otherwise each week is measured against
    the previous available week.
    '''
    if len(series) < 2:
        raise InputValidationError(f'{series.country}: weekly change needs at least two weeks')
    if 0 not in series:
        raise InputValidationError(f'{series.country}: series has no baseline week w0')
    values = series.values
    if cumulative:
        changes = values - values.loc[0]
    else:
        changes = values.diff()
    changes = changes[changes.index >= 1]
    if len(changes) == 0:
        raise InputValidationError(f'{series.country}: no weeks after w0')
    changes.name = str(series.country)
    return changes


def arrival_changes(arrivals:ArrivalSeries, weeks, epoch=DEFAULT_EPOCH, cumulative:bool=True) -> pd.Series:
    '''Cumulative arrivals sampled on each week's first day, as change since w0 (or since the previous week)'''
    epoch = as_date(epoch)
    weeks = sorted({int(w) for w in weeks} | {0})
    sampled = pd.Series([arrivals.value_on(WeekIndex(w, epoch).start_date) for w in weeks], index=weeks,
                        dtype='float64')
    sampled.index.name = 'week'
    if cumulative:
        changes = sampled - sampled.loc[0]
    else:
        changes = sampled.diff()
    changes = changes[changes.index >= 1]
    changes.name = str(arrivals.country)
    return changes


def compare_trends(fb:NormalizedSeries, unhcr:NormalizedSeries) -> TrendComparison:
    '''Absolute per-week gap between two normalized trends over the weeks they share'''
    table = pd.concat([fb.values.rename('facebook'), unhcr.values.rename('unhcr')], axis=1, join='inner')
    if table.empty:
        raise InputValidationError(f'{fb.country}: audience and arrival series share no weeks')
    table = table.sort_index()
    table['gap'] = (table['unhcr'] - table['facebook']).abs()
    table.index.name = 'week'
    max_gap_week = int(table['gap'].idxmax())
    return TrendComparison(table, float(table['gap'].max()), max_gap_week)
