"""Gridded monthly series: container I/O, climatology, anomalies, state vectors.

Values are held as float64 in memory and stored as float32 on disk.  Masked
points hold NaN in both places and are never touched by arithmetic; the
boolean mask is authoritative.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .container import (
    expect_consumed,
    mask_to_rle,
    read_container,
    rle_to_mask,
    take,
    write_container,
)
from .errors import (
    DataError,
    DimensionMismatchError,
    GridMismatchError,
    MalformedHeaderError,
    TimeAxisError,
    WindowError,
)

FILL_VALUE = np.nan


# -- monthly time axis helpers -------------------------------------------------

def month_index(ym):
    year, month = ym
    return int(year) * 12 + int(month) - 1


def from_month_index(i):
    return (i // 12, i % 12 + 1)


def month_range(start, n):
    s = month_index(start)
    return [from_month_index(s + i) for i in range(n)]


def parse_month(text):
    """Parse ``YYYY-MM`` into a ``(year, month)`` tuple."""
    try:
        y, m = text.split("-")
        ym = (int(y), int(m))
    except ValueError as exc:
        raise ValueError(f"expected YYYY-MM, got {text!r}") from exc
    if not 1 <= ym[1] <= 12:
        raise ValueError(f"month out of range in {text!r}")
    return ym


def format_month(ym):
    return f"{ym[0]:04d}-{ym[1]:02d}"


def _check_times(times):
    if len(times) < 1:
        raise TimeAxisError("time axis is empty")
    idx = [month_index(t) for t in times]
    for t in times:
        if not 1 <= t[1] <= 12:
            raise TimeAxisError(f"invalid month in {t}")
    steps = np.diff(idx)
    if np.any(steps <= 0):
        raise TimeAxisError("time axis is not strictly increasing")
    if np.any(steps != 1):
        raise TimeAxisError("time axis has gaps (steps must be one month)")


def _frozen(a):
    a = np.array(a, dtype=np.float64)
    a.flags.writeable = False
    return a


def default_lats(nlat):
    """Cell-centre latitudes of an equally spaced global grid, south to north."""
    step = 180.0 / nlat
    return -90.0 + step * (np.arange(nlat) + 0.5)


# -- domain types ---------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class GridSeries:
    values: np.ndarray  # T x nlat x nlon, NaN at masked points
    mask: np.ndarray  # nlat x nlon, True = valid
    times: tuple
    variable: str = "anomaly"
    units: str = ""
    lats: np.ndarray | None = None

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if values.ndim != 3:
            raise DimensionMismatchError(f"values must be 3-D, got shape {values.shape}")
        if mask.shape != values.shape[1:]:
            raise DimensionMismatchError(
                f"mask shape {mask.shape} does not match grid {values.shape[1:]}"
            )
        times = tuple((int(y), int(m)) for y, m in self.times)
        if len(times) != values.shape[0]:
            raise DimensionMismatchError(
                f"{len(times)} time stamps for {values.shape[0]} slices"
            )
        _check_times(times)
        values[:, ~mask] = FILL_VALUE
        values.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "times", times)
        if self.lats is not None:
            lats = _frozen(self.lats)
            if lats.shape != (mask.shape[0],):
                raise DimensionMismatchError("lats must have one entry per grid row")
            object.__setattr__(self, "lats", lats)

    @property
    def nlat(self):
        return self.mask.shape[0]

    @property
    def nlon(self):
        return self.mask.shape[1]

    @property
    def ntime(self):
        return len(self.times)

    def latitudes(self):
        return self.lats if self.lats is not None else default_lats(self.nlat)

    def same_grid(self, other):
        return self.mask.shape == other.mask.shape and bool(np.array_equal(self.mask, other.mask))

    def time_slice(self, start, end):
        """Sub-series for the inclusive window ``[start, end]``."""
        i0 = month_index(start) - month_index(self.times[0])
        i1 = month_index(end) - month_index(self.times[0])
        if i0 < 0 or i1 >= self.ntime or i1 < i0:
            raise WindowError(
                f"window {format_month(start)}..{format_month(end)} is outside "
                f"{format_month(self.times[0])}..{format_month(self.times[-1])}"
            )
        return self.replace(values=self.values[i0:i1 + 1], times=self.times[i0:i1 + 1])

    def replace(self, **changes):
        kw = dict(values=self.values, mask=self.mask, times=self.times,
                  variable=self.variable, units=self.units, lats=self.lats)
        kw.update(changes)
        return GridSeries(**kw)

    def equals(self, other):
        """Exact equality of values (NaN-aware) and metadata."""
        same_lats = (self.lats is None and other.lats is None) or (
            self.lats is not None and other.lats is not None
            and np.array_equal(self.lats, other.lats))
        return (
            self.times == other.times
            and self.variable == other.variable
            and self.units == other.units
            and same_lats
            and np.array_equal(self.mask, other.mask)
            and np.array_equal(self.values, other.values, equal_nan=True)
        )


@dataclass(frozen=True, eq=False)
class Climatology:
    monthly_means: np.ndarray  # 12 x nlat x nlon, index 0 = January
    mask: np.ndarray
    ref_start: tuple
    ref_end: tuple
    lats: np.ndarray | None = None

    def __post_init__(self):
        means = np.array(self.monthly_means, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        if means.shape != (12,) + mask.shape:
            raise DimensionMismatchError(
                f"monthly_means must be 12 x {mask.shape}, got {means.shape}"
            )
        means[:, ~mask] = FILL_VALUE
        means.flags.writeable = False
        mask.flags.writeable = False
        object.__setattr__(self, "monthly_means", means)
        object.__setattr__(self, "mask", mask)
        object.__setattr__(self, "ref_start", tuple(int(v) for v in self.ref_start))
        object.__setattr__(self, "ref_end", tuple(int(v) for v in self.ref_end))

    @property
    def nlat(self):
        return self.mask.shape[0]

    @property
    def nlon(self):
        return self.mask.shape[1]


@dataclass(frozen=True, eq=False)
class StateMatrix:
    data: np.ndarray  # D x T
    point_index: np.ndarray  # D x 2 (lat index, lon index)
    times: tuple
    mask: np.ndarray
    lats: np.ndarray | None = field(default=None)

    @property
    def n_state(self):
        return self.data.shape[0]

    @property
    def ntime(self):
        return self.data.shape[1]

    @classmethod
    def from_array(cls, data, start=(2000, 1)):
        """Wrap a bare D x T array as a 1 x D grid, e.g. for synthetic tests."""
        data = np.asarray(data, dtype=np.float64)
        d, t = data.shape
        mask = np.ones((1, d), dtype=bool)
        return cls(data=data, point_index=np.argwhere(mask), times=tuple(month_range(start, t)), mask=mask)


# -- container I/O --------------------------------------------------------------

def _grid_header(kind, mask, lats):
    return {
        "kind": kind,
        "nlat": int(mask.shape[0]),
        "nlon": int(mask.shape[1]),
        "mask_rle": mask_to_rle(mask),
        "fill_value": "NaN",
        "lats": None if lats is None else [float(v) for v in lats],
    }


def _read_grid_header(header):
    try:
        nlat, nlon = int(header["nlat"]), int(header["nlon"])
        mask_rle = header["mask_rle"]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"missing grid field: {exc}") from exc
    if nlat < 1 or nlon < 1:
        raise MalformedHeaderError("grid dimensions must be positive")
    mask = rle_to_mask(mask_rle, (nlat, nlon))
    lats = header.get("lats")
    if lats is not None and len(lats) != nlat:
        raise DimensionMismatchError("lats length does not match nlat")
    return mask, (None if lats is None else np.asarray(lats, dtype=np.float64))


def save_grid_series(series, path):
    """Write ``series`` to ``path``; values are rounded to float32."""
    header = _grid_header("grid_series", series.mask, series.lats)
    header.update(
        variable=series.variable,
        units=series.units,
        ntime=series.ntime,
        times=[list(t) for t in series.times],
    )
    write_container(path, header, [series.values])


def load_grid_series(path):
    header, payload = read_container(path, kind="grid_series")
    mask, lats = _read_grid_header(header)
    try:
        ntime = int(header["ntime"])
        times = [(int(y), int(m)) for y, m in header["times"]]
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedHeaderError(f"bad time axis: {exc}") from exc
    if len(times) != ntime:
        raise DimensionMismatchError(f"header declares ntime={ntime} but lists {len(times)} times")
    if ntime < 2:
        raise DimensionMismatchError("a grid series needs at least two time slices")
    _check_times(times)
    values, off = take(payload, 0, (ntime,) + mask.shape)
    expect_consumed(payload, off)
    return GridSeries(values=values.astype(np.float64), mask=mask, times=times,
                      variable=str(header.get("variable", "")), units=str(header.get("units", "")),
                      lats=lats)


def save_climatology(clim, path):
    header = _grid_header("climatology", clim.mask, clim.lats)
    header.update(ref_start=list(clim.ref_start), ref_end=list(clim.ref_end))
    write_container(path, header, [clim.monthly_means])


def load_climatology(path):
    header, payload = read_container(path, kind="climatology")
    mask, lats = _read_grid_header(header)
    means, off = take(payload, 0, (12,) + mask.shape)
    expect_consumed(payload, off)
    try:
        ref_start, ref_end = tuple(header["ref_start"]), tuple(header["ref_end"])
    except KeyError as exc:
        raise MalformedHeaderError(f"missing {exc}") from exc
    return Climatology(monthly_means=means.astype(np.float64), mask=mask,
                       ref_start=ref_start, ref_end=ref_end, lats=lats)


# -- preprocessing --------------------------------------------------------------

def compute_monthly_climatology(series, ref_start, ref_end):
    """Per-calendar-month mean over the inclusive reference window."""
    window = series.time_slice(ref_start, ref_end)
    months = np.array([m for _, m in window.times])
    vals = window.values[:, window.mask]
    means = np.full((12,) + series.mask.shape, FILL_VALUE)
    for m in range(1, 13):
        sel = months == m
        if not sel.any():
            raise WindowError(
                f"calendar month {m} has no samples in "
                f"{format_month(ref_start)}..{format_month(ref_end)}"
            )
        means[m - 1][series.mask] = vals[sel].sum(axis=0) / sel.sum()
    return Climatology(monthly_means=means, mask=series.mask,
                       ref_start=ref_start, ref_end=ref_end, lats=series.lats)


def _check_clim(series, clim):
    if clim.mask.shape != series.mask.shape:
        raise GridMismatchError(
            f"climatology grid {clim.mask.shape} does not match series grid {series.mask.shape}"
        )
    if not np.array_equal(clim.mask, series.mask):
        raise GridMismatchError("climatology mask does not match series mask")


def compute_anomalies(series, clim):
    _check_clim(series, clim)
    idx = np.array([m - 1 for _, m in series.times])
    out = np.full(series.values.shape, FILL_VALUE)
    out[:, series.mask] = series.values[:, series.mask] - clim.monthly_means[idx][:, series.mask]
    return series.replace(values=out, variable=series.variable + "_anomaly")


def add_climatology(anomalies, clim):
    """Inverse of :func:`compute_anomalies`."""
    _check_clim(anomalies, clim)
    idx = np.array([m - 1 for _, m in anomalies.times])
    out = np.full(anomalies.values.shape, FILL_VALUE)
    out[:, anomalies.mask] = anomalies.values[:, anomalies.mask] + clim.monthly_means[idx][:, anomalies.mask]
    name = anomalies.variable
    if name.endswith("_anomaly"):
        name = name[: -len("_anomaly")]
    return anomalies.replace(values=out, variable=name)


def to_state_matrix(series):
    if not series.mask.any():
        raise DataError("mask has no valid points")
    point_index = np.argwhere(series.mask)
    data = series.values[:, series.mask].T.copy()
    return StateMatrix(data=data, point_index=point_index, times=series.times,
                       mask=series.mask, lats=series.lats)


def from_state_vector(vec, template):
    vec = np.asarray(vec, dtype=np.float64)
    if vec.shape != (template.n_state,):
        raise DimensionMismatchError(
            f"vector has shape {vec.shape}, template expects ({template.n_state},)"
        )
    field2d = np.full(template.mask.shape, FILL_VALUE)
    field2d[template.point_index[:, 0], template.point_index[:, 1]] = vec
    return field2d


def from_state_columns(data, template, times, variable="anomaly", units=""):
    """Scatter every column of a D x T block back into a :class:`GridSeries`."""
    data = np.asarray(data, dtype=np.float64)
    if data.shape[0] != template.n_state:
        raise DimensionMismatchError(
            f"block has {data.shape[0]} rows, template expects {template.n_state}"
        )
    values = np.full((data.shape[1],) + template.mask.shape, FILL_VALUE)
    values[:, template.point_index[:, 0], template.point_index[:, 1]] = data.T
    return GridSeries(values=values, mask=template.mask, times=times,
                      variable=variable, units=units, lats=template.lats)
