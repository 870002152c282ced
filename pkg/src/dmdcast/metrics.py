"""Per-grid-point forecast verification: ACC, delta-ACC and RMSE maps."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import dmd
from .container import expect_consumed, read_container, take, write_container
from .errors import EmptyWindowError, GridMismatchError, InsufficientSamplesError, MalformedHeaderError
from .gridstore import (
    FILL_VALUE,
    _grid_header,
    _read_grid_header,
    default_lats,
    from_month_index,
    from_state_columns,
    month_index,
    to_state_matrix,
)

METRICS = ("acc", "delta_acc", "rmse")


@dataclass(frozen=True, eq=False)
class SkillMap:
    values: np.ndarray  # nlat x nlon, NaN where masked
    mask: np.ndarray  # points carrying a value
    metric: str
    lead_months: int
    n_samples: int
    lats: np.ndarray | None = None

    def __post_init__(self):
        if self.metric not in METRICS:
            raise ValueError(f"unknown metric {self.metric!r}")
        values = np.array(self.values, dtype=np.float64)
        mask = np.array(self.mask, dtype=bool)
        values[~mask] = FILL_VALUE
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "mask", mask)

    def global_mean(self):
        """Cosine-latitude weighted mean over valid points."""
        lats = self.lats if self.lats is not None else default_lats(self.mask.shape[0])
        w = np.broadcast_to(np.cos(np.deg2rad(lats))[:, None], self.mask.shape)
        w = np.where(self.mask, w, 0.0)
        if w.sum() <= 0:
            return float("nan")
        return float(np.sum(w * np.where(self.mask, self.values, 0.0)) / w.sum())


def _aligned(pred, obs):
    if pred.mask.shape != obs.mask.shape or not np.array_equal(pred.mask, obs.mask):
        raise GridMismatchError("prediction and observation grids or masks differ")
    if pred.times != obs.times:
        lo = max(month_index(pred.times[0]), month_index(obs.times[0]))
        hi = min(month_index(pred.times[-1]), month_index(obs.times[-1]))
        if hi < lo:
            raise EmptyWindowError("prediction and observation time axes do not overlap")
        pred = pred.time_slice(from_month_index(lo), from_month_index(hi))
        obs = obs.time_slice(from_month_index(lo), from_month_index(hi))
    return pred.values[:, pred.mask], obs.values[:, obs.mask], pred


def pearson_columns(p, o):
    """Centered correlation of each column pair; NaN where either column is constant."""
    pc = p - p.mean(axis=0)
    oc = o - o.mean(axis=0)
    num = np.einsum("tj,tj->j", pc, oc)
    den = np.sqrt(np.einsum("tj,tj->j", pc, pc) * np.einsum("tj,tj->j", oc, oc))
    out = np.full(p.shape[1], np.nan)
    ok = den > 0
    out[ok] = np.clip(num[ok] / den[ok], -1.0, 1.0)
    return out


def _to_map(template, vec, metric, lead, n):
    field = np.full(template.mask.shape, FILL_VALUE)
    field[template.mask] = vec
    valid = template.mask & np.isfinite(field)
    return SkillMap(values=field, mask=valid, metric=metric, lead_months=lead, n_samples=n, lats=template.lats)


def acc_map(pred, obs, lead_months, per_month=False):
    """Anomaly correlation per grid point over the shared verification times.

    By default every verification time is pooled.  With ``per_month`` the
    correlation is computed separately for each calendar month and averaged.
    Points where either series has zero variance are left out of the mask.
    """
    p, o, ref = _aligned(pred, obs)
    n = p.shape[0]
    if n < 3:
        raise InsufficientSamplesError(f"ACC needs at least 3 samples per point, got {n}")
    if not per_month:
        return _to_map(ref, pearson_columns(p, o), "acc", lead_months, n)
    months = np.array([m for _, m in ref.times])
    parts = []
    for m in range(1, 13):
        sel = months == m
        if sel.sum() < 3:
            raise InsufficientSamplesError(f"calendar month {m} has {sel.sum()} samples; need 3")
        parts.append(pearson_columns(p[sel], o[sel]))
    return _to_map(ref, np.mean(parts, axis=0), "acc", lead_months, n)


def delta_acc_map(acc_model, acc_baseline):
    if acc_model.metric != "acc" or acc_baseline.metric != "acc":
        raise GridMismatchError("delta ACC needs two ACC maps")
    if acc_model.mask.shape != acc_baseline.mask.shape:
        raise GridMismatchError("ACC maps are on different grids")
    if acc_model.lead_months != acc_baseline.lead_months:
        raise GridMismatchError(
            f"lead mismatch: {acc_model.lead_months} vs {acc_baseline.lead_months} months"
        )
    mask = acc_model.mask & acc_baseline.mask
    values = np.where(mask, acc_model.values - acc_baseline.values, FILL_VALUE)
    return SkillMap(values=values, mask=mask, metric="delta_acc", lead_months=acc_model.lead_months,
                    n_samples=min(acc_model.n_samples, acc_baseline.n_samples), lats=acc_model.lats)


def rmse_map(pred, obs, lead_months=0):
    p, o, ref = _aligned(pred, obs)
    rmse = np.sqrt(np.mean((p - o) ** 2, axis=0))
    return _to_map(ref, rmse, "rmse", lead_months, p.shape[0])


def rolling_forecast_set(model, obs, lead_months, verify_start=None, verify_end=None):
    """Forecasts at a fixed lead from every admissible initialization time.

    ``model`` is anything with ``forecast(x0_block, n)`` on D x B blocks
    (:class:`~dmdcast.dmd.DmdModel` is adapted automatically).  The output is
    indexed by verification time, restricted to ``[verify_start, verify_end]``
    when given.
    """
    if lead_months < 1:
        raise ValueError("lead_months must be >= 1")
    states = to_state_matrix(obs)
    t0 = month_index(obs.times[0])
    lo = lead_months if verify_start is None else max(lead_months, month_index(verify_start) - t0)
    hi = obs.ntime - 1 if verify_end is None else min(obs.ntime - 1, month_index(verify_end) - t0)
    if hi < lo:
        raise EmptyWindowError(
            f"no verification time has an observed initial state {lead_months} months earlier"
        )
    init = states.data[:, lo - lead_months:hi - lead_months + 1]
    if isinstance(model, dmd.DmdModel):
        pred = dmd.forecast(model, init, lead_months)
    else:
        pred = model.forecast(init, lead_months)
    return from_state_columns(pred, states, obs.times[lo:hi + 1], variable=obs.variable, units=obs.units)


# -- container I/O -----------------------------------------------------------------

def save_skill_map(skill, path):
    header = _grid_header("skill_map", skill.mask, skill.lats)
    header.update(metric=skill.metric, lead_months=int(skill.lead_months), n_samples=int(skill.n_samples))
    write_container(path, header, [skill.values])


def load_skill_map(path):
    header, payload = read_container(path, kind="skill_map")
    mask, lats = _read_grid_header(header)
    values, off = take(payload, 0, mask.shape)
    expect_consumed(payload, off)
    try:
        return SkillMap(values=values.astype(np.float64), mask=mask, metric=header["metric"],
                        lead_months=int(header["lead_months"]), n_samples=int(header["n_samples"]), lats=lats)
    except (KeyError, ValueError) as exc:
        raise MalformedHeaderError(f"bad skill map header: {exc}") from exc

