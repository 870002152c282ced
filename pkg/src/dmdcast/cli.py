"""Command-line pipeline: synth, prepare, fit-dmd, train, forecast, evaluate, render.

Exit codes: 0 success, 2 usage, 3 container/file errors, 4 data errors
(windows, grids, sample counts), 5 numerical failures (rank, divergence).
"""

from __future__ import annotations

import argparse
import datetime as _dt
import hashlib
import json
import math
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, dmd, gridstore, metrics, plotting, resdmd, synth
from .container import read_container
from .errors import DmdcastError, EmptyWindowError, GridMismatchError, MalformedHeaderError, WindowError


# -- small helpers ----------------------------------------------------------------

def _month(text):
    try:
        return gridstore.parse_month(text)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from exc


def _month_range(text):
    try:
        a, b = text.split(":")
        return gridstore.parse_month(a), gridstore.parse_month(b)
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected YYYY-MM:YYYY-MM, got {text!r}") from exc


def _positive_int(text):
    v = int(text)
    if v < 1:
        raise argparse.ArgumentTypeError(f"must be >= 1, got {v}")
    return v


def _int_list(text):
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from exc


def _float_list(text):
    try:
        return [float(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from exc


def _default_seed():
    return int(os.environ.get("RESDMD_SEED", "0"))


def _digest(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _timestamp():
    epoch = os.environ.get("SOURCE_DATE_EPOCH")
    when = _dt.datetime.fromtimestamp(int(epoch), _dt.timezone.utc) if epoch else _dt.datetime.now(_dt.timezone.utc)
    return when.strftime("%Y-%m-%dT%H:%M:%SZ")


def _jsonable(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, tuple):
        return [_jsonable(x) for x in v]
    if isinstance(v, list):
        return [_jsonable(x) for x in v]
    return v


def write_manifest(path, args, inputs, outputs, seed=None):
    params = {k: _jsonable(v) for k, v in sorted(vars(args).items()) if k not in ("func",)}
    manifest = {
        "command": args.command,
        "params": params,
        "inputs": {str(p): _digest(p) for p in inputs},
        "outputs": [os.path.basename(str(p)) for p in outputs],
        "seed": seed,
        "version": __version__,
        "created": _timestamp(),
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_model(path, cap=False):
    header, _ = read_container(path)
    kind = header.get("kind")
    if kind == "dmd_model":
        model = dmd.load_dmd(path)
        return dmd.cap_modulus(model) if cap else model
    if kind == "resdmd_checkpoint":
        return resdmd.load_checkpoint(path)
    raise MalformedHeaderError(f"{path} is not a model file (kind={kind!r})")


def _check_model_grid(model, series):
    if model.mask is not None and (
        model.mask.shape != series.mask.shape or not np.array_equal(model.mask, series.mask)
    ):
        raise GridMismatchError("model was fit on a different grid or mask")
    if model.n_state != int(series.mask.sum()):
        raise GridMismatchError(
            f"model state size {model.n_state} does not match {int(series.mask.sum())} valid points"
        )


# -- commands ---------------------------------------------------------------------

def cmd_synth(args):
    d = args.nlat * args.nlon
    eigs = tuple(args.eigenvalues)
    k = len(eigs) if args.kind == "linear_diag" else 2
    spec = synth.SynthSpec(kind=args.kind, k=k, eigenvalues=eigs, theta=args.theta, radius=args.radius,
                           r0=args.r0, gamma=args.gamma, D=d, noise_std=args.noise, T=args.T,
                           seed=args.seed, amplitude=args.amplitude, init_seed=args.init_seed)
    states = synth.generate(spec)
    series = synth.to_grid_series(states, args.nlat, args.nlon, start=args.start,
                                  variable=args.variable, seasonal=args.seasonal)
    gridstore.save_grid_series(series, args.out)
    write_manifest(f"{args.out}.manifest.json", args, [], [args.out], seed=args.seed)
    print(f"wrote {args.out}: {series.ntime} months on a {args.nlat}x{args.nlon} grid")
    return 0


def cmd_prepare(args):
    raw = gridstore.load_grid_series(args.input)
    clim = gridstore.compute_monthly_climatology(raw, args.clim_start, args.clim_end)
    anom = gridstore.compute_anomalies(raw, clim)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = [out / "climatology.clim", out / "anomalies.grid"]
    gridstore.save_climatology(clim, written[0])
    gridstore.save_grid_series(anom, written[1])
    for name, rng in (("train", args.train_range), ("test", args.test_range)):
        if rng is None:
            continue
        part = anom.time_slice(*rng)
        gridstore.save_grid_series(part, out / f"{name}.grid")
        written.append(out / f"{name}.grid")
        print(f"{name}: {part.ntime} months ({gridstore.format_month(rng[0])}..{gridstore.format_month(rng[1])})")
    write_manifest(out / "manifest.json", args, [args.input], written)
    print(f"anomalies: {anom.ntime} months, climatology "
          f"{gridstore.format_month(args.clim_start)}..{gridstore.format_month(args.clim_end)}")
    return 0


def cmd_fit_dmd(args):
    series = gridstore.load_grid_series(args.train)
    states = gridstore.to_state_matrix(series)
    model = dmd.fit_dmd(states, args.rank)
    dmd.save_dmd(model, args.out)
    report_path = f"{args.out}.svd.tsv"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write("index\tsigma\tenergy_fraction\tcumulative\n")
        for i, s, f, c in dmd.singular_value_report(model):
            fh.write(f"{i}\t{s!r}\t{f!r}\t{c!r}\n")
    spec_path = f"{args.out}.modes.tsv"
    with open(spec_path, "w", encoding="utf-8") as fh:
        fh.write("mode\teig_real\teig_imag\tmodulus\tdecay_months\tperiod_months\tenergy\n")
        for i, m in enumerate(dmd.spectrum(model), 1):
            fh.write(f"{i}\t{m.eigenvalue.real!r}\t{m.eigenvalue.imag!r}\t{m.modulus!r}\t"
                     f"{m.decay_months!r}\t{m.period_months!r}\t{m.energy!r}\n")
    write_manifest(f"{args.out}.manifest.json", args, [args.train], [args.out, report_path, spec_path])
    rows = dmd.singular_value_report(model)
    print(f"rank {args.rank}: captures {rows[args.rank - 1][3]:.4f} of snapshot energy")
    for i, s, f, c in rows[: max(args.rank + 2, 5)]:
        print(f"  sigma_{i:<3d} {s:12.5g}  energy {f:8.4f}  cumulative {c:8.4f}")
    return 0


def cmd_train(args):
    base = dmd.load_dmd(args.dmd)
    train_series = gridstore.load_grid_series(args.train)
    _check_model_grid(base, train_series)
    x_train = gridstore.to_state_matrix(train_series)
    x_val = None
    inputs = [args.dmd, args.train]
    if args.val:
        val_series = gridstore.load_grid_series(args.val)
        _check_model_grid(base, val_series)
        x_val = gridstore.to_state_matrix(val_series)
        inputs.append(args.val)
    spec = resdmd.MlpSpec(hidden=None if args.hidden is None else tuple(args.hidden), activation=args.activation)
    cfg = resdmd.TrainConfig(learning_rate=args.lr, momentum=args.momentum, batch_size=args.batch_size,
                             epochs=args.epochs, rollout_steps=args.rollout, seed=args.seed,
                             loss_space=args.loss_space)
    cfg.validate()
    model = resdmd.init_from_dmd(base, spec, eps=args.eps, seed=args.seed)
    trained, history = resdmd.train(model, x_train, x_val, cfg)
    resdmd.save_checkpoint(trained, args.out, cfg)
    hist_path = args.history or f"{args.out}.history.tsv"
    with open(hist_path, "w", encoding="utf-8") as fh:
        fh.write(history.to_table(timings=args.timings))
    outputs = [args.out, hist_path]
    if args.figure:
        plotting.plot_history(history, args.figure)
        outputs.append(args.figure)
    write_manifest(f"{args.out}.manifest.json", args, inputs, outputs, seed=args.seed)
    final = history.train_loss[-1] if history.train_loss else history.initial_loss
    print(f"trained {cfg.epochs} epochs: loss {history.initial_loss:.6g} -> {final:.6g}")
    return 0


def cmd_forecast(args):
    model = load_model(args.model, cap=args.cap_modulus)
    obs = gridstore.load_grid_series(args.obs)
    _check_model_grid(model, obs)
    if args.rolling:
        pred = metrics.rolling_forecast_set(model, obs, args.rolling)
    else:
        init = args.init or obs.times[-1]
        states = gridstore.to_state_matrix(obs)
        t = gridstore.month_index(init) - gridstore.month_index(obs.times[0])
        if not 0 <= t < obs.ntime:
            raise WindowError(f"initial month {gridstore.format_month(init)} is not in the observations")
        x0 = states.data[:, t:t + 1]
        if isinstance(model, dmd.DmdModel):
            cols = [dmd.forecast(model, x0, n)[:, 0] for n in range(1, args.steps + 1)]
        else:
            cols = [model.forecast(x0, n)[:, 0] for n in range(1, args.steps + 1)]
        times = gridstore.month_range(gridstore.from_month_index(gridstore.month_index(init) + 1), args.steps)
        pred = gridstore.from_state_columns(np.stack(cols, axis=1), states, times,
                                            variable=obs.variable, units=obs.units)
    gridstore.save_grid_series(pred, args.out)
    write_manifest(f"{args.out}.manifest.json", args, [args.model, args.obs], [args.out])
    print(f"wrote {args.out}: {pred.ntime} forecast months "
          f"{gridstore.format_month(pred.times[0])}..{gridstore.format_month(pred.times[-1])}")
    return 0


def _parse_baselines(items):
    out = {}
    for item in items or []:
        try:
            lead, path = item.split("=", 1)
            out[int(lead)] = path
        except ValueError as exc:
            raise argparse.ArgumentTypeError(f"--baseline expects LEAD=PATH, got {item!r}") from exc
    return out


def cmd_evaluate(args):
    model = load_model(args.model, cap=args.cap_modulus)
    obs = gridstore.load_grid_series(args.obs)
    _check_model_grid(model, obs)
    baselines = _parse_baselines(args.baseline)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    inputs = [args.model, args.obs] + [baselines[k] for k in sorted(baselines)]
    written, rows, plot_rows = [], [], []
    label = args.label or ("dmd" if isinstance(model, dmd.DmdModel) else "resdmd")
    for lead in args.leads:
        pred = metrics.rolling_forecast_set(model, obs, lead, args.verify_start, args.verify_end)
        acc = metrics.acc_map(pred, obs, lead, per_month=args.per_month)
        path = out / f"acc_lead{lead:03d}.skill"
        metrics.save_skill_map(acc, path)
        written.append(path)
        rows.append((lead, "acc", acc.global_mean(), acc.n_samples))
        plot_rows.append((lead, label, acc.global_mean()))
        if args.save_predictions:
            ppath = out / f"pred_lead{lead:03d}.grid"
            gridstore.save_grid_series(pred, ppath)
            written.append(ppath)
        if args.rmse:
            rm = metrics.rmse_map(pred, obs, lead)
            rpath = out / f"rmse_lead{lead:03d}.skill"
            metrics.save_skill_map(rm, rpath)
            written.append(rpath)
            rows.append((lead, "rmse", rm.global_mean(), rm.n_samples))
        if args.figures:
            fpath = out / f"acc_lead{lead:03d}.png"
            plotting.plot_skill_map(acc, fpath, title=f"{label} ACC, lead {lead} months")
            written.append(fpath)
        if lead in baselines:
            base_pred = gridstore.load_grid_series(baselines[lead])
            if not base_pred.same_grid(obs):
                raise GridMismatchError(f"baseline for lead {lead} is on a different grid")
            lo = max(gridstore.month_index(pred.times[0]), gridstore.month_index(base_pred.times[0]))
            hi = min(gridstore.month_index(pred.times[-1]), gridstore.month_index(base_pred.times[-1]))
            if hi < lo:
                raise EmptyWindowError(f"baseline for lead {lead} does not overlap the verification window")
            window = (gridstore.from_month_index(lo), gridstore.from_month_index(hi))
            acc_m = metrics.acc_map(pred.time_slice(*window), obs, lead, per_month=args.per_month)
            acc_b = metrics.acc_map(base_pred.time_slice(*window), obs, lead, per_month=args.per_month)
            delta = metrics.delta_acc_map(acc_m, acc_b)
            dpath = out / f"dacc_lead{lead:03d}.skill"
            metrics.save_skill_map(delta, dpath)
            written.append(dpath)
            rows.append((lead, "delta_acc", delta.global_mean(), delta.n_samples))
            plot_rows.append((lead, "baseline", acc_b.global_mean()))
            if args.figures:
                fpath = out / f"dacc_lead{lead:03d}.png"
                plotting.plot_skill_map(delta, fpath, title=f"{label} ΔACC vs baseline, lead {lead} months")
                written.append(fpath)
    summary = out / "summary.tsv"
    with open(summary, "w", encoding="utf-8") as fh:
        fh.write("lead_months\tmetric\tglobal_mean\tn_samples\n")
        for lead, metric, value, n in rows:
            fh.write(f"{lead}\t{metric}\t{value:.6f}\t{n}\n")
    written.append(summary)
    if args.figures and len(args.leads) > 1:
        fpath = out / "acc_by_lead.png"
        plotting.plot_lead_summary(plot_rows, fpath)
        written.append(fpath)
    write_manifest(out / "manifest.json", args, inputs, written)
    for lead, metric, value, n in rows:
        print(f"lead {lead:3d}  {metric:9s}  area-weighted mean {value: .4f}  (n={n})")
    return 0


def cmd_render(args):
    if not (math.isfinite(args.vmin) and math.isfinite(args.vmax)) or args.vmin >= args.vmax:
        raise argparse.ArgumentTypeError(f"invalid color range [{args.vmin}, {args.vmax}]")
    skill = metrics.load_skill_map(args.input)
    rgb = plotting.skill_image(skill, args.vmin, args.vmax, scale=args.scale)
    plotting.write_ppm(rgb, args.out)
    outputs = [args.out]
    if args.png:
        plotting.plot_skill_map(skill, args.png, args.vmin, args.vmax)
        outputs.append(args.png)
    write_manifest(f"{args.out}.manifest.json", args, [args.input], outputs)
    print(f"wrote {args.out} ({rgb.shape[1]}x{rgb.shape[0]} pixels)")
    return 0


# -- parser -----------------------------------------------------------------------

def build_parser():
    p = argparse.ArgumentParser(prog="dmdcast", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset container")
    s.add_argument("--kind", choices=synth.KINDS, default="rotation")
    s.add_argument("--eigenvalues", type=_float_list, default=[0.9, 0.5], help="linear_diag multipliers")
    s.add_argument("--theta", type=float, default=math.pi / 6, help="rotation angle per month (radians)")
    s.add_argument("--radius", type=float, default=1.0)
    s.add_argument("--r0", type=float, default=0.98)
    s.add_argument("--gamma", type=float, default=-0.05)
    s.add_argument("--nlat", type=_positive_int, default=4)
    s.add_argument("--nlon", type=_positive_int, default=4)
    s.add_argument("--T", type=_positive_int, default=480)
    s.add_argument("--noise", type=float, default=0.0)
    s.add_argument("--amplitude", type=float, default=1.0)
    s.add_argument("--init-seed", type=int, default=None)
    s.add_argument("--seasonal", type=float, default=0.0, help="amplitude of an added annual cycle")
    s.add_argument("--start", type=_month, default=(1980, 1))
    s.add_argument("--variable", default="synthetic")
    s.add_argument("--seed", type=int, default=_default_seed())
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="climatology, anomalies and train/test splits")
    s.add_argument("--input", required=True)
    s.add_argument("--clim-start", type=_month, required=True)
    s.add_argument("--clim-end", type=_month, required=True)
    s.add_argument("--train-range", type=_month_range)
    s.add_argument("--test-range", type=_month_range)
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("fit-dmd", help="fit a truncated exact DMD model")
    s.add_argument("--train", required=True)
    s.add_argument("--rank", type=_positive_int, required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_fit_dmd)

    s = sub.add_parser("train", help="initialize ResDMD from a DMD model and train it")
    s.add_argument("--dmd", required=True)
    s.add_argument("--train", required=True)
    s.add_argument("--val")
    s.add_argument("--out", required=True)
    s.add_argument("--history")
    s.add_argument("--figure", help="optional PNG of the loss curve")
    s.add_argument("--epochs", type=int, default=200)
    s.add_argument("--lr", type=float, default=resdmd.TrainConfig.learning_rate)
    s.add_argument("--momentum", type=float, default=resdmd.TrainConfig.momentum)
    s.add_argument("--batch-size", type=_positive_int, default=resdmd.TrainConfig.batch_size)
    s.add_argument("--rollout", type=_positive_int, default=1)
    s.add_argument("--loss-space", choices=("state", "latent"), default="state")
    s.add_argument("--hidden", type=_int_list, default=None, help="hidden widths, e.g. 8,8")
    s.add_argument("--activation", choices=resdmd.ACTIVATIONS, default="tanh")
    s.add_argument("--eps", type=float, default=1e-3)
    s.add_argument("--seed", type=int, default=_default_seed())
    s.add_argument("--timings", action="store_true", help="add wall-clock seconds to the history table")
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("forecast", help="multi-step forecast from one month, or a rolling set")
    s.add_argument("--model", required=True)
    s.add_argument("--obs", required=True)
    s.add_argument("--init", type=_month, help="initial month (default: last observed)")
    s.add_argument("--steps", type=_positive_int, default=12)
    s.add_argument("--rolling", type=_positive_int, help="write rolling forecasts at this lead instead")
    s.add_argument("--cap-modulus", action="store_true", help="clip DMD eigenvalue moduli at 1")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_forecast)

    s = sub.add_parser("evaluate", help="ACC (and delta-ACC) maps per lead")
    s.add_argument("--model", required=True)
    s.add_argument("--obs", required=True, help="observed anomalies covering init and verification months")
    s.add_argument("--leads", type=_int_list, default=[1, 6, 12])
    s.add_argument("--verify-start", type=_month)
    s.add_argument("--verify-end", type=_month)
    s.add_argument("--baseline", action="append", metavar="LEAD=PATH",
                   help="baseline anomaly forecasts for one lead; repeatable")
    s.add_argument("--per-month", action="store_true", help="average per-calendar-month ACC instead of pooling")
    s.add_argument("--rmse", action="store_true")
    s.add_argument("--save-predictions", action="store_true")
    s.add_argument("--figures", action="store_true", help="also write PNG maps")
    s.add_argument("--cap-modulus", action="store_true")
    s.add_argument("--label")
    s.add_argument("--out-dir", required=True)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("render", help="render a skill map as a PPM heatmap")
    s.add_argument("--input", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--vmin", type=float, default=-1.0)
    s.add_argument("--vmax", type=float, default=1.0)
    s.add_argument("--scale", type=_positive_int, default=4, help="pixels per grid cell")
    s.add_argument("--png", help="also write a matplotlib figure")
    s.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except argparse.ArgumentTypeError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except DmdcastError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
