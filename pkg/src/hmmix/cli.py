"""Command-line driver: ``hmmix <subcommand> [--config PATH] [--set key=value ...]``.

Exit status is 0 on success, 1 when a risk report contains invalid cells and
2 on configuration errors.
"""

from __future__ import annotations

import argparse
import logging
import math
import sys
from pathlib import Path

from . import estimators as est
from . import files
from . import harness
from .model import DomainError, ModelConfig, gen_dataset

log = logging.getLogger("hmmix")

MODEL_KEYS = ("d", "n", "delta", "theta_norm", "theta_mode", "noise", "seed")
ESTIMATE_KEYS = ("variant", "delta", "theta_norm", "theta_norm_sq", "C")
RISK_KEYS = ("n", "d", "delta", "theta_norm_sq", "estimator", "trials", "C", "noise",
             "theta_mode")
SWEEP_KEYS = ("n", "d", "delta", "theta_norm_sq", "estimators", "trials", "C", "noise",
              "theta_mode")
CALIBRATE_KEYS = ("n", "d", "delta", "theta_norm_sq", "trials", "noise", "theta_mode",
                  "candidates", "level", "C")
RATES_KEYS = ("n", "d", "delta", "theta_norm_sq")
CONCENTRATION_KEYS = ("ell", "delta", "n", "trials", "d")


class ConfigError(Exception):
    pass


def _as_list(value):
    return list(value) if isinstance(value, list) else [value]


def _gather(args, allowed, defaults=None) -> dict:
    """Defaults, then the config file, then ``--set`` overrides; unknown keys are errors."""
    values = dict(defaults or {})
    if args.config:
        try:
            loaded = files.load_config(args.config)
        except (OSError, files.FormatError) as exc:
            raise ConfigError(str(exc)) from exc
        values.update(loaded)
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, value = item.split("=", 1)
        values[key.strip()] = files.parse_value(value)
    unknown = sorted(set(values) - set(allowed))
    if unknown:
        raise ConfigError(f"unknown key(s): {', '.join(unknown)}; accepted: {', '.join(allowed)}")
    return values


def _need(values, key, kind):
    if key not in values:
        raise ConfigError(f"missing required key '{key}'")
    value = values[key]
    try:
        if kind is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError
            return int(value)
        return kind(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key '{key}' has invalid value {value!r}") from None


def _need_list(values, key, kind):
    if key not in values:
        raise ConfigError(f"missing required key '{key}'")
    try:
        return [kind(v) for v in _as_list(values[key])]
    except (TypeError, ValueError):
        raise ConfigError(f"key '{key}' has invalid value {values[key]!r}") from None


def _require_seed(args):
    if args.seed is None:
        raise ConfigError("--seed is required for this subcommand")
    return args.seed


def _emit(args, text: str):
    if args.out and args.out != "-":
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)


# -- subcommands ------------------------------------------------------------------

def cmd_gen(args) -> int:
    v = _gather(args, MODEL_KEYS, {"theta_mode": "axis", "noise": "gaussian", "seed": 0})
    seed = args.seed if args.seed is not None else _need(v, "seed", int)
    if not args.out or args.out == "-":
        raise ConfigError("gen requires --out PATH")
    try:
        cfg = ModelConfig.from_norm(_need(v, "d", int), _need(v, "n", int),
                                    _need(v, "delta", float), _need(v, "theta_norm", float),
                                    str(v["theta_mode"]), str(v["noise"]), seed)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    data = gen_dataset(cfg)
    files.write_dataset(args.out, data.Y)
    files.write_labels(files.labels_path(args.out), data.hidden.labels)
    return 0


def _format_estimate(e, fmt):
    if fmt == "csv":
        coords = ["theta_%d" % i for i in range(len(e.theta_hat))]
        rows = [["variant", "ell_used", "lambda_max", *coords],
                [e.variant, e.ell_used, float(e.lambda_max), *map(float, e.theta_hat)]]
        text = files.rows_to_csv(rows[0], rows[1:])
        if e.selector_trace:
            trace = e.selector_trace
            text += files.rows_to_csv(trace[0]._fields, [tuple(r) for r in trace])
        return text
    lines = [f"variant      {e.variant}",
             f"ell_used     {e.ell_used}",
             f"lambda_max   {e.lambda_max:.12g}",
             "theta_hat    " + " ".join(f"{x:.12g}" for x in e.theta_hat)]
    if e.selector_trace:
        fields = e.selector_trace[0]._fields
        lines.append("trace")
        lines.append("  " + "".join(f"{f:>16}" for f in fields))
        for rec in e.selector_trace:
            lines.append("  " + "".join(f"{x:>16.6g}" if isinstance(x, float) else f"{x:>16}"
                                        for x in rec))
    return "\n".join(lines) + "\n"


def cmd_estimate(args) -> int:
    v = _gather(args, ESTIMATE_KEYS)
    variant = args.variant or v.get("variant")
    if variant is None:
        raise ConfigError("--variant is required")
    if variant not in est.VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}; expected one of {', '.join(est.VARIANTS)}")
    delta = args.delta if args.delta is not None else v.get("delta")
    if variant in est.NEEDS_DELTA and delta is None:
        raise ConfigError(f"variant {variant} requires --delta")
    norm_sq = v.get("theta_norm_sq")
    if norm_sq is None and "theta_norm" in v:
        norm_sq = float(v["theta_norm"]) ** 2
    if variant in est.NEEDS_NORM and norm_sq is None:
        raise ConfigError(f"variant {variant} requires --set theta_norm_sq=VALUE")
    C = args.C if args.C is not None else float(v.get("C", est.DEFAULT_C))
    try:
        Y = files.read_dataset(args.dataset)
    except (OSError, files.FormatError) as exc:
        raise ConfigError(str(exc)) from exc
    try:
        e = est.estimate(variant, Y, None if delta is None else float(delta),
                         None if norm_sq is None else float(norm_sq), C)
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    _emit(args, _format_estimate(e, args.format))
    return 0


def _spec_from(values, seed, estimators, default_C=est.DEFAULT_C):
    try:
        return harness.ExperimentSpec(
            n=_need_list(values, "n", int),
            d=_need_list(values, "d", int),
            delta=_need_list(values, "delta", float),
            theta_norm_sq=_need_list(values, "theta_norm_sq", float),
            estimators=estimators,
            trials=_need(values, "trials", int),
            master_seed=seed,
            C=float(values.get("C", default_C)),
            noise=str(values.get("noise", "gaussian")),
            theta_mode=str(values.get("theta_mode", "axis")),
        )
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc


def _risk_output(args, reports) -> int:
    _emit(args, files.reports_to_csv(reports))
    for r in reports:
        log.info("%s %s median=%.4g valid=%s", r.cell.estimator, tuple(r.cell[:4]), r.q50, r.valid)
    return 0 if all(r.valid for r in reports) else 1


def cmd_risk(args) -> int:
    seed = _require_seed(args)
    v = _gather(args, RISK_KEYS, {"trials": 200})
    if args.variant:
        v["estimator"] = args.variant
    if args.C is not None:
        v["C"] = args.C
    if args.delta is not None:
        v["delta"] = args.delta
    for key in ("n", "d", "delta", "theta_norm_sq", "estimator"):
        if isinstance(v.get(key), list):
            raise ConfigError(f"risk takes a single value for '{key}'; use sweep for lists")
    spec = _spec_from(v, seed, [str(_need(v, "estimator", str))])
    return _risk_output(args, harness.sweep(spec, args.threads))


def cmd_sweep(args) -> int:
    seed = _require_seed(args)
    v = _gather(args, SWEEP_KEYS, {"trials": 200})
    if args.C is not None:
        v["C"] = args.C
    spec = _spec_from(v, seed, [str(s) for s in _need_list(v, "estimators", str)])
    return _risk_output(args, harness.sweep(spec, args.threads))


def cmd_calibrate(args) -> int:
    seed = _require_seed(args)
    v = _gather(args, CALIBRATE_KEYS, {"trials": 200})
    spec = _spec_from(v, seed, ["lepski_global"])
    candidates = _need_list(v, "candidates", float) if "candidates" in v else harness.C_CANDIDATES
    level = float(v.get("level", 0.10))
    cal = harness.calibrate_C(spec, tuple(candidates), level, args.threads)
    _emit(args, files.rows_to_csv(
        ("C", "n", "d", "delta", "theta_norm_sq", "over_selection_freq"),
        [(float(c), n, d, float(dl), float(s), f) for c, n, d, dl, s, f in cal.table]))
    print(f"calibrated C = {cal.C!r}" + (" (warning: no candidate qualified)" if cal.warning else ""),
          file=sys.stderr)
    if "C" in v and float(v["C"]) != cal.C:
        print(f"note: config records C = {v['C']!r}", file=sys.stderr)
    return 0


def cmd_rates(args) -> int:
    v = _gather(args, RATES_KEYS)
    rows = []
    try:
        for n in _need_list(v, "n", int):
            for d in _need_list(v, "d", int):
                for delta in _need_list(v, "delta", float):
                    for s in _need_list(v, "theta_norm_sq", float):
                        q = est.RateQuery(s, n, d, delta)
                        rows.append((n, d, delta, s, est.phi_rate(q), est.global_rate(n, d, delta)))
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    _emit(args, files.rows_to_csv(("n", "d", "delta", "theta_norm_sq", "phi_ref", "global_ref"),
                                  rows))
    return 0


def cmd_check_concentration(args) -> int:
    seed = _require_seed(args)
    v = _gather(args, CONCENTRATION_KEYS, {"d": 1, "trials": 10_000})
    if args.delta is not None:
        v["delta"] = args.delta
    n, delta = _need(v, "n", int), _need(v, "delta", float)
    ell = _need(v, "ell", int) if "ell" in v else math.ceil(n * delta)
    try:
        rep = harness.concentration_check(ell, delta, n, _need(v, "trials", int), seed,
                                          _need(v, "d", int))
    except DomainError as exc:
        raise ConfigError(str(exc)) from exc
    header = ("ell", "delta", "n", "d", "trials", "freq_bracket", "freq_upper",
              "freq_deviation", "mean_norm_sq", "stderr_norm_sq", "expected_norm_sq")
    _emit(args, files.rows_to_csv(header, [tuple(getattr(rep, h) for h in header)]))
    return 0


COMMANDS = {
    "gen": (cmd_gen, MODEL_KEYS, "generate a dataset file and its label sidecar"),
    "estimate": (cmd_estimate, ESTIMATE_KEYS, "estimate the center from a dataset file"),
    "risk": (cmd_risk, RISK_KEYS, "Monte Carlo risk of one estimator in one cell"),
    "sweep": (cmd_sweep, SWEEP_KEYS, "Monte Carlo risk over a grid of cells"),
    "calibrate": (cmd_calibrate, CALIBRATE_KEYS, "choose the Lepski constant C"),
    "rates": (cmd_rates, RATES_KEYS, "tabulate the local and global reference rates"),
    "check-concentration": (cmd_check_concentration, CONCENTRATION_KEYS,
                            "empirical concentration of ||eta_bar||^2"),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hmmix", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (fn, keys, text) in COMMANDS.items():
        p = sub.add_parser(name, help=text, description=text,
                           epilog="accepted keys: " + ", ".join(keys))
        p.set_defaults(func=fn)
        p.add_argument("--config", metavar="PATH")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override a config key (repeatable)")
        p.add_argument("--out", metavar="PATH", help="output file (default: stdout)")
        p.add_argument("--seed", type=int, metavar="U64")
        p.add_argument("--threads", type=int, metavar="N",
                       help="worker processes (fallback: $MML_THREADS, else 1)")
        p.add_argument("--delta", type=float)
        p.add_argument("--variant", metavar="NAME")
        p.add_argument("--C", type=float)
        if name == "estimate":
            p.add_argument("dataset", metavar="DATASET")
            p.add_argument("--format", choices=("text", "csv"), default="text")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("hmmix: error: --seed must be a 64-bit unsigned integer", file=sys.stderr)
        return 2
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"hmmix {args.command}: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
