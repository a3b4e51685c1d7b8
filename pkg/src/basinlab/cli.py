"""Command-line front end: ``basinlab {check-conditions,bounds,simulate}``."""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import os
import sys
from dataclasses import replace
from pathlib import Path

import jsonschema

from . import __version__
from .bounds import (
    BoundInputs,
    check_constant_lr_bound,
    check_decreasing_lr_bound,
    compute_CN,
)
from .conditions import (
    check_hcprc_rank,
    estimate_local_constants,
    implication_matrix,
)
from .errors import BasinlabError, ConfigError, RefusedError
from .landscapes import NeighborhoodSpec, make_landscape, minima_set_from_dict
from .montecarlo import (
    ExperimentConfig,
    MCResult,
    bound_inputs_for,
    compare_to_bounds,
    config_hash,
    estimate_concentration,
    estimate_stability,
    fit_rate_slope,
)
from .sgd import Constant, Decreasing, SgdConfig, noise_from_dict, run_trajectory, schedule_from_dict

EXIT_OK, EXIT_FAIL, EXIT_CONFIG, EXIT_IO = 0, 1, 2, 3

# --------------------------------------------------------------------------
# Schema
# --------------------------------------------------------------------------

_NUM = {"type": "number"}
_POS = {"type": "number", "exclusiveMinimum": 0}
_VEC = {"type": "array", "items": _NUM, "minItems": 1}


def _obj(props, required=(), **extra):
    return {"type": "object", "properties": props, "required": list(required),
            "additionalProperties": False, **extra}


_MINIMA = {
    "type": "object",
    "properties": {
        "type": {"enum": ["point", "sphere", "segment", "union"]},
        "center": _VEC,
        "radius": _POS,
        "start": _VEC,
        "end": _VEC,
        "parts": {"type": "array", "items": {"$ref": "#/$defs/minima_set"}, "minItems": 1},
    },
    "required": ["type"],
    "additionalProperties": False,
    "allOf": [
        {"if": {"properties": {"type": {"const": t}}}, "then": {"required": req}}
        for t, req in [("point", ["center"]), ("sphere", ["center", "radius"]),
                       ("segment", ["start", "end"]), ("union", ["parts"])]
    ],
}

_SCHEDULE = _obj(
    {"type": {"enum": ["decreasing", "constant"]}, "a": {"type": "number", "minimum": 0},
     "beta": {"type": "number", "exclusiveMinimum": 0.5, "maximum": 1}},
    ["type", "a"],
    allOf=[{"if": {"properties": {"type": {"const": "decreasing"}}},
            "then": {"required": ["beta"]}}],
)

EXPERIMENT_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    "$defs": {"minima_set": _MINIMA},
    **_obj(
        {
            "landscape": _obj(
                {"family": {"const": "PowerBasin"}, "degree": {"type": "number", "minimum": 2},
                 "scale": _POS, "minima_set": {"$ref": "#/$defs/minima_set"},
                 "dimension": {"type": "integer", "minimum": 1}, "validity_radius": _POS,
                 "f_star": _NUM},
                ["degree", "minima_set"],
            ),
            "neighborhood": _obj({"radius": _POS}, ["radius"]),
            "schedule": _SCHEDULE,
            "noise": _obj(
                {"type": {"const": "gaussian"}, "sigma": {"type": "number", "minimum": 0},
                 "multiplicative": {"type": "boolean"}},
                ["type", "sigma"],
            ),
            "sgd": _obj(
                {"batch_size": {"type": "integer", "minimum": 1},
                 "horizon": {"type": "integer", "minimum": 1},
                 "x1": _VEC, "seed": {"type": "integer", "minimum": 0}},
                ["batch_size", "horizon", "x1"],
            ),
            "bounds": _obj(
                {"L_r": {"type": "number", "minimum": 0},
                 "sigma_r": {"type": "number", "minimum": 0},
                 "estimate": _obj(
                     {"delta": _POS, "samples": {"type": "integer", "minimum": 2},
                      "seed": {"type": "integer", "minimum": 0},
                      "safety_factor": {"type": "number", "minimum": 1}},
                     ["delta"],
                 )},
                anyOf=[{"required": ["L_r"]}, {"required": ["estimate"]}],
            ),
            "montecarlo": _obj(
                {"trials": {"type": "integer", "minimum": 100},
                 "epsilon_grid": {"type": "array", "items": _POS, "minItems": 1},
                 "rate_horizons": {"type": "array", "items": {"type": "integer", "minimum": 1},
                                   "minItems": 4},
                 "rate_trials": {"type": "integer", "minimum": 100},
                 "rate_schedule": _SCHEDULE},
                ["trials", "epsilon_grid"],
            ),
            "output": _obj({"dir": {"type": "string"}, "trajectory_csv": {"type": "boolean"}}),
            "conditions": _obj(
                {"samples": {"type": "integer", "minimum": 1},
                 "seed": {"type": "integer", "minimum": 0},
                 "rank_points": {"type": "integer", "minimum": 1}},
            ),
        },
        ["landscape", "neighborhood"],
    ),
}

BOUND_INPUTS_SCHEMA = {
    "$schema": "https://json-schema.org/draft/2020-12/schema",
    **_obj(
        {"dist1": {"type": "number", "minimum": 0}, "r": _POS,
         "L_r": {"type": "number", "minimum": 0}, "sigma_r": {"type": "number", "minimum": 0},
         "batch_size": {"type": "integer", "minimum": 1}, "schedule": _SCHEDULE,
         "N": {"anyOf": [{"type": "integer", "minimum": 1}, {"const": "inf"}]},
         "epsilon": _POS},
        ["dist1", "r", "L_r", "sigma_r", "batch_size", "schedule"],
    ),
}

# sections each subcommand needs beyond the always-required ones
NEEDS = {
    "check-conditions": (),
    "bounds": ("schedule", "noise", "sgd", "bounds"),
    "simulate": ("schedule", "noise", "sgd", "bounds", "montecarlo"),
}


def _field_path(err) -> str:
    parts = [str(p) for p in err.absolute_path]
    return ".".join(parts) if parts else "<root>"


def validate(doc, schema) -> None:
    """Raise ConfigError listing every schema violation with its field path."""
    validator = jsonschema.Draft202012Validator(schema)
    errors = sorted(validator.iter_errors(doc), key=lambda e: (list(map(str, e.absolute_path)), e.message))
    if errors:
        lines = [f"{_field_path(e)}: {e.message}" for e in errors]
        raise ConfigError("config does not match the schema:\n  " + "\n  ".join(lines))


def load_json(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror or exc}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc


def load_experiment(path, command: str, seed_override=None) -> dict:
    doc = load_json(path)
    validate(doc, EXPERIMENT_SCHEMA)
    missing = [s for s in NEEDS[command] if s not in doc]
    if missing:
        raise ConfigError(f"'{command}' needs the section(s): {', '.join(missing)}")
    if seed_override is not None and "sgd" in doc:
        doc["sgd"]["seed"] = int(seed_override)
    return doc


def experiment_hash(doc: dict) -> str:
    """Hash of everything that determines the results (the output section is excluded)."""
    return config_hash({k: v for k, v in doc.items() if k != "output"})


# --------------------------------------------------------------------------
# Building objects from a validated document
# --------------------------------------------------------------------------


class Built:
    def __init__(self, doc: dict):
        self.doc = doc
        r = float(doc["neighborhood"]["radius"])
        land_doc = dict(doc["landscape"])
        land_doc["minima_set"] = minima_set_from_dict(land_doc["minima_set"])
        self.landscape = make_landscape(land_doc, neighborhood_radius=r)
        self.spec = NeighborhoodSpec(r, self.landscape.minima_set)
        self.sgd = None
        if "sgd" in doc:
            s = doc["sgd"]
            self.sgd = SgdConfig(
                self.landscape, self.spec, schedule_from_dict(doc["schedule"]),
                noise_from_dict(doc["noise"]), int(s["batch_size"]), int(s["horizon"]),
                s["x1"], int(s.get("seed", 0)),
            )
        self.constants = None

    def bound_inputs(self) -> BoundInputs:
        b = self.doc["bounds"]
        L = b.get("L_r")
        if L is None:
            est = b["estimate"]
            self.constants = estimate_local_constants(
                self.landscape, self.spec, float(est["delta"]), int(est.get("samples", 10_000)),
                int(est.get("seed", 0)), safety_factor=float(est.get("safety_factor", 1.1)),
            )
            L = self.constants.L_bound
        return bound_inputs_for(self.sgd, float(L), b.get("sigma_r"))


def _wrap_build(fn, *args):
    try:
        return fn(*args)
    except (ValueError, KeyError, BasinlabError) as exc:
        if isinstance(exc, ConfigError):
            raise
        raise ConfigError(f"invalid configuration: {exc}") from exc


# --------------------------------------------------------------------------
# Output helpers
# --------------------------------------------------------------------------


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    return str(v)


def header_line(doc_hash: str, seed: int) -> str:
    return f"basinlab {__version__} config_hash={doc_hash} seed={seed}"


def results_csv(results, header: str) -> str:
    buf = io.StringIO()
    buf.write(f"# {header}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["event", "parameter", "empirical", "ci_low", "ci_high", "bound", "dominated"])
    for r in results:
        dom = r.dominated if r.dominated is not None else "informational"
        w.writerow([r.event_name, _fmt(r.parameter), _fmt(r.empirical_p), _fmt(r.ci_low),
                    _fmt(r.ci_high), _fmt(r.theoretical_bound), _fmt(dom)])
    return buf.getvalue()


def _json_default(v):
    if hasattr(v, "tolist"):
        return v.tolist()
    raise TypeError(f"cannot serialize {type(v).__name__}")


def _clean(v):
    if isinstance(v, float) and not math.isfinite(v):
        return "inf" if v > 0 else ("-inf" if v < 0 else "nan")
    if isinstance(v, dict):
        return {k: _clean(x) for k, x in v.items()}
    if isinstance(v, (list, tuple)):
        return [_clean(x) for x in v]
    return v


def dump_json(obj) -> str:
    return json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n"


def _prepare_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror or exc}") from exc
    if not os.access(out, os.W_OK):
        raise OSError(f"output directory {out} is not writable")
    return out


def _write(out: Path, name: str, text: str):
    with open(out / name, "w", newline="") as fh:
        fh.write(text)


def _out_dir(args, doc):
    if args.out:
        return args.out
    return (doc or {}).get("output", {}).get("dir")


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_check_conditions(args) -> int:
    doc = load_experiment(args.config, "check-conditions", args.seed)
    opts = doc.get("conditions", {})
    samples, seed = int(opts.get("samples", 10_000)), int(opts.get("seed", 0))
    if args.dry_run:
        print(f"plan: certify local conditions on {samples} samples (seed {seed}); no computation")
        return EXIT_OK
    built = _wrap_build(Built, doc)
    matrix = implication_matrix(built.landscape, built.spec, samples, seed)
    rank = check_hcprc_rank(built.landscape, built.spec, n_points=int(opts.get("rank_points", 100)),
                            seed=seed)
    print(f"{'condition':<10} {'holds':<6} {'constant':>14}")
    for kind, rep in matrix.reports.items():
        const = "" if rep.best_constant is None else f"{rep.best_constant:.6g}"
        print(f"{kind.value:<10} {'✓' if rep.holds else '✗':<6} {const:>14}")
    print(f"{'HCPRC':<10} {'✓' if rank.holds else '✗':<6} {'rank ' + str(sorted(set(rank.ranks))):>14}")
    for row in matrix.rows:
        print(f"  {row.premise.value} => {row.conclusion.value}: {row.status}")
    out = _out_dir(args, doc)
    if out:
        payload = {"config_hash": experiment_hash(doc), "matrix": matrix.to_dict(),
                   "hcprc": rank.to_dict()}
        _write(_prepare_dir(out), "conditions.json", dump_json(payload))
    if not matrix.consistent:
        print("internal inconsistency in the implication checks", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _bounds_payload(inputs: BoundInputs, epsilon=None) -> dict:
    from .bounds import concentration_rhs

    rep = compute_CN(inputs)
    payload = {"inputs": inputs.to_dict(), "report": rep.to_dict()}
    sched = inputs.schedule
    if isinstance(sched, Decreasing):
        chk = check_decreasing_lr_bound(inputs)
        payload["decreasing_rate_check"] = {"holds": chk.holds, "lhs": chk.lhs,
                                            "margin": chk.margin, "max_a": chk.max_a}
    elif isinstance(sched, Constant) and not math.isinf(inputs.N):
        chk = check_constant_lr_bound(inputs)
        payload["constant_rate_check"] = {"holds": chk.holds, "lhs": chk.lhs, "margin": chk.margin}
    if epsilon is not None and not math.isinf(inputs.N):
        payload["concentration_rhs"] = {"epsilon": epsilon,
                                        "value": concentration_rhs(inputs, epsilon, int(inputs.N))}
    return payload


def _print_bounds(payload):
    rep = payload["report"]
    print(f"N            {payload['inputs']['N']}")
    print(f"C_N          {rep['C_N']!r}")
    print(f"1 - C_N      {1.0 - rep['C_N']!r}")
    if "decreasing_rate_check" in payload:
        chk = payload["decreasing_rate_check"]
        print(f"max_a        {chk['max_a']!r}")
        print(f"rate margin  {chk['margin']!r} ({'satisfied' if chk['holds'] else 'violated'})")
    if "constant_rate_check" in payload:
        chk = payload["constant_rate_check"]
        print(f"rate margin  {chk['margin']!r} ({'satisfied' if chk['holds'] else 'violated'})")
    if "concentration_rhs" in payload:
        c = payload["concentration_rhs"]
        print(f"P(min h > {c['epsilon']!r}) <= {c['value']!r}")
    if rep["vacuous"]:
        print("bound vacuous (C_N >= 1)")
    else:
        print(f"stability guaranteed with probability >= {1.0 - rep['C_N']!r}")


def _bare_inputs(doc) -> BoundInputs:
    N = doc.get("N", "inf")
    return BoundInputs(
        float(doc["dist1"]), float(doc["r"]), float(doc["L_r"]), float(doc["sigma_r"]),
        int(doc["batch_size"]), schedule_from_dict(doc["schedule"]),
        math.inf if N == "inf" else int(N),
    )


def cmd_bounds(args) -> int:
    raw = load_json(args.config)
    bare = isinstance(raw, dict) and "dist1" in raw
    if bare:
        validate(raw, BOUND_INPUTS_SCHEMA)
        doc = None
        if args.dry_run:
            print("plan: evaluate closed-form bounds for the given inputs; no computation")
            return EXIT_OK
        inputs = _wrap_build(_bare_inputs, raw)
        epsilon = raw.get("epsilon")
    else:
        doc = load_experiment(args.config, "bounds", args.seed)
        if args.dry_run:
            print("plan: build the experiment and evaluate its closed-form bounds; no computation")
            return EXIT_OK
        built = _wrap_build(Built, doc)
        inputs = _wrap_build(built.bound_inputs)
        grid = doc.get("montecarlo", {}).get("epsilon_grid")
        epsilon = grid[0] if grid else None
    payload = _wrap_build(_bounds_payload, inputs, epsilon)
    if not bare and built.constants is not None:
        payload["estimated_constants"] = built.constants.to_dict()
    _print_bounds(payload)
    out = _out_dir(args, doc)
    if out:
        _write(_prepare_dir(out), "bounds.json", dump_json(payload))
    return EXIT_OK


def cmd_simulate(args) -> int:
    doc = load_experiment(args.config, "simulate", args.seed)
    mc, output = doc["montecarlo"], doc.get("output", {})
    out_path = _out_dir(args, doc)
    if not out_path:
        raise ConfigError("simulate needs an output directory (output.dir or --out)")
    if args.dry_run:
        s = doc["sgd"]
        print(f"plan: {mc['trials']} paths x {s['horizon']} steps, epsilon grid {mc['epsilon_grid']}")
        if "rate_horizons" in mc:
            print(f"plan: rate fit at horizons {mc['rate_horizons']} with "
                  f"{mc.get('rate_trials', 1000)} paths")
        print(f"plan: write results to {out_path}; no computation")
        return EXIT_OK
    out = _prepare_dir(out_path)
    built = _wrap_build(Built, doc)
    inputs = _wrap_build(built.bound_inputs)
    threads = args.threads or os.cpu_count() or 1
    exp = _wrap_build(ExperimentConfig, built.sgd, int(mc["trials"]), list(mc["epsilon_grid"]),
                      inputs, threads)
    doc_hash = experiment_hash(doc)
    seed = built.sgd.seed
    header = header_line(doc_hash, seed)

    run = exp.run()
    stability = estimate_stability(exp, run)
    concentration = estimate_concentration(exp, run)
    for r in [stability, *concentration]:
        r.config_hash = doc_hash
    print(f"stability: empirical {stability.empirical_p:.4f}, bound {stability.theoretical_bound:.4f}, "
          f"dominated {stability.dominated}")

    rate_rows, rate_payload = _rate_experiment(built, mc, inputs, threads, doc_hash)
    for line in rate_payload.get("log", []):
        print(line)

    _write(out, "stability.csv", results_csv([stability], header))
    _write(out, "concentration.csv", results_csv(concentration, header))
    _write(out, "rates.csv", results_csv(rate_rows, header))
    if output.get("trajectory_csv", True):
        buf = io.StringIO()
        run_trajectory(built.sgd, 0).write_csv(buf, header)
        _write(out, "trajectory.csv", buf.getvalue())

    results = [stability, *concentration]
    summary = compare_to_bounds(results, {doc_hash: doc})
    payload = {
        "version": __version__,
        "config_hash": doc_hash,
        "seed": seed,
        "bound_inputs": inputs.to_dict(),
        "stability": stability.to_dict(),
        "concentration": [r.to_dict() for r in concentration],
        "rate_fit": {k: v for k, v in rate_payload.items() if k != "log"},
        "summary": summary.to_dict(),
    }
    if built.constants is not None:
        payload["estimated_constants"] = built.constants.to_dict()
    _write(out, "summary.json", dump_json(payload))
    print(f"summary: {summary.passed} passed, {summary.failed} failed, {summary.vacuous} vacuous, "
          f"{summary.informational} informational")
    if not summary.ok:
        print(f"dominance failure; reproduce with --seed {seed} (config hash {doc_hash})",
              file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


def _rate_experiment(built: Built, mc: dict, inputs: BoundInputs, threads: int, doc_hash: str):
    horizons = mc.get("rate_horizons")
    if not horizons:
        return [], {}
    cfg = built.sgd.with_horizon(max(horizons))
    if "rate_schedule" in mc:
        cfg = replace(cfg, schedule=schedule_from_dict(mc["rate_schedule"]))
    sched = cfg.schedule
    exp = ExperimentConfig(cfg, int(mc.get("rate_trials", 1000)), list(mc["epsilon_grid"]),
                           inputs.replace(N=cfg.horizon, schedule=sched), threads)
    try:
        fit = fit_rate_slope(exp, horizons)
    except RefusedError as exc:
        return [], {"refused": str(exc), "log": [f"rate fit refused: {exc}"]}
    rows = []
    for h, m, f in zip(fit.horizons, fit.means, fit.stayed_fractions):
        rows.append(MCResult("mean_gap", m, m, m, None, None, float(h), cfg.seed, doc_hash,
                             exp.trials, f"stayed fraction {f!r}"))
    predicted = -sched.beta if isinstance(sched, Decreasing) else None
    rows.append(MCResult("slope", fit.slope, fit.slope - 2 * fit.stderr, fit.slope + 2 * fit.stderr,
                         predicted, None, None, cfg.seed, doc_hash, exp.trials))
    payload = fit.to_dict()
    payload["predicted_slope"] = predicted
    payload["log"] = [f"rate fit: slope {fit.slope:.4f} (stderr {fit.stderr:.4f})"]
    return rows, payload


# --------------------------------------------------------------------------
# Entry point
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="basinlab", description=__doc__)
    parser.add_argument("--version", action="version", version=f"basinlab {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, help_text in [
        ("check-conditions", cmd_check_conditions, "certify local conditions on a landscape"),
        ("bounds", cmd_bounds, "evaluate the closed-form stability bounds"),
        ("simulate", cmd_simulate, "run the Monte Carlo experiment and compare with the bounds"),
    ]:
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON experiment file")
        p.add_argument("--seed", type=int, help="master seed (overrides the file)")
        p.add_argument("--threads", type=int, default=None, help="worker threads (default: all cores)")
        p.add_argument("--out", help="output directory (overrides the file)")
        p.add_argument("--dry-run", action="store_true", help="validate and print the plan only")
        p.set_defaults(func=fn)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.seed is not None and not 0 <= args.seed < 2**64:
        print("config error: --seed must be an unsigned 64-bit integer", file=sys.stderr)
        return EXIT_CONFIG
    if args.threads is not None and args.threads < 1:
        print("config error: --threads must be at least 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
