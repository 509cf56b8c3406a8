"""Scenario-driven command line front end.

A scenario is a YAML file::

    kind: photonstats          # simulate | photonstats | protocol | gate | foms | sweep
    description: optional text
    model:
      type: two_level          # two_level | cavity_emitter | protocol | exchange_gate | fano_gate
      params: {gamma: 1.0}
      drive: {area: 3.1416, duration: 0.1}
    grid: {...}                # evaluator-specific numerics
    sweep:                     # at most two entries, cartesian product
      - {parameter: drive.duration, values: [0.01, 0.1]}
      - {parameter: params.gamma_star, start: 0, stop: 1, num: 5, scale: linear}
    output: {path: out.csv, format: csv}

``kind: sweep`` is accepted as an alias that requires ``evaluate:`` naming one
of the other kinds. Sweep parameters are dotted paths into the model block.
Output is long format: one row per sweep point (and per time sample for
``simulate``), complex numbers split into ``_re``/``_im`` columns.

Exit codes: 2 parse error, 3 schema error, 4 numeric failure.
"""
from __future__ import annotations

import argparse
import copy
import csv
import dataclasses
import io
import itertools
import json
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from importlib import resources
from pathlib import Path

import numpy as np
import yaml

from . import local_gates as gates
from . import remote_entanglement as remote
from .models import CavityEmitter, QuenchModel, SquarePulse, ThreeLevelDefect, TwoLevelEmitter
from .models import build_liouvillian, cavity_foms
from .photon_counting import DetectorSpec, conditional_propagate, total_number_distribution
from .photonic_state import TimeGrid, default_grid, pulse_statistics

EXIT_PARSE, EXIT_SCHEMA, EXIT_NUMERIC = 2, 3, 4
KINDS = ("simulate", "photonstats", "protocol", "gate", "foms", "sweep")
MODEL_TYPES = ("two_level", "cavity_emitter", "protocol", "exchange_gate", "fano_gate")
FORMATS = ("csv", "json")

EXCHANGE_PARAMS = {"cooperativity": 1e5, "detuning_ratio": 1.0, "dephasing_ratio": 0.0,
                   "coupling_ratio": 0.05, "kappa": 1.0, "numeric": False}
FANO_PARAMS = {"C1": 1000.0, "C2": 2000.0, "ratio_scale": 1.0, "second_ratio_scale": None,
               "kappa_ratio": 10.0, "gamma": None, "dephasing_ratio": 0.0, "overlap": 1.0,
               "overlap_phase": math.pi / 2, "numeric": False, "optimize": False}
REQUIRED = {"exchange_gate": ("cooperativity", "detuning_ratio"), "fano_gate": ("C1", "C2")}
# column names used for swept paths that an evaluator also reports
COLUMN_NAMES = {"drive.duration": "t_p"}

UNITS = {
    "simulate": "t in 1/[rate]; populations dimensionless",
    "photonstats": "t_p in 1/[rate]; probabilities dimensionless",
    "protocol": "distance_km in km; protocol_time_s in s; rates in 1/time_unit",
    "gate": "rates in units of kappa (single mode) or kappa_2 (two modes)",
    "foms": "rates in [rate]; factors dimensionless",
}


class ScenarioError(ValueError):
    """Schema violation (exit 3)."""


class NumericFailure(RuntimeError):
    """Evaluation failed (exit 4); message names the failing operation."""


# ---------------------------------------------------------------- loading

def load_scenario(path) -> dict:
    try:
        text = Path(path).read_text()
        data = yaml.load(text, Loader=_Loader)
    except (OSError, yaml.YAMLError) as exc:
        raise _ParseError(f"cannot parse {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise _ParseError(f"{path}: top level must be a mapping")
    return data


class _ParseError(ValueError):
    pass


class _Loader(yaml.SafeLoader):
    """Safe loader that also reads exponents without a sign (1e8, 2.0e8) as floats."""


_Loader.add_implicit_resolver(
    "tag:yaml.org,2002:float",
    re.compile(r"^[-+]?(?:[0-9][0-9_]*(?:\.[0-9_]*)?|\.[0-9_]+)(?:[eE][-+]?[0-9]+)?$"
               r"|^[-+]?\.(?:inf|Inf|INF)$|^\.(?:nan|NaN|NAN)$"),
    list("-+0123456789."))


def _fields(cls):
    return {f.name for f in dataclasses.fields(cls)}


def _check_keys(block: dict, allowed, where: str):
    if not isinstance(block, dict):
        raise ScenarioError(f"{where} must be a mapping")
    extra = set(block) - set(allowed)
    if extra:
        raise ScenarioError(f"unknown parameter(s) in {where}: {', '.join(sorted(extra))}")


def _allowed_params(model_type: str):
    return {
        "two_level": _fields(TwoLevelEmitter) - {"drive"},
        "cavity_emitter": _fields(CavityEmitter) - {"drive", "quench"},
        "protocol": _fields(remote.ProtocolSpec) - {"defects", "detectors"},
        "exchange_gate": set(EXCHANGE_PARAMS),
        "fano_gate": set(FANO_PARAMS),
    }[model_type]


def _sweep_axes(scn: dict) -> list:
    block = scn.get("sweep") or []
    if isinstance(block, dict):
        block = [block]
    if len(block) > 2:
        raise ScenarioError(f"at most two swept parameters are supported, got {len(block)}")
    axes = []
    for entry in block:
        if "parameter" not in entry:
            raise ScenarioError("sweep entry needs 'parameter'")
        if "values" in entry:
            values = [float(v) for v in entry["values"]]
        elif {"start", "stop", "num"} <= set(entry):
            lo, hi, n = float(entry["start"]), float(entry["stop"]), int(entry["num"])
            scale = entry.get("scale", "linear")
            if scale == "log":
                values = list(np.geomspace(lo, hi, n))
            elif scale == "linear":
                values = list(np.linspace(lo, hi, n))
            else:
                raise ScenarioError(f"unknown sweep scale {scale!r}")
        else:
            raise ScenarioError(f"sweep of {entry['parameter']} needs 'values' or start/stop/num")
        if not values or not all(math.isfinite(v) for v in values):
            raise ScenarioError(f"sweep values for {entry['parameter']} must be finite and non-empty")
        axes.append((entry["parameter"], [float(v) for v in values]))
    return axes


def _defect_pair(defects) -> list:
    if isinstance(defects, dict):
        defects = [defects]
    if len(defects) == 1:
        defects = list(defects) * 2
    if len(defects) != 2:
        raise ScenarioError("protocol needs one or two defect blocks")
    for d in defects:
        _check_keys(d, _fields(ThreeLevelDefect), "model.defects")
    return [dict(d) for d in defects]


def _resolve(model: dict, dotted: str):
    node = model
    parts = dotted.split(".")
    for p in parts[:-1]:
        if not isinstance(node, dict) or p not in node:
            return None, None
        node = node[p]
    return node, parts[-1]


def validate(scn: dict) -> dict:
    """Check a parsed scenario and return it with defaults filled in."""
    scn = copy.deepcopy(scn)
    kind = scn.get("kind")
    if kind not in KINDS:
        raise ScenarioError(f"kind must be one of {KINDS}, got {kind!r}")
    if kind == "sweep":
        kind = scn.get("evaluate")
        if kind not in KINDS or kind == "sweep":
            raise ScenarioError("kind 'sweep' needs evaluate: <simulate|photonstats|protocol|gate|foms>")
        scn["kind"] = kind
    model = scn.get("model")
    if not isinstance(model, dict) or model.get("type") not in MODEL_TYPES:
        raise ScenarioError(f"model.type must be one of {MODEL_TYPES}")
    mtype = model["type"]
    expected = {"simulate": ("two_level", "cavity_emitter"), "photonstats": ("two_level", "cavity_emitter"),
                "foms": ("cavity_emitter",), "protocol": ("protocol",),
                "gate": ("exchange_gate", "fano_gate")}[kind]
    if mtype not in expected:
        raise ScenarioError(f"kind {kind!r} needs model.type in {expected}, got {mtype!r}")
    _check_keys(model, {"type", "params", "drive", "quench", "defects", "detectors",
                        "defects_by_protocol"}, "model")
    model.setdefault("params", {})
    _check_keys(model["params"], _allowed_params(mtype), f"model.params ({mtype})")
    if "drive" in model:
        _check_keys(model["drive"], {"area", "rabi", "duration", "start"}, "model.drive")
        if "duration" not in model["drive"] or ("area" in model["drive"]) == ("rabi" in model["drive"]):
            raise ScenarioError("model.drive needs duration and exactly one of area/rabi")
    if "quench" in model:
        _check_keys(model["quench"], _fields(QuenchModel), "model.quench")
    if mtype == "protocol":
        model["defects"] = _defect_pair(model.get("defects", [{}]))
        overrides = model.get("defects_by_protocol", {})
        _check_keys(overrides, remote.PROTOCOLS, "model.defects_by_protocol")
        model["defects_by_protocol"] = {k: _defect_pair(v) for k, v in overrides.items()}
        for d in model.get("detectors", []):
            _check_keys(d, _fields(DetectorSpec), "model.detectors")
    for name in REQUIRED.get(mtype, ()):
        if name not in model["params"]:
            raise ScenarioError(f"model.params.{name} is required for {mtype}")
    for path, _ in _sweep_axes(scn):
        node, leaf = _resolve(model, path)
        if node is None:
            raise ScenarioError(f"sweep parameter {path!r} does not exist in the model block")
        if path.startswith("params.") and leaf not in _allowed_params(mtype):
            raise ScenarioError(f"sweep parameter {path!r} is not a parameter of {mtype}")
        if path.startswith("drive.") and leaf not in {"area", "rabi", "duration", "start"}:
            raise ScenarioError(f"sweep parameter {path!r} is not a drive parameter")
    out = scn.setdefault("output", {})
    _check_keys(out, {"path", "format", "digits"}, "output")
    fmt = out.setdefault("format", "csv")
    if fmt not in FORMATS:
        raise ScenarioError(f"output.format must be csv or json, got {fmt!r}")
    scn.setdefault("grid", {})
    return scn


# ---------------------------------------------------------------- builders

def _drive(block):
    if not block:
        return None
    duration = float(block["duration"])
    rabi = float(block["rabi"]) if "rabi" in block else float(block["area"]) / duration
    return SquarePulse(rabi, duration, float(block.get("start", 0.0)))


def build_emitter(model: dict):
    p = dict(model["params"])
    drive = _drive(model.get("drive"))
    if model["type"] == "two_level":
        return TwoLevelEmitter(drive=drive, **p)
    quench = QuenchModel(**model["quench"]) if model.get("quench") else None
    return CavityEmitter(drive=drive, quench=quench, **p)


def build_protocol(model: dict, protocol: str | None = None) -> remote.ProtocolSpec:
    p = dict(model["params"])
    if protocol is not None:
        p["protocol"] = protocol
    for key in ("init_phases", "propagation_phases", "efficiencies", "diffusion_sigma", "phase_sigma"):
        if key in p:
            p[key] = tuple(p[key])
    blocks = model.get("defects_by_protocol", {}).get(p.get("protocol"), model["defects"])
    defects = tuple(ThreeLevelDefect(**d) for d in blocks)
    detectors = tuple(DetectorSpec(**d) for d in model.get("detectors", []))
    return remote.ProtocolSpec(defects=defects, detectors=detectors, **p)


def build_exchange_gate(params: dict) -> gates.ExchangeGateSpec:
    p = {**EXCHANGE_PARAMS, **params}
    kappa = float(p["kappa"])
    g = float(p["coupling_ratio"]) * kappa
    gamma = 4 * g * g / (kappa * float(p["cooperativity"]))
    return gates.ExchangeGateSpec(g, kappa, float(p["detuning_ratio"]) * kappa, gamma,
                                  float(p["dephasing_ratio"]) * gamma)


def build_fano_gate(params: dict) -> gates.FanoGateSpec:
    p = {**FANO_PARAMS, **params}
    C1, C2 = float(p["C1"]), float(p["C2"])
    kr = float(p["kappa_ratio"])
    gamma = 1e-5 * kr if p["gamma"] is None else float(p["gamma"])
    ideal = gates.fano_ideal_ratio(C2)
    second = None if p["second_ratio_scale"] is None else float(p["second_ratio_scale"]) * ideal
    return gates.fano_dip_spec(C1, C2, ratio=float(p["ratio_scale"]) * ideal, kappa_ratio=kr,
                               gamma=gamma, gamma_star=float(p["dephasing_ratio"]) * gamma,
                               overlap=float(p["overlap"]), overlap_phase=float(p["overlap_phase"]),
                               second_ratio=second)


# ---------------------------------------------------------------- evaluators

def _grid_for(model, grid: dict):
    if "t_end" in grid:
        return TimeGrid(0.0, float(grid["t_end"]), int(grid.get("points", 400)))
    return default_grid(model, points=int(grid.get("points", 400)),
                        lifetimes=float(grid.get("lifetimes", 12.0)))


def eval_simulate(model_block, grid) -> list:
    model = build_emitter(model_block)
    gen = build_liouvillian(model)
    src_grid = _grid_for(model, grid)
    times = src_grid.times
    rho0 = model.ground() if model.drive is not None else model.excited()
    from .dynamics import evolve_on_grid
    traj = evolve_on_grid(gen, rho0.matrix.reshape(-1), times)
    d = rho0.space.dim
    b = model.channel().operator.matrix
    num = b.conj().T @ b
    if isinstance(model, TwoLevelEmitter):
        excited = np.zeros((d, d))
        excited[1, 1] = 1
    else:
        s, _ = model.operators()
        excited = (s.dag @ s).matrix
    rows = []
    for t, v in zip(times, traj):
        m = v.reshape(d, d)
        rows.append({"t": t, "excited_population": np.trace(excited @ m).real,
                     "emission_rate": np.trace(num @ m).real})
    return rows


def eval_photonstats(model_block, grid) -> list:
    model = build_emitter(model_block)
    if model.drive is None:
        raise ScenarioError("photonstats needs a drive block")
    gen = build_liouvillian(model)
    lifetimes = float(grid.get("lifetimes", 30.0))
    t_end = model.drive.end + lifetimes / model.gamma
    n_max = int(grid.get("n_max", 3))
    ens = conditional_propagate(gen, [model.channel()], model.ground(), 0.0, t_end, n_max)
    p = total_number_distribution(ens)
    row = {"t_p": model.drive.duration, "area": model.drive.area}
    for n in range(min(n_max, 2) + 1):
        row[f"p{n}"] = p[n]
    row["p3plus"] = max(0.0, 1.0 - sum(p[:3]))
    if grid.get("hom"):
        rep = pulse_statistics(model, grid=_grid_for(model, grid))
        row.update({"mu": rep.mu, "g2": rep.g2, "M": rep.M, "V_HOM": rep.V_HOM})
    return [row]


def eval_foms(model_block, grid) -> list:
    f = cavity_foms(build_emitter(model_block))
    return [dataclasses.asdict(f)]


def eval_protocol(model_block, grid) -> list:
    protocols = grid.get("protocols", [model_block["params"].get("protocol", "N")])
    distances = grid.get("distances_km")
    rows = []
    for name in protocols:
        s = build_protocol(model_block, name)
        if distances is None:
            out = remote.run_protocol(s)
            rows.append({"protocol": name, "fidelity": out.fidelity, "efficiency": out.efficiency,
                         "concurrence": out.concurrence})
            continue
        for r in remote.distance_sweep(s, [float(x) for x in distances],
                                       float(grid.get("base_efficiency", 1.0))):
            rows.append({"protocol": name, "distance_km": r.L_km, "eta": r.eta,
                         "protocol_time_s": r.t_f_s, "fidelity": r.F_gen,
                         "efficiency": r.eta_gen, "concurrence": r.concurrence})
    return rows


def eval_gate(model_block, grid) -> list:
    p = model_block["params"]
    if model_block["type"] == "exchange_gate":
        spec = build_exchange_gate(p)
        out = gates.simple_exchange_fidelity(spec)
        row = {"detuning_ratio": spec.detuning / spec.kappa, "fidelity": out.fidelity,
               "gate_time": out.gate_time, "purcell": out.purcell[0],
               "coupling": out.couplings[0], "C_eff": spec.effective_cooperativity,
               "max_fidelity": out.max_fidelity,
               "optimal_detuning_ratio": out.conditions["optimal_detuning"] / spec.kappa}
        for k in ("far_adiabatic_effective", "dephased"):
            row[k] = out.estimates[k]
        if p.get("numeric"):
            row["numeric_fidelity"] = gates.gate_numeric_check(spec).fidelity
        return [row]
    spec = build_fano_gate(p)
    out = gates.fano_gate_analysis(spec)
    cond = out.conditions
    row = {"ratio_1": cond["detuning_ratios"][0], "ratio_2": cond["detuning_ratios"][1],
           "fidelity": out.fidelity, "gate_time": out.gate_time, "purcell": out.purcell[0],
           "lambda_12": out.couplings[0], "max_fidelity_formula": out.max_fidelity}
    for k in ("constructive_exchange", "fano_dip_phase", "same_side_detuning",
              "maximal_overlap", "dip_detuning"):
        row[k] = int(bool(cond[k]))
    if p.get("numeric"):
        row["numeric_fidelity"] = gates.gate_numeric_check(spec).fidelity
    if p.get("optimize"):
        kw = {"kappa_ratio": float(p.get("kappa_ratio", FANO_PARAMS["kappa_ratio"]))}
        F, x1, x2 = gates.maximize_fano_fidelity(float(p["C1"]), float(p["C2"]), **kw)
        row.update({"optimized_fidelity": F, "optimal_ratio_1": x1, "optimal_ratio_2": x2})
    return [row]


EVALUATORS = {"simulate": eval_simulate, "photonstats": eval_photonstats, "foms": eval_foms,
              "protocol": eval_protocol, "gate": eval_gate}


def _set(model: dict, dotted: str, value):
    node, leaf = _resolve(model, dotted)
    node[leaf] = value


def _evaluate_point(args):
    kind, model, grid, assignment = args
    model = copy.deepcopy(model)
    for path, value in assignment:
        _set(model, path, value)
    try:
        rows = EVALUATORS[kind](model, grid)
    except ScenarioError:
        raise
    except (ValueError, ArithmeticError, np.linalg.LinAlgError, RuntimeError) as exc:
        raise NumericFailure(f"{kind} evaluation failed at {dict(assignment)}: "
                             f"{type(exc).__name__}: {exc}") from exc
    prefix = {COLUMN_NAMES.get(path, path.split(".")[-1]): value for path, value in assignment}
    return [{**prefix, **r} for r in rows]


def run(scn: dict, threads: int = 1) -> list:
    """Evaluate a validated scenario; rows in cartesian sweep order."""
    axes = _sweep_axes(scn)
    grid_points = [tuple(zip([a for a, _ in axes], combo))
                   for combo in itertools.product(*[v for _, v in axes])]
    jobs = [(scn["kind"], scn["model"], scn["grid"], pt) for pt in grid_points]
    if threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            chunks = list(pool.map(_evaluate_point, jobs))
    else:
        chunks = [_evaluate_point(j) for j in jobs]
    return [row for chunk in chunks for row in chunk]


# ---------------------------------------------------------------- emission

def _flatten(row: dict) -> dict:
    out = {}
    for k, v in row.items():
        if isinstance(v, (complex, np.complexfloating)):
            out[f"{k}_re"], out[f"{k}_im"] = float(np.real(v)), float(np.imag(v))
        elif isinstance(v, (bool, np.bool_)):
            out[k] = int(v)
        elif isinstance(v, (np.floating, np.integer)):
            out[k] = v.item()
        else:
            out[k] = v
    return out


def _fmt(v, digits):
    if isinstance(v, float):
        return format(v, f".{digits}g")
    return str(v)


def emit(rows: list, scn: dict) -> str:
    fmt = scn["output"]["format"]
    digits = int(scn["output"].get("digits", 12))
    flat = [_flatten(r) for r in rows]
    columns = []
    for r in flat:
        for k in r:
            if k not in columns:
                columns.append(k)
    if fmt == "json":
        payload = {"kind": scn["kind"], "units": UNITS[scn["kind"]], "columns": columns,
                   "rows": [[r.get(c) for c in columns] for r in flat]}
        return json.dumps(payload, indent=1, sort_keys=False) + "\n"
    buf = io.StringIO()
    buf.write(f"# units: {UNITS[scn['kind']]}\n")
    writer = csv.writer(buf, lineterminator="\r\n")
    writer.writerow(columns)
    for r in flat:
        writer.writerow([_fmt(r.get(c, ""), digits) for c in columns])
    return buf.getvalue()


# ---------------------------------------------------------------- presets

def preset_names() -> list:
    root = resources.files("emitterdyn") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def preset_path(name: str):
    name = name.removeprefix("presets/").removesuffix(".yaml")
    if name not in preset_names():
        raise _ParseError(f"unknown preset {name!r}; see list-presets")
    return resources.files("emitterdyn") / "presets" / f"{name}.yaml"


# ---------------------------------------------------------------- entry point

def _execute(scn: dict, args) -> int:
    scn = validate(scn)
    if args.format:
        scn["output"]["format"] = args.format
    rows = run(scn, threads=args.threads)
    text = emit(rows, scn)
    out = args.out or scn["output"].get("path")
    if out and out != "-":
        Path(out).write_text(text, newline="")
    else:
        sys.stdout.write(text)
    return 0


def _gate_scenario(args) -> dict:
    if args.gate_kind == "simple":
        params = {"cooperativity": args.cooperativity, "detuning_ratio": args.ratios[0],
                  "dephasing_ratio": args.dephasing_ratio, "numeric": args.numeric}
        param = "params.detuning_ratio"
        mtype = "exchange_gate"
    else:
        c2 = args.cooperativity if args.c2 is None else args.c2
        params = {"C1": args.cooperativity, "C2": c2, "ratio_scale": args.ratios[0],
                  "dephasing_ratio": args.dephasing_ratio, "numeric": args.numeric}
        param = "params.ratio_scale"
        mtype = "fano_gate"
    return {"kind": "gate", "model": {"type": mtype, "params": params},
            "sweep": [{"parameter": param, "values": args.ratios}], "output": {}}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="emitterdyn", description=__doc__.split("\n")[0])
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--out", help="output file (default: scenario output.path or stdout)")
    common.add_argument("--format", choices=FORMATS)
    common.add_argument("--threads", type=int, default=1, help="worker processes for sweeps")
    sub = ap.add_subparsers(dest="command", required=True)
    p = sub.add_parser("run", parents=[common], help="run a scenario file")
    p.add_argument("file")
    p = sub.add_parser("preset", parents=[common], help="run a bundled preset")
    p.add_argument("name")
    sub.add_parser("list-presets", help="list bundled presets")
    p = sub.add_parser("validate", help="check a scenario file without running it")
    p.add_argument("file")
    p = sub.add_parser("gate", parents=[common], help="gate fidelity and condition report")
    p.add_argument("gate_kind", choices=("simple", "fano"))
    p.add_argument("--cooperativity", type=float, required=True, help="C (simple) or C1 (fano)")
    p.add_argument("--c2", type=float, help="C2 for the two-mode gate (default C1)")
    p.add_argument("--dephasing-ratio", type=float, default=0.0, help="gamma*/gamma")
    p.add_argument("--ratios", type=float, nargs="+", default=[1.0],
                   help="Delta/kappa (simple) or multiples of the ideal dip ratio (fano)")
    p.add_argument("--numeric", action="store_true", help="also run the full master equation")
    return ap


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "list-presets":
            for name in preset_names():
                desc = load_scenario(preset_path(name)).get("description", "")
                print(f"{name}\t{desc}")
            return 0
        if args.command == "validate":
            validate(load_scenario(args.file))
            print("ok")
            return 0
        if args.command == "run":
            return _execute(load_scenario(args.file), args)
        if args.command == "preset":
            return _execute(load_scenario(preset_path(args.name)), args)
        return _execute(_gate_scenario(args), args)
    except _ParseError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE
    except (ScenarioError, TypeError) as exc:
        print(f"schema error: {exc}", file=sys.stderr)
        return EXIT_SCHEMA
    except NumericFailure as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
