"""
Scenario files, run orchestration and output files.

A scenario file is YAML with the top-level sections ``network``,
``devices``, ``events``, ``ltcs``, ``cvr``, ``simulation`` and ``outputs``.
Every key is checked before anything runs; errors carry the line number
and the dotted path of the offending field.

Usage::

    python -m mtsdyn run scenario.yaml --out results/
    python -m mtsdyn preset 1 --out case1/
    python -m mtsdyn scan scenario.yaml
    python -m mtsdyn check scenario.yaml
    python -m mtsdyn batch a.yaml b.yaml --out sweep/ --jobs 2
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import math
import re
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Any

import yaml

from .analysis import extract_phase_trace
from .engine import (
    DEVICE_KINDS,
    DeviceSpec,
    LtcSpec,
    OutputSpec,
    RunResult,
    Scenario,
    ScenarioError,
    run_scenario,
)
from .events import EVENT_KINDS, Event
from .ibr_gfl import GflParams
from .ibr_gfm import GfmParams
from .machines import MachineParams
from .netmodel import BUS_KINDS, Branch, Bus, NetworkError, NetworkModel
from .slowdyn import CVR_MODES, CvrController, LtcState

EXIT_CODES = {"stable": 0, "s_lt1": 10, "s_lt3": 11, "collapse": 12}
EXIT_INPUT_ERROR = 2

DEFAULT_DT = 0.002
DEFAULT_T_END = 10.0


class ScenarioFileError(Exception):
    """Schema or reference error in a scenario file."""

    def __init__(self, message: str, path: str = "", line: int | None = None):
        where = path or "<root>"
        if line is not None:
            where = f"line {line}: {where}"
        super().__init__(f"{where}: {message}")
        self.path = path
        self.line = line


# ----------------------------------------------------------------------------
# YAML with line numbers


def _to_python(node: yaml.Node, path: str, lines: dict[str, int]) -> Any:
    lines[path] = node.start_mark.line + 1
    if isinstance(node, yaml.MappingNode):
        out: dict[str, Any] = {}
        for key_node, value_node in node.value:
            key = key_node.value
            sub = f"{path}.{key}" if path else str(key)
            if key in out:
                raise ScenarioFileError("duplicate key", sub, key_node.start_mark.line + 1)
            out[key] = _to_python(value_node, sub, lines)
        return out
    if isinstance(node, yaml.SequenceNode):
        return [_to_python(n, f"{path}[{i}]", lines) for i, n in enumerate(node.value)]
    return yaml.SafeLoader.construct_object(_SCALAR_LOADER, node)


class _ScalarLoader(yaml.SafeLoader):
    pass


_SCALAR_LOADER = _ScalarLoader("")


def load_document(text: str) -> tuple[Any, dict[str, int]]:
    """Parse YAML into plain Python values plus a map from dotted path to line."""
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
    except yaml.YAMLError as exc:
        mark = getattr(exc, "problem_mark", None)
        raise ScenarioFileError(f"YAML syntax error: {getattr(exc, 'problem', exc)}", "",
                                mark.line + 1 if mark else None) from exc
    if node is None:
        raise ScenarioFileError("empty scenario file")
    lines: dict[str, int] = {}
    return _to_python(node, "", lines), lines


# ----------------------------------------------------------------------------
# schema


class _Checker:
    def __init__(self, lines: dict[str, int]):
        self.lines = lines

    def fail(self, message: str, path: str) -> None:
        raise ScenarioFileError(message, path, self.lines.get(path))

    def mapping(self, value: Any, path: str, allowed: set[str], required: set[str] = frozenset()) -> dict:
        if not isinstance(value, dict):
            self.fail("expected a mapping", path)
        for key in value:
            if key not in allowed:
                sub = f"{path}.{key}" if path else str(key)
                self.fail(f"unknown key {key!r} (allowed: {', '.join(sorted(allowed))})", sub)
        for key in sorted(required):
            if key not in value:
                self.fail(f"missing required key {key!r}", path)
        return value

    def sequence(self, value: Any, path: str) -> list:
        if value is None:
            return []
        if not isinstance(value, list):
            self.fail("expected a list", path)
        return value

    def number(self, value: Any, path: str) -> float:
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            self.fail(f"expected a number, got {value!r}", path)
        return float(value)

    def text(self, value: Any, path: str) -> str:
        if not isinstance(value, str) or not value:
            self.fail(f"expected a non-empty string, got {value!r}", path)
        return value

    def flag(self, value: Any, path: str) -> bool:
        if not isinstance(value, bool):
            self.fail(f"expected true or false, got {value!r}", path)
        return value

    def choice(self, value: Any, path: str, options) -> str:
        if value not in options:
            self.fail(f"expected one of {', '.join(options)}, got {value!r}", path)
        return value


_BUS_KEYS = {"id", "base_kv", "kind", "v_setpoint", "p_load", "q_load", "p_gen", "q_gen"}
_BRANCH_KEYS = {"id", "from", "to", "r", "x", "b_shunt", "tap", "in_service"}

_DEVICE_PARAMS: dict[str, set[str]] = {
    "machine": {f.name for f in dataclasses.fields(MachineParams)},
    "gfl": {f.name for f in dataclasses.fields(GflParams)},
    "gfm": {f.name for f in dataclasses.fields(GfmParams)},
    "source": {"x_source"},
    "load": {"alpha", "beta"},
}
_TEXT_PARAMS = {"priority"}
_FLAG_PARAMS = {"oel_enabled"}

_LTC_PARAMS = {f.name for f in dataclasses.fields(LtcState)} - {"tap", "timer", "armed"} | {"t_meas"}
_OUTPUT_KEYS = {f.name for f in dataclasses.fields(OutputSpec)}


def _param_value(chk: _Checker, key: str, value: Any, path: str) -> Any:
    if key in _TEXT_PARAMS:
        return chk.text(value, path)
    if key in _FLAG_PARAMS:
        return chk.flag(value, path)
    chk.number(value, path)
    return value


def scenario_from_dict(doc: Any, lines: dict[str, int] | None = None) -> Scenario:
    """Validate a parsed scenario document and build the Scenario."""
    chk = _Checker(lines or {})
    top = chk.mapping(doc, "", {"name", "preset", "network", "devices", "events", "ltcs", "cvr",
                                "simulation", "outputs"}, {"network", "devices"})

    net_doc = chk.mapping(top["network"], "network", {"base_mva", "buses", "branches"}, {"buses"})
    buses = []
    for i, b in enumerate(chk.sequence(net_doc["buses"], "network.buses")):
        p = f"network.buses[{i}]"
        chk.mapping(b, p, _BUS_KEYS, {"id"})
        kw: dict[str, Any] = {"id": chk.text(b["id"], f"{p}.id")}
        if "kind" in b:
            kw["kind"] = chk.choice(b["kind"], f"{p}.kind", BUS_KINDS)
        for key, field_name in (("base_kv", "base_kv"), ("v_setpoint", "v_setpoint"), ("p_load", "p_load0"),
                                ("q_load", "q_load0"), ("p_gen", "p_gen"), ("q_gen", "q_gen")):
            if key in b:
                kw[field_name] = chk.number(b[key], f"{p}.{key}")
        try:
            buses.append(Bus(**kw))
        except NetworkError as exc:
            chk.fail(str(exc), p)
    bus_ids = {b.id for b in buses}

    branches = []
    for i, br in enumerate(chk.sequence(net_doc.get("branches"), "network.branches")):
        p = f"network.branches[{i}]"
        chk.mapping(br, p, _BRANCH_KEYS, {"id", "from", "to", "x"})
        for end in ("from", "to"):
            if chk.text(br[end], f"{p}.{end}") not in bus_ids:
                chk.fail(f"unknown bus {br[end]!r}", f"{p}.{end}")
        kw = {"id": chk.text(br["id"], f"{p}.id"), "from_bus": br["from"], "to_bus": br["to"]}
        for key, field_name in (("r", "r"), ("x", "x"), ("b_shunt", "b_shunt"), ("tap", "tap_ratio")):
            if key in br:
                kw[field_name] = chk.number(br[key], f"{p}.{key}")
        if "in_service" in br:
            kw["in_service"] = chk.flag(br["in_service"], f"{p}.in_service")
        try:
            branches.append(Branch(**kw))
        except NetworkError as exc:
            chk.fail(str(exc), p)
    branch_ids = {br.id for br in branches}
    try:
        base = chk.number(net_doc.get("base_mva", 100.0), "network.base_mva")
        network = NetworkModel(buses, branches, base)
    except NetworkError as exc:
        chk.fail(str(exc), "network")

    devices = []
    for i, d in enumerate(chk.sequence(top["devices"], "devices")):
        p = f"devices[{i}]"
        chk.mapping(d, p, {"kind", "name", "bus", "params"}, {"kind", "name", "bus"})
        kind = chk.choice(d["kind"], f"{p}.kind", DEVICE_KINDS)
        bus = chk.text(d["bus"], f"{p}.bus")
        if bus not in bus_ids:
            chk.fail(f"unknown bus {bus!r}", f"{p}.bus")
        params = chk.mapping(d.get("params") or {}, f"{p}.params", _DEVICE_PARAMS[kind])
        pairs = tuple((k, _param_value(chk, k, v, f"{p}.params.{k}")) for k, v in params.items())
        devices.append(DeviceSpec(kind, chk.text(d["name"], f"{p}.name"), bus, pairs))
    names = [d.name for d in devices]
    if len(set(names)) != len(names):
        chk.fail("device names must be unique", "devices")

    ltcs = []
    for i, c in enumerate(chk.sequence(top.get("ltcs"), "ltcs")):
        p = f"ltcs[{i}]"
        chk.mapping(c, p, {"name", "branch", "params"}, {"name", "branch"})
        branch = chk.text(c["branch"], f"{p}.branch")
        if branch not in branch_ids:
            chk.fail(f"unknown branch {branch!r}", f"{p}.branch")
        params = chk.mapping(c.get("params") or {}, f"{p}.params", _LTC_PARAMS)
        pairs = tuple((k, _param_value(chk, k, v, f"{p}.params.{k}")) for k, v in params.items())
        ltcs.append(LtcSpec(chk.text(c["name"], f"{p}.name"), branch, pairs))
    ltc_names = {c.name for c in ltcs}

    events = []
    for i, e in enumerate(chk.sequence(top.get("events"), "events")):
        p = f"events[{i}]"
        chk.mapping(e, p, {"kind", "time", "payload"}, {"kind", "time"})
        kind = chk.choice(e["kind"], f"{p}.kind", EVENT_KINDS)
        time = chk.number(e["time"], f"{p}.time")
        if time < 0:
            chk.fail("event time must be non-negative", f"{p}.time")
        payload = dict(chk.mapping(e.get("payload") or {}, f"{p}.payload",
                                   set(e.get("payload") or {})))
        _check_event_refs(chk, kind, payload, f"{p}.payload", branch_ids, set(names), ltc_names)
        events.append(Event(kind, time, payload))

    cvr = None
    if top.get("cvr") is not None:
        c = chk.mapping(top["cvr"], "cvr", {"mode", "t_activate", "delta"})
        kw = {}
        if "mode" in c:
            kw["mode"] = chk.choice(c["mode"], "cvr.mode", CVR_MODES)
        if "t_activate" in c:
            kw["t_activate"] = chk.number(c["t_activate"], "cvr.t_activate")
        if "delta" in c:
            kw["delta_setpoint"] = chk.number(c["delta"], "cvr.delta")
        try:
            cvr = CvrController(**kw)
        except ValueError as exc:
            chk.fail(str(exc), "cvr")

    sim = chk.mapping(top.get("simulation") or {}, "simulation", {"dt", "t_end"})
    dt = chk.number(sim.get("dt", DEFAULT_DT), "simulation.dt")
    t_end = chk.number(sim.get("t_end", DEFAULT_T_END), "simulation.t_end")
    if not dt > 0:
        chk.fail("dt must be positive", "simulation.dt")
    if not t_end > 0:
        chk.fail("t_end must be positive", "simulation.t_end")

    outputs = _outputs_from_dict(chk, top.get("outputs") or {})
    preset = top.get("preset")
    if preset is not None and preset not in (1, 2, 3, 4):
        chk.fail(f"preset tag must be 1..4, got {preset!r}", "preset")
    name = chk.text(top.get("name", "scenario"), "name")
    return Scenario(network, tuple(devices), tuple(events), tuple(ltcs), cvr, dt, t_end, outputs, preset, name)


def _check_event_refs(chk, kind, payload, path, branch_ids, device_names, ltc_names) -> None:
    if kind == "branch_trip":
        if "branch" not in payload:
            chk.fail("branch_trip needs a 'branch' entry", path)
        if payload["branch"] not in branch_ids:
            chk.fail(f"unknown branch {payload['branch']!r}", f"{path}.branch")
    elif kind == "tap_step":
        if payload.get("ltc") not in ltc_names:
            chk.fail(f"unknown LTC {payload.get('ltc')!r}", f"{path}.ltc")
    elif kind == "oel_limit":
        if payload.get("device") not in device_names:
            chk.fail(f"unknown device {payload.get('device')!r}", f"{path}.device")
    elif kind == "custom" and "device" in payload:
        if payload["device"] not in device_names:
            chk.fail(f"unknown device {payload['device']!r}", f"{path}.device")
        if "param" not in payload or "value" not in payload:
            chk.fail("custom device events need 'param' and 'value'", path)


def _outputs_from_dict(chk: _Checker, o: Any) -> OutputSpec:
    chk.mapping(o, "outputs", _OUTPUT_KEYS)
    kw: dict[str, Any] = {}
    if o.get("channels") is not None:
        kw["channels"] = tuple(chk.text(c, f"outputs.channels[{i}]")
                               for i, c in enumerate(chk.sequence(o["channels"], "outputs.channels")))
    if "phase_pairs" in o:
        pairs = []
        for i, pair in enumerate(chk.sequence(o["phase_pairs"], "outputs.phase_pairs")):
            p = f"outputs.phase_pairs[{i}]"
            if not isinstance(pair, list) or len(pair) != 2:
                chk.fail("expected a pair of channel names", p)
            pairs.append((chk.text(pair[0], f"{p}[0]"), chk.text(pair[1], f"{p}[1]")))
        kw["phase_pairs"] = tuple(pairs)
    for key in ("phase_window", "scan_interval"):
        if key in o:
            kw[key] = chk.number(o[key], f"outputs.{key}")
            if not kw[key] > 0:
                chk.fail("must be positive", f"outputs.{key}")
    if "annotation" in o:
        kw["annotation"] = chk.text(o["annotation"], "outputs.annotation")
    if "eigen_scan" in o:
        kw["eigen_scan"] = chk.flag(o["eigen_scan"], "outputs.eigen_scan")
    if "stride" in o:
        stride = o["stride"]
        if isinstance(stride, bool) or not isinstance(stride, int) or stride < 1:
            chk.fail(f"stride must be a positive integer, got {stride!r}", "outputs.stride")
        kw["stride"] = stride
    return OutputSpec(**kw)


def parse_scenario(path: str | Path) -> Scenario:
    """Read and validate a scenario file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioFileError(f"cannot read {path}: {exc.strerror}") from exc
    doc, lines = load_document(text)
    return scenario_from_dict(doc, lines)


# ----------------------------------------------------------------------------
# normalized dump


def scenario_to_dict(sc: Scenario) -> dict[str, Any]:
    """Plain-data form of a scenario with every scenario-level default spelled out."""
    net = sc.network
    doc: dict[str, Any] = {"name": sc.name, "preset": sc.preset}
    doc["network"] = {
        "base_mva": net.base_mva,
        "buses": [{"id": b.id, "base_kv": b.base_kv, "kind": b.kind, "v_setpoint": b.v_setpoint,
                   "p_load": b.p_load0, "q_load": b.q_load0, "p_gen": b.p_gen, "q_gen": b.q_gen}
                  for b in net.buses],
        "branches": [{"id": br.id, "from": br.from_bus, "to": br.to_bus, "r": br.r, "x": br.x,
                      "b_shunt": br.b_shunt, "tap": br.tap_ratio, "in_service": br.in_service}
                     for br in net.branches],
    }
    doc["devices"] = [{"kind": d.kind, "name": d.name, "bus": d.bus, "params": dict(d.params)}
                      for d in sc.devices]
    doc["ltcs"] = [{"name": c.name, "branch": c.branch, "params": dict(c.params)} for c in sc.ltcs]
    doc["events"] = [{"kind": e.kind, "time": e.time, "payload": dict(e.payload)} for e in sc.events]
    doc["cvr"] = None if sc.cvr is None else {
        "mode": sc.cvr.mode, "t_activate": sc.cvr.t_activate, "delta": sc.cvr.delta_setpoint}
    doc["simulation"] = {"dt": sc.dt, "t_end": sc.t_end}
    o = sc.outputs
    doc["outputs"] = {
        "channels": None if o.channels is None else list(o.channels),
        "phase_pairs": [list(p) for p in o.phase_pairs],
        "phase_window": o.phase_window,
        "annotation": o.annotation,
        "eigen_scan": o.eigen_scan,
        "scan_interval": o.scan_interval,
        "stride": o.stride,
    }
    return doc


class _Dumper(yaml.SafeDumper):
    pass


def _flow_short_lists(dumper, data):
    flow = all(not isinstance(v, (dict, list)) for v in data) and len(data) <= 4
    return dumper.represent_sequence("tag:yaml.org,2002:seq", data, flow_style=flow)


_Dumper.add_representer(list, _flow_short_lists)


def dump_scenario(sc: Scenario) -> str:
    return yaml.dump(scenario_to_dict(sc), Dumper=_Dumper, sort_keys=False, default_flow_style=False)


# ----------------------------------------------------------------------------
# output files


def _fmt(x: float) -> str:
    if isinstance(x, bool):
        return str(int(x))
    if isinstance(x, float) and not math.isfinite(x):
        return "nan" if math.isnan(x) else ("inf" if x > 0 else "-inf")
    return repr(float(x))


def _short(name: str) -> str:
    return re.sub(r"[^A-Za-z0-9]+", "_", name.rsplit(".", 1)[-1]).strip("_") or "ch"


def phase_file_names(pairs) -> list[str]:
    """``phase_<a>_<b>.csv`` from the last component of each channel name,
    falling back to full names when two pairs would collide."""
    short = [f"phase_{_short(a)}_{_short(b)}.csv" for a, b in pairs]
    if len(set(short)) == len(short):
        return short
    full = [re.sub(r"[^A-Za-z0-9]+", "_", f"{a}_{b}").strip("_") for a, b in pairs]
    return [f"phase_{f}.csv" for f in full]


def _write_csv(path: Path, header: list[str], rows) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def summary_text(sc: Scenario, res: RunResult) -> str:
    lines = [f"scenario {sc.name}", f"verdict {res.verdict}", f"exit_code {EXIT_CODES[res.verdict]}"]
    if res.collapsed:
        lines.append(f"collapse_reason {res.collapse_reason}")
    lines.append(f"crossings {len(res.crossings)}")
    for c in res.crossings:
        lines.append(f"crossing t={c.time:.3f} kind={c.kind} imag={c.imag:.4f} direction={c.direction:+d}")
    oel = [e for e in res.journal if e.kind == "oel_limit"]
    lines.append("oel_events " + (" ".join(f"{e.time:.3f}" for e in oel) if oel else "none"))
    taps = [e for e in res.journal if e.kind == "tap_step"]
    lines.append(f"tap_events {len(taps)}")
    lc = res.limit_cycle
    if lc is not None:
        lines.append(lc.as_text().rstrip("\n"))
    else:
        lines.append("limit_cycle not_assessed")
    lines.append(f"steps {res.stats.get('steps', 0)}")
    return "\n".join(lines) + "\n"


def emit_outputs(sc: Scenario, res: RunResult, out_dir: str | Path) -> list[Path]:
    """Write the run artifacts; returns the written paths."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create output directory {out}: {exc.strerror}") from exc
    written = []
    ts = res.timeseries

    p = out / "timeseries.csv"
    _write_csv(p, ["t"] + ts.names, ([_fmt(t)] + [_fmt(v) for v in row] for t, row in zip(ts.t, ts.data)))
    written.append(p)

    p = out / "events.csv"
    _write_csv(p, ["time", "kind", "payload"], (e.as_row() for e in res.journal))
    written.append(p)

    p = out / "eigenscan.csv"
    written.append(p)
    scan = res.scan
    n_modes = max((len(s) for s in scan.spectra), default=0) if scan is not None else 0
    header = ["t", "equilibrium_found"] + [f"{part}_{k}" for k in range(n_modes) for part in ("re", "im")]
    rows = []
    if scan is not None:
        for t, ok, sp in zip(scan.times, scan.equilibrium_found, scan.spectra):
            vals = []
            for k in range(n_modes):
                z = complex(sp[k]) if k < len(sp) else complex(math.nan, math.nan)
                vals += [_fmt(z.real), _fmt(z.imag)]
            rows.append([_fmt(t), str(int(ok))] + vals)
    _write_csv(p, header, rows)

    if len(ts):
        t_end = float(ts.t[-1])
        window = (max(float(ts.t[0]), t_end - sc.outputs.phase_window), t_end)
        ann = sc.outputs.annotation if sc.outputs.annotation in ts else None
        for (a, b), fname in zip(sc.outputs.phase_pairs, phase_file_names(sc.outputs.phase_pairs)):
            p = out / fname
            header = ["t", a, b] + ([ann] if ann else [])
            if a in ts and b in ts and window[1] > window[0]:
                trace = extract_phase_trace(ts, a, b, window, ann)
                rows = []
                for k, t in enumerate(trace.times):
                    row = [_fmt(t), _fmt(trace.samples[k, 0]), _fmt(trace.samples[k, 1])]
                    if ann:
                        row.append(_fmt(trace.annotation[k]))
                    rows.append(row)
            else:
                rows = []
            _write_csv(p, header, rows)
            written.append(p)

    p = out / "summary.txt"
    p.write_text(summary_text(sc, res))
    written.append(p)
    return written


# ----------------------------------------------------------------------------
# command line


def _apply_overrides(sc: Scenario, args) -> Scenario:
    kw = {}
    if getattr(args, "dt", None) is not None:
        kw["dt"] = args.dt
    if getattr(args, "t_end", None) is not None:
        kw["t_end"] = args.t_end
    return dataclasses.replace(sc, **kw) if kw else sc


def _run_one(sc: Scenario, out_dir: Path, quiet: bool = False) -> int:
    res = run_scenario(sc)
    emit_outputs(sc, res, out_dir)
    if not quiet:
        sys.stdout.write(summary_text(sc, res))
    return EXIT_CODES[res.verdict]


def _batch_worker(job: tuple[str, str, float | None, float | None]) -> tuple[str, int, str]:
    path, out_dir, dt, t_end = job
    try:
        sc = parse_scenario(path)
        sc = _apply_overrides(sc, argparse.Namespace(dt=dt, t_end=t_end))
        code = _run_one(sc, Path(out_dir), quiet=True)
        return path, code, ""
    except (ScenarioFileError, ScenarioError) as exc:
        return path, EXIT_INPUT_ERROR, str(exc)


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="mtsdyn", description="Phasor-domain multi-time-scale stability runs.")
    sub = ap.add_subparsers(dest="verb", required=True)

    def overrides(p):
        p.add_argument("--dt", type=float, help="integration step override (s)")
        p.add_argument("--t-end", type=float, help="horizon override (s)")

    p = sub.add_parser("run", help="run a scenario file and write outputs")
    p.add_argument("scenario")
    p.add_argument("--out", default="out")
    overrides(p)

    p = sub.add_parser("preset", help="run a built-in study case")
    p.add_argument("case", type=int, choices=(1, 2, 3, 4))
    p.add_argument("--out", default=None)
    p.add_argument("--dump", action="store_true", help="print the preset as a scenario file instead of running")
    overrides(p)

    p = sub.add_parser("scan", help="eigen scan along the trajectory only")
    p.add_argument("scenario")
    p.add_argument("--out", default=None)
    overrides(p)

    p = sub.add_parser("check", help="validate a scenario file and print its normalized form")
    p.add_argument("scenario")

    p = sub.add_parser("batch", help="run several scenario files, one output directory each")
    p.add_argument("scenarios", nargs="+")
    p.add_argument("--out", default="out")
    p.add_argument("--jobs", type=int, default=1)
    overrides(p)
    return ap


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.verb == "check":
            sc = parse_scenario(args.scenario)
            sys.stdout.write(dump_scenario(sc))
            return 0
        if args.verb == "preset":
            from .reduced_system import build_preset

            sc = _apply_overrides(build_preset(args.case), args)
            if args.dump:
                sys.stdout.write(dump_scenario(sc))
                return 0
            return _run_one(sc, Path(args.out or f"out/case{args.case}"))
        if args.verb == "run":
            sc = _apply_overrides(parse_scenario(args.scenario), args)
            return _run_one(sc, Path(args.out))
        if args.verb == "scan":
            sc = _apply_overrides(parse_scenario(args.scenario), args)
            res = run_scenario(sc, eigen_scan=True)
            if args.out:
                emit_outputs(sc, res, args.out)
            for c in res.crossings:
                print(f"{c.time:.3f} {c.kind} imag={c.imag:.4f} direction={c.direction:+d}")
            if not res.crossings:
                print("no crossings")
            return EXIT_CODES[res.verdict]
        if args.verb == "batch":
            return _batch(args)
    except (ScenarioFileError, ScenarioError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    except OSError as exc:
        print(f"output error: {exc}", file=sys.stderr)
        return EXIT_INPUT_ERROR
    return EXIT_INPUT_ERROR


def _batch(args) -> int:
    out = Path(args.out)
    stems = [Path(s).stem for s in args.scenarios]
    dirs = [out / (stem if stems.count(stem) == 1 else f"{stem}_{i}") for i, stem in enumerate(stems)]
    jobs = [(s, str(d), args.dt, args.t_end) for s, d in zip(args.scenarios, dirs)]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_batch_worker, jobs))
    else:
        results = [_batch_worker(j) for j in jobs]
    worst = 0
    for path, code, err in results:
        status = err or next(k for k, v in EXIT_CODES.items() if v == code)
        print(f"{path}\t{code}\t{status}")
        worst = max(worst, code)
    return worst


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
