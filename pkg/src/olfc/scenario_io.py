"""Scenario files: schema, validation, canonical serialization, hashing.

A scenario is a single YAML document with nested sections::

    name: four-area-case-study
    network:
      areas:                      # one mapping per area
        - {T_p: 21.0, T_t: 0.30, T_g: 0.080, T_V: 5.54, K_p: 120.0,
           R: 2.5, X_d: 1.85, X_d_prime: 0.25, E_f: 1.0, D: 0.02}
      lines:                      # 1-based area ids
        - {between: [1, 2], B: -5.4}
      self_susceptance: derive    # derive | strict
    controller:
      variant: ssosm-consensus    # ssosm-consensus | ssosm-a-zero | primal-dual
      M1: 3.0                     # scalars broadcast per area
      M2: 1.0
      M3: 0.1
      W_max: 10.0
      alpha_star: 1.0
      T_theta: 0.33
      communication: {edges: [[1, 2], [2, 3], [3, 4]]}
      cost: {Q: [...], Rlin: 0.0, C0: 0.0, unit: 1.0e4}
    demand:
      baseline: 0.0
      events:
        - {time: 1.0, delta: [0.010, 0.015, 0.012, 0.014]}
    simulation:
      t_end: 60.0
      dt: 1.0e-4
      record_stride: 10
      initial_condition: equilibrium
    envelope:                     # optional, [lo, hi] ranges
      f: [-0.03, 0.03]

``cost.unit`` scales the listed coefficients into currency/h.
``cost.coordination_scale`` (default: unit) sets the units in which
marginal costs travel on the communication channel; the dispatch optimum
and every relative criterion are invariant to it, but explicit
integration requires it to be of the order of the listed coefficients.

Unknown keys are rejected.  The config hash is a SHA-256 over the
canonicalized semantic content, so formatting and key order never change
it.
"""

import hashlib
import json

import numpy as np
import yaml

from .controller import ControllerConfig, OperatingEnvelope
from .dispatch import CostModel
from .errors import ValidationError, ValidationIssue
from .network import AreaParams, Network, NetworkTopology
from .simulate import LoadEvent, Scenario, SystemState

_AREA_KEYS = {"T_p", "T_t", "T_g", "T_V", "K_p", "R", "X_d", "X_d_prime", "E_f", "B_ii", "D"}
_ENVELOPE_KEYS = {"regime", "f", "V", "eta", "P_t", "P_g", "theta", "u", "P_d", "v", "lam",
                  "marginal", "marginal_spread", "tracking", "sigma", "setpoint_offset"}


def _require_keys(mapping, allowed, required, path, issues):
    if not isinstance(mapping, dict):
        issues.append(ValidationIssue("schema.mapping-expected", path, f"expected a mapping, got {type(mapping).__name__}"))
        return False
    for key in mapping:
        if key not in allowed:
            issues.append(ValidationIssue("schema.unknown-key", f"{path}.{key}", "unknown key"))
    ok = True
    for key in required:
        if key not in mapping:
            issues.append(ValidationIssue("schema.missing-key", f"{path}.{key}", "required key missing"))
            ok = False
    return ok


def _vec(value, n, path, issues, name="value"):
    try:
        return np.broadcast_to(np.asarray(value, dtype=float), (n,)).copy()
    except Exception:
        issues.append(ValidationIssue("schema.bad-vector", path, f"{name} must be a number or list of {n} numbers"))
        return np.zeros(n)


def load_scenario(path) -> Scenario:
    """Parse and validate a scenario file; all module validators run.

    Raises :class:`ValidationError` with rule identifiers and config
    paths on any violation; YAML syntax errors keep their line/column
    information.
    """
    with open(path, "r") as fh:
        try:
            raw = yaml.safe_load(fh)
        except yaml.YAMLError as exc:
            mark = getattr(exc, "problem_mark", None)
            where = f" at line {mark.line + 1}, column {mark.column + 1}" if mark else ""
            raise ValidationError(ValidationIssue("schema.yaml-parse", str(path),
                                                  f"YAML parse failure{where}: {exc}")) from exc
    return scenario_from_dict(raw, source=str(path))


def scenario_from_dict(raw, source="<dict>") -> Scenario:
    issues = []
    if not _require_keys(raw, {"name", "network", "controller", "demand", "simulation", "envelope"},
                         {"network", "controller", "demand", "simulation"}, "scenario", issues):
        raise ValidationError(issues)

    # network section
    net_sec = raw["network"]
    _require_keys(net_sec, {"areas", "lines", "self_susceptance"}, {"areas", "lines"}, "network", issues)
    areas = []
    raw_areas = net_sec.get("areas", []) if isinstance(net_sec, dict) else []
    for idx, a in enumerate(raw_areas):
        apath = f"network.areas[{idx}]"
        if _require_keys(a, _AREA_KEYS, {"T_p", "T_t", "T_g", "T_V", "K_p", "R", "X_d", "X_d_prime"}, apath, issues):
            try:
                areas.append(AreaParams(**{k: float(v) if v is not None else None for k, v in a.items()}))
            except (TypeError, ValueError) as exc:
                issues.append(ValidationIssue("schema.bad-number", apath, str(exc)))
    n = len(areas)
    lines = []
    for idx, ln in enumerate(net_sec.get("lines", []) if isinstance(net_sec, dict) else []):
        lpath = f"network.lines[{idx}]"
        if _require_keys(ln, {"between", "B"}, {"between", "B"}, lpath, issues):
            try:
                i, j = (int(x) for x in ln["between"])
                lines.append((i - 1, j - 1, float(ln["B"])))
            except (TypeError, ValueError):
                issues.append(ValidationIssue("schema.bad-line", lpath, "line needs 'between: [i, j]' (1-based) and 'B'"))
    mode = net_sec.get("self_susceptance", "derive") if isinstance(net_sec, dict) else "derive"
    if issues:
        raise ValidationError(issues)
    try:
        network = Network(areas, NetworkTopology(n=n, lines=tuple(lines)), self_susceptance=mode)
    except ValidationError as exc:
        issues.extend(exc.issues)
        raise ValidationError(issues) from exc

    # controller section
    ctl = raw["controller"]
    _require_keys(ctl, {"variant", "M1", "M2", "M3", "W_max", "alpha_star", "T_theta",
                        "communication", "cost", "peak_epsilon"},
                  {"M1", "M2", "M3", "W_max", "alpha_star", "T_theta", "communication", "cost"},
                  "controller", issues)
    cost_sec = ctl.get("cost", {}) if isinstance(ctl, dict) else {}
    _require_keys(cost_sec, {"Q", "Rlin", "C0", "unit", "coordination_scale"}, {"Q"}, "controller.cost", issues)
    com_sec = ctl.get("communication", {}) if isinstance(ctl, dict) else {}
    _require_keys(com_sec, {"edges"}, {"edges"}, "controller.communication", issues)
    if issues:
        raise ValidationError(issues)

    unit = float(cost_sec.get("unit", 1.0))
    coord = float(cost_sec.get("coordination_scale", unit))
    Q = _vec(cost_sec["Q"], n, "controller.cost.Q", issues) * unit
    Rlin = _vec(cost_sec.get("Rlin", 0.0), n, "controller.cost.Rlin", issues) * unit
    C0 = _vec(cost_sec.get("C0", 0.0), n, "controller.cost.C0", issues) * unit
    edges = tuple((int(i) - 1, int(j) - 1) for i, j in com_sec.get("edges", []))
    try:
        cost = CostModel(Q=Q, Rlin=Rlin, C0=C0)
        controller = ControllerConfig(
            M1=_vec(ctl["M1"], n, "controller.M1", issues),
            M2=_vec(ctl["M2"], n, "controller.M2", issues),
            M3=_vec(ctl["M3"], n, "controller.M3", issues),
            W_max=_vec(ctl["W_max"], n, "controller.W_max", issues),
            alpha_star=_vec(ctl["alpha_star"], n, "controller.alpha_star", issues),
            T_theta=_vec(ctl["T_theta"], n, "controller.T_theta", issues),
            cost=cost, com_edges=edges, variant=ctl.get("variant", "ssosm-consensus"),
            cost_scale=coord, eps_peak=float(ctl.get("peak_epsilon", 1e-9)))
    except ValidationError as exc:
        issues.extend(exc.issues)
        raise ValidationError(issues) from exc

    # demand section
    dem = raw["demand"]
    _require_keys(dem, {"baseline", "events"}, set(), "demand", issues)
    baseline = _vec(dem.get("baseline", 0.0), n, "demand.baseline", issues)
    events = []
    for idx, ev in enumerate(dem.get("events", []) or []):
        epath = f"demand.events[{idx}]"
        if _require_keys(ev, {"time", "delta"}, {"time", "delta"}, epath, issues):
            events.append(LoadEvent(time=float(ev["time"]), delta=_vec(ev["delta"], n, epath + ".delta", issues)))

    # simulation section
    sim = raw["simulation"]
    _require_keys(sim, {"t_end", "dt", "record_stride", "initial_condition"}, set(), "simulation", issues)
    if issues:
        raise ValidationError(issues)
    initial = sim.get("initial_condition", "equilibrium")
    if isinstance(initial, dict):
        st_issues = []
        _require_keys(initial, {"explicit"}, {"explicit"}, "simulation.initial_condition", st_issues)
        if st_issues:
            raise ValidationError(issues + st_issues)
        ex = initial["explicit"]
        if not isinstance(ex, dict):
            raise ValidationError(issues + [ValidationIssue(
                "simulation.initial-condition", "simulation.initial_condition.explicit",
                "explicit initial condition must be a mapping of state vectors")])
        m = network.m
        initial = SystemState(
            eta=_vec(ex.get("eta", 0.0), m, "initial.eta", issues),
            f=_vec(ex.get("f", 0.0), n, "initial.f", issues),
            V=_vec(ex.get("V", 1.0), n, "initial.V", issues),
            P_t=_vec(ex.get("P_t", 0.0), n, "initial.P_t", issues),
            P_g=_vec(ex.get("P_g", 0.0), n, "initial.P_g", issues),
            theta=_vec(ex.get("theta", 0.0), n, "initial.theta", issues),
            u=_vec(ex.get("u", 0.0), n, "initial.u", issues),
            v=(_vec(ex["v"], len(edges), "initial.v", issues) if "v" in ex else None),
            lam=(_vec(ex["lam"], n, "initial.lam", issues) if "lam" in ex else None))
    elif initial != "equilibrium":
        issues.append(ValidationIssue("simulation.initial-condition", "simulation.initial_condition",
                                      f"expected 'equilibrium' or an explicit state mapping, got {initial!r}"))

    envelope = None
    if raw.get("envelope") is not None:
        env_sec = raw["envelope"]
        _require_keys(env_sec, _ENVELOPE_KEYS, set(), "envelope", issues)
        if not issues:
            ranges = {}
            regime = env_sec.get("regime", "raw")
            for key, val in env_sec.items():
                if key == "regime":
                    continue
                if not (isinstance(val, (list, tuple)) and len(val) == 2):
                    issues.append(ValidationIssue("envelope.range", f"envelope.{key}", "expected [lo, hi]"))
                else:
                    ranges[key] = (val[0], val[1])
            if "P_d" not in ranges:
                ranges["P_d"] = (-network.D, network.D)
            if not issues:
                try:
                    envelope = OperatingEnvelope.from_ranges(n, network.m, mc=len(edges),
                                                             regime=regime, **ranges)
                except ValueError as exc:
                    issues.append(ValidationIssue("envelope.range", "envelope", str(exc)))

    if issues:
        raise ValidationError(issues)
    try:
        return Scenario(network=network, controller=controller, baseline=baseline,
                        events=tuple(events),
                        t_end=float(sim.get("t_end", 60.0)), dt=float(sim.get("dt", 1e-4)),
                        record_stride=int(sim.get("record_stride", 10)),
                        initial=initial, envelope=envelope,
                        name=str(raw.get("name", source)))
    except ValidationError as exc:
        raise ValidationError(issues + exc.issues) from exc


def _float(x):
    return float(x)


def scenario_to_dict(scenario: Scenario) -> dict:
    """Canonical semantic content of a scenario (plain lists/floats,
    1-based indices, cost in currency/h with unit 1)."""
    net = scenario.network
    ctl = scenario.controller
    d = {
        "name": scenario.name,
        "network": {
            "areas": [{k: (None if getattr(a, k) is None else _float(getattr(a, k)))
                       for k in sorted(_AREA_KEYS)} for a in net.areas],
            "lines": [{"between": [i + 1, j + 1], "B": _float(b)} for (i, j, b) in net.topology.lines],
            "self_susceptance": net.self_susceptance,
        },
        "controller": {
            "variant": ctl.variant,
            "M1": [_float(x) for x in ctl.M1],
            "M2": [_float(x) for x in ctl.M2],
            "M3": [_float(x) for x in ctl.M3],
            "W_max": [_float(x) for x in ctl.W_max],
            "alpha_star": [_float(x) for x in ctl.alpha_star],
            "T_theta": [_float(x) for x in ctl.T_theta],
            "peak_epsilon": _float(ctl.eps_peak),
            "communication": {"edges": [[i + 1, j + 1] for (i, j) in ctl.com_edges]},
            "cost": {"Q": [_float(x) for x in ctl.cost.Q],
                     "Rlin": [_float(x) for x in ctl.cost.Rlin],
                     "C0": [_float(x) for x in ctl.cost.C0],
                     "unit": 1.0,
                     "coordination_scale": _float(ctl.cost_scale)},
        },
        "demand": {
            "baseline": [_float(x) for x in scenario.baseline],
            "events": [{"time": _float(ev.time), "delta": [_float(x) for x in ev.delta]}
                       for ev in scenario.events],
        },
        "simulation": {
            "t_end": _float(scenario.t_end),
            "dt": _float(scenario.dt),
            "record_stride": int(scenario.record_stride),
            "initial_condition": "equilibrium",
        },
    }
    if isinstance(scenario.initial, SystemState):
        st = scenario.initial
        ex = {"eta": [_float(x) for x in st.eta], "f": [_float(x) for x in st.f],
              "V": [_float(x) for x in st.V], "P_t": [_float(x) for x in st.P_t],
              "P_g": [_float(x) for x in st.P_g], "theta": [_float(x) for x in st.theta],
              "u": [_float(x) for x in st.u]}
        if st.v is not None:
            ex["v"] = [_float(x) for x in st.v]
        if st.lam is not None:
            ex["lam"] = [_float(x) for x in st.lam]
        d["simulation"]["initial_condition"] = {"explicit": ex}
    if scenario.envelope is not None:
        env = {"regime": scenario.envelope.regime}
        for key in sorted(_ENVELOPE_KEYS - {"regime"}):
            pair = getattr(scenario.envelope, key)
            if pair is None:
                continue
            lo, hi = pair
            env[key] = [[_float(x) for x in lo], [_float(x) for x in hi]]
        d["envelope"] = env
    return d


def scenario_hash(scenario: Scenario) -> str:
    """SHA-256 over the canonical JSON form of the scenario."""
    blob = json.dumps(scenario_to_dict(scenario), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode()).hexdigest()


def save_scenario(scenario: Scenario, path):
    """Serialize a scenario back to YAML (canonical form)."""
    with open(path, "w") as fh:
        yaml.safe_dump(scenario_to_dict(scenario), fh, sort_keys=False)
