"""Command-line front end and the JSON file formats behind it.

Four file-facing commands (synth, certify, simulate, sweep) plus a
self-contained reproduction report (appendix-a).  Exit codes are part of
the contract: 0 success, 1 bad input or numerical breakdown, 2 a refusal
(controller denied, certificate not granted).

Scenario files are plain JSON in SI units (ohm, henry, farad, volt,
second), no unit strings, so fixtures diff cleanly.  Parse and serialize
are exact inverses on the parsed object.
"""

from __future__ import annotations

import argparse
import dataclasses
import importlib.resources
import json
import pathlib
import sys
from typing import Dict, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from . import baselines
from .certify import (
    FAIL,
    HYPOTHESIS_UNMET,
    PASS,
    certificate_to_json,
    check_global,
    check_lasalle_kernel,
    check_theorem1,
    closed_loop,
)
from .model import (
    DguParams,
    LineParams,
    LoadModel,
    MicrogridTopology,
    assemble_global,
    augmented_dgu,
)
from .simulate import (
    LoadStep,
    PlugIn,
    RefStep,
    Scenario,
    Unplug,
    simulate,
    trajectory_to_csv,
    write_event_log,
)
from .sweep import SweepGrid, run_sweep, summary_json, write_sweep_csv
from .synthesis import (
    Denied,
    LocalController,
    NumericalFailure,
    SynthesisConfig,
    controller_to_json,
    synthesize_all,
)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_DENIED = 2

PACKAGED_SCENARIO = "scenario_iv.json"


def packaged_scenario_path() -> pathlib.Path:
    """Filesystem path of the bundled six-DGU demonstration scenario."""
    return pathlib.Path(
        importlib.resources.files(__package__) / PACKAGED_SCENARIO)


# ---------------------------------------------------------------------------
# scenario files

def _load_from_json(obj: Mapping) -> LoadModel:
    return LoadModel(str(obj["type"]), float(obj["value"]))


def _load_to_json(load: LoadModel) -> dict:
    return {"type": load.kind, "value": load.value}


def _params_from_json(obj: Mapping) -> DguParams:
    return DguParams(r_t=float(obj["r_t"]), l_t=float(obj["l_t"]),
                     c_t=float(obj["c_t"]), load=_load_from_json(obj["load"]),
                     v_ref=float(obj["v_ref"]))


def _params_to_json(params: DguParams) -> dict:
    return {"r_t": params.r_t, "l_t": params.l_t, "c_t": params.c_t,
            "load": _load_to_json(params.load), "v_ref": params.v_ref}


def _line_from_json(obj: Mapping) -> LineParams:
    l = obj.get("l")
    return LineParams(int(obj["i"]), int(obj["j"]), float(obj["r"]),
                      None if l is None else float(l))


def _line_to_json(line: LineParams) -> dict:
    out = {"i": line.i, "j": line.j, "r": line.r}
    if line.l is not None:
        out["l"] = line.l
    return out


def _event_from_json(obj: Mapping):
    t = float(obj["t"])
    kind = str(obj["type"])
    if kind == "plug_in":
        return PlugIn(t, int(obj["dgu"]), _params_from_json(obj["params"]),
                      tuple(_line_from_json(ln) for ln in obj["lines"]))
    if kind == "unplug":
        return Unplug(t, int(obj["dgu"]))
    if kind == "load_step":
        return LoadStep(t, int(obj["dgu"]), _load_from_json(obj["load"]))
    if kind == "ref_step":
        return RefStep(t, int(obj["dgu"]), float(obj["v_ref"]))
    raise ValueError(f"unknown event type {kind!r}")


def _event_to_json(event) -> dict:
    if isinstance(event, PlugIn):
        return {"t": event.t, "type": "plug_in", "dgu": event.dgu_id,
                "params": _params_to_json(event.params),
                "lines": [_line_to_json(ln) for ln in event.lines]}
    if isinstance(event, Unplug):
        return {"t": event.t, "type": "unplug", "dgu": event.dgu_id}
    if isinstance(event, LoadStep):
        return {"t": event.t, "type": "load_step", "dgu": event.dgu_id,
                "load": _load_to_json(event.load)}
    if isinstance(event, RefStep):
        return {"t": event.t, "type": "ref_step", "dgu": event.dgu_id,
                "v_ref": event.v_ref}
    raise ValueError(f"cannot serialize event {event!r}")


def parse_scenario(payload: Mapping) -> Scenario:
    try:
        dgus = {int(entry["id"]): _params_from_json(entry)
                for entry in payload["dgus"]}
        lines = tuple(_line_from_json(entry) for entry in payload["lines"])
        alphas = payload.get("alphas")
        return Scenario(
            initial_topology=MicrogridTopology(dgus, lines),
            sigma_bar=float(payload["sigma_bar"]),
            events=tuple(_event_from_json(ev)
                         for ev in payload.get("events", [])),
            t_end=float(payload["t_end"]),
            dt=float(payload.get("dt", 1e-5)),
            line_model=str(payload.get("line_model", "qsl")),
            alphas=None if alphas is None else tuple(map(float, alphas)),
            record_dt=float(payload.get("record_dt", 1e-4)),
        )
    except KeyError as exc:
        raise ValueError(f"scenario file is missing field {exc}") from None


def scenario_to_json(scenario: Scenario) -> dict:
    top = scenario.initial_topology
    payload = {"sigma_bar": scenario.sigma_bar}
    if scenario.alphas is not None:
        payload["alphas"] = list(scenario.alphas)
    payload.update({
        "t_end": scenario.t_end,
        "dt": scenario.dt,
        "record_dt": scenario.record_dt,
        "line_model": scenario.line_model,
        "dgus": [{"id": dgu_id, **_params_to_json(top.dgus[dgu_id])}
                 for dgu_id in top.ids],
        "lines": [_line_to_json(ln) for ln in top.lines],
        "events": [_event_to_json(ev) for ev in scenario.events],
    })
    return payload


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as fh:
        return parse_scenario(json.load(fh))


# ---------------------------------------------------------------------------
# controller bundles

def bundle_to_json(controllers: Mapping[int, LocalController],
                   cfg: SynthesisConfig) -> dict:
    return {
        "sigma_bar": cfg.sigma_bar,
        "alphas": list(cfg.alphas),
        "controllers": [controller_to_json(dgu_id, controllers[dgu_id], cfg)
                        for dgu_id in sorted(controllers)],
    }


def controller_from_json(entry: Mapping,
                         params: DguParams) -> Union[LocalController,
                                                     np.ndarray]:
    """Rebuild a controller from a bundle entry.

    Entries written by `synth` carry the full structured certificate and
    come back as LocalController.  Entries carrying only a gain (hand
    written, or exported from the baseline designs) come back as the bare
    gain row; those can be simulated and their closed loop inspected, but
    not certified.
    """
    k = np.asarray(entry["K"], dtype=float)
    if k.shape != (3,):
        raise ValueError("controller gain K must have three entries")
    if "P" not in entry:
        return k
    p = np.asarray(entry["P"], dtype=float)
    eta = float(entry["eta"])
    delta = float(entry["delta"])
    diag = entry.get("diagnostics", {})
    raw = {"gamma": np.asarray(diag.get("gamma", [0.0, 0.0, 0.0])),
           "beta": float(diag.get("beta", 0.0)),
           "zeta": float(diag.get("zeta", 0.0))}
    hat = augmented_dgu(params)
    f = hat.a_hat_ii + np.outer(hat.b_hat[:, 0], k)
    return LocalController(k, p, eta, raw, delta, f.T @ p + p @ f)


def load_bundle(path, topology: MicrogridTopology
                ) -> Tuple[float, Dict[int, Union[LocalController,
                                                  np.ndarray]]]:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    sigma_bar = float(payload["sigma_bar"])
    controllers = {}
    for entry in payload["controllers"]:
        dgu_id = int(entry["dgu_id"])
        if dgu_id not in topology.dgus:
            raise ValueError(f"bundle names DGU {dgu_id}, "
                             "absent from the scenario")
        controllers[dgu_id] = controller_from_json(entry,
                                                   topology.dgus[dgu_id])
    missing = set(topology.ids) - set(controllers)
    if missing:
        raise ValueError(f"bundle has no controller for DGUs "
                         f"{sorted(missing)}")
    return sigma_bar, controllers


# ---------------------------------------------------------------------------
# commands

def _write_or_print(text: str, out: Optional[str]) -> None:
    if out is None:
        print(text, end="" if text.endswith("\n") else "\n")
    else:
        with open(out, "w", encoding="utf-8") as fh:
            fh.write(text if text.endswith("\n") else text + "\n")


def _synthesize_for(scenario: Scenario,
                    sigma_bar: Optional[float]) -> Tuple[SynthesisConfig,
                                                         dict, dict]:
    cfg_kwargs = {"sigma_bar": scenario.sigma_bar if sigma_bar is None
                  else sigma_bar}
    if scenario.alphas is not None:
        cfg_kwargs["alphas"] = scenario.alphas
    cfg = SynthesisConfig(**cfg_kwargs)
    results = synthesize_all(scenario.initial_topology, cfg)
    denied = {i: r.reason for i, r in results.items()
              if isinstance(r, Denied)}
    granted = {i: r for i, r in results.items()
               if isinstance(r, LocalController)}
    return cfg, granted, denied


def cmd_synth(args) -> int:
    scenario = load_scenario(args.scenario)
    cfg, granted, denied = _synthesize_for(scenario, args.sigma_bar)
    if denied:
        for dgu_id in sorted(denied):
            print(f"denied: dgu {dgu_id}: {denied[dgu_id]}", file=sys.stderr)
        return EXIT_DENIED
    _write_or_print(json.dumps(bundle_to_json(granted, cfg), indent=2),
                    args.out)
    return EXIT_OK


def cmd_certify(args) -> int:
    scenario = load_scenario(args.scenario)
    topology = scenario.initial_topology
    sigma_bar, controllers = load_bundle(args.controllers, topology)
    structured = all(isinstance(c, LocalController)
                     for c in controllers.values())
    if not structured:
        # gain-only bundle: the closed-loop spectrum is still decisive
        # in one direction (an eigenvalue in the right half plane refutes
        # stability), but no certificate can be granted without P.
        gains = {i: getattr(c, "k", c) for i, c in controllers.items()}
        system = assemble_global(topology)
        spectrum = np.linalg.eigvals(closed_loop(system, gains))
        abscissa = float(np.max(spectrum.real))
        print(f"theorem1: fail, abscissa ≈ {abscissa:.3g}")
        return EXIT_DENIED
    cert = check_global(controllers, topology, sigma_bar)
    verdict = check_theorem1(cert, controllers, topology)
    kernel = check_lasalle_kernel(cert, controllers)
    _write_or_print(
        json.dumps(certificate_to_json(cert, verdict, kernel), indent=2),
        args.out)
    if verdict.verdict == PASS:
        print("theorem1: pass")
        return EXIT_OK
    if verdict.verdict == FAIL:
        print(f"theorem1: fail, abscissa ≈ "
              f"{verdict.spectral_abscissa:.3g}")
    else:
        print("theorem1: hypothesis-unmet")
    return EXIT_DENIED


def cmd_simulate(args) -> int:
    scenario = load_scenario(args.scenario)
    overrides = {}
    if args.dt is not None:
        overrides["dt"] = args.dt
    if args.sigma_bar is not None:
        overrides["sigma_bar"] = args.sigma_bar
    if args.line_model is not None:
        overrides["line_model"] = args.line_model
    if overrides:
        scenario = dataclasses.replace(scenario, **overrides)
    _, granted, denied = _synthesize_for(scenario, None)
    if denied:
        for dgu_id in sorted(denied):
            print(f"denied: dgu {dgu_id}: {denied[dgu_id]}", file=sys.stderr)
        return EXIT_DENIED
    traj = simulate(scenario, controllers=granted)
    out_dir = pathlib.Path(args.out or ".")
    out_dir.mkdir(parents=True, exist_ok=True)
    trajectory_to_csv(traj, out_dir / "trajectory.csv")
    write_event_log(traj, out_dir / "events.log")
    for record in traj.events:
        print(f"t={record.t:g} {record.event}: {record.outcome}")
    if traj.diverged is not None:
        print(f"diverged at t={traj.diverged.t:g} "
              f"(|x| = {traj.diverged.max_abs:.3g})", file=sys.stderr)
        return EXIT_ERROR
    print(f"simulated {scenario.t_end:g} s, {len(traj.times)} samples "
          f"-> {out_dir / 'trajectory.csv'}")
    return EXIT_OK


def _format_spectrum(eigs: np.ndarray) -> str:
    parts = []
    for lam in sorted(np.asarray(eigs, dtype=complex),
                      key=lambda z: (z.real, z.imag)):
        if abs(lam.imag) < 1e-9 * max(1.0, abs(lam.real)):
            parts.append(f"{lam.real:.6g}")
        else:
            parts.append(f"{lam.real:.6g}{lam.imag:+.6g}j")
    return "  ".join(parts)


def cmd_appendix_a(args) -> int:
    ok = True
    for method in (baselines.LQR, baselines.POLE_PLACEMENT):
        report = baselines.destabilization_demo(method)
        for idx, eigs in enumerate(report.decoupled):
            ref = baselines.REFERENCE_DECOUPLED[method][idx]
            match = baselines.spectrum_matches(eigs, ref)
            ok &= match
            print(f"{method} decoupled dgu{idx + 1}: "
                  f"{_format_spectrum(eigs)} -> "
                  f"{'pass' if match else 'FAIL'}")
        match = baselines.spectrum_matches(report.coupled,
                                           baselines.REFERENCE_COUPLED[method])
        ok &= match
        print(f"{method} coupled: {_format_spectrum(report.coupled)} -> "
              f"{'pass' if match else 'FAIL'}")
        lam = report.unstable_pair[0]
        print(f"{method} coupling destabilizes: eigenvalue pair "
              f"{lam.real:.4g}±{abs(lam.imag):.4g}j in the right "
              f"half plane")
    spectrum = baselines.pnp_contrast()
    stable = bool(np.all(spectrum.real < 0.0))
    ok &= stable
    print(f"pnp coupled: {_format_spectrum(spectrum)} -> "
          f"{'pass' if stable else 'FAIL'}")
    return EXIT_OK if ok else EXIT_ERROR


def cmd_sweep(args) -> int:
    grid_kwargs = {"points": args.points}
    if args.r_t is not None:
        grid_kwargs["r_t"] = tuple(args.r_t)
    if args.l_t is not None:
        grid_kwargs["l_t"] = tuple(args.l_t)
    if args.c_t is not None:
        grid_kwargs["c_t"] = tuple(args.c_t)
    result = run_sweep(SweepGrid(**grid_kwargs),
                       sigma_bar=args.sigma_bar if args.sigma_bar is not None
                       else 10.0)
    if args.out is not None:
        out_dir = pathlib.Path(args.out)
        out_dir.mkdir(parents=True, exist_ok=True)
        write_sweep_csv(result, out_dir / "sweep.csv")
        with open(out_dir / "summary.json", "w", encoding="utf-8") as fh:
            fh.write(summary_json(result))
    print(summary_json(result), end="")
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="gridforge",
        description="Plug-and-play voltage control for DC microgrids: "
                    "design, certify, and replay.")
    sub = parser.add_subparsers(dest="command", required=True)

    synth = sub.add_parser("synth", help="design controllers for a scenario")
    synth.add_argument("scenario", help="scenario JSON file")
    synth.add_argument("--sigma-bar", type=float, default=None)
    synth.add_argument("--out", default=None, help="bundle JSON path "
                       "(stdout when omitted)")
    synth.set_defaults(func=cmd_synth)

    cert = sub.add_parser("certify", help="check a controller bundle "
                          "against a scenario's grid")
    cert.add_argument("scenario")
    cert.add_argument("controllers", help="bundle JSON from synth")
    cert.add_argument("--out", default=None, help="certificate JSON path")
    cert.set_defaults(func=cmd_certify)

    sim = sub.add_parser("simulate", help="replay a scenario timeline")
    sim.add_argument("scenario")
    sim.add_argument("--out", default=None, help="output directory "
                     "(default: current)")
    sim.add_argument("--dt", type=float, default=None)
    sim.add_argument("--sigma-bar", type=float, default=None)
    sim.add_argument("--line-model", choices=("qsl", "rl"), default=None)
    sim.add_argument("--seed", type=int, default=None)
    sim.set_defaults(func=cmd_simulate)

    app = sub.add_parser("appendix-a", help="reproduce the centralized "
                         "baseline study")
    app.set_defaults(func=cmd_appendix_a)

    swp = sub.add_parser("sweep", help="map design feasibility over a "
                         "parameter box")
    swp.add_argument("--points", type=int, default=5)
    swp.add_argument("--sigma-bar", type=float, default=None)
    swp.add_argument("--r-t", type=float, nargs=2, default=None,
                     metavar=("LO", "HI"))
    swp.add_argument("--l-t", type=float, nargs=2, default=None,
                     metavar=("LO", "HI"))
    swp.add_argument("--c-t", type=float, nargs=2, default=None,
                     metavar=("LO", "HI"))
    swp.add_argument("--seed", type=int, default=None)
    swp.add_argument("--out", default=None, help="directory for "
                     "sweep.csv and summary.json")
    swp.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "seed", None) is not None:
        np.random.seed(args.seed)
    try:
        return args.func(args)
    except (OSError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR
    except (ValueError, KeyError, NumericalFailure) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
