"""Command-line entry point: ``foloc simulate|infer|localize|bench|validate``.

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime or
numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .dynsim import (
    FOInputSpec,
    GridValidationError,
    build_swing_system,
    gen_ambient,
    gen_fo,
    load_grid,
    reference_impulse_response,
)
from .folocate import NoForcedOscillation, detect_event, graph_from_system, localize, localize_pair
from .harness import (
    ScenarioError,
    UsageError,
    emit_report,
    load_scenarios,
    preset_scenarios,
    run_accuracy_grid,
    spectrum_comparison,
)
from .respinfer import SurrogateMap, infer_bank_outputs, infer_bank_states, load_bank, save_bank, validate_bank
from .systems import REFERENCE_GRIDS, reference_grid
from .timeseries import read_timeseries, write_timeseries

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _grid(spec: str):
    if spec in REFERENCE_GRIDS:
        return reference_grid(spec)
    path = Path(spec)
    if not path.exists():
        raise FileNotFoundError(f"grid {spec!r} is neither a reference grid nor a file")
    return load_grid(path)


def _json_arg(text: str):
    path = Path(text)
    if path.exists():
        return json.loads(path.read_text())
    return json.loads(text)


def _channels(text):
    return [c for c in text.split(",") if c] if text else None


def cmd_simulate(a):
    sys_ = build_swing_system(_grid(a.grid))
    if a.kind == "ambient":
        ts = gen_ambient(sys_, a.duration, a.dt, a.seed)
    elif a.kind == "fo":
        if a.fo is None:
            raise UsageError("--fo is required for --kind fo")
        spec = _json_arg(a.fo)
        spec = FOInputSpec(spec["components"] if isinstance(spec, dict) else spec)
        ts = gen_fo(sys_, spec, a.settle + a.duration, a.dt, ambient_seed=a.seed)
        ts = ts.window(a.settle, a.settle + a.duration)
    else:
        if a.source is None:
            raise UsageError("--source is required for --kind impulse")
        ts = reference_impulse_response(sys_, a.source, a.duration, a.dt)
    if a.channels:
        ts = ts.select(_channels(a.channels))
    path = write_timeseries(ts, a.out)
    print(f"wrote {path} ({ts.n_samples} samples x {len(ts.channels)} channels)")


def cmd_infer(a):
    amb = read_timeseries(a.ambient)
    kw = dict(max_lag=a.max_lag, band=tuple(a.band), causal=not a.two_sided)
    mode = a.mode or ("output" if a.surrogates else "state")
    if mode == "output":
        if not a.surrogates:
            raise UsageError("--surrogates is required in output mode")
        bank = infer_bank_outputs(amb, SurrogateMap.from_dict(_json_arg(a.surrogates)),
                                  _channels(a.channels), **kw)
    else:
        bank = infer_bank_states(amb, _channels(a.candidates), _channels(a.channels), **kw)
    path = save_bank(bank, a.out)
    print(f"wrote {path} ({len(bank.candidates)} candidates x {len(bank.channels)} channels, "
          f"mode {bank.mode})")


def cmd_localize(a):
    bank = load_bank(a.bank)
    if a.mode is not None:
        want = "state" if a.mode == "state" else "output_phase"
        if bank.mode != want:
            raise UsageError(f"bank is {bank.mode!r} but --mode {a.mode} was requested")
    fo = read_timeseries(a.fo)
    graph = graph_from_system(build_swing_system(_grid(a.grid))) if a.grid else None
    event = detect_event(fo, channels=list(bank.channels), band=tuple(a.band),
                         threshold=a.threshold)
    if a.pairs:
        rep = localize_pair(bank, event, graph, a.hops, a.floor, a.pair_model)
    else:
        rep = localize(bank, event, graph, a.hops, a.floor)
    print(emit_report(rep, a.format), end="")
    if a.out:
        emit_report(rep, "json", a.out)


def cmd_bench(a):
    if a.config:
        scenarios = [s for path in a.config for s in load_scenarios(path)]
    else:
        scenarios = preset_scenarios(a.preset, a.seed)
    grid, _ = run_accuracy_grid(scenarios, a.out, a.save_datasets)
    print(emit_report(grid, "text"), end="")


def cmd_validate(a):
    bank = load_bank(a.bank)
    sys_ = build_swing_system(_grid(a.grid))
    v = validate_bank(bank, sys_)
    print(emit_report(v, "text"), end="")
    if a.out:
        emit_report(v, "csv", a.out)
    if a.plot_out:
        cand = a.plot_candidate or bank.candidates[0]
        chan = a.plot_channel or bank.channels[0]
        emit_report(spectrum_comparison(bank, sys_, cand, chan), "plot", a.plot_out)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="foloc", description="Forced-oscillation source localization "
                                          "from ambient-data impulse responses.")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("simulate", help="simulate ambient, FO or impulse-response records")
    s.add_argument("--grid", required=True, help="reference grid name or grid JSON file")
    s.add_argument("--kind", choices=("ambient", "fo", "impulse"), default="ambient")
    s.add_argument("--duration", type=float, default=1200.0, help="seconds")
    s.add_argument("--dt", type=float, default=0.02)
    s.add_argument("--seed", type=int, default=None, help="noise seed (FO: ambient noise)")
    s.add_argument("--fo", help="FO spec (JSON text or file) with 'components'")
    s.add_argument("--settle", type=float, default=40.0, help="FO lead-in discarded (s)")
    s.add_argument("--source", help="generator for --kind impulse")
    s.add_argument("--channels", help="comma-separated channel ids to keep")
    s.add_argument("--out", required=True, help="output stem (<stem>.csv + <stem>.meta.json)")
    s.set_defaults(func=cmd_simulate)

    s = sub.add_parser("infer", help="build a response bank from an ambient record")
    s.add_argument("--ambient", required=True)
    s.add_argument("--surrogates", help="surrogate map (JSON text or file); implies output mode")
    s.add_argument("--mode", choices=("state", "output"))
    s.add_argument("--candidates", help="comma-separated candidate generators (state mode)")
    s.add_argument("--channels", help="comma-separated measured channels")
    s.add_argument("--max-lag", type=float, default=20.0)
    s.add_argument("--band", type=float, nargs=2, default=(0.1, 0.8), metavar=("F1", "F2"))
    s.add_argument("--two-sided", action="store_true", help="evaluate the full CPSD")
    s.add_argument("--out", required=True, help="bank file (.npz)")
    s.set_defaults(func=cmd_infer)

    s = sub.add_parser("localize", help="localize the FO source in a record")
    s.add_argument("--bank", required=True)
    s.add_argument("--fo", required=True, help="FO window dataset stem")
    s.add_argument("--mode", choices=("state", "output"))
    s.add_argument("--pairs", action="store_true", help="search source pairs")
    s.add_argument("--pair-model", choices=("assign", "joint", "phase_sum"), default="assign")
    s.add_argument("--hops", type=int, default=1)
    s.add_argument("--band", type=float, nargs=2, default=(0.1, 0.8), metavar=("F1", "F2"))
    s.add_argument("--threshold", type=float, default=0.3)
    s.add_argument("--floor", type=float, default=0.05)
    s.add_argument("--grid", help="grid for the neighbor set (name or file)")
    s.add_argument("--format", choices=("text", "csv", "json"), default="text")
    s.add_argument("--out", help="structured report (JSON)")
    s.set_defaults(func=cmd_localize)

    s = sub.add_parser("bench", help="run the accuracy-grid benchmark")
    s.add_argument("--config", nargs="*", help="scenario file(s); default: built-in presets")
    s.add_argument("--preset", default="all")
    s.add_argument("--seed", type=int, default=20240601)
    s.add_argument("--out", help="artifact directory")
    s.add_argument("--save-datasets", action="store_true")
    s.set_defaults(func=cmd_bench)

    s = sub.add_parser("validate", help="compare a bank against the simulator")
    s.add_argument("--bank", required=True)
    s.add_argument("--grid", required=True)
    s.add_argument("--out", help="per-entry CSV")
    s.add_argument("--plot-out", help="spectrum comparison CSV for one entry")
    s.add_argument("--plot-candidate")
    s.add_argument("--plot-channel")
    s.set_defaults(func=cmd_validate)
    return p


INVALID = (UsageError, GridValidationError, KeyError, FileNotFoundError, ValueError, TypeError)
RUNTIME = (NoForcedOscillation, ScenarioError, np.linalg.LinAlgError, FloatingPointError,
           ArithmeticError, OSError, RuntimeError)


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        args.func(args)
    except INVALID as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else exc
        print(f"foloc: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    except RUNTIME as exc:
        print(f"foloc: failed: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
