"""Scenarios, accuracy grids and report emission.

A scenario names a grid, an ambient record, a set of FO cases, which
channels are measured and how to localize.  Running it simulates the
ambient record once, builds one bank from it, then simulates and localizes
every FO case against that bank.

Randomness: the scenario seed feeds ``numpy.random.SeedSequence``; the
ambient record uses child stream 0 and FO case ``k`` uses child stream
``k + 1``, so cases can run in any order without changing results.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from itertools import permutations
from pathlib import Path

import numpy as np

from .dynsim import (
    FOComponent,
    FOInputSpec,
    GridModel,
    GridValidationError,
    SwingSystem,
    build_swing_system,
    gen_ambient,
    gen_fo,
    load_grid,
    transfer_at,
)
from .folocate import (
    LocalizationReport,
    NoForcedOscillation,
    detect_event,
    graph_from_system,
    localize,
    localize_pair,
    neighbor_set,
)
from .respinfer import (
    BankValidation,
    ResponseBank,
    SurrogateMap,
    bank_at,
    infer_bank_outputs,
    infer_bank_states,
    save_bank,
)
from .systems import reference_grid
from .timeseries import TimeSeriesSet, write_timeseries

SCENARIO_FORMAT = "foloc-scenario"
SCENARIO_VERSION = 1
REPORT_FORMATS = ("text", "csv", "json", "plot")
COVERAGES = ("rotor-full", "bus-full", "bus-partial")


class ScenarioError(RuntimeError):
    """A module error raised while running a scenario case."""


class UsageError(ValueError):
    """Bad command-line or API usage (unknown format, missing option...)."""


def stream_seed(seed: int, stream: int) -> int:
    """Independent 63-bit seed for child stream ``stream`` of ``seed``."""
    ss = np.random.SeedSequence(seed, spawn_key=(stream,))
    return int(ss.generate_state(1, dtype=np.uint64)[0] >> np.uint64(1))


# ---------------------------------------------------------------------------
# scenarios


@dataclass
class Scenario:
    """One experiment: grid, ambient record, FO cases, coverage, solver config.

    ``fo`` keys: ``cases`` (``"single"``, ``"pair"`` or a list of explicit
    FO specs), ``mode_indices`` (indices into the in-band system modes),
    ``frequencies`` (overrides the indices), ``amplitude``, ``duration``
    (analysis window, s) and ``settle`` (discarded lead-in, s).

    ``observability`` keys: ``type`` in ``rotor-full``/``bus-full``/
    ``bus-partial``; for ``bus-partial`` also ``channels`` and optionally
    ``surrogates`` (candidate -> channel id).

    ``localization`` keys: ``hops``, ``band``, ``threshold``, ``floor``,
    ``pairs``, ``pair_model``, ``max_lag``, ``causal``.
    """

    name: str
    system: str | dict = "ring8"
    seed: int = 0
    ambient: dict = field(default_factory=lambda: {"duration": 1200.0, "dt": 0.02})
    fo: dict = field(default_factory=dict)
    observability: dict = field(default_factory=lambda: {"type": "rotor-full"})
    localization: dict = field(default_factory=dict)

    def __post_init__(self):
        cov = self.observability.get("type")
        if cov not in COVERAGES:
            raise GridValidationError(f"unknown observability type {cov!r}")
        if cov == "bus-partial" and not self.observability.get("channels"):
            raise GridValidationError("bus-partial observability needs a channel list")

    @property
    def coverage(self) -> str:
        return self.observability["type"]

    def grid(self) -> GridModel:
        if isinstance(self.system, dict):
            if "reference" in self.system:
                params = {k: v for k, v in self.system.items() if k != "reference"}
                return reference_grid(self.system["reference"], **params)
            if "path" in self.system:
                return load_grid(self.system["path"])
            return GridModel.from_dict(self.system)
        return reference_grid(self.system)

    def to_dict(self) -> dict:
        return {
            "format": SCENARIO_FORMAT,
            "version": SCENARIO_VERSION,
            "name": self.name,
            "system": self.system,
            "seed": self.seed,
            "ambient": self.ambient,
            "fo": self.fo,
            "observability": self.observability,
            "localization": self.localization,
        }

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> "Scenario":
        if d.get("format", SCENARIO_FORMAT) != SCENARIO_FORMAT:
            raise GridValidationError("not a scenario file")
        if d.get("version", SCENARIO_VERSION) != SCENARIO_VERSION:
            raise GridValidationError(f"unsupported scenario version {d.get('version')!r}")
        unknown = set(d) - {"format", "version", "name", "system", "seed", "ambient", "fo",
                            "observability", "localization"}
        if unknown:
            raise GridValidationError(f"unknown scenario keys: {', '.join(sorted(unknown))}")
        system = d.get("system", "ring8")
        if isinstance(system, dict) and "path" in system and base is not None:
            system = dict(system, path=str((base / system["path"]).resolve()))
        return cls(
            name=d.get("name", "scenario"),
            system=system,
            seed=int(d.get("seed", 0)),
            ambient=d.get("ambient", {"duration": 1200.0, "dt": 0.02}),
            fo=d.get("fo", {}),
            observability=d.get("observability", {"type": "rotor-full"}),
            localization=d.get("localization", {}),
        )


def load_scenarios(path) -> list[Scenario]:
    """A scenario file holds one scenario object or ``{"scenarios": [...]}``."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such scenario file: {path}")
    d = json.loads(path.read_text())
    items = d["scenarios"] if "scenarios" in d else [d]
    return [Scenario.from_dict(s, path.parent) for s in items]


def in_band_modes(sys: SwingSystem, band) -> list[float]:
    return [float(f) for f in sys.modes() if band[0] <= f <= band[1]]


def fo_cases(s: Scenario, sys: SwingSystem) -> list[FOInputSpec]:
    """Expand the scenario's FO case description into explicit specs."""
    band = tuple(s.localization.get("band", (0.1, 0.8)))
    cases = s.fo.get("cases", "single")
    amp = float(s.fo.get("amplitude", 10.0))
    if isinstance(cases, list):
        return [c if isinstance(c, FOInputSpec) else FOInputSpec(c["components"]) for c in cases]
    freqs = s.fo.get("frequencies")
    if freqs is None:
        modes = in_band_modes(sys, band)
        if not modes:
            raise GridValidationError(f"system has no modes inside {band}")
        default = [0, len(modes) // 2, -1] if cases == "single" else [0, -1]
        idx = s.fo.get("mode_indices", default)
        freqs = [modes[i] for i in idx]
    sources = s.fo.get("sources", list(sys.gen_ids))
    if cases == "single":
        return [FOInputSpec([FOComponent(g, f, amp)]) for f in freqs for g in sources]
    if cases == "pair":
        if len(freqs) != 2:
            raise GridValidationError("pair cases need exactly two frequencies (major, minor)")
        major, minor = freqs
        return [
            FOInputSpec([FOComponent(a, major, 2 * amp), FOComponent(b, minor, amp)])
            for a, b in permutations(sources, 2)
        ]
    raise GridValidationError(f"unknown FO case type {cases!r}")


def measured_channels(s: Scenario, sys: SwingSystem) -> list[str]:
    cov = s.coverage
    if cov == "rotor-full":
        return [c.id for c in sys.state_channels]
    if cov == "bus-full":
        return [c.id for c in sys.output_channels if c.kind in ("bus_freq", "line_flow")]
    chans = [str(c) for c in s.observability["channels"]]
    known = {c.id for c in sys.channels}
    missing = [c for c in chans if c not in known]
    if missing:
        raise GridValidationError(f"channel not available in this grid: {', '.join(missing)}")
    return chans


def surrogate_map(s: Scenario, sys: SwingSystem, channels) -> SurrogateMap:
    given = s.observability.get("surrogates")
    smap = SurrogateMap(given) if given else SurrogateMap.nearest(sys, channels)
    missing = [f"{c} -> {v}" for c, v in smap.entries.items() if v not in channels]
    if missing:
        raise GridValidationError(f"surrogate channel not measured: {', '.join(missing)}")
    return smap


# ---------------------------------------------------------------------------
# running


@dataclass
class CaseResult:
    index: int
    spec: FOInputSpec
    report: LocalizationReport | None
    row: dict


@dataclass
class ScenarioResult:
    scenario: Scenario
    system: SwingSystem
    bank: ResponseBank
    ambient: TimeSeriesSet
    cases: list
    windows: list

    @property
    def reports(self) -> list:
        return [c.report for c in self.cases]

    @property
    def rows(self) -> list[dict]:
        return [c.row for c in self.cases]


def build_bank(s: Scenario, sys: SwingSystem, ambient: TimeSeriesSet, channels) -> ResponseBank:
    loc = s.localization
    kw = {
        "max_lag": float(loc.get("max_lag", 20.0)),
        "band": tuple(loc.get("band", (0.1, 0.8))),
        "causal": bool(loc.get("causal", True)),
    }
    if s.coverage == "rotor-full":
        return infer_bank_states(ambient, list(sys.gen_ids), channels, **kw)
    return infer_bank_outputs(ambient, surrogate_map(s, sys, channels), channels, **kw)


def _fo_window(s: Scenario, sys: SwingSystem, spec: FOInputSpec, k: int, dt: float):
    settle = float(s.fo.get("settle", 40.0))
    duration = float(s.fo.get("duration", 60.0))
    noisy = s.fo.get("ambient", True)
    seed = stream_seed(s.seed, k + 1) if noisy else None
    rec = gen_fo(sys, spec, settle + duration, dt, ambient_seed=seed)
    return rec.window(settle, settle + duration)


def score_case(spec: FOInputSpec, report: LocalizationReport | None, graph, hops) -> dict:
    """Correctness flags for one case (pairs are matched in either order)."""
    comps = spec.components
    truth = sorted({c.source for c in comps})
    row = {
        "sources": "+".join(truth),
        "frequencies": ";".join(f"{f:.6f}" for f in spec.frequencies),
        "winner": "",
        "ls_correct": False,
        "graph_correct": False,
    }
    pair_case = report is not None and report.pair
    if pair_case or len(truth) > 1:
        row["major_correct"] = False
    if report is None:
        return row
    row["winner"] = report.winner_label
    if not report.pair:
        row["ls_correct"] = truth == [report.winner]
        row["graph_correct"] = truth[0] in report.neighbors if len(truth) == 1 else False
        return row
    w1, w2 = report.winner
    row["ls_correct"] = set(truth) == {w1, w2}
    balls = [set(neighbor_set(graph, w, hops)) for w in (w1, w2)]
    if len(truth) == 2:
        a, b = truth
        row["graph_correct"] = (a in balls[0] and b in balls[1]) or (a in balls[1] and b in balls[0])
    else:
        row["graph_correct"] = truth[0] in balls[0] | balls[1]
    major = max(comps, key=lambda c: (c.amplitude, -c.frequency))
    j = int(np.argmin([abs(f - major.frequency) for f in report.frequencies]))
    row["major_correct"] = report.mode_best[j] == major.source
    return row


def run_case(s, sys, bank, graph, spec, k, dt):
    loc = s.localization
    hops = int(loc.get("hops", 1))
    band = tuple(loc.get("band", (0.1, 0.8)))
    pairs = bool(loc.get("pairs", False))
    window = _fo_window(s, sys, spec, k, dt)
    try:
        event = detect_event(
            window,
            channels=list(bank.channels),
            band=band,
            threshold=float(loc.get("threshold", 0.3)),
        )
        if pairs:
            rep = localize_pair(bank, event, graph, hops, float(loc.get("floor", 0.05)),
                                loc.get("pair_model", "assign"))
        else:
            rep = localize(bank, event, graph, hops, float(loc.get("floor", 0.05)))
        note = ""
    except NoForcedOscillation as exc:
        rep, note = None, str(exc)
    except Exception as exc:  # attach case context
        raise ScenarioError(f"scenario {s.name!r}, case {k}: {exc}") from exc
    row = {"scenario": s.name, "coverage": s.coverage, "case": k}
    row.update(score_case(spec, rep, graph, hops))
    row["note"] = note
    return CaseResult(k, spec, rep, row), window


def run_scenario(s: Scenario, outdir=None, save_datasets: bool = False) -> ScenarioResult:
    """Generate, infer, detect and localize every case of ``s``.

    With ``outdir`` the bank, per-case reports and the case table are
    written under ``outdir/<name>/``; ``save_datasets`` adds the ambient and
    FO records.
    """
    sys = build_swing_system(s.grid())
    dt = float(s.ambient.get("dt", 0.02))
    channels = measured_channels(s, sys)
    specs = fo_cases(s, sys)
    for spec in specs:
        for src in spec.sources:
            sys.gen_index(src)
    ambient = gen_ambient(sys, float(s.ambient.get("duration", 1200.0)), dt,
                          stream_seed(s.seed, 0))
    ambient = ambient.select(channels)
    try:
        bank = build_bank(s, sys, ambient, channels)
    except GridValidationError:
        raise
    except (KeyError, ValueError) as exc:
        raise ScenarioError(f"scenario {s.name!r}: {exc}") from exc
    graph = graph_from_system(sys)
    cases, windows = [], []
    for k, spec in enumerate(specs):
        res, win = run_case(s, sys, bank, graph, spec, k, dt)
        cases.append(res)
        windows.append(win)
    result = ScenarioResult(s, sys, bank, ambient, cases, windows)
    if outdir is not None:
        _persist(result, Path(outdir) / s.name, save_datasets)
    return result


def _persist(result: ScenarioResult, d: Path, save_datasets: bool):
    d.mkdir(parents=True, exist_ok=True)
    (d / "scenario.json").write_text(json.dumps(result.scenario.to_dict(), indent=2,
                                                sort_keys=True))
    save_bank(result.bank, d / "bank.npz")
    rep_dir = d / "reports"
    rep_dir.mkdir(exist_ok=True)
    for c in result.cases:
        body = c.report.to_dict() if c.report is not None else {"note": c.row["note"]}
        body["case"] = c.index
        body["fo"] = c.spec.to_dict()
        (rep_dir / f"case_{c.index:03d}.json").write_text(json.dumps(body, indent=2,
                                                                     sort_keys=True))
    if save_datasets:
        write_timeseries(result.ambient, d / "data" / "ambient")
        for c, w in zip(result.cases, result.windows):
            write_timeseries(w, d / "data" / f"fo_{c.index:03d}")


# ---------------------------------------------------------------------------
# accuracy grids


@dataclass
class AccuracyGrid:
    rows: list = field(default_factory=list)

    COLUMNS = ("ls_correct", "graph_correct", "major_correct")

    @property
    def empty(self) -> bool:
        return not self.rows

    def aggregates(self) -> dict:
        """``{scenario: {"coverage", "cases", column: percent or None}}``; an
        empty grid gives ``{}`` (aggregates undefined)."""
        out = {}
        for name in dict.fromkeys(r["scenario"] for r in self.rows):
            rows = [r for r in self.rows if r["scenario"] == name]
            agg = {"coverage": rows[0]["coverage"], "cases": len(rows)}
            for col in self.COLUMNS:
                vals = [r[col] for r in rows if col in r]
                agg[col] = 100.0 * float(np.mean(vals)) if vals else None
            out[name] = agg
        return out

    def percent(self, column: str, scenario: str | None = None) -> float:
        rows = [r for r in self.rows if scenario is None or r["scenario"] == scenario]
        vals = [r[column] for r in rows if column in r]
        if not vals:
            raise ValueError(f"no rows carry {column!r}")
        return 100.0 * float(np.mean(vals))


def run_accuracy_grid(scenarios, outdir=None, save_datasets: bool = False):
    """Run every scenario; returns ``(AccuracyGrid, [ScenarioResult])``."""
    results = [run_scenario(s, outdir, save_datasets) for s in scenarios]
    grid = AccuracyGrid([row for r in results for row in r.rows])
    if outdir is not None and results:
        emit_report(grid, "csv", Path(outdir) / "accuracy.csv")
        emit_report(grid, "text", Path(outdir) / "accuracy.txt")
    return grid, results


# ---------------------------------------------------------------------------
# spectrum comparison (plot data)


@dataclass
class SpectrumComparison:
    candidate: str
    channel: str
    frequency: np.ndarray
    magnitude_ref: np.ndarray
    magnitude_inferred: np.ndarray
    phase_ref: np.ndarray
    phase_inferred: np.ndarray

    COLUMNS = ("frequency", "magnitude_ref", "magnitude_inferred", "phase_ref", "phase_inferred")


def spectrum_comparison(bank: ResponseBank, sys: SwingSystem, candidate, channel,
                        frequencies=None) -> SpectrumComparison:
    """Inferred vs exact response of one entry across the analysis band.

    Inferred values carry the ``2 gamma / alpha`` factor so both curves share
    a scale.
    """
    if frequencies is None:
        frequencies = np.linspace(bank.band[0], bank.band[1], 141)
    frequencies = np.asarray(frequencies, dtype=float)
    i = bank.candidates.index(str(candidate))
    j = bank.channels.index(str(channel))
    col = [c.id for c in sys.channels].index(str(channel))
    scale = 2 * sys.gamma / sys.alpha
    inf = np.array([bank_at(bank, f)[j, i] for f in frequencies]) * scale
    ref = np.array([transfer_at(sys, candidate, f)[col] for f in frequencies])
    return SpectrumComparison(str(candidate), str(channel), frequencies, np.abs(ref),
                              np.abs(inf), np.angle(ref), np.angle(inf))


# ---------------------------------------------------------------------------
# emission


def _fmt(v) -> str:
    if isinstance(v, (bool, np.bool_)):
        return "1" if v else "0"
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if v is None:
        return ""
    return str(v)


def _csv(rows, columns=None) -> str:
    rows = list(rows)
    if columns is None:
        columns = list(dict.fromkeys(k for r in rows for k in r))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in columns])
    return buf.getvalue()


def _table(header, rows) -> str:
    cells = [list(map(str, header))] + [[_cell(v) for v in r] for r in rows]
    widths = [max(len(c[k]) for c in cells) for k in range(len(header))]
    lines = ["  ".join(c[k].ljust(widths[k]) for k in range(len(header))).rstrip()
             for c in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines) + "\n"


def _cell(v) -> str:
    if isinstance(v, (float, np.floating)):
        return f"{v:.6g}"
    if v is None:
        return "n/a"
    return str(v)


def _render(obj, fmt: str) -> str:
    if isinstance(obj, LocalizationReport):
        if fmt == "json":
            return json.dumps(obj.to_dict(), indent=2, sort_keys=True) + "\n"
        if fmt == "csv":
            return _csv(obj.rows())
        if fmt == "text":
            head = [
                f"mode: {obj.mode}",
                "frequencies (Hz): " + ", ".join(f"{f:.4f}" for f in obj.frequencies),
                f"winner: {obj.winner_label}",
                f"neighbors (h={obj.hops}): " + ", ".join(obj.neighbors),
            ]
            if obj.pair:
                head.append("best single per mode: " + ", ".join(obj.mode_best))
            rows = [[r["rank"], r["candidate"], r["residual"]] for r in obj.rows()]
            return "\n".join(head) + "\n\n" + _table(["rank", "candidate", "residual"], rows)
    elif isinstance(obj, AccuracyGrid):
        if fmt == "csv":
            cols = ["scenario", "coverage", "case", "sources", "frequencies", "winner",
                    "ls_correct", "graph_correct", "major_correct", "note"]
            return _csv(obj.rows, cols)
        if fmt == "json":
            return json.dumps({"rows": obj.rows, "aggregates": obj.aggregates()}, indent=2,
                              sort_keys=True, default=_fmt) + "\n"
        if fmt == "text":
            agg = obj.aggregates()
            if not agg:
                return "empty accuracy grid: aggregates undefined\n"
            rows = [[name, a["coverage"], a["cases"], _pct(a["ls_correct"]),
                     _pct(a["graph_correct"]), _pct(a["major_correct"])]
                    for name, a in agg.items()]
            return _table(["scenario", "coverage", "cases", "LS", "Graph", "Major"], rows)
    elif isinstance(obj, SpectrumComparison):
        if fmt in ("plot", "csv"):
            cols = SpectrumComparison.COLUMNS
            arr = np.column_stack([getattr(obj, c) for c in cols])
            return _csv(({c: v for c, v in zip(cols, row)} for row in arr), list(cols))
    elif isinstance(obj, BankValidation):
        if fmt == "csv":
            return _csv(obj.rows())
        if fmt == "text":
            head = f"median correlation: {obj.median_correlation():.4f}\n"
            rows = [[f"{f:.4f}", e] for f, e in zip(obj.mode_frequencies, obj.mode_phase_errors())]
            return head + "\n" + _table(["mode (Hz)", "median phase error (rad)"], rows)
    else:
        raise UsageError(f"cannot emit objects of type {type(obj).__name__}")
    raise UsageError(f"format {fmt!r} is not available for {type(obj).__name__}")


def _pct(v):
    return "n/a" if v is None else f"{v:.2f}%"


def emit_report(obj, fmt: str, path=None) -> str:
    """Render ``obj`` as ``text``, ``csv``, ``json`` or ``plot`` (spectrum data)
    and write it to ``path`` when given.  Returns the rendered text."""
    if fmt not in REPORT_FORMATS:
        raise UsageError(f"unknown report format {fmt!r}; choose from {', '.join(REPORT_FORMATS)}")
    text = _render(obj, fmt)
    if path is not None:
        path = Path(path)
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            path.write_text(text)
        except OSError as exc:
            raise OSError(f"cannot write report to {path}: {exc}") from exc
    return text


def read_csv_rows(path_or_text) -> list[dict]:
    """Rows of an emitted CSV as dicts of strings."""
    text = path_or_text
    if isinstance(path_or_text, Path) or (isinstance(path_or_text, str) and "\n" not in path_or_text):
        text = Path(path_or_text).read_text()
    return list(csv.DictReader(io.StringIO(text)))


# ---------------------------------------------------------------------------
# built-in scenario matrix


def preset_scenarios(name: str = "all", seed: int = 20240601) -> list[Scenario]:
    """Desk-scale experiment matrix.

    * ``gen2-smoke``   - one FO at generator G1 of the two-machine grid;
    * ``ring8-rotor``  - ring8, rotor channels, 8 sources x 3 modes;
    * ``ring8-bus``    - ring8, all bus frequencies and line flows;
    * ``grid12-bus``   - grid12, terminal-bus frequencies + line flows;
    * ``ring8-pair``   - ring8, rotor channels, every ordered source pair
      with the lowest mode (double amplitude) and the highest mode.
    """
    from .systems import grid12_partial_channels

    table = {
        "gen2-smoke": Scenario(
            "gen2-smoke", "gen2", seed, fo={"cases": "single", "sources": ["G1"],
                                            "mode_indices": [0]}),
        "ring8-rotor": Scenario("ring8-rotor", "ring8", seed + 1),
        "ring8-bus": Scenario("ring8-bus", "ring8", seed + 2, observability={"type": "bus-full"}),
        "grid12-bus": Scenario(
            "grid12-bus", "grid12", seed + 3,
            observability={"type": "bus-partial", "channels": grid12_partial_channels()}),
        "ring8-pair": Scenario(
            "ring8-pair", "ring8", seed + 4, fo={"cases": "pair"},
            localization={"pairs": True, "threshold": 0.1}),
    }
    if name == "all":
        return [table[k] for k in ("ring8-rotor", "ring8-bus", "grid12-bus", "ring8-pair")]
    if name not in table:
        raise UsageError(f"unknown preset {name!r}; choose from all, {', '.join(table)}")
    return [table[name]]
