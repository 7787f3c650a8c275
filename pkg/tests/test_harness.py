import json

import numpy as np
import pytest

from foloc.dynsim import GridValidationError, build_swing_system
from foloc.folocate import detect_event, graph_from_system, localize
from foloc.harness import (
    AccuracyGrid,
    Scenario,
    UsageError,
    _fo_window,
    emit_report,
    fo_cases,
    load_scenarios,
    measured_channels,
    preset_scenarios,
    read_csv_rows,
    run_accuracy_grid,
    run_scenario,
    spectrum_comparison,
    stream_seed,
)
from foloc.respinfer import infer_bank_states, validate_bank
from foloc.systems import grid12_partial_channels


def smoke():
    return preset_scenarios("gen2-smoke")[0]


def test_smoke_scenario_finds_source():
    res = run_scenario(smoke())
    assert len(res.cases) == 1
    assert res.cases[0].report.winner == "G1"
    assert res.rows[0]["ls_correct"] and res.rows[0]["graph_correct"]


def test_scenario_files_identical_across_runs(tmp_path):
    run_scenario(smoke(), tmp_path / "a", save_datasets=True)
    run_scenario(smoke(), tmp_path / "b", save_datasets=True)
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
    assert any(p.suffix == ".npz" for p in files) and any("case_000" in str(p) for p in files)
    for p in files:
        assert (tmp_path / "a" / p).read_bytes() == (tmp_path / "b" / p).read_bytes(), p


def test_partial_coverage_missing_channel():
    s = Scenario("bad", "grid12", 1, observability={
        "type": "bus-partial", "channels": grid12_partial_channels() + ["f:B99"]})
    with pytest.raises(GridValidationError, match="f:B99"):
        run_scenario(s)


def test_surrogate_must_be_measured():
    chans = grid12_partial_channels()
    s = Scenario("bad", "grid12", 1, observability={
        "type": "bus-partial", "channels": chans, "surrogates": {"G1": "f:B12"}})
    with pytest.raises(GridValidationError, match="f:B12"):
        run_scenario(s)


def test_scenario_validation():
    with pytest.raises(GridValidationError):
        Scenario("x", observability={"type": "nope"})
    with pytest.raises(GridValidationError):
        Scenario("x", observability={"type": "bus-partial"})
    with pytest.raises(GridValidationError):
        Scenario.from_dict({"name": "x", "colour": 1})
    with pytest.raises(GridValidationError):
        Scenario.from_dict({"version": 99})
    with pytest.raises(KeyError):
        run_scenario(Scenario("x", "gen2", fo={"sources": ["G7"]}))


def test_scenario_file_round_trip(tmp_path):
    s = preset_scenarios("grid12-bus")[0]
    path = tmp_path / "s.json"
    path.write_text(json.dumps({"scenarios": [s.to_dict(), smoke().to_dict()]}))
    back = load_scenarios(path)
    assert [b.to_dict() for b in back] == [s.to_dict(), smoke().to_dict()]
    with pytest.raises(FileNotFoundError):
        load_scenarios(tmp_path / "missing.json")


def test_case_matrix_sizes(ring8_sys):
    assert len(fo_cases(Scenario("r", "ring8"), ring8_sys)) == 24
    pairs = fo_cases(Scenario("p", "ring8", fo={"cases": "pair"}), ring8_sys)
    assert len(pairs) == 56
    a = pairs[0].components
    assert a[0].amplitude == 2 * a[1].amplitude and a[0].frequency < a[1].frequency


def test_stream_seeds_independent():
    seeds = {stream_seed(7, k) for k in range(100)}
    assert len(seeds) == 100 and stream_seed(7, 3) == stream_seed(7, 3)
    assert stream_seed(7, 3) != stream_seed(8, 3)


def test_measured_channels(ring8_sys):
    assert len(measured_channels(Scenario("r", "ring8"), ring8_sys)) == 16
    bus = measured_channels(Scenario("b", "ring8", observability={"type": "bus-full"}), ring8_sys)
    assert bus and all(c.startswith(("f:", "p:")) for c in bus)


# -- accuracy grid -----------------------------------------------------------


def test_empty_grid():
    grid, results = run_accuracy_grid([])
    assert grid.empty and grid.aggregates() == {} and results == []
    assert "undefined" in emit_report(grid, "text")
    with pytest.raises(ValueError):
        grid.percent("ls_correct")


def test_aggregates_match_rows():
    rows = [
        {"scenario": "a", "coverage": "rotor-full", "ls_correct": True, "graph_correct": True},
        {"scenario": "a", "coverage": "rotor-full", "ls_correct": False, "graph_correct": True},
        {"scenario": "b", "coverage": "bus-full", "ls_correct": True, "graph_correct": False,
         "major_correct": True},
    ]
    agg = AccuracyGrid(rows).aggregates()
    assert agg["a"]["ls_correct"] == 50.0 and agg["a"]["graph_correct"] == 100.0
    assert agg["a"]["major_correct"] is None and agg["a"]["cases"] == 2
    assert agg["b"]["major_correct"] == 100.0
    assert AccuracyGrid(rows).percent("ls_correct") == pytest.approx(200 / 3)


def test_grid_artifacts(tmp_path):
    grid, _ = run_accuracy_grid([smoke()], tmp_path)
    assert (tmp_path / "accuracy.csv").exists() and (tmp_path / "accuracy.txt").exists()
    rows = read_csv_rows(tmp_path / "accuracy.csv")
    assert rows[0]["winner"] == "G1" and rows[0]["ls_correct"] == "1"


def test_bank_reuse_matches_reinference():
    s = Scenario("reuse", "ring8", 11)
    res = run_scenario(s)
    assert len(res.cases) == 24
    graph = graph_from_system(res.system)
    for case, win in zip(res.cases, res.windows):
        bank = infer_bank_states(res.ambient, list(res.system.gen_ids), list(res.bank.channels))
        ev = detect_event(win, list(bank.channels))
        assert localize(bank, ev, graph).to_dict() == case.report.to_dict()


def test_fo_window_seeded_per_case(ring8_sys):
    s = Scenario("w", "ring8", 3)
    spec = fo_cases(s, ring8_sys)[0]
    a = _fo_window(s, ring8_sys, spec, 0, 0.02)
    b = _fo_window(s, ring8_sys, spec, 0, 0.02)
    c = _fo_window(s, ring8_sys, spec, 1, 0.02)
    assert np.array_equal(a.data, b.data) and not np.array_equal(a.data, c.data)
    assert a.duration == pytest.approx(60.0, abs=0.05)


# -- emission ------------------------------------------------------------------


def test_report_csv_round_trip_12_digits(ring8_bank):
    from foloc.folocate import FOEvent
    from foloc.respinfer import bank_at

    x = bank_at(ring8_bank, 0.31) @ np.linspace(1, 2, 8)
    ev = FOEvent(ring8_bank.channels, [0.31], [1.0], x[None, :])
    rep = localize(ring8_bank, ev)
    rows = read_csv_rows(emit_report(rep, "csv"))
    assert [r["candidate"] for r in rows] == rep.ranking
    for r in rows:
        c = r["candidate"]
        assert float(r["residual"]) == pytest.approx(rep.residuals[c], rel=1e-12)
        est = complex(float(r["estimate_re"]), float(r["estimate_im"]))
        assert est == pytest.approx(rep.estimates[c], rel=1e-12)
    back = json.loads(emit_report(rep, "json"))
    assert back["winner"] == rep.winner and back["residuals"] == rep.residuals


def test_grid_csv_round_trip():
    rows = [{"scenario": "a", "coverage": "rotor-full", "case": 0, "sources": "G1",
             "frequencies": "0.1", "winner": "G1", "ls_correct": True, "graph_correct": True,
             "note": ""}]
    back = read_csv_rows(emit_report(AccuracyGrid(rows), "csv"))
    assert back[0]["winner"] == "G1" and back[0]["ls_correct"] == "1"
    assert back[0]["major_correct"] == ""


def test_unknown_format():
    with pytest.raises(UsageError):
        emit_report(AccuracyGrid(), "xml")
    with pytest.raises(UsageError):
        emit_report(AccuracyGrid(), "plot")
    with pytest.raises(UsageError):
        emit_report(object(), "text")


def test_write_failure_names_path(tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    with pytest.raises(OSError, match="file"):
        emit_report(AccuracyGrid(), "text", blocker / "sub" / "out.txt")


def test_spectrum_comparison_export(ring8_sys, ring8_bank, tmp_path):
    comp = spectrum_comparison(ring8_bank, ring8_sys, "G3", "omega:G3")
    text = emit_report(comp, "plot", tmp_path / "plot.csv")
    rows = read_csv_rows(tmp_path / "plot.csv")
    assert list(rows[0]) == ["frequency", "magnitude_ref", "magnitude_inferred",
                             "phase_ref", "phase_inferred"]
    assert len(rows) == 141 and text.count("\n") == 142
    # the exported curves agree as well as the bank validation says they do
    ref, inf = comp.magnitude_ref, comp.magnitude_inferred
    assert np.corrcoef(ref, inf)[0, 1] > 0.9
    v = validate_bank(ring8_bank, ring8_sys)
    modes = v.mode_frequencies
    k = [int(np.argmin(abs(comp.frequency - f))) for f in modes]
    assert np.all(np.abs(np.angle(np.exp(1j * (comp.phase_ref[k] - comp.phase_inferred[k]))))
                  < 0.3)


def test_validation_report_text(ring8_bank, ring8_sys):
    text = emit_report(validate_bank(ring8_bank, ring8_sys), "text")
    assert text.startswith("median correlation:")
    rows = read_csv_rows(emit_report(validate_bank(ring8_bank, ring8_sys), "csv"))
    assert len(rows) == 8 * 16


def test_graph_from_grid12_partial():
    s = preset_scenarios("grid12-bus")[0]
    sys = build_swing_system(s.grid())
    assert set(measured_channels(s, sys)) == set(grid12_partial_channels())
