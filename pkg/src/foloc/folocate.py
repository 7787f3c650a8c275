"""Phase 2: locate the forced-oscillation source from an FO window.

The FO record is reduced to one complex vector per detected frequency.
Each candidate's bank column at that frequency is then fitted to it:

* state banks: complex least squares ``min_u ||x - c u||`` (closed form);
* output banks: phases only, ``min_phi sum_j wrap(arg x_j - arg c_j - phi)^2``
  with ``phi`` the circular mean of the per-channel phase differences.

Candidates are ranked by residual; ties go to the earlier candidate.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from .respinfer import ResponseBank, bank_at
from .sigproc import bandpass, detect_modes, detrend, dtft_at, spectrum
from .timeseries import TimeSeriesSet


class NoForcedOscillation(RuntimeError):
    """The FO window carries no usable oscillation."""


def wrap(x):
    """Wrap angles to ``(-pi, pi]``."""
    y = np.angle(np.exp(1j * np.asarray(x, dtype=float)))
    return np.where(y <= -np.pi, np.pi, y)


# ---------------------------------------------------------------------------
# events


@dataclass
class FOEvent:
    """FO window reduced to the detected frequencies and channel phasors.

    ``spectra[j]`` holds the complex amplitude of every channel of
    ``channels`` at ``modes[j]``; modes are sorted by aggregate magnitude,
    the first one being the major mode.
    """

    channels: tuple
    modes: list
    magnitudes: list
    spectra: np.ndarray
    dt: float = 0.0
    duration: float = 0.0

    def __post_init__(self):
        self.spectra = np.atleast_2d(np.asarray(self.spectra, dtype=complex))
        if len(self.modes) > 2:
            raise ValueError("at most 2 FO modes are supported")
        if self.spectra.shape != (len(self.modes), len(self.channels)):
            raise ValueError("spectra must be (modes x channels)")

    def target(self, channels, mode: int = 0) -> np.ndarray:
        """Phasors of ``channels`` (in that order) at mode ``mode``."""
        pos = {c: k for k, c in enumerate(self.channels)}
        missing = [c for c in channels if c not in pos]
        if missing:
            raise KeyError(f"FO window lacks channels: {', '.join(missing)}")
        return self.spectra[mode, [pos[c] for c in channels]]


def detect_event(
    window: TimeSeriesSet,
    channels=None,
    band=(0.1, 0.8),
    threshold: float = 0.3,
    max_modes: int = 2,
    pad_factor: int = 8,
    prefilter: bool = True,
) -> FOEvent:
    """Detect FO frequencies and take every channel's phasor at each of them.

    The window is detrended and (optionally) bandpassed with the zero-phase
    filter, whose real gain is common to all channels and so never changes a
    fit.  Phasors are Hann-windowed DTFTs at the detected frequency.
    """
    if not isinstance(window, TimeSeriesSet):
        raise TypeError("FO window must be a TimeSeriesSet")
    if channels is not None:
        window = window.select(list(channels))
    if window.n_samples < 8:
        raise ValueError("FO window is too short")
    if not np.all(np.isfinite(window.data)):
        raise ValueError("FO window contains non-finite samples")
    rec = detrend(window)
    if prefilter:
        rec = bandpass(rec, band[0], band[1])
    nfft = pad_factor * window.n_samples
    spec = spectrum(rec, window="hann", zero_pad_to=nfft)
    found = detect_modes(spec, band=band, threshold_ratio=threshold, max_modes=max_modes)
    freqs = [f for f, _ in found]
    mags = [m for _, m in found]
    vals = np.array([dtft_at(rec.data, f, rec.dt, window="hann") for f in freqs]).reshape(
        len(freqs), len(rec.channels)
    )
    return FOEvent(tuple(rec.ids), freqs, mags, vals, rec.dt, rec.duration)


# ---------------------------------------------------------------------------
# closed-form fits


@dataclass(frozen=True)
class Fit:
    estimate: complex | float
    residual: float
    degenerate: bool = False


def ls_fit_state(column, target) -> Fit:
    """``u = (c^H c)^-1 c^H x`` and ``||x - c u||``; a zero column gives u = 0."""
    c = np.asarray(column, dtype=complex).ravel()
    x = np.asarray(target, dtype=complex).ravel()
    if c.shape != x.shape:
        raise ValueError("column and target must have the same length")
    cc = np.vdot(c, c).real
    if cc == 0:
        return Fit(0j, float(np.linalg.norm(x)), True)
    u = np.vdot(c, x) / cc
    return Fit(complex(u), float(np.linalg.norm(x - c * u)))


def phase_fit(phase_column, target_phases) -> Fit:
    """Common phase offset minimizing the sum of squared wrapped errors.

    With ``r = wrap(target - column)`` the cost ``sum wrap(r - phi)^2`` is
    quadratic in ``phi`` between the cut points ``r_j + pi``; on each arc the
    minimizer is the mean of the residuals unwrapped around the arc, so the
    global optimum is the best of these ``m`` local means.  It equals the
    arithmetic mean for tightly clustered residuals and stays correct under
    wrap-around, where the arithmetic mean fails.
    """
    a = np.asarray(phase_column, dtype=float).ravel()
    b = np.asarray(target_phases, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("phase vectors must have the same length")
    if a.size < 2:
        raise ValueError("phase fitting needs at least 2 channels")
    r = wrap(b - a)
    cuts = np.sort(wrap(r + np.pi))
    mids = (cuts + np.roll(cuts, -1)) / 2
    mids[-1] += np.pi  # arc through the +-pi seam
    phi = wrap(mids + wrap(r[None, :] - mids[:, None]).mean(axis=1))
    cost = (wrap(r[None, :] - phi[:, None]) ** 2).sum(axis=1)
    k = int(np.argmin(cost))
    return Fit(float(phi[k]), float(cost[k]))


# ---------------------------------------------------------------------------
# reports


@dataclass
class LocalizationReport:
    mode: str
    frequencies: list
    ranking: list
    residuals: dict
    estimates: dict
    winner: object
    neighbors: tuple
    hops: int
    pair: bool = False
    mode_best: list = field(default_factory=list)
    excluded: tuple = ()

    def __post_init__(self):
        if not self.ranking or self.ranking[0] != self.winner:
            raise ValueError("winner must head the ranking")

    @property
    def winner_label(self) -> str:
        return "+".join(self.winner) if self.pair else str(self.winner)

    def rows(self):
        """One dict per ranked candidate (or pair), best first."""
        for rank, key in enumerate(self.ranking, 1):
            est = self.estimates[key]
            row = {
                "rank": rank,
                "candidate": "+".join(key) if self.pair else key,
                "residual": self.residuals[key],
            }
            if isinstance(est, complex):
                row["estimate_re"], row["estimate_im"] = est.real, est.imag
            elif isinstance(est, (list, tuple)):
                row["estimate"] = ";".join(repr(float(np.real(e))) for e in est)
            else:
                row["estimate"] = est
            yield row

    def to_dict(self) -> dict:
        def key(k):
            return "+".join(k) if self.pair else k

        def enc(v):
            if isinstance(v, complex):
                return [v.real, v.imag]
            if isinstance(v, (list, tuple)):
                return [enc(e) for e in v]
            return v

        return {
            "mode": self.mode,
            "pair": self.pair,
            "hops": self.hops,
            "frequencies": list(self.frequencies),
            "winner": key(self.winner),
            "neighbors": list(self.neighbors),
            "ranking": [key(k) for k in self.ranking],
            "residuals": {key(k): v for k, v in self.residuals.items()},
            "estimates": {key(k): enc(v) for k, v in self.estimates.items()},
            "mode_best": list(self.mode_best),
            "excluded_channels": list(self.excluded),
        }


# ---------------------------------------------------------------------------
# graph


def neighbor_set(graph, center, hops: int = 1) -> tuple:
    """Candidates within ``hops`` edges of ``center`` (itself included), sorted
    in graph order.

    ``graph`` is a mapping ``id -> iterable of neighbor ids``.
    """
    if hops < 0:
        raise ValueError("hops must be non-negative")
    if center not in graph:
        raise KeyError(f"{center!r} not in graph")
    dist = {center: 0}
    queue = deque([center])
    while queue:
        v = queue.popleft()
        if dist[v] == hops:
            continue
        for w in graph[v]:
            if w not in dist:
                dist[w] = dist[v] + 1
                queue.append(w)
    return tuple(v for v in graph if v in dist)


def graph_from_system(sys) -> dict:
    """Generator adjacency of a SwingSystem as ``{id: [neighbor ids]}``."""
    ids = list(sys.gen_ids)
    return {g: [ids[k] for k in np.flatnonzero(sys.gen_graph[i])] for i, g in enumerate(ids)}


def _neighbors(graph, winners, candidates, hops) -> tuple:
    if graph is None:
        return tuple(winners)
    found = set()
    for w in winners:
        found.update(neighbor_set(graph, w, hops))
    return tuple(c for c in candidates if c in found)


def _ranked(keys, residuals):
    order = sorted(range(len(keys)), key=lambda k: (residuals[k], k))
    return [keys[k] for k in order]


def _require_modes(event: FOEvent):
    if not event.modes:
        raise NoForcedOscillation("no FO detected")


# ---------------------------------------------------------------------------
# single source


def localize_state(
    bank: ResponseBank, event: FOEvent, graph=None, hops: int = 1, mode: int = 0
) -> LocalizationReport:
    """Complex LS fit of each candidate's bank column at the major FO mode."""
    if bank.mode != "state":
        raise ValueError(f"state localization needs a state bank, got {bank.mode!r}")
    _require_modes(event)
    xi = event.modes[mode]
    x = event.target(bank.channels, mode)
    cols = bank_at(bank, xi)
    fits = [ls_fit_state(cols[:, i], x) for i in range(len(bank.candidates))]
    return _single_report(bank, [xi], fits, graph, hops, ())


def localize_output(
    bank: ResponseBank,
    event: FOEvent,
    graph=None,
    hops: int = 1,
    floor: float = 0.05,
    mode: int = 0,
) -> LocalizationReport:
    """Phase-only fit; channels under ``floor`` x the largest FO magnitude are dropped."""
    _require_modes(event)
    xi = event.modes[mode]
    x = event.target(bank.channels, mode)
    keep = _energy_mask(x, floor)
    cols = bank_at(bank, xi)[keep]
    phases = np.angle(x[keep])
    fits = [phase_fit(np.angle(cols[:, i]), phases) for i in range(len(bank.candidates))]
    excluded = tuple(c for c, k in zip(bank.channels, keep) if not k)
    return _single_report(bank, [xi], fits, graph, hops, excluded, mode_name="output_phase")


def _energy_mask(x, floor):
    mag = np.abs(x)
    if mag.max() == 0:
        raise NoForcedOscillation("FO energy too low")
    keep = mag >= floor * mag.max()
    if keep.sum() < 2:
        raise NoForcedOscillation("FO energy too low")
    return keep


def _single_report(bank, freqs, fits, graph, hops, excluded, mode_name="state"):
    cands = list(bank.candidates)
    res = [f.residual for f in fits]
    ranking = _ranked(cands, res)
    winner = ranking[0]
    return LocalizationReport(
        mode=mode_name,
        frequencies=[float(f) for f in freqs],
        ranking=ranking,
        residuals={c: f.residual for c, f in zip(cands, fits)},
        estimates={c: f.estimate for c, f in zip(cands, fits)},
        winner=winner,
        neighbors=_neighbors(graph, [winner], cands, hops),
        hops=hops,
        excluded=excluded,
    )


def localize(bank, event, graph=None, hops: int = 1, floor: float = 0.05) -> LocalizationReport:
    """Dispatch on the bank mode."""
    if bank.mode == "state":
        return localize_state(bank, event, graph, hops)
    return localize_output(bank, event, graph, hops, floor)


# ---------------------------------------------------------------------------
# two sources


PAIR_MODELS = ("assign", "joint", "phase_sum")


def _pair_costs_state(cols, x, pairs: bool = True):
    """Normalized residual of the two-column LS fit for every candidate pair.

    Returns ``(single, pair)`` where ``single[i]`` is the one-column cost.
    """
    n = cols.shape[1]
    xx = np.vdot(x, x).real
    G = cols.conj().T @ cols  # Gram matrix
    b = cols.conj().T @ x
    diag = G.diagonal().real
    with np.errstate(divide="ignore", invalid="ignore"):
        single = np.where(diag > 0, xx - np.abs(b) ** 2 / diag, xx)
    pair = np.full((n, n), np.inf)
    for i, j in combinations(range(n) if pairs else (), 2):
        g = G[np.ix_([i, j], [i, j])]
        bb = b[[i, j]]
        sol, *_ = np.linalg.lstsq(g, bb, rcond=None)
        pair[i, j] = pair[j, i] = xx - np.vdot(bb, sol).real
    scale = xx if xx > 0 else 1.0
    return np.maximum(single, 0) / scale, np.maximum(pair, 0) / scale


def _phase_costs(cols, x, floor):
    keep = _energy_mask(x, floor)
    ph = np.angle(x[keep])
    c = np.angle(cols[keep])
    single = np.array([phase_fit(c[:, i], ph).residual for i in range(cols.shape[1])])
    return single / keep.sum(), c, ph, keep.sum()


def localize_pair(
    bank: ResponseBank,
    event: FOEvent,
    graph=None,
    hops: int = 1,
    floor: float = 0.05,
    model: str = "assign",
) -> LocalizationReport:
    """Exhaustive search over unordered candidate pairs.

    Every mode's cost is normalized (LS residual by ``||x||^2``, phase
    residual by the channel count) and costs are summed over modes.

    * ``"assign"`` (default): each mode is explained by the better-fitting
      member of the pair alone, i.e. each FO frequency is driven by one of
      the two sources.
    * ``"joint"``: state banks only; each mode is fitted by both columns at
      once (two-column complex LS), which also covers two sources sharing
      one frequency.
    * ``"phase_sum"``: per mode, fits the phase pattern
      ``arg c_i1 + arg c_i2`` plus a common offset to the FO phases.
    """
    if model not in PAIR_MODELS:
        raise ValueError(f"unknown pair model {model!r}")
    if model == "joint" and bank.mode != "state":
        raise ValueError("the joint pair model needs a state bank")
    _require_modes(event)
    cands = list(bank.candidates)
    n = len(cands)
    if n < 2:
        raise ValueError("pair search needs at least 2 candidates")
    total = np.zeros((n, n))
    per_mode = []
    mode_best = []
    for m, xi in enumerate(event.modes):
        x = event.target(bank.channels, m)
        cols = bank_at(bank, xi)
        if model == "phase_sum":
            single, c, ph, cnt = _phase_costs(cols, x, floor)
            cost = np.full((n, n), np.inf)
            for i, j in combinations(range(n), 2):
                cost[i, j] = cost[j, i] = phase_fit(c[:, i] + c[:, j], ph).residual / cnt
        elif model == "joint":
            single, cost = _pair_costs_state(cols, x)
        else:
            if bank.mode == "state":
                single, _ = _pair_costs_state(cols, x, pairs=False)
            else:
                single, *_ = _phase_costs(cols, x, floor)
            cost = np.minimum.outer(single, single)
            np.fill_diagonal(cost, np.inf)
        mode_best.append(cands[int(np.argmin(single))])
        per_mode.append(cost)
        total += cost
    pairs = list(combinations(range(n), 2))
    keys = [(cands[i], cands[j]) for i, j in pairs]
    res = [float(total[i, j]) for i, j in pairs]
    order = sorted(range(len(pairs)), key=lambda k: (res[k], pairs[k]))
    ranking = [keys[k] for k in order]
    winner = ranking[0]
    return LocalizationReport(
        mode=bank.mode,
        frequencies=[float(f) for f in event.modes],
        ranking=ranking,
        residuals=dict(zip(keys, res)),
        estimates={k: [float(c[i, j]) for c in per_mode] for k, (i, j) in zip(keys, pairs)},
        winner=winner,
        neighbors=_neighbors(graph, list(winner), cands, hops),
        hops=hops,
        pair=True,
        mode_best=mode_best,
    )
