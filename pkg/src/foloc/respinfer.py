"""Phase 1: impulse responses inferred from ambient records.

Under white ambient forcing with covariance proportional to inertia and
uniform damping, the cross-correlation of the speed at ``l`` with any
channel ``x`` is, for ``tau >= 0``, proportional to the response of ``x``
to an impulse at ``l``::

    T_{u_l, x}(tau) = (2 gamma / alpha) * C_{omega_l, x}(tau)

with the lag convention of :mod:`foloc.sigproc`.  The factor ``2 gamma /
alpha`` is common to every entry and is never applied: banks hold raw
cross-correlation values.  When only the rotor angle of ``l`` is available
the lead is differentiated, ``T = -d/dtau C_{delta_l, x}``.

A bank stores the full two-sided lag series of every (candidate, channel)
pair.  ``causal`` banks are evaluated on ``tau >= 0`` only, which is the
impulse-response reading; non-causal banks give the cross power spectral
density, whose phase is the relative phase between the two channels.
"""

from __future__ import annotations

import json
import re
import zipfile
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sigproc import LagSeries, bandpass, detrend, dtft_at, numdiff, xcorr_many
from .timeseries import TimeSeriesSet

BANK_FORMAT = "foloc-bank"
BANK_VERSION = 1
MODES = ("state", "output_phase")

ROTOR_KINDS = ("rotor_angle", "rotor_speed")
OUTPUT_KINDS = ("bus_angle", "bus_freq", "line_flow")
# lead channels that already behave like a speed; angle-like leads get -d/dtau
SPEED_LIKE = ("rotor_speed", "bus_freq")
ANGLE_LIKE = ("rotor_angle", "bus_angle")


def natural_key(s: str):
    """Sort key that orders ``B2`` before ``B10``."""
    return [int(t) if t.isdigit() else t for t in re.split(r"(\d+)", str(s))]


@dataclass(frozen=True)
class SurrogateMap:
    """Candidate generator -> the measured channel standing in for its speed."""

    entries: dict

    def __post_init__(self):
        object.__setattr__(self, "entries", {str(k): str(v) for k, v in dict(self.entries).items()})
        if not self.entries:
            raise ValueError("surrogate map is empty")

    @property
    def candidates(self) -> list[str]:
        return list(self.entries)

    def __getitem__(self, candidate) -> str:
        return self.entries[str(candidate)]

    def check(self, record: TimeSeriesSet):
        missing = [f"{c} -> {s}" for c, s in self.entries.items() if s not in record]
        if missing:
            raise KeyError(f"surrogate channels missing from record: {', '.join(missing)}")

    @classmethod
    def nearest(cls, sys, available, candidates=None, kind: str = "bus_freq") -> "SurrogateMap":
        """Own speed channel when available, else the topologically nearest
        measured bus (ties go to the smallest bus id)."""
        available = set(available)
        prefix = {"bus_freq": "f:", "bus_angle": "theta:"}[kind]
        measured = {cid[len(prefix):] for cid in available if cid.startswith(prefix)}
        entries = {}
        for g in candidates or sys.gen_ids:
            g = str(g)
            if f"omega:{g}" in available:
                entries[g] = f"omega:{g}"
                continue
            bus = _nearest_bus(sys.bus_graph, sys.gen_bus[g], measured)
            if bus is None:
                raise KeyError(f"no measured bus reachable from generator {g}")
            entries[g] = prefix + bus
        return cls(entries)

    def to_dict(self) -> dict:
        return {"format": "foloc-surrogates", "version": 1, "entries": dict(self.entries)}

    @classmethod
    def from_dict(cls, d: dict) -> "SurrogateMap":
        if d.get("version", 1) != 1:
            raise ValueError(f"unsupported surrogate map version {d.get('version')!r}")
        return cls(d["entries"] if "entries" in d else d)

    @classmethod
    def load(cls, path) -> "SurrogateMap":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def save(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))


def _nearest_bus(graph: dict, start: str, measured: set):
    dist = {start: 0}
    queue = deque([start])
    best, best_d = [], None
    while queue:
        b = queue.popleft()
        if best_d is not None and dist[b] > best_d:
            break
        if b in measured:
            best.append(b)
            best_d = dist[b]
        for nb in graph.get(b, ()):
            if nb not in dist:
                dist[nb] = dist[b] + 1
                queue.append(nb)
    return min(best, key=natural_key) if best else None


@dataclass(frozen=True)
class ResponseBank:
    """Inferred responses of every channel to every candidate source.

    ``values[:, i, j]`` is the lag series (at ``lags``) for candidate ``i``
    and channel ``j``, already carrying the sign/derivative of its lead.
    """

    candidates: tuple
    channels: tuple
    kinds: tuple
    mode: str
    dt: float
    lags: np.ndarray
    values: np.ndarray
    leads: tuple
    transforms: tuple
    causal: bool = True
    band: tuple = (0.1, 0.8)
    taper: str | None = "hann"
    attrs: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown bank mode {self.mode!r}")
        shape = (len(self.lags), len(self.candidates), len(self.channels))
        if self.values.shape != shape:
            raise ValueError(f"bank values have shape {self.values.shape}, expected {shape}")
        if len(self.kinds) != len(self.channels) or len(self.leads) != len(self.candidates):
            raise ValueError("bank metadata lengths do not match")
        if self.taper not in (None, "hann"):
            raise ValueError(f"unknown lag taper {self.taper!r}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("bank contains non-finite values")

    @property
    def shape(self) -> tuple[int, int]:
        return len(self.candidates), len(self.channels)

    def entry(self, candidate, channel, causal: bool | None = None) -> LagSeries:
        i = self.candidates.index(str(candidate))
        j = self.channels.index(str(channel))
        s = LagSeries(self.lags, self.values[:, i, j], (self.leads[i], self.channels[j]))
        causal = self.causal if causal is None else causal
        return s.causal() if causal else s

    def at(self, xi: float, causal: bool | None = None) -> np.ndarray:
        return bank_at(self, xi, causal)

    def scaled(self, c) -> "ResponseBank":
        return _replace(self, values=self.values * c)


def _replace(bank: ResponseBank, **kw) -> ResponseBank:
    d = {f: getattr(bank, f) for f in bank.__dataclass_fields__}
    d.update(kw)
    return ResponseBank(**d)


def _prepare(record: TimeSeriesSet, band, prefilter: bool) -> TimeSeriesSet:
    if not isinstance(record, TimeSeriesSet):
        raise TypeError("ambient record must be a TimeSeriesSet")
    if record.n_samples < 3:
        raise ValueError("ambient record is too short")
    if not np.all(np.isfinite(record.data)):
        raise ValueError("ambient record contains non-finite samples")
    rec = detrend(record)
    angle = [k for k, c in enumerate(record.channels) if c.kind in ANGLE_LIKE]
    if angle:
        data = rec.data.copy()
        data[:, angle] = remove_chord(record.data[:, angle])
        rec = rec.with_data(data)
    if prefilter:
        rec = bandpass(rec, band[0], band[1])
    return rec


def remove_chord(x: np.ndarray) -> np.ndarray:
    """Subtract the straight line through the first and last samples.

    Angles carry the undamped rigid-body mode and drift like a random walk.
    The biased cross-correlation of such a record picks up an end-of-record
    term ``a(N - tau) x(N) / N`` that survives differentiation in ``tau`` and
    breaks ``d/dtau C_{a, delta} = C_{a, omega}``; pinning both ends to zero
    removes it.
    """
    n = x.shape[0]
    ramp = np.linspace(0.0, 1.0, n)[:, None]
    return x - x[:1] - ramp * (x[-1:] - x[:1])


def _assemble(rec, leads, channels, candidates, mode, max_lag, band, causal, taper,
              symmetric_pairs=()):
    lead_data = rec.select(leads).data
    target_data = rec.select(channels).data
    lags, C = xcorr_many(lead_data, target_data, rec.dt, max_lag)
    # reciprocity: T_{u_l, x_k} = T_{u_k, x_l}; average the two estimates
    for (i, j), (k, m) in symmetric_pairs:
        avg = 0.5 * (C[:, i, j] + C[:, k, m])
        C[:, i, j] = avg
        C[:, k, m] = avg
    kinds = tuple(rec.channels[rec.index(c)].kind for c in channels)
    transforms = []
    for i, lead in enumerate(leads):
        kind = rec.channels[rec.index(lead)].kind
        if kind in SPEED_LIKE:
            transforms.append("identity")
        elif kind in ANGLE_LIKE:
            C[:, i, :] = -numdiff(C[:, i, :], rec.dt)
            transforms.append("neg_derivative")
        else:
            raise ValueError(f"channel {lead!r} of kind {kind!r} cannot stand in for a speed")
    C.setflags(write=False)
    lags.setflags(write=False)
    return ResponseBank(
        candidates=tuple(candidates),
        channels=tuple(channels),
        kinds=kinds,
        mode=mode,
        dt=rec.dt,
        lags=lags,
        values=C,
        leads=tuple(leads),
        transforms=tuple(transforms),
        causal=causal,
        band=tuple(float(b) for b in band),
        taper=taper,
        attrs={"n_samples": rec.n_samples, "max_lag": max_lag},
    )


def infer_bank_states(
    ambient: TimeSeriesSet,
    candidates=None,
    channels=None,
    max_lag: float = 20.0,
    band=(0.1, 0.8),
    prefilter: bool = False,
    symmetrize: bool = True,
    causal: bool = True,
    taper: str | None = "hann",
) -> ResponseBank:
    """Bank from rotor channels: candidate ``l`` leads with ``omega:l``, or
    with ``delta:l`` (differentiated) when the speed is not recorded.

    ``channels`` defaults to every rotor channel in the record.  With
    ``prefilter`` the record is bandpassed before correlating; by default it
    is only detrended, because filtering smears the lag series across
    ``tau = 0`` and biases the causal truncation.
    """
    rotor = [c for c in ambient.channels if c.kind in ROTOR_KINDS]
    if candidates is None:
        candidates = sorted({c.location for c in rotor}, key=natural_key)
    candidates = [str(c) for c in candidates]
    leads, missing = [], []
    for g in candidates:
        if f"omega:{g}" in ambient:
            leads.append(f"omega:{g}")
        elif f"delta:{g}" in ambient:
            leads.append(f"delta:{g}")
        else:
            missing.append(f"omega:{g}")
    if missing:
        raise KeyError(f"missing candidate channels: {', '.join(missing)}")
    if channels is None:
        channels = [c.id for c in rotor]
    channels = [str(c) for c in channels]

    pairs = []
    if symmetrize:
        pos = {c: j for j, c in enumerate(channels)}
        for i, li in enumerate(leads):
            for k in range(i + 1, len(leads)):
                lk = leads[k]
                if li.split(":")[0] != lk.split(":")[0]:
                    continue
                for pre in ("delta:", "omega:"):
                    a, b = pre + candidates[k], pre + candidates[i]
                    if a in pos and b in pos:
                        pairs.append(((i, pos[a]), (k, pos[b])))
    rec = _prepare(ambient, band, prefilter)
    return _assemble(rec, leads, channels, candidates, "state", max_lag, band, causal, taper, pairs)


def infer_bank_outputs(
    ambient: TimeSeriesSet,
    surrogates: SurrogateMap,
    channels=None,
    max_lag: float = 20.0,
    band=(0.1, 0.8),
    prefilter: bool = False,
    causal: bool = True,
    taper: str | None = "hann",
) -> ResponseBank:
    """Bank from output channels, each candidate led by its surrogate channel.

    ``channels`` defaults to every bus angle, bus frequency and line flow in
    the record.  ``causal=False`` keeps the two-sided series, so that
    :func:`bank_at` returns cross power spectral densities.
    """
    if not isinstance(surrogates, SurrogateMap):
        surrogates = SurrogateMap(surrogates)
    surrogates.check(ambient)
    if channels is None:
        channels = [c.id for c in ambient.channels if c.kind in OUTPUT_KINDS]
    channels = [str(c) for c in channels]
    missing = [c for c in channels if c not in ambient]
    if missing:
        raise KeyError(f"output channels missing from record: {', '.join(missing)}")
    rec = _prepare(ambient, band, prefilter)
    leads = [surrogates[c] for c in surrogates.candidates]
    bank = _assemble(
        rec, leads, channels, surrogates.candidates, "output_phase", max_lag, band, causal, taper
    )
    bank.attrs["surrogates"] = dict(surrogates.entries)
    return bank


def bank_at(bank: ResponseBank, xi: float, causal: bool | None = None) -> np.ndarray:
    """Complex ``channels x candidates`` matrix at ``xi`` Hz.

    Causal evaluation uses ``tau >= 0`` with a half weight on ``tau = 0``
    (trapezoidal end point).  With ``taper="hann"`` the lag series is
    weighted by a Hann lag window decaying from 1 at ``tau = 0`` to 0 at the
    largest stored lag, trading a small bias for much less estimator noise
    from the poorly averaged large lags.  Magnitudes of output-mode banks are carried
    along but only their phases are meaningful for localization.
    """
    lo, hi = bank.band
    if not lo <= xi <= hi:
        raise ValueError(f"frequency {xi} Hz outside analysis band [{lo}, {hi}]")
    causal = bank.causal if causal is None else causal
    lags, vals = bank.lags, bank.values
    if causal:
        k0 = int(np.argmin(np.abs(lags)))
        lags, vals = lags[k0:], vals[k0:].copy()
        vals[0] *= 0.5
    if bank.taper == "hann":
        vals = vals * lag_window(lags)[:, None, None]
    out = dtft_at(vals, xi, bank.dt, t0=float(lags[0]))
    return out.T


def lag_window(lags: np.ndarray) -> np.ndarray:
    """Hann lag window: ``cos^2(pi tau / (2 L))`` with ``L`` the largest |lag|."""
    span = np.abs(lags).max() + (lags[1] - lags[0])
    return np.cos(0.5 * np.pi * lags / span) ** 2


# ---------------------------------------------------------------------------
# persistence


def save_bank(bank: ResponseBank, path) -> Path:
    """Write a bank as ``.npz`` (members ``header``, ``lags``, ``values``).

    ``header`` is a JSON string: format/version tag, candidates, channels,
    channel kinds, mode, dt, lag range, leads, lead transforms, causal flag,
    band and taper.  ``values`` is ``(n_lags, n_candidates, n_channels)``.
    """
    path = Path(path)
    if path.suffix != ".npz":
        path = path.with_name(path.name + ".npz")
    path.parent.mkdir(parents=True, exist_ok=True)
    header = {
        "format": BANK_FORMAT,
        "version": BANK_VERSION,
        "candidates": list(bank.candidates),
        "channels": list(bank.channels),
        "kinds": list(bank.kinds),
        "mode": bank.mode,
        "dt": bank.dt,
        "lag_range": [float(bank.lags[0]), float(bank.lags[-1])],
        "leads": list(bank.leads),
        "transforms": list(bank.transforms),
        "causal": bank.causal,
        "band": list(bank.band),
        "taper": bank.taper,
        "attrs": bank.attrs,
    }
    arrays = {
        "header": np.array(json.dumps(header, sort_keys=True)),
        "lags": np.ascontiguousarray(bank.lags),
        "values": np.ascontiguousarray(bank.values),
    }
    # fixed member timestamps keep the file byte-identical across runs
    with zipfile.ZipFile(path, "w", compression=zipfile.ZIP_STORED) as zf:
        for name, arr in arrays.items():
            info = zipfile.ZipInfo(f"{name}.npy", date_time=(1980, 1, 1, 0, 0, 0))
            with zf.open(info, "w", force_zip64=True) as fh:
                np.lib.format.write_array(fh, arr, allow_pickle=False)
    return path


def load_bank(path) -> ResponseBank:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"no such bank file: {path}")
    with np.load(path, allow_pickle=False) as z:
        header = json.loads(str(z["header"]))
        lags, values = z["lags"], z["values"]
    if header.get("format") != BANK_FORMAT:
        raise ValueError(f"{path}: not a response bank")
    if header.get("version") != BANK_VERSION:
        raise ValueError(f"{path}: unsupported bank version {header.get('version')!r}")
    return ResponseBank(
        candidates=tuple(header["candidates"]),
        channels=tuple(header["channels"]),
        kinds=tuple(header["kinds"]),
        mode=header["mode"],
        dt=float(header["dt"]),
        lags=lags,
        values=values,
        leads=tuple(header["leads"]),
        transforms=tuple(header["transforms"]),
        causal=bool(header["causal"]),
        band=tuple(header["band"]),
        taper=header.get("taper"),
        attrs=header.get("attrs", {}),
    )


# ---------------------------------------------------------------------------
# comparison against the simulator


@dataclass
class BankValidation:
    """Per-entry agreement between a bank and the exact responses.

    ``correlation[i, j]`` is the normalized time-domain correlation of the
    bandpassed inferred and reference responses on ``0 <= tau <= max_lag``.
    ``phase_error``/``magnitude_error`` are indexed ``[mode, i, j]``;
    magnitudes are compared after applying the known ``2 gamma / alpha``.
    ``significant`` marks entries whose reference magnitude at the mode is
    at least half the largest one for that candidate.
    """

    candidates: tuple
    channels: tuple
    mode_frequencies: np.ndarray
    correlation: np.ndarray
    phase_error: np.ndarray
    magnitude_error: np.ndarray
    significant: np.ndarray

    def median_correlation(self) -> float:
        return float(np.median(self.correlation))

    def mode_phase_errors(self) -> np.ndarray:
        """Median absolute phase error over significant entries, per mode."""
        return np.array(
            [np.median(np.abs(p[s])) for p, s in zip(self.phase_error, self.significant)]
        )

    def rows(self):
        for i, c in enumerate(self.candidates):
            for j, ch in enumerate(self.channels):
                yield {
                    "candidate": c,
                    "channel": ch,
                    "correlation": float(self.correlation[i, j]),
                    **{f"phase_err@{f:.4f}": float(self.phase_error[m, i, j])
                       for m, f in enumerate(self.mode_frequencies)},
                }


def normalized_correlation(a: np.ndarray, b: np.ndarray) -> float:
    """Pearson correlation coefficient (0 when either series is constant)."""
    a = a - a.mean()
    b = b - b.mean()
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return 0.0
    return float(np.dot(a, b) / (na * nb))


def reference_bank(bank: ResponseBank, sys) -> np.ndarray:
    """Exact responses ``(2 gamma/alpha)^-1 T`` on the bank's causal lag grid."""
    from .dynsim import reference_impulse_response

    k0 = int(np.argmin(np.abs(bank.lags)))
    n = len(bank.lags) - k0
    out = np.empty((n, len(bank.candidates), len(bank.channels)))
    scale = sys.alpha / (2 * sys.gamma)
    for i, c in enumerate(bank.candidates):
        ref = reference_impulse_response(sys, c, n * bank.dt, bank.dt)
        out[:, i, :] = scale * ref.select(list(bank.channels)).data
    return out


def validate_bank(bank: ResponseBank, sys, filtered: bool = True) -> BankValidation:
    """Compare every bank entry with the simulator's exact response."""
    from .dynsim import transfer_at

    ref = reference_bank(bank, sys)
    k0 = int(np.argmin(np.abs(bank.lags)))
    est = np.array(bank.values[k0:], dtype=float)
    if filtered:
        shape = est.shape
        est = bandpass(est.reshape(shape[0], -1), *bank.band, dt=bank.dt).reshape(shape)
        ref = bandpass(ref.reshape(shape[0], -1), *bank.band, dt=bank.dt).reshape(shape)
    nc, nk = bank.shape
    corr = np.array(
        [[normalized_correlation(est[:, i, j], ref[:, i, j]) for j in range(nk)] for i in range(nc)]
    )
    modes = np.array([f for f in sys.modes() if bank.band[0] <= f <= bank.band[1]])
    scale = 2 * sys.gamma / sys.alpha
    cols = [list(sys.channels).index(next(c for c in sys.channels if c.id == ch))
            for ch in bank.channels]
    ph = np.zeros((len(modes), nc, nk))
    mag = np.zeros_like(ph)
    sig = np.zeros(ph.shape, dtype=bool)
    for m, xi in enumerate(modes):
        inferred = bank_at(bank, xi).T * scale
        exact = np.array([transfer_at(sys, c, xi)[cols] for c in bank.candidates])
        ph[m] = np.angle(inferred * np.conj(exact))
        with np.errstate(divide="ignore", invalid="ignore"):
            mag[m] = np.where(np.abs(exact) > 0, np.abs(inferred) / np.abs(exact) - 1, np.inf)
        sig[m] = np.abs(exact) >= 0.5 * np.abs(exact).max(axis=1, keepdims=True)
    return BankValidation(tuple(bank.candidates), tuple(bank.channels), modes, corr, ph, mag, sig)
