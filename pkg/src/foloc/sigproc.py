"""Signal-processing primitives shared by both localization phases.

Conventions
-----------
* Cross-correlation is the biased estimator
  ``C_ab(tau) = (1/N) * sum_t a(t) b(t + tau)``; a positive lag means ``b``
  is read later than ``a``.  Its transform is ``conj(A) * B / N``.
* ``spectrum`` normalizes by ``N * coherent_gain`` so that a real tone of
  amplitude ``A`` on a bin center shows ``A/2`` at ``+f`` and ``-f``.
* ``dtft_at`` is the plain Riemann sum ``sum_k x_k exp(-2j pi xi t_k) dt``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import fft as sfft
from scipy import signal
from scipy.integrate import cumulative_simpson

from .timeseries import TimeSeriesSet


@dataclass
class Spectrum:
    frequencies: np.ndarray
    values: np.ndarray  # (n_freq, n_channels)
    window: str
    source_len: int
    dt: float
    channel_ids: list | None = None

    @property
    def bin_width(self) -> float:
        """Native resolution ``1/(N dt)`` of the unpadded record."""
        return 1.0 / (self.source_len * self.dt)

    def aggregate(self) -> np.ndarray:
        """Euclidean norm across channels at each frequency."""
        return np.linalg.norm(self.values, axis=1)


@dataclass
class LagSeries:
    lags: np.ndarray
    values: np.ndarray
    pair: tuple = ("", "")

    @property
    def dt(self) -> float:
        return float(self.lags[1] - self.lags[0])

    def causal(self) -> "LagSeries":
        keep = self.lags >= -0.5 * self.dt
        return LagSeries(self.lags[keep], self.values[keep], self.pair)


def _unwrap(series):
    if isinstance(series, TimeSeriesSet):
        return series.data, series
    return np.asarray(series, dtype=float), None


def _rewrap(data, like):
    if like is None:
        return data
    return like.with_data(data)


def detrend(series):
    """Remove the mean of every channel."""
    x, like = _unwrap(series)
    if x.size == 0:
        raise ValueError("empty series")
    return _rewrap(x - x.mean(axis=0), like)


def design_bandpass(f1: float, f2: float, dt: float, order: int = 4):
    nyq = 0.5 / dt
    if not 0 < f1 < f2 < nyq:
        raise ValueError(f"band [{f1}, {f2}] Hz must satisfy 0 < f1 < f2 < Nyquist={nyq}")
    return signal.butter(order, [f1, f2], btype="bandpass", fs=1.0 / dt, output="sos")


def bandpass(series, f1: float, f2: float, dt: float | None = None, order: int = 4):
    """Zero-phase Butterworth bandpass (forward-backward, so the gain is |H|^2).

    ``dt`` may be omitted for a TimeSeriesSet.
    """
    x, like = _unwrap(series)
    if dt is None:
        if like is None:
            raise ValueError("dt is required for array input")
        dt = like.dt
    sos = design_bandpass(f1, f2, dt, order)
    y = signal.sosfiltfilt(sos, x, axis=0)
    return _rewrap(y, like)


def bandpass_gain(f, f1: float, f2: float, dt: float, order: int = 4) -> np.ndarray:
    """Magnitude response of :func:`bandpass` (forward-backward) at ``f`` Hz."""
    sos = design_bandpass(f1, f2, dt, order)
    _, h = signal.sosfreqz(sos, worN=np.atleast_1d(f), fs=1.0 / dt)
    return np.abs(h) ** 2


def _lag_samples(n: int, dt: float, max_lag: float | None) -> int:
    if max_lag is None:
        return n - 1
    k = int(np.floor(max_lag / dt + 1e-9))
    if k >= n:
        raise ValueError("max_lag must be shorter than the record")
    return k


def xcorr_many(lead: np.ndarray, target: np.ndarray, dt: float, max_lag: float | None = None):
    """Biased cross-correlations of every lead column against every target column.

    Returns ``(lags, C)`` with ``C[:, i, j] = C_{lead_i, target_j}(lags)``.
    Each column is transformed once; the pair products dominate the cost.
    """
    lead = np.asarray(lead, dtype=float)
    target = np.asarray(target, dtype=float)
    if lead.ndim == 1:
        lead = lead[:, None]
    if target.ndim == 1:
        target = target[:, None]
    n = lead.shape[0]
    if target.shape[0] != n:
        raise ValueError("lead and target must have the same length")
    k = _lag_samples(n, dt, max_lag)
    nfft = sfft.next_fast_len(2 * n - 1, real=True)
    FA = np.conj(sfft.rfft(lead, nfft, axis=0))
    FB = sfft.rfft(target, nfft, axis=0)
    out = np.empty((2 * k + 1, lead.shape[1], target.shape[1]))
    for i in range(lead.shape[1]):
        c = sfft.irfft(FA[:, i : i + 1] * FB, nfft, axis=0)
        out[:, i, :] = np.concatenate([c[nfft - k :], c[: k + 1]], axis=0) / n
    lags = dt * np.arange(-k, k + 1)
    return lags, out


def xcorr(a, b, max_lag: float | None = None, dt: float | None = None, pair=("a", "b")) -> LagSeries:
    """Biased cross-correlation ``C_ab`` restricted to ``|tau| <= max_lag`` seconds.

    ``a``/``b`` are arrays (``dt`` required) or single-channel TimeSeriesSets.
    """
    if isinstance(a, TimeSeriesSet) or isinstance(b, TimeSeriesSet):
        if not (isinstance(a, TimeSeriesSet) and isinstance(b, TimeSeriesSet)):
            raise TypeError("pass two TimeSeriesSets or two arrays")
        if not np.isclose(a.dt, b.dt, rtol=1e-12, atol=0):
            raise ValueError(f"mismatched dt: {a.dt} vs {b.dt}")
        dt = a.dt
        pair = (a.ids[0], b.ids[0])
        a, b = a.data[:, 0], b.data[:, 0]
    if dt is None:
        raise ValueError("dt is required for array input")
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise ValueError("a and b must have equal length")
    lags, c = xcorr_many(a, b, dt, max_lag)
    return LagSeries(lags, c[:, 0, 0], tuple(pair))


def _check_length(x, axis=0):
    if x.shape[axis] < 3:
        raise ValueError("need at least 3 samples")


def numdiff(x, dt: float | None = None):
    """Fourth-order central differences (one-sided fourth-order stencils at the ends).

    Accepts an array (``dt`` required, time along axis 0), a TimeSeriesSet or
    a LagSeries.
    """
    if isinstance(x, LagSeries):
        return LagSeries(x.lags, numdiff(x.values, x.dt), x.pair)
    data, like = _unwrap(x)
    if dt is None:
        if like is None:
            raise ValueError("dt is required for array input")
        dt = like.dt
    _check_length(data)
    n = data.shape[0]
    if n < 5:
        return _rewrap(np.gradient(data, dt, axis=0, edge_order=2), like)
    d = np.empty_like(data)
    d[2:-2] = (data[:-4] - 8 * data[1:-3] + 8 * data[3:-1] - data[4:]) / (12 * dt)
    # one-sided 5-point stencils
    d[0] = (-25 * data[0] + 48 * data[1] - 36 * data[2] + 16 * data[3] - 3 * data[4]) / (12 * dt)
    d[1] = (-3 * data[0] - 10 * data[1] + 18 * data[2] - 6 * data[3] + data[4]) / (12 * dt)
    d[-1] = (25 * data[-1] - 48 * data[-2] + 36 * data[-3] - 16 * data[-4] + 3 * data[-5]) / (12 * dt)
    d[-2] = (3 * data[-1] + 10 * data[-2] - 18 * data[-3] + 6 * data[-4] - data[-5]) / (12 * dt)
    return _rewrap(d, like)


def numint(x, dt: float | None = None):
    """Cumulative Simpson integral with zero initial value.

    Fourth-order accurate, matching :func:`numdiff`, so that
    ``numint(numdiff(x))`` returns ``x`` up to a constant for smooth ``x``.
    """
    if isinstance(x, LagSeries):
        return LagSeries(x.lags, numint(x.values, x.dt), x.pair)
    data, like = _unwrap(x)
    if dt is None:
        if like is None:
            raise ValueError("dt is required for array input")
        dt = like.dt
    _check_length(data)
    return _rewrap(cumulative_simpson(data, dx=dt, axis=0, initial=0.0), like)


def spectrum(
    series,
    dt: float | None = None,
    window: str = "hann",
    zero_pad_to: int | None = None,
    onesided: bool = True,
) -> Spectrum:
    """Windowed, zero-padded FFT normalized by ``N * coherent_gain``.

    ``onesided`` keeps ``0 <= f <= fs/2``; otherwise the full spectrum is
    returned on an increasing grid (fftshift order).
    """
    data, like = _unwrap(series)
    if data.ndim == 1:
        data = data[:, None]
    if dt is None:
        if like is None:
            raise ValueError("dt is required for array input")
        dt = like.dt
    n = data.shape[0]
    if n == 0:
        raise ValueError("empty series")
    w = signal.get_window(window, n) if window not in (None, "rect", "rectangular") else np.ones(n)
    gain = w.sum()
    nfft = max(n, zero_pad_to or n)
    xw = data * w[:, None]
    if onesided:
        vals = sfft.rfft(xw, nfft, axis=0) / gain
        freqs = sfft.rfftfreq(nfft, dt)
    else:
        vals = sfft.fftshift(sfft.fft(xw, nfft, axis=0) / gain, axes=0)
        freqs = sfft.fftshift(sfft.fftfreq(nfft, dt))
    return Spectrum(freqs, vals, window or "rect", n, dt, like.ids if like is not None else None)


def dtft_at(x, xi: float, dt: float | None = None, t0: float = 0.0, window: str | None = None):
    """``sum_k w_k x_k exp(-2j pi xi (t0 + k dt)) dt`` along axis 0.

    A TimeSeriesSet is evaluated with its time origin at the first sample.
    """
    data, like = _unwrap(x)
    if dt is None:
        if like is None:
            raise ValueError("dt is required for array input")
        dt = like.dt
    if not xi < 0.5 / dt:
        raise ValueError("frequency must be below Nyquist")
    n = data.shape[0]
    t = t0 + dt * np.arange(n)
    kern = np.exp(-2j * np.pi * xi * t) * dt
    if window is not None:
        kern = kern * signal.get_window(window, n)
    return np.tensordot(kern, data, axes=(0, 0))


def detect_modes(
    spec: Spectrum,
    band: tuple[float, float] = (0.1, 0.8),
    threshold_ratio: float = 0.3,
    max_modes: int = 2,
    merge_bins: float = 2.0,
    prominence: float = 3.0,
) -> list[tuple[float, float]]:
    """Oscillation frequencies from the channel-aggregate magnitude.

    Returns ``[(freq, aggregate_magnitude), ...]`` sorted by magnitude.  A
    peak qualifies at ``threshold_ratio`` of the in-band maximum; peaks within
    ``merge_bins`` native bins collapse to the larger one.  If more than
    ``max_modes`` peaks qualify the record is treated as unforced and only the
    top peak is returned, and only if it exceeds ``prominence`` times the
    in-band median.
    """
    f = spec.frequencies
    inband = (f >= band[0]) & (f <= band[1])
    if not inband.any():
        raise ValueError(f"no frequency bins inside band {band}")
    agg = spec.aggregate()
    idx = np.flatnonzero(inband)
    a = agg[idx]
    if not np.any(a > 0):
        return []
    peak_max = a.max()
    median = np.median(a)
    # local maxima (plateau-safe: strictly greater than left, >= right)
    left = np.r_[-np.inf, a[:-1]]
    right = np.r_[a[1:], -np.inf]
    is_peak = (a > left) & (a >= right)
    floor = max(threshold_ratio * peak_max, prominence * median)
    cand = [(f[idx[k]], a[k]) for k in np.flatnonzero(is_peak) if a[k] >= floor]
    cand.sort(key=lambda p: (-p[1], p[0]))
    radius = merge_bins * spec.bin_width
    merged: list[tuple[float, float]] = []
    for fr, mag in cand:
        if all(abs(fr - g) >= radius for g, _ in merged):
            merged.append((float(fr), float(mag)))
    if len(merged) > max_modes:
        return merged[:1]
    return merged
