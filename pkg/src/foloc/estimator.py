"""scikit-learn style front end for the two localization phases.

``fit`` runs Phase 1 on an ambient record and stores the response bank;
``predict`` runs Phase 2 on FO windows.  Parameters follow the estimator
conventions (plain constructor arguments, learned state with a trailing
underscore), so ``get_params``/``set_params``/``clone`` work as usual.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .folocate import (
    FOEvent,
    LocalizationReport,
    detect_event,
    graph_from_system,
    localize,
    localize_pair,
)
from .respinfer import (
    ResponseBank,
    SurrogateMap,
    infer_bank_outputs,
    infer_bank_states,
)
from .timeseries import TimeSeriesSet


def check_record(X, name: str = "record", min_samples: int = 3) -> TimeSeriesSet:
    """Validate a TimeSeriesSet argument (type, length, finiteness)."""
    if not isinstance(X, TimeSeriesSet):
        raise TypeError(f"{name} must be a TimeSeriesSet, got {type(X).__name__}")
    if X.n_samples < min_samples:
        raise ValueError(f"{name} has {X.n_samples} samples; need at least {min_samples}")
    if not np.all(np.isfinite(X.data)):
        raise ValueError(f"{name} contains non-finite samples")
    return X


def check_band(band) -> tuple[float, float]:
    lo, hi = (float(b) for b in band)
    if not 0 < lo < hi:
        raise ValueError(f"band must satisfy 0 < f1 < f2, got {band}")
    return lo, hi


def _windows(X):
    if isinstance(X, TimeSeriesSet):
        return [X], True
    return list(X), False


class FOLocalizer(BaseEstimator):
    """Forced-oscillation source localizer.

    Parameters
    ----------
    mode : {"state", "output"}
        ``state`` fits rotor channels with complex LS; ``output`` fits
        output-channel phases through a surrogate map.
    candidates : list of generator ids, optional
        State mode only; defaults to every generator with a rotor channel.
    surrogates : dict or SurrogateMap, optional
        Output mode only (required there).
    channels : list of channel ids, optional
        Measured channels used for fitting; defaults depend on ``mode``.
    graph : dict or SwingSystem, optional
        Candidate adjacency for the neighbor set; without it the neighbor
        set is the winner alone.
    """

    def __init__(
        self,
        mode: str = "state",
        candidates=None,
        surrogates=None,
        channels=None,
        graph=None,
        max_lag: float = 20.0,
        band=(0.1, 0.8),
        causal: bool = True,
        taper: str | None = "hann",
        prefilter: bool = False,
        threshold: float = 0.3,
        floor: float = 0.05,
        hops: int = 1,
        pairs: bool = False,
        pair_model: str = "assign",
    ):
        self.mode = mode
        self.candidates = candidates
        self.surrogates = surrogates
        self.channels = channels
        self.graph = graph
        self.max_lag = max_lag
        self.band = band
        self.causal = causal
        self.taper = taper
        self.prefilter = prefilter
        self.threshold = threshold
        self.floor = floor
        self.hops = hops
        self.pairs = pairs
        self.pair_model = pair_model

    # -- phase 1 -----------------------------------------------------------

    def fit(self, X: TimeSeriesSet, y=None):
        """Infer the response bank from the ambient record ``X``."""
        X = check_record(X, "ambient record")
        band = check_band(self.band)
        if not self.max_lag > 0:
            raise ValueError("max_lag must be positive")
        kw = dict(max_lag=self.max_lag, band=band, prefilter=self.prefilter,
                  causal=self.causal, taper=self.taper)
        if self.mode == "state":
            bank = infer_bank_states(X, self.candidates, self.channels, **kw)
        elif self.mode == "output":
            if self.surrogates is None:
                raise ValueError("output mode needs a surrogate map")
            bank = infer_bank_outputs(X, SurrogateMap(dict(getattr(self.surrogates, "entries",
                                                                   self.surrogates))),
                                      self.channels, **kw)
        else:
            raise ValueError(f"mode must be 'state' or 'output', got {self.mode!r}")
        return self._set_bank(bank)

    @classmethod
    def from_bank(cls, bank: ResponseBank, **params) -> "FOLocalizer":
        """Wrap a bank built elsewhere (e.g. loaded from disk)."""
        params.setdefault("mode", "state" if bank.mode == "state" else "output")
        params.setdefault("band", bank.band)
        return cls(**params)._set_bank(bank)

    def _set_bank(self, bank: ResponseBank):
        self.bank_ = bank
        self.candidates_ = list(bank.candidates)
        self.channels_ = list(bank.channels)
        self.graph_ = self._graph()
        return self

    def _graph(self):
        g = self.graph
        if g is None:
            return None
        if hasattr(g, "gen_graph"):
            g = graph_from_system(g)
        return {str(k): [str(v) for v in vs] for k, vs in dict(g).items()}

    # -- phase 2 -----------------------------------------------------------

    def detect(self, X: TimeSeriesSet) -> FOEvent:
        check_is_fitted(self, "bank_")
        X = check_record(X, "FO window", min_samples=8)
        return detect_event(X, channels=self.channels_, band=check_band(self.band),
                            threshold=self.threshold)

    def localize(self, X: TimeSeriesSet) -> LocalizationReport:
        """Full report for one FO window."""
        event = self.detect(X)
        if self.pairs:
            return localize_pair(self.bank_, event, self.graph_, self.hops, self.floor,
                                 self.pair_model)
        return localize(self.bank_, event, self.graph_, self.hops, self.floor)

    def predict(self, X):
        """Winning candidate (or pair) for one window or a list of windows."""
        windows, single = _windows(X)
        out = [self.localize(w).winner for w in windows]
        return out[0] if single else out

    def decision_function(self, X) -> np.ndarray:
        """Residual per candidate (lower fits better), shape ``(n_windows, n_candidates)``.

        Single-source fits only.
        """
        if self.pairs:
            raise ValueError("decision_function is defined for single-source fits")
        windows, _ = _windows(X)
        rows = []
        for w in windows:
            rep = self.localize(w)
            rows.append([rep.residuals[c] for c in self.candidates_])
        return np.array(rows)

    def score(self, X, y) -> float:
        """Fraction of windows whose winner matches ``y`` (pairs compared as sets)."""
        windows, single = _windows(X)
        truth = [y] if single else list(y)
        if len(truth) != len(windows):
            raise ValueError("X and y have different lengths")
        pred = [self.predict(w) for w in windows]

        def same(p, t):
            if isinstance(p, tuple):
                return set(p) == set(t)
            return str(p) == str(t)

        return float(np.mean([same(p, t) for p, t in zip(pred, truth)]))
