"""Beat-signal demodulation into temporal-spatial amplitude and phase matrices.

Processing order: bandpass around the AOM shift, analytic signal, magnitude
and angle, carrier removal, differential amplitude / initial-phase removal,
and finally reduction of the phase modulo 2 pi.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

TWO_PI = 2.0 * math.pi


@dataclass(frozen=True)
class BandpassSpec:
    center_hz: float = 160e6
    bandwidth_hz: float = 20e6
    fast_rate_hz: float = 1e9

    @classmethod
    def for_pulse(cls, center_hz: float, pulse_width_s: float, fast_rate_hz: float) -> "BandpassSpec":
        return cls(center_hz, 2.0 / pulse_width_s, fast_rate_hz)

    def validate(self) -> "BandpassSpec":
        lo = self.center_hz - self.bandwidth_hz / 2
        hi = self.center_hz + self.bandwidth_hz / 2
        if not (self.bandwidth_hz > 0 and lo > 0 and hi < self.fast_rate_hz / 2):
            raise ValueError(
                f"band [{lo:g}, {hi:g}] Hz must lie inside (0, {self.fast_rate_hz / 2:g}) Hz"
            )
        return self


def bandpass(row: np.ndarray, spec: BandpassSpec) -> np.ndarray:
    """Zero every DFT bin outside ``center +/- bandwidth/2``.

    Works on the last axis, so a whole matrix can be filtered at once.
    """
    spec.validate()
    x = np.asarray(row, dtype=float)
    n = x.shape[-1]
    freqs = np.fft.rfftfreq(n, d=1.0 / spec.fast_rate_hz)
    keep = np.abs(freqs - spec.center_hz) <= spec.bandwidth_hz / 2
    X = np.fft.rfft(x, axis=-1)
    X[..., ~keep] = 0.0
    return np.fft.irfft(X, n=n, axis=-1)


def analytic_signal(row: np.ndarray) -> np.ndarray:
    """FFT-method analytic signal along the last axis.

    DC (and Nyquist, for even lengths) are kept, positive frequencies
    doubled and negative ones dropped, so ``real(out) == row``.
    """
    x = np.asarray(row, dtype=float)
    if x.size == 0 or x.shape[-1] < 2:
        raise ValueError("analytic_signal needs at least 2 samples")
    n = x.shape[-1]
    h = np.zeros(n)
    h[0] = 1.0
    if n % 2 == 0:
        h[n // 2] = 1.0
        h[1 : n // 2] = 2.0
    else:
        h[1 : (n + 1) // 2] = 2.0
    return np.fft.ifft(np.fft.fft(x, axis=-1) * h, axis=-1)


def demodulate(raw, spec: BandpassSpec) -> tuple[np.ndarray, np.ndarray]:
    """Amplitude and (unwrapped-in-fast-time, carrier-free) phase matrices.

    ``raw`` may be a :class:`~das_forge.sim.RawTraceMatrix` or a bare array.
    """
    data = getattr(raw, "data", raw)
    data = np.asarray(data, dtype=float)
    if not np.all(np.isfinite(data)):
        raise ValueError("raw trace matrix contains non-finite samples")
    a = analytic_signal(bandpass(data, spec))
    amplitude = np.abs(a)
    t_fast = np.arange(data.shape[-1]) / spec.fast_rate_hz
    phase = np.angle(a) - TWO_PI * spec.center_hz * t_fast
    return amplitude, phase


def differential_amplitude(amp: np.ndarray) -> np.ndarray:
    amp = np.asarray(amp, dtype=float)
    return amp - amp[0:1, :]


def remove_initial_phase(phase: np.ndarray) -> np.ndarray:
    """Reference each trace to its first sample, cancelling the laser's
    per-trace phase offset."""
    phase = np.asarray(phase, dtype=float)
    return phase - phase[:, 0:1]


def wrap_mod_2pi(phase: np.ndarray) -> np.ndarray:
    out = np.mod(np.asarray(phase, dtype=float), TWO_PI)
    # mod of a tiny negative number rounds up to exactly 2 pi
    out[out >= TWO_PI] = 0.0
    return out


def unwrap_slow_time(column: np.ndarray, axis: int = 0) -> np.ndarray:
    """Remove 2 pi jumps so successive differences lie in (-pi, pi]."""
    x = np.asarray(column, dtype=float)
    if x.shape[axis] < 2:
        raise ValueError("unwrap needs at least 2 samples")
    d = np.diff(x, axis=axis)
    folded = math.pi - np.mod(math.pi - d, TWO_PI)
    correction = np.cumsum(folded - d, axis=axis)
    out = x.copy()
    sl = [slice(None)] * x.ndim
    sl[axis] = slice(1, None)
    out[tuple(sl)] += correction
    return out


def preprocess(raw, spec: BandpassSpec) -> tuple[np.ndarray, np.ndarray]:
    """Full chain: returns (differential amplitude, wrapped phase)."""
    amplitude, phase = demodulate(raw, spec)
    return differential_amplitude(amplitude), wrap_mod_2pi(remove_initial_phase(phase))


def strongest_column(amplitude: np.ndarray, lo: int, hi: int) -> int:
    """Column in ``[lo, hi)`` with the largest mean amplitude (avoids fading points)."""
    return lo + int(np.argmax(amplitude[:, lo:hi].mean(axis=0)))


def cross_pzt_phase(
    phase: np.ndarray,
    amplitude: np.ndarray,
    before: tuple[int, int],
    after: tuple[int, int],
) -> np.ndarray:
    """Slow-time phase difference between a column past the PZT and one
    ahead of it, unwrapped."""
    ib = strongest_column(amplitude, *before)
    ia = strongest_column(amplitude, *after)
    return unwrap_slow_time(phase[:, ia] - phase[:, ib])


def fit_sinusoid(x: np.ndarray, frequency_hz: float, rate_hz: float) -> tuple[float, float]:
    """Least-squares ``a sin + b cos + c`` at a known frequency; returns
    (amplitude, phase)."""
    m = np.arange(len(x))
    w = 2.0 * math.pi * frequency_hz * m / rate_hz
    A = np.column_stack([np.sin(w), np.cos(w), np.ones_like(w)])
    (a, b, _), *_ = np.linalg.lstsq(A, x, rcond=None)
    return float(math.hypot(a, b)), float(math.atan2(b, a))


def spectrum_peak_bin(x: np.ndarray) -> int:
    """Index of the largest non-DC magnitude bin of the mean-removed sequence."""
    X = np.abs(np.fft.rfft(np.asarray(x) - np.mean(x)))
    X[0] = 0.0
    return int(np.argmax(X))


def event_bin(frequency_hz: float, n_traces: int, prf_hz: float) -> int:
    return int(round(frequency_hz * n_traces / prf_hz))


def pzt_reference_windows(config, margin_cells: Optional[int] = None):
    """Column windows just ahead of and comfortably past the PZT section.

    The "after" window starts once the whole pulse lies beyond the PZT.
    """
    dz = config.sample_spacing_m
    L = config.pulse_cells
    margin = L if margin_cells is None else margin_cells
    start = int(round(config.pzt_start_m / dz))
    end = int(round(config.pzt_end_m / dz))
    n = config.n_samples
    before = (max(L + margin, start - 4 * L), max(L + margin + 1, start - margin))
    after = (min(end + L + margin, n - 1), min(end + L + 4 * L, n))
    return before, after
