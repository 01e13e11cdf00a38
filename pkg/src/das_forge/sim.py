"""Coherent-detection Phi-OTDR trace synthesis.

A one-dimensional discrete-scatterer model of Rayleigh backscatter: every
0.1 m cell of fiber holds a handful of point reflectors with Rayleigh
magnitudes and uniform random phases.  A rectangular probe pulse integrates
the reflectors inside its half-length window, the PZT section adds a
time-varying phase, and the heterodyne beat against the AOM-shifted local
oscillator is written out as a real photodetector sample stream.
"""

from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

C_VACUUM = 299_792_458.0

AMPLITUDES_V = (1.0, 2.0, 3.0)
FREQUENCIES_HZ = (50.0, 100.0, 200.0, 500.0, 1000.0)
N_CLASSES = len(AMPLITUDES_V) * len(FREQUENCIES_HZ)


class ConfigError(ValueError):
    """Raised when a configuration violates one of its invariants."""


@dataclass(frozen=True)
class EventLabel:
    """Sinusoidal PZT drive: peak amplitude in volts and frequency in Hz."""

    amplitude_v: float
    frequency_hz: float

    @property
    def class_index(self) -> int:
        try:
            a = AMPLITUDES_V.index(float(self.amplitude_v))
            f = FREQUENCIES_HZ.index(float(self.frequency_hz))
        except ValueError:
            raise ConfigError(
                f"({self.amplitude_v} V, {self.frequency_hz} Hz) is not one of the 15 classes"
            ) from None
        return len(FREQUENCIES_HZ) * a + f

    @classmethod
    def from_class(cls, index: int) -> "EventLabel":
        if not 0 <= index < N_CLASSES:
            raise ConfigError(f"class index {index} outside 0..{N_CLASSES - 1}")
        a, f = divmod(index, len(FREQUENCIES_HZ))
        return cls(AMPLITUDES_V[a], FREQUENCIES_HZ[f])

    @property
    def name(self) -> str:
        return f"A{self.amplitude_v:g}V_F{self.frequency_hz:g}Hz"


def all_labels() -> list[EventLabel]:
    return [EventLabel.from_class(i) for i in range(N_CLASSES)]


@dataclass
class SimConfig:
    fiber_length_m: float = 470.0
    sample_spacing_m: float = 0.1
    fast_rate_hz: float = 1e9
    prf_hz: float = 2e4
    n_traces: int = 256
    pulse_width_s: float = 100e-9
    f_aom_hz: float = 160e6
    wavelength_m: float = 1552.51e-9
    pzt_start_m: float = 232.0
    pzt_end_m: float = 236.0
    k_pzt_rad_per_volt: float = 2.0
    snr_db: Optional[float] = 30.0  # None -> noise off
    laser_phase_drift: bool = True
    scatterers_per_cell: int = 10
    seed: int = 0

    @property
    def n_samples(self) -> int:
        return int(round(self.fiber_length_m / self.sample_spacing_m))

    @property
    def group_velocity(self) -> float:
        # one fast-time sample = one spacing of round-trip travel
        return 2.0 * self.sample_spacing_m * self.fast_rate_hz

    @property
    def refractive_index(self) -> float:
        return C_VACUUM / self.group_velocity

    @property
    def pulse_cells(self) -> int:
        """Number of spatial cells inside the pulse's half-length window."""
        extent = self.pulse_width_s * self.group_velocity / 2.0
        return max(1, int(round(extent / self.sample_spacing_m)))

    def validate(self) -> "SimConfig":
        problems = []
        if not 0 <= self.pzt_start_m < self.pzt_end_m <= self.fiber_length_m:
            problems.append("need 0 <= pzt_start_m < pzt_end_m <= fiber_length_m")
        if self.sample_spacing_m <= 0 or self.n_samples <= 0:
            problems.append("n_samples = round(fiber_length_m / sample_spacing_m) must be > 0")
        if self.n_traces < 2:
            problems.append("n_traces must be >= 2")
        if not 0 < self.f_aom_hz < self.fast_rate_hz / 2:
            problems.append("f_aom_hz must lie below fast_rate_hz / 2")
        if self.prf_hz <= 0 or self.pulse_width_s <= 0 or self.wavelength_m <= 0:
            problems.append("prf_hz, pulse_width_s and wavelength_m must be positive")
        if self.scatterers_per_cell < 1:
            problems.append("scatterers_per_cell must be >= 1")
        if problems:
            raise ConfigError("invalid SimConfig: " + "; ".join(problems))
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown SimConfig fields: {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def from_json(cls, path) -> "SimConfig":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **changes) -> "SimConfig":
        return dataclasses.replace(self, **changes)


PRESETS = {
    # 1/10 scale: column arithmetic of the full recording divided by ten
    "desk": SimConfig(),
    "full": SimConfig(
        fiber_length_m=4700.0, n_traces=600, pzt_start_m=2320.0, pzt_end_m=2360.0
    ),
    # desk geometry with few traces; smoke tests and reproduction scripts
    "tiny": SimConfig(n_traces=64),
}


def preset(name: str, **overrides) -> SimConfig:
    try:
        base = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}") from None
    return base.replace(**overrides)


@dataclass
class ScattererField:
    """Point reflectors sorted by position.

    ``cell`` is the index of the spatial cell each scatterer belongs to and
    ``offset_m`` its position inside the cell, in ``(0, sample_spacing_m]``.
    """

    cell: np.ndarray
    offset_m: np.ndarray
    reflectivity: np.ndarray
    intrinsic_phase: np.ndarray
    n_cells: int
    sample_spacing_m: float

    @property
    def position_m(self) -> np.ndarray:
        return self.cell * self.sample_spacing_m + self.offset_m

    def cell_members(self, c: int):
        lo, hi = np.searchsorted(self.cell, [c, c + 1])
        return list(zip(self.offset_m[lo:hi], self.reflectivity[lo:hi], self.intrinsic_phase[lo:hi]))


@dataclass
class RawTraceMatrix:
    data: np.ndarray
    config: SimConfig
    label: Optional[EventLabel] = None

    @property
    def shape(self):
        return self.data.shape


def build_scatterers(config: SimConfig) -> ScattererField:
    config.validate()
    n_cells = config.n_samples
    per = config.scatterers_per_cell
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xF1E1D]))
    count = n_cells * per
    cell = np.repeat(np.arange(n_cells), per)
    # (0, dz]: a reflector at the far edge of cell c sits exactly on sample c + 1
    offset = config.sample_spacing_m * (1.0 - rng.random(count))
    offset = offset.reshape(n_cells, per)
    offset.sort(axis=1)
    reflectivity = rng.rayleigh(scale=1.0 / math.sqrt(2.0), size=count)
    phase = rng.uniform(0.0, 2.0 * math.pi, size=count)
    return ScattererField(
        cell=cell,
        offset_m=offset.ravel(),
        reflectivity=reflectivity,
        intrinsic_phase=phase,
        n_cells=n_cells,
        sample_spacing_m=config.sample_spacing_m,
    )


def ideal_phase_waveform(event: EventLabel, config: SimConfig) -> np.ndarray:
    """Ground-truth PZT phase ``k_pzt * A * sin(2 pi f m / prf)`` per trace."""
    m = np.arange(config.n_traces)
    return (
        config.k_pzt_rad_per_volt
        * event.amplitude_v
        * np.sin(2.0 * np.pi * event.frequency_hz * m / config.prf_hz)
    )


def pzt_ramp(position_m: np.ndarray, config: SimConfig) -> np.ndarray:
    """Fraction of the event phase accumulated at each position."""
    span = config.pzt_end_m - config.pzt_start_m
    return np.clip((position_m - config.pzt_start_m) / span, 0.0, 1.0)


def _cell_sums(values: np.ndarray, cells: np.ndarray, n_cells: int) -> np.ndarray:
    out = np.zeros(n_cells, dtype=complex)
    np.add.at(out, cells, values)
    return out


def backscatter_field(config: SimConfig, field: ScattererField, event: Optional[EventLabel]) -> np.ndarray:
    """Complex baseband backscatter E(m, i), shape (n_traces, n_samples)."""
    n_cells, n_traces = field.n_cells, config.n_traces
    z = field.position_m
    k_opt = 4.0 * math.pi * config.refractive_index / config.wavelength_m
    phasor = field.reflectivity * np.exp(1j * (field.intrinsic_phase + np.mod(k_opt * z, 2 * math.pi)))

    if event is None:
        per_cell = _cell_sums(phasor, field.cell, n_cells)
        S = np.broadcast_to(per_cell, (n_traces, n_cells))
    else:
        if event.frequency_hz >= config.prf_hz / 2:
            raise ConfigError(
                f"event frequency {event.frequency_hz} Hz aliases at PRF {config.prf_hz} Hz"
            )
        delta = ideal_phase_waveform(event, config)
        ramp = pzt_ramp(z, config)
        still = ramp == 0.0
        whole = ramp == 1.0
        part = ~(still | whole)
        S = np.empty((n_traces, n_cells), dtype=complex)
        S[:] = _cell_sums(phasor[still], field.cell[still], n_cells)
        S += np.exp(1j * delta)[:, None] * _cell_sums(phasor[whole], field.cell[whole], n_cells)
        if part.any():
            idx = np.flatnonzero(part)
            contrib = phasor[idx] * np.exp(1j * delta[:, None] * ramp[idx][None, :])
            cells = field.cell[idx]
            starts = np.flatnonzero(np.r_[True, cells[1:] != cells[:-1]])
            S[:, cells[starts]] += np.add.reduceat(contrib, starts, axis=1)

    # window of cells [i - L, i - 1] contributes to sample i
    L = config.pulse_cells
    csum = np.zeros((n_traces, n_cells + 1), dtype=complex)
    np.cumsum(S, axis=1, out=csum[:, 1:])
    i = np.arange(n_cells)
    return csum[:, i] - csum[:, np.maximum(i - L, 0)]


def synthesize(
    config: SimConfig,
    field: ScattererField,
    event: Optional[EventLabel] = None,
    stream: int = 0,
) -> RawTraceMatrix:
    """Photodetector output for one recording.

    ``stream`` selects an independent noise/drift stream so that several
    recordings on the same fiber get distinct realisations.
    """
    config.validate()
    if field.n_cells != config.n_samples:
        raise ConfigError(
            f"scatterer field has {field.n_cells} cells, config expects {config.n_samples}"
        )
    E = backscatter_field(config, field, event)
    rng = np.random.default_rng(np.random.SeedSequence([config.seed, 0xD1F7, stream]))
    t_fast = np.arange(config.n_samples) / config.fast_rate_hz
    carrier = np.exp(1j * 2.0 * math.pi * np.mod(config.f_aom_hz * t_fast, 1.0))
    if config.laser_phase_drift:
        theta = rng.uniform(0.0, 2.0 * math.pi, size=config.n_traces)
        E = E * np.exp(1j * theta)[:, None]
    data = np.real(E * carrier[None, :])
    if config.snr_db is not None and math.isfinite(config.snr_db):
        power = np.mean(data**2)
        sigma = math.sqrt(power / 10.0 ** (config.snr_db / 10.0))
        data = data + rng.normal(0.0, sigma, size=data.shape)
    return RawTraceMatrix(data=np.ascontiguousarray(data), config=config, label=event)


def simulate_classes(config: SimConfig) -> list[RawTraceMatrix]:
    """One recording per class, all on the same fiber."""
    field = build_scatterers(config)
    return [synthesize(config, field, label, stream=label.class_index + 1) for label in all_labels()]
