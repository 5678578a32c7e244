"""Control fields: sinusoidal mode fields, fluence and power spectra."""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import QuantumSystem, TimeGrid

DEFAULT_T = 100.0
DEFAULT_STEPS = 1024


@dataclass(frozen=True)
class SinusoidModes:
    """eps(t) = sum_k amplitude_k * sin(omega_k t + phase_k)."""

    amplitudes: np.ndarray
    frequencies: np.ndarray
    phases: np.ndarray

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        arg = np.multiply.outer(t, self.frequencies) + self.phases
        return np.sin(arg) @ self.amplitudes

    def to_dict(self):
        return {
            "amplitudes": self.amplitudes.tolist(),
            "frequencies": self.frequencies.tolist(),
            "phases": self.phases.tolist(),
        }


@dataclass(frozen=True)
class ControlField:
    """Field samples eps(t_j) at the left end points of a uniform grid.

    ``modes`` records the sinusoidal parameterization when the field was built
    from one, so the same field can be resampled on a finer grid.
    """

    grid: TimeGrid
    values: np.ndarray
    modes: SinusoidModes | None = field(default=None, repr=False)

    def __post_init__(self):
        v = np.asarray(self.values, dtype=float)
        if v.shape != (self.grid.steps,):
            raise ValueError(f"expected {self.grid.steps} samples, got {v.shape}")
        if not np.all(np.isfinite(v)):
            raise ValueError("field samples must be finite")
        v.setflags(write=False)
        object.__setattr__(self, "values", v)

    @property
    def times(self) -> np.ndarray:
        return self.grid.sample_times

    @property
    def provenance(self) -> str:
        return "modes" if self.modes is not None else "raw samples"

    @classmethod
    def from_modes(cls, modes: SinusoidModes, grid: TimeGrid) -> "ControlField":
        return cls(grid, modes(grid.sample_times), modes)

    @classmethod
    def zeros(cls, grid: TimeGrid) -> "ControlField":
        return cls(grid, np.zeros(grid.steps))

    def with_values(self, values) -> "ControlField":
        """Same grid, new samples; the mode description no longer applies."""
        return ControlField(self.grid, values)

    def resample(self, steps) -> "ControlField":
        if self.modes is None:
            raise ValueError("only mode-defined fields can be resampled")
        return ControlField.from_modes(self.modes, TimeGrid(self.grid.t_final, steps))

    def scaled(self, factor) -> "ControlField":
        modes = None
        if self.modes is not None:
            modes = replace(self.modes, amplitudes=self.modes.amplitudes * factor)
        return ControlField(self.grid, self.values * factor, modes)


@dataclass(frozen=True)
class FieldSpectrum:
    """One-sided power spectrum on an angular-frequency axis."""

    frequencies: np.ndarray
    power: np.ndarray


def transition_frequencies(h0, tol=1e-9):
    """All |E_i - E_j| for i < j, and how often each value occurs (within ``tol``)."""
    e = np.sort(np.linalg.eigvalsh(np.asarray(h0, dtype=complex)))
    i, j = np.triu_indices(e.size, k=1)
    omega = np.abs(e[j] - e[i])
    counts = np.array([np.sum(np.abs(omega - w) < tol) for w in omega])
    return omega, counts


def random_transition_field(system: QuantumSystem, seed, amplitude_weighting=False,
                            grid: TimeGrid | None = None) -> ControlField:
    """Random field with one mode per transition frequency of ``system.h0``.

    Amplitudes are uniform on (0, 1] and phases uniform on (0, 2pi]. With
    ``amplitude_weighting`` each amplitude is multiplied by the number of
    transitions that share its frequency.
    """
    grid = grid or TimeGrid(DEFAULT_T, DEFAULT_STEPS)
    omega, counts = transition_frequencies(system.h0)
    rng = np.random.default_rng(seed)
    amps = 1.0 - rng.random(omega.size)
    phases = 2 * np.pi * (1.0 - rng.random(omega.size))
    if amplitude_weighting:
        amps = amps * counts
    return ControlField.from_modes(SinusoidModes(amps, omega, phases), grid)


def detuned_frequencies(h0, count=50, spacing=0.1):
    """omega_j = spacing * j * (E_N - E_1) for j = 1..count."""
    e = np.linalg.eigvalsh(np.asarray(h0, dtype=complex))
    return spacing * np.arange(1, count + 1) * (e.max() - e.min())


def detuned_field(frequencies, seed, grid: TimeGrid | None = None) -> ControlField:
    """Random-amplitude, random-phase field on a caller-supplied frequency list."""
    omega = np.asarray(frequencies, dtype=float).ravel()
    if omega.size == 0:
        raise ValueError("frequency list is empty")
    grid = grid or TimeGrid(DEFAULT_T, DEFAULT_STEPS)
    rng = np.random.default_rng(seed)
    amps = 1.0 - rng.random(omega.size)
    phases = 2 * np.pi * (1.0 - rng.random(omega.size))
    return ControlField.from_modes(SinusoidModes(amps, omega, phases), grid)


def fluence(field_: ControlField) -> float:
    """Left-Riemann estimate of the integral of eps^2 over [0, T]."""
    return float(np.sum(np.square(field_.values)) * field_.grid.dt)


def power_spectrum(field_: ControlField) -> FieldSpectrum:
    """One-sided |DFT|^2 normalized so that sum(power) = sum(eps^2) * dt.

    Bin k sits at angular frequency 2 pi k / T, the same units as the mode
    frequencies.
    """
    x = field_.values
    m = x.size
    dt = field_.grid.dt
    spec = np.fft.rfft(x)
    power = np.abs(spec) ** 2 / m * dt
    if m % 2 == 0:
        power[1:-1] *= 2
    else:
        power[1:] *= 2
    omega = 2 * np.pi * np.arange(power.size) / (m * dt)
    return FieldSpectrum(omega, power)
