import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from qpareto.core import QuantumSystem, TimeGrid, eleven_level_system
from qpareto.fields import (
    ControlField,
    SinusoidModes,
    detuned_field,
    detuned_frequencies,
    fluence,
    power_spectrum,
    random_transition_field,
    transition_frequencies,
)


def test_eleven_level_system_has_55_modes_on_tenth_grid():
    f = random_transition_field(eleven_level_system(), seed=0)
    assert f.modes.frequencies.size == 55
    assert np.allclose(np.unique(np.round(f.modes.frequencies, 9)), 0.1 * np.arange(1, 11))
    assert np.all((f.modes.amplitudes > 0) & (f.modes.amplitudes <= 1))
    assert np.all((f.modes.phases > 0) & (f.modes.phases <= 2 * np.pi))


def test_two_level_single_mode():
    sys_ = QuantumSystem(np.diag([0.2, 0.9]), np.array([[0, 1], [1, 0.0]]))
    f = random_transition_field(sys_, seed=4)
    assert f.modes.frequencies == pytest.approx([0.7])


def test_amplitude_weighting_multiplies_by_frequency_count():
    sys_ = eleven_level_system()
    plain = random_transition_field(sys_, seed=2)
    weighted = random_transition_field(sys_, seed=2, amplitude_weighting=True)
    _, counts = transition_frequencies(sys_.h0)
    assert np.allclose(weighted.modes.amplitudes, plain.modes.amplitudes * counts)
    # frequency 0.1 occurs between 10 neighbouring level pairs
    assert counts[np.argmin(np.abs(plain.modes.frequencies - 0.1))] == 10


def test_fixed_seed_is_bit_identical():
    a = random_transition_field(eleven_level_system(), seed=9)
    b = random_transition_field(eleven_level_system(), seed=9)
    assert a.values.tobytes() == b.values.tobytes()


def test_detuned_frequencies_paper_range():
    # E_N - E_1 = 1.0 for the benchmark spectrum 0.1 .. 1.1
    freqs = detuned_frequencies(eleven_level_system().h0)
    assert np.allclose(freqs, 0.1 * np.arange(1, 51))
    assert freqs[-1] == pytest.approx(5.0)


def test_detuned_field_single_and_seeds():
    grid = TimeGrid(10.0, 200)
    f = detuned_field([0.5], seed=1, grid=grid)
    a, ph = f.modes.amplitudes[0], f.modes.phases[0]
    assert np.allclose(f.values, a * np.sin(0.5 * grid.sample_times + ph))
    g = detuned_field([0.5, 1.0], seed=2, grid=grid)
    h = detuned_field([0.5, 1.0], seed=3, grid=grid)
    assert np.array_equal(g.modes.frequencies, h.modes.frequencies)
    assert not np.allclose(g.modes.phases, h.modes.phases)
    with pytest.raises(ValueError):
        detuned_field([], seed=0)


def test_fluence_examples():
    grid = TimeGrid(20 * np.pi, 4000)  # ten periods of omega = 1
    assert fluence(ControlField.zeros(grid)) == 0.0
    f = ControlField(grid, 1.5 * np.sin(grid.sample_times))
    assert fluence(f) == pytest.approx(1.5 ** 2 * grid.t_final / 2, rel=1e-3)
    assert fluence(f.scaled(2.0)) == pytest.approx(4 * fluence(f), rel=1e-12)


@given(st.integers(0, 10_000))
def test_fluence_nonnegative_and_time_reversal_invariant(seed):
    grid = TimeGrid(5.0, 64)
    x = np.random.default_rng(seed).normal(size=64)
    f = ControlField(grid, x)
    assert fluence(f) >= 0
    assert fluence(f) == pytest.approx(fluence(ControlField(grid, x[::-1])), rel=1e-12)


def test_spectrum_single_sinusoid_dominant_bin():
    grid = TimeGrid(100.0, 1024)
    omega = 2 * np.pi * 7 / 100.0  # on a DFT bin
    spec = power_spectrum(ControlField(grid, np.sin(omega * grid.sample_times)))
    k = int(np.argmax(spec.power))
    assert spec.frequencies[k] == pytest.approx(omega)
    assert spec.power[k] / spec.power.sum() >= 0.95


def test_spectrum_two_sinusoids_power_ratio():
    grid = TimeGrid(100.0, 1024)
    w1, w2 = 2 * np.pi * 5 / 100.0, 2 * np.pi * 30 / 100.0
    x = 2.0 * np.sin(w1 * grid.sample_times) + 0.5 * np.sin(w2 * grid.sample_times + 0.3)
    spec = power_spectrum(ControlField(grid, x))
    top = np.argsort(spec.power)[-2:]
    assert sorted(spec.frequencies[top]) == pytest.approx([w1, w2])
    p1 = spec.power[np.argmin(np.abs(spec.frequencies - w1))]
    p2 = spec.power[np.argmin(np.abs(spec.frequencies - w2))]
    assert p1 / p2 == pytest.approx(16.0, rel=1e-9)


@given(st.integers(0, 10_000), st.sampled_from([63, 64, 101]))
def test_parseval(seed, m):
    grid = TimeGrid(3.0, m)
    f = ControlField(grid, np.random.default_rng(seed).normal(size=m))
    assert power_spectrum(f).power.sum() == pytest.approx(fluence(f), rel=1e-6)


def test_modes_resample():
    f = random_transition_field(eleven_level_system(), seed=1, grid=TimeGrid(10.0, 100))
    fine = f.resample(200)
    assert np.allclose(fine.values[::2], f.values)
    with pytest.raises(ValueError):
        f.with_values(f.values).resample(50)
    assert isinstance(f.modes, SinusoidModes)
