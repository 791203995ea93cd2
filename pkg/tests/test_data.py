"""Dataset container, CSV schema and synthetic flight generation."""

import numpy as np
import pytest

from mhelearn import data
from mhelearn.data import (
    FlightDataset,
    generate_synthetic,
    hover_force,
    load_csv,
    make_profile,
    write_csv,
)


def test_generation_is_deterministic():
    a = generate_synthetic("sine", duration_s=0.1, seed=3, noise_std=0.01)
    b = generate_synthetic("sine", duration_s=0.1, seed=3, noise_std=0.01)
    c = generate_synthetic("sine", duration_s=0.1, seed=4, noise_std=0.01)
    assert np.array_equal(a.y, b.y) and np.array_equal(a.truth, b.truth)
    assert not np.array_equal(a.y, c.y)


def test_default_dataset_shape_and_noise():
    ds = generate_synthetic("sine", duration_s=0.25)
    assert len(ds) == 100
    assert ds.dt == pytest.approx(1.0 / 400.0)
    assert data.DEFAULT_NOISE == (0.0, 0.0)
    # noise-free default: regenerating with explicit zeros is identical
    again = generate_synthetic("sine", duration_s=0.25, noise_std=(0.0, 0.0))
    assert np.array_equal(ds.y, again.y)


def test_longer_run_extends_shorter_one():
    short = generate_synthetic("sine", duration_s=0.25, seed=0)
    long = generate_synthetic("sine", duration_s=0.5, seed=0)
    assert np.array_equal(long.y[:100], short.y)
    assert np.array_equal(long.truth[:100], short.truth)


def test_csv_round_trip_with_truth(tmp_path):
    ds = generate_synthetic("sine", duration_s=0.05, seed=1, noise_std=0.01)
    path = tmp_path / "flight.csv"
    write_csv(ds, path)
    header = path.read_text().splitlines()[0]
    assert header.split(",") == data.COLUMNS
    back = load_csv(path)
    assert np.array_equal(back.t, ds.t)
    assert np.array_equal(back.y, ds.y)
    assert np.array_equal(back.truth, ds.truth)


def test_csv_round_trip_without_truth(tmp_path):
    ds = generate_synthetic("sine", duration_s=0.05, seed=1)
    bare = FlightDataset(t=ds.t, y=ds.y, truth=None)
    path = tmp_path / "bare.csv"
    write_csv(bare, path)
    assert path.read_text().splitlines()[0].split(",") == data.COLUMNS[:7]
    back = load_csv(path)
    assert back.truth is None
    assert np.array_equal(back.y, ds.y)


def test_csv_error_cases(tmp_path):
    empty = tmp_path / "empty.csv"
    empty.write_text("")
    with pytest.raises(ValueError):
        load_csv(empty)
    headeronly = tmp_path / "headeronly.csv"
    headeronly.write_text(",".join(data.COLUMNS) + "\n")
    with pytest.raises(ValueError):
        load_csv(headeronly)
    badheader = tmp_path / "badheader.csv"
    badheader.write_text("time,a,b,c,d,e,f\n0,0,0,0,0,0,0\n")
    with pytest.raises(ValueError):
        load_csv(badheader)
    ragged = tmp_path / "ragged.csv"
    ragged.write_text(",".join(data.COLUMNS[:7]) + "\n"
                      "0,0,0,0,0,0,0\n0.0025,0,0\n")
    with pytest.raises(ValueError):
        load_csv(ragged)


def test_slice_selects_half_open_interval():
    ds = generate_synthetic("sine", duration_s=0.25, seed=0)
    part = ds.slice(0.1, 0.05)
    assert len(part) == 20
    assert part.t[0] == pytest.approx(0.1)
    assert np.array_equal(part.y, ds.y[40:60])
    assert np.array_equal(part.truth, ds.truth[40:60])
    with pytest.raises(ValueError):
        ds.slice(5.0, 0.1)


def test_profile_registry():
    with pytest.raises(ValueError) as exc:
        make_profile("gusts")
    for name in ("sine", "zero", "drag", "spikes"):
        assert name in str(exc.value)
        make_profile(name)


def test_zero_profile_holds_hover():
    ds = generate_synthetic("zero", duration_s=0.05)
    assert np.allclose(ds.truth[:, 0:3], hover_force())
    assert not np.any(ds.truth[:, 3:6])
    # nothing accelerates, so the noise-free measurements stay zero
    assert not np.any(ds.y)


def test_drag_profile_opposes_motion():
    ds = generate_synthetic("drag", duration_s=0.05, v0=(1.0, 0.0, 0.0))
    drag = ds.truth[:, 0:3] - hover_force()
    assert np.all(drag[:, 0] < 0)
    assert np.all(ds.y[1:, 0] < ds.y[0, 0])


def test_spike_profile_seeded():
    a = generate_synthetic("spikes", duration_s=0.25, seed=5)
    b = generate_synthetic("spikes", duration_s=0.25, seed=5)
    c = generate_synthetic("spikes", duration_s=0.25, seed=6)
    assert np.array_equal(a.truth, b.truth)
    assert not np.array_equal(a.truth, c.truth)


def test_scalar_noise_broadcasts():
    ds = generate_synthetic("sine", duration_s=0.05, noise_std=0.05)
    base = generate_synthetic("sine", duration_s=0.05, noise_std=(0.05, 0.05))
    assert np.array_equal(ds.y, base.y)


def test_dataset_validation():
    t = np.arange(5) * 0.0025
    y = np.zeros((5, 6))
    with pytest.raises(ValueError):
        FlightDataset(t=t[::-1].copy(), y=y, truth=None)
    with pytest.raises(ValueError):
        FlightDataset(t=np.array([0.0, 1.0, 2.0, 4.0, 8.0]), y=y, truth=None)
    with pytest.raises(ValueError):
        FlightDataset(t=t, y=y * np.nan, truth=None)
    with pytest.raises(ValueError):
        FlightDataset(t=t, y=y, truth=np.zeros((5, 3)))
    with pytest.raises(ValueError):
        FlightDataset(t=np.array([0.0]), y=np.zeros((1, 6)), truth=None).dt
