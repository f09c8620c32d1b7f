import json
import math

import numpy as np
import pytest

from hydrodynamics import DensityField, SpaceTimePath, time_grid
from model_core import SpaceGrid
from path_io import (
    PathFormatError,
    read_json,
    read_path,
    read_profile,
    write_json,
    write_path,
    write_profile,
    write_snapshots,
)
from rate_functional import RateEstimate


def wavy_path():
    grid = SpaceGrid(12)
    return SpaceTimePath.from_function(grid, time_grid(0.3, 0.1), lambda t, u: 0.5 + 0.1 * np.sin(3.0 * u + t) / 3.0)


def write_rows(tmp_path, header, rows):
    target = tmp_path / "input.csv"
    target.write_text("\n".join([header] + [",".join(map(str, r)) for r in rows]) + "\n", encoding="utf-8")
    return target


def test_path_round_trip_is_exact(tmp_path):
    path = wavy_path()
    back = read_path(write_path(path, tmp_path / "nested" / "path.csv"))
    assert np.array_equal(back.times, path.times)
    assert np.array_equal(back.values, path.values)
    assert back.grid == path.grid


def test_empty_path(tmp_path):
    back = read_path(write_path(SpaceTimePath.empty(), tmp_path / "empty.csv"))
    assert back.is_empty


def test_non_uniform_time_names_the_row(tmp_path):
    rows = [(t, u, 0.5) for t in (0.0, 0.1, 0.3) for u in (-1.0, 0.0, 1.0)]
    with pytest.raises(PathFormatError, match="row 8"):
        read_path(write_rows(tmp_path, "t,u,value", rows))


def test_decreasing_time_is_rejected(tmp_path):
    rows = [(t, u, 0.5) for t in (0.1, 0.0) for u in (-1.0, 0.0, 1.0)]
    with pytest.raises(PathFormatError, match="not increasing"):
        read_path(write_rows(tmp_path, "t,u,value", rows))


def test_space_nodes_must_match_between_slices(tmp_path):
    rows = [(0.0, u, 0.5) for u in (-1.0, 0.0, 1.0)] + [(0.1, u, 0.5) for u in (-1.0, 0.5, 1.0)]
    with pytest.raises(PathFormatError, match="row 5"):
        read_path(write_rows(tmp_path, "t,u,value", rows))


def test_bad_header_and_rows(tmp_path):
    with pytest.raises(PathFormatError, match="header"):
        read_path(write_rows(tmp_path, "time,x,rho", [(0.0, -1.0, 0.5)]))
    with pytest.raises(PathFormatError, match="row 3"):
        read_path(write_rows(tmp_path, "t,u,value", [(0.0, -1.0, 0.5), (0.0, 0.0, "x")]))
    with pytest.raises(PathFormatError, match="columns"):
        read_path(write_rows(tmp_path, "t,u,value", [(0.0, -1.0)]))


def test_profile_round_trip(tmp_path):
    grid = SpaceGrid(10)
    profile = DensityField.from_function(grid, lambda u: 0.5 + 0.3 * u**3)
    back = read_profile(write_profile(profile, tmp_path / "gamma.csv"))
    assert np.array_equal(back.values, profile.values)


def test_profile_needs_uniform_grid(tmp_path):
    rows = [(-1.0, 0.2), (0.1, 0.5), (1.0, 0.8)]
    with pytest.raises(PathFormatError, match="uniform"):
        read_profile(write_rows(tmp_path, "u,value", rows))


def test_json_accepts_numpy(tmp_path):
    data = {"value": np.float64(0.1), "n": np.int64(3), "ok": np.bool_(True), "arr": np.array([1.0, math.pi])}
    back = read_json(write_json(data, tmp_path / "out.json"))
    assert back == {"value": 0.1, "n": 3, "ok": True, "arr": [1.0, math.pi]}


def test_snapshot_header(tmp_path):
    target = write_snapshots([0.0, 0.5], np.full((2, 3), 0.25), tmp_path / "snap.csv")
    lines = target.read_text(encoding="utf-8").splitlines()
    assert lines[0] == "t,u_0,u_1,u_2"
    assert len(lines) == 3


def test_infinite_rate_is_written_as_strict_json(tmp_path):
    est = RateEstimate(math.inf, "control", infinite=True, flags=["initial_mismatch"])
    target = write_json({"rate": est.to_dict(), "gaps": [1.0, math.nan]}, tmp_path / "rate.json")
    text = target.read_text(encoding="utf-8")
    assert "Infinity" not in text and "NaN" not in text
    back = json.loads(text)
    assert back["rate"]["value"] is None and back["rate"]["infinite"] is True
    assert back["gaps"] == [1.0, None]
