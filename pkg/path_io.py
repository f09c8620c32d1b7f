#!/usr/bin/env python3
"""
Artifact files: paths and profiles as CSV, scalar results as JSON.

CSV floats are written with 17 significant digits so that reading a file
back reproduces every double exactly.
"""

from __future__ import annotations

import csv
import json
import logging
import math
from pathlib import Path
from typing import Iterable

import numpy as np

from hydrodynamics import DensityField, SpaceTimePath
from model_core import SpaceGrid, WasepError

logger = logging.getLogger(__name__)

FLOAT_FORMAT = "%.17g"
PATH_HEADER = ["t", "u", "value"]
PROFILE_HEADER = ["u", "value"]


class PathFormatError(WasepError):
    """Malformed row or non-uniform grid in an input file."""


def _fmt(x: float) -> str:
    return FLOAT_FORMAT % x


def _parse(row: list, lineno: int, width: int, source: str):
    if len(row) != width:
        raise PathFormatError(f"{source}: row {lineno} has {len(row)} columns, expected {width}")
    try:
        return [float(x) for x in row]
    except ValueError:
        raise PathFormatError(f"{source}: row {lineno} is not numeric: {row}") from None


def _grid_for(us: list, first_row: int, source: str) -> SpaceGrid:
    if len(us) < 3:
        raise PathFormatError(f"{source}: need at least 3 space nodes, got {len(us)} (row {first_row})")
    grid = SpaceGrid(len(us) - 1)
    if np.max(np.abs(np.asarray(us) - grid.nodes)) > 1e-12:
        raise PathFormatError(f"{source}: space column is not a uniform grid on [-1, 1] (rows from {first_row})")
    return grid


def write_path(path: SpaceTimePath, target) -> Path:
    """Long format: one row per (t, u)."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PATH_HEADER)
        if not path.is_empty:
            u = path.grid.nodes
            for t, row in zip(path.times, path.values):
                writer.writerows([_fmt(t), _fmt(ui), _fmt(v)] for ui, v in zip(u, row))
    return target


def read_path(source) -> SpaceTimePath:
    source = Path(source)
    with open(source, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PATH_HEADER:
            raise PathFormatError(f"{source}: expected header {','.join(PATH_HEADER)}, got {header}")
        times, blocks, us = [], [], None
        current_u, current_v, block_start = [], [], 2
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            t, u, v = _parse(row, lineno, 3, str(source))
            if times and t == times[-1]:
                current_u.append(u)
                current_v.append(v)
                continue
            if times:
                if t < times[-1]:
                    raise PathFormatError(f"{source}: row {lineno}: time {t!r} is not increasing")
                us = _close_block(us, current_u, block_start, str(source))
                blocks.append(current_v)
                if len(times) >= 2 and not math.isclose(t - times[-1], times[1] - times[0], rel_tol=1e-9, abs_tol=1e-15):
                    raise PathFormatError(f"{source}: row {lineno}: non-uniform time step at t={t!r}")
            times.append(t)
            current_u, current_v, block_start = [u], [v], lineno
        if not times:
            return SpaceTimePath.empty()
        us = _close_block(us, current_u, block_start, str(source))
        blocks.append(current_v)
    grid = _grid_for(us, 2, str(source))
    return SpaceTimePath(np.array(times), np.array(blocks), grid)


def _close_block(us, block_u, block_start, source):
    if us is None:
        return block_u
    if block_u != us:
        raise PathFormatError(f"{source}: row {block_start}: space nodes differ from the first time slice")
    return us


def write_profile(profile: DensityField, target) -> Path:
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(PROFILE_HEADER)
        writer.writerows([_fmt(u), _fmt(v)] for u, v in zip(profile.grid.nodes, profile.values))
    return target


def read_profile(source) -> DensityField:
    source = Path(source)
    with open(source, newline="", encoding="utf-8") as f:
        reader = csv.reader(f)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != PROFILE_HEADER:
            raise PathFormatError(f"{source}: expected header {','.join(PROFILE_HEADER)}, got {header}")
        rows = [_parse(row, n, 2, str(source)) for n, row in enumerate(reader, start=2) if row]
    grid = _grid_for([r[0] for r in rows], 2, str(source))
    return DensityField(grid, np.array([r[1] for r in rows]))


def write_snapshots(times: Iterable[float], values: np.ndarray, target) -> Path:
    """Wide format: t, u_0, ..., u_M."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    values = np.asarray(values)
    with open(target, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["t"] + [f"u_{i}" for i in range(values.shape[1])])
        for t, row in zip(times, values):
            writer.writerow([_fmt(t)] + [_fmt(v) for v in row])
    return target


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [_jsonable(v) for v in obj.tolist()]
    if isinstance(obj, (float, np.floating)):
        # infinite rates travel as null next to their `infinite` flag
        return float(obj) if math.isfinite(obj) else None
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def write_json(data: dict, target) -> Path:
    """Floats keep Python's shortest round-trip repr; inf and nan are written as null."""
    target = Path(target)
    target.parent.mkdir(parents=True, exist_ok=True)
    with open(target, "w", encoding="utf-8") as f:
        json.dump(_jsonable(data), f, indent=2, ensure_ascii=False, sort_keys=True, allow_nan=False)
        f.write("\n")
    return target


def read_json(source) -> dict:
    with open(source, "r", encoding="utf-8") as f:
        return json.load(f)
