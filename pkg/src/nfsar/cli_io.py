"""Configuration, persistence formats, and the staged processing pipeline.

Configs are JSON; arrays travel in a small binary format ("NFSC") holding
interleaved float32 complex samples plus per-axis start/spacing metadata.
The pipeline runs simulate -> compress -> image -> suppress -> evaluate,
with every stage reading its inputs from files so stages can be re-run in
isolation.  A manifest records the config hash, seed, and every artifact.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import struct
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .core_model import (
    Aperture,
    EchoData,
    Interferer,
    PointTarget,
    RadarParams,
    Saturation,
    Scene,
    apply_saturation,
    synthesize_echo,
)
from .evaluation import background_subtract, suppression_metrics
from .imaging import (
    ComplexImage,
    GridAxis,
    ImageGrid,
    RangeProfileSet,
    backproject_2d,
    backproject_3d,
    image_to_db,
    range_compress,
)
from .suppression import SolverConfig, decompose, decompose_volume

MAGIC = b"NFSC"
FORMAT_VERSION = 1
DTYPE_COMPLEX64 = 0
MAX_DIMS = 4
MAX_TOTAL_ELEMENTS = 1 << 33

STAGE_ORDER = ("simulate", "compress", "image", "suppress", "evaluate")

ECHO_FILE = "echo.nfsc"
PROFILES_FILE = "profiles.nfsc"
IMAGE_FILE = "image_raw.nfsc"
TARGET_FILE = "target.nfsc"
INTERFERENCE_FILE = "interference.nfsc"
REFERENCE_FILE = "reference.nfsc"
REPORT_FILE = "report.txt"
MANIFEST_FILE = "manifest.json"


class ConfigError(ValueError):
    """Configuration parse or validation failure, naming the field path."""


class ArrayFormatError(ValueError):
    """Malformed or unsupported array file."""


class PipelineError(RuntimeError):
    """Stage orchestration failure (missing artifacts, locked output, ...)."""


# ---------------------------------------------------------------------------
# binary complex-array format


def write_array(path, data, axes: Sequence[tuple[float, float]] | None = None) -> None:
    """Write a complex array with per-axis (start, spacing) metadata.

    Samples are stored as interleaved little-endian float32 pairs in C
    order (last axis fastest).  Reading back a complex64 array is bit-exact.
    """
    arr = np.ascontiguousarray(np.asarray(data, dtype=np.complex64))
    if arr.ndim < 1 or arr.ndim > MAX_DIMS:
        raise ArrayFormatError(f"array rank {arr.ndim} outside supported 1..{MAX_DIMS}")
    if axes is None:
        axes = [(0.0, 1.0)] * arr.ndim
    if len(axes) != arr.ndim:
        raise ArrayFormatError("axes metadata must match array rank")
    header = MAGIC
    header += struct.pack("<III", FORMAT_VERSION, DTYPE_COMPLEX64, arr.ndim)
    header += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    for start, spacing in axes:
        header += struct.pack("<dd", float(start), float(spacing))
    payload = arr.view(np.float32).tobytes()
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(payload)


def read_array(path) -> tuple[np.ndarray, list[tuple[float, float]]]:
    """Read an array file; returns (complex64 array, per-axis (start, spacing))."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 16:
        raise ArrayFormatError("truncated header")
    if raw[:4] != MAGIC:
        raise ArrayFormatError(f"bad magic {raw[:4]!r}; not an NFSC array file")
    version, dtype, ndim = struct.unpack_from("<III", raw, 4)
    if version != FORMAT_VERSION:
        raise ArrayFormatError(f"unsupported format version {version}")
    if dtype != DTYPE_COMPLEX64:
        raise ArrayFormatError(f"unknown dtype code {dtype}")
    if not 1 <= ndim <= MAX_DIMS:
        raise ArrayFormatError(f"unsupported dimension count {ndim}")
    offset = 16
    if len(raw) < offset + 8 * ndim:
        raise ArrayFormatError("truncated header")
    extents = struct.unpack_from(f"<{ndim}Q", raw, offset)
    offset += 8 * ndim
    total = 1
    for e in extents:
        if e < 1:
            raise ArrayFormatError("zero extent")
        total *= e
    if total > MAX_TOTAL_ELEMENTS:
        raise ArrayFormatError(f"extent overflow: {total} elements")
    if len(raw) < offset + 16 * ndim:
        raise ArrayFormatError("truncated header")
    axes = []
    for _ in range(ndim):
        start, spacing = struct.unpack_from("<dd", raw, offset)
        axes.append((start, spacing))
        offset += 16
    payload = raw[offset:]
    if len(payload) != 8 * total:
        raise ArrayFormatError(
            f"truncated payload: expected {8 * total} bytes, found {len(payload)}"
        )
    flat = np.frombuffer(payload, dtype="<f4").astype(np.float32)
    arr = flat.view(np.complex64).reshape(extents)
    return arr, axes


# ---------------------------------------------------------------------------
# JSON configuration


def _path_join(path: str, key: str) -> str:
    return f"{path}.{key}" if path else key


def _require(obj: dict, key: str, path: str):
    if key not in obj:
        raise ConfigError(f"{_path_join(path, key)}: missing required field")
    return obj[key]


def _as_dict(value, path: str) -> dict:
    if not isinstance(value, dict):
        raise ConfigError(f"{path}: expected an object")
    return value


def _as_number(value, path: str) -> float:
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ConfigError(f"{path}: expected a number")
    return float(value)


def _as_int(value, path: str) -> int:
    if isinstance(value, bool) or not isinstance(value, int):
        raise ConfigError(f"{path}: expected an integer")
    return value


def _as_bool(value, path: str) -> bool:
    if not isinstance(value, bool):
        raise ConfigError(f"{path}: expected a boolean")
    return value


def _as_complex(value, path: str) -> complex:
    if isinstance(value, (int, float)) and not isinstance(value, bool):
        return complex(value)
    if isinstance(value, list) and len(value) == 2:
        return complex(_as_number(value[0], path), _as_number(value[1], path))
    raise ConfigError(f"{path}: expected a number or [real, imag] pair")


def _as_vec3(value, path: str) -> tuple[float, float, float]:
    if not isinstance(value, list) or len(value) != 3:
        raise ConfigError(f"{path}: expected a [x, y, z] triple")
    return tuple(_as_number(v, f"{path}[{i}]") for i, v in enumerate(value))


def _positive(value: float, path: str) -> float:
    if value <= 0:
        raise ConfigError(f"{path}: must be > 0")
    return value


def _parse_radar(obj, path) -> RadarParams:
    d = _as_dict(obj, path)
    radar = dict(
        f0=_positive(_as_number(_require(d, "f0", path), _path_join(path, "f0")), _path_join(path, "f0")),
        delta_f=_positive(
            _as_number(_require(d, "delta_f", path), _path_join(path, "delta_f")),
            _path_join(path, "delta_f"),
        ),
        num_freq=_as_int(_require(d, "num_freq", path), _path_join(path, "num_freq")),
    )
    if radar["num_freq"] < 2:
        raise ConfigError(f"{_path_join(path, 'num_freq')}: must be >= 2")
    if "c" in d:
        radar["c"] = _positive(_as_number(d["c"], _path_join(path, "c")), _path_join(path, "c"))
    return RadarParams(**radar)


def _parse_aperture(obj, path) -> Aperture:
    d = _as_dict(obj, path)
    kind = _require(d, "kind", path)
    if kind not in ("linear", "planar"):
        raise ConfigError(f"{_path_join(path, 'kind')}: must be 'linear' or 'planar'")
    kwargs = dict(
        kind=kind,
        origin=_as_vec3(d.get("origin", [0.0, 0.0, 0.0]), _path_join(path, "origin")),
        azimuth_count=_as_int(_require(d, "azimuth_count", path), _path_join(path, "azimuth_count")),
        azimuth_spacing=_positive(
            _as_number(_require(d, "azimuth_spacing", path), _path_join(path, "azimuth_spacing")),
            _path_join(path, "azimuth_spacing"),
        ),
    )
    if kwargs["azimuth_count"] < 1:
        raise ConfigError(f"{_path_join(path, 'azimuth_count')}: must be >= 1")
    if "height_count" in d:
        kwargs["height_count"] = _as_int(d["height_count"], _path_join(path, "height_count"))
        if kwargs["height_count"] < 1:
            raise ConfigError(f"{_path_join(path, 'height_count')}: must be >= 1")
    if "height_spacing" in d:
        kwargs["height_spacing"] = _positive(
            _as_number(d["height_spacing"], _path_join(path, "height_spacing")),
            _path_join(path, "height_spacing"),
        )
    try:
        return Aperture(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


def _parse_scene(obj, path) -> Scene:
    d = _as_dict(obj, path) if obj is not None else {}
    targets = []
    for i, t in enumerate(d.get("targets", [])):
        tp = f"{path}.targets[{i}]"
        td = _as_dict(t, tp)
        try:
            targets.append(
                PointTarget(
                    position=_as_vec3(_require(td, "position", tp), _path_join(tp, "position")),
                    amplitude=_as_complex(td.get("amplitude", 1.0), _path_join(tp, "amplitude")),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{tp}: {exc}") from exc
    interferers = []
    for i, t in enumerate(d.get("interferers", [])):
        ip = f"{path}.interferers[{i}]"
        idd = _as_dict(t, ip)
        try:
            interferers.append(
                Interferer(
                    delay_range=_as_number(_require(idd, "delay_range", ip), _path_join(ip, "delay_range")),
                    amplitude=_as_complex(idd.get("amplitude", 1.0), _path_join(ip, "amplitude")),
                )
            )
        except ValueError as exc:
            raise ConfigError(f"{ip}: {exc}") from exc
    noise = _as_number(d.get("noise_sigma", 0.0), _path_join(path, "noise_sigma"))
    if noise < 0:
        raise ConfigError(f"{_path_join(path, 'noise_sigma')}: must be >= 0")
    return Scene(targets=targets, interferers=interferers, noise_sigma=noise)


def _parse_saturation(obj, path) -> Saturation:
    if obj is None:
        return Saturation(mode="none")
    d = _as_dict(obj, path)
    mode = d.get("mode", "none")
    if mode == "none":
        return Saturation(mode="none")
    if mode == "hard_clip":
        thr = _positive(
            _as_number(_require(d, "threshold", path), _path_join(path, "threshold")),
            _path_join(path, "threshold"),
        )
        return Saturation(mode="hard_clip", threshold=thr)
    if mode == "polynomial":
        coeffs = _require(d, "coefficients", path)
        cp = _path_join(path, "coefficients")
        if not isinstance(coeffs, list) or not coeffs:
            raise ConfigError(f"{cp}: expected a non-empty list of numbers")
        return Saturation(
            mode="polynomial",
            coefficients=[_as_number(v, f"{cp}[{i}]") for i, v in enumerate(coeffs)],
        )
    raise ConfigError(f"{_path_join(path, 'mode')}: unknown saturation mode {mode!r}")


def _parse_axis(obj, path) -> GridAxis:
    d = _as_dict(obj, path)
    count = _as_int(_require(d, "count", path), _path_join(path, "count"))
    if count < 1:
        raise ConfigError(f"{_path_join(path, 'count')}: must be >= 1")
    return GridAxis(
        start=_as_number(_require(d, "start", path), _path_join(path, "start")),
        spacing=_positive(
            _as_number(_require(d, "spacing", path), _path_join(path, "spacing")),
            _path_join(path, "spacing"),
        ),
        count=count,
    )


def _parse_grid(obj, path) -> ImageGrid | None:
    if obj is None:
        return None
    d = _as_dict(obj, path)
    if "range" not in d:
        raise ConfigError(f"{_path_join(path, 'range')}: missing required field")
    axes = [_parse_axis(d["range"], _path_join(path, "range"))]
    if "azimuth" in d:
        axes.append(_parse_axis(d["azimuth"], _path_join(path, "azimuth")))
        if "height" in d:
            axes.append(_parse_axis(d["height"], _path_join(path, "height")))
    elif "height" in d:
        raise ConfigError(f"{_path_join(path, 'height')}: requires an azimuth axis as well")
    return ImageGrid(tuple(axes))


def _parse_solver(obj, path) -> SolverConfig:
    if obj is None:
        return SolverConfig()
    d = _as_dict(obj, path)
    kwargs = {}
    for key in ("mu", "rho", "alpha", "beta", "tol"):
        if key in d and d[key] is not None:
            kwargs[key] = _as_number(d[key], _path_join(path, key))
    if "max_iter" in d:
        kwargs["max_iter"] = _as_int(d["max_iter"], _path_join(path, "max_iter"))
    for key in ("auto_weights", "per_slice_3d"):
        if key in d:
            kwargs[key] = _as_bool(d[key], _path_join(path, key))
    try:
        return SolverConfig(**kwargs)
    except ValueError as exc:
        raise ConfigError(f"{path}: {exc}") from exc


@dataclass
class PipelineConfig:
    """Validated pipeline configuration mirroring the module-level types."""

    radar: RadarParams
    aperture: Aperture
    scene: Scene
    saturation: Saturation
    grid: ImageGrid | None
    solver: SolverConfig
    oversample: int = 8
    seed: int = 0
    output_dir: str = "out"
    floor_db: float = -60.0
    guard_cells: int = 3

    def canonical(self) -> dict:
        """Normalized config content; excludes output_dir (not semantic)."""

        def cpx(value: complex):
            return [value.real, value.imag]

        sat: dict = {"mode": self.saturation.mode}
        if self.saturation.mode == "hard_clip":
            sat["threshold"] = self.saturation.threshold
        elif self.saturation.mode == "polynomial":
            sat["coefficients"] = [float(v) for v in self.saturation.coefficients]
        grid = None
        if self.grid is not None:
            names = ("range", "azimuth", "height")
            grid = {
                names[i]: {"start": ax.start, "spacing": ax.spacing, "count": ax.count}
                for i, ax in enumerate(self.grid.axes)
            }
        return {
            "radar": {
                "f0": self.radar.f0,
                "delta_f": self.radar.delta_f,
                "num_freq": self.radar.num_freq,
                "c": self.radar.c,
            },
            "aperture": {
                "kind": self.aperture.kind,
                "origin": list(self.aperture.origin),
                "azimuth_count": self.aperture.azimuth_count,
                "azimuth_spacing": self.aperture.azimuth_spacing,
                "height_count": self.aperture.height_count,
                "height_spacing": self.aperture.height_spacing,
            },
            "scene": {
                "targets": [
                    {"position": list(t.position), "amplitude": cpx(t.amplitude)}
                    for t in self.scene.targets
                ],
                "interferers": [
                    {"delay_range": i.delay_range, "amplitude": cpx(i.amplitude)}
                    for i in self.scene.interferers
                ],
                "noise_sigma": self.scene.noise_sigma,
            },
            "saturation": sat,
            "grid": grid,
            "solver": {
                "mu": self.solver.mu,
                "rho": self.solver.rho,
                "alpha": self.solver.alpha,
                "beta": self.solver.beta,
                "max_iter": self.solver.max_iter,
                "tol": self.solver.tol,
                "auto_weights": self.solver.auto_weights,
                "per_slice_3d": self.solver.per_slice_3d,
            },
            "oversample": self.oversample,
            "seed": self.seed,
            "floor_db": self.floor_db,
            "guard_cells": self.guard_cells,
        }

    @property
    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()


def parse_config(data: dict) -> PipelineConfig:
    """Validate a decoded JSON object into a PipelineConfig."""
    d = _as_dict(data, "config")
    known = {
        "radar", "aperture", "scene", "saturation", "grid", "solver",
        "oversample", "seed", "output_dir", "floor_db", "guard_cells",
    }
    for key in d:
        if key not in known:
            raise ConfigError(f"{key}: unknown configuration field")
    radar = _parse_radar(_require(d, "radar", ""), "radar")
    aperture = _parse_aperture(_require(d, "aperture", ""), "aperture")
    scene = _parse_scene(d.get("scene"), "scene")
    saturation = _parse_saturation(d.get("saturation"), "saturation")
    grid = _parse_grid(d.get("grid"), "grid")
    solver = _parse_solver(d.get("solver"), "solver")
    oversample = _as_int(d.get("oversample", 8), "oversample")
    if oversample < 1:
        raise ConfigError("oversample: must be >= 1")
    seed = _as_int(d.get("seed", 0), "seed")
    output_dir = d.get("output_dir", "out")
    if not isinstance(output_dir, str):
        raise ConfigError("output_dir: expected a string")
    floor_db = _as_number(d.get("floor_db", -60.0), "floor_db")
    if floor_db >= 0:
        raise ConfigError("floor_db: must be < 0")
    guard_cells = _as_int(d.get("guard_cells", 3), "guard_cells")
    if guard_cells < 0:
        raise ConfigError("guard_cells: must be >= 0")
    if grid is not None and grid.ndim == 3 and aperture.kind != "planar":
        raise ConfigError("grid: 3D imaging grid requires a planar aperture")
    return PipelineConfig(
        radar=radar,
        aperture=aperture,
        scene=scene,
        saturation=saturation,
        grid=grid,
        solver=solver,
        oversample=oversample,
        seed=seed,
        output_dir=output_dir,
        floor_db=floor_db,
        guard_cells=guard_cells,
    )


def load_config(path) -> PipelineConfig:
    """Load and validate a JSON configuration file."""
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config parse error at line {exc.lineno}, column {exc.colno}: {exc.msg}") from exc
    return parse_config(data)


# ---------------------------------------------------------------------------
# dB-image export


def _round_half_up(x: np.ndarray) -> np.ndarray:
    return np.floor(x + 0.5)


def export_db_image(
    image: ComplexImage,
    floor_db: float,
    base_path,
    slice_axis: str | None = None,
    slice_index: int | None = None,
) -> tuple[Path, Path]:
    """Write an 8-bit graymap and a CSV of dB magnitudes.

    [floor_db, 0] dB maps linearly onto [0, 255] with half-up rounding.
    3D images need a slice_axis name; slice_index picks a slice, otherwise
    the maximum projection along that axis is exported.
    """
    db = image_to_db(image, floor_db)
    names = ("range", "azimuth", "height")[: image.grid.ndim]
    if image.grid.ndim == 3:
        if slice_axis is None:
            raise ValueError("3D image export needs a slice_axis (and optional slice_index)")
        if slice_axis not in names:
            raise ValueError(f"unknown slice axis {slice_axis!r}")
        ax = names.index(slice_axis)
        if slice_index is None:
            db = db.max(axis=ax)
        else:
            if not 0 <= slice_index < image.grid.shape[ax]:
                raise ValueError("slice_index out of range")
            db = np.take(db, slice_index, axis=ax)
    elif slice_axis is not None:
        raise ValueError("slice_axis applies only to 3D images")
    if db.ndim == 1:
        db = db[None, :]

    pixels = np.clip(_round_half_up(255.0 * (db - floor_db) / (0.0 - floor_db)), 0, 255)
    pixels = pixels.astype(np.uint8)
    base = Path(base_path)
    pgm_path = base.with_suffix(".pgm")
    csv_path = base.with_suffix(".csv")
    h, w = pixels.shape
    with open(pgm_path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode())
        fh.write(pixels.tobytes())
    with open(csv_path, "w") as fh:
        for row in db:
            fh.write(",".join(f"{v:.6f}" for v in row) + "\n")
    return pgm_path, csv_path


# ---------------------------------------------------------------------------
# pipeline stages


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _entry(out: Path, filename: str, extents=None) -> dict:
    e = {"file": filename, "sha256": _sha256(out / filename)}
    if extents is not None:
        e["extents"] = [int(v) for v in extents]
    return e


def _need(out: Path, filename: str, producer: str) -> Path:
    path = out / filename
    if not path.exists():
        raise PipelineError(
            f"missing upstream artifact {filename!r} (run stage {producer!r} first)"
        )
    return path


def _grid_from_axes(axes, extents) -> ImageGrid:
    return ImageGrid(tuple(GridAxis(start, spacing, int(n)) for (start, spacing), n in zip(axes, extents)))


def _simulate_echo(config: PipelineConfig, scene: Scene) -> EchoData:
    echo = synthesize_echo(config.radar, config.aperture, scene, seed=config.seed)
    return apply_saturation(echo, config.saturation)


def _image_from_profiles(config: PipelineConfig, profiles: RangeProfileSet) -> ComplexImage:
    if config.grid is None:
        raise ConfigError("grid: required for the image stage")
    if config.grid.ndim == 2:
        return backproject_2d(profiles, config.grid)
    if config.grid.ndim == 3:
        return backproject_3d(profiles, config.grid)
    raise ConfigError("grid: imaging needs a 2D or 3D grid")


def stage_simulate(config: PipelineConfig, out: Path) -> dict:
    echo = _simulate_echo(config, config.scene)
    axes = [(config.radar.f0, config.radar.delta_f), (0.0, 1.0)]
    write_array(out / ECHO_FILE, echo.samples, axes)
    return {"echo": _entry(out, ECHO_FILE, echo.samples.shape)}


def stage_compress(config: PipelineConfig, out: Path) -> dict:
    data, _ = read_array(_need(out, ECHO_FILE, "simulate"))
    expected = (config.radar.num_freq, config.aperture.num_positions)
    if data.shape != expected:
        raise PipelineError(f"echo artifact shape {data.shape} does not match config {expected}")
    echo = EchoData(data, config.radar, config.aperture)
    profiles = range_compress(echo, config.oversample)
    axes = [(0.0, profiles.tau_spacing), (0.0, 1.0)]
    write_array(out / PROFILES_FILE, profiles.profiles, axes)
    return {"profiles": _entry(out, PROFILES_FILE, profiles.profiles.shape)}


def _load_profiles(config: PipelineConfig, out: Path) -> RangeProfileSet:
    data, axes = read_array(_need(out, PROFILES_FILE, "compress"))
    expected = (config.oversample * config.radar.num_freq, config.aperture.num_positions)
    if data.shape != expected:
        raise PipelineError(f"profiles artifact shape {data.shape} does not match config {expected}")
    tau_axis = axes[0][0] + axes[0][1] * np.arange(data.shape[0])
    return RangeProfileSet(data, config.oversample, tau_axis, config.radar, config.aperture)


def _grid_axes_meta(grid: ImageGrid) -> list[tuple[float, float]]:
    return [(ax.start, ax.spacing) for ax in grid.axes]


def stage_image(config: PipelineConfig, out: Path) -> dict:
    profiles = _load_profiles(config, out)
    image = _image_from_profiles(config, profiles)
    write_array(out / IMAGE_FILE, image.values, _grid_axes_meta(image.grid))
    kwargs = {"slice_axis": "height"} if image.grid.ndim == 3 else {}
    export_db_image(image, config.floor_db, out / "image_raw_db", **kwargs)
    return {"image": _entry(out, IMAGE_FILE, image.values.shape)}


def _load_image(out: Path, filename: str, producer: str) -> ComplexImage:
    data, axes = read_array(_need(out, filename, producer))
    return ComplexImage(data.astype(np.complex128), _grid_from_axes(axes, data.shape))


def stage_suppress(config: PipelineConfig, out: Path) -> dict:
    image = _load_image(out, IMAGE_FILE, "image")
    if image.grid.ndim == 3:
        target, interference, results = decompose_volume(image, config.solver)
        info = results[0]
        iterations = sum(r.iterations_run for r in results)
        converged = all(r.converged for r in results)
        residual = float(np.sqrt(sum(r.residual_norm**2 for r in results)))
    elif image.grid.ndim == 2:
        info = decompose(image.values, config.solver)
        target = ComplexImage(info.target, image.grid)
        interference = ComplexImage(info.interference, image.grid)
        iterations = info.iterations_run
        converged = info.converged
        residual = info.residual_norm
    else:
        raise PipelineError("suppress stage needs a 2D or 3D image artifact")

    meta = _grid_axes_meta(image.grid)
    write_array(out / TARGET_FILE, target.values, meta)
    write_array(out / INTERFERENCE_FILE, interference.values, meta)
    with open(out / "decomposition.json", "w") as fh:
        json.dump(
            {
                "mu": info.mu,
                "rho": info.rho,
                "iterations": iterations,
                "converged": converged,
                "residual_norm": residual,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    with open(out / "objective_trace.csv", "w") as fh:
        fh.write("iteration,objective\n")
        for i, val in enumerate(info.objective_trace, start=1):
            fh.write(f"{i},{val:.12e}\n")
    kwargs = {"slice_axis": "height"} if image.grid.ndim == 3 else {}
    export_db_image(target, config.floor_db, out / "target_db", **kwargs)
    export_db_image(interference, config.floor_db, out / "interference_db", **kwargs)
    return {
        "target": _entry(out, TARGET_FILE, target.values.shape),
        "interference": _entry(out, INTERFERENCE_FILE, interference.values.shape),
    }


def stage_evaluate(config: PipelineConfig, out: Path) -> dict:
    if not config.scene.targets:
        raise PipelineError("evaluate stage needs at least one target in the scene")
    raw = _load_image(out, IMAGE_FILE, "image")
    suppressed = _load_image(out, TARGET_FILE, "suppress")

    # Reference chain: re-run the simulation without targets and subtract,
    # reusing the seed so the noise realization cancels exactly.
    background_scene = Scene(
        targets=[], interferers=config.scene.interferers, noise_sigma=config.scene.noise_sigma
    )
    echo_bg = _simulate_echo(config, background_scene)
    profiles_bg = range_compress(echo_bg, config.oversample)
    image_bg = _image_from_profiles(config, profiles_bg)
    image_bg = ComplexImage(image_bg.values, raw.grid)
    reference = background_subtract(raw, image_bg)
    write_array(out / REFERENCE_FILE, reference.values, _grid_axes_meta(reference.grid))

    report = suppression_metrics(
        raw,
        suppressed,
        reference,
        [t.position for t in config.scene.targets],
        guard_cells=config.guard_cells,
    )
    (out / REPORT_FILE).write_text(report.to_text())
    header, row = report.to_csv_row()
    (out / "report.csv").write_text(header + "\n" + row + "\n")
    return {"report": _entry(out, REPORT_FILE)}


STAGE_FUNCS = {
    "simulate": stage_simulate,
    "compress": stage_compress,
    "image": stage_image,
    "suppress": stage_suppress,
    "evaluate": stage_evaluate,
}


class _OutputLock:
    """Exclusive lockfile so two pipelines cannot write one directory."""

    def __init__(self, out: Path):
        self.path = out / ".lock"
        self.fd = None

    def __enter__(self):
        try:
            self.fd = os.open(self.path, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
        except FileExistsError:
            raise PipelineError(
                f"output directory is locked by another run ({self.path}); "
                "remove the lockfile if that run is dead"
            ) from None
        return self

    def __exit__(self, *exc):
        if self.fd is not None:
            os.close(self.fd)
            self.path.unlink(missing_ok=True)
        return False


def run_pipeline(config: PipelineConfig, stages: Sequence[str] | None = None) -> dict:
    """Run the requested stages in canonical order and update the manifest."""
    requested = list(STAGE_ORDER) if stages is None else list(stages)
    for name in requested:
        if name not in STAGE_FUNCS:
            raise PipelineError(f"unknown stage {name!r}")
    ordered = [s for s in STAGE_ORDER if s in requested]

    out = Path(config.output_dir)
    out.mkdir(parents=True, exist_ok=True)
    manifest_path = out / MANIFEST_FILE
    with _OutputLock(out):
        artifacts = {}
        if manifest_path.exists():
            try:
                previous = json.loads(manifest_path.read_text())
            except json.JSONDecodeError:
                previous = {}
            if previous.get("config_hash") == config.config_hash:
                artifacts = previous.get("artifacts", {})
        for name in ordered:
            artifacts.update(STAGE_FUNCS[name](config, out))
        manifest = {
            "format_version": FORMAT_VERSION,
            "config_hash": config.config_hash,
            "seed": config.seed,
            "artifacts": artifacts,
        }
        manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return manifest


# ---------------------------------------------------------------------------
# command line


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="nfsar",
        description="Near-field SAR interference simulation, imaging and suppression pipeline",
    )
    sub = parser.add_subparsers(dest="verb", required=True)
    for verb in STAGE_ORDER + ("pipeline",):
        p = sub.add_parser(verb, help=f"run the {verb} stage" if verb != "pipeline" else "run several stages")
        p.add_argument("--config", required=True, help="JSON configuration file")
        p.add_argument("--out", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="noise seed (overrides config)")
        p.add_argument("--floor-db", type=float, help="dB export floor (overrides config)")
        if verb == "pipeline":
            p.add_argument(
                "--stages",
                help="comma-separated subset of: " + ",".join(STAGE_ORDER),
            )
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        config = load_config(args.config)
        if args.out is not None:
            config.output_dir = args.out
        if args.seed is not None:
            config.seed = args.seed
        if args.floor_db is not None:
            if args.floor_db >= 0:
                raise ConfigError("floor_db: must be < 0")
            config.floor_db = args.floor_db
        if args.verb == "pipeline":
            stages = None
            if args.stages:
                stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        else:
            stages = [args.verb]
        run_pipeline(config, stages)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (PipelineError, ArrayFormatError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
