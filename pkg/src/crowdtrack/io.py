"""Readers and writers for the on-disk formats.

* MOTChallenge text records (``gt.txt``, ``det.txt``, result files).
* ``CMDG`` binary density grids: a 24-byte little-endian header
  (magic, version, frame_count, grid_h, grid_w, r as u32) followed by
  float32 values, frame-major then row-major.
* ``CMEB`` binary embeddings: magic, version, row_count, dim (u32) followed
  by rows of (frame u32, det_index u32, dim x float32).
* ``key = value`` run configuration files with ``#`` comments.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from .density import AdaptiveSigmaConfig, DensityGrid
from .model import BBox, Detection, GridGeometry

PathLike = Union[str, Path]


class FormatError(ValueError):
    """Malformed input file; the message names the location."""


class MagicError(FormatError):
    pass


class VersionError(FormatError):
    pass


class TruncatedError(FormatError):
    pass


class DimensionError(FormatError):
    pass


class ConfigError(ValueError):
    pass


# ---------------------------------------------------------------- MOT text


@dataclass(frozen=True)
class MotRecord:
    frame: int
    id: int
    bb_left: float
    bb_top: float
    bb_width: float
    bb_height: float
    conf: float = -1.0
    x: float = -1.0
    y: float = -1.0
    z: float = -1.0

    @property
    def bbox(self) -> BBox:
        return BBox(self.bb_left, self.bb_top, self.bb_width, self.bb_height)


def _num(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def format_mot_line(rec: MotRecord) -> str:
    return ",".join([
        str(rec.frame), str(rec.id), _num(rec.bb_left), _num(rec.bb_top),
        _num(rec.bb_width), _num(rec.bb_height), _num(rec.conf),
        _num(rec.x), _num(rec.y), _num(rec.z),
    ])


def parse_mot_lines(lines: Iterable[str], source: str = "<stream>") -> List[MotRecord]:
    out = []
    for lineno, raw in enumerate(lines, 1):
        line = raw.strip()
        if not line:
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) < 7:
            raise FormatError(f"{source}:{lineno}: expected at least 7 fields, got {len(parts)}")
        try:
            frame = int(parts[0])
            ident = int(float(parts[1]))
            vals = [float(p) for p in parts[2:10]]
        except ValueError as exc:
            raise FormatError(f"{source}:{lineno}: non-numeric field ({exc})") from None
        if float(parts[0]) != frame or frame < 1:
            raise FormatError(f"{source}:{lineno}: frame must be a positive integer")
        if not all(math.isfinite(v) for v in vals):
            raise FormatError(f"{source}:{lineno}: non-finite value")
        vals += [-1.0] * (8 - len(vals))
        out.append(MotRecord(frame, ident, *vals))
    return out


def read_mot(path: PathLike) -> List[MotRecord]:
    with open(path, "r", encoding="utf-8") as fh:
        return parse_mot_lines(fh, str(path))


def write_mot(path: PathLike, records: Iterable[MotRecord]) -> None:
    recs = sorted(records, key=lambda r: (r.frame, r.id))
    for r in recs:
        if not (r.bb_width > 0 and r.bb_height > 0):
            raise FormatError(f"frame {r.frame} id {r.id}: box size must be positive")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for r in recs:
            fh.write(format_mot_line(r) + "\n")


def detections_by_frame(records: Sequence[MotRecord], n_frames: Optional[int] = None,
                        embeddings: Optional[Dict[Tuple[int, int], np.ndarray]] = None) -> List[List[Detection]]:
    """Group detection records into per-frame lists (frame 1 first).

    Confidence is clipped into ``[0, 1]``, with negative values (unknown)
    read as 1; ``embeddings`` maps
    ``(frame, index_within_frame)`` to unit vectors.
    """
    last = max((r.frame for r in records), default=0)
    n = max(last, n_frames or 0)
    frames: List[List[Detection]] = [[] for _ in range(n)]
    for r in records:
        idx = len(frames[r.frame - 1])
        emb = None if embeddings is None else embeddings.get((r.frame, idx))
        conf = 1.0 if r.conf < 0 else min(r.conf, 1.0)
        frames[r.frame - 1].append(Detection(r.bbox, conf, 0, emb))
    return frames


# ------------------------------------------------------------ density grid

_DENSITY_HEADER = struct.Struct("<4s5I")
DENSITY_MAGIC = b"CMDG"
_EMB_HEADER = struct.Struct("<4s3I")
EMBEDDING_MAGIC = b"CMEB"
FORMAT_VERSION = 1


def write_density(path: PathLike, grids: Sequence, r: Optional[int] = None) -> None:
    arrs = [np.asarray(g, dtype=np.float64) for g in grids]
    if r is None:
        r = grids[0].geom.r if grids and hasattr(grids[0], "geom") else 4
    gh, gw = arrs[0].shape if arrs else (0, 0)
    if any(a.shape != (gh, gw) for a in arrs):
        raise DimensionError("all density frames must share one shape")
    payload = np.stack(arrs).astype("<f4") if arrs else np.zeros(0, "<f4")
    with open(path, "wb") as fh:
        fh.write(_DENSITY_HEADER.pack(DENSITY_MAGIC, FORMAT_VERSION, len(arrs), gh, gw, r))
        fh.write(payload.tobytes())


def read_density(path: PathLike, expect_shape: Optional[Tuple[int, int]] = None) -> List[DensityGrid]:
    data = Path(path).read_bytes()
    if len(data) < _DENSITY_HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(data)} bytes)")
    magic, version, n, gh, gw, r = _DENSITY_HEADER.unpack_from(data)
    if magic != DENSITY_MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}, expected {DENSITY_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    if expect_shape is not None and (gh, gw) != tuple(expect_shape):
        raise DimensionError(f"{path}: grid is {gh}x{gw}, expected {expect_shape[0]}x{expect_shape[1]}")
    need = _DENSITY_HEADER.size + 4 * n * gh * gw
    if len(data) != need:
        raise TruncatedError(f"{path}: payload is {len(data)} bytes, expected {need}")
    if n == 0:
        return []
    geom = GridGeometry.from_grid(gh, gw, r)
    vals = np.frombuffer(data, dtype="<f4", offset=_DENSITY_HEADER.size).reshape(n, gh, gw)
    return [DensityGrid(v.astype(np.float64), geom) for v in vals]


def write_density_csv(path: PathLike, grids: Sequence) -> None:
    """Plain-text dump for inspection: one ``frame,row,values...`` line per grid row."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f, g in enumerate(grids, 1):
            for i, row in enumerate(np.asarray(g, dtype=np.float32)):
                fh.write(f"{f},{i}," + ",".join(repr(float(v)) for v in row) + "\n")


# -------------------------------------------------------------- embeddings


def write_embeddings(path: PathLike, rows: Sequence[Tuple[int, int, np.ndarray]], dim: int = 128) -> None:
    """Write ``(frame, det_index, vector)`` rows in the given order."""
    rec = np.dtype([("frame", "<u4"), ("idx", "<u4"), ("vec", "<f4", (dim,))])
    arr = np.zeros(len(rows), dtype=rec)
    for i, (frame, idx, vec) in enumerate(rows):
        v = np.asarray(vec).reshape(-1)
        if v.size != dim:
            raise DimensionError(f"row {i}: embedding has {v.size} values, expected {dim}")
        arr[i] = (frame, idx, v)
    with open(path, "wb") as fh:
        fh.write(_EMB_HEADER.pack(EMBEDDING_MAGIC, FORMAT_VERSION, len(rows), dim))
        fh.write(arr.tobytes())


def read_embeddings(path: PathLike, expect_dim: Optional[int] = None) -> Dict[Tuple[int, int], np.ndarray]:
    data = Path(path).read_bytes()
    if len(data) < _EMB_HEADER.size:
        raise TruncatedError(f"{path}: header truncated ({len(data)} bytes)")
    magic, version, n, dim = _EMB_HEADER.unpack_from(data)
    if magic != EMBEDDING_MAGIC:
        raise MagicError(f"{path}: bad magic {magic!r}, expected {EMBEDDING_MAGIC!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"{path}: unsupported version {version}")
    if expect_dim is not None and dim != expect_dim:
        raise DimensionError(f"{path}: embedding dim is {dim}, expected {expect_dim}")
    rec = np.dtype([("frame", "<u4"), ("idx", "<u4"), ("vec", "<f4", (dim,))])
    need = _EMB_HEADER.size + n * rec.itemsize
    if len(data) != need:
        raise TruncatedError(f"{path}: payload is {len(data)} bytes, expected {need}")
    arr = np.frombuffer(data, dtype=rec, offset=_EMB_HEADER.size)
    return {(int(a["frame"]), int(a["idx"])): a["vec"].astype(np.float64) for a in arr}


# ------------------------------------------------------------------ config


@dataclass(frozen=True)
class RunConfig:
    lam: float = 0.98
    tau: float = 0.5
    max_age: int = 30
    gating_threshold: float = 9.4877
    embedding_momentum: float = 0.9
    n_init: int = 3
    max_appearance_cost: float = 0.6
    init_confidence: float = 0.6
    weak_size_noise_scale: float = 100.0
    window: int = 19
    mu: float = 1000.0
    r: int = 4
    k: int = 3
    gamma: float = 0.3
    sigma_floor: float = 1.0
    sigma_cap: float = 15.0
    add_mass_threshold: float = 0.5
    remove_gain_threshold: float = 0.0
    max_added_per_frame: int = 50
    min_peak_separation: float = 3.0
    default_box_w: float = 32.0
    default_box_h: float = 80.0
    recovered_confidence: float = 0.5
    exempt_confidence: float = 0.6
    iou_match: float = 0.5

    def assoc_config(self):
        from .track import AssocConfig
        return AssocConfig(
            lam=self.lam, tau=self.tau, max_age=self.max_age,
            gating_threshold=self.gating_threshold,
            embedding_momentum=self.embedding_momentum, n_init=self.n_init,
            max_appearance_cost=self.max_appearance_cost,
            init_confidence=self.init_confidence,
            weak_size_noise_scale=self.weak_size_noise_scale,
        )

    def sigma_config(self) -> AdaptiveSigmaConfig:
        return AdaptiveSigmaConfig(self.k, self.gamma, self.sigma_floor, self.sigma_cap)

    def refine_config(self):
        from .refine import RefineConfig
        return RefineConfig(
            window=self.window, add_mass_threshold=self.add_mass_threshold,
            remove_gain_threshold=self.remove_gain_threshold,
            max_added_per_frame=self.max_added_per_frame,
            min_peak_separation=self.min_peak_separation,
            default_box=(self.default_box_w, self.default_box_h),
            recovered_confidence=self.recovered_confidence,
            exempt_confidence=self.exempt_confidence,
            sigma=self.sigma_config(),
        )

    def to_text(self) -> str:
        return "".join(f"{_file_key(f.name)} = {getattr(self, f.name)}\n" for f in fields(self))


# ``lambda`` is a Python keyword, so the field is ``lam``
_FILE_KEYS = {"lambda": "lam"}


def _file_key(field_name: str) -> str:
    return {v: k for k, v in _FILE_KEYS.items()}.get(field_name, field_name)


# (check, description) per key; keys without an entry only need to parse
_RULES = {
    "lam": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "tau": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "embedding_momentum": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "max_age": (lambda v: v >= 0, "must be >= 0"),
    "n_init": (lambda v: v >= 1, "must be >= 1"),
    "gating_threshold": (lambda v: v > 0, "must be > 0"),
    "max_appearance_cost": (lambda v: 0 <= v <= 2, "must lie in [0, 2]"),
    "init_confidence": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "weak_size_noise_scale": (lambda v: v >= 1, "must be >= 1"),
    "window": (lambda v: v >= 1 and v % 2 == 1, "must be a positive odd integer"),
    "mu": (lambda v: v > 0, "must be > 0"),
    "r": (lambda v: v >= 1, "must be a positive integer"),
    "k": (lambda v: v >= 1, "must be >= 1"),
    "gamma": (lambda v: v > 0, "must be > 0"),
    "sigma_floor": (lambda v: v > 0, "must be > 0"),
    "sigma_cap": (lambda v: v > 0, "must be > 0"),
    "add_mass_threshold": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
    "remove_gain_threshold": (lambda v: v >= 0, "must be >= 0"),
    "max_added_per_frame": (lambda v: v >= 0, "must be >= 0"),
    "min_peak_separation": (lambda v: v >= 0, "must be >= 0"),
    "default_box_w": (lambda v: v > 0, "must be > 0"),
    "default_box_h": (lambda v: v > 0, "must be > 0"),
    "recovered_confidence": (lambda v: 0 < v < 1, "must lie in (0, 1)"),
    "exempt_confidence": (lambda v: 0 <= v <= 1, "must lie in [0, 1]"),
    "iou_match": (lambda v: 0 < v <= 1, "must lie in (0, 1]"),
}


def parse_key_values(text: str, source: str = "<config>") -> List[Tuple[int, str, str]]:
    out = []
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        key, value = (p.strip() for p in line.split("=", 1))
        if not key or not value:
            raise ConfigError(f"{source}:{lineno}: expected 'key = value'")
        out.append((lineno, key, value))
    return out


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    types = {_file_key(f.name): f.type for f in fields(RunConfig)}
    values = {}
    for lineno, key, raw in parse_key_values(text, source):
        if key not in types:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        try:
            v = float(raw)
            if types[key] == "int":
                if v != int(v):
                    raise ValueError
                v = int(v)
        except ValueError:
            raise ConfigError(f"{source}:{lineno}: {key}: cannot parse {raw!r} as {types[key]}") from None
        check = _RULES.get(_FILE_KEYS.get(key, key))
        if check and not check[0](v):
            raise ConfigError(f"{source}:{lineno}: {key} {check[1]}, got {raw}")
        values[key] = v
    cfg = RunConfig(**{_FILE_KEYS.get(k, k): v for k, v in values.items()})
    if cfg.sigma_floor > cfg.sigma_cap:
        raise ConfigError(f"{source}: sigma_floor must not exceed sigma_cap")
    return cfg


def read_config(path: PathLike) -> RunConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"), str(path))
