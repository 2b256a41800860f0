"""Binary volume/mask files and cohort manifests.

Volume file, little-endian::

    "MSPV"  u32 version=1  u32 X Y Z C  f32 voxel_size[3]  f32 data[X*Y*Z*C]

with element index ``((x*Y + y)*Z + z)*C + c`` (channel fastest, x slowest).
Mask file: ``"MSPM"  u32 version=1  u32 X Y Z  u8 data[X*Y*Z]``, same
spatial order.

The manifest is a JSON document::

    {
      "format": "msp-cohort", "version": 1,
      "base_dims": [X, Y, Z], "channels": C,
      "subjects": ["sub-00", ...],
      "platforms": [{"name": "ge_st", "scale": 1, "display_name": "..."}, ...],
      "norm_stats": {"ge_st": {"mean": [...], "std": [...]}, ...},
      "cells": [{"subject": "sub-00", "platform": "ge_st",
                 "volume": "sub-00/ge_st.mspv", "mask": "sub-00/ge_st.mspm",
                 "norm_stats": "ge_st"}, ...],
      "anatomy": {"sub-00": {"volume": "...", "mask": "..."}}      # optional
    }

Paths are relative to the manifest's directory. Platform 0 is the input
platform; ``scale`` is 1 or 2 (voxel grid refinement relative to the base).
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sh import NormStats

VOLUME_MAGIC = b"MSPV"
MASK_MAGIC = b"MSPM"
FORMAT_VERSION = 1
_MAX_ELEMENTS = 1 << 34


class FormatError(ValueError):
    """A file does not follow the expected binary layout."""


class ManifestError(ValueError):
    """The manifest document is unreadable or malformed."""


@dataclass
class Volume:
    """Multi-channel volume stored channels-last as ``data[x, y, z, c]``."""

    data: np.ndarray
    voxel_size: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        self.data = np.ascontiguousarray(self.data, dtype=np.float32)
        if self.data.ndim != 4:
            raise ValueError(f"volume data must be (X, Y, Z, C), got {self.data.shape}")
        self.voxel_size = tuple(float(v) for v in self.voxel_size)
        if len(self.voxel_size) != 3 or min(self.voxel_size) <= 0:
            raise ValueError(f"voxel size must be 3 positive floats, got {self.voxel_size}")

    @property
    def dims(self) -> tuple[int, int, int]:
        return tuple(self.data.shape[:3])

    @property
    def channels(self) -> int:
        return self.data.shape[3]

    def replace_data(self, data) -> "Volume":
        return Volume(data, self.voxel_size)

    def channels_first(self) -> np.ndarray:
        return np.ascontiguousarray(self.data.transpose(3, 0, 1, 2))


def write_volume(vol: Volume, path) -> None:
    X, Y, Z, C = vol.data.shape
    header = VOLUME_MAGIC + struct.pack("<5I3f", FORMAT_VERSION, X, Y, Z, C, *vol.voxel_size)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(vol.data.astype("<f4", copy=False).tobytes())


def _read_exact(fh, n, what):
    buf = fh.read(n)
    if len(buf) != n:
        raise FormatError(f"truncated {what}: expected {n} bytes, got {len(buf)}")
    return buf


def read_volume_header(path) -> tuple[tuple[int, int, int, int], tuple[float, float, float]]:
    with open(path, "rb") as fh:
        return _volume_header(fh, path)


def _volume_header(fh, path):
    magic = _read_exact(fh, 4, "magic")
    if magic != VOLUME_MAGIC:
        raise FormatError(f"{path}: bad magic {magic!r}, expected {VOLUME_MAGIC!r}")
    version, X, Y, Z, C, vx, vy, vz = struct.unpack("<5I3f", _read_exact(fh, 32, "header"))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported version {version}")
    if X * Y * Z * C > _MAX_ELEMENTS:
        raise FormatError(f"{path}: extents {X}x{Y}x{Z}x{C} overflow the size limit")
    return (X, Y, Z, C), (vx, vy, vz)


def read_volume(path) -> Volume:
    with open(path, "rb") as fh:
        (X, Y, Z, C), voxel = _volume_header(fh, path)
        n = X * Y * Z * C
        payload = _read_exact(fh, 4 * n, "payload")
        if fh.read(1):
            raise FormatError(f"{path}: trailing bytes after payload")
    data = np.frombuffer(payload, dtype="<f4").astype(np.float32).reshape(X, Y, Z, C)
    return Volume(data, voxel)


def write_mask(mask, path) -> None:
    m = np.asarray(mask)
    if m.ndim != 3:
        raise ValueError(f"mask must be 3-D, got shape {m.shape}")
    if not np.all((m == 0) | (m == 1)):
        raise ValueError("mask values must be 0 or 1")
    with open(path, "wb") as fh:
        fh.write(MASK_MAGIC + struct.pack("<4I", FORMAT_VERSION, *m.shape))
        fh.write(m.astype(np.uint8).tobytes())


def read_mask(path) -> np.ndarray:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MASK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MASK_MAGIC!r}")
        version, X, Y, Z = struct.unpack("<4I", _read_exact(fh, 16, "header"))
        if version != FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported version {version}")
        if X * Y * Z > _MAX_ELEMENTS:
            raise FormatError(f"{path}: extents overflow the size limit")
        payload = _read_exact(fh, X * Y * Z, "payload")
    m = np.frombuffer(payload, dtype=np.uint8).reshape(X, Y, Z).copy()
    if m.max(initial=0) > 1:
        raise FormatError(f"{path}: mask values outside {{0, 1}}")
    return m


def read_mask_header(path) -> tuple[int, int, int]:
    with open(path, "rb") as fh:
        magic = _read_exact(fh, 4, "magic")
        if magic != MASK_MAGIC:
            raise FormatError(f"{path}: bad magic {magic!r}, expected {MASK_MAGIC!r}")
        version, X, Y, Z = struct.unpack("<4I", _read_exact(fh, 16, "header"))
    return X, Y, Z


# ---------------------------------------------------------------------------
# manifest


@dataclass
class Platform:
    name: str
    scale: int = 1
    display_name: str = ""


@dataclass
class Cell:
    subject: str
    platform: str
    volume: str
    mask: str
    norm_stats: str


@dataclass
class CohortManifest:
    root: Path
    base_dims: tuple[int, int, int]
    channels: int
    subjects: list[str]
    platforms: list[Platform]
    cells: list[Cell]
    norm_stats: dict[str, NormStats] = field(default_factory=dict)
    anatomy: dict[str, dict[str, str]] = field(default_factory=dict)

    @property
    def platform_names(self) -> list[str]:
        return [p.name for p in self.platforms]

    def platform_index(self, name_or_index) -> int:
        if isinstance(name_or_index, (int, np.integer)):
            if not 0 <= name_or_index < len(self.platforms):
                raise KeyError(f"platform index {name_or_index} out of range")
            return int(name_or_index)
        names = self.platform_names
        if name_or_index not in names:
            raise KeyError(f"unknown platform {name_or_index!r}; known: {names}")
        return names.index(name_or_index)

    def cell(self, subject: str, platform) -> Cell:
        pname = self.platforms[self.platform_index(platform)].name
        for c in self.cells:
            if c.subject == subject and c.platform == pname:
                return c
        raise KeyError(f"no cell for ({subject}, {pname})")

    def path(self, rel: str) -> Path:
        return self.root / rel

    def to_json(self) -> dict:
        doc = {
            "format": "msp-cohort",
            "version": FORMAT_VERSION,
            "base_dims": list(self.base_dims),
            "channels": self.channels,
            "subjects": list(self.subjects),
            "platforms": [
                {"name": p.name, "scale": p.scale, "display_name": p.display_name} for p in self.platforms
            ],
            "norm_stats": {k: v.to_json() for k, v in sorted(self.norm_stats.items())},
            "cells": [vars(c).copy() for c in self.cells],
        }
        if self.anatomy:
            doc["anatomy"] = {k: dict(v) for k, v in sorted(self.anatomy.items())}
        return doc

    def save(self, path=None) -> Path:
        path = Path(path) if path is not None else self.root / "manifest.json"
        path.write_text(json.dumps(self.to_json(), indent=2, sort_keys=True) + "\n")
        return path


def load_manifest(path) -> CohortManifest:
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except OSError as exc:
        raise ManifestError(f"cannot read manifest {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ManifestError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    try:
        if doc.get("format") != "msp-cohort":
            raise ManifestError(f"{path}: not an msp-cohort manifest")
        platforms = [Platform(p["name"], int(p.get("scale", 1)), p.get("display_name", "")) for p in doc["platforms"]]
        cells = [Cell(c["subject"], c["platform"], c["volume"], c["mask"], c.get("norm_stats", c["platform"]))
                 for c in doc["cells"]]
        return CohortManifest(
            root=path.parent,
            base_dims=tuple(int(d) for d in doc["base_dims"]),
            channels=int(doc["channels"]),
            subjects=[str(s) for s in doc["subjects"]],
            platforms=platforms,
            cells=cells,
            norm_stats={k: NormStats.from_json(v) for k, v in doc.get("norm_stats", {}).items()},
            anatomy=doc.get("anatomy", {}),
        )
    except (KeyError, TypeError, ValueError) as exc:
        if isinstance(exc, ManifestError):
            raise
        raise ManifestError(f"{path}: malformed manifest entry: {exc!r}") from exc


def validate_manifest(m: CohortManifest) -> list[str]:
    """Return every invariant violation found (empty list = valid)."""
    problems: list[str] = []
    if len(m.platforms) < 2:
        problems.append("platforms: need at least 2 platforms")
    if len(set(m.platform_names)) != len(m.platforms):
        problems.append("platforms: duplicate platform names")
    if len(set(m.subjects)) != len(m.subjects):
        problems.append("subjects: duplicate subject ids")
    for p in m.platforms:
        if p.scale not in (1, 2):
            problems.append(f"platform {p.name}: scale {p.scale} not in {{1, 2}}")
    if m.platforms and m.platforms[0].scale != 1:
        problems.append("platform 0 (input) must have scale 1")
    for key, st in m.norm_stats.items():
        if len(st.std) != m.channels:
            problems.append(f"norm_stats {key}: {len(st.std)} channels, expected {m.channels}")
        elif np.any(st.std <= 0):
            problems.append(f"norm_stats {key}: non-positive std")

    scales = {p.name: p.scale for p in m.platforms}
    seen = set()
    for c in m.cells:
        tag = f"cell ({c.subject}, {c.platform})"
        if c.subject not in m.subjects:
            problems.append(f"{tag}: unknown subject")
            continue
        if c.platform not in scales:
            problems.append(f"{tag}: unknown platform")
            continue
        if (c.subject, c.platform) in seen:
            problems.append(f"{tag}: duplicate cell")
        seen.add((c.subject, c.platform))
        if c.norm_stats not in m.norm_stats:
            problems.append(f"{tag}: norm_stats reference {c.norm_stats!r} does not resolve")
        expected = tuple(d * scales[c.platform] for d in m.base_dims)
        vpath, mpath = m.path(c.volume), m.path(c.mask)
        vdims = None
        if not vpath.is_file():
            problems.append(f"{tag}: missing file {c.volume}")
        else:
            try:
                (X, Y, Z, C), _ = read_volume_header(vpath)
                vdims = (X, Y, Z)
                if C != m.channels:
                    problems.append(f"{tag}: {C} channels, expected {m.channels}")
                if vdims != expected:
                    problems.append(f"{tag}: grid multiple violated, dims {vdims} != {expected}")
                if vpath.stat().st_size != 36 + 4 * X * Y * Z * C:
                    problems.append(f"{tag}: volume file size does not match header")
            except (FormatError, OSError) as exc:
                problems.append(f"{tag}: unreadable volume: {exc}")
        if not mpath.is_file():
            problems.append(f"{tag}: missing file {c.mask}")
        else:
            try:
                mdims = read_mask_header(mpath)
                if vdims is not None and mdims != vdims:
                    problems.append(f"{tag}: mask dims {mdims} != volume dims {vdims}")
            except (FormatError, OSError, struct.error) as exc:
                problems.append(f"{tag}: unreadable mask: {exc}")
    for s in m.subjects:
        for p in m.platforms:
            if (s, p.name) not in seen:
                problems.append(f"cell ({s}, {p.name}): missing from manifest")
    return problems
