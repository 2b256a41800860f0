"""Synthetic traveling-heads cohort.

Each subject gets a smooth procedural "anatomy" (multi-channel coefficient
volume); every platform sees that anatomy through a known degradation chain::

    [2x trilinear upsample] -> Gaussian blur -> per-voxel channel mixing
        -> smooth multiplicative gain field -> additive Gaussian noise

Random streams come from Philox keyed by ``SeedSequence([seed, stream, ...])``
with fixed stream ids: 0 = subject anatomy, 1 = platform degradation of one
subject, 2 = platform mixing matrix, 3 = platform gain field. Nothing depends
on generation order, so subjects can be produced in any order or in parallel.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.ndimage import gaussian_filter

from .sh import compute_stats
from .volume import Cell, CohortManifest, Platform, Volume, write_mask, write_volume

PATCH_SIZE = 11

STREAM_ANATOMY = 0
STREAM_DEGRADE = 1
STREAM_MIXING = 2
STREAM_GAIN = 3


class ConfigError(ValueError):
    """Cohort configuration is invalid."""


def rng_for(seed: int, *path: int) -> np.random.Generator:
    """Counter-based generator for one named stream."""
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([int(seed), *map(int, path)])))


@dataclass
class PlatformSpec:
    name: str
    scale: int = 1
    blur: float = 0.0
    noise: float = 0.0
    gain: float = 0.0
    mixing: list | None = None
    mixing_strength: float = 0.0
    display_name: str = ""

    def validate(self, channels: int) -> None:
        if self.scale not in (1, 2):
            raise ConfigError(f"platform {self.name}: scale must be 1 or 2")
        for fld in ("blur", "noise", "gain", "mixing_strength"):
            if getattr(self, fld) < 0:
                raise ConfigError(f"platform {self.name}: {fld} must be >= 0")
        if self.mixing is not None:
            m = np.asarray(self.mixing, dtype=np.float64)
            if m.shape != (channels, channels):
                raise ConfigError(f"platform {self.name}: mixing must be {channels}x{channels}")
            if not np.all(np.isfinite(m)) or np.linalg.cond(m) > 1e8:
                raise ConfigError(f"platform {self.name}: mixing matrix is not invertible")


def default_platforms() -> list[PlatformSpec]:
    """Aged noisy input, two same-resolution modern targets, one 2x target."""
    return [
        PlatformSpec("ge_st", 1, blur=1.0, noise=0.05, gain=0.1, mixing_strength=0.35, display_name="aged st"),
        PlatformSpec("prisma_st", 1, blur=0.4, noise=0.01, gain=0.03, mixing_strength=0.2, display_name="modern st"),
        PlatformSpec("connectom_st", 1, blur=0.2, noise=0.01, gain=0.03, mixing_strength=0.2,
                     display_name="high-gradient st"),
        PlatformSpec("connectom_sa", 2, blur=0.5, noise=0.01, gain=0.03, mixing_strength=0.15,
                     display_name="high-gradient sa (2x)"),
    ]


@dataclass
class CohortConfig:
    n_subjects: int = 4
    dims: tuple[int, int, int] = (24, 24, 24)
    channels: int = 6
    seed: int = 0
    platforms: list[PlatformSpec] = field(default_factory=default_platforms)
    n_bumps: int = 24
    bump_sigma: tuple[float, float] = (1.2, 3.0)
    brain_radius: float = 0.3
    correlation: float = 0.5

    def __post_init__(self):
        self.dims = tuple(int(d) for d in self.dims)
        self.bump_sigma = tuple(float(s) for s in self.bump_sigma)
        self.platforms = [p if isinstance(p, PlatformSpec) else PlatformSpec(**p) for p in self.platforms]

    def validate(self) -> None:
        if self.n_subjects < 2:
            raise ConfigError("n_subjects must be >= 2")
        if len(self.dims) != 3 or min(self.dims) < PATCH_SIZE:
            raise ConfigError(f"dims must be 3 extents >= {PATCH_SIZE}, got {self.dims}")
        if self.channels < 1:
            raise ConfigError("channels must be >= 1")
        if len(self.platforms) < 2:
            raise ConfigError("need at least 2 platforms")
        if self.platforms[0].scale != 1:
            raise ConfigError("platform 0 (input) must have scale 1")
        names = [p.name for p in self.platforms]
        if len(set(names)) != len(names):
            raise ConfigError("platform names must be unique")
        for p in self.platforms:
            p.validate(self.channels)
        if self.n_bumps < 0 or not 0 < self.bump_sigma[0] <= self.bump_sigma[1]:
            raise ConfigError("n_bumps must be >= 0 and 0 < bump_sigma[0] <= bump_sigma[1]")
        if not 0 < self.brain_radius <= 0.5:
            raise ConfigError("brain_radius must be in (0, 0.5]")

    def resolved(self) -> "CohortConfig":
        """Copy with every platform's mixing matrix materialized."""
        plats = []
        for i, p in enumerate(self.platforms):
            q = PlatformSpec(**asdict(p))
            if q.mixing is None:
                q.mixing = mixing_matrix(self.seed, i, self.channels, p.mixing_strength).tolist()
            plats.append(q)
        return CohortConfig(**{**asdict(self), "platforms": plats})

    def to_json(self) -> dict:
        d = asdict(self)
        d["dims"] = list(self.dims)
        d["bump_sigma"] = list(self.bump_sigma)
        return d

    @classmethod
    def from_json(cls, obj: dict) -> "CohortConfig":
        known = set(cls.__dataclass_fields__)
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config field(s): {sorted(unknown)}")
        try:
            cfg = cls(**obj)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"bad config: {exc}") from exc
        return cfg


def mixing_matrix(seed: int, platform_index: int, channels: int, strength: float) -> np.ndarray:
    """Near-identity mixing ``I + strength * G / sqrt(C)``, G standard normal."""
    if strength == 0:
        return np.eye(channels)
    g = rng_for(seed, STREAM_MIXING, platform_index).standard_normal((channels, channels))
    return np.eye(channels) + strength * g / np.sqrt(channels)


def _grid(dims):
    return np.meshgrid(*[np.arange(d, dtype=np.float64) for d in dims], indexing="ij")


def generate_subject_anatomy(seed: int, dims=(24, 24, 24), channels: int = 6, n_bumps: int = 24,
                             bump_sigma=(1.2, 3.0), brain_radius: float = 0.3,
                             correlation: float = 0.5) -> tuple[Volume, np.ndarray]:
    """Smooth anatomy in [-1, 1] and the mask of its nonzero support.

    Per channel: a sum of Gaussian bumps centred inside an ellipsoidal brain,
    then cross-channel correlation, a compact ellipsoid envelope and a tanh
    squash scaled by the RMS over the support.
    """
    dims = tuple(int(d) for d in dims)
    if min(dims) < 4:
        raise ConfigError(f"dims {dims} too small for bump kernels")
    rng = rng_for(seed, STREAM_ANATOMY)
    centre = (np.array(dims) - 1) / 2.0
    radii = brain_radius * np.array(dims, dtype=np.float64)
    gx, gy, gz = _grid(dims)
    r2 = ((gx - centre[0]) / radii[0]) ** 2 + ((gy - centre[1]) / radii[1]) ** 2 + ((gz - centre[2]) / radii[2]) ** 2
    envelope = np.where(r2 < 1.0, (1.0 - r2) ** 2, 0.0)

    raw = np.zeros(dims + (channels,))
    for c in range(channels):
        for _ in range(n_bumps):
            direction = rng.standard_normal(3)
            direction /= np.linalg.norm(direction)
            pos = centre + radii * direction * 0.9 * rng.uniform() ** (1 / 3)
            sigma = rng.uniform(*bump_sigma)
            amp = rng.standard_normal()
            d2 = (gx - pos[0]) ** 2 + (gy - pos[1]) ** 2 + (gz - pos[2]) ** 2
            raw[..., c] += amp * np.exp(-d2 / (2 * sigma * sigma))
    if channels > 1 and n_bumps > 0:
        corr = np.eye(channels) + correlation * rng.standard_normal((channels, channels)) / np.sqrt(channels)
        raw = raw @ corr.T
    vol = raw * envelope[..., None]
    support = envelope > 0
    rms = np.sqrt(np.mean(vol[support] ** 2)) if support.any() else 0.0
    if rms > 0:
        # squash into (-1, 1) while keeping a usable dynamic range
        vol = np.tanh(vol / (2.0 * rms))
    vol = vol.astype(np.float32)
    mask = np.any(vol != 0, axis=-1).astype(np.uint8)
    return Volume(vol), mask


def upsample2(data: np.ndarray) -> np.ndarray:
    """Trilinear 2x upsampling of a channels-last array; output voxel 2x sits on input x."""
    out = np.asarray(data, dtype=np.float64)
    for axis in range(3):
        n = out.shape[axis]
        u = np.arange(2 * n) / 2.0
        i0 = np.floor(u).astype(int)
        i1 = np.minimum(i0 + 1, n - 1)
        frac = (u - i0).reshape([-1 if a == axis else 1 for a in range(out.ndim)])
        out = np.take(out, i0, axis=axis) * (1 - frac) + np.take(out, i1, axis=axis) * frac
    return out


def upsample_mask2(mask: np.ndarray) -> np.ndarray:
    return np.repeat(np.repeat(np.repeat(mask, 2, 0), 2, 1), 2, 2)


def gain_field(seed: int, platform_index: int, dims, base_dims) -> np.ndarray:
    """Low-frequency field in [-1, 1] defined in base-grid coordinates."""
    rng = rng_for(seed, STREAM_GAIN, platform_index)
    scale = dims[0] / base_dims[0]
    coords = [g / scale for g in _grid(dims)]
    field_ = np.zeros(dims)
    for _ in range(3):
        k = rng.uniform(0.5, 1.5, size=3) * 2 * np.pi / np.array(base_dims, dtype=np.float64)
        phase = rng.uniform(0, 2 * np.pi)
        field_ += np.cos(k[0] * coords[0] + k[1] * coords[1] + k[2] * coords[2] + phase)
    return field_ / 3.0


def apply_platform(base: Volume, spec: PlatformSpec, seed: int, subject_index: int = 0,
                   platform_index: int = 0) -> Volume:
    """Push a clean anatomy through one platform's degradation chain."""
    channels = base.channels
    spec.validate(channels)
    mixing = np.asarray(spec.mixing, np.float64) if spec.mixing is not None else \
        mixing_matrix(seed, platform_index, channels, spec.mixing_strength)
    if np.linalg.cond(mixing) > 1e8:
        raise ConfigError(f"platform {spec.name}: mixing matrix is not invertible")

    data = base.data
    voxel = base.voxel_size
    if spec.scale == 2:
        data = upsample2(data)
        voxel = tuple(v / 2 for v in voxel)
    if spec.blur > 0:
        data = gaussian_filter(np.asarray(data, np.float64), sigma=(spec.blur,) * 3 + (0,), mode="constant")
    if not np.array_equal(mixing, np.eye(channels)):
        data = np.asarray(data, np.float64) @ mixing.T
    if spec.gain > 0:
        g = gain_field(seed, platform_index, data.shape[:3], base.dims)
        data = np.asarray(data, np.float64) * (1.0 + spec.gain * g)[..., None]
    if spec.noise > 0:
        rng = rng_for(seed, STREAM_DEGRADE, subject_index, platform_index)
        data = np.asarray(data, np.float64) + spec.noise * rng.standard_normal(data.shape)
    return Volume(np.asarray(data, np.float32), voxel)


def subject_id(j: int) -> str:
    return f"sub-{j:02d}"


def generate_cohort(config: CohortConfig, out_dir) -> CohortManifest:
    """Write all volumes, masks, the resolved config and ``manifest.json``."""
    config.validate()
    cfg = config.resolved()
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "cohort_config.json").write_text(json.dumps(cfg.to_json(), indent=2, sort_keys=True) + "\n")

    subjects = [subject_id(j) for j in range(cfg.n_subjects)]
    cells, anatomy = [], {}
    pooled: dict[str, tuple[list, list]] = {p.name: ([], []) for p in cfg.platforms}
    for j, sid in enumerate(subjects):
        sdir = out / sid
        sdir.mkdir(exist_ok=True)
        anat, mask = generate_subject_anatomy(
            _subject_seed(cfg.seed, j), cfg.dims, cfg.channels, cfg.n_bumps,
            cfg.bump_sigma, cfg.brain_radius, cfg.correlation,
        )
        write_volume(anat, sdir / "anatomy.mspv")
        write_mask(mask, sdir / "anatomy_mask.mspm")
        anatomy[sid] = {"volume": f"{sid}/anatomy.mspv", "mask": f"{sid}/anatomy_mask.mspm"}
        for i, spec in enumerate(cfg.platforms):
            vol = apply_platform(anat, spec, cfg.seed, j, i)
            pmask = upsample_mask2(mask) if spec.scale == 2 else mask
            write_volume(vol, sdir / f"{spec.name}.mspv")
            write_mask(pmask, sdir / f"{spec.name}_mask.mspm")
            cells.append(Cell(sid, spec.name, f"{sid}/{spec.name}.mspv", f"{sid}/{spec.name}_mask.mspm", spec.name))
            pooled[spec.name][0].append(vol)
            pooled[spec.name][1].append(pmask)

    manifest = CohortManifest(
        root=out,
        base_dims=cfg.dims,
        channels=cfg.channels,
        subjects=subjects,
        platforms=[Platform(p.name, p.scale, p.display_name) for p in cfg.platforms],
        cells=cells,
        norm_stats={name: compute_stats(v, m) for name, (v, m) in pooled.items()},
        anatomy=anatomy,
    )
    manifest.save()
    return manifest


def _subject_seed(master: int, j: int) -> int:
    return int(np.random.SeedSequence([int(master), STREAM_ANATOMY, j]).generate_state(1)[0])
