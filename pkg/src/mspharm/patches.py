"""Patch extraction, train/test split and minibatch iteration.

Every masked voxel of the input platform defines one patch tuple: an 11^3
input patch plus, for each target platform, a patch at the corresponding
location (11^3 on the base grid, 19^3 centred on (2x, 2y, 2z) for 2x grids).
Reads outside the volume see zeros. Patches are cut on demand from padded
channels-first copies of the normalized volumes.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .sh import NormStats, compute_stats, normalize_channels
from .synth import rng_for
from .volume import CohortManifest, FormatError, read_mask, read_volume

INPUT_SIZE = 11
STREAM_SPLIT = 10
STREAM_SHUFFLE = 11
CACHE_MAGIC = b"MSPD"


def target_size(scale: int, input_size: int = INPUT_SIZE) -> int:
    """Target patch extent: 11 for the base grid, 19 for a 2x grid."""
    if scale == 1:
        return input_size
    if scale == 2:
        return 2 * input_size - 3
    raise ValueError(f"unsupported scale {scale}")


def _sha256_file(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


@dataclass
class PreparedCohort:
    """Normalized, padded volumes for every (subject, platform) cell."""

    manifest: CohortManifest
    stats: dict[str, NormStats]
    masks: list[np.ndarray]                      # platform-0 masks per subject
    padded: dict[tuple[int, int], np.ndarray]    # (subject, platform) -> [C, X+2h, ...]
    pads: list[int]                              # per platform

    @property
    def n_platforms(self) -> int:
        return len(self.manifest.platforms)

    def scale(self, platform: int) -> int:
        return self.manifest.platforms[platform].scale

    def volume(self, subject: int, platform: int) -> np.ndarray:
        """Unpadded normalized channels-first volume."""
        h = self.pads[platform]
        v = self.padded[(subject, platform)]
        return v[:, h:v.shape[1] - h, h:v.shape[2] - h, h:v.shape[3] - h]


def prepare_cohort(manifest: CohortManifest, stats_subjects=None, input_size: int = INPUT_SIZE) -> PreparedCohort:
    """Load and normalize every cell.

    Statistics come from the manifest, or are recomputed over masked voxels
    of ``stats_subjects`` only (subject-level holdout keeps test subjects out).
    """
    plats = manifest.platforms
    vols, masks_by_cell = {}, {}
    for j, sid in enumerate(manifest.subjects):
        for i, p in enumerate(plats):
            cell = manifest.cell(sid, p.name)
            vols[(j, i)] = read_volume(manifest.path(cell.volume))
            masks_by_cell[(j, i)] = read_mask(manifest.path(cell.mask))
            if masks_by_cell[(j, i)].shape != vols[(j, i)].dims:
                raise ValueError(f"mask/volume shape mismatch for ({sid}, {p.name})")

    if stats_subjects is None:
        stats = {p.name: manifest.norm_stats[manifest.cell(manifest.subjects[0], p.name).norm_stats] for p in plats}
    else:
        idx = [manifest.subjects.index(s) if isinstance(s, str) else int(s) for s in stats_subjects]
        stats = {p.name: compute_stats([vols[(j, i)] for j in idx], [masks_by_cell[(j, i)] for j in idx])
                 for i, p in enumerate(plats)}

    pads = [target_size(p.scale, input_size) // 2 for p in plats]
    padded = {}
    for (j, i), vol in vols.items():
        norm = normalize_channels(vol.data, stats[plats[i].name])
        h = pads[i]
        padded[(j, i)] = np.pad(norm.transpose(3, 0, 1, 2), ((0, 0), (h, h), (h, h), (h, h)))
    masks = [masks_by_cell[(j, 0)].astype(bool) for j in range(len(manifest.subjects))]
    return PreparedCohort(manifest, stats, masks, padded, pads)


@dataclass
class PatchPair:
    x: np.ndarray
    targets: dict[int, np.ndarray]
    center: tuple[int, int, int]
    subject: str


@dataclass
class PatchDataset:
    """Ordered patch index over a prepared cohort (subject, then z, y, x)."""

    cohort: PreparedCohort
    targets: list[int]
    centers: np.ndarray                   # (n, 4) int: subject index, x, y, z
    input_size: int = INPUT_SIZE
    provenance: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.centers)

    @property
    def channels(self) -> int:
        return self.cohort.manifest.channels

    def target_size(self, platform: int) -> int:
        return target_size(self.cohort.scale(platform), self.input_size)

    def subject_of(self, index: int) -> str:
        return self.cohort.manifest.subjects[int(self.centers[index, 0])]

    def _cut(self, subject: int, platform: int, center) -> np.ndarray:
        size = self.target_size(platform) if platform else self.input_size
        s = self.cohort.scale(platform)
        lo = [s * c + self.cohort.pads[platform] - size // 2 for c in center]
        v = self.cohort.padded[(subject, platform)]
        return v[:, lo[0]:lo[0] + size, lo[1]:lo[1] + size, lo[2]:lo[2] + size]

    def __getitem__(self, index: int) -> PatchPair:
        j, *c = (int(v) for v in self.centers[index])
        return PatchPair(
            x=self._cut(j, 0, c).copy(),
            targets={p: self._cut(j, p, c).copy() for p in self.targets},
            center=tuple(c),
            subject=self.cohort.manifest.subjects[j],
        )

    def batch(self, indices) -> tuple[np.ndarray, dict[int, np.ndarray]]:
        """Stack patches for ``indices`` along a leading batch axis."""
        rows = self.centers[np.asarray(indices, dtype=np.int64)]
        xs = np.stack([self._cut(r[0], 0, r[1:]) for r in rows])
        ys = {p: np.stack([self._cut(r[0], p, r[1:]) for r in rows]) for p in self.targets}
        return xs, ys

    def save_cache(self, path) -> None:
        """Write the patch index as an ``MSPD`` file (little-endian).

        Layout: ``"MSPD" u32 version=1 u32 n u32 provenance_len
        provenance_json  u32 centers[n*4]``.
        """
        blob = json.dumps(self.provenance, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(CACHE_MAGIC + struct.pack("<3I", 1, len(self), len(blob)))
            fh.write(blob)
            fh.write(self.centers.astype("<u4").tobytes())

    @classmethod
    def from_cache(cls, cohort: PreparedCohort, path) -> "PatchDataset":
        with open(path, "rb") as fh:
            head = fh.read(16)
            if len(head) < 16 or head[:4] != CACHE_MAGIC:
                raise FormatError(f"{path}: not a patch cache")
            version, n, plen = struct.unpack("<3I", head[4:])
            if version != 1:
                raise FormatError(f"{path}: unsupported version {version}")
            prov = json.loads(fh.read(plen))
            raw = fh.read(16 * n)
        if len(raw) != 16 * n:
            raise FormatError(f"{path}: truncated patch cache")
        if prov.get("manifest_sha256") != _manifest_hash(cohort.manifest):
            raise FormatError(f"{path}: cache was built from a different manifest")
        centers = np.frombuffer(raw, dtype="<u4").reshape(n, 4).astype(np.int64)
        return cls(cohort, list(prov["targets"]), centers, int(prov["input_size"]), prov)


def _manifest_hash(m: CohortManifest) -> str:
    return hashlib.sha256(json.dumps(m.to_json(), sort_keys=True).encode()).hexdigest()


def extract_patches(cohort: PreparedCohort, target_platforms=None, input_size: int = INPUT_SIZE) -> PatchDataset:
    """One patch tuple per masked input-platform voxel."""
    n_plat = cohort.n_platforms
    targets = list(range(1, n_plat)) if target_platforms is None else \
        [cohort.manifest.platform_index(t) for t in target_platforms]
    if any(t == 0 for t in targets):
        raise ValueError("platform 0 is the input, not a target")
    if input_size % 2 == 0:
        raise ValueError("patch extents must be odd")
    rows = []
    for j, mask in enumerate(cohort.masks):
        # (subject, z, y, x) ordering of centres
        zyx = np.argwhere(mask.transpose(2, 1, 0))
        if len(zyx):
            rows.append(np.column_stack([np.full(len(zyx), j), zyx[:, 2], zyx[:, 1], zyx[:, 0]]))
    if not rows:
        raise ValueError("mask is empty: no patches to extract")
    centers = np.concatenate(rows).astype(np.int64)
    mask_hash = hashlib.sha256(b"".join(np.packbits(m).tobytes() for m in cohort.masks)).hexdigest()
    prov = {
        "manifest_sha256": _manifest_hash(cohort.manifest),
        "mask_sha256": mask_hash,
        "targets": targets,
        "input_size": input_size,
    }
    return PatchDataset(cohort, targets, centers, input_size, prov)


@dataclass
class SplitIndices:
    train: np.ndarray
    test: np.ndarray
    seed: int
    mode: str = "patch"


def round_half_up(x: float) -> int:
    return int(np.floor(x + 0.5))


def split(dataset, fraction: float = 0.9, seed: int = 0, mode: str = "patch", holdout_subjects=None) -> SplitIndices:
    """Partition patch indices into train and test.

    ``mode="patch"`` draws a seeded permutation and sends the first
    ``round_half_up(fraction * n)`` indices to train. ``mode="subject"`` puts
    all patches of ``holdout_subjects`` (default: the last subject) in test.
    """
    n = dataset if isinstance(dataset, (int, np.integer)) else len(dataset)
    if n < 2:
        raise ValueError("need at least 2 patches to split")
    if not 0.0 < fraction < 1.0:
        raise ValueError(f"fraction must lie in (0, 1), got {fraction}")
    if mode == "patch":
        perm = rng_for(seed, STREAM_SPLIT).permutation(n)
        n_train = round_half_up(fraction * n)
        return SplitIndices(np.sort(perm[:n_train]), np.sort(perm[n_train:]), seed, mode)
    if mode == "subject":
        subjects = dataset.cohort.manifest.subjects
        held = holdout_subjects or [subjects[-1]]
        held_idx = {subjects.index(s) if isinstance(s, str) else int(s) for s in held}
        is_test = np.isin(dataset.centers[:, 0], sorted(held_idx))
        return SplitIndices(np.flatnonzero(~is_test), np.flatnonzero(is_test), seed, mode)
    raise ValueError(f"unknown split mode {mode!r}")


def batch_indices(indices, batch_size: int = 12, shuffle_seed: int = 0, epoch: int = 0) -> list[np.ndarray]:
    """Shuffle ``indices`` per (seed, epoch) and cut into batches; the short tail is kept."""
    idx = np.asarray(indices, dtype=np.int64)
    if len(idx) == 0:
        raise ValueError("no indices to batch")
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    order = idx[rng_for(shuffle_seed, STREAM_SHUFFLE, epoch).permutation(len(idx))]
    return [order[i:i + batch_size] for i in range(0, len(order), batch_size)]


def batches(dataset: PatchDataset, indices, batch_size: int = 12, shuffle_seed: int = 0, epoch: int = 0):
    """Yield ``(indices, x, targets)`` minibatches for one epoch."""
    for chunk in batch_indices(indices, batch_size, shuffle_seed, epoch):
        x, ys = dataset.batch(chunk)
        yield chunk, x, ys


def resample_to_target(x: np.ndarray, scale: int) -> np.ndarray:
    """Map input patches onto a target grid (identity predictor).

    For 2x targets the 11^3 input is linearly interpolated at half-voxel
    positions so that target voxel ``j`` sits at input ``(j - 9) / 2 + 5``.
    """
    if scale == 1:
        return x
    size_in = x.shape[-1]
    size_out = target_size(scale, size_in)
    pos = (np.arange(size_out) - size_out // 2) / 2.0 + size_in // 2
    i0 = np.floor(pos).astype(int)
    i1 = np.minimum(i0 + 1, size_in - 1)
    frac = pos - i0
    out = np.asarray(x, np.float64)
    for axis in (-3, -2, -1):
        shape = [1] * out.ndim
        shape[axis] = -1
        f = frac.reshape(shape)
        out = np.take(out, i0, axis=axis) * (1 - f) + np.take(out, i1, axis=axis) * f
    return out.astype(x.dtype)
