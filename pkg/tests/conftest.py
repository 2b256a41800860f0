import numpy as np
import pytest

from mspharm.sh import compute_stats
from mspharm.synth import CohortConfig, generate_cohort
from mspharm.volume import Cell, CohortManifest, Platform, Volume, write_mask, write_volume


def build_cohort(root, dims=(6, 6, 6), channels=2, scales=(1, 1, 2), n_subjects=1, masks=None, seed=0):
    """Small hand-made cohort: random volumes, given (or full) masks, manifest saved to ``root``."""
    rng = np.random.default_rng(seed)
    subjects = [f"s{j}" for j in range(n_subjects)]
    platforms = [Platform(f"p{i}", s) for i, s in enumerate(scales)]
    cells, stats = [], {}
    pooled = {p.name: ([], []) for p in platforms}
    for j, sid in enumerate(subjects):
        base_mask = np.ones(dims, bool) if masks is None else np.asarray(masks[j], bool)
        for p in platforms:
            pdims = tuple(d * p.scale for d in dims)
            data = rng.normal(size=pdims + (channels,)).astype(np.float32)
            mask = base_mask if p.scale == 1 else base_mask.repeat(2, 0).repeat(2, 1).repeat(2, 2)
            write_volume(Volume(data), root / f"{sid}_{p.name}.mspv")
            write_mask(mask, root / f"{sid}_{p.name}.mspm")
            cells.append(Cell(sid, p.name, f"{sid}_{p.name}.mspv", f"{sid}_{p.name}.mspm", p.name))
            pooled[p.name][0].append(data)
            pooled[p.name][1].append(np.ones(pdims, bool))
    for name, (vols, ms) in pooled.items():
        stats[name] = compute_stats(vols, ms)
    m = CohortManifest(root, tuple(dims), channels, subjects, platforms, cells, stats)
    m.save()
    return m


@pytest.fixture(scope="session")
def default_cohort(tmp_path_factory):
    """The default synthetic cohort (4 subjects, 24^3, 6 channels, 4 platforms)."""
    out = tmp_path_factory.mktemp("cohort")
    return generate_cohort(CohortConfig(), out)
