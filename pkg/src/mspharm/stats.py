"""Patch-level evaluation, report tables and paired significance tests.

Errors are MSEs on normalized SH coefficients, one per held-out patch. A
report row holds n, mean and population std of those errors. Models are
compared per target with the Wilcoxon signed-rank test (exact for small n,
normal approximation otherwise) and a Bonferroni correction.
"""

from __future__ import annotations

import csv
import hashlib
import io
import itertools
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .tensor import ShapeError, Tensor

EXACT_MAX_N = 20
CSV_FIELDS = ("patch_index", "subject", "target", "mse")


def _raw(x) -> np.ndarray:
    return np.asarray(x.data if isinstance(x, Tensor) else x)


def patch_mse(pred, target) -> float:
    """Mean squared error over every channel and voxel, accumulated in float64."""
    p, t = _raw(pred), _raw(target)
    if p.shape != t.shape:
        raise ShapeError(f"patch_mse: shape mismatch {p.shape} vs {t.shape}")
    d = p.astype(np.float64) - t.astype(np.float64)
    return float(np.mean(d * d))


@dataclass(frozen=True)
class PatchError:
    patch_index: int
    subject: str
    target: str
    mse: float


@dataclass
class ReportRow:
    model: str
    target: str
    n: int
    mean: float
    std: float

    def cell(self, scale: float = 1000.0, decimals: int = 0) -> str:
        return format_cell(self.mean, self.std, scale, decimals)


def format_cell(mean: float, std: float, scale: float = 1000.0, decimals: int = 0) -> str:
    """``"74 (±12)"`` style rendering of a scaled mean and std."""
    return f"{mean * scale:.{decimals}f} (±{std * scale:.{decimals}f})"


def summarize(values) -> tuple[int, float, float]:
    """Count, mean and population std with a fixed summation order."""
    v = [float(x) for x in values]
    if not v:
        raise ValueError("cannot summarize an empty error list")
    n = len(v)
    mean = math.fsum(v) / n
    var = math.fsum((x - mean) ** 2 for x in v) / n
    return n, mean, math.sqrt(var)


def report_row(model_name: str, target: str, errors) -> ReportRow:
    n, mean, std = summarize(e.mse if isinstance(e, PatchError) else e for e in errors)
    return ReportRow(model_name, target, n, mean, std)


def evaluate_model(model, dataset, test_indices, target: int | None = None, model_name: str = "model",
                   target_name: str | None = None, batch_size: int = 12):
    """Per-patch errors of ``model.predict`` on the test indices plus the summary row."""
    target = model.target if target is None else int(target)
    if getattr(model, "target", target) != target:
        raise ValueError(f"model predicts platform {model.target}, asked to evaluate {target}")
    if target not in dataset.targets:
        raise KeyError(f"dataset has no targets for platform {target}")
    indices = np.asarray(test_indices, dtype=np.int64)
    if len(indices) == 0:
        raise ValueError("empty test set")
    target_name = target_name or str(target)
    errors = []
    for start in range(0, len(indices), batch_size):
        idx = indices[start:start + batch_size]
        x, targets = dataset.batch(idx)
        pred = model.predict(Tensor(x)).data
        if pred.shape != targets[target].shape:
            raise ShapeError(f"prediction {pred.shape} does not match target patches {targets[target].shape}")
        for j, i in enumerate(idx):
            errors.append(PatchError(int(i), dataset.subject_of(int(i)), target_name,
                                     patch_mse(pred[j], targets[target][j])))
    return errors, report_row(model_name, target_name, errors)


def errors_to_csv(errors) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_FIELDS)
    for e in errors:
        w.writerow([e.patch_index, e.subject, e.target, repr(float(e.mse))])
    return buf.getvalue()


def read_errors_csv(path) -> list[PatchError]:
    with open(path, newline="") as fh:
        return [PatchError(int(r["patch_index"]), r["subject"], r["target"], float(r["mse"]))
                for r in csv.DictReader(fh)]


# ---------------------------------------------------------------------------
# paired tests


@dataclass
class PairedTestResult:
    w: float
    n: int
    p: float
    p_corrected: float
    m: int
    exact: bool
    degenerate: bool = False
    model_a: str = ""
    model_b: str = ""
    target: str = ""


def bonferroni(p: float, m: int) -> float:
    if m < 1:
        raise ValueError("number of comparisons must be >= 1")
    if not 0.0 <= p <= 1.0:
        raise ValueError(f"p-value {p} outside [0, 1]")
    return min(1.0, m * p)


def _doubled_midranks(absdiff: np.ndarray) -> tuple[np.ndarray, list[int]]:
    """Twice the midranks of ``absdiff`` (integers) and the tie-group sizes."""
    order = np.argsort(absdiff, kind="stable")
    ranks = np.empty(len(absdiff), dtype=np.int64)
    ties = []
    i = 0
    while i < len(order):
        j = i
        while j + 1 < len(order) and absdiff[order[j + 1]] == absdiff[order[i]]:
            j += 1
        # ranks i+1 .. j+1 share their average; doubled that is i + j + 2
        ranks[order[i:j + 1]] = i + j + 2
        ties.append(j - i + 1)
        i = j + 1
    return ranks, ties


def _exact_p(ranks2: np.ndarray, w2: int) -> float:
    """Fraction of the 2^n sign assignments whose min(W+, W-) is at most the observed one."""
    total = int(ranks2.sum())
    counts = {0: 1}
    for r in ranks2.tolist():
        nxt = dict(counts)
        for s, c in counts.items():
            nxt[s + r] = nxt.get(s + r, 0) + c
        counts = nxt
    hits = sum(c for s, c in counts.items() if min(s, total - s) <= w2)
    return min(1.0, hits / 2 ** len(ranks2))


def _normal_p(w: float, n: int, ties: list[int]) -> float:
    mean = n * (n + 1) / 4.0
    var = n * (n + 1) * (2 * n + 1) / 24.0 - sum(t ** 3 - t for t in ties) / 48.0
    if var <= 0:
        return 1.0
    dev = abs(w - mean) - 0.5
    if dev <= 0:
        return 1.0
    return min(1.0, math.erfc(dev / math.sqrt(var) / math.sqrt(2.0)))


def wilcoxon_signed_rank(a, b, m: int = 1, method: str = "auto", exact_max_n: int = EXACT_MAX_N) -> PairedTestResult:
    """Two-sided signed-rank test of paired samples ``a`` and ``b``.

    Zero differences are dropped and tied magnitudes share midranks.
    ``method`` is ``"auto"`` (exact up to ``exact_max_n`` pairs), ``"exact"``
    or ``"approx"``.
    """
    x = np.asarray([e.mse if isinstance(e, PatchError) else e for e in a], dtype=np.float64)
    y = np.asarray([e.mse if isinstance(e, PatchError) else e for e in b], dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError(f"paired samples must be equal-length 1-D, got {x.shape} and {y.shape}")
    if method not in ("auto", "exact", "approx"):
        raise ValueError(f"unknown method {method!r}")
    d = x - y
    d = d[d != 0]
    n = len(d)
    if n == 0:
        return PairedTestResult(0.0, 0, 1.0, 1.0, m, True, degenerate=True)
    ranks2, ties = _doubled_midranks(np.abs(d))
    wplus2 = int(ranks2[d > 0].sum())
    wminus2 = int(ranks2.sum()) - wplus2
    w2 = min(wplus2, wminus2)
    exact = method == "exact" or (method == "auto" and n <= exact_max_n)
    p = _exact_p(ranks2, w2) if exact else _normal_p(w2 / 2.0, n, ties)
    return PairedTestResult(w2 / 2.0, n, p, bonferroni(p, m), m, exact)


def enumerate_signs_p(d) -> float:
    """Brute-force reference: enumerate every sign pattern of the nonzero differences."""
    d = np.asarray(d, dtype=np.float64)
    d = d[d != 0]
    if len(d) == 0:
        return 1.0
    ranks2, _ = _doubled_midranks(np.abs(d))
    total = int(ranks2.sum())
    wp = int(ranks2[d > 0].sum())
    observed = min(wp, total - wp)
    hits = 0
    for signs in itertools.product((0, 1), repeat=len(d)):
        s = int(np.dot(signs, ranks2))
        hits += min(s, total - s) <= observed
    return hits / 2 ** len(d)


# ---------------------------------------------------------------------------
# reports


@dataclass
class EvalReport:
    rows: list[ReportRow] = field(default_factory=list)
    tests: list[PairedTestResult] = field(default_factory=list)
    metadata: dict = field(default_factory=dict)
    scale: float = 1000.0
    decimals: int = 0

    def row(self, model: str, target: str) -> ReportRow:
        for r in self.rows:
            if r.model == model and r.target == target:
                return r
        raise KeyError((model, target))

    def models(self) -> list[str]:
        return list(dict.fromkeys(r.model for r in self.rows))

    def targets(self) -> list[str]:
        return list(dict.fromkeys(r.target for r in self.rows))

    def to_json(self) -> str:
        obj = {
            "metadata": self.metadata,
            "display": {"scale": self.scale, "decimals": self.decimals},
            "rows": [asdict(r) for r in self.rows],
            "tests": [asdict(t) for t in self.tests],
        }
        return json.dumps(obj, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvalReport":
        obj = json.loads(text)
        return cls([ReportRow(**r) for r in obj["rows"]], [PairedTestResult(**t) for t in obj["tests"]],
                   obj["metadata"], obj["display"]["scale"], obj["display"]["decimals"])

    def table(self) -> str:
        """Plain-text grid: models as rows, target platforms as columns."""
        targets, models = self.targets(), self.models()
        header = ["model"] + targets
        body = []
        for mname in models:
            line = [mname]
            for t in targets:
                try:
                    line.append(self.row(mname, t).cell(self.scale, self.decimals))
                except KeyError:
                    line.append("-")
            body.append(line)
        widths = [max(len(r[i]) for r in [header] + body) for i in range(len(header))]
        fmt = lambda r: "  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip()
        lines = [f"patch MSE x{self.scale:g}, mean (±std)", fmt(header), fmt(["-" * w for w in widths])]
        lines += [fmt(r) for r in body]
        if self.tests:
            lines.append("")
            lines.append("Wilcoxon signed-rank (Bonferroni m shown)")
            for t in self.tests:
                flag = " degenerate" if t.degenerate else ""
                kind = "exact" if t.exact else "normal"
                lines.append(f"{t.target}: {t.model_a} vs {t.model_b}  W={t.w:g} n={t.n} p={t.p:.3g} "
                             f"p_bonf={t.p_corrected:.3g} (m={t.m}, {kind}){flag}")
        return "\n".join(lines) + "\n"


def compare_errors(errors: dict, m: int | None = None) -> list[PairedTestResult]:
    """Pairwise tests for every model pair within each target.

    ``errors`` maps ``(model, target)`` to that model's per-patch error list,
    in matching patch order across models.
    """
    targets = list(dict.fromkeys(t for _, t in errors))
    m = m if m is not None else len(targets)
    results = []
    for t in targets:
        names = [mod for mod, tt in errors if tt == t]
        for a, b in itertools.combinations(names, 2):
            ea, eb = errors[(a, t)], errors[(b, t)]
            if [e.patch_index for e in ea] != [e.patch_index for e in eb]:
                raise ValueError(f"{a} and {b} were evaluated on different patches for {t}")
            r = wilcoxon_signed_rank(ea, eb, m=m)
            r.model_a, r.model_b, r.target = a, b, t
            results.append(r)
    return results


def sha256_bytes(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()
