"""``msp`` command line: gen-data, train, evaluate, compare, predict.

Exit codes: 0 ok, 2 bad configuration, 3 I/O or file format error,
4 training diverged, 5 model/data shape mismatch. Progress goes to stderr;
stdout only carries the report table.
"""

from __future__ import annotations

import argparse
import copy
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import models as M
from .patches import extract_patches, prepare_cohort, split
from .sh import denormalize_channels
from .stats import EvalReport, compare_errors, errors_to_csv, evaluate_model, sha256_bytes
from .synth import CohortConfig, ConfigError, generate_cohort
from .tensor import ShapeError, Tensor
from .training import DivergenceError, TrainConfig, history_to_csv, train_model
from .volume import FormatError, ManifestError, Volume, load_manifest, read_volume_header, write_volume

log = logging.getLogger("mspharm")

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_DIVERGED = 4
EXIT_SHAPE = 5

SUBCOMMANDS = ("gen-data", "train", "evaluate", "compare", "predict")
MODES = ("msp", "cpm", "hned")

RUN_DEFAULTS = {
    "cohort": None,
    "seed": 0,
    "mode": "single:diqt",
    "targets": None,
    "split": {"fraction": 0.9, "seed": 0, "mode": "patch", "holdout_subjects": None},
    "width": None,
    "pretrain_arch": "diqt",
    "multitask": {"width": 32, "depth": None},
    "train": {},
    "joint": {},
    "models": {},
    "eval_batch_size": 12,
    "subjects": None,
}


class CliError(Exception):
    def __init__(self, code: int, msg: str):
        super().__init__(msg)
        self.code = code


def read_json_file(path) -> dict:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_IO, f"cannot read config {path}: {exc}") from exc
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}: line {exc.lineno} column {exc.colno}: {exc.msg}") from exc
    if not isinstance(obj, dict):
        raise CliError(EXIT_CONFIG, f"{path}: top level must be an object")
    return obj


def _merge(defaults: dict, given: dict, where: str) -> dict:
    unknown = sorted(set(given) - set(defaults))
    if unknown:
        raise CliError(EXIT_CONFIG, f"unknown field(s) in {where}: {unknown}")
    out = copy.deepcopy(defaults)
    for k, v in given.items():
        out[k] = _merge(defaults[k], v, f"{where}.{k}") if isinstance(defaults[k], dict) and defaults[k] else v
    return out


def _train_config(overrides: dict, seed: int, epochs, where: str) -> TrainConfig:
    obj = {"seed": seed, **overrides}
    if epochs is not None:
        obj["epochs"] = epochs
    try:
        return TrainConfig.from_json(obj)
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"{where}: {exc}") from exc


def resolve_run_config(raw: dict, args) -> dict:
    """Fill defaults, apply command-line overrides and validate."""
    cfg = _merge(RUN_DEFAULTS, raw, "config")
    if args.seed is not None:
        cfg["seed"] = args.seed
    if args.mode is not None:
        cfg["mode"] = args.mode
    if args.target is not None:
        cfg["targets"] = [args.target]
    mode = cfg["mode"]
    if not (mode in MODES or (mode.startswith("single:") and mode[7:] in M.ARCHS)):
        raise CliError(EXIT_CONFIG, f"mode: expected single:<{'|'.join(M.ARCHS)}> or one of {MODES}, got {mode!r}")
    if cfg["pretrain_arch"] not in M.ARCHS:
        raise CliError(EXIT_CONFIG, f"pretrain_arch: unknown architecture {cfg['pretrain_arch']!r}")
    seed = int(cfg["seed"])
    cfg["train"] = _train_config(cfg["train"], seed, args.epochs, "train").to_json()
    cfg["joint"] = _train_config(cfg["joint"], seed, args.epochs, "joint").to_json()
    if cfg["cohort"] is None:
        raise CliError(EXIT_CONFIG, "config field 'cohort' (cohort directory or manifest path) is required")
    if not isinstance(cfg["models"], dict):
        raise CliError(EXIT_CONFIG, "models: expected an object mapping names to checkpoint path(s)")
    return cfg


def write_resolved(cfg: dict, out: Path, name: str = "run_config.json") -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps(cfg, indent=2, sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# data


def _manifest_path(p) -> Path:
    p = Path(p)
    return p / "manifest.json" if p.is_dir() else p


def load_data(cfg: dict):
    manifest = load_manifest(_manifest_path(cfg["cohort"]))
    sp_cfg = cfg["split"]
    stats_subjects = None
    if sp_cfg["mode"] == "subject":
        held = sp_cfg["holdout_subjects"] or [manifest.subjects[-1]]
        stats_subjects = [s for s in manifest.subjects if s not in held]
    ds = extract_patches(prepare_cohort(manifest, stats_subjects=stats_subjects))
    try:
        sp = split(ds, sp_cfg["fraction"], sp_cfg["seed"], sp_cfg["mode"], sp_cfg["holdout_subjects"])
    except ValueError as exc:
        raise CliError(EXIT_CONFIG, f"split: {exc}") from exc
    return manifest, ds, sp


def target_indices(cfg: dict, manifest) -> list[int]:
    if not cfg["targets"]:
        return list(range(1, len(manifest.platforms)))
    out = []
    for t in cfg["targets"]:
        try:
            i = manifest.platform_index(int(t) if str(t).isdigit() else t)
        except (KeyError, ValueError, IndexError) as exc:
            raise CliError(EXIT_CONFIG, f"unknown target platform {t!r}") from exc
        if i == 0:
            raise CliError(EXIT_CONFIG, f"platform {t!r} is the input platform, not a target")
        out.append(i)
    return out


def _seed(seed: int, *path: int) -> int:
    return int(np.random.SeedSequence([int(seed), *path]).generate_state(1)[0])


def _clone(model):
    return M.checkpoint_from_bytes(M.checkpoint_bytes(model))


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out is required")
    raw = read_json_file(args.config) if args.config else {}
    try:
        cfg = CohortConfig.from_json(raw)
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{args.config or 'defaults'}: {exc}") from exc
    m = generate_cohort(cfg, args.out)
    log.info("wrote %d subjects x %d platforms to %s", len(m.subjects), len(m.platforms), args.out)
    return EXIT_OK


def _find_checkpoints(root) -> list[Path]:
    root = Path(root)
    if root.is_file():
        return [root]
    if not root.is_dir():
        raise CliError(EXIT_IO, f"no such checkpoint directory: {root}")
    return sorted(root.rglob("*.mspc"))


def _pretrained_singles(root, n_platforms: int) -> dict[int, M.SingleNet]:
    found: dict[int, tuple[Path, M.SingleNet]] = {}
    for path in _find_checkpoints(root):
        model = M.load_checkpoint(path)
        if model.kind != "single" or not 1 <= model.target < n_platforms:
            continue
        if model.target in found:
            raise CliError(EXIT_CONFIG, f"two single checkpoints for platform {model.target}: "
                                        f"{found[model.target][0]} and {path}")
        found[model.target] = (path, model)
    return {t: net for t, (_, net) in found.items()}


def cmd_train(args) -> int:
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out is required")
    cfg = resolve_run_config(read_json_file(args.config) if args.config else {}, args)
    out = Path(args.out)
    write_resolved(cfg, out)
    manifest, ds, sp = load_data(cfg)
    targets = target_indices(cfg, manifest)
    names = manifest.platform_names
    C, P, seed = manifest.channels, len(manifest.platforms), int(cfg["seed"])
    train_cfg = TrainConfig.from_json(cfg["train"])
    mode = cfg["mode"]

    if mode.startswith("single:"):
        arch = mode[7:]
        for t in targets:
            net = M.build_single(arch, C, C, sr=manifest.platforms[t].scale == 2,
                                 init_seed=_seed(seed, t), width=cfg["width"], target=t)
            log.info("training %s for %s", arch, names[t])
            train_model(net, ds, sp, train_cfg, "single", out / f"single-{arch}" / names[t], log.info)
        return EXIT_OK

    if mode == "msp":
        singles = _pretrained_singles(args.pretrained, P) if args.pretrained else {}
        pre_rows = []
        arch = cfg["pretrain_arch"]
        for t in range(1, P):
            if t in singles:
                continue
            log.info("no pretrained network for %s: pretraining %s", names[t], arch)
            net = M.build_single(arch, C, C, sr=manifest.platforms[t].scale == 2,
                                 init_seed=_seed(seed, t), width=cfg["width"], target=t)
            run = train_model(net, ds, sp, train_cfg, f"pretrain:{names[t]}",
                              out / "singles" / names[t], log.info)
            pre_rows += run.history
            singles[t] = net
        joint_cfg = TrainConfig.from_json(cfg["joint"])
        for t in targets:
            msp = M.build_msp({i: _clone(n) for i, n in singles.items()}, t,
                              connection_seed=_seed(seed, 1000 + t), n_platforms=P)
            log.info("joint training for %s", names[t])
            run_dir = out / "msp" / names[t]
            run = train_model(msp, ds, sp, joint_cfg, "joint", run_dir, log.info)
            (run_dir / "history.csv").write_text(history_to_csv(pre_rows + run.history))
        return EXIT_OK

    mt = cfg["multitask"]
    scales = [p.scale for p in manifest.platforms[1:]]
    build = M.build_cpm if mode == "cpm" else M.build_hned
    for t in targets:
        kw = {"depth": mt["depth"]} if mt["depth"] is not None else {}
        model = build(scales, P, t, channels=C, width=mt["width"], init_seed=_seed(seed, t), **kw)
        log.info("training %s for %s", mode, names[t])
        train_model(model, ds, sp, train_cfg, mode, out / mode / names[t], log.info)
    return EXIT_OK


def model_name(model) -> str:
    if model.kind == "single":
        return model.spec.arch
    return model.kind


def _collect_models(cfg: dict, args) -> list[tuple[str, Path]]:
    entries = []
    for name, paths in cfg["models"].items():
        for p in [paths] if isinstance(paths, str) else paths:
            entries.append((str(name), Path(p)))
    if args.pretrained:
        entries += [(None, p) for p in _find_checkpoints(args.pretrained)]
    if not entries:
        raise CliError(EXIT_CONFIG, "no models: give --pretrained or a 'models' mapping in the config")
    return entries


def _evaluate_all(cfg: dict, args, out: Path):
    manifest, ds, sp = load_data(cfg)
    names = manifest.platform_names
    wanted = set(target_indices(cfg, manifest))
    errors, rows, hashes = {}, [], {}
    for given, path in _collect_models(cfg, args):
        raw = path.read_bytes()
        model = M.checkpoint_from_bytes(raw)
        if model.target not in wanted:
            continue
        name, tname = given or model_name(model), names[model.target]
        if (name, tname) in errors:
            raise CliError(EXIT_CONFIG, f"two models named {name!r} for {tname}; name them in the config")
        log.info("evaluating %s on %s (%d patches)", name, tname, len(sp.test))
        errs, row = evaluate_model(model, ds, sp.test, model_name=name, target_name=tname,
                                   batch_size=cfg["eval_batch_size"])
        errors[(name, tname)] = errs
        rows.append(row)
        hashes[f"{name}/{tname}"] = sha256_bytes(raw)
    if not rows:
        raise CliError(EXIT_CONFIG, "no checkpoint predicts any requested target")
    rank = {n: k for k, n in enumerate(M.ARCHS + MODES)}

    def key(pair):
        return rank.get(pair[0], len(rank)), pair[0], names.index(pair[1])

    errors = {k: errors[k] for k in sorted(errors, key=key)}
    rows.sort(key=lambda r: key((r.model, r.target)))
    err_dir = out / "errors"
    err_dir.mkdir(parents=True, exist_ok=True)
    for (name, tname), errs in errors.items():
        (err_dir / f"{name}__{tname}.csv").write_text(errors_to_csv(errs))
    meta = {
        "dataset_sha256": ds.provenance["manifest_sha256"],
        "mask_sha256": ds.provenance["mask_sha256"],
        "checkpoint_sha256": hashes,
        "split": cfg["split"],
        "n_test": int(len(sp.test)),
    }
    return errors, rows, meta


def _write_report(report: EvalReport, out: Path, quiet: bool) -> None:
    (out / "report.json").write_text(report.to_json() + "\n")
    table = report.table()
    (out / "report.txt").write_text(table + "\n")
    if not quiet:
        sys.stdout.write(table + "\n")


def cmd_evaluate(args, paired: bool = False) -> int:
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out is required")
    cfg = resolve_run_config(read_json_file(args.config) if args.config else {}, args)
    out = Path(args.out)
    write_resolved(cfg, out)
    errors, rows, meta = _evaluate_all(cfg, args, out)
    tests = compare_errors(errors) if paired else []
    _write_report(EvalReport(rows, tests, meta), out, args.quiet)
    return EXIT_OK


def cmd_compare(args) -> int:
    return cmd_evaluate(args, paired=True)


def stitch_subject(model, ds, subject: int, batch_size: int = 12) -> tuple[np.ndarray, np.ndarray]:
    """Dense normalized prediction on the target grid (channels first) and its coverage mask.

    Each masked input voxel contributes its patch centre; for a 2x target the
    centre 2x2x2 block.
    """
    s = ds.cohort.scale(model.target)
    grid = tuple(s * d for d in ds.cohort.manifest.base_dims)
    out = np.zeros((ds.channels,) + grid, np.float32)
    filled = np.zeros(grid, bool)
    idx = np.flatnonzero(ds.centers[:, 0] == subject)
    mid = ds.target_size(model.target) // 2
    for start in range(0, len(idx), batch_size):
        chunk = idx[start:start + batch_size]
        x, _ = ds.batch(chunk)
        pred = model.predict(Tensor(x)).data
        for j, i in enumerate(chunk):
            cx, cy, cz = (s * int(v) for v in ds.centers[i, 1:])
            out[:, cx:cx + s, cy:cy + s, cz:cz + s] = pred[j, :, mid:mid + s, mid:mid + s, mid:mid + s]
            filled[cx:cx + s, cy:cy + s, cz:cz + s] = True
    return out, filled


def cmd_predict(args) -> int:
    if args.out is None:
        raise CliError(EXIT_CONFIG, "--out is required")
    cfg = resolve_run_config(read_json_file(args.config) if args.config else {}, args)
    out = Path(args.out)
    write_resolved(cfg, out)
    manifest, ds, _ = load_data(cfg)
    names = manifest.platform_names
    subjects = cfg["subjects"] or manifest.subjects
    unknown = [s for s in subjects if s not in manifest.subjects]
    if unknown:
        raise CliError(EXIT_CONFIG, f"subjects: unknown subject(s) {unknown}")
    wanted = set(target_indices(cfg, manifest))
    for given, path in _collect_models(cfg, args):
        model = M.load_checkpoint(path)
        if model.target not in wanted:
            continue
        tname = names[model.target]
        name = given or model_name(model)
        stats = ds.cohort.stats[tname]
        for sid in subjects:
            j = manifest.subjects.index(sid)
            log.info("predicting %s for %s with %s", tname, sid, name)
            dense, filled = stitch_subject(model, ds, j, cfg["eval_batch_size"])
            raw = denormalize_channels(dense.transpose(1, 2, 3, 0), stats)
            raw[~filled] = 0
            _, voxel = read_volume_header(manifest.path(manifest.cell(sid, tname).volume))
            dst = out / name / sid
            dst.mkdir(parents=True, exist_ok=True)
            write_volume(Volume(raw, voxel), dst / f"{tname}_pred.mspv")
    return EXIT_OK


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msp", description="Multi-stage harmonization toolkit")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON configuration file")
        p.add_argument("--out", help="output directory")
        p.add_argument("--seed", type=int, help="master seed override")
        p.add_argument("--quiet", action="store_true", help="only warnings and errors on stderr")
        if name != "gen-data":
            p.add_argument("--target", help="target platform name or index (default: all)")
            p.add_argument("--mode", help="single:<arch>, msp, cpm or hned")
            p.add_argument("--pretrained", help="checkpoint file or directory")
            p.add_argument("--epochs", type=int, help="override the epoch count of every phase")
    return parser


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "compare": cmd_compare,
    "predict": cmd_predict,
}


def _thread_limit() -> int | None:
    raw = os.environ.get("MSP_THREADS")
    if not raw:
        return None
    try:
        n = int(raw)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"MSP_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise CliError(EXIT_CONFIG, f"MSP_THREADS must be a positive integer, got {raw!r}")
    return n


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(stream=sys.stderr, format="%(message)s", force=True,
                        level=logging.WARNING if args.quiet else logging.INFO)
    try:
        with threadpool_limits(limits=_thread_limit()):
            return COMMANDS[args.command](args)
    except CliError as exc:
        log.error("error: %s", exc)
        return exc.code
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        return EXIT_DIVERGED
    except ShapeError as exc:
        log.error("shape mismatch: %s", exc)
        return EXIT_SHAPE
    except (FormatError, ManifestError, OSError) as exc:
        log.error("i/o error: %s", exc)
        return EXIT_IO
    except (ConfigError, ValueError, KeyError) as exc:
        log.error("configuration error: %s", exc)
        return EXIT_CONFIG


def main() -> None:
    sys.exit(run())


if __name__ == "__main__":
    main()
