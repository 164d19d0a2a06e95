"""Command-line front end.

Configuration precedence is flag > file > default: ``--set key=value``
overrides win over the ``--config`` JSON file, which wins over built-in
defaults. ``--seed`` and ``--threads`` are shorthands with the same rank as
``--set``.
"""

from __future__ import annotations

import argparse
import glob
import hashlib
import json
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import Config, ConfigError, load_config
from .core import CloudFormatError, load_cloud, save_annotations, scene_index_from_name

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_GATE = 0, 2, 3, 4
THREADS_ENV = "REEFBENCH_THREADS"


class DataError(RuntimeError):
    pass


class GateFailure(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# Run manifest


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with path.open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(
    path: Path,
    command: str,
    cfg: Config,
    seed: int | None,
    inputs: dict,
    outputs: Sequence[Path],
    started: float,
    threads: int,
    extra: dict | None = None,
) -> dict:
    """Atomically write the run record.

    Everything outside the ``runtime`` block depends only on the command,
    config, seed and inputs; output files are listed with their digests so
    two manifests can be diffed to prove byte-identical results.
    """
    base = path.parent
    files = {}
    for p in sorted(set(outputs)):
        rel = os.path.relpath(p, base)
        files[rel] = _sha256(p)
    manifest = {
        "command": command,
        "tool_version": __version__,
        "seed": seed,
        "config": cfg.to_dict(),
        "inputs": inputs,
        "outputs": files,
        **(extra or {}),
        "runtime": {
            "started": time.strftime("%Y-%m-%dT%H:%M:%S", time.gmtime(started)),
            "duration_s": round(time.time() - started, 3),
            "threads": threads,
        },
    }
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=False) + "\n")
    os.replace(tmp, path)
    return manifest


# ---------------------------------------------------------------------------
# Shared plumbing


def _parse_overrides(items: Sequence[str]) -> dict[str, str]:
    out = {}
    for item in items or []:
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        out[key.strip()] = value.strip()
    return out


def _resolve(args) -> Config:
    overrides = _parse_overrides(args.set)
    if getattr(args, "seed", None) is not None and "detector.seed" not in overrides:
        overrides["detector.seed"] = str(args.seed)
    return load_config(args.config, overrides)


def _threads(args) -> int:
    if args.threads is not None:
        n = args.threads
    else:
        raw = os.environ.get(THREADS_ENV, "1")
        try:
            n = int(raw)
        except ValueError:
            raise ConfigError(f"{THREADS_ENV}: expected an integer, got {raw!r}") from None
    if n < 1:
        raise ConfigError("--threads must be >= 1")
    return n


def _scene_paths(pattern: str) -> list[Path]:
    p = Path(pattern)
    if p.is_dir():
        paths = sorted(p.glob("scene_*.ply"))
    else:
        paths = sorted(Path(s) for s in glob.glob(pattern))
    paths = [q for q in paths if q.suffix.lower() in (".ply", ".xyz")]
    if not paths:
        raise DataError(f"no scenes matched {pattern!r}")
    return paths


def _detection_name(path: Path) -> str:
    idx = scene_index_from_name(path.name)
    return f"scene_{idx:04d}.json" if idx is not None else path.stem + ".json"


def _map(fn, items, threads: int) -> list:
    if threads > 1 and len(items) > 1:
        with ThreadPoolExecutor(threads) as pool:
            return list(pool.map(fn, items))  # order preserved
    return [fn(x) for x in items]


# ---------------------------------------------------------------------------
# Commands


def run_simulate(cfg: Config, out_dir: Path, n_scenes: int, seed: int, threads: int) -> dict:
    from .simulate import generate_dataset

    if n_scenes < 0:
        raise ConfigError("--scenes must be >= 0")
    return generate_dataset(n_scenes, cfg, seed, out_dir, threads)


def _dataset_outputs(out_dir: Path, manifest: dict) -> list[Path]:
    outs = [out_dir / "manifest.json"]
    for e in manifest["scenes"]:
        outs += [out_dir / e["cloud"], out_dir / e["annotations"]]
    return outs


def cmd_simulate(args) -> int:
    started = time.time()
    cfg, threads = _resolve(args), _threads(args)
    out = Path(args.out)
    manifest = run_simulate(cfg, out, args.scenes, args.seed, threads)
    write_manifest(
        out / "run_manifest.json", "simulate", cfg, args.seed, {"scenes": args.scenes},
        _dataset_outputs(out, manifest), started, threads,
    )
    print(f"wrote {manifest['n_scenes']} scenes ({manifest['total_objects']} objects) to {out}")
    return EXIT_OK


def run_templates(cfg: Config, out_dir: Path | None):
    from .templates import build_library, save_library

    lib = build_library(cfg)
    if out_dir is not None:
        save_library(lib, out_dir)
    return lib


def cmd_templates(args) -> int:
    started = time.time()
    cfg = _resolve(args)
    out = Path(args.out)
    lib = run_templates(cfg, out)
    outs = [out / "library.json"] + sorted(out.glob("template_*.ply"))
    write_manifest(out / "run_manifest.json", "templates", cfg, None, {}, outs, started, 1)
    print(f"wrote {len(lib)} templates to {out} (fingerprint {lib.fingerprint})")
    return EXIT_OK


def run_detect(cfg: Config, scenes: Sequence[Path], library, out_dir: Path, threads: int) -> list[Path]:
    from .detect import detect_scene

    out_dir.mkdir(parents=True, exist_ok=True)

    def one(path: Path) -> Path:
        dets = detect_scene(load_cloud(path), library, cfg)
        target = out_dir / _detection_name(path)
        save_annotations(dets, target)
        return target

    return _map(one, list(scenes), threads)


def cmd_detect(args) -> int:
    from .templates import load_library

    started = time.time()
    cfg, threads = _resolve(args), _threads(args)
    scenes = _scene_paths(args.scenes)
    if args.library:
        lib_dir = Path(args.library)
        if not (lib_dir / "library.json").exists():
            raise DataError(f"{lib_dir}: no library.json (run the templates command first)")
        library = load_library(lib_dir)
    else:
        library = run_templates(cfg, None)
    out = Path(args.out)
    outs = run_detect(cfg, scenes, library, out, threads)
    write_manifest(
        out / "run_manifest.json", "detect", cfg, cfg.detector.seed,
        {"scenes": [str(p) for p in scenes], "library": args.library or "built in-process"},
        outs, started, threads,
    )
    print(f"wrote detections for {len(outs)} scenes to {out}")
    return EXIT_OK


def run_evaluate(cfg: Config, pred_dir: Path, gt_dir: Path, report_path: Path | None):
    from .evaluate import evaluate_dataset

    ec = cfg.evaluator
    thresholds = ec.thresholds if ec.multi_threshold else [ec.dist_threshold]
    return evaluate_dataset(pred_dir, gt_dir, thresholds, ec.distance_3d, ec.multi_threshold, report_path)


def _gate(cfg: Config, report) -> None:
    gate = cfg.evaluator.map_gate
    if gate > 0 and not report.mAP >= gate:
        raise GateFailure(f"mAP {report.mAP:.4f} below gate {gate:g}")


def cmd_evaluate(args) -> int:
    cfg = _resolve(args)
    report = run_evaluate(cfg, Path(args.predictions), Path(args.ground_truth), Path(args.report) if args.report else None)
    print(report.table())
    _gate(cfg, report)
    return EXIT_OK


def cmd_noise_char(args) -> int:
    from .noisechar import characterize, write_histogram_csv

    cfg = _resolve(args)
    cloud = load_cloud(args.cloud)
    report = characterize(cloud, cfg.noise, cfg.detector.seed)
    print(report.summary())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        write_histogram_csv(report.raw_hist, out / "histogram_raw.csv")
        write_histogram_csv(report.trimmed_hist, out / "histogram_trimmed.csv")
        stats = {"raw": report.raw.to_dict(), "trimmed": report.trimmed.to_dict()}
        (out / "noise_stats.json").write_text(json.dumps(stats, indent=1) + "\n")
    return EXIT_OK


def run_end_to_end(cfg: Config, out: Path, n_scenes: int, seed: int, threads: int) -> tuple[object, dict]:
    started = time.time()
    data_dir, lib_dir, det_dir = out / "scenes", out / "templates", out / "detections"
    manifest = run_simulate(cfg, data_dir, n_scenes, seed, threads)
    library = run_templates(cfg, lib_dir)
    scenes = [data_dir / e["cloud"] for e in manifest["scenes"]]
    det_paths = run_detect(cfg, scenes, library, det_dir, threads)
    report = run_evaluate(cfg, det_dir, data_dir, out / "report.json")
    outs = (
        _dataset_outputs(data_dir, manifest)
        + [lib_dir / "library.json"] + sorted(lib_dir.glob("template_*.ply"))
        + det_paths + [out / "report.json", out / "report.txt"]
    )
    run = write_manifest(
        out / "run_manifest.json", "end-to-end", cfg, seed, {"scenes": n_scenes}, outs, started, threads,
        {"mAP": report.mAP},
    )
    return report, run


def cmd_end_to_end(args) -> int:
    cfg, threads = _resolve(args), _threads(args)
    out = Path(args.out or f"runs/end_to_end_seed{args.seed}")
    report, _ = run_end_to_end(cfg, out, args.scenes, args.seed, threads)
    print(report.table())
    print(f"outputs in {out}")
    _gate(cfg, report)
    return EXIT_OK


# ---------------------------------------------------------------------------
# Parser


def _common(p: argparse.ArgumentParser, seed_default: int | None = None, threads: bool = True) -> None:
    p.add_argument("--config", metavar="FILE", help="JSON config file, sectioned per module")
    p.add_argument(
        "--set", metavar="KEY=VALUE", action="append", default=[],
        help="override one config key, e.g. --set scanner.noise_sigma=0 (repeatable; beats --config)",
    )
    p.add_argument("--seed", type=int, default=seed_default, help="master seed (default: %(default)s)")
    if threads:
        p.add_argument(
            "--threads", type=int, default=None,
            help=f"worker threads; results never depend on it (default: ${THREADS_ENV} or 1)",
        )


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="reefbench",
        description="Simulated MBES surveys and training-free reef-structure detection.",
        epilog=(
            "Config precedence: --set / --seed flags > --config file > built-in defaults. "
            "Exit codes: 0 ok, 2 usage or config error, 3 data error, 4 mAP gate failure."
        ),
    )
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic dataset")
    _common(p, seed_default=0)
    p.add_argument("-n", "--scenes", type=int, default=100, help="number of scenes (default: %(default)s)")
    p.add_argument("-o", "--out", required=True, help="output directory")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("templates", help="build the template library")
    _common(p, threads=False)
    p.add_argument("-o", "--out", required=True, help="library directory")
    p.set_defaults(func=cmd_templates)

    p = sub.add_parser("detect", help="detect objects in scene clouds")
    _common(p)
    p.add_argument("scenes", help="scene directory or glob of .ply/.xyz files")
    p.add_argument("--library", help="library directory (default: build from config)")
    p.add_argument("-o", "--out", required=True, help="directory for scene_####.json detections")
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("evaluate", help="score detections against ground truth")
    _common(p, threads=False)
    p.add_argument("predictions", help="directory of detection files")
    p.add_argument("ground_truth", help="directory of annotation files")
    p.add_argument("--report", help="write the report as JSON (plus a .txt table)")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("noise-char", help="characterize noise on a planar reference cloud")
    _common(p, threads=False)
    p.add_argument("cloud", help=".ply or .xyz cloud of a near-planar patch")
    p.add_argument("-o", "--out", help="directory for histogram CSVs and stats JSON")
    p.set_defaults(func=cmd_noise_char)

    p = sub.add_parser("end-to-end", help="simulate, build templates, detect and evaluate")
    _common(p, seed_default=0)
    p.add_argument("-n", "--scenes", type=int, default=20, help="number of scenes (default: %(default)s)")
    p.add_argument("-o", "--out", help="run directory (default: runs/end_to_end_seed<SEED>)")
    p.set_defaults(func=cmd_end_to_end)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except GateFailure as exc:
        print(f"gate failed: {exc}", file=sys.stderr)
        return EXIT_GATE
    except (DataError, CloudFormatError, FileNotFoundError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
