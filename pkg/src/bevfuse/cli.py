"""Command-line harness: simulate, train, run, eval, ablate, dump, replay.

Every command writes ``manifest.json`` next to its outputs. The manifest holds
the resolved arguments, the full config snapshot and SHA-256 digests of all
inputs and outputs, which is what ``replay`` needs to re-execute the command
and check that the outputs come out byte-identical.

Exit codes: 0 success, 1 validation error, 2 I/O error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import sys
from pathlib import Path
from typing import Optional

import numpy as np

from . import __version__
from . import config as cfgmod
from .config import ConfigError
from .head import HeadParams
from .metrics import EvalConfig, evaluate, sequence_from_rows
from .pipeline import (
    NumericalError, PipelineConfig, initial_params, load_gt, load_scene_dir, prepare_all, run, train,
)
from .simulator import SceneConfig, gen_scene, write_scene
from .tensorio import fmt_float, read_bevf, read_rows, sha256_file, write_bevf, write_rows

log = logging.getLogger("bevfuse")

EXIT_OK, EXIT_VALIDATION, EXIT_IO, EXIT_NUMERICAL = 0, 1, 2, 3
MANIFEST = "manifest.json"
LOG_LEVELS = {"error": logging.ERROR, "warn": logging.WARNING, "info": logging.INFO, "debug": logging.DEBUG}

ABLATION_ROWS = [
    ("Baseline", dict(backend="bilinear", fusion="unweighted-mean", gaussian_conf=False,
                      depth_weight=False, mc_loss=False)),
    ("+ SPT", dict(backend="spt", fusion="unweighted-mean", gaussian_conf=False,
                   depth_weight=False, mc_loss=False)),
    ("+ Weight Aggregation", dict(backend="spt", fusion="weighted", gaussian_conf=True,
                                  depth_weight=True, mc_loss=False)),
    ("+ MC loss", dict(backend="spt", fusion="weighted", gaussian_conf=True,
                       depth_weight=True, mc_loss=True)),
]
ABLATION_COLUMNS = ["MODA", "MODP", "IDF1", "MOTA", "MOTP"]


def _utc_now() -> str:
    return _dt.datetime.now(_dt.timezone.utc).isoformat(timespec="seconds")


def _digests(paths) -> dict:
    return {str(p): sha256_file(p) for p in paths}


def _write_manifest(out: Path, command: str, args: dict, config, inputs, outputs, started: str) -> Path:
    doc = {
        "format": "bevfuse-manifest/1",
        "version": __version__,
        "command": command,
        "args": args,
        "config": cfgmod.to_dict(config) if config is not None else None,
        "seed": getattr(config, "seed", None),
        "inputs": _digests(inputs),
        "outputs": {str(Path(p).relative_to(out)): sha256_file(p) for p in outputs},
        "started": started,
        "finished": _utc_now(),
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    return path


def _load_config(cls, path: Optional[str]):
    return cfgmod.build(cls, {}) if path is None else cfgmod.load(cls, path)


def _with_seed(cfg, seed: Optional[int]):
    if seed is None:
        return cfg
    if "seed" not in {f.name for f in dataclasses.fields(cfg)}:
        raise ConfigError("seed: this command takes no seed")
    return dataclasses.replace(cfg, seed=seed)


# ---------------------------------------------------------------- commands

def cmd_simulate(args: dict, cfg: SceneConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    scene = gen_scene(cfg)
    write_scene(scene, out, threads=args.get("threads", 1))
    outputs = sorted(p for p in out.rglob("*") if p.is_file() and p.name != MANIFEST)
    log.info("wrote scene with %d cameras, %d frames to %s", cfg.n_cameras, cfg.n_frames, out)
    return [], outputs


def _train_outputs(scene_dir: Path, cfg: PipelineConfig, epochs: int, out: Path, threads: int):
    scene = load_scene_dir(scene_dir)
    _, heat = load_gt(scene_dir, scene)
    views = prepare_all(cfg, scene, threads=threads) if epochs > 0 else None
    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as fh:
        def on_epoch(entry):
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
            log.info("epoch %d  l_det %.6f", entry["epoch"], entry["l_det"])
        if epochs > 0:
            params, single, _ = train(cfg, scene, heat, epochs, views=views, log=on_epoch)
        else:
            params, single = initial_params(cfg, scene)
    meta = {"seed": cfg.seed, "epochs": epochs, "hidden": cfg.head.hidden}
    outputs = [out / "params.json", params.save(out / "params.json", meta), log_path]
    if single is not None:
        outputs += [out / "single_params.json", single.save(out / "single_params.json", meta)]
    inputs = scene.inputs() + [scene_dir / "gt.csv"]
    return scene, params, inputs, outputs


def cmd_train(args: dict, cfg: PipelineConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    _, _, inputs, outputs = _train_outputs(Path(args["scene"]), cfg, args["epochs"], out, args.get("threads", 1))
    return inputs, outputs


def _write_run(out: Path, result) -> list[Path]:
    det_path, trk_path = out / "detections.csv", out / "tracks.csv"
    write_rows(det_path, ["frame", "x_world", "y_world", "score"],
               [(f, fmt_float(x), fmt_float(y), fmt_float(s)) for f, x, y, s in result.detections])
    write_rows(trk_path, ["frame", "track_id", "x_world", "y_world", "score"],
               [(f, i, fmt_float(x), fmt_float(y), fmt_float(s)) for f, i, x, y, s in result.tracks])
    pdir = out / "probmaps"
    pdir.mkdir(exist_ok=True)
    outputs = [det_path, trk_path]
    for f, p in enumerate(result.probmaps):
        path = pdir / f"f{f:04d}.bevf"
        write_bevf(path, p.astype(np.float32))
        outputs.append(path)
    return outputs


def cmd_run(args: dict, cfg: PipelineConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    scene = load_scene_dir(args["scene"])
    params_path = Path(args["params"])
    params = HeadParams.load(params_path)
    result = run(cfg, scene, params, prepare_all(cfg, scene, threads=args.get("threads", 1)))
    outputs = _write_run(out, result)
    log.info("%d detections, %d track states", len(result.detections), len(result.tracks))
    inputs = scene.inputs() + [params_path, params_path.with_suffix(".bin")]
    return inputs, outputs


def _sequences(path):
    return sequence_from_rows(read_rows(path))


def cmd_eval(args: dict, cfg: EvalConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    gt_path, trk_path = Path(args["gt"]), Path(args["tracks"])
    inputs = [gt_path, trk_path]
    dets = None
    if args.get("detections"):
        inputs.append(Path(args["detections"]))
        dets = _sequences(args["detections"])
    report = evaluate(_sequences(gt_path), _sequences(trk_path), cfg, detections=dets)
    path = out / "metrics.json"
    path.write_text(report.to_json())
    return inputs, [path]


def _ablation_row_config(base: PipelineConfig, overrides: dict) -> PipelineConfig:
    return dataclasses.replace(base, **overrides)


def cmd_ablate(args: dict, cfg: PipelineConfig, out: Path):
    out.mkdir(parents=True, exist_ok=True)
    scene_dir = Path(args["scene"])
    threads = args.get("threads", 1)
    gt_rows, _ = load_gt(scene_dir, load_scene_dir(scene_dir))
    gt = {}
    for f, w, x, y in gt_rows:
        gt.setdefault(f, []).append((w, x, y))
    table, inputs, outputs = [], [], []
    for k, (name, overrides) in enumerate(ABLATION_ROWS):
        row_cfg = _ablation_row_config(cfg, overrides)
        row_dir = out / f"row{k}"
        row_dir.mkdir(exist_ok=True)
        log.info("ablation row %d: %s", k, name)
        scene, params, row_inputs, row_outputs = _train_outputs(scene_dir, row_cfg, args["epochs"], row_dir, threads)
        result = run(row_cfg, scene, params, prepare_all(row_cfg, scene, threads=threads))
        row_outputs += _write_run(row_dir, result)
        tracks, dets = {}, {}
        for f, i, x, y, _ in result.tracks:
            tracks.setdefault(f, []).append((i, x, y))
        for j, (f, x, y, _) in enumerate(result.detections):
            dets.setdefault(f, []).append((j, x, y))
        report = evaluate(gt, tracks, row_cfg.eval, detections=dets)
        (row_dir / "metrics.json").write_text(report.to_json())
        row_outputs.append(row_dir / "metrics.json")
        digests = _digests(row_inputs)
        table.append({
            "row": name,
            "MODA": report.moda, "MODP": report.modp, "IDF1": report.idf1,
            "MOTA": report.mota, "MOTP": report.motp,
            "inputs_sha256": _combined_digest(digests),
            "config": cfgmod.to_dict(row_cfg),
        })
        inputs += [p for p in row_inputs if p not in inputs]
        outputs += row_outputs
    csv_path, json_path = out / "ablation.csv", out / "ablation.json"
    write_rows(csv_path, ["row"] + ABLATION_COLUMNS + ["inputs_sha256"],
               [[r["row"]] + [_fmt_metric(r[c]) for c in ABLATION_COLUMNS] + [r["inputs_sha256"]] for r in table])
    json_path.write_text(json.dumps({"epochs": args["epochs"], "rows": table}, indent=2, sort_keys=True) + "\n")
    return inputs, outputs + [csv_path, json_path]


def _combined_digest(digests: dict) -> str:
    h = hashlib.sha256()
    for path in sorted(digests):
        h.update(f"{Path(path).name}:{digests[path]}\n".encode())
    return h.hexdigest()


def _fmt_metric(v) -> str:
    return "" if v is None else fmt_float(v)


PALETTE = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd",
           "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"]


def track_color(track_id: int) -> str:
    return PALETTE[track_id % len(PALETTE)]


def to_pgm(data: np.ndarray) -> bytes:
    """8-bit binary PGM; values are scaled so the maximum maps to 255 (negatives clip to 0)."""
    img = np.clip(np.asarray(data, dtype=np.float64), 0.0, None)
    top = img.max() if img.size else 0.0
    scaled = np.zeros(img.shape, dtype=np.uint8) if top <= 0 else np.round(img * (255.0 / top)).astype(np.uint8)
    h, w = scaled.shape
    return f"P5\n{w} {h}\n255\n".encode() + scaled.tobytes()


def to_svg(rows: list[dict], scale: float = 20.0) -> str:
    tracks: dict[int, list] = {}
    for r in rows:
        tracks.setdefault(int(r["track_id"]), []).append((int(r["frame"]), float(r["x_world"]), float(r["y_world"])))
    xs = [p[1] for pts in tracks.values() for p in pts] or [0.0]
    ys = [p[2] for pts in tracks.values() for p in pts] or [0.0]
    x0, y0 = min(xs) - 1.0, min(ys) - 1.0
    w = (max(xs) - x0 + 1.0) * scale
    h = (max(ys) - y0 + 1.0) * scale
    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{w:.1f}" height="{h:.1f}">']
    for tid in sorted(tracks):
        pts = sorted(tracks[tid])
        # world y grows upward, SVG y grows downward
        coords = " ".join(f"{(x - x0) * scale:.2f},{h - (y - y0) * scale:.2f}" for _, x, y in pts)
        lines.append(f'  <polyline data-track-id="{tid}" points="{coords}" fill="none" '
                     f'stroke="{track_color(tid)}" stroke-width="2"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def cmd_dump(args: dict, cfg, out: Path):
    src = Path(args["input"])
    target = Path(args["output"]) if args.get("output") else None
    out.mkdir(parents=True, exist_ok=True)
    if src.suffix == ".bevf":
        data = read_bevf(src)
        ch = args.get("channel", 0)
        if not 0 <= ch < data.shape[0]:
            raise ValueError(f"channel: {ch} outside [0, {data.shape[0]})")
        target = target or out / (src.stem + f"_c{ch}.pgm")
        target.write_bytes(to_pgm(data[ch]))
    elif src.suffix == ".csv":
        target = target or out / (src.stem + ".svg")
        target.write_text(to_svg(read_rows(src)))
    else:
        raise ValueError(f"input: cannot dump {src.suffix or 'extensionless'} files (expected .bevf or .csv)")
    return [src], [target]


COMMANDS = {
    "simulate": (cmd_simulate, SceneConfig),
    "train": (cmd_train, PipelineConfig),
    "run": (cmd_run, PipelineConfig),
    "eval": (cmd_eval, EvalConfig),
    "ablate": (cmd_ablate, PipelineConfig),
    "dump": (cmd_dump, None),
}


def execute(command: str, args: dict, config, out: Path) -> Path:
    """Run ``command`` and write its manifest; returns the manifest path."""
    func, _ = COMMANDS[command]
    started = _utc_now()
    inputs, outputs = func(args, config, out)
    if command == "dump":
        out = Path(outputs[0]).parent
    return _write_manifest(out, command, args, config, inputs, outputs, started)


def replay(manifest_path: Path, out: Optional[Path]) -> tuple[bool, list[str]]:
    """Re-execute a manifest; returns ``(identical, mismatching_outputs)``."""
    doc = json.loads(Path(manifest_path).read_text())
    command = doc["command"]
    if command not in COMMANDS:
        raise ValueError(f"command: unknown command {command!r} in manifest")
    for path, digest in doc["inputs"].items():
        if sha256_file(path) != digest:
            raise ValueError(f"inputs: {path} changed since the manifest was written")
    cls = COMMANDS[command][1]
    config = cfgmod.build(cls, doc["config"]) if cls is not None else None
    args = dict(doc["args"])
    target = Path(out) if out is not None else Path(manifest_path).parent
    if command == "dump" and args.get("output"):
        args["output"] = str(target / Path(args["output"]).name)
    new_manifest = execute(command, args, config, target)
    new = json.loads(new_manifest.read_text())["outputs"]
    bad = sorted(k for k in set(doc["outputs"]) | set(new) if doc["outputs"].get(k) != new.get(k))
    return not bad, bad


# ---------------------------------------------------------------- argparse

def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", default=d, help="JSON config file for the command")
    parser.add_argument("--seed", type=int, default=d, help="override the config seed")
    parser.add_argument("--out", default=d, help="output directory")
    parser.add_argument("--threads", type=int, default=argparse.SUPPRESS if suppress else 1,
                        help="worker threads for projection and rendering")
    parser.add_argument("--log-level", choices=sorted(LOG_LEVELS), default=argparse.SUPPRESS if suppress else "warn")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="bevfuse", description=__doc__.splitlines()[0])
    _global_flags(parser, suppress=False)
    sub = parser.add_subparsers(dest="command", required=True)

    def verb(name, help_text):
        p = sub.add_parser(name, help=help_text)
        _global_flags(p, suppress=True)
        return p

    verb("simulate", "generate a synthetic scene directory")
    p = verb("train", "train the detection head on a scene")
    p.add_argument("scene")
    p.add_argument("--epochs", type=int, default=200)
    p = verb("run", "run projection, fusion, detection and tracking")
    p.add_argument("scene")
    p.add_argument("--params", required=True, help="params.json written by train")
    p = verb("eval", "score tracks (and optionally detections) against ground truth")
    p.add_argument("gt")
    p.add_argument("tracks")
    p.add_argument("--detections")
    p = verb("ablate", "train and evaluate the four ablation rows")
    p.add_argument("scene")
    p.add_argument("--epochs", type=int, default=200)
    p = verb("dump", "render a BEVF tensor to PGM or a tracks CSV to SVG")
    p.add_argument("input")
    p.add_argument("--channel", type=int, default=0)
    p.add_argument("--output", help="output file (default: derived from input name inside --out)")
    p = verb("replay", "re-execute a manifest and compare outputs")
    p.add_argument("manifest")
    return parser


def _resolved_args(ns: argparse.Namespace) -> dict:
    skip = {"command", "config", "seed", "out", "log_level"}
    out = {}
    for k, v in vars(ns).items():
        if k in skip:
            continue
        if k in ("scene", "params", "gt", "tracks", "detections", "input", "output") and v is not None:
            v = str(Path(v).resolve())
        out[k] = v
    return out


def main(argv: Optional[list[str]] = None) -> int:
    parser = build_parser()
    ns = parser.parse_args(argv)
    logging.basicConfig(level=LOG_LEVELS[ns.log_level], format="%(levelname)s %(name)s: %(message)s")
    try:
        if ns.threads < 1:
            raise ConfigError("threads: must be >= 1")
        if ns.command == "replay":
            same, bad = replay(Path(ns.manifest), Path(ns.out) if ns.out else None)
            if not same:
                print("outputs differ: " + ", ".join(bad), file=sys.stderr)
                return EXIT_VALIDATION
            print("replay: outputs identical")
            return EXIT_OK
        _, cls = COMMANDS[ns.command]
        config = None
        if cls is not None:
            config = _with_seed(_load_config(cls, ns.config), ns.seed)
        if ns.out is None and ns.command != "dump":
            raise ConfigError("out: --out DIR is required")
        out = Path(ns.out) if ns.out else Path(".")
        manifest = execute(ns.command, _resolved_args(ns), config, out)
        log.info("manifest written to %s", manifest)
        return EXIT_OK
    except NumericalError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except FloatingPointError as exc:
        print(f"numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ConfigError, ValueError, KeyError, IndexError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
