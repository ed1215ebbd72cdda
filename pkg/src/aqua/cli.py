"""``aqua`` command line: one subcommand per pipeline stage.

Layout under ``paths.data_root``::

    scenes.json, scenes/      full scenes (SAR in dB) and their reference masks
    manifest.json, tiles/     normalized tile pairs with train/val/test splits
    masks/<method>.json       predicted or teacher masks, one .dqt per tile
    probs/student/            student probability tiles
    .stamps/<stage>.json      completion markers used for re-entrancy

Each stage first makes sure the stages it depends on are done, then skips
itself if its stamp matches the current config (unless ``--force``).
stdout receives one JSON object describing the result or the error; logs
go to stderr as JSON lines.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from collections import defaultdict
from dataclasses import replace
from pathlib import Path

import numpy as np
import torch

from .baseline import otsu_segment, sar_threshold
from .config import STAGE_DEPENDS, PipelineConfig, load_config
from .errors import AquaError, ConfigError, EmptyDataset
from .metrics import ConfusionCounts, aggregate_weighted, confusion, markdown_table, metrics, normalized_confusion, report_json, water_extent
from .raster import (
    Raster,
    TilePair,
    load_pair,
    normalize_sar,
    read_manifest,
    read_mask,
    read_tile,
    split_dataset,
    tile_scene,
    write_manifest,
    write_mask,
    write_tile,
)
from .synth import generate_scene
from .teacher import teacher_mask
from .train import filter_training_pairs, train
from .unet import binarize, load_checkpoint, predict_array

log = logging.getLogger("aqua")

STAGES = ("synth", "tile", "teacher", "train", "predict", "baseline", "evaluate", "timeseries")
REFERENCE_MASKS = ("truth", "open_truth", "vegetated")
MASK_KEYS = ("tile_id", "mask_path")
# Row order of the comparison table.
METHODS = ("otsu", "otsu_gaussian", "teacher", "student")


class JsonLines(logging.Formatter):
    def format(self, record):
        msg = record.getMessage()
        try:
            doc = json.loads(msg)
        except ValueError:
            doc = None
        if not isinstance(doc, dict):
            doc = {"message": msg}
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, **doc}, sort_keys=True)


def setup_logging(level=logging.INFO) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonLines())
    for name in ("aqua", "py.warnings"):
        lg = logging.getLogger(name)
        lg.handlers[:] = [handler]
        lg.setLevel(level)
        lg.propagate = False
    logging.captureWarnings(True)


def emit(**fields) -> None:
    log.info(json.dumps(fields, sort_keys=True))


@contextlib.contextmanager
def error_context(**ctx):
    try:
        yield
    except AquaError as exc:
        for k, v in ctx.items():
            exc.context.setdefault(k, v)
        raise


class Workspace:
    def __init__(self, cfg: PipelineConfig, threads: int | None = None):
        self.cfg = cfg
        self.threads = threads
        self.root = cfg.path("data_root")
        self.reports = cfg.path("reports")
        self.checkpoint = cfg.path("checkpoints") / "student.daqw"
        self.scene_manifest = self.root / "scenes.json"
        self.tile_manifest = self.root / "manifest.json"

    def mask_manifest(self, method: str) -> Path:
        return self.root / "masks" / f"{method}.json"

    def stamp(self, stage: str) -> Path:
        return self.root / ".stamps" / f"{stage}.json"

    def rel(self, path: Path) -> str:
        return Path(path).relative_to(self.root).as_posix()

    def outputs(self, stage: str) -> list[Path]:
        return {
            "synth": [self.scene_manifest],
            "tile": [self.tile_manifest],
            "teacher": [self.mask_manifest("teacher")],
            "train": [self.checkpoint, self.reports / "train_report.json", self.reports / "loss_curve.csv"],
            "predict": [self.mask_manifest("student")],
            "baseline": [self.mask_manifest("otsu"), self.mask_manifest("otsu_gaussian"), self.reports / "thresholds.csv"],
            "evaluate": [self.reports / "report.json", self.reports / "report.md"],
            "timeseries": [self.reports / "timeseries.csv"],
        }[stage]

    def state(self, stage: str) -> str:
        """'fresh', 'external' (outputs without a stamp), 'stale' or 'missing'."""
        have = all(p.exists() for p in self.outputs(stage))
        stamp = self.stamp(stage)
        if not stamp.exists():
            return "external" if have else "missing"
        doc = json.loads(stamp.read_text())
        return "fresh" if have and doc.get("config_hash") == self.cfg.stage_hash(stage) else "stale"

    def tiles(self, splits=None) -> list[dict]:
        doc = read_manifest(self.tile_manifest)
        return [e for e in doc["tiles"] if splits is None or e["split"] in splits]


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _read_masks(ws: Workspace, method: str) -> dict[str, dict]:
    doc = read_manifest(ws.mask_manifest(method), MASK_KEYS)
    return {e["tile_id"]: e for e in doc["tiles"]}


def _mask_keys(entry) -> list[str]:
    return [k for k in REFERENCE_MASKS if f"{k}_path" in entry]


# ---------------------------------------------------------------- stages


def cmd_synth(ws: Workspace) -> dict:
    """Render train and test scenes, then cut them into tiles."""
    cfg, s = ws.cfg, ws.cfg.scenes
    entries = []
    n_sites, n_dates = len(s["test_sites"]), len(s["test_dates"])
    for role, n in (("train", s["n_train_scenes"]), ("test", s["n_test_scenes"])):
        for i in range(n):
            scene_id = f"{role}_s{i:03d}"
            with error_context(scene_id=scene_id):
                scene = generate_scene(cfg.scene_spec(role, i))
            if role == "train":
                site, date = s["train_site"], s["test_dates"][0]
            else:
                site, date = s["test_sites"][i % n_sites], s["test_dates"][(i // n_sites) % n_dates]
            entry = {
                "tile_id": scene_id,
                "site": site,
                "date": date,
                "cloud_fraction": s["cloud_fraction"],
                "split": role,
                "pixel_size_m": s["pixel_size_m"],
                "optical_bands": list(scene.optical.band_names),
            }
            files = {"optical": scene.optical, "sar": scene.sar}
            for key, r in files.items():
                path = ws.root / "scenes" / f"{scene_id}_{key}.dqt"
                write_tile(r, path)
                entry[f"{key}_path"] = ws.rel(path)
            for key in REFERENCE_MASKS:
                path = ws.root / "scenes" / f"{scene_id}_{key}.dqt"
                write_mask(getattr(scene, key), path, s["pixel_size_m"])
                entry[f"{key}_path"] = ws.rel(path)
            entries.append(entry)
    if not entries:
        raise EmptyDataset("config asks for zero scenes")
    write_manifest(ws.scene_manifest, entries, kind="scenes", sar_units="dB")
    emit(stage="synth", event="scenes", n_scenes=len(entries))
    # tiling is part of synthesis; it gets its own stamp so `tile` can be rerun alone
    return {"scenes": len(entries), **_execute(ws, "tile")}


def cmd_tile(ws: Workspace) -> dict:
    """Normalize each scene's SAR, tile it, filter, and split the training pool."""
    cfg = ws.cfg
    doc = read_manifest(ws.scene_manifest)
    pool, test = [], []
    for e in doc["tiles"]:
        with error_context(scene_id=e["tile_id"], path=str(ws.scene_manifest)):
            scene = load_pair(e, ws.root, _mask_keys(e))
            sar = normalize_sar(scene.sar)
            tiles = tile_scene(
                scene.optical,
                sar,
                cfg.tile_size,
                scene.cloud_fraction,
                site=scene.site,
                date=scene.date,
                prefix=e["tile_id"],
                masks=scene.masks,
            )
        tiles = [replace(t, split="test") if e["split"] == "test" else t for t in filter_training_pairs(tiles)]
        (test if e["split"] == "test" else pool).extend((e["tile_id"], t) for t in tiles)
    if not pool and not test:
        raise EmptyDataset("no tile survived the cloud and validity filters")
    if pool:
        split = split_dataset([t for _, t in pool], cfg.train_fraction, cfg.seed)
        pool = [(sid, t) for (sid, _), t in zip(pool, split)]
    entries = []
    for scene_id, t in pool + test:
        entry = {
            "tile_id": t.tile_id,
            "scene_id": scene_id,
            "site": t.site,
            "date": t.date,
            "cloud_fraction": t.cloud_fraction,
            "split": t.split,
            "pixel_size_m": t.sar.pixel_size_m,
            "optical_bands": list(t.optical.band_names),
        }
        for key, r in (("optical", t.optical), ("sar", t.sar)):
            path = ws.root / "tiles" / f"{t.tile_id}_{key}.dqt"
            write_tile(r, path)
            entry[f"{key}_path"] = ws.rel(path)
        for key, m in t.masks.items():
            path = ws.root / "tiles" / f"{t.tile_id}_{key}.dqt"
            write_mask(m, path, t.sar.pixel_size_m)
            entry[f"{key}_path"] = ws.rel(path)
        entries.append(entry)
    write_manifest(ws.tile_manifest, entries, kind="tiles", tile_size=cfg.tile_size, sar_normalization="p1_p99_per_scene")
    counts = {sp: sum(e["split"] == sp for e in entries) for sp in ("train", "val", "test")}
    emit(stage="tile", event="tiles", **counts)
    return counts


def cmd_teacher(ws: Workspace) -> dict:
    spec = ws.cfg.index_spec
    out = []
    for e in ws.tiles():
        with error_context(tile_id=e["tile_id"]):
            optical = read_tile(ws.root / e["optical_path"], e.get("pixel_size_m", 10.0), e.get("optical_bands", ("green", "nir")))
            path = ws.root / "masks" / "teacher" / f"{e['tile_id']}.dqt"
            write_mask(teacher_mask(optical, spec), path, optical.pixel_size_m)
        out.append({k: e[k] for k in ("tile_id", "site", "date", "split")} | {"mask_path": ws.rel(path)})
    write_manifest(ws.mask_manifest("teacher"), out, kind="masks", method="teacher", index=spec.name, threshold=spec.threshold)
    emit(stage="teacher", event="masks", n_tiles=len(out), index=spec.name)
    return {"masks": len(out), "index": spec.name}


def cmd_train(ws: Workspace) -> dict:
    cfg = ws.cfg
    teacher = _read_masks(ws, "teacher")
    pairs = []
    for e in ws.tiles(("train", "val")):
        with error_context(tile_id=e["tile_id"]):
            p = load_pair(e, ws.root)
            if e["tile_id"] in teacher:
                p = replace(p, masks={"teacher": read_mask(ws.root / teacher[e["tile_id"]]["mask_path"])})
        pairs.append(p)
    report, _ = train(pairs, cfg.unet, cfg.train, ws.checkpoint, threads=ws.threads)
    report.checkpoint_path = os.path.relpath(ws.checkpoint, cfg.base_dir)
    _write_text(ws.reports / "train_report.json", report.to_json())
    _write_text(ws.reports / "loss_curve.csv", report.curve_csv())
    _write_text(ws.reports / "train_timing.json", json.dumps({"seconds": report.seconds}) + "\n")
    emit(stage="train", event="done", n_train=report.n_train, n_val=report.n_val, seconds=report.seconds)
    return {"n_train": report.n_train, "n_val": report.n_val, "final_train_loss": report.train_loss[-1] if report.train_loss else None}


def _stack_sar(ws: Workspace, entries) -> tuple[np.ndarray, list[Raster]]:
    rasters = []
    for e in entries:
        with error_context(tile_id=e["tile_id"]):
            rasters.append(read_tile(ws.root / e["sar_path"], e.get("pixel_size_m", 10.0), ("vh",)))
    return np.stack([r.data for r in rasters]), rasters


def cmd_predict(ws: Workspace) -> dict:
    cfg = ws.cfg
    model = load_checkpoint(ws.checkpoint, cfg.unet)
    entries = ws.tiles(cfg.section("predict")["splits"])
    if not entries:
        raise EmptyDataset("no tiles in the requested splits")
    x, rasters = _stack_sar(ws, entries)
    prob = predict_array(model, x)
    out = []
    for e, r, p in zip(entries, rasters, prob):
        tid = e["tile_id"]
        pr = Raster(p, r.valid, r.pixel_size_m, ("water_probability",))
        write_tile(pr, ws.root / "probs" / "student" / f"{tid}.dqt")
        path = ws.root / "masks" / "student" / f"{tid}.dqt"
        write_mask(binarize(pr, cfg.section("predict")["cut"]), path, r.pixel_size_m)
        out.append({k: e[k] for k in ("tile_id", "site", "date", "split")} | {"mask_path": ws.rel(path)})
    write_manifest(ws.mask_manifest("student"), out, kind="masks", method="student")
    emit(stage="predict", event="masks", n_tiles=len(out))
    return {"masks": len(out)}


def cmd_baseline(ws: Workspace) -> dict:
    cfg = ws.cfg
    b = cfg.section("baseline")
    entries = ws.tiles(cfg.section("predict")["splits"])
    if not entries:
        raise EmptyDataset("no tiles in the requested splits")
    _, rasters = _stack_sar(ws, entries)
    rows = ["tile_id,threshold,filtered"]
    for method, use_filter in (("otsu", False), ("otsu_gaussian", True)):
        pooled = {}
        if b["per_scene"]:
            groups = defaultdict(list)
            for e, r in zip(entries, rasters):
                groups[e.get("scene_id", e["tile_id"])].append(r)
            pooled = {sid: sar_threshold(rs, use_filter, b["kernel_size"], b["sigma"]) for sid, rs in groups.items()}
        out = []
        for e, r in zip(entries, rasters):
            tid = e["tile_id"]
            with error_context(tile_id=tid):
                t = pooled.get(e.get("scene_id", tid)) if pooled else sar_threshold(r, use_filter, b["kernel_size"], b["sigma"])
                mask = otsu_segment(r, use_filter, b["kernel_size"], b["sigma"], threshold=t)
            path = ws.root / "masks" / method / f"{tid}.dqt"
            write_mask(mask, path, r.pixel_size_m)
            rows.append(f"{tid},{t!r},{str(use_filter).lower()}")
            out.append({k: e[k] for k in ("tile_id", "site", "date", "split")} | {"mask_path": ws.rel(path)})
        write_manifest(ws.mask_manifest(method), out, kind="masks", method=method, per_scene=b["per_scene"])
    _write_text(ws.reports / "thresholds.csv", "\n".join(rows) + "\n")
    emit(stage="baseline", event="masks", n_tiles=len(entries))
    return {"masks": len(entries)}


def method_label(ws: Workspace, method: str) -> str:
    return {
        "otsu": "Otsu",
        "otsu_gaussian": "Otsu+Gaussian",
        "teacher": f"{ws.cfg.index_spec.name} teacher",
        "student": f"Student ({ws.cfg.index_spec.name})",
    }[method]


def cmd_evaluate(ws: Workspace) -> dict:
    cfg = ws.cfg
    truth_key = cfg.section("evaluate")["truth"]
    splits = cfg.section("evaluate")["splits"]
    entries = ws.tiles(splits)
    if not entries:
        raise EmptyDataset("no tiles in the evaluated splits")
    missing = [e["tile_id"] for e in entries if f"{truth_key}_path" not in e]
    if missing:
        raise AquaError(f"{len(missing)} tiles lack a {truth_key!r} mask", tile_id=missing[0])
    truths = {e["tile_id"]: read_mask(ws.root / e[f"{truth_key}_path"]) for e in entries}
    vegetated = {e["tile_id"]: read_mask(ws.root / e["vegetated_path"]) for e in entries if "vegetated_path" in e}
    rows, labels, veg_recall, norm = {}, {}, {}, {}
    for method in METHODS:
        if not ws.mask_manifest(method).exists():
            continue
        masks = _read_masks(ws, method)
        per_site = defaultdict(ConfusionCounts)
        veg_hit = veg_total = 0
        for e in entries:
            tid = e["tile_id"]
            if tid not in masks:
                raise AquaError(f"{method} has no mask for an evaluated tile", tile_id=tid)
            pred = read_mask(ws.root / masks[tid]["mask_path"])
            with error_context(tile_id=tid, method=method):
                per_site[e["site"]] += confusion(pred, truths[tid])
            if tid in vegetated:
                v = vegetated[tid].values.astype(bool)
                veg_hit += int(pred.values[v].sum())
                veg_total += int(v.sum())
        reports = {site: metrics(c, site) for site, c in sorted(per_site.items())}
        reports["weighted"] = aggregate_weighted(list(reports.values()))
        rows[method] = reports
        labels[method_label(ws, method)] = reports
        norm[method] = normalized_confusion(reports["weighted"].counts, "all").round(6).tolist()
        if veg_total:
            veg_recall[method] = veg_hit / veg_total
    if not rows:
        raise EmptyDataset("no prediction manifests to evaluate")
    doc = report_json(
        rows,
        truth=truth_key,
        splits=list(splits),
        n_tiles=len(entries),
        vegetated_recall=veg_recall,
        normalized_confusion=norm,
        labels={m: method_label(ws, m) for m in rows},
    )
    _write_text(ws.reports / "report.json", doc)
    _write_text(ws.reports / "report.md", markdown_table(labels))
    emit(stage="evaluate", event="report", n_tiles=len(entries), methods=list(rows))
    return {m: rows[m]["weighted"].iou for m in rows}


def cmd_timeseries(ws: Workspace) -> dict:
    cfg = ws.cfg
    model = load_checkpoint(ws.checkpoint, cfg.unet)
    entries = ws.tiles(cfg.section("predict")["splits"])
    if not entries:
        raise EmptyDataset("no tiles in the requested splits")
    x, rasters = _stack_sar(ws, entries)
    prob = predict_array(model, x)
    area = defaultdict(float)
    for e, r, p in zip(entries, rasters, prob):
        area[e["date"], e["site"]] += water_extent(binarize(p[0], cfg.section("predict")["cut"]), r.pixel_size_m)
    lines = ["date,site,hectares"] + [f"{d},{s},{ha:.4f}" for (d, s), ha in sorted(area.items())]
    _write_text(ws.reports / "timeseries.csv", "\n".join(lines) + "\n")
    emit(stage="timeseries", event="extent", n_rows=len(area))
    return {"rows": len(area)}


COMMANDS = {
    "synth": cmd_synth,
    "tile": cmd_tile,
    "teacher": cmd_teacher,
    "train": cmd_train,
    "predict": cmd_predict,
    "baseline": cmd_baseline,
    "evaluate": cmd_evaluate,
    "timeseries": cmd_timeseries,
}


def run_stage(ws: Workspace, stage: str, force: bool = False) -> dict:
    """Run ``stage`` after its prerequisites; a stage whose stamp matches the config is skipped."""
    for dep in STAGE_DEPENDS[stage]:
        if ws.state(dep) in ("missing", "stale"):
            run_stage(ws, dep)
    if not force and ws.state(stage) == "fresh":
        emit(stage=stage, event="skip", reason="outputs match config; use --force to redo")
        return {"stage": stage, "status": "skipped"}
    return {"stage": stage, "status": "ok", **_execute(ws, stage)}


def _execute(ws: Workspace, stage: str) -> dict:
    emit(stage=stage, event="start")
    t0 = time.perf_counter()
    result = COMMANDS[stage](ws)
    ws.stamp(stage).parent.mkdir(parents=True, exist_ok=True)
    ws.stamp(stage).write_text(json.dumps({"stage": stage, "config_hash": ws.cfg.stage_hash(stage)}, sort_keys=True) + "\n")
    emit(stage=stage, event="done", seconds=round(time.perf_counter() - t0, 3))
    return result


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aqua", description="SAR water segmentation distilled from optical water indices.")
    p.add_argument("stage", choices=STAGES)
    p.add_argument("--config", type=Path, default=None, help="YAML config; defaults apply to omitted keys")
    p.add_argument("--seed", type=int, default=None, help="override the config seed")
    p.add_argument("--threads", type=int, default=None, help="torch intra-op threads; 1 gives bit-exact reruns")
    p.add_argument("--force", action="store_true", help="redo the stage even if its outputs are current")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    setup_logging()
    try:
        cfg = load_config(args.config, args.seed)
        if args.threads is not None:
            if args.threads < 1:
                raise ConfigError("--threads must be >= 1", key="--threads")
            torch.set_num_threads(args.threads)
        result = run_stage(Workspace(cfg, args.threads), args.stage, args.force)
    except AquaError as exc:
        doc = {"error": type(exc).__name__, "message": str(exc), "exit_code": exc.exit_code, "stage": args.stage}
        doc.update({k: v for k, v in exc.context.items() if k not in doc})
        print(json.dumps(doc, sort_keys=True, default=str))
        return exc.exit_code
    except OSError as exc:
        print(json.dumps({"error": type(exc).__name__, "message": str(exc), "exit_code": 3, "stage": args.stage}, sort_keys=True))
        return 3
    print(json.dumps(result, sort_keys=True, default=str))
    return 0


if __name__ == "__main__":
    sys.exit(main())
