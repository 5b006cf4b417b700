"""Grid over skip-connection type, variance schedule and base width."""

from __future__ import annotations

import copy
import csv
import itertools
import resource
import sys
import time
from pathlib import Path

from .checkpoint import Registry
from .config import ConfigError, RunConfig
from .data import SubjectRecord, scan_dataset, write_manifest
from .metrics import evaluate_split
from .sampler import CaseSettings, synthesize_manifest
from .trainer import train

FIELDS = ("skip", "schedule", "base_channels", "mse", "psnr", "ssim", "time_s", "memory_mb")
# lower is better for these columns
LOWER_BETTER = {"mse", "time_s", "memory_mb"}


def grid(config: RunConfig) -> list[dict]:
    a = config.ablate
    cells = [
        {"skip": s, "schedule": k, "base_channels": int(c)}
        for s, k, c in itertools.product(a.skip_modes, a.schedules, a.base_channels)
    ]
    if not cells:
        raise ConfigError("ablation grid is empty")
    return cells


def cell_config(config: RunConfig, cell: dict) -> RunConfig:
    cfg = copy.deepcopy(config)
    cfg.model.skip_mode = cell["skip"]
    cfg.schedule.kind = cell["schedule"]
    cfg.model.base_channels = cell["base_channels"]
    cfg.train.target = config.ablate.target
    return cfg.validate()


def drop_target_manifest(records: list[SubjectRecord], target: str, path: Path) -> Path:
    dropped = [
        SubjectRecord(r.subject_id, r.modality_paths, target, "pseudo-val", r.modality_paths[target]) for r in records
    ]
    return write_manifest(dropped, path)


def peak_memory_mb() -> float | None:
    """Peak resident set size of this process, or None where unavailable."""
    try:
        peak = resource.getrusage(resource.RUSAGE_SELF).ru_maxrss
    except (AttributeError, OSError):
        return None
    return peak / (1024.0 * 1024.0) if sys.platform == "darwin" else peak / 1024.0


def run_cell(config: RunConfig, cell_dir: Path, eval_root: Path) -> dict:
    """train -> synthesize the target for every eval case -> evaluate."""
    target = config.train.target
    result = train(config, cell_dir / "train", target=target)
    registry = Registry.from_paths({target: result.checkpoint})
    records = scan_dataset(eval_root, config.data.profile)
    manifest = drop_target_manifest(records, target, cell_dir / "manifest.tsv")
    rows = [{"case_id": r.subject_id, "dropped": target} for r in records]
    settings = CaseSettings(
        seed=config.sample.seed, clamp=config.sample.clamp, profile=config.data.profile,
        ext=config.data.ext, preprocess=config.data.preprocess_spec(), use_ema=config.sample.use_ema,
    )
    start = time.perf_counter()
    done, failed = synthesize_manifest(rows, eval_root, registry, cell_dir / "synth", settings)
    seconds = (time.perf_counter() - start) / max(len(done), 1)
    if failed:
        raise RuntimeError(f"synthesis failed for {failed}")
    report = evaluate_split(
        cell_dir / "synth", manifest, config.evaluate.crop_mode, config.data.profile, config.data.preprocess_spec()
    )
    report.write(cell_dir)
    agg = report.aggregates["Random"]
    return {"mse": agg["mse"], "psnr": agg["psnr"], "ssim": agg["ssim"], "time_s": seconds, "memory_mb": peak_memory_mb()}


def run_ablation(config: RunConfig, out_dir: Path | str, eval_root: Path | str | None = None) -> list[dict]:
    out_dir = Path(out_dir)
    cells = grid(config)
    cfgs = [cell_config(config, c) for c in cells]
    eval_root = Path(eval_root or config.data.root)
    rows = []
    for i, (cell, cfg) in enumerate(zip(cells, cfgs)):
        name = f"{i:02d}_{cell['skip']}_{cell['schedule']}_C{cell['base_channels']}"
        rows.append({**cell, **run_cell(cfg, out_dir / name, eval_root)})
    return rows


def rank_marks(rows: list[dict]) -> list[dict]:
    """Per column: '*' marks the best value, '+' the second best (ties share a mark)."""
    marks = [dict() for _ in rows]
    for key in ("mse", "psnr", "ssim", "time_s", "memory_mb"):
        values = [r[key] for r in rows]
        if any(v is None for v in values):
            continue
        distinct = sorted(set(values), reverse=key not in LOWER_BETTER)
        for mark, best in zip("*+", distinct[:2]):
            for m, v in zip(marks, values):
                if v == best:
                    m[key] = mark
    return marks


def render_table(rows: list[dict], target: str) -> str:
    marks = rank_marks(rows)
    head = f"{'Skip Connection':<16}{'Schedule':<10}{'C':>5}{'MSE':>13}{'PSNR':>10}{'SSIM':>9}{'Time [s]':>11}{'Memory [MB]':>13}"
    lines = [f"# target={target}  * best, + second best", head]
    for r, m in zip(rows, marks):
        mem = "n/a" if r["memory_mb"] is None else f"{r['memory_mb']:.0f}"
        lines.append(
            f"{r['skip']:<16}{r['schedule']:<10}{r['base_channels']:>5}"
            f"{r['mse']:>12.3e}{m.get('mse', ' ')}"
            f"{r['psnr']:>9.2f}{m.get('psnr', ' ')}"
            f"{r['ssim']:>8.3f}{m.get('ssim', ' ')}"
            f"{r['time_s']:>10.1f}{m.get('time_s', ' ')}"
            f"{mem:>12}{m.get('memory_mb', ' ')}"
        )
    return "\n".join(lines) + "\n"


def write_report(rows: list[dict], out_dir: Path | str, target: str) -> tuple[Path, Path]:
    out_dir = Path(out_dir)
    table = out_dir / "ablation.txt"
    table.write_text(render_table(rows, target))
    delimited = out_dir / "ablation.csv"
    with open(delimited, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(FIELDS)
        for r in rows:
            writer.writerow(["n/a" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k]) for k in FIELDS])
    return table, delimited
