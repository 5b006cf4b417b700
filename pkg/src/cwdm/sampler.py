"""Conditional generation of a missing modality."""

from __future__ import annotations

import json
import logging
import time
import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch

from .checkpoint import Checkpoint, CheckpointError, Registry
from .data import (
    BRATS_PROFILE,
    EXTENSIONS,
    MODALITIES,
    DataError,
    PreprocessSpec,
    load_volume,
    preprocess_volume,
    save_volume,
    scan_case,
    volume_path,
)
from .diffusion import reverse_step, stack_input
from .schedule import NoiseSchedule
from .trainer import pad_multiple
from .wavelet import PaddingRecord, crop_with_record, dwt3d, idwt3d, pad_to_even

log = logging.getLogger(__name__)


class SamplingRequestError(ValueError):
    pass


@dataclass
class ModalitySet:
    volumes: dict

    def __post_init__(self):
        unknown = set(self.volumes) - set(MODALITIES)
        if unknown:
            raise SamplingRequestError(f"unknown modality codes {sorted(unknown)}")
        shapes = {tuple(np.shape(v)) for v in self.volumes.values()}
        if len(shapes) > 1:
            raise SamplingRequestError(f"modalities have different shapes: {sorted(shapes)}")

    @property
    def available(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.volumes)

    @property
    def missing(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m not in self.volumes)


def missing_modality(available) -> str:
    missing = [m for m in MODALITIES if m not in set(available)]
    if not missing:
        raise SamplingRequestError("nothing to synthesize: all four modalities are present")
    if len(missing) > 1:
        raise SamplingRequestError(f"exactly one modality may be missing, got {len(missing)} missing: {missing}")
    return missing[0]


def select_model(modalities: ModalitySet | Sequence[str], registry: Registry) -> tuple[str, Checkpoint]:
    available = modalities.available if isinstance(modalities, ModalitySet) else modalities
    target = missing_modality(available)
    return target, registry.load(target)


def sampling_streams(seed: int) -> tuple[torch.Generator, torch.Generator]:
    """Generators for the initial draw x_T and for the per-step noise."""
    seeds = [int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i in (0, 1)]
    return torch.Generator().manual_seed(seeds[0]), torch.Generator().manual_seed(seeds[1])


def case_seed(seed: int, case_id: str) -> int:
    return int(np.random.SeedSequence([seed, zlib.crc32(case_id.encode())]).generate_state(1)[0])


@torch.no_grad()
def conditional_sample(
    model: Callable,
    conditions: Sequence,
    schedule: NoiseSchedule,
    seed: int = 0,
    padding: PaddingRecord | None = None,
    clamp: bool = True,
    snapshot_every: int = 0,
    on_snapshot: Callable[[int, torch.Tensor], None] | None = None,
) -> np.ndarray:
    """Run the full T-step reverse chain conditioned on three volumes.

    ``conditions`` must already be padded to the model's required multiple;
    ``padding`` (if given) crops the result back to the original grid.
    ``model(X, t)`` receives a batch of one and returns 8-channel
    coefficients.
    """
    if len(conditions) != 3:
        raise SamplingRequestError(f"expected 3 conditioning volumes, got {len(conditions)}")
    shapes = {tuple(np.shape(c)) for c in conditions}
    if len(shapes) != 1:
        raise SamplingRequestError(f"conditioning volumes differ in shape: {sorted(shapes)}")
    cond = torch.cat([dwt3d(torch.as_tensor(np.asarray(c, dtype=np.float32))) for c in conditions], dim=0)
    init_gen, noise_gen = sampling_streams(seed)
    x = torch.randn((8, *cond.shape[1:]), generator=init_gen)
    for t in range(schedule.T, 0, -1):
        X = stack_input(x, cond)
        x0_pred = model(X[None], torch.tensor([t]))[0].to(x.dtype)
        noise = torch.randn(x.shape, generator=noise_gen) if t > 1 else None
        x = reverse_step(x, x0_pred, t, schedule, noise)
        if snapshot_every and on_snapshot is not None and (t - 1) % snapshot_every == 0:
            on_snapshot(t - 1, x)
    volume = idwt3d(x).numpy()
    if padding is not None:
        volume = crop_with_record(volume, padding)
    if clamp:
        volume = np.clip(volume, 0.0, 1.0)
    return volume


@dataclass
class CaseSettings:
    seed: int = 0
    clamp: bool = True
    profile: Mapping[str, str] = None
    ext: str = ".nii.gz"
    preprocess: PreprocessSpec | None = PreprocessSpec()
    use_ema: bool = True
    snapshot_every: int = 0

    def __post_init__(self):
        if self.profile is None:
            self.profile = dict(BRATS_PROFILE)


def synthesize_volumes(ckpt: Checkpoint, volumes: Mapping[str, np.ndarray], seed: int, settings: CaseSettings, model=None, on_snapshot=None):
    """Preprocess (per checkpoint), pad, sample and crop one case's missing modality."""
    schedule = ckpt.schedule()
    if ckpt.model_config.timesteps != schedule.T:
        raise CheckpointError(f"{ckpt.path}: network expects T={ckpt.model_config.timesteps}, schedule has T={schedule.T}")
    spec = ckpt.preprocess if settings.preprocess is not None else None
    multiple = pad_multiple(ckpt.model_config)
    padded, record = [], None
    for code in ckpt.condition_order:
        data = np.asarray(volumes[code], dtype=np.float32)
        if spec is not None:
            data = preprocess_volume(data, spec)
        data, record = pad_to_even(data, multiple)
        padded.append(data)
    model = model if model is not None else ckpt.model(settings.use_ema)
    return conditional_sample(
        model, padded, schedule, seed, record, settings.clamp, settings.snapshot_every, on_snapshot
    )


def process_case(
    case_dir: Path | str,
    registry: Registry,
    out_dir: Path | str,
    settings: CaseSettings | None = None,
    missing: str | None = None,
    model_cache: dict | None = None,
) -> dict:
    """Synthesize the missing modality of one case directory and write it.

    ``missing`` forces a modality to be treated as absent even if its file is
    present (pseudo-validation cases keep their ground truth on disk).
    Returns the log record that is also written next to the output.
    """
    settings = settings or CaseSettings()
    case_dir = Path(case_dir)
    if not case_dir.is_dir():
        raise DataError(f"case directory {case_dir} does not exist")
    paths = scan_case(case_dir, settings.profile)
    if missing is not None:
        paths.pop(missing, None)
    if not paths:
        patterns = ", ".join(f"{case_dir.name}-{s}{{{','.join(EXTENSIONS)}}}" for s in settings.profile.values())
        raise DataError(f"no modality files in {case_dir}; expected names like {patterns}")
    target = missing_modality(paths)
    ckpt_path = registry.checkpoint_path(target)
    cache = model_cache if model_cache is not None else {}
    if target not in cache:
        ckpt = registry.load(target)
        cache[target] = (ckpt, ckpt.model(settings.use_ema))
    ckpt, model = cache[target]

    start = time.perf_counter()
    loaded = {code: load_volume(p) for code, p in paths.items()}
    seed = case_seed(settings.seed, case_dir.name)
    out_case = Path(out_dir) / case_dir.name
    snapshots = None
    if settings.snapshot_every:
        snap_dir = out_case / "snapshots"
        snap_dir.mkdir(parents=True, exist_ok=True)
        snapshots = lambda t, x: np.save(snap_dir / f"x_{t:05d}.npy", x.numpy())
    volume = synthesize_volumes(ckpt, {c: v.data for c, v in loaded.items()}, seed, settings, model, snapshots)
    out_path = volume_path(out_dir, case_dir.name, target, settings.profile, settings.ext)
    save_volume(out_path, volume, like=loaded[ckpt.condition_order[0]])
    record = {
        "case_id": case_dir.name,
        "target": target,
        "seed": settings.seed,
        "case_seed": seed,
        "checkpoint": str(ckpt_path),
        "output": str(out_path),
        "seconds": round(time.perf_counter() - start, 3),
    }
    (out_case / f"{case_dir.name}-synthesis.json").write_text(json.dumps(record, indent=1) + "\n")
    log.info(json.dumps(record))
    return record


def synthesize_manifest(
    rows: Sequence[Mapping[str, str]],
    root: Path | str,
    registry: Registry,
    out_dir: Path | str,
    settings: CaseSettings | None = None,
    workers: int = 1,
) -> tuple[list[dict], list[tuple[str, str]]]:
    """Run :func:`process_case` for every manifest row.

    Checkpoints are resolved up front so an unknown target fails before any
    sampling. Returns the per-case log records and ``(case_id, error)`` pairs
    for cases that failed.
    """
    settings = settings or CaseSettings()
    cache: dict = {}
    for target in sorted({row["dropped"] for row in rows}):
        ckpt = registry.load(target)
        cache[target] = (ckpt, ckpt.model(settings.use_ema))

    def run(row):
        try:
            return process_case(Path(root) / row["case_id"], registry, out_dir, settings, row["dropped"], cache), None
        except (DataError, SamplingRequestError, OSError) as exc:
            return None, (row["case_id"], str(exc))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            results = list(pool.map(run, rows))
    else:
        results = [run(r) for r in rows]
    done = [r for r, err in results if r is not None]
    failed = [err for _, err in results if err is not None]
    return done, failed
