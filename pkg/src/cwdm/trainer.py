"""Training loop, resumable checkpoints and the four-model orchestration."""

from __future__ import annotations

import copy
import csv
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Registry, RegistryEntry, file_sha256, load_checkpoint, save_checkpoint
from .config import RunConfig
from .data import MODALITIES, DataError, condition_order, load_subject, scan_dataset
from .denoiser import UNet3D, build_denoiser
from .diffusion import encode_subject, stack_input, training_loss
from .schedule import q_sample
from .wavelet import pad_to_even

log = logging.getLogger(__name__)

LOSS_FIELDS = ("iteration", "loss", "seconds_elapsed")


class TrainingDiverged(RuntimeError):
    def __init__(self, iteration: int, loss: float):
        super().__init__(f"non-finite loss {loss} at iteration {iteration}")
        self.iteration = iteration
        self.loss = loss


@dataclass
class TrainResult:
    checkpoint: Path
    loss_log: Path
    iteration: int
    losses: list[float] = field(default_factory=list, repr=False)


def rng_streams(seed: int) -> dict[str, int]:
    """Independent integer seeds for the named random streams of a run."""
    names = ("init", "subject", "timestep", "noise")
    return {name: int(np.random.SeedSequence([seed, i]).generate_state(1)[0]) for i, name in enumerate(names)}


def sample_timesteps(rng: np.random.Generator, T: int, n: int = 1) -> np.ndarray:
    """Uniform draws from {1, ..., T}."""
    return rng.integers(1, T + 1, size=n)


def pad_multiple(model_config) -> int:
    # coefficients are half-size, and must divide by the U-Net's 2^(levels-1)
    return 2 ** model_config.depth_levels


def prepare_subjects(config: RunConfig, target: str, records=None):
    """Load, preprocess, pad and wavelet-encode every training subject once."""
    if records is None:
        if not config.data.root:
            raise DataError("data.root is not set")
        records = scan_dataset(config.data.root, config.data.profile)
    if not records:
        raise DataError(f"no cases found under {config.data.root}")
    order = condition_order(target)
    multiple = pad_multiple(config.model)
    encoded = []
    for rec in records:
        if not rec.complete:
            missing = sorted(set(MODALITIES) - set(rec.modality_paths))
            raise DataError(f"training case {rec.subject_id} lacks {missing}")
        volumes = load_subject(rec, config.data.preprocess_spec())
        volumes = {m: pad_to_even(v, multiple)[0] for m, v in volumes.items()}
        encoded.append(encode_subject(volumes, target, order))
    return encoded


class Trainer:
    """Holds model, optimizer and RNG streams; every piece of state is checkpointable."""

    def __init__(self, config: RunConfig, target: str | None = None):
        self.config = config.validate()
        self.target = target or config.train.target
        self.order = condition_order(self.target)
        self.schedule = config.schedule.build()
        tc = config.train
        streams = rng_streams(tc.seed)
        self.model: UNet3D = build_denoiser(config.model, seed=streams["init"])
        self.optimizer = torch.optim.Adam(
            self.model.parameters(), lr=tc.learning_rate, betas=(tc.adam_beta1, tc.adam_beta2), eps=tc.adam_eps
        )
        self.ema = copy.deepcopy(self.model).requires_grad_(False) if tc.ema_decay > 0 else None
        self.subject_rng = np.random.default_rng(streams["subject"])
        self.timestep_rng = np.random.default_rng(streams["timestep"])
        self.noise_gen = torch.Generator().manual_seed(streams["noise"])
        self.iteration = 0
        self.elapsed = 0.0

    # -- state ---------------------------------------------------------------

    def state(self) -> dict:
        tc = self.config.train
        return {
            "target": self.target,
            "condition_order": list(self.order),
            "iteration": self.iteration,
            "elapsed": self.elapsed,
            "model_config": self.config.model.to_dict(),
            "model_state": self.model.state_dict(),
            "ema_state": self.ema.state_dict() if self.ema is not None else None,
            "optimizer_state": self.optimizer.state_dict(),
            "optimizer": {"name": "adam", "lr": tc.learning_rate, "betas": [tc.adam_beta1, tc.adam_beta2], "eps": tc.adam_eps},
            "schedule": self.schedule.params(),
            "preprocess": _spec_dict(self.config.data.preprocess_spec()),
            "rng": {
                "subject": self.subject_rng.bit_generator.state,
                "timestep": self.timestep_rng.bit_generator.state,
                "noise": self.noise_gen.get_state(),
            },
            "run_config": self.config.to_dict(),
        }

    def load_state(self, payload: dict):
        if payload["target"] != self.target:
            raise DataError(f"checkpoint trains {payload['target']}, config asks for {self.target}")
        if payload["schedule"] != self.schedule.params():
            raise DataError("checkpoint schedule does not match config")
        self.model.load_state_dict(payload["model_state"])
        self.optimizer.load_state_dict(payload["optimizer_state"])
        if self.ema is not None and payload.get("ema_state"):
            self.ema.load_state_dict(payload["ema_state"])
        self.subject_rng.bit_generator.state = payload["rng"]["subject"]
        self.timestep_rng.bit_generator.state = payload["rng"]["timestep"]
        self.noise_gen.set_state(payload["rng"]["noise"])
        self.iteration = int(payload["iteration"])
        self.elapsed = float(payload.get("elapsed", 0.0))

    def save(self, out_dir: Path) -> Path:
        return save_checkpoint(Path(out_dir) / "checkpoints" / f"iter_{self.iteration:08d}.pt", self.state())

    # -- optimization --------------------------------------------------------

    def batch(self, subjects):
        tc = self.config.train
        idx = self.subject_rng.integers(0, len(subjects), size=tc.batch_size)
        ts = sample_timesteps(self.timestep_rng, self.schedule.T, tc.batch_size)
        inputs, targets = [], []
        for i, t in zip(idx, ts):
            x0, cond = subjects[int(i)]
            noise = torch.randn(x0.shape, generator=self.noise_gen)
            inputs.append(stack_input(q_sample(x0, int(t), noise, self.schedule), cond))
            targets.append(x0)
        return torch.stack(inputs), torch.as_tensor(ts), torch.stack(targets)

    def learning_rate(self) -> float:
        tc = self.config.train
        if tc.warmup_iterations > 0:
            return tc.learning_rate * min(1.0, (self.iteration + 1) / tc.warmup_iterations)
        return tc.learning_rate

    def step(self, X, t, x0) -> float:
        tc = self.config.train
        self.model.train()
        for group in self.optimizer.param_groups:
            group["lr"] = self.learning_rate()
        loss = training_loss(self.model(X, t), x0)
        value = float(loss.detach())
        if not math.isfinite(value):
            raise TrainingDiverged(self.iteration + 1, value)
        self.optimizer.zero_grad(set_to_none=True)
        loss.backward()
        if tc.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(self.model.parameters(), tc.grad_clip)
        self.optimizer.step()
        if self.ema is not None:
            with torch.no_grad():
                for e, p in zip(self.ema.parameters(), self.model.parameters()):
                    e.mul_(tc.ema_decay).add_(p, alpha=1 - tc.ema_decay)
        self.iteration += 1
        return value


def _spec_dict(spec):
    return None if spec is None else {**asdict(spec), "normalize_to": list(spec.normalize_to)}


def _reset_loss_log(path: Path, keep_through: int):
    rows = []
    if path.is_file() and keep_through > 0:
        with open(path, newline="") as fh:
            rows = [r for r in csv.reader(fh, delimiter="\t")][1:]
        rows = [r for r in rows if int(r[0]) <= keep_through]
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(LOSS_FIELDS)
        writer.writerows(rows)


def train(
    config: RunConfig,
    out_dir: Path | str,
    target: str | None = None,
    resume: Path | str | None = None,
    stop_after: int | None = None,
    subjects=None,
) -> TrainResult:
    """Train one target-modality model.

    ``resume`` continues from a checkpoint (weights, optimizer moments and
    RNG streams), so an interrupted run reproduces an uninterrupted one.
    ``stop_after`` ends the run early at that iteration, checkpointing it.
    """
    out_dir = Path(out_dir)
    trainer = Trainer(config, target)
    if subjects is None:
        subjects = prepare_subjects(config, trainer.target)
    if resume is not None:
        trainer.load_state(load_checkpoint(resume).payload)
    out_dir.mkdir(parents=True, exist_ok=True)
    config.dump(out_dir / "resolved_config.yaml")
    loss_log = out_dir / "loss.tsv"
    _reset_loss_log(loss_log, trainer.iteration)

    tc = config.train
    end = tc.iterations if stop_after is None else min(stop_after, tc.iterations)
    losses = []
    start = time.perf_counter() - trainer.elapsed
    checkpoint = None
    with open(loss_log, "a", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        while trainer.iteration < end:
            X, t, x0 = trainer.batch(subjects)
            value = trainer.step(X, t, x0)
            losses.append(value)
            trainer.elapsed = time.perf_counter() - start
            writer.writerow([trainer.iteration, repr(value), f"{trainer.elapsed:.3f}"])
            if trainer.iteration % tc.checkpoint_every == 0 or trainer.iteration == end:
                fh.flush()
                checkpoint = trainer.save(out_dir)
                log.info("%s iter %d loss %.4g", trainer.target, trainer.iteration, value)
    if checkpoint is None:
        checkpoint = trainer.save(out_dir)
    return TrainResult(checkpoint, loss_log, trainer.iteration, losses)


def train_all(
    config: RunConfig,
    out_root: Path | str,
    skip_existing: bool = False,
    targets=MODALITIES,
) -> tuple[Path, list[str]]:
    """Train one model per target modality and write ``registry.tsv``.

    Returns the manifest path and the list of targets that failed. Failures
    do not stop the remaining targets.
    """
    out_root = Path(out_root)
    manifest = out_root / "registry.tsv"
    registry = Registry.read(manifest) if manifest.is_file() else Registry({}, out_root)
    failures = []
    for target in targets:
        if skip_existing and registry.is_complete(target):
            log.info("skipping %s: registered checkpoint present", target)
            continue
        try:
            result = train(config, out_root / target, target=target)
        except Exception as exc:  # noqa: BLE001 - recorded, remaining targets still run
            log.error("training %s failed: %s", target, exc)
            registry.entries[target] = RegistryEntry(target, "", "", "failed")
            failures.append(target)
        else:
            rel = result.checkpoint.relative_to(out_root)
            registry.entries[target] = RegistryEntry(target, str(rel), file_sha256(result.checkpoint), "complete")
        registry.write(manifest)
    return manifest, failures
