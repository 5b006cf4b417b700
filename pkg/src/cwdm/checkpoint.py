"""Self-describing checkpoint files and the per-modality registry manifest."""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from pathlib import Path
from typing import Any

import torch

from .data import MODALITIES, PreprocessSpec, check_modality
from .denoiser import DenoiserConfig, UNet3D, build_denoiser
from .schedule import NoiseSchedule, make_schedule

FORMAT = "cwdm-checkpoint"
FORMAT_VERSION = 1


class CheckpointError(RuntimeError):
    pass


class RegistryError(LookupError):
    pass


@dataclass
class Checkpoint:
    path: Path
    payload: dict[str, Any]

    @property
    def target(self) -> str:
        return self.payload["target"]

    @property
    def condition_order(self) -> tuple[str, ...]:
        return tuple(self.payload["condition_order"])

    @property
    def iteration(self) -> int:
        return int(self.payload["iteration"])

    @property
    def model_config(self) -> DenoiserConfig:
        return DenoiserConfig(**self.payload["model_config"])

    @property
    def preprocess(self) -> PreprocessSpec | None:
        spec = self.payload.get("preprocess")
        if spec is None:
            return None
        return PreprocessSpec(spec["clip_lower_pct"], spec["clip_upper_pct"], tuple(spec["normalize_to"]))

    def schedule(self) -> NoiseSchedule:
        return make_schedule(**self.payload["schedule"])

    def model(self, use_ema: bool = True) -> UNet3D:
        model = build_denoiser(self.model_config)
        state = self.payload.get("ema_state") if use_ema else None
        model.load_state_dict(state or self.payload["model_state"])
        model.eval()
        return model


def save_checkpoint(path: Path | str, payload: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = {"format": FORMAT, "format_version": FORMAT_VERSION, **payload}
    tmp = path.with_suffix(path.suffix + ".tmp")
    torch.save(body, tmp)
    tmp.replace(path)
    return path


def load_checkpoint(path: Path | str) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise CheckpointError(f"checkpoint {path} does not exist")
    payload = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not a {FORMAT} file")
    if payload.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"{path} has format version {payload.get('format_version')}, this build reads {FORMAT_VERSION}"
        )
    ckpt = Checkpoint(path, payload)
    check_modality(ckpt.target)
    if ckpt.target in ckpt.condition_order or len(ckpt.condition_order) != 3:
        raise CheckpointError(f"{path}: inconsistent target/condition order")
    return ckpt


def file_sha256(path: Path | str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


REGISTRY_FIELDS = ("modality", "path", "sha256", "status")


@dataclass
class RegistryEntry:
    modality: str
    path: str
    sha256: str
    status: str


class Registry:
    """modality code -> checkpoint, backed by a tab-separated manifest."""

    def __init__(self, entries: dict[str, RegistryEntry], root: Path | None = None):
        self.entries = entries
        self.root = root

    @classmethod
    def read(cls, manifest: Path | str) -> "Registry":
        manifest = Path(manifest)
        if not manifest.is_file():
            raise RegistryError(f"registry manifest {manifest} not found")
        with open(manifest, newline="") as fh:
            rows = list(csv.DictReader(fh, delimiter="\t"))
        entries = {r["modality"]: RegistryEntry(**r) for r in rows}
        return cls(entries, manifest.parent)

    @classmethod
    def from_paths(cls, paths: dict[str, Path | str]) -> "Registry":
        return cls({m: RegistryEntry(m, str(p), file_sha256(p), "complete") for m, p in paths.items()})

    def write(self, manifest: Path | str) -> Path:
        manifest = Path(manifest)
        manifest.parent.mkdir(parents=True, exist_ok=True)
        with open(manifest, "w", newline="") as fh:
            writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
            writer.writerow(REGISTRY_FIELDS)
            for m in MODALITIES:
                if m in self.entries:
                    e = self.entries[m]
                    writer.writerow([e.modality, e.path, e.sha256, e.status])
        return manifest

    def resolve(self, entry: RegistryEntry) -> Path:
        path = Path(entry.path)
        if not path.is_absolute() and self.root is not None:
            path = self.root / path
        return path

    def is_complete(self, modality: str, verify: bool = True) -> bool:
        entry = self.entries.get(modality)
        if entry is None or entry.status != "complete":
            return False
        path = self.resolve(entry)
        return path.is_file() and (not verify or file_sha256(path) == entry.sha256)

    def checkpoint_path(self, modality: str) -> Path:
        check_modality(modality)
        entry = self.entries.get(modality)
        if entry is None or entry.status != "complete":
            raise RegistryError(f"no trained checkpoint registered for target {modality}")
        path = self.resolve(entry)
        if not path.is_file():
            raise RegistryError(f"checkpoint for {modality} missing on disk: {path}")
        return path

    def load(self, modality: str) -> Checkpoint:
        ckpt = load_checkpoint(self.checkpoint_path(modality))
        if ckpt.target != modality:
            raise RegistryError(f"registry maps {modality} to a checkpoint trained for {ckpt.target}")
        return ckpt
