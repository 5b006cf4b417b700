"""Volume I/O, intensity preprocessing, dataset scanning and toy data.

Dataset layout is ``<root>/<case_id>/<case_id>-<suffix>.<ext>`` where the
suffix maps to a modality code through a naming profile. NIfTI files
(``.nii.gz``/``.nii``) go through nibabel; ``.npy`` is a metadata-free
fallback used mostly by tests.
"""

from __future__ import annotations

import csv
import logging
import warnings
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import ndimage

log = logging.getLogger(__name__)

MODALITIES = ("FLAIR", "T1", "T1ce", "T2")
# column order used for figures and tables
DISPLAY_ORDER = ("T1", "T1ce", "T2", "FLAIR")
BRATS_PROFILE = {"T1": "t1n", "T1ce": "t1c", "T2": "t2w", "FLAIR": "t2f"}
EXTENSIONS = (".nii.gz", ".nii", ".npy")


class DataError(ValueError):
    pass


def check_modality(code: str) -> str:
    if code not in MODALITIES:
        raise DataError(f"unknown modality {code!r}; expected one of {', '.join(MODALITIES)}")
    return code


def condition_order(target: str) -> tuple[str, str, str]:
    """The three conditioning modalities for ``target``, in canonical order."""
    check_modality(target)
    return tuple(m for m in MODALITIES if m != target)


# --------------------------------------------------------------------------
# volumes


@dataclass
class Volume3D:
    data: np.ndarray
    affine: np.ndarray | None = None
    header: object | None = field(default=None, repr=False)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape


def split_extension(path: Path | str) -> tuple[str, str]:
    name = Path(path).name
    for ext in EXTENSIONS:
        if name.endswith(ext):
            return name[: -len(ext)], ext
    return Path(name).stem, Path(name).suffix


def load_volume(path: Path | str) -> Volume3D:
    path = Path(path)
    _, ext = split_extension(path)
    if ext == ".npy":
        return Volume3D(np.load(path))
    if ext in (".nii", ".nii.gz"):
        import nibabel as nib

        img = nib.load(str(path))
        return Volume3D(np.asarray(img.dataobj), img.affine, img.header)
    raise DataError(f"unsupported volume format: {path}")


def save_volume(path: Path | str, volume: Volume3D | np.ndarray, like: Volume3D | None = None) -> Path:
    """Write a volume; metadata comes from ``volume`` or, failing that, ``like``."""
    path = Path(path)
    if not isinstance(volume, Volume3D):
        volume = Volume3D(np.asarray(volume))
    if volume.affine is None and like is not None:
        volume = replace(volume, affine=like.affine, header=like.header)
    data = np.asarray(volume.data, dtype=np.float32)
    path.parent.mkdir(parents=True, exist_ok=True)
    _, ext = split_extension(path)
    if ext == ".npy":
        np.save(path, data)
    elif ext in (".nii", ".nii.gz"):
        import nibabel as nib

        affine = volume.affine if volume.affine is not None else np.eye(4)
        header = volume.header.copy() if volume.header is not None else None
        img = nib.Nifti1Image(data, affine, header)
        img.header.set_data_dtype(np.float32)
        nib.save(img, str(path))
    else:
        raise DataError(f"unsupported volume format: {path}")
    return path


# --------------------------------------------------------------------------
# preprocessing


@dataclass(frozen=True)
class PreprocessSpec:
    clip_lower_pct: float = 0.1
    clip_upper_pct: float = 0.1
    normalize_to: tuple[float, float] = (0.0, 1.0)

    def __post_init__(self):
        for pct in (self.clip_lower_pct, self.clip_upper_pct):
            if not 0.0 <= pct < 50.0:
                raise DataError(f"clip percentile must lie in [0, 50), got {pct}")
        lo, hi = self.normalize_to
        if not lo < hi:
            raise DataError(f"normalize_to must be ordered, got {self.normalize_to}")


def preprocess_volume(raw: np.ndarray, spec: PreprocessSpec = PreprocessSpec()) -> np.ndarray:
    """Clip to the percentile band of the volume's own intensities, then rescale.

    Percentiles use linear interpolation over every voxel, background
    included. A volume with an empty band maps to the lower bound of
    ``normalize_to`` and triggers a warning.
    """
    data = np.asarray(raw, dtype=np.float64)
    if data.size == 0:
        raise DataError("cannot preprocess an empty volume")
    lo, hi = np.percentile(data, [spec.clip_lower_pct, 100.0 - spec.clip_upper_pct])
    out_lo, out_hi = spec.normalize_to
    if not hi > lo:
        warnings.warn("degenerate intensity range; volume mapped to constant", RuntimeWarning, stacklevel=2)
        return np.full(data.shape, out_lo, dtype=np.float32)
    clipped = np.clip(data, lo, hi)
    scaled = (clipped - lo) / (hi - lo) * (out_hi - out_lo) + out_lo
    return scaled.astype(np.float32)


# --------------------------------------------------------------------------
# records and scanning


@dataclass(frozen=True)
class SubjectRecord:
    subject_id: str
    modality_paths: Mapping[str, Path]
    missing: str | None = None
    split: str = "train"
    ground_truth: Path | None = None

    @property
    def available(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if m in self.modality_paths and m != self.missing)

    @property
    def complete(self) -> bool:
        return self.missing is None and all(m in self.modality_paths for m in MODALITIES)


def scan_case(case_dir: Path | str, profile: Mapping[str, str] = BRATS_PROFILE) -> dict[str, Path]:
    """Map modality code to file for one case directory."""
    case_dir = Path(case_dir)
    by_suffix = {suffix: code for code, suffix in profile.items()}
    found: dict[str, Path] = {}
    for path in sorted(p for p in case_dir.iterdir() if p.is_file()):
        stem, ext = split_extension(path)
        if ext not in EXTENSIONS or "-" not in stem:
            log.debug("ignoring %s", path)
            continue
        code = by_suffix.get(stem.rsplit("-", 1)[1])
        if code is None:
            log.debug("ignoring %s (unknown suffix)", path)
            continue
        if code in found:
            raise DataError(f"case {case_dir.name}: two files map to {code}: {found[code].name}, {path.name}")
        found[code] = path
    return found


def scan_dataset(root: Path | str, profile: Mapping[str, str] = BRATS_PROFILE) -> list[SubjectRecord]:
    root = Path(root)
    if not root.is_dir():
        raise DataError(f"dataset root {root} is not a directory")
    records = []
    for case_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        paths = scan_case(case_dir, profile)
        if paths:
            records.append(SubjectRecord(case_dir.name, paths))
    return records


def load_subject(record: SubjectRecord, spec: PreprocessSpec | None = None) -> dict[str, np.ndarray]:
    """Load the available modalities of ``record``, optionally preprocessing them."""
    volumes = {}
    for code in record.available:
        data = load_volume(record.modality_paths[code]).data
        volumes[code] = preprocess_volume(data, spec) if spec is not None else np.asarray(data, dtype=np.float32)
    return volumes


def volume_path(root: Path | str, case_id: str, code: str, profile: Mapping[str, str] = BRATS_PROFILE, ext: str = ".nii.gz") -> Path:
    return Path(root) / case_id / f"{case_id}-{profile[code]}{ext}"


# --------------------------------------------------------------------------
# pseudo-validation


MANIFEST_FIELDS = ("case_id", "dropped", "ground_truth")


def make_pseudo_validation(records: Iterable[SubjectRecord], seed: int) -> list[SubjectRecord]:
    """Drop one modality per subject, uniformly and independently."""
    records = list(records)
    for rec in records:
        if not rec.complete:
            raise DataError(f"case {rec.subject_id} is incomplete; pseudo-validation needs all four modalities")
    rng = np.random.default_rng(seed)
    choices = rng.integers(0, len(MODALITIES), size=len(records))
    out = []
    for rec, k in zip(records, choices):
        dropped = MODALITIES[int(k)]
        out.append(replace(rec, missing=dropped, split="pseudo-val", ground_truth=rec.modality_paths[dropped]))
    return out


def write_manifest(records: Iterable[SubjectRecord], path: Path | str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, delimiter="\t", lineterminator="\n")
        writer.writerow(MANIFEST_FIELDS)
        for rec in records:
            writer.writerow([rec.subject_id, rec.missing, str(rec.ground_truth)])
    return path


def read_manifest(path: Path | str) -> list[dict[str, str]]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh, delimiter="\t"))
    for row in rows:
        check_modality(row["dropped"])
    return rows


# --------------------------------------------------------------------------
# toy data


def _phantom(shape: tuple[int, int, int], rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    grids = np.meshgrid(*[np.linspace(-1, 1, n) for n in shape], indexing="ij")
    radii = rng.uniform(0.65, 0.85, size=3)
    mask = sum((g / r) ** 2 for g, r in zip(grids, radii)) <= 1.0
    field_ = ndimage.gaussian_filter(rng.standard_normal(shape), sigma=max(shape) / 10, mode="reflect")
    field_ = (field_ - field_.min()) / (field_.max() - field_.min())
    # a bright "lesion" that the different contrasts render differently
    centre = rng.uniform(-0.3, 0.3, size=3)
    lesion = np.exp(-sum((g - c) ** 2 for g, c in zip(grids, centre)) / 0.02)
    return np.clip(0.7 * field_ + 0.3 * lesion, 0.0, 1.0), mask


TOY_CONTRASTS = {
    "T1": lambda p: 0.2 + 0.8 * p,
    "T1ce": lambda p: 0.15 + 0.85 * p**2,
    "T2": lambda p: 1.0 - 0.8 * p,
    "FLAIR": lambda p: 0.2 + 0.8 * np.sin(np.pi * p / 2) ** 3,
}


def toy_subject(shape: tuple[int, int, int], rng: np.random.Generator) -> dict[str, np.ndarray]:
    phantom, mask = _phantom(shape, rng)
    return {code: np.where(mask, fn(phantom), 0.0).astype(np.float32) for code, fn in TOY_CONTRASTS.items()}


def generate_toy_dataset(
    n_subjects: int,
    shape: tuple[int, int, int],
    seed: int,
    out_dir: Path | str,
    profile: Mapping[str, str] = BRATS_PROFILE,
    ext: str = ".nii.gz",
) -> list[SubjectRecord]:
    """Write ``n_subjects`` synthetic four-contrast cases under ``out_dir``.

    Every contrast is a fixed monotone or smooth remapping of one shared
    phantom, so the modalities share a support mask and each one is a
    deterministic function of the others.
    """
    out_dir = Path(out_dir)
    rng = np.random.default_rng(seed)
    records = []
    for i in range(n_subjects):
        case_id = f"TOY-{i:05d}"
        paths = {}
        for code, data in toy_subject(tuple(shape), rng).items():
            paths[code] = save_volume(volume_path(out_dir, case_id, code, profile, ext), Volume3D(data, np.eye(4)))
        records.append(SubjectRecord(case_id, paths))
    return records
