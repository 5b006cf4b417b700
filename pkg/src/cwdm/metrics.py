"""Full-volume MSE / PSNR / SSIM and split-level reports."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
from scipy import ndimage

from .data import BRATS_PROFILE, DISPLAY_ORDER, PreprocessSpec, load_volume, preprocess_volume, read_manifest, split_extension

PSNR_CAP = 100.0
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_SIGMA = 1.5
SSIM_WINDOW = 7
CROP_MODES = ("full", "cropped_224")
CROPPED_224 = (None, 224, 224)


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    if a.size == 0:
        raise ValueError("empty volume")
    return a, b


def mse(a, b) -> float:
    a, b = _pair(a, b)
    return float(np.mean((a - b) ** 2))


def psnr(a, b, data_range: float = 1.0, cap: float = PSNR_CAP) -> float:
    err = mse(a, b)
    if err == 0.0:
        return cap
    return float(10.0 * math.log10(data_range**2 / err))


def ssim(a, b, data_range: float = 1.0, sigma: float = SSIM_SIGMA, win_size: int = SSIM_WINDOW) -> float:
    """Mean SSIM with a separable Gaussian window over all three axes.

    Local statistics use population (biased) moments. Only voxels whose whole
    window lies inside the volume contribute to the mean.
    """
    a, b = _pair(a, b)
    radius = win_size // 2
    if min(a.shape) < win_size:
        raise ValueError(f"volume {a.shape} smaller than SSIM window {win_size}")
    if np.array_equal(a, b):
        return 1.0
    truncate = radius / sigma

    def local_mean(x):
        return ndimage.gaussian_filter(x, sigma=sigma, truncate=truncate, mode="reflect")

    mu_a, mu_b = local_mean(a), local_mean(b)
    var_a = local_mean(a * a) - mu_a**2
    var_b = local_mean(b * b) - mu_b**2
    cov = local_mean(a * b) - mu_a * mu_b
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    interior = tuple(slice(radius, n - radius) for n in a.shape)
    return float(np.mean((num / den)[interior]))


def center_crop(volume: np.ndarray, target=CROPPED_224) -> np.ndarray:
    """Centered crop to ``target``; ``None`` entries (or smaller axes) are kept whole."""
    index = []
    for n, want in zip(volume.shape, target):
        if want is None or want >= n:
            index.append(slice(None))
        else:
            start = (n - want) // 2
            index.append(slice(start, start + want))
    return volume[tuple(index)]


def apply_crop(volume: np.ndarray, crop_mode: str) -> np.ndarray:
    if crop_mode == "full":
        return volume
    if crop_mode == "cropped_224":
        return center_crop(volume, CROPPED_224)
    raise ValueError(f"unknown crop_mode {crop_mode!r}; expected one of {CROP_MODES}")


def score(pred, truth, crop_mode: str = "full") -> dict[str, float]:
    pred = apply_crop(np.asarray(pred), crop_mode)
    truth = apply_crop(np.asarray(truth), crop_mode)
    return {"mse": mse(pred, truth), "psnr": psnr(pred, truth), "ssim": ssim(pred, truth)}


@dataclass
class CaseMetrics:
    case_id: str
    modality: str
    mse: float
    psnr: float
    ssim: float


@dataclass
class MetricsReport:
    per_case: list[CaseMetrics]
    crop_mode: str = "full"
    missing: list[str] = field(default_factory=list)

    CSV_FIELDS = ("case_id", "modality", "mse", "psnr", "ssim")

    @property
    def aggregates(self) -> dict[str, dict[str, float]]:
        groups: dict[str, list[CaseMetrics]] = {}
        for row in self.per_case:
            groups.setdefault(row.modality, []).append(row)
        out = {m: _mean_rows(groups[m]) for m in DISPLAY_ORDER if m in groups}
        if self.per_case:
            out["Random"] = _mean_rows(self.per_case)
        return out

    def header(self) -> str:
        return (
            f"# crop_mode={self.crop_mode} ssim: K1={SSIM_K1} K2={SSIM_K2} gaussian sigma={SSIM_SIGMA} "
            f"window={SSIM_WINDOW} data_range=1 psnr_cap={PSNR_CAP}"
        )

    def render_table(self) -> str:
        lines = [self.header(), f"{'Missing Modality':<18}{'MSE':>12}{'PSNR':>10}{'SSIM':>9}{'n':>6}"]
        for name, agg in self.aggregates.items():
            lines.append(f"{name:<18}{agg['mse']:>12.3e}{agg['psnr']:>10.2f}{agg['ssim']:>9.3f}{agg['n']:>6d}")
        if self.missing:
            lines.append(f"# missing predictions: {', '.join(self.missing)}")
        return "\n".join(lines) + "\n"

    def write(self, out_dir: Path | str, stem: str = "metrics") -> tuple[Path, Path]:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        table = out_dir / f"{stem}.txt"
        table.write_text(self.render_table())
        rows = out_dir / f"{stem}.csv"
        with open(rows, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.CSV_FIELDS)
            for r in self.per_case:
                writer.writerow([r.case_id, r.modality, repr(r.mse), repr(r.psnr), repr(r.ssim)])
        return table, rows


def _mean_rows(rows) -> dict:
    return {
        "mse": float(np.mean([r.mse for r in rows])),
        "psnr": float(np.mean([r.psnr for r in rows])),
        "ssim": float(np.mean([r.ssim for r in rows])),
        "n": len(rows),
    }


def find_prediction(pred_dir: Path, case_id: str, modality: str, profile: Mapping[str, str]) -> Path | None:
    case_dir = Path(pred_dir) / case_id
    if not case_dir.is_dir():
        return None
    for path in sorted(case_dir.iterdir()):
        stem, ext = split_extension(path)
        if stem == f"{case_id}-{profile[modality]}" and ext in (".nii.gz", ".nii", ".npy"):
            return path
    return None


def evaluate_split(
    predictions_dir: Path | str,
    manifest: Path | str,
    crop_mode: str = "full",
    profile: Mapping[str, str] = BRATS_PROFILE,
    preprocess: PreprocessSpec | None = PreprocessSpec(),
    workers: int = 1,
) -> MetricsReport:
    """Score predictions against the ground-truth files listed in a pseudo-validation manifest.

    Ground truth is normalized with ``preprocess`` (pass ``None`` if it is
    already normalized). Cases without a prediction are listed in
    ``report.missing`` and excluded.
    """
    apply_crop(np.zeros((1, 1, 1)), crop_mode)  # validate before any I/O
    rows = read_manifest(manifest)
    missing, jobs = [], []
    for row in rows:
        path = find_prediction(Path(predictions_dir), row["case_id"], row["dropped"], profile)
        if path is None:
            missing.append(row["case_id"])
        else:
            jobs.append((row, path))

    def run(job):
        row, path = job
        truth = load_volume(row["ground_truth"]).data
        if preprocess is not None:
            truth = preprocess_volume(truth, preprocess)
        pred = load_volume(path).data
        return CaseMetrics(row["case_id"], row["dropped"], **score(pred, truth, crop_mode))

    if workers > 1:
        from concurrent.futures import ThreadPoolExecutor

        with ThreadPoolExecutor(workers) as pool:
            per_case = list(pool.map(run, jobs))
    else:
        per_case = [run(j) for j in jobs]
    return MetricsReport(per_case, crop_mode, missing)
