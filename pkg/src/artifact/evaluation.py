"""Reconstruction and segmentation metrics, test-set reports and the lambda sweep."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy import ndimage

from .phantoms import HU_SPAN, LABELS, CorpusManifest, VolumeIOError, load_sample, write_pgm
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

ORGAN_LABELS = {"lung": LABELS["lung"], "liver": LABELS["liver"], "bone": LABELS["bone"]}
REPORT_COLUMNS = (
    "sample_id", "psnr_db", "ssim", "rmse_hu",
    "dsc_lung_gt", "dsc_liver_gt", "dsc_bone_gt", "dsc_mean_gt",
    "dsc_lung_s", "dsc_liver_s", "dsc_bone_s", "dsc_mean_s",
)
METRIC_COLUMNS = REPORT_COLUMNS[1:]

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03


def _arr(x) -> np.ndarray:
    return np.asarray(x.data if hasattr(x, "data") else x, dtype=np.float64)


def psnr(y_hat, y) -> float:
    """``10 log10(1 / MSE)`` on [0, 1] volumes; identical inputs give +inf."""
    a, b = _arr(y_hat), _arr(y)
    if a.shape != b.shape:
        raise ValueError(f"psnr: shapes differ, {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    return math.inf if mse == 0 else 10.0 * math.log10(1.0 / mse)


def rmse_hu(y_hat, y) -> float:
    a, b = _arr(y_hat), _arr(y)
    if a.shape != b.shape:
        raise ValueError(f"rmse_hu: shapes differ, {a.shape} vs {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)) * HU_SPAN)


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - (size - 1) / 2
    g = np.exp(-x ** 2 / (2 * sigma ** 2))
    return g / g.sum()


def _filter_valid(img: np.ndarray, g: np.ndarray) -> np.ndarray:
    """Separable correlation over the two leading axes, keeping only full windows."""
    k = g.size
    out = ndimage.correlate1d(img, g, axis=0, mode="constant")
    out = ndimage.correlate1d(out, g, axis=1, mode="constant")
    lo = k // 2
    return out[lo:img.shape[0] - (k - 1 - lo), lo:img.shape[1] - (k - 1 - lo)]


def ssim(y_hat, y, data_range: float = 1.0) -> float:
    """Mean SSIM over axial slices (``z`` last) with an 11x11 Gaussian window."""
    a, b = _arr(y_hat), _arr(y)
    if a.shape != b.shape:
        raise ValueError(f"ssim: shapes differ, {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError(f"ssim: slice {a.shape[:2]} is smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    g = gaussian_window()
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a = _filter_valid(a, g)
    mu_b = _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a ** 2
    sbb = _filter_valid(b * b, g) - mu_b ** 2
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * sab + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2)
    per_slice = (num / den).mean(axis=(0, 1))
    return float(per_slice.mean())


def _organ_label(organ) -> int:
    if isinstance(organ, str):
        if organ not in ORGAN_LABELS:
            raise ValueError(f"unknown organ {organ!r}; expected one of {sorted(ORGAN_LABELS)}")
        return ORGAN_LABELS[organ]
    if int(organ) not in ORGAN_LABELS.values():
        raise ValueError(f"unknown organ label {organ!r}")
    return int(organ)


def dsc(mask_a, mask_b, organ) -> float:
    """Dice of one organ's binary masks; both empty -> 1, one empty -> 0."""
    label = _organ_label(organ)
    a, b = np.asarray(getattr(mask_a, "data", mask_a)), np.asarray(getattr(mask_b, "data", mask_b))
    if a.shape != b.shape:
        raise ValueError(f"dsc: shapes differ, {a.shape} vs {b.shape}")
    a, b = a == label, b == label
    na, nb = int(a.sum()), int(b.sum())
    if na + nb == 0:
        return 1.0
    return 2.0 * int(np.count_nonzero(a & b)) / (na + nb)


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


@dataclass
class MetricsReport:
    run_id: str
    weights: dict
    rows: list[dict]
    aggregate: dict = field(default_factory=dict)  # column -> {"mean", "std", "count"}
    n_psnr_infinite: int = 0
    missing: list[str] = field(default_factory=list)

    @property
    def n_samples(self) -> int:
        return len(self.rows)

    def mean(self, column: str) -> float:
        return self.aggregate[column]["mean"]

    def to_json(self) -> str:
        return json.dumps({
            "run_id": self.run_id, "weights": self.weights, "n_samples": self.n_samples,
            "aggregate": self.aggregate, "n_psnr_infinite": self.n_psnr_infinite, "missing": self.missing,
        }, indent=2, sort_keys=True)


def aggregate_rows(rows: list[dict]) -> tuple[dict, int]:
    """Per-column mean and population std; infinite PSNR entries are left out and counted."""
    agg = {}
    n_inf = 0
    for col in METRIC_COLUMNS:
        vals = np.array([float(r[col]) for r in rows], dtype=np.float64)
        finite = vals[np.isfinite(vals)]
        if col == "psnr_db":
            n_inf = int(np.count_nonzero(np.isinf(vals)))
        if finite.size:
            agg[col] = {"mean": float(finite.mean()), "std": float(finite.std()), "count": int(finite.size)}
        else:
            agg[col] = {"mean": math.inf if vals.size else math.nan, "std": 0.0, "count": 0}
    return agg, n_inf


def write_report_csv(report: MetricsReport, path: Path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(REPORT_COLUMNS)
        for r in report.rows:
            w.writerow([r["sample_id"]] + [repr(float(r[c])) for c in METRIC_COLUMNS])
        w.writerow(["aggregate"] + [repr(float(report.aggregate[c]["mean"])) for c in METRIC_COLUMNS])


def read_report_csv(path: Path) -> tuple[list[dict], dict]:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or rows[-1]["sample_id"] != "aggregate":
        raise ValueError(f"{path} has no aggregate row")
    conv = [{k: (v if k == "sample_id" else float(v)) for k, v in r.items()} for r in rows]
    return conv[:-1], conv[-1]


def sample_metrics(sample_id: str, y_hat: np.ndarray, y: np.ndarray, mask_gt: np.ndarray,
                   mask_pred: np.ndarray, mask_ref: np.ndarray) -> dict:
    row = {"sample_id": sample_id, "psnr_db": psnr(y_hat, y), "ssim": ssim(y_hat, y), "rmse_hu": rmse_hu(y_hat, y)}
    for suffix, ref in (("gt", mask_gt), ("s", mask_ref)):
        scores = [dsc(mask_pred, ref, organ) for organ in ORGAN_LABELS]
        for organ, s in zip(ORGAN_LABELS, scores):
            row[f"dsc_{organ}_{suffix}"] = s
        row[f"dsc_mean_{suffix}"] = float(np.mean(scores))
    return row


def _mask_image(mask: np.ndarray) -> np.ndarray:
    return mask.astype(np.float64) / 3.0


def evaluate_testset(checkpoint, manifest: CorpusManifest, seg, out_dir: Path,
                     reconstructor: Callable | None = None, run_id: str | None = None,
                     weights: dict | None = None, split: str = "recon_test",
                     previews: int = 1, figures: bool = True) -> MetricsReport:
    """Reconstruct every test sample and score it against the phantom truth.

    ``reconstructor(sample) -> normalized volume`` overrides the generator, e.g.
    to evaluate ground truth against itself.  DSC_gt compares the segmentation
    of the reconstruction with the exact phantom labels, DSC_S with the
    segmentation of the true volume.
    """
    from .networks import predict_labels
    from .training import load_generator

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = manifest.split(split) if split in manifest.splits else []
    if not entries:
        raise VolumeIOError(f"corpus {manifest.root} has no {split!r} samples to evaluate")
    meta = {}
    if reconstructor is None:
        g, meta = load_generator(Path(checkpoint))

        def reconstructor(s):
            with no_grad():
                return g(Tensor(s.x_ap), Tensor(s.x_lat)).data

    rows, missing = [], []
    preview_dir = out_dir / "previews"
    for entry in entries:
        try:
            s = load_sample(manifest, entry)
        except (OSError, VolumeIOError) as exc:
            log.warning("sample %s unreadable, skipped: %s", entry.get("id"), exc)
            missing.append(str(entry.get("id")))
            continue
        y_hat = np.asarray(reconstructor(s), dtype=np.float64)
        with no_grad():
            pred = predict_labels(seg(Tensor(y_hat)))
            ref = predict_labels(seg(Tensor(s.y)))
        rows.append(sample_metrics(s.sample_id, y_hat, s.y, s.mask, pred, ref))
        if len(rows) <= previews:
            preview_dir.mkdir(exist_ok=True)
            z = s.y.shape[-1] // 2
            write_pgm(preview_dir / f"{s.sample_id}_truth.pgm", s.y[:, :, z])
            write_pgm(preview_dir / f"{s.sample_id}_recon.pgm", y_hat[:, :, z])
            write_pgm(preview_dir / f"{s.sample_id}_mask_truth.pgm", _mask_image(s.mask[:, :, z]))
            write_pgm(preview_dir / f"{s.sample_id}_mask_recon.pgm", _mask_image(pred[:, :, z]))
            if figures:
                from .plotting import plot_slices

                plot_slices(s.y, y_hat, s.mask, pred, out_dir / f"slices_{s.sample_id}.png")
    if missing:
        log.warning("%d of %d test samples missing", len(missing), len(entries))
    if not rows:
        raise VolumeIOError(f"no readable test samples in {manifest.root}")
    agg, n_inf = aggregate_rows(rows)
    report = MetricsReport(
        run_id=run_id or out_dir.name,
        weights=weights if weights is not None else meta.get("weights", {}),
        rows=rows, aggregate=agg, n_psnr_infinite=n_inf, missing=missing,
    )
    write_report_csv(report, out_dir / "metrics.csv")
    (out_dir / "metrics.json").write_text(report.to_json() + "\n", encoding="utf-8")
    if figures:
        from .plotting import plot_metrics

        plot_metrics(report, out_dir / "metrics.png")
    return report


# ---------------------------------------------------------------------------
# lambda sweep
# ---------------------------------------------------------------------------

SWEEP_LAMBDA_S = (0.0, 0.5, 1.0, 2.0, 4.0)
SWEEP_LAMBDA_P = (0.0, 0.25, 0.5, 1.0)
SWEEP_COLUMNS = ("lambda_s", "lambda_p", "run_id", "psnr_db", "ssim", "rmse_hu", "dsc_mean_gt", "dsc_mean_s")


def sweep_grid(lambda_s=SWEEP_LAMBDA_S, lambda_p=SWEEP_LAMBDA_P) -> list[tuple[float, float]]:
    return [(float(s), float(p)) for s in lambda_s for p in lambda_p]


def cell_name(ls: float, lp: float) -> str:
    return f"ls{ls:g}_lp{lp:g}"


def run_sweep(cfg, seg, out_dir: Path, lambda_s=SWEEP_LAMBDA_S, lambda_p=SWEEP_LAMBDA_P,
              train: Callable | None = None, figures: bool = True) -> list[MetricsReport]:
    """Train and evaluate one run per (lambda_s, lambda_p) cell; writes a summary CSV."""
    from .training import open_corpus, train_gan, write_config_snapshot

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = open_corpus(cfg)
    train = train or train_gan
    reports = []
    for ls, lp in sweep_grid(lambda_s, lambda_p):
        name = cell_name(ls, lp)
        cell_cfg = cfg.with_overrides([f"weights.lambda_s={ls!r}", f"weights.lambda_p={lp!r}"])
        cell_dir = out_dir / name
        write_config_snapshot(cell_cfg, cell_dir)
        run = train(cell_cfg, seg=seg if ls > 0 else None, out_dir=cell_dir)
        reports.append(evaluate_testset(run.checkpoints[-1], manifest, seg, cell_dir / "eval", run_id=name,
                                        weights=cell_cfg.weights.to_dict(), figures=figures))
    with open(out_dir / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_COLUMNS)
        for r in reports:
            w.writerow([r.weights["lambda_s"], r.weights["lambda_p"], r.run_id]
                       + [repr(r.mean(c)) for c in SWEEP_COLUMNS[3:]])
    if figures:
        from .plotting import plot_sweep

        plot_sweep(reports, out_dir / "sweep.png")
    return reports
