"""Evaluation metrics: FID, diversity, mIoU, attribute AP/F1, pose RMSE, PR curves and
reference fidelity (PSNR, SSIM, RMSE).

All functions are pure; providers (embeddings, distances, attribute and pose
predictors) are passed in, see providers.py. Absent values (AP with one-class
truths, PR curve without positives) are reported as None / NaN in tables.
"""
from __future__ import annotations
import itertools
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import torch
from scipy import linalg
from torch.nn import functional as F

from .guardrails import DimensionError, NumericError, UsageError

PSD_TOLERANCE = 1e-6
POSE_ANGLES = ("roll", "pitch", "yaw")
REPORT_COLUMNS = ["manipulation", "mode", "roll_rmse", "pitch_rmse", "yaw_rmse", "ap", "f1", "miou", "fid",
                  "diversity_mean", "diversity_std", "recon_l1", "psnr", "ssim", "rmse"]


@dataclass
class GaussianStats:
    mu: np.ndarray
    sigma: np.ndarray


def gaussian_stats(features) -> GaussianStats:
    """Sample mean and unbiased covariance of an [n, D] feature matrix."""
    feats = np.asarray(features, dtype=np.float64)
    if feats.ndim != 2:
        raise DimensionError(f"features must be [n, D], got shape {feats.shape}")
    if feats.shape[0] < 2:
        raise UsageError(f"need at least 2 samples for a covariance, got {feats.shape[0]}")
    sigma = np.atleast_2d(np.cov(feats, rowvar=False, ddof=1))
    return GaussianStats(mu=feats.mean(axis=0), sigma=sigma)


def _psd_sqrt(mat: np.ndarray, what: str) -> np.ndarray:
    sym = (mat + mat.T) / 2.0
    vals, vecs = linalg.eigh(sym)
    if vals.min(initial=0.0) < -PSD_TOLERANCE:
        raise NumericError(f"{what} is not positive semi-definite (min eigenvalue {vals.min():.3e})")
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def fid(a: GaussianStats, b: GaussianStats) -> float:
    """|mu_a - mu_b|^2 + Tr(S_a + S_b - 2 (S_a S_b)^(1/2)), with Tr sqrt(S_a S_b) = Tr sqrt(A S_b A), A = S_a^(1/2)."""
    if a.mu.shape != b.mu.shape or a.sigma.shape != b.sigma.shape:
        raise DimensionError(f"stats dims differ: {a.mu.shape} vs {b.mu.shape}")
    root_a = _psd_sqrt(a.sigma, "sigma_a")
    _psd_sqrt(b.sigma, "sigma_b")
    cross = _psd_sqrt(root_a @ b.sigma @ root_a, "sqrt(sigma_a) sigma_b sqrt(sigma_a)")
    diff = a.mu - b.mu
    value = float(diff @ diff + np.trace(a.sigma) + np.trace(b.sigma) - 2.0 * np.trace(cross))
    if not math.isfinite(value):
        raise NumericError("FID is not finite")
    return value


def diversity(samples_per_input: Sequence[Sequence], distance: Callable[[object, object], float]) -> Tuple[float, float]:
    """Mean pairwise distance over all K(K-1)/2 pairs per input; (mean, std) across inputs."""
    per_input = []
    for samples in samples_per_input:
        if len(samples) < 2:
            raise UsageError(f"diversity needs K >= 2 samples per input, got {len(samples)}")
        dists = [float(distance(a, b)) for a, b in itertools.combinations(samples, 2)]
        per_input.append(float(np.mean(dists)))
    if not per_input:
        raise UsageError("diversity needs at least one input")
    return float(np.mean(per_input)), float(np.std(per_input))


def _as_numpy(mask) -> np.ndarray:
    if isinstance(mask, torch.Tensor):
        return mask.detach().cpu().numpy()
    return np.asarray(mask)


def miou(a, b) -> float:
    """IoU averaged over classes present in either one-hot [R, H, W] mask."""
    a, b = _as_numpy(a) > 0.5, _as_numpy(b) > 0.5
    if a.shape != b.shape:
        raise DimensionError(f"mask shapes differ: {a.shape} vs {b.shape}")
    inter = (a & b).reshape(a.shape[0], -1).sum(axis=1)
    union = (a | b).reshape(a.shape[0], -1).sum(axis=1)
    present = union > 0
    if not present.any():
        return 1.0
    return float(np.mean(inter[present] / union[present]))


def _image_pair(a: torch.Tensor, b: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
    if a.shape != b.shape or a.ndim != 4:
        raise DimensionError(f"expected two [B, C, H, W] images of one shape,"
                             f" got {tuple(a.shape)} and {tuple(b.shape)}")
    unit = lambda x: (x.detach().to(torch.float64).clamp(-1.0, 1.0) + 1.0) / 2.0
    return unit(a), unit(b)


def rmse(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Per-image root mean squared error of [-1, 1] images, measured on the [0, 1] scale -> [B]."""
    a, b = _image_pair(a, b)
    return torch.sqrt((a - b).pow(2).flatten(1).mean(dim=1))


def psnr(a: torch.Tensor, b: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    """Per-image PSNR in dB for a [0, 1] data range; identical images give 10*log10(1/eps)."""
    a, b = _image_pair(a, b)
    mse = (a - b).pow(2).flatten(1).mean(dim=1).clamp_min(eps)
    return 10.0 * torch.log10(1.0 / mse)


def ssim(a: torch.Tensor, b: torch.Tensor, window: int = 11, c1: float = 0.01 ** 2,
         c2: float = 0.03 ** 2) -> torch.Tensor:
    """Per-image mean SSIM with a uniform `window` x `window` box filter -> [B]."""
    a, b = _image_pair(a, b)
    if window < 1 or window % 2 == 0:
        raise UsageError(f"ssim window must be a positive odd size, got {window}")
    pool = lambda x: F.avg_pool2d(x, window, 1, window // 2, count_include_pad=False)
    mu_a, mu_b = pool(a), pool(b)
    var_a = pool(a * a) - mu_a ** 2
    var_b = pool(b * b) - mu_b ** 2
    cov = pool(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return (num / den).flatten(1).mean(dim=1)


def pr_curve(scores, truths) -> Optional[pd.DataFrame]:
    """Precision/recall at every distinct score threshold, highest first.

    None when there are no positives.
    """
    scores = np.asarray(scores, dtype=np.float64)
    truths = np.asarray(truths).astype(bool)
    if scores.shape != truths.shape:
        raise DimensionError(f"{scores.shape[0]} scores vs {truths.shape[0]} truths")
    n_pos = int(truths.sum())
    if n_pos == 0:
        return None
    rows = []
    for t in np.unique(scores)[::-1]:
        predicted = scores >= t
        tp = int((predicted & truths).sum())
        rows.append({"threshold": float(t), "precision": tp / int(predicted.sum()), "recall": tp / n_pos})
    return pd.DataFrame(rows, columns=["threshold", "precision", "recall"])


def average_precision(scores, truths) -> Optional[float]:
    """Area under the interpolated PR curve; None when truths are all one class."""
    truths_arr = np.asarray(truths).astype(bool)
    if truths_arr.size == 0 or truths_arr.all() or not truths_arr.any():
        return None
    curve = pr_curve(scores, truths_arr)
    precision = curve["precision"].to_numpy()
    recall = curve["recall"].to_numpy()
    interpolated = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return float(np.sum(steps * interpolated))


def f1_at(scores, truths, threshold: float = 0.5) -> float:
    predicted = np.asarray(scores, dtype=np.float64) >= threshold
    truths = np.asarray(truths).astype(bool)
    tp = int((predicted & truths).sum())
    if tp == 0:
        return 0.0
    precision = tp / int(predicted.sum())
    recall = tp / int(truths.sum())
    return 2 * precision * recall / (precision + recall)


def ap_f1(scores, truths) -> Tuple[Optional[float], float]:
    if len(scores) != len(truths):
        raise DimensionError(f"{len(scores)} scores vs {len(truths)} truths")
    return average_precision(scores, truths), f1_at(scores, truths)


def pose_rmse(pred: pd.DataFrame, ref: pd.DataFrame) -> Dict[str, float]:
    """Per-angle RMSE over rows matched by id."""
    if set(pred["id"]) != set(ref["id"]) or len(pred) != len(ref):
        raise UsageError("prediction and reference tables must hold the same ids")
    merged = pred.merge(ref, on="id", suffixes=("_pred", "_ref"))
    return {angle: float(np.sqrt(np.mean((merged[f"{angle}_pred"] - merged[f"{angle}_ref"]) ** 2)))
            for angle in POSE_ANGLES}


def pr_curves(tables: Mapping[Tuple[str, str], Tuple[Sequence[float], Sequence[int]]]) -> Dict[Tuple[str, str], Optional[pd.DataFrame]]:
    """(manipulation, attribute) -> (scores, truths)  ==>  same keys -> curve or None."""
    return {key: pr_curve(scores, truths) for key, (scores, truths) in tables.items()}


def export_pr_curves(curves: Mapping[Tuple[str, str], Optional[pd.DataFrame]], out_dir: str | Path) -> list:
    """One CSV per manipulation: attribute, threshold, precision, recall, status."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    frames: Dict[str, list] = {}
    for (manipulation, attribute), curve in curves.items():
        if curve is None:
            frame = pd.DataFrame([{"threshold": np.nan, "precision": np.nan, "recall": np.nan, "status": "absent"}])
        else:
            frame = curve.assign(status="ok")
        frames.setdefault(manipulation, []).append(frame.assign(attribute=attribute))
    written = []
    for manipulation, parts in frames.items():
        path = out_dir / f"pr_{manipulation}.csv"
        pd.concat(parts, ignore_index=True)[["attribute", "threshold", "precision", "recall", "status"]] \
            .to_csv(path, index=False)
        written.append(path)
    return written


def validate_prediction_table(table: pd.DataFrame) -> pd.DataFrame:
    if "id" not in table.columns:
        raise UsageError("prediction table needs an 'id' column")
    if table["id"].duplicated().any():
        raise UsageError("prediction table has duplicate ids")
    numeric = table.drop(columns=["id"]).to_numpy(dtype=np.float64)
    if not np.isfinite(numeric).all():
        raise NumericError("prediction table holds non-finite values")
    return table


def write_prediction_table(table: pd.DataFrame, path: str | Path) -> None:
    validate_prediction_table(table).to_csv(path, index=False)


def read_prediction_table(path: str | Path) -> pd.DataFrame:
    return validate_prediction_table(pd.read_csv(path, dtype={"id": str}))


def format_report(report: pd.DataFrame) -> str:
    if report.empty:
        return "No evaluation rows."
    lines = ["Evaluation report:"]
    lines.append(report.to_string(index=False, float_format=lambda v: f"{v:.4f}", na_rep="-"))
    return "\n".join(lines)
