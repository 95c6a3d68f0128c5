import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Dict, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from dotenv import load_dotenv
from scipy import ndimage

from errors import ConfigError, DataError, DimensionMismatchError, ImageTooSmallError
from schemas import QualityItem, QualityReport, SplitSummary

load_dotenv()

logger = logging.getLogger(__name__)

SSIM_SIGMA = 1.5
SSIM_TRUNCATE = 3.5
SSIM_K1 = 0.01
SSIM_K2 = 0.03
SSIM_WINDOW = 11
DEFAULT_IGNORE_BORDER = 4


def _check_pair(a: np.ndarray, b: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"Image shapes differ: {a.shape} vs {b.shape}")
    return a, b


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0, ignore_border: int = DEFAULT_IGNORE_BORDER) -> float:
    """PSNR in dB over the interior, MSE pooled over all channels; inf when identical"""
    a, b = _check_pair(a, b)
    if peak <= 0:
        raise ConfigError(f"Peak must be positive, got {peak}")
    if ignore_border < 0 or 2 * ignore_border >= min(a.shape[:2]):
        raise ImageTooSmallError(f"Border {ignore_border} too large for image {a.shape[:2]}")
    if ignore_border:
        a = a[ignore_border:-ignore_border, ignore_border:-ignore_border]
        b = b[ignore_border:-ignore_border, ignore_border:-ignore_border]
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _ssim_map(a: np.ndarray, b: np.ndarray, data_range: float) -> np.ndarray:
    def blur(x: np.ndarray) -> np.ndarray:
        return ndimage.gaussian_filter(x, sigma=SSIM_SIGMA, truncate=SSIM_TRUNCATE, mode="reflect")

    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    mu_a, mu_b = blur(a), blur(b)
    var_a = blur(a * a) - mu_a * mu_a
    var_b = blur(b * b) - mu_b * mu_b
    cov = blur(a * b) - mu_a * mu_b
    numerator = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    denominator = (mu_a * mu_a + mu_b * mu_b + c1) * (var_a + var_b + c2)
    return numerator / denominator


def ssim(a: np.ndarray, b: np.ndarray, ignore_border: int = DEFAULT_IGNORE_BORDER, data_range: float = 1.0) -> float:
    """Single-scale SSIM, Gaussian window sigma 1.5, averaged over channels.

    The map is averaged where the 11x11 window lies inside the image, shrunk
    further when ``ignore_border`` exceeds the window half-width.
    """
    a, b = _check_pair(a, b)
    if min(a.shape[:2]) < SSIM_WINDOW:
        raise ImageTooSmallError(f"Image {a.shape[:2]} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window")
    crop = max((SSIM_WINDOW - 1) // 2, ignore_border)
    if 2 * crop >= min(a.shape[:2]):
        raise ImageTooSmallError(f"Border {ignore_border} too large for image {a.shape[:2]}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    scores = []
    for channel in range(a.shape[2]):
        ssim_map = _ssim_map(a[..., channel], b[..., channel], data_range)
        scores.append(ssim_map[crop:-crop, crop:-crop].mean())
    return float(np.mean(scores))


class MetricsService:
    """Full-reference quality evaluation"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("FSTACK_THREADS", "4"))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    def evaluate(
        self,
        outputs: Sequence[Tuple[str, np.ndarray]],
        ground_truths: Sequence[Tuple[str, np.ndarray]],
        ignore_border: int = DEFAULT_IGNORE_BORDER,
        splits: Optional[Dict[str, str]] = None,
    ) -> QualityReport:
        """Score every output against the ground truth with the same id"""
        if not outputs:
            raise DataError("no items", stage="eval")
        predicted = dict(outputs)
        reference = dict(ground_truths)
        if set(predicted) != set(reference):
            missing = sorted(set(predicted) ^ set(reference))
            raise DataError(f"id mismatch between outputs and ground truth: {missing}", stage="eval")

        ids = sorted(predicted)

        def score(item_id: str) -> QualityItem:
            pred, gt = predicted[item_id], reference[item_id]
            try:
                return QualityItem(
                    id=item_id,
                    psnr=psnr(pred, gt, ignore_border=ignore_border),
                    ssim=ssim(pred, gt, ignore_border=ignore_border),
                    split=(splits or {}).get(item_id),
                )
            except DataError as e:
                e.stage, e.item = "eval", item_id
                raise

        items = list(self.executor.map(score, ids))
        frame = pd.DataFrame([item.model_dump() for item in items])
        summaries = []
        if frame["split"].notna().any():
            grouped = frame.dropna(subset=["split"]).groupby("split", sort=True)
            for split, group in grouped:
                summaries.append(
                    SplitSummary(
                        split=split,
                        mean_psnr=float(group["psnr"].mean()),
                        mean_ssim=float(group["ssim"].mean()),
                        count=len(group),
                    )
                )
        report = QualityReport(
            ignore_border=ignore_border,
            items=items,
            mean_psnr=float(frame["psnr"].mean()),
            mean_ssim=float(frame["ssim"].mean()),
            count=len(items),
            splits=summaries,
        )
        logger.info(
            f"Evaluated {report.count} items: mean PSNR {report.mean_psnr:.2f} dB, "
            f"mean SSIM {report.mean_ssim:.4f}"
        )
        return report

    @staticmethod
    def to_csv(report: QualityReport, path: Union[str, Path]) -> None:
        frame = pd.DataFrame([item.model_dump() for item in report.items])
        frame.to_csv(path, index=False)
