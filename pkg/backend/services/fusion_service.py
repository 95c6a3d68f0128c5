import os
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Literal, Optional, Sequence, Tuple

import cv2
import numpy as np
from dotenv import load_dotenv
from scipy import ndimage

from errors import ConfigError, DimensionMismatchError, ImageTooSmallError, InvalidFrameError
from models import Burst, DecisionMap, FusionResult, PlanarRaw
from schemas import FusionConfig
from services.complex_wavelet import cdw_forward, cdw_inverse

load_dotenv()

logger = logging.getLogger(__name__)

SharpnessMeasure = Literal["contrast", "variance"]


def _luma(frames: np.ndarray) -> np.ndarray:
    return frames if frames.ndim == 3 else frames.mean(axis=-1)


def _select(stack: np.ndarray, selection: np.ndarray) -> np.ndarray:
    """Pick stack[selection[y, x], y, x, ...] for a (N, H, W, ...) stack"""
    index = selection[None, ...]
    index = index.reshape(index.shape + (1,) * (stack.ndim - index.ndim))
    return np.take_along_axis(stack, index, axis=0)[0]


def sharpness_map(image: np.ndarray, measure: SharpnessMeasure = "contrast", radius: int = 4) -> np.ndarray:
    """Nonnegative per-pixel focus measure of a single-channel image.

    contrast: magnitude of the 3x3 Laplacian.
    variance: intensity variance over the (2r+1)x(2r+1) neighbourhood.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim != 2:
        raise DimensionMismatchError(f"Sharpness needs a single-channel image, got {image.shape}")
    if measure == "contrast":
        if min(image.shape) < 3:
            raise ImageTooSmallError(f"Image {image.shape} smaller than the 3x3 Laplacian")
        return np.abs(ndimage.laplace(image, mode="nearest"))
    if measure == "variance":
        if radius < 1:
            raise ConfigError(f"Variance radius must be at least 1, got {radius}")
        size = 2 * radius + 1
        if min(image.shape) < size:
            raise ImageTooSmallError(f"Image {image.shape} smaller than the {size}x{size} window")
        mean = ndimage.uniform_filter(image, size=size, mode="reflect")
        mean_sq = ndimage.uniform_filter(image * image, size=size, mode="reflect")
        return np.maximum(mean_sq - mean * mean, 0.0)
    raise ConfigError(f"Unknown sharpness measure: {measure}")


def majority_filter(selection: np.ndarray, n_frames: int, radius: int) -> np.ndarray:
    """Replace each index by the most frequent one in its (2r+1)^2 window; ties go low"""
    if radius <= 0 or n_frames == 1:
        return selection
    size = 2 * radius + 1
    votes = np.stack([
        ndimage.uniform_filter((selection == n).astype(np.float64), size=size, mode="nearest")
        for n in range(n_frames)
    ])
    return np.argmax(votes, axis=0)


def build_laplacian_pyramid(image: np.ndarray, levels: int) -> List[np.ndarray]:
    """Detail bands from fine to coarse, followed by the coarse residual"""
    if levels < 1:
        raise ConfigError(f"Pyramid levels must be positive, got {levels}")
    image = np.ascontiguousarray(image, dtype=np.float64)
    if min(image.shape[:2]) < 2 ** (levels - 1):
        raise ImageTooSmallError(f"Image {image.shape[:2]} too small for {levels} pyramid levels")
    gaussians = [image]
    for _ in range(levels - 1):
        gaussians.append(cv2.pyrDown(gaussians[-1]))
    pyramid = []
    for fine, coarse in zip(gaussians[:-1], gaussians[1:]):
        height, width = fine.shape[:2]
        pyramid.append(fine - cv2.pyrUp(coarse, dstsize=(width, height)).reshape(fine.shape))
    pyramid.append(gaussians[-1])
    return pyramid


def collapse_laplacian_pyramid(pyramid: Sequence[np.ndarray]) -> np.ndarray:
    if not pyramid:
        raise DimensionMismatchError("Empty pyramid")
    image = np.ascontiguousarray(pyramid[-1], dtype=np.float64)
    for band in reversed(pyramid[:-1]):
        height, width = band.shape[:2]
        expected = ((height + 1) // 2, (width + 1) // 2)
        if image.shape[:2] != expected or image.shape[2:] != band.shape[2:]:
            raise DimensionMismatchError(
                f"Band {band.shape} is inconsistent with coarser level {image.shape}"
            )
        image = cv2.pyrUp(image, dstsize=(width, height)).reshape(band.shape) + band
    return image


class FusionService:
    """Classical multi-focus stacking"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("FSTACK_THREADS", "4"))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    def _decide(
        self, luma: np.ndarray, measure: SharpnessMeasure, radius: int, smooth_radius: int
    ) -> np.ndarray:
        maps = list(self.executor.map(lambda frame: sharpness_map(frame, measure, radius), luma))
        if smooth_radius > 0:
            size = 2 * smooth_radius + 1
            maps = [ndimage.uniform_filter(m, size=size, mode="nearest") for m in maps]
        return np.argmax(np.stack(maps), axis=0)

    def fuse_pixelwise(
        self,
        burst: Burst,
        measure: SharpnessMeasure = "contrast",
        radius: int = 4,
        smooth_radius: int = 2,
    ) -> Tuple[np.ndarray, DecisionMap]:
        """Copy every pixel from the frame with the highest smoothed sharpness"""
        frames = self._rgb_stack(burst)
        selection = self._decide(_luma(frames), measure, radius, smooth_radius)
        return _select(frames, selection), DecisionMap(n_frames=len(burst), indices=selection)

    def fuse_laplacian(self, burst: Burst, levels: int = 5, decision_smooth_radius: int = 2) -> np.ndarray:
        """Max-magnitude selection per pyramid band, averaged residual"""
        frames = self._rgb_stack(burst)
        pyramids = list(self.executor.map(lambda frame: build_laplacian_pyramid(frame, levels), frames))
        fused = []
        for level in range(levels - 1):
            bands = np.stack([pyramid[level] for pyramid in pyramids])
            strength = np.abs(_luma(bands))
            selection = majority_filter(np.argmax(strength, axis=0), len(frames), decision_smooth_radius)
            fused.append(_select(bands, selection))
        fused.append(np.mean([pyramid[-1] for pyramid in pyramids], axis=0))
        return np.clip(collapse_laplacian_pyramid(fused), 0.0, 1.0)

    def fuse_wavelet(self, burst: Burst, wavelet_levels: int = 4, consistency_radius: int = 2) -> np.ndarray:
        """Max-modulus selection per complex wavelet subband, averaged approximation"""
        frames = self._rgb_stack(burst)
        transforms = list(self.executor.map(lambda frame: cdw_forward(frame, wavelet_levels), frames))
        per_frame = [transform.bands() for transform in transforms]
        fused = []
        for index in range(len(per_frame[0]) - 1):
            bands = np.stack([bands[index] for bands in per_frame])
            modulus = np.abs(_luma(bands))
            selection = majority_filter(np.argmax(modulus, axis=0), len(frames), consistency_radius)
            fused.append(_select(bands, selection))
        fused.append(np.mean([bands[-1] for bands in per_frame], axis=0))
        image = cdw_inverse(transforms[0].with_bands(fused))
        return np.clip(image, 0.0, 1.0)

    def fuse_planar(
        self,
        burst: Burst,
        proxies: Sequence[np.ndarray],
        measure: SharpnessMeasure = "contrast",
        radius: int = 4,
        smooth_radius: int = 2,
    ) -> Tuple[PlanarRaw, DecisionMap]:
        """Stack packed raw frames with a decision map computed on RGB proxies.

        Proxies may be full resolution (averaged over 2x2 cells) or already at
        plane resolution.
        """
        if not burst.is_planar:
            raise InvalidFrameError("fuse_planar needs a PlanarRaw burst")
        if len(proxies) != len(burst):
            raise DimensionMismatchError("One proxy per raw frame is required")
        _, height, width = burst.shape
        luma = _luma(np.stack([np.asarray(proxy, dtype=np.float64) for proxy in proxies]))
        if luma.shape[1:] == (2 * height, 2 * width):
            luma = luma.reshape(len(burst), height, 2, width, 2).mean(axis=(2, 4))
        elif luma.shape[1:] != (height, width):
            raise DimensionMismatchError(
                f"Proxy {luma.shape[1:]} does not match planes {(height, width)}"
            )
        selection = self._decide(luma, measure, radius, smooth_radius)
        planes = _select(np.moveaxis(burst.stack(), 1, -1), selection)
        fused = burst.frames[0].with_planes(np.moveaxis(planes, -1, 0))
        return fused, DecisionMap(n_frames=len(burst), indices=selection)

    @staticmethod
    def _rgb_stack(burst: Burst) -> np.ndarray:
        if burst.is_planar:
            raise InvalidFrameError("RGB fusion needs demosaiced frames; use fuse_planar")
        return burst.stack()

    @staticmethod
    def select_frames(burst: Burst, frames: Optional[List[int]]) -> Tuple[Burst, List[int]]:
        """Restrict a burst to the listed frame positions"""
        if frames is None:
            return burst, list(range(len(burst)))
        if not frames:
            raise ConfigError("Frame subset is empty")
        for index in frames:
            if not 0 <= index < len(burst):
                raise ConfigError(f"Frame {index} outside burst of {len(burst)}")
        subset = Burst(
            frames=[burst.frames[i] for i in frames],
            burst_id=burst.burst_id,
            lens=burst.lens,
            iso=burst.iso,
            frame_indices=[burst.frame_indices[i] for i in frames],
        )
        return subset, list(frames)

    def fuse(
        self,
        burst: Burst,
        cfg: Optional[FusionConfig] = None,
        proxies: Optional[Sequence[np.ndarray]] = None,
    ) -> FusionResult:
        """Dispatch on cfg.method; packed raw bursts always stack pixelwise"""
        cfg = cfg or FusionConfig()
        burst, used = self.select_frames(burst, cfg.frames)
        measure = "variance" if cfg.method == "pixel_variance" else "contrast"
        logger.info(f"Fusing {len(burst)} frames of {burst.burst_id} with {cfg.method}")

        if burst.is_planar:
            if proxies is None:
                raise ConfigError("Raw-domain fusion needs demosaiced proxy frames")
            proxies = [proxies[i] for i in used]
            image, decision = self.fuse_planar(
                burst, proxies, measure, cfg.variance_radius, cfg.decision_smooth_radius
            )
            return FusionResult(image=image, decision_map=decision, frames_used=used)

        if cfg.method in ("pixel_contrast", "pixel_variance"):
            image, decision = self.fuse_pixelwise(
                burst, measure, cfg.variance_radius, cfg.decision_smooth_radius
            )
            return FusionResult(image=image, decision_map=decision, frames_used=used)
        if cfg.method == "laplacian":
            image = self.fuse_laplacian(burst, cfg.pyramid_levels, cfg.decision_smooth_radius)
        else:
            image = self.fuse_wavelet(burst, cfg.wavelet_levels, cfg.decision_smooth_radius)
        return FusionResult(image=image, frames_used=used)
