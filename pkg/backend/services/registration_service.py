import os
import math
import logging
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Tuple

import cv2
import numpy as np
from dotenv import load_dotenv

from errors import DimensionMismatchError, DivergenceError, ImageTooSmallError, InvalidFrameError
from models import AffineWarp, PlanarRaw, RegistrationResult
from schemas import EccConfig, WarpFile, WarpRecord

load_dotenv()

logger = logging.getLogger(__name__)

# Coarsest pyramid level must keep at least this many pixels per side
MIN_LEVEL_SIZE = 16
RAW_SCALE = 0.5


def scale_warp(warp: AffineWarp, s: float) -> AffineWarp:
    """S ∘ warp ∘ S⁻¹ for uniform coordinate scaling S = s·I"""
    if not s > 0:
        raise InvalidFrameError(f"Scale factor must be positive, got {s}")
    return AffineWarp(
        a11=warp.a11, a12=warp.a12, a21=warp.a21, a22=warp.a22,
        tx=warp.tx * s, ty=warp.ty * s,
    )


def _affine_matrix(warp: AffineWarp, dtype=np.float64) -> np.ndarray:
    return np.asarray(warp.to_list(), dtype=dtype).reshape(2, 3)


def warp_image(image: np.ndarray, warp: AffineWarp) -> np.ndarray:
    """Resample so that output(x) = input(warp⁻¹(x)); channels share the warp"""
    image = np.asarray(image, dtype=np.float64)
    if warp.is_identity():
        return image.copy()
    height, width = image.shape[:2]
    matrix = _affine_matrix(warp)

    def resample(channel: np.ndarray) -> np.ndarray:
        return cv2.warpAffine(
            channel, matrix, (width, height), flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE
        )

    if image.ndim == 2:
        return resample(image)
    return np.stack([resample(image[..., c]) for c in range(image.shape[2])], axis=-1)


def warp_planar(planar: PlanarRaw, warp: AffineWarp) -> PlanarRaw:
    """Apply a full-resolution warp to packed planes, one half-scale warp for all four"""
    raw_warp = scale_warp(warp, RAW_SCALE)
    planes = np.stack([warp_image(plane, raw_warp) for plane in planar.planes])
    return planar.with_planes(np.clip(planes, 0.0, 1.0))


def _gaussian_pyramid(image: np.ndarray, levels: int) -> List[np.ndarray]:
    pyramid = [image]
    for _ in range(levels - 1):
        pyramid.append(cv2.pyrDown(pyramid[-1]))
    return pyramid


class RegistrationService:
    """ECC-based affine burst registration"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("FSTACK_THREADS", "4"))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    def ecc_align(
        self,
        template: np.ndarray,
        moving: np.ndarray,
        init: Optional[AffineWarp] = None,
        cfg: Optional[EccConfig] = None,
    ) -> Tuple[AffineWarp, float]:
        """Maximize the correlation coefficient between template and warped moving.

        Returns the warp mapping moving coordinates to template coordinates and
        the final correlation coefficient. Refinement runs coarse to fine with
        OpenCV's ECC at every level; a level stops after ``cfg.max_iterations``
        or when the correlation gain drops below ``cfg.epsilon``.
        """
        cfg = cfg or EccConfig()
        init = init or AffineWarp.identity()
        template = np.asarray(template, dtype=np.float32)
        moving = np.asarray(moving, dtype=np.float32)
        if template.ndim != 2 or moving.ndim != 2:
            raise DimensionMismatchError("ECC works on single-channel images")
        if template.shape != moving.shape:
            raise DimensionMismatchError(
                f"Template {template.shape} and moving {moving.shape} differ in shape"
            )
        coarsest = min(template.shape) / 2 ** (cfg.pyramid_levels - 1)
        if coarsest < MIN_LEVEL_SIZE:
            raise ImageTooSmallError(
                f"Image {template.shape} too small for {cfg.pyramid_levels} pyramid levels"
            )
        if not (np.all(np.isfinite(template)) and np.all(np.isfinite(moving))):
            raise DivergenceError("ECC input contains non-finite values")
        if np.ptp(template) == 0 or np.ptp(moving) == 0:
            raise DivergenceError("ECC input has no contrast; correlation is undefined")

        if cfg.pre_blur_sigma > 0:
            template = cv2.GaussianBlur(template, (0, 0), cfg.pre_blur_sigma)
            moving = cv2.GaussianBlur(moving, (0, 0), cfg.pre_blur_sigma)
        template_pyr = _gaussian_pyramid(template, cfg.pyramid_levels)
        moving_pyr = _gaussian_pyramid(moving, cfg.pyramid_levels)
        criteria = (cv2.TERM_CRITERIA_EPS | cv2.TERM_CRITERIA_COUNT, cfg.max_iterations, cfg.epsilon)

        # Optimized warp maps template coordinates into the moving image
        params = scale_warp(init.inverse(), 2.0 ** -(cfg.pyramid_levels - 1))
        rho = float("nan")
        for level in reversed(range(cfg.pyramid_levels)):
            params, rho = self._align_level(template_pyr[level], moving_pyr[level], params, criteria)
            logger.debug(f"ECC level {level}: rho={rho:.6f}")
            if level:
                params = scale_warp(params, 2.0)
        return params.inverse(), rho

    @staticmethod
    def _align_level(
        template: np.ndarray, moving: np.ndarray, params: AffineWarp, criteria: Tuple[int, int, float]
    ) -> Tuple[AffineWarp, float]:
        matrix = _affine_matrix(params, dtype=np.float32)
        try:
            rho, matrix = cv2.findTransformECC(template, moving, matrix, cv2.MOTION_AFFINE, criteria, None, 1)
        except cv2.error as e:
            raise DivergenceError(f"ECC did not converge: {e}") from e
        if not math.isfinite(rho):
            raise DivergenceError("Non-finite ECC correlation")
        try:
            return AffineWarp.from_matrix(matrix), float(rho)
        except InvalidFrameError as e:
            raise DivergenceError(f"ECC produced a degenerate warp: {e}") from e

    def _align_pair(self, pair: Tuple[np.ndarray, np.ndarray, EccConfig, bool]):
        template, moving, cfg, strict = pair
        try:
            warp, rho = self.ecc_align(template, moving, AffineWarp.identity(), cfg)
            return warp, rho, True
        except DivergenceError:
            if strict:
                raise
            return AffineWarp.identity(), float("nan"), False

    def register_burst(
        self, frames: Sequence[np.ndarray], cfg: Optional[EccConfig] = None, strict: bool = False
    ) -> RegistrationResult:
        """Align each frame to its predecessor and chain the warps to frame 0.

        A diverging pair falls back to the identity with rho NaN unless
        ``strict`` is set.
        """
        cfg = cfg or EccConfig()
        if len(frames) < 1:
            raise InvalidFrameError("Cannot register an empty burst")
        shapes = {np.shape(frame) for frame in frames}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"Burst frames differ in shape: {sorted(shapes)}")

        jobs = [(frames[i - 1], frames[i], cfg, strict) for i in range(1, len(frames))]
        pair_results = list(self.executor.map(self._align_pair, jobs))

        warps = [AffineWarp.identity()]
        pairwise = [AffineWarp.identity()]
        rhos = [1.0]
        converged = [True]
        for index, (warp, rho, ok) in enumerate(pair_results, start=1):
            if ok:
                logger.info(f"Registered pair {index}/{len(frames) - 1}: rho={rho:.4f}")
            else:
                logger.warning(f"ECC diverged on pair {index}/{len(frames) - 1}; using identity")
            pairwise.append(warp)
            warps.append(warps[-1].compose(warp))
            rhos.append(rho)
            converged.append(ok)

        result = RegistrationResult(warps=warps, rhos=rhos, pairwise=pairwise, converged=converged)
        if self.is_motion_suspect(result, cfg):
            logger.warning(f"Burst flagged as motion suspect: min rho {result.min_rho:.4f}")
        return result

    @staticmethod
    def is_motion_suspect(result: RegistrationResult, cfg: EccConfig) -> bool:
        min_rho = result.min_rho
        return math.isnan(min_rho) or min_rho < cfg.min_rho

    def to_warp_file(self, result: RegistrationResult, cfg: Optional[EccConfig] = None) -> WarpFile:
        cfg = cfg or EccConfig()
        records = [
            WarpRecord(
                index=index,
                pairwise=pairwise.to_list(),
                cumulative=warp.to_list(),
                rho=rho,
                converged=ok,
            )
            for index, (pairwise, warp, rho, ok) in enumerate(
                zip(result.pairwise, result.warps, result.rhos, result.converged)
            )
        ]
        return WarpFile(
            reference=result.reference_index,
            frames=records,
            ecc=cfg,
            motion_suspect=self.is_motion_suspect(result, cfg),
            raw_scale=RAW_SCALE,
        )

    @staticmethod
    def from_warp_file(warp_file: WarpFile) -> RegistrationResult:
        records = sorted(warp_file.frames, key=lambda record: record.index)
        return RegistrationResult(
            warps=[AffineWarp.from_list(record.cumulative) for record in records],
            rhos=[record.rho for record in records],
            pairwise=[AffineWarp.from_list(record.pairwise) for record in records],
            converged=[record.converged for record in records],
            reference_index=warp_file.reference,
        )

    def apply_to_frames(self, frames: Sequence[np.ndarray], result: RegistrationResult) -> List[np.ndarray]:
        """Resample every frame into reference coordinates"""
        if len(frames) != len(result):
            raise DimensionMismatchError("One warp per frame is required")
        return list(self.executor.map(warp_image, frames, result.warps))

    def apply_to_planar(self, frames: Sequence[PlanarRaw], result: RegistrationResult) -> List[PlanarRaw]:
        if len(frames) != len(result):
            raise DimensionMismatchError("One warp per frame is required")
        return list(self.executor.map(warp_planar, frames, result.warps))
