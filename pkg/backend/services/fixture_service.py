import os
import logging
from pathlib import Path
from typing import List, Optional, Union

import numpy as np
from dotenv import load_dotenv
from scipy import ndimage

import storage
from errors import ConfigError
from models import AffineWarp
from services.noise_service import rng_for
from services.raw_service import RawService
from services.registration_service import warp_image

load_dotenv()

logger = logging.getLogger(__name__)

FIXTURE_STREAM = 9
BLACK_LEVEL = 512
WHITE_LEVEL = 16383
MAX_BLUR_SIGMA = 4.0
BLUR_STEPS = 12


def sharp_texture(size: int, seed: int = 0) -> np.ndarray:
    """Multi-scale colored texture in [0.05, 0.95]"""
    rng = rng_for(seed, FIXTURE_STREAM)
    image = np.zeros((size, size, 3))
    for sigma, weight in ((16.0, 0.5), (4.0, 0.3), (1.0, 0.2)):
        noise = rng.standard_normal((size, size, 3))
        layer = ndimage.gaussian_filter(noise, sigma=(sigma, sigma, 0), mode="reflect")
        image += weight * layer / (layer.std() + 1e-12)
    ys, xs = np.mgrid[0:size, 0:size]
    stripes = 0.15 * np.sign(np.sin(2 * np.pi * (xs + ys) / 24.0))
    image += stripes[..., None]
    image -= image.min()
    image /= image.max()
    return 0.05 + 0.9 * image


def depth_map(size: int) -> np.ndarray:
    """Smooth scene depth in [0, 1]: a tilted plane with a raised disc"""
    ys, xs = np.mgrid[0:size, 0:size] / float(size - 1)
    plane = 0.6 * xs + 0.4 * ys
    disc = np.exp(-(((xs - 0.35) ** 2 + (ys - 0.6) ** 2) / 0.02))
    depth = 0.75 * plane + 0.25 * disc
    return (depth - depth.min()) / (depth.max() - depth.min())


def blur_stack(image: np.ndarray) -> np.ndarray:
    """The image blurred at BLUR_STEPS evenly spaced sigmas from 0 to MAX_BLUR_SIGMA"""
    sigmas = np.linspace(0.0, MAX_BLUR_SIGMA, BLUR_STEPS)
    return np.stack([
        image if s == 0 else ndimage.gaussian_filter(image, sigma=(s, s, 0), mode="reflect")
        for s in sigmas
    ])


def defocus(stack: np.ndarray, sigma_map: np.ndarray) -> np.ndarray:
    """Spatially varying blur, linearly blended between the steps of a blur stack"""
    position = np.clip(sigma_map, 0.0, MAX_BLUR_SIGMA) / (MAX_BLUR_SIGMA / (BLUR_STEPS - 1))
    lower = np.minimum(np.floor(position).astype(int), BLUR_STEPS - 2)
    frac = (position - lower)[..., None]
    below = np.take_along_axis(stack, lower[None, ..., None], axis=0)[0]
    above = np.take_along_axis(stack, (lower + 1)[None, ..., None], axis=0)[0]
    return (1 - frac) * below + frac * above


class FixtureService:
    """Synthetic focus-bracketed raw bursts with a known all-in-focus source"""

    def __init__(self):
        self.raw_service = RawService(max_workers=int(os.getenv("FSTACK_THREADS", "4")))

    def render_frames(
        self, size: int = 512, n_frames: int = 8, seed: int = 0, jitter: float = 0.0
    ) -> tuple:
        """(sharp source, list of RGB frames focused at evenly spaced depths)"""
        if n_frames < 1 or size < 16 or size % 2:
            raise ConfigError(f"Fixture needs >= 1 frame and an even size >= 16, got {n_frames}, {size}")
        sharp = sharp_texture(size, seed)
        depth = depth_map(size)
        stack = blur_stack(sharp)
        focus = np.linspace(0.0, 1.0, n_frames) if n_frames > 1 else np.array([0.5])
        rng = rng_for(seed, FIXTURE_STREAM, 1)
        frames = []
        for index, plane in enumerate(focus):
            frame = defocus(stack, MAX_BLUR_SIGMA * np.abs(depth - plane))
            if jitter > 0 and index > 0:
                tx, ty = rng.uniform(-jitter, jitter, size=2)
                frame = warp_image(frame, AffineWarp.translation(tx, ty))
            frames.append(np.clip(frame, 0.0, 1.0))
        return sharp, frames

    def generate(
        self,
        out_dir: Union[str, Path],
        size: int = 512,
        n_frames: int = 8,
        seed: int = 0,
        jitter: float = 0.0,
        pattern: str = "RGGB",
        lens: Optional[str] = "leica",
    ) -> List[Path]:
        """Write frame_XXX.pgm + sidecars and gt.png; returns the payload paths"""
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        sharp, frames = self.render_frames(size, n_frames, seed, jitter)
        paths = []
        for index, rgb in enumerate(frames):
            frame = self.raw_service.mosaic(
                rgb, pattern, BLACK_LEVEL, WHITE_LEVEL, frame_index=index, iso=200, lens=lens
            )
            path = out_dir / f"frame_{index:03d}.pgm"
            self.raw_service.write_frame(path, frame)
            paths.append(path)
        storage.write_rgb(out_dir / "gt.png", sharp)
        logger.info(f"Wrote {n_frames}-frame {size}x{size} fixture burst to {out_dir}")
        return paths
