import os
import logging
import zlib
from concurrent.futures import ThreadPoolExecutor
from typing import List, Optional, Sequence, Union

import numpy as np
from dotenv import load_dotenv

from errors import ConfigError
from models import PlanarRaw
from schemas import NoiseConfig, NoiseParams, NoiseRecord

load_dotenv()

logger = logging.getLogger(__name__)

# Stream ids; every random draw in the toolkit is keyed by (seed, stage, ...)
NOISE_STREAM = 1
SPLIT_STREAM = 2
AUGMENT_STREAM = 3

SHOT_RANGE = (1e-4, 0.012)
READ_SLOPE = 2.18
READ_INTERCEPT = 1.2
READ_SIGMA = 0.26

NoisyImage = Union[np.ndarray, PlanarRaw]


def rng_for(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for one (seed, stream...) key, order-free"""
    return np.random.default_rng(np.random.SeedSequence(seed, spawn_key=tuple(stream)))


def burst_key(burst_id: str) -> int:
    """Stable integer stream id for a burst name"""
    return zlib.crc32(burst_id.encode("utf-8"))


def sample_noise_params(rng: np.random.Generator) -> NoiseParams:
    """Shot noise log-uniform; read noise log-normal around a line in log shot"""
    log_shot = rng.uniform(np.log(SHOT_RANGE[0]), np.log(SHOT_RANGE[1]))
    log_read = rng.normal(READ_SLOPE * log_shot + READ_INTERCEPT, READ_SIGMA)
    lambda_shot = float(np.clip(np.exp(log_shot), *SHOT_RANGE))
    return NoiseParams(lambda_shot=lambda_shot, lambda_read=max(float(np.exp(log_read)), 0.0))


def add_noise(
    image: NoisyImage, params: NoiseParams, rng: np.random.Generator, clip: bool = True
) -> NoisyImage:
    """Heteroscedastic Gaussian: variance lambda_read + lambda_shot * x"""
    if params.lambda_shot < 0 or params.lambda_read < 0:
        raise ConfigError(f"Noise parameters must be nonnegative: {params}")
    if isinstance(image, PlanarRaw):
        return image.with_planes(add_noise(image.planes, params, rng, clip=clip))
    values = np.asarray(image, dtype=np.float64)
    if params.lambda_shot == 0 and params.lambda_read == 0:
        return values.copy()
    variance = params.lambda_read + params.lambda_shot * np.clip(values, 0.0, None)
    noisy = values + np.sqrt(variance) * rng.standard_normal(values.shape)
    return np.clip(noisy, 0.0, 1.0) if clip else noisy


class NoiseService:
    """Synthetic sensor noise for bursts"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("FSTACK_THREADS", "4"))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    def resolve_params(self, cfg: NoiseConfig, seed: int, key: int = 0) -> Optional[NoiseParams]:
        """Burst-level parameters; None when noise is off"""
        if cfg.mode == "off":
            return None
        if cfg.mode == "fixed":
            return NoiseParams(lambda_shot=cfg.lambda_shot, lambda_read=cfg.lambda_read)
        return sample_noise_params(rng_for(seed, NOISE_STREAM, key))

    def add_burst_noise(
        self,
        frames: Sequence[NoisyImage],
        params: NoiseParams,
        seed: int,
        frame_indices: Optional[Sequence[int]] = None,
        key: int = 0,
    ) -> List[NoisyImage]:
        """Shared parameters, one generator per frame index"""
        indices = list(frame_indices) if frame_indices is not None else list(range(len(frames)))

        def noisy(job):
            frame, index = job
            return add_noise(frame, params, rng_for(seed, NOISE_STREAM, key, index))

        out = list(self.executor.map(noisy, zip(frames, indices)))
        logger.info(
            f"Added noise to {len(out)} frames: "
            f"lambda_shot={params.lambda_shot:.5f}, lambda_read={params.lambda_read:.6f}"
        )
        return out

    def record(
        self, burst_id: str, cfg: NoiseConfig, seed: int, params: NoiseParams, frame_indices: Sequence[int]
    ) -> NoiseRecord:
        return NoiseRecord(
            burst=burst_id,
            mode=cfg.mode,
            seed=seed,
            params=params,
            streams=list(frame_indices),
        )
