import os
import logging
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import List, Optional, Tuple, Union

import numpy as np
from dotenv import load_dotenv
from pydantic import ValidationError
from scipy import ndimage

import storage
from errors import DataError, DimensionMismatchError, InvalidFrameError
from models import BAYER_PATTERNS, BayerFrame, PlanarRaw, plane_offsets
from schemas import RawSidecar

load_dotenv()

logger = logging.getLogger(__name__)

# Malvar-He-Cutler 5x5 kernels, all scaled by 1/8
_G_AT_RB = np.array([
    [0, 0, -1, 0, 0],
    [0, 0, 2, 0, 0],
    [-1, 2, 4, 2, -1],
    [0, 0, 2, 0, 0],
    [0, 0, -1, 0, 0],
], dtype=np.float64) / 8.0

# Color at a green site whose same-row neighbours carry that color
_ROW_NEIGHBOUR = np.array([
    [0, 0, 0.5, 0, 0],
    [0, -1, 0, -1, 0],
    [-1, 4, 5, 4, -1],
    [0, -1, 0, -1, 0],
    [0, 0, 0.5, 0, 0],
], dtype=np.float64) / 8.0

_COL_NEIGHBOUR = _ROW_NEIGHBOUR.T.copy()

# Red at blue sites and blue at red sites
_DIAGONAL = np.array([
    [0, 0, -1.5, 0, 0],
    [0, 2, 0, 2, 0],
    [-1.5, 0, 6, 0, -1.5],
    [0, 2, 0, 2, 0],
    [0, 0, -1.5, 0, 0],
], dtype=np.float64) / 8.0

APRON = 2

SidecarSource = Union[RawSidecar, dict, str, Path, None]


def _apron_index(n: int) -> np.ndarray:
    """Indices -2..n+1 folded back by whole Bayer cells"""
    index = np.arange(-APRON, n + APRON)
    index[index < 0] += 2
    index[index >= n] -= 2
    return index


def cfa_masks(height: int, width: int, pattern: str) -> dict:
    """Boolean site masks: R, B, G, plus greens split by row color"""
    (ry, rx), _, _, (by, bx) = plane_offsets(pattern)
    rows = np.arange(height)[:, None] % 2
    cols = np.arange(width)[None, :] % 2
    red = (rows == ry) & (cols == rx)
    blue = (rows == by) & (cols == bx)
    green = ~(red | blue)
    return {
        "R": red,
        "B": blue,
        "G": green,
        "G_red_row": green & (rows == ry),
        "G_blue_row": green & (rows == by),
    }


class RawService:
    """Bayer frame ingestion, packing and demosaicing"""

    def __init__(self, max_workers: Optional[int] = None):
        self.max_workers = max_workers or int(os.getenv("FSTACK_THREADS", "4"))
        self.executor = ThreadPoolExecutor(max_workers=self.max_workers)

    @staticmethod
    def _load_sidecar(path: Path, sidecar: SidecarSource) -> RawSidecar:
        if sidecar is None:
            return storage.read_sidecar(path.with_suffix(".json"))
        if isinstance(sidecar, RawSidecar):
            return sidecar
        if isinstance(sidecar, dict):
            try:
                return RawSidecar.model_validate(sidecar)
            except ValidationError as e:
                raise InvalidFrameError(f"Invalid sidecar for {path}: {e}", item=str(path)) from e
        return storage.read_sidecar(sidecar)

    def ingest_frame(self, path: Union[str, Path], sidecar: SidecarSource = None) -> BayerFrame:
        """Read a mosaic payload and validate it against its sidecar.

        ``sidecar`` may be a record, a dict, a path, or omitted (``<name>.json``
        next to the payload). Samples are kept as stored.
        """
        path = Path(path)
        meta = self._load_sidecar(path, sidecar)
        samples = storage.read_mosaic(path)
        if samples.shape != (meta.height, meta.width):
            raise DimensionMismatchError(
                f"Payload is {samples.shape[1]}x{samples.shape[0]}, "
                f"sidecar declares {meta.width}x{meta.height}",
                item=str(path),
            )
        return BayerFrame(
            samples=samples,
            pattern=meta.pattern,
            black_level=meta.black_level,
            white_level=meta.white_level,
            frame_index=meta.frame_index,
            iso=meta.iso,
            lens=meta.lens,
        )

    def write_frame(self, path: Union[str, Path], frame: BayerFrame) -> None:
        path = Path(path)
        storage.write_mosaic(path, frame.samples)
        storage.write_sidecar(
            path.with_suffix(".json"),
            RawSidecar(
                width=frame.width,
                height=frame.height,
                pattern=frame.pattern,
                black_level=frame.black_level,
                white_level=frame.white_level,
                frame_index=frame.frame_index,
                iso=frame.iso,
                lens=frame.lens,
            ),
        )

    @staticmethod
    def find_frames(burst_dir: Union[str, Path]) -> List[Path]:
        """Mosaic payloads in a burst directory that have a sidecar"""
        burst_dir = Path(burst_dir)
        payloads = []
        for suffix in storage.MOSAIC_SUFFIXES:
            for candidate in sorted(burst_dir.glob(f"*{suffix}")):
                if candidate.with_suffix(".json").is_file():
                    payloads.append(candidate)
        return payloads

    def ingest_paths(self, burst_dir: Union[str, Path]) -> List[Tuple[Path, BayerFrame]]:
        """(payload path, frame) pairs of a raw burst directory, ordered by frame_index"""
        payloads = self.find_frames(burst_dir)
        if not payloads:
            raise DataError(f"No raw frames with sidecars in {burst_dir}", item=str(burst_dir))
        pairs = sorted(
            zip(payloads, self.executor.map(self.ingest_frame, payloads)),
            key=lambda pair: pair[1].frame_index,
        )
        frames = [frame for _, frame in pairs]
        indices = [frame.frame_index for frame in frames]
        if len(set(indices)) != len(indices):
            raise DataError(f"Duplicate frame_index in {burst_dir}: {indices}", item=str(burst_dir))
        shapes = {(frame.samples.shape, frame.pattern) for frame in frames}
        if len(shapes) != 1:
            raise DimensionMismatchError(
                f"Frames of {burst_dir} differ in size or pattern", item=str(burst_dir)
            )
        logger.info(f"Ingested {len(frames)} raw frames from {burst_dir}")
        return pairs

    def ingest_burst(self, burst_dir: Union[str, Path]) -> List[BayerFrame]:
        return [frame for _, frame in self.ingest_paths(burst_dir)]

    def pack_planes(self, frame: BayerFrame) -> PlanarRaw:
        """Normalize and split the mosaic into half-resolution (R, G1, G2, B) planes"""
        normalized = frame.normalized()
        planes = np.stack([normalized[dy::2, dx::2] for dy, dx in plane_offsets(frame.pattern)])
        return PlanarRaw(planes=planes, pattern=frame.pattern)

    def unpack_planes(self, planar: PlanarRaw) -> np.ndarray:
        """Inverse of pack_planes: the normalized full-resolution mosaic"""
        mosaic = np.empty((planar.height * 2, planar.width * 2), dtype=np.float64)
        for plane, (dy, dx) in zip(planar.planes, plane_offsets(planar.pattern)):
            mosaic[dy::2, dx::2] = plane
        return mosaic

    def to_frame(self, planar: PlanarRaw, like: BayerFrame) -> BayerFrame:
        """Quantize packed planes back to sensor counts with the levels of ``like``"""
        normalized = np.clip(self.unpack_planes(planar), 0.0, 1.0)
        samples = np.round(like.black_level + normalized * (like.white_level - like.black_level))
        return BayerFrame(
            samples=samples.astype(np.uint16),
            pattern=planar.pattern,
            black_level=like.black_level,
            white_level=like.white_level,
            frame_index=like.frame_index,
            iso=like.iso,
            lens=like.lens,
        )

    def demosaic(self, frame: BayerFrame) -> np.ndarray:
        """Malvar-He-Cutler linear demosaic to RGB in [0, 1]"""
        return self.demosaic_normalized(frame.normalized(), frame.pattern)

    def demosaic_normalized(self, mosaic: np.ndarray, pattern: str) -> np.ndarray:
        height, width = mosaic.shape
        padded = mosaic[np.ix_(_apron_index(height), _apron_index(width))]
        inner = (slice(APRON, APRON + height), slice(APRON, APRON + width))

        def interp(kernel: np.ndarray) -> np.ndarray:
            return ndimage.correlate(padded, kernel, mode="nearest")[inner]

        green_est = interp(_G_AT_RB)
        row_est = interp(_ROW_NEIGHBOUR)
        col_est = interp(_COL_NEIGHBOUR)
        diag_est = interp(_DIAGONAL)
        masks = cfa_masks(height, width, pattern)

        red = np.select(
            [masks["R"], masks["G_red_row"], masks["G_blue_row"]],
            [mosaic, row_est, col_est],
            default=diag_est,
        )
        green = np.where(masks["G"], mosaic, green_est)
        blue = np.select(
            [masks["B"], masks["G_blue_row"], masks["G_red_row"]],
            [mosaic, row_est, col_est],
            default=diag_est,
        )
        return np.clip(np.stack([red, green, blue], axis=-1), 0.0, 1.0)

    def mosaic(
        self,
        rgb: np.ndarray,
        pattern: str = "RGGB",
        black_level: int = 0,
        white_level: int = 65535,
        frame_index: int = 0,
        iso: Optional[int] = None,
        lens: Optional[str] = None,
    ) -> BayerFrame:
        """Sample an RGB image through a color filter array into sensor counts"""
        if pattern not in BAYER_PATTERNS:
            raise InvalidFrameError(f"Unknown Bayer pattern: {pattern}")
        rgb = np.clip(np.asarray(rgb, dtype=np.float64), 0.0, 1.0)
        if rgb.ndim != 3 or rgb.shape[2] != 3:
            raise InvalidFrameError(f"Expected an (H, W, 3) image, got {rgb.shape}")
        masks = cfa_masks(rgb.shape[0], rgb.shape[1], pattern)
        normalized = np.select([masks["R"], masks["G"]], [rgb[..., 0], rgb[..., 1]], default=rgb[..., 2])
        samples = np.round(black_level + normalized * (white_level - black_level))
        return BayerFrame(
            samples=samples.astype(np.uint16),
            pattern=pattern,
            black_level=black_level,
            white_level=white_level,
            frame_index=frame_index,
            iso=iso,
            lens=lens,
        )

    @staticmethod
    def luma(rgb: np.ndarray) -> np.ndarray:
        """Channel mean; single-channel input passes through"""
        rgb = np.asarray(rgb, dtype=np.float64)
        return rgb if rgb.ndim == 2 else rgb.mean(axis=-1)

    def planar_proxy(self, planar: PlanarRaw) -> np.ndarray:
        """Half-resolution RGB preview of packed planes (greens averaged)"""
        r, g1, g2, b = planar.planes
        return np.stack([r, 0.5 * (g1 + g2), b], axis=-1)
