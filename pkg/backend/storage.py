import hashlib
import json
import logging
import os
from pathlib import Path
from typing import Type, TypeVar, Union

import cv2
import numpy as np
from dotenv import load_dotenv
from pydantic import BaseModel, ValidationError

from errors import DataError, InvalidFrameError
from schemas import RawSidecar

load_dotenv()

logger = logging.getLogger(__name__)

PathLike = Union[str, Path]
ModelT = TypeVar("ModelT", bound=BaseModel)

MOSAIC_SUFFIXES = (".pgm", ".png")
RGB_SUFFIXES = (".png", ".pfm", ".tif", ".tiff")
UINT16_MAX = 65535


def to_uint16(values: np.ndarray) -> np.ndarray:
    """Quantize [0, 1] floats to 16-bit counts"""
    return np.round(np.clip(values, 0.0, 1.0) * UINT16_MAX).astype(np.uint16)


def from_uint16(values: np.ndarray) -> np.ndarray:
    return values.astype(np.float64) / UINT16_MAX


def _require_file(path: Path) -> None:
    if not path.is_file():
        raise DataError(f"missing file: {path}", item=str(path))


def _imwrite(path: Path, array: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), array):
        raise DataError(f"I/O failure writing {path}", item=str(path))


def read_mosaic(path: PathLike) -> np.ndarray:
    """Single-channel 16-bit mosaic payload"""
    path = Path(path)
    _require_file(path)
    samples = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if samples is None:
        raise DataError(f"Unreadable mosaic: {path}", item=str(path))
    if samples.ndim != 2:
        raise InvalidFrameError(f"Mosaic must be single channel: {path}", item=str(path))
    return samples.astype(np.uint16, copy=False)


def write_mosaic(path: PathLike, samples: np.ndarray) -> None:
    path = Path(path)
    if path.suffix.lower() not in MOSAIC_SUFFIXES:
        raise DataError(f"Mosaic container must be one of {MOSAIC_SUFFIXES}: {path}")
    _imwrite(path, np.ascontiguousarray(samples, dtype=np.uint16))


def read_sidecar(path: PathLike) -> RawSidecar:
    path = Path(path)
    _require_file(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return RawSidecar.model_validate(json.load(f))
    except ValidationError as e:
        raise InvalidFrameError(f"Invalid sidecar {path}: {e}", item=str(path)) from e
    except json.JSONDecodeError as e:
        raise DataError(f"Sidecar is not JSON {path}: {e}", item=str(path)) from e


def write_sidecar(path: PathLike, sidecar: RawSidecar) -> None:
    write_json(path, sidecar)


def read_rgb(path: PathLike) -> np.ndarray:
    """RGB image as float64 (H, W, 3) in [0, 1]"""
    path = Path(path)
    _require_file(path)
    image = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if image is None:
        raise DataError(f"Unreadable image: {path}", item=str(path))
    if image.ndim == 2:
        image = np.repeat(image[..., None], 3, axis=2)
    elif image.shape[2] == 4:
        image = image[..., :3]
    image = image[..., ::-1]
    if image.dtype == np.uint16:
        values = from_uint16(image)
    elif image.dtype == np.uint8:
        values = image.astype(np.float64) / 255.0
    else:
        values = image.astype(np.float64)
    return np.ascontiguousarray(values)


def write_rgb(path: PathLike, image: np.ndarray) -> None:
    """16-bit PNG/TIFF or 32-bit float PFM, chosen by extension"""
    path = Path(path)
    suffix = path.suffix.lower()
    bgr = np.ascontiguousarray(np.asarray(image)[..., ::-1])
    if suffix == ".pfm":
        _imwrite(path, bgr.astype(np.float32))
    elif suffix in RGB_SUFFIXES:
        _imwrite(path, to_uint16(bgr))
    else:
        raise DataError(f"Unsupported RGB output extension: {path}")


def write_counts(path: PathLike, counts: np.ndarray) -> None:
    """Already-quantized uint16 image, (H, W), (H, W, 3) RGB or (H, W, 4) planes"""
    counts = np.asarray(counts, dtype=np.uint16)
    if counts.ndim == 3 and counts.shape[2] == 3:
        counts = counts[..., ::-1]
    _imwrite(Path(path), np.ascontiguousarray(counts))


def read_counts(path: PathLike) -> np.ndarray:
    path = Path(path)
    _require_file(path)
    counts = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
    if counts is None:
        raise DataError(f"Unreadable image: {path}", item=str(path))
    if counts.ndim == 3 and counts.shape[2] == 3:
        counts = counts[..., ::-1]
    return np.ascontiguousarray(counts)


def write_json(path: PathLike, model: BaseModel) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        f.write(model.model_dump_json(indent=2))
        f.write("\n")


def read_json(path: PathLike, model_cls: Type[ModelT]) -> ModelT:
    path = Path(path)
    _require_file(path)
    try:
        with open(path, "r", encoding="utf-8") as f:
            return model_cls.model_validate(json.load(f))
    except (ValidationError, json.JSONDecodeError) as e:
        raise DataError(f"Invalid {model_cls.__name__} file {path}: {e}", item=str(path)) from e


def sha256_file(path: PathLike) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def relative_to(path: PathLike, root: PathLike) -> str:
    """POSIX path of path relative to root, for manifests"""
    return Path(os.path.relpath(path, root)).as_posix()


def write_record(path: PathLike, record: dict) -> None:
    """Plain dict as indented JSON with sorted keys"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as f:
        json.dump(record, f, indent=2, sort_keys=True)
        f.write("\n")
