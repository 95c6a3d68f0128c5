from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from errors import DimensionMismatchError, InvalidFrameError

BAYER_PATTERNS = ("RGGB", "BGGR", "GRBG", "GBRG")

# Plane order of PlanarRaw; G1 shares rows with red, G2 with blue
PLANE_NAMES = ("R", "G1", "G2", "B")

# RgbImage: float64 array (H, W, 3) in [0, 1]; luma images are (H, W)
RgbImage = np.ndarray


def _frozen(array: np.ndarray) -> np.ndarray:
    array = np.ascontiguousarray(array)
    array.setflags(write=False)
    return array


def plane_offsets(pattern: str) -> List[Tuple[int, int]]:
    """(dy, dx) mosaic offset of each plane (R, G1, G2, B) inside a 2x2 cell"""
    if pattern not in BAYER_PATTERNS:
        raise InvalidFrameError(f"Unknown Bayer pattern: {pattern}")
    cell = {}
    greens = []
    for index, color in enumerate(pattern):
        offset = (index // 2, index % 2)
        if color == "G":
            greens.append(offset)
        else:
            cell[color] = offset
    red_row = cell["R"][0]
    g1 = next(g for g in greens if g[0] == red_row)
    g2 = next(g for g in greens if g[0] != red_row)
    return [cell["R"], g1, g2, cell["B"]]


@dataclass(frozen=True, eq=False)
class BayerFrame:
    """One raw mosaic frame with its acquisition metadata"""

    samples: np.ndarray
    pattern: str
    black_level: int
    white_level: int
    frame_index: int = 0
    iso: Optional[int] = None
    lens: Optional[str] = None

    def __post_init__(self):
        samples = np.asarray(self.samples)
        if samples.ndim != 2:
            raise InvalidFrameError(f"Mosaic must be 2-D, got shape {samples.shape}")
        height, width = samples.shape
        if width % 2 or height % 2:
            raise InvalidFrameError(f"odd dimension: {width}x{height}")
        if self.pattern not in BAYER_PATTERNS:
            raise InvalidFrameError(f"Unknown Bayer pattern: {self.pattern}")
        if not 0 <= self.black_level < self.white_level <= 65535:
            raise InvalidFrameError(
                f"invalid levels: black {self.black_level}, white {self.white_level}"
            )
        object.__setattr__(self, "samples", _frozen(samples.astype(np.uint16, copy=False)))

    @property
    def width(self) -> int:
        return self.samples.shape[1]

    @property
    def height(self) -> int:
        return self.samples.shape[0]

    def normalized(self) -> np.ndarray:
        """Mosaic in [0, 1] after black/white level normalization"""
        scale = float(self.white_level - self.black_level)
        values = (self.samples.astype(np.float64) - self.black_level) / scale
        return np.clip(values, 0.0, 1.0)


@dataclass(frozen=True, eq=False)
class PlanarRaw:
    """Half-resolution packed mosaic, planes ordered (R, G1, G2, B)"""

    planes: np.ndarray
    pattern: str = "RGGB"

    def __post_init__(self):
        planes = np.asarray(self.planes, dtype=np.float64)
        if planes.ndim != 3 or planes.shape[0] != 4:
            raise InvalidFrameError(f"PlanarRaw needs shape (4, h, w), got {planes.shape}")
        if self.pattern not in BAYER_PATTERNS:
            raise InvalidFrameError(f"Unknown Bayer pattern: {self.pattern}")
        object.__setattr__(self, "planes", _frozen(planes))

    @property
    def width(self) -> int:
        return self.planes.shape[2]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    def with_planes(self, planes: np.ndarray) -> "PlanarRaw":
        return PlanarRaw(planes=planes, pattern=self.pattern)


@dataclass(frozen=True)
class AffineWarp:
    """2x3 affine transform mapping moving-frame coordinates to reference coordinates"""

    a11: float = 1.0
    a12: float = 0.0
    a21: float = 0.0
    a22: float = 1.0
    tx: float = 0.0
    ty: float = 0.0

    def __post_init__(self):
        if not self.is_invertible():
            raise InvalidFrameError(f"Affine warp must be finite with a non-zero determinant: {self.to_list()}")

    @classmethod
    def identity(cls) -> "AffineWarp":
        return cls()

    @classmethod
    def translation(cls, tx: float, ty: float) -> "AffineWarp":
        return cls(tx=float(tx), ty=float(ty))

    @classmethod
    def similarity(
        cls,
        angle_deg: float,
        scale: float = 1.0,
        tx: float = 0.0,
        ty: float = 0.0,
        center: Tuple[float, float] = (0.0, 0.0),
    ) -> "AffineWarp":
        """Rotation by angle_deg and uniform scale about center, then translation"""
        theta = np.deg2rad(angle_deg)
        c, s = scale * np.cos(theta), scale * np.sin(theta)
        cx, cy = center
        return cls(
            a11=float(c),
            a12=float(-s),
            a21=float(s),
            a22=float(c),
            tx=float(cx - c * cx + s * cy + tx),
            ty=float(cy - s * cx - c * cy + ty),
        )

    @classmethod
    def from_matrix(cls, matrix: np.ndarray) -> "AffineWarp":
        m = np.asarray(matrix, dtype=np.float64)
        return cls(
            a11=float(m[0, 0]), a12=float(m[0, 1]), tx=float(m[0, 2]),
            a21=float(m[1, 0]), a22=float(m[1, 1]), ty=float(m[1, 2]),
        )

    @classmethod
    def from_list(cls, values: Sequence[float]) -> "AffineWarp":
        """Inverse of to_list: [a11, a12, tx, a21, a22, ty]"""
        a11, a12, tx, a21, a22, ty = (float(v) for v in values)
        return cls(a11=a11, a12=a12, a21=a21, a22=a22, tx=tx, ty=ty)

    def to_list(self) -> List[float]:
        return [self.a11, self.a12, self.tx, self.a21, self.a22, self.ty]

    def matrix(self) -> np.ndarray:
        """Homogeneous 3x3 matrix"""
        return np.array(
            [[self.a11, self.a12, self.tx], [self.a21, self.a22, self.ty], [0.0, 0.0, 1.0]]
        )

    @property
    def determinant(self) -> float:
        return self.a11 * self.a22 - self.a12 * self.a21

    def is_invertible(self) -> bool:
        return bool(np.all(np.isfinite(self.to_list()))) and self.determinant != 0.0

    def is_identity(self) -> bool:
        return self == AffineWarp()

    def compose(self, other: "AffineWarp") -> "AffineWarp":
        """self ∘ other: apply other first, then self"""
        return AffineWarp(
            a11=self.a11 * other.a11 + self.a12 * other.a21,
            a12=self.a11 * other.a12 + self.a12 * other.a22,
            a21=self.a21 * other.a11 + self.a22 * other.a21,
            a22=self.a21 * other.a12 + self.a22 * other.a22,
            tx=self.a11 * other.tx + self.a12 * other.ty + self.tx,
            ty=self.a21 * other.tx + self.a22 * other.ty + self.ty,
        )

    def inverse(self) -> "AffineWarp":
        det = self.determinant
        b11, b12 = self.a22 / det, -self.a12 / det
        b21, b22 = -self.a21 / det, self.a11 / det
        return AffineWarp(
            a11=b11, a12=b12, a21=b21, a22=b22,
            tx=-(b11 * self.tx + b12 * self.ty),
            ty=-(b21 * self.tx + b22 * self.ty),
        )

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map (N, 2) points given as (x, y)"""
        pts = np.asarray(points, dtype=np.float64)
        x, y = pts[..., 0], pts[..., 1]
        return np.stack(
            [self.a11 * x + self.a12 * y + self.tx, self.a21 * x + self.a22 * y + self.ty],
            axis=-1,
        )


@dataclass(frozen=True, eq=False)
class Burst:
    """Ordered frames sharing dimensions and representation"""

    frames: List[Union[np.ndarray, PlanarRaw]]
    burst_id: str = "burst"
    lens: Optional[str] = None
    iso: Optional[int] = None
    frame_indices: Optional[List[int]] = None

    def __post_init__(self):
        if len(self.frames) < 1:
            raise InvalidFrameError("Burst needs at least one frame")
        kinds = {type(frame) for frame in self.frames}
        if len(kinds) != 1:
            raise DimensionMismatchError("Burst mixes RGB and planar frames")
        shapes = {self._shape(frame) for frame in self.frames}
        if len(shapes) != 1:
            raise DimensionMismatchError(f"Burst frames differ in shape: {sorted(shapes)}")
        if self.frame_indices is None:
            object.__setattr__(self, "frame_indices", list(range(len(self.frames))))

    @staticmethod
    def _shape(frame) -> tuple:
        return frame.planes.shape if isinstance(frame, PlanarRaw) else np.shape(frame)

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def is_planar(self) -> bool:
        return isinstance(self.frames[0], PlanarRaw)

    @property
    def shape(self) -> tuple:
        return self._shape(self.frames[0])

    def stack(self) -> np.ndarray:
        """Frames as one (N, ...) array"""
        if self.is_planar:
            return np.stack([frame.planes for frame in self.frames])
        return np.stack([np.asarray(frame, dtype=np.float64) for frame in self.frames])


@dataclass(frozen=True, eq=False)
class DecisionMap:
    """Per-pixel frame selection (indices) or per-frame soft weights"""

    n_frames: int
    indices: Optional[np.ndarray] = None
    weights: Optional[np.ndarray] = None

    def __post_init__(self):
        if (self.indices is None) == (self.weights is None):
            raise InvalidFrameError("DecisionMap holds exactly one of indices or weights")
        if self.indices is not None:
            indices = np.asarray(self.indices)
            if indices.size and (indices.min() < 0 or indices.max() >= self.n_frames):
                raise InvalidFrameError("Decision index outside burst")
            object.__setattr__(self, "indices", _frozen(indices.astype(np.int64)))
        else:
            weights = np.asarray(self.weights, dtype=np.float64)
            if weights.shape[0] != self.n_frames:
                raise DimensionMismatchError("Weights need one plane per frame")
            if (weights < 0).any() or not np.allclose(weights.sum(axis=0), 1.0, atol=1e-6):
                raise InvalidFrameError("Soft weights must be nonnegative and sum to 1")
            object.__setattr__(self, "weights", _frozen(weights))

    @property
    def shape(self) -> tuple:
        source = self.indices if self.indices is not None else self.weights[0]
        return source.shape


@dataclass(frozen=True)
class CropRect:
    """Square crop in full-resolution coordinates, Bayer-cell aligned"""

    x: int
    y: int
    size: int = 128

    def __post_init__(self):
        if self.x < 0 or self.y < 0 or self.size <= 0:
            raise InvalidFrameError(f"Invalid crop rect {self}")
        if self.x % 2 or self.y % 2 or self.size % 2:
            raise InvalidFrameError(f"Crop rect must be Bayer aligned: {self}")

    def fits(self, width: int, height: int) -> bool:
        return self.x + self.size <= width and self.y + self.size <= height

    def to_planar(self) -> Tuple[int, int, int]:
        return self.x // 2, self.y // 2, self.size // 2

    def slices(self) -> Tuple[slice, slice]:
        return slice(self.y, self.y + self.size), slice(self.x, self.x + self.size)


@dataclass(frozen=True)
class AugmentOp:
    """Dihedral element: optional horizontal flip followed by a CCW rotation"""

    rotation: int = 0
    flip: bool = False

    def __post_init__(self):
        if self.rotation not in (0, 90, 180, 270):
            raise InvalidFrameError(f"Rotation must be a multiple of 90, got {self.rotation}")

    @classmethod
    def all_ops(cls) -> List["AugmentOp"]:
        return [cls(rotation=r, flip=f) for f in (False, True) for r in (0, 90, 180, 270)]

    @property
    def quarter_turns(self) -> int:
        return self.rotation // 90

    @property
    def transposes(self) -> bool:
        """True when rows become columns"""
        return self.quarter_turns % 2 == 1

    def compose(self, other: "AugmentOp") -> "AugmentOp":
        """Apply self, then other"""
        if not other.flip:
            turns = self.quarter_turns + other.quarter_turns
            return AugmentOp(rotation=(turns % 4) * 90, flip=self.flip)
        turns = other.quarter_turns - self.quarter_turns
        return AugmentOp(rotation=(turns % 4) * 90, flip=not self.flip)

    def inverse(self) -> "AugmentOp":
        if self.flip:
            return self
        return AugmentOp(rotation=(-self.quarter_turns % 4) * 90)

    def apply(self, array: np.ndarray, axes: Tuple[int, int] = (0, 1)) -> np.ndarray:
        out = np.asarray(array)
        if self.flip:
            out = np.flip(out, axis=axes[1])
        if self.quarter_turns:
            out = np.rot90(out, k=self.quarter_turns, axes=axes)
        return np.ascontiguousarray(out)

    def to_dict(self) -> dict:
        return {"rotation": self.rotation, "flip": self.flip}


@dataclass(frozen=True, eq=False)
class RegistrationResult:
    """Per-frame warps into reference (frame 0) coordinates"""

    warps: List[AffineWarp]
    rhos: List[float]
    pairwise: List[AffineWarp]
    converged: List[bool]
    reference_index: int = 0

    def __post_init__(self):
        if not self.warps or not self.warps[self.reference_index].is_identity():
            raise InvalidFrameError("Reference warp must be the identity")
        if not len(self.warps) == len(self.rhos) == len(self.pairwise) == len(self.converged):
            raise DimensionMismatchError("Registration result needs one entry per frame")

    @classmethod
    def identity(cls, n_frames: int) -> "RegistrationResult":
        """No motion: every frame already in reference coordinates"""
        return cls(
            warps=[AffineWarp.identity()] * n_frames,
            rhos=[1.0] * n_frames,
            pairwise=[AffineWarp.identity()] * n_frames,
            converged=[True] * n_frames,
        )

    def __len__(self) -> int:
        return len(self.warps)

    @property
    def min_rho(self) -> float:
        """Smallest pairwise correlation; NaN when any pair diverged"""
        pair_rhos = np.asarray(self.rhos[1:], dtype=np.float64)
        if pair_rhos.size == 0:
            return 1.0
        if np.isnan(pair_rhos).any():
            return float("nan")
        return float(pair_rhos.min())


@dataclass(frozen=True, eq=False)
class FusionResult:
    image: Union[np.ndarray, PlanarRaw]
    decision_map: Optional[DecisionMap] = None
    frames_used: Optional[List[int]] = None
