import json

import numpy as np
import pytest
from scipy import ndimage

from errors import DataError, DimensionMismatchError, InvalidFrameError
from models import BAYER_PATTERNS, BayerFrame
from services.fixture_service import sharp_texture
from services.metrics_service import psnr
from services.raw_service import cfa_masks


def _random_frame(rng, pattern="RGGB", size=16, frame_index=0):
    samples = rng.integers(64, 4000, size=(size, size), dtype=np.uint16)
    return BayerFrame(
        samples=samples, pattern=pattern, black_level=64, white_level=4095,
        frame_index=frame_index, iso=100, lens="leica",
    )


def test_write_then_ingest_frame(tmp_path, rng, raw_service):
    frame = _random_frame(rng, pattern="GBRG", frame_index=3)
    raw_service.write_frame(tmp_path / "frame_003.pgm", frame)

    loaded = raw_service.ingest_frame(tmp_path / "frame_003.pgm")

    assert np.array_equal(loaded.samples, frame.samples)
    assert loaded.pattern == "GBRG"
    assert loaded.frame_index == 3
    assert loaded.lens == "leica"


def test_ingest_rejects_payload_sidecar_mismatch(tmp_path, rng, raw_service):
    frame = _random_frame(rng)
    raw_service.write_frame(tmp_path / "frame.pgm", frame)
    sidecar = json.loads((tmp_path / "frame.json").read_text())
    sidecar["width"] = 32

    with pytest.raises(DimensionMismatchError):
        raw_service.ingest_frame(tmp_path / "frame.pgm", sidecar=sidecar)


def test_ingest_rejects_odd_sidecar(tmp_path, rng, raw_service):
    raw_service.write_frame(tmp_path / "frame.pgm", _random_frame(rng))
    sidecar = json.loads((tmp_path / "frame.json").read_text())
    sidecar["width"] = 15
    (tmp_path / "frame.json").write_text(json.dumps(sidecar))

    with pytest.raises(InvalidFrameError):
        raw_service.ingest_frame(tmp_path / "frame.pgm")


def test_bayer_frame_validation(rng):
    with pytest.raises(InvalidFrameError, match="odd dimension"):
        BayerFrame(samples=np.zeros((15, 16)), pattern="RGGB", black_level=0, white_level=1023)
    with pytest.raises(InvalidFrameError, match="invalid levels"):
        BayerFrame(samples=np.zeros((16, 16)), pattern="RGGB", black_level=1023, white_level=1023)
    with pytest.raises(InvalidFrameError):
        BayerFrame(samples=np.zeros((16, 16)), pattern="RGBG", black_level=0, white_level=1023)


def test_ingest_burst_orders_by_frame_index(tmp_path, rng, raw_service):
    for name, index in (("a.pgm", 2), ("b.pgm", 0), ("c.pgm", 1)):
        raw_service.write_frame(tmp_path / name, _random_frame(rng, frame_index=index))

    frames = raw_service.ingest_burst(tmp_path)

    assert [frame.frame_index for frame in frames] == [0, 1, 2]


def test_ingest_burst_rejects_duplicate_index(tmp_path, rng, raw_service):
    raw_service.write_frame(tmp_path / "a.pgm", _random_frame(rng, frame_index=1))
    raw_service.write_frame(tmp_path / "b.pgm", _random_frame(rng, frame_index=1))

    with pytest.raises(DataError, match="Duplicate"):
        raw_service.ingest_burst(tmp_path)


def test_ingest_burst_without_frames(tmp_path, raw_service):
    with pytest.raises(DataError):
        raw_service.ingest_burst(tmp_path)


@pytest.mark.parametrize("pattern", BAYER_PATTERNS)
def test_pack_unpack_identity(rng, raw_service, pattern):
    frame = _random_frame(rng, pattern=pattern)

    planar = raw_service.pack_planes(frame)

    assert planar.planes.shape == (4, 8, 8)
    assert np.array_equal(raw_service.unpack_planes(planar), frame.normalized())
    assert np.array_equal(raw_service.to_frame(planar, frame).samples, frame.samples)


@pytest.mark.parametrize("pattern", BAYER_PATTERNS)
def test_pack_plane_order(raw_service, pattern):
    color = np.zeros((8, 8, 3))
    color[..., 0], color[..., 1], color[..., 2] = 0.2, 0.5, 0.8
    frame = raw_service.mosaic(color, pattern)

    planes = raw_service.pack_planes(frame).planes

    assert np.allclose(planes.reshape(4, -1).mean(axis=1), [0.2, 0.5, 0.5, 0.8], atol=1e-4)


def test_cfa_masks_partition_the_mosaic():
    masks = cfa_masks(8, 8, "GRBG")
    total = masks["R"].astype(int) + masks["G"].astype(int) + masks["B"].astype(int)
    assert (total == 1).all()
    assert masks["G"].sum() == 32
    assert ((masks["G_red_row"] | masks["G_blue_row"]) == masks["G"]).all()
    assert masks["R"][0, 1] and masks["B"][1, 0]


@pytest.mark.parametrize("pattern", BAYER_PATTERNS)
def test_demosaic_constant_field(raw_service, pattern):
    color = np.empty((32, 32, 3))
    color[...] = (0.2, 0.5, 0.8)

    rgb = raw_service.demosaic(raw_service.mosaic(color, pattern))

    assert rgb.shape == (32, 32, 3)
    assert np.abs(rgb - color).max() < 1e-4


def test_demosaic_is_exact_on_gray_ramps_in_the_interior(raw_service):
    ys, xs = np.mgrid[0:32, 0:32]
    gray = 0.1 + 0.02 * xs + 0.005 * ys
    rgb = np.repeat(gray[..., None], 3, axis=2)

    out = raw_service.demosaic(raw_service.mosaic(rgb, "RGGB"))

    assert np.abs(out[4:-4, 4:-4] - rgb[4:-4, 4:-4]).max() < 1e-4


@pytest.mark.parametrize("pattern", BAYER_PATTERNS)
def test_demosaic_round_trip_on_a_smooth_color_image(raw_service, pattern):
    color = ndimage.gaussian_filter(sharp_texture(96, seed=4), sigma=(2.0, 2.0, 0))

    rgb = raw_service.demosaic(raw_service.mosaic(color, pattern))

    assert psnr(rgb, color) > 35.0


@pytest.mark.parametrize("shift", [(2, 0), (0, 2)])
def test_demosaic_commutes_with_whole_pattern_shifts(rng, raw_service, shift):
    mosaic = rng.random((64, 64))
    dy, dx = shift

    full = raw_service.demosaic_normalized(mosaic, "RGGB")
    shifted = raw_service.demosaic_normalized(mosaic[dy:, dx:], "RGGB")

    assert np.allclose(shifted[4:-4, 4:-4], full[4 + dy:-4, 4 + dx:-4], atol=1e-12)


def test_demosaic_output_stays_in_range(rng, raw_service):
    frame = BayerFrame(
        samples=rng.choice([0, 1023], size=(16, 16)), pattern="BGGR", black_level=0, white_level=1023,
    )

    rgb = raw_service.demosaic(frame)

    assert rgb.min() >= 0.0 and rgb.max() <= 1.0


def test_planar_proxy_averages_greens(rng, raw_service):
    planar = raw_service.pack_planes(_random_frame(rng))

    proxy = raw_service.planar_proxy(planar)

    assert proxy.shape == (8, 8, 3)
    assert np.allclose(proxy[..., 1], 0.5 * (planar.planes[1] + planar.planes[2]))
