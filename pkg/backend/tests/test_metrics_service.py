import math

import numpy as np
import pandas as pd
import pytest

from errors import DataError, DimensionMismatchError, ImageTooSmallError
from schemas import QualityReport
from services.metrics_service import SSIM_K1, MetricsService, psnr, ssim


@pytest.fixture
def service():
    return MetricsService(max_workers=2)


def _naive_psnr(a, b, border):
    height, width, channels = a.shape
    total, count = 0.0, 0
    for y in range(border, height - border):
        for x in range(border, width - border):
            for c in range(channels):
                total += (a[y, x, c] - b[y, x, c]) ** 2
                count += 1
    return 10.0 * math.log10(1.0 / (total / count))


def test_psnr_closed_form(rng):
    a = rng.random((32, 32, 3)) * 0.9

    assert psnr(a, a + 0.1) == pytest.approx(20.0, abs=1e-9)
    assert psnr(a, a) == math.inf


def test_psnr_is_symmetric(rng):
    a, b = rng.random((32, 32, 3)), rng.random((32, 32, 3))

    assert psnr(a, b) == psnr(b, a)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-12)


def test_psnr_falls_as_a_uniform_error_grows(rng):
    a = rng.random((32, 32, 3)) * 0.9

    scores = [psnr(a, a + error) for error in (0.005, 0.01, 0.02, 0.05, 0.1)]

    assert all(earlier > later for earlier, later in zip(scores, scores[1:]))


def test_psnr_matches_naive_summation(rng):
    for _ in range(100):
        a, b = rng.random((12, 12, 3)), rng.random((12, 12, 3))
        assert psnr(a, b, ignore_border=2) == pytest.approx(_naive_psnr(a, b, 2), abs=1e-9)


def test_psnr_ignores_the_border(rng):
    a = rng.random((32, 32, 3))
    b = a.copy()
    b[:4] = 0.0

    assert psnr(a, b, ignore_border=4) == math.inf
    assert psnr(a, b, ignore_border=0) < 30


def test_ssim_of_identical_images(rng):
    a = rng.random((32, 32, 3))

    assert ssim(a, a) == pytest.approx(1.0, abs=1e-12)


def test_ssim_on_constant_images():
    a, b = np.full((32, 32), 0.2), np.full((32, 32), 0.6)
    c1 = SSIM_K1 ** 2

    expected = (2 * 0.2 * 0.6 + c1) / (0.2 ** 2 + 0.6 ** 2 + c1)

    assert ssim(a, b) == pytest.approx(expected, abs=1e-9)


def test_ssim_matches_reference_implementation(rng):
    metrics = pytest.importorskip("skimage.metrics")
    a = rng.random((48, 40, 3))
    b = np.clip(a + 0.1 * rng.standard_normal(a.shape), 0, 1)

    reference = metrics.structural_similarity(
        a, b, gaussian_weights=True, sigma=1.5, use_sample_covariance=False,
        data_range=1.0, channel_axis=-1,
    )

    assert ssim(a, b, ignore_border=4) == pytest.approx(reference, abs=1e-4)


def test_metric_errors(rng):
    with pytest.raises(DimensionMismatchError):
        psnr(rng.random((16, 16)), rng.random((16, 15)))
    with pytest.raises(ImageTooSmallError):
        ssim(rng.random((8, 8, 3)), rng.random((8, 8, 3)))
    with pytest.raises(ImageTooSmallError):
        psnr(rng.random((8, 8)), rng.random((8, 8)), ignore_border=4)


def test_evaluate_with_splits(rng, service):
    gt = {name: rng.random((32, 32, 3)) for name in ("a", "b", "c")}
    outputs = [(name, np.clip(image + 0.05, 0, 1)) for name, image in gt.items()]

    report = service.evaluate(
        outputs, list(gt.items()), splits={"a": "train", "b": "test", "c": "test"}
    )

    assert report.count == 3
    assert [item.id for item in report.items] == ["a", "b", "c"]
    assert [s.split for s in report.splits] == ["test", "train"]
    assert report.splits[0].count == 2
    test_items = [item for item in report.items if item.split == "test"]
    assert report.splits[0].mean_psnr == pytest.approx(np.mean([i.psnr for i in test_items]))


def test_evaluate_errors(rng, service):
    image = rng.random((32, 32, 3))
    with pytest.raises(DataError, match="no items"):
        service.evaluate([], [])
    with pytest.raises(DataError, match="id mismatch"):
        service.evaluate([("a", image)], [("b", image)])


def test_report_serializes_infinite_psnr(tmp_path, rng, service):
    image = rng.random((32, 32, 3))

    report = service.evaluate([("same", image)], [("same", image)])
    restored = QualityReport.model_validate_json(report.model_dump_json())

    assert '"inf"' in report.model_dump_json()
    assert restored.mean_psnr == math.inf

    service.to_csv(report, tmp_path / "report.csv")
    frame = pd.read_csv(tmp_path / "report.csv")
    assert list(frame["id"]) == ["same"]
