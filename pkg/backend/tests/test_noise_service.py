import numpy as np
import pytest

from errors import ConfigError
from models import PlanarRaw
from schemas import NoiseConfig, NoiseParams
from services.noise_service import (
    NOISE_STREAM,
    SHOT_RANGE,
    NoiseService,
    add_noise,
    burst_key,
    rng_for,
    sample_noise_params,
)


@pytest.fixture
def service():
    return NoiseService(max_workers=2)


def test_noise_statistics_on_a_constant_field():
    field = np.full((1000, 1000), 0.5)
    params = NoiseParams(lambda_shot=0.012, lambda_read=0.0001)

    noisy = add_noise(field, params, rng_for(0, NOISE_STREAM), clip=False)

    assert noisy.var() == pytest.approx(0.0061, rel=0.05)
    assert abs(noisy.mean() - 0.5) < 0.002


def test_noise_variance_grows_with_intensity():
    params = NoiseParams(lambda_shot=0.012, lambda_read=0.0001)

    dark = add_noise(np.full((500, 500), 0.2), params, rng_for(1, NOISE_STREAM), clip=False)
    bright = add_noise(np.full((500, 500), 0.8), params, rng_for(2, NOISE_STREAM), clip=False)

    assert dark.var() == pytest.approx(0.0025, rel=0.05)
    assert bright.var() == pytest.approx(0.0097, rel=0.05)
    assert bright.var() > dark.var()


def test_noise_is_spatially_white():
    field = np.full((1000, 1000), 0.5)
    params = NoiseParams(lambda_shot=0.012, lambda_read=0.0001)

    residual = add_noise(field, params, rng_for(3, NOISE_STREAM), clip=False) - field

    horizontal = np.corrcoef(residual[:, :-1].ravel(), residual[:, 1:].ravel())[0, 1]
    vertical = np.corrcoef(residual[:-1].ravel(), residual[1:].ravel())[0, 1]
    assert abs(horizontal) < 0.01
    assert abs(vertical) < 0.01


def test_clipping_biases_black_upwards():
    black = np.zeros((1000, 1000))
    params = NoiseParams(lambda_shot=0.012, lambda_read=0.0001)

    unclipped = add_noise(black, params, rng_for(4, NOISE_STREAM), clip=False)
    clipped = add_noise(black, params, rng_for(4, NOISE_STREAM))

    assert abs(unclipped.mean()) < 1e-4
    assert unclipped.min() < 0.0
    assert clipped.mean() > 0.003
    assert clipped.min() == 0.0


def test_sampled_parameters_follow_the_log_linear_model():
    rng = rng_for(7, NOISE_STREAM)
    samples = [sample_noise_params(rng) for _ in range(100_000)]
    log_shot = np.log([s.lambda_shot for s in samples])
    log_read = np.log([s.lambda_read for s in samples])

    slope, intercept = np.polyfit(log_shot, log_read, 1)
    residual = log_read - (slope * log_shot + intercept)

    assert slope == pytest.approx(2.18, abs=0.02)
    assert intercept == pytest.approx(1.2, abs=0.02)
    assert residual.std() == pytest.approx(0.26, abs=0.01)
    assert log_shot.min() >= np.log(SHOT_RANGE[0]) and log_shot.max() <= np.log(SHOT_RANGE[1])


def test_zero_noise_is_a_copy():
    image = np.linspace(0, 1, 16).reshape(4, 4)

    out = add_noise(image, NoiseParams(lambda_shot=0, lambda_read=0), rng_for(0, NOISE_STREAM))

    assert np.array_equal(out, image)
    assert out is not image


def test_negative_parameters_are_rejected():
    params = NoiseParams.model_construct(lambda_shot=-0.01, lambda_read=0.0)

    with pytest.raises(ConfigError):
        add_noise(np.zeros((4, 4)), params, rng_for(0, NOISE_STREAM))


def test_planar_noise_is_clipped(rng):
    planar = PlanarRaw(planes=rng.random((4, 16, 16)))

    noisy = add_noise(planar, NoiseParams(lambda_shot=0.05, lambda_read=0.01), rng_for(0, NOISE_STREAM))

    assert isinstance(noisy, PlanarRaw)
    assert noisy.planes.min() >= 0.0 and noisy.planes.max() <= 1.0


def test_planar_noise_can_skip_clipping(rng):
    planar = PlanarRaw(planes=rng.random((4, 16, 16)), pattern="GRBG")

    noisy = add_noise(
        planar, NoiseParams(lambda_shot=0.05, lambda_read=0.01), rng_for(0, NOISE_STREAM), clip=False
    )

    assert noisy.pattern == "GRBG"
    assert noisy.planes.min() < 0.0 and noisy.planes.max() > 1.0


def test_resolve_params(service):
    assert service.resolve_params(NoiseConfig(), seed=0) is None

    fixed = service.resolve_params(NoiseConfig(mode="fixed", lambda_shot=0.01, lambda_read=0.001), seed=0)
    assert fixed == NoiseParams(lambda_shot=0.01, lambda_read=0.001)

    sampled = NoiseConfig(mode="sampled")
    key = burst_key("burst_a")
    assert service.resolve_params(sampled, 3, key) == service.resolve_params(sampled, 3, key)
    assert service.resolve_params(sampled, 3, key) != service.resolve_params(sampled, 3, burst_key("burst_b"))


def test_fixed_mode_needs_both_parameters():
    with pytest.raises(ValueError):
        NoiseConfig(mode="fixed", lambda_shot=0.01)


def test_burst_noise_is_keyed_by_frame_index(service):
    frames = [np.full((8, 8), 0.5) for _ in range(4)]
    params = NoiseParams(lambda_shot=0.01, lambda_read=0.001)

    full = service.add_burst_noise(frames, params, seed=5, frame_indices=[0, 1, 2, 3])
    single = service.add_burst_noise(frames[:1], params, seed=5, frame_indices=[2])

    assert np.array_equal(full[2], single[0])
    assert not np.array_equal(full[0], full[1])


def test_burst_key_is_stable():
    assert burst_key("leica_001") == burst_key("leica_001")
    assert burst_key("leica_001") != burst_key("leica_002")


def test_noise_record(service):
    cfg = NoiseConfig(mode="fixed", lambda_shot=0.01, lambda_read=0.001)
    params = service.resolve_params(cfg, seed=1)

    record = service.record("b0", cfg, 1, params, [0, 1])

    assert record.mode == "fixed"
    assert record.streams == [0, 1]
    assert record.params.lambda_shot == 0.01
