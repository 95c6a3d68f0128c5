import json
import time

import numpy as np
import pytest

import storage
from main import main
from schemas import CropManifest, PipelineManifest, QualityReport, SplitRecord, WarpFile

SMALL = ["--pyramid-levels", "2"]


@pytest.fixture
def fixture_burst(tmp_path):
    burst_dir = tmp_path / "input" / "leica_000"
    assert main(["fixture", "--out", str(burst_dir), "--size", "64", "--frames", "3", "--seed", "1"]) == 0
    return burst_dir


def test_fixture_writes_frames_and_ground_truth(fixture_burst):
    payloads = sorted(fixture_burst.glob("frame_*.pgm"))

    assert len(payloads) == 3
    assert (fixture_burst / "gt.png").is_file()
    sidecar = storage.read_sidecar(payloads[0].with_suffix(".json"))
    assert (sidecar.width, sidecar.height, sidecar.lens) == (64, 64, "leica")


def test_ingest_and_register(tmp_path, fixture_burst):
    out = tmp_path / "ingest"

    assert main(["ingest", "--burst-dir", str(fixture_burst), "--out", str(out)]) == 0
    assert len(list(out.glob("frame_*.png"))) == 3
    assert json.loads((out / "burst.json").read_text())["kind"] == "raw"

    warps = tmp_path / "warps.json"
    assert main(["register", "--burst-dir", str(fixture_burst), "--out", str(warps)] + SMALL) == 0
    warp_file = storage.read_json(warps, WarpFile)
    assert [record.index for record in warp_file.frames] == [0, 1, 2]
    assert warp_file.frames[0].cumulative == [1.0, 0.0, 0.0, 0.0, 1.0, 0.0]


def test_stack_writes_fused_decision_and_raw(tmp_path, fixture_burst):
    out = tmp_path / "stack"

    code = main([
        "stack", "--burst-dir", str(fixture_burst), "--out", str(out / "fused.png"),
        "--method", "pixel_contrast", "--decision-map", str(out / "decision.png"),
        "--raw-out", str(out / "raw.png"),
    ] + SMALL)

    assert code == 0
    assert storage.read_rgb(out / "fused.png").shape == (64, 64, 3)
    assert storage.read_counts(out / "decision.png").max() < 3
    assert storage.read_counts(out / "raw.png").shape == (32, 32, 4)
    assert (out / "warps.json").is_file()

    again = tmp_path / "again.png"
    assert main([
        "stack", "--burst-dir", str(fixture_burst), "--out", str(again),
        "--warps", str(out / "warps.json"), "--method", "laplacian", "--fusion-levels", "3",
    ]) == 0
    assert again.is_file()


def test_noise_on_a_raw_burst(tmp_path, fixture_burst):
    out = tmp_path / "noisy"

    code = main([
        "noise", "--input", str(fixture_burst), "--out", str(out),
        "--lambda-shot", "0.01", "--lambda-read", "0.0005", "--seed", "2",
    ])

    assert code == 0
    assert len(list(out.glob("frame_*.pgm"))) == 3
    record = json.loads((out / "noise.json").read_text())
    assert record["params"] == {"lambda_shot": 0.01, "lambda_read": 0.0005}
    assert record["streams"] == [0, 1, 2]


def test_noise_without_parameters_is_a_config_error(tmp_path, fixture_burst):
    assert main(["noise", "--input", str(fixture_burst), "--out", str(tmp_path / "n")]) == 2


def test_crops(tmp_path, fixture_burst):
    out = tmp_path / "crops"

    code = main([
        "crops", "--burst-dir", str(fixture_burst), "--gt", str(fixture_burst / "gt.png"),
        "--out", str(out), "--size", "32", "--raw", "--augment", "--seed", "4",
    ] + SMALL)

    assert code == 0
    manifest = storage.read_json(out / "manifest.json", CropManifest)
    assert manifest.crop_size == 32 and manifest.seed == 4
    crops = manifest.bursts[0].crops
    assert len(crops) == 4
    assert len(crops[0].frames) == 3 and len(crops[0].raw) == 3
    assert crops[0].augment is not None


def test_split(tmp_path):
    root = tmp_path / "root"
    for i in range(3):
        assert main(["fixture", "--out", str(root / f"burst_{i}"), "--size", "32", "--frames", "1"]) == 0
    out = tmp_path / "split.json"

    assert main(["split", "--root", str(root), "--counts", "leica=2:1", "--out", str(out)]) == 0
    record = storage.read_json(out, SplitRecord)
    assert sorted(record.assignment.values()) == ["test", "train", "train"]

    assert main(["split", "--root", str(root), "--counts", "leica=3:1", "--out", str(out)]) == 3
    assert main(["split", "--root", str(root), "--counts", "leica", "--out", str(out)]) == 2


def test_eval(tmp_path, rng):
    image = rng.random((32, 32, 3))
    storage.write_rgb(tmp_path / "pred.png", image)
    storage.write_rgb(tmp_path / "gt.png", np.clip(image + 0.05, 0, 1))

    code = main([
        "eval", "--pred", str(tmp_path / "pred.png"), "--gt", str(tmp_path / "gt.png"),
        "--csv", str(tmp_path / "report.csv"),
    ])

    assert code == 0
    report = storage.read_json(tmp_path / "report.json", QualityReport)
    assert report.count == 1
    assert 20 < report.items[0].psnr < 30
    assert (tmp_path / "report.csv").is_file()


def _pipeline(fixture_burst, out, *extra):
    return main([
        "pipeline", "--input", str(fixture_burst.parent), "--out", str(out),
        "--crop-size", "32", "--noise", "sampled", "--seed", "5",
    ] + SMALL + list(extra))


def test_pipeline_end_to_end(tmp_path, fixture_burst):
    out = tmp_path / "run"

    assert _pipeline(fixture_burst, out) == 0

    burst_out = out / "bursts" / "leica_000"
    for name in ("burst.json", "warps.json", "noise.json", "fused.png", "fusion.json"):
        assert (burst_out / name).is_file()
    manifest = storage.read_json(out / "pipeline.json", PipelineManifest)
    assert [r.stage for r in manifest.stages] == [
        "ingest", "demosaic", "register", "noise", "fuse", "crops", "eval",
    ]
    crops = storage.read_json(out / "crops" / "manifest.json", CropManifest)
    assert crops.bursts[0].split == "unassigned"
    assert len(crops.bursts[0].crops) == 4
    report = storage.read_json(out / "report.json", QualityReport)
    assert report.items[0].id == "leica_000"


def test_pipeline_is_deterministic(tmp_path, fixture_burst):
    first, second = tmp_path / "first", tmp_path / "second"

    assert _pipeline(fixture_burst, first) == 0
    assert _pipeline(fixture_burst, second, "--threads", "1") == 0

    for name in ("report.json", "crops/manifest.json", "bursts/leica_000/noise.json"):
        assert (first / name).read_text() == (second / name).read_text()
    assert (first / "bursts/leica_000/fused.png").read_bytes() == (second / "bursts/leica_000/fused.png").read_bytes()


def test_pipeline_skipped_stages(tmp_path, fixture_burst):
    out = tmp_path / "run"

    assert _pipeline(fixture_burst, out, "--skip", "crops", "--skip", "eval") == 0

    assert not (out / "crops").exists()
    assert not (out / "report.json").exists()


def test_pipeline_skips_registration(tmp_path, fixture_burst):
    out = tmp_path / "run"

    assert _pipeline(fixture_burst, out, "--skip", "register") == 0

    assert not (out / "bursts" / "leica_000" / "warps.json").exists()
    assert (out / "bursts" / "leica_000" / "fused.png").is_file()
    manifest = storage.read_json(out / "pipeline.json", PipelineManifest)
    assert manifest.config.stages.registration is False
    assert "register" not in [r.stage for r in manifest.stages]


def test_pipeline_ingest_cannot_be_skipped(tmp_path, fixture_burst):
    with pytest.raises(SystemExit) as excinfo:
        _pipeline(fixture_burst, tmp_path / "run", "--skip", "ingest")

    assert excinfo.value.code == 2


def test_pipeline_missing_input_writes_error_record(tmp_path):
    out = tmp_path / "run"

    assert main(["pipeline", "--input", str(tmp_path / "missing"), "--out", str(out)]) == 3

    record = json.loads((out / "error.json").read_text())
    assert record["stage"] == "ingest"
    assert record["code"] == 3


def test_pipeline_config_errors(tmp_path, fixture_burst, monkeypatch):
    out = str(tmp_path / "run")
    assert main(["pipeline", "--input", str(fixture_burst), "--out", out, "--crop-size", "31"]) == 2
    assert main(["pipeline", "--input", str(fixture_burst)]) == 2

    config = tmp_path / "bad.toml"
    config.write_text("threads = [")
    assert main(["pipeline", "--config", str(config)]) == 2

    monkeypatch.setenv("FSTACK_THREADS", "many")
    assert main(["pipeline", "--input", str(fixture_burst), "--out", out]) == 2


def test_pipeline_reads_toml(tmp_path, fixture_burst):
    out = tmp_path / "run"
    config = tmp_path / "fstack.toml"
    config.write_text(
        f'input_dir = "{fixture_burst.as_posix()}"\n'
        f'output_dir = "{out.as_posix()}"\n'
        "crop_size = 32\n"
        "threads = 2\n"
        "[ecc]\npyramid_levels = 2\n"
        "[fusion]\nmethod = \"pixel_variance\"\n"
        "[stages]\neval = false\nregister = false\n"
    )

    assert main(["pipeline", "--config", str(config)]) == 0

    manifest = storage.read_json(out / "pipeline.json", PipelineManifest)
    assert manifest.config.fusion.method == "pixel_variance"
    assert manifest.config.threads == 2
    assert manifest.config.stages.registration is False
    assert (out / "bursts" / "leica_000" / "decision.png").is_file()
    assert not (out / "bursts" / "leica_000" / "warps.json").exists()


def test_pipeline_on_an_eight_frame_burst_finishes_quickly(tmp_path):
    burst_dir = tmp_path / "input" / "leica_000"
    assert main(["fixture", "--out", str(burst_dir), "--size", "512", "--frames", "8", "--seed", "2"]) == 0

    start = time.perf_counter()
    assert main(["pipeline", "--input", str(burst_dir.parent), "--out", str(tmp_path / "run")]) == 0

    assert time.perf_counter() - start < 30.0
    assert (tmp_path / "run" / "report.json").is_file()
