import dataclasses
import logging

import numpy as np
import pytest
from numpy.testing import assert_allclose

from csi_hdfm.classify import load_model, predict_many
from csi_hdfm.csi import CsiFrame, LabeledFrame, default_subcarrier_index
from csi_hdfm.errors import ValidationError
from csi_hdfm.hdfm import HdfmConfig
from csi_hdfm.pipeline import (
    PipelineConfig,
    read_features_table,
    run_pipeline,
    stream_matrices,
    write_pipeline,
)
from csi_hdfm.synth import dataset_spec, gen_labeled_dataset, gen_noise, to_csi_frame


def csi_dataset(n, t, strengths, classes, frames, spread=0.4, seed=0, n_rx=1):
    spec = dataset_spec(n, t, strengths, classes, frames, seed=seed, class_spread=spread)
    return [
        LabeledFrame(to_csi_frame(item.r, 1, n_rx, n // n_rx)[0], item.label, item.sample_id)
        for item in gen_labeled_dataset(spec)
    ]


@pytest.fixture(scope="module")
def activity_frames():
    return csi_dataset(50, 1000, [20.0, 6.0, 3.0], classes=4, frames=50)


@pytest.fixture(scope="module")
def activity_result(activity_frames):
    return run_pipeline(activity_frames)


def test_pipeline_recovers_classes(activity_result):
    assert activity_result.p == 3
    assert activity_result.report.accuracy >= 0.95
    assert activity_result.features.shape == (200, 6 * 2 * 3)
    assert len(activity_result.test_idx) == 40
    levels = [lv["amplitude"] for lv in activity_result.frame_levels]
    assert levels.count(3) >= 180
    assert all(lv["phase"] is None for lv in activity_result.frame_levels)


def test_pca_with_wrong_p_scores_lower(activity_frames, activity_result):
    pca = run_pipeline(activity_frames, PipelineConfig(baseline="pca", p=1))
    assert pca.p == 1
    assert pca.report.accuracy < activity_result.report.accuracy
    assert pca.report.accuracy <= 0.6


def test_constant_phase_stream_is_logged(caplog):
    frames = csi_dataset(20, 200, [10.0], classes=2, frames=4)
    run_pipeline(frames, PipelineConfig(hdfm=HdfmConfig(p_max=5)))
    assert "phase stream is constant in every frame" in caplog.text


def test_stream_matrices():
    r = gen_noise(4, 30, 1.0, 0)
    frame, offset = to_csi_frame(r, 1, 1, 4)
    streams = stream_matrices(frame)
    assert_allclose(streams["amplitude"], r - r.mean(axis=1, keepdims=True), atol=1e-12)
    assert np.all(streams["phase"] == 0)
    raw = stream_matrices(frame, center=False)
    assert_allclose(raw["amplitude"], r + offset, atol=1e-12)


def test_threads_do_not_change_results():
    frames = csi_dataset(20, 200, [12.0, 5.0], classes=2, frames=6, spread=0.5)
    config = PipelineConfig(hdfm=HdfmConfig(p_max=6), test_fraction=0.5)
    serial = run_pipeline(frames, config)
    threaded = run_pipeline(
        frames, dataclasses.replace(config, hdfm=HdfmConfig(p_max=6, threads=3))
    )
    assert serial.p == threaded.p
    assert serial.frame_levels == threaded.frame_levels
    assert serial.features.tobytes() == threaded.features.tobytes()


def test_pure_noise_has_nothing_to_classify():
    frames = csi_dataset(20, 400, [], classes=2, frames=5)
    with pytest.raises(ValidationError, match="no factors"):
        run_pipeline(frames, PipelineConfig(hdfm=HdfmConfig(p_max=5)))


def test_rejects_bad_datasets():
    frames = csi_dataset(10, 100, [8.0], classes=2, frames=3)
    odd = LabeledFrame(CsiFrame(1, 1, 10, np.ones((10, 50))), "class0", "odd")
    with pytest.raises(ValidationError, match="class0/odd"):
        run_pipeline([*frames, odd])
    with pytest.raises(ValidationError, match="at least 2 classes"):
        run_pipeline([f for f in frames if f.label == "class0"])
    with pytest.raises(ValidationError, match="Empty dataset"):
        run_pipeline([])


def test_config_validation():
    with pytest.raises(ValueError, match="fixed p"):
        PipelineConfig(baseline="pca")
    with pytest.raises(ValueError, match="Unknown baseline"):
        PipelineConfig(baseline="lda")  # type: ignore[arg-type]


def test_write_pipeline(tmp_path):
    frames = csi_dataset(20, 200, [12.0, 5.0], classes=2, frames=6, spread=0.5)
    result = run_pipeline(frames, PipelineConfig(hdfm=HdfmConfig(p_max=6), test_fraction=0.5))
    paths = write_pipeline(result, tmp_path)
    assert sorted(p.name for p in paths) == [
        "confusion.csv",
        "features.csv",
        "frame_levels.csv",
        "metrics.csv",
        "metrics.json",
        "model.bin",
        "split.csv",
    ]
    features, labels = read_features_table(tmp_path / "features.csv")
    assert_allclose(features, result.features, rtol=0, atol=0)
    assert labels == list(result.labels)
    model = load_model(tmp_path / "model.bin")
    assert predict_many(model, features) == predict_many(result.model, result.features)


def with_phase(frames, make_phase, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for item in frames:
        frame = item.frame
        blocks = [make_phase(rng, frame.n_sc, frame.t) for _ in range(frame.n_tx * frame.n_rx)]
        data = np.abs(frame.data) * np.exp(1j * np.vstack(blocks))
        rephased = CsiFrame(frame.n_tx, frame.n_rx, frame.n_sc, data, frame.sample_rate_hz)
        out.append(LabeledFrame(rephased, item.label, item.sample_id))
    return out


def ramp_phase(rng, n_sc, t):
    # per-packet timing slope and offset, plus white measurement noise
    k = default_subcarrier_index(n_sc)[:, None]
    slope = rng.uniform(-0.05, 0.05, size=t)
    offset = rng.uniform(-np.pi, np.pi, size=t)
    return slope * k + offset + rng.normal(0.0, 0.1, size=(n_sc, t))


def uniform_phase(rng, n_sc, t):
    return rng.uniform(-np.pi, np.pi, size=(n_sc, t))


@pytest.fixture(scope="module")
def intel_frames():
    return csi_dataset(30, 1000, [20.0, 6.0, 3.0], classes=2, frames=10)


def test_sanitized_phase_noise_is_factor_free(intel_frames):
    result = run_pipeline(with_phase(intel_frames, ramp_phase))
    assert result.p == 3
    phase_levels = [lv["phase"] for lv in result.frame_levels]
    assert None not in phase_levels
    assert np.median(phase_levels) <= 1


@pytest.mark.parametrize("method", ["two_point", "least_squares"])
def test_phase_stream_drops_sanitized_directions(intel_frames, method):
    frames = with_phase(intel_frames, ramp_phase)
    streams = stream_matrices(frames[0].frame, method=method)
    assert streams["phase"].shape == (28, 1000)
    assert np.linalg.matrix_rank(streams["phase"]) == 28
    result = run_pipeline(frames, PipelineConfig(phase_method=method))
    assert result.p == 3


def test_amplitude_sets_the_dataset_level(intel_frames, caplog):
    caplog.set_level(logging.INFO, logger="csi_hdfm.pipeline")
    result = run_pipeline(with_phase(intel_frames, uniform_phase, seed=1))
    assert result.p == 3
    assert "using p=3" in caplog.text


def test_phase_only_dataset_uses_phase_level():
    rng = np.random.default_rng(4)
    loadings = np.linalg.qr(rng.normal(size=(30, 2)))[0] * [4.0, 3.0]
    frames = []
    for label in ("a", "b"):
        for i in range(4):
            ph = 0.3 * (loadings @ rng.normal(size=(2, 400))) + rng.normal(0.0, 0.1, size=(30, 400))
            frame = CsiFrame(1, 1, 30, np.exp(1j * ph))
            frames.append(LabeledFrame(frame, label, f"{label}-{i}"))
    result = run_pipeline(frames, PipelineConfig(hdfm=HdfmConfig(p_max=6), test_fraction=0.5))
    assert all(lv["amplitude"] is None for lv in result.frame_levels)
    assert result.p >= 1


def test_short_phase_stream_contributes_zeros(caplog):
    frames = with_phase(csi_dataset(6, 200, [4.0], classes=2, frames=4, n_rx=2), uniform_phase)
    result = run_pipeline(frames, PipelineConfig(hdfm=HdfmConfig(p_max=1), test_fraction=0.5))
    assert all(lv["phase"] is None for lv in result.frame_levels)
    assert "fewer than 4 usable rows" in caplog.text
    assert_allclose(result.features[:, 6 * result.p :], 0.0)
