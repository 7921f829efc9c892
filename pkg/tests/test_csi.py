import numpy as np
import pytest
from numpy.testing import assert_allclose

from csi_hdfm.csi import (
    CSIF_HEADER,
    INTEL_5300_SUBCARRIERS,
    CsiFrame,
    LabeledFrame,
    amplitude,
    check_consistent_shapes,
    default_subcarrier_index,
    iter_channel_blocks,
    iter_row_blocks,
    load_dataset,
    load_frame,
    phase,
    phase_quality,
    read_geometry,
    sanitize_phase,
    sanitized_phase_basis,
    save_dataset,
    store_frame,
)
from csi_hdfm.errors import CorruptionError, FormatError, ValidationError


def random_frame(n_tx=1, n_rx=2, n_sc=30, t=40, seed=0):
    rng = np.random.default_rng(seed)
    n = n_tx * n_rx * n_sc
    data = rng.normal(size=(n, t)) + 1j * rng.normal(size=(n, t))
    return CsiFrame(n_tx, n_rx, n_sc, data, 500.0)


def test_frame_validation():
    with pytest.raises(ValidationError, match="expected 1 x 1 x 3 = 3"):
        CsiFrame(1, 1, 3, np.ones((4, 10)))
    with pytest.raises(ValidationError, match="at least 2 packets"):
        CsiFrame(1, 1, 3, np.ones((3, 1)))
    bad = np.ones((3, 10), dtype=complex)
    bad[1, 7] = np.nan
    with pytest.raises(ValidationError, match="row 1, packet 7"):
        CsiFrame(1, 1, 3, bad)
    with pytest.raises(TypeError):
        CsiFrame(1, 1.0, 3, np.ones((3, 10)))


def test_frame_is_read_only():
    frame = random_frame()
    with pytest.raises(ValueError):
        frame.data[0, 0] = 0
    assert frame.n == 60
    assert frame.t == 40
    assert frame.geometry == (1, 2, 30, 40)


def test_store_load(tmp_path):
    frame = random_frame()
    path = tmp_path / "a" / "frame.csif"
    store_frame(frame, path)
    assert path.stat().st_size == CSIF_HEADER.size + 60 * 40 * 16
    assert load_frame(path) == frame
    assert not list(path.parent.glob(".*"))


def test_load_bad_magic(tmp_path):
    path = tmp_path / "frame.csif"
    store_frame(random_frame(), path)
    raw = bytearray(path.read_bytes())
    raw[:4] = b"NOPE"
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="bad magic"):
        load_frame(path)


def test_load_bad_version(tmp_path):
    path = tmp_path / "frame.csif"
    store_frame(random_frame(), path)
    raw = bytearray(path.read_bytes())
    raw[4:6] = (7).to_bytes(2, "little")
    path.write_bytes(bytes(raw))
    with pytest.raises(FormatError, match="version 7"):
        load_frame(path)


def test_load_truncated(tmp_path):
    path = tmp_path / "frame.csif"
    store_frame(random_frame(), path)
    raw = path.read_bytes()
    path.write_bytes(raw[:-16])
    with pytest.raises(CorruptionError, match="payload has"):
        load_frame(path)
    path.write_bytes(raw[:10])
    with pytest.raises(CorruptionError, match="truncated"):
        load_frame(path)


def test_iter_row_blocks(tmp_path):
    frame = random_frame(n_rx=3, t=25)
    path = tmp_path / "frame.csif"
    store_frame(frame, path)
    blocks = list(iter_row_blocks(path, block_rows=32))
    assert [offset for offset, _ in blocks] == [0, 32, 64]
    assert_allclose(np.vstack([b for _, b in blocks]), frame.data, rtol=0, atol=0)


def test_iter_channel_blocks(tmp_path):
    frame = random_frame(n_rx=2, n_sc=30, t=25)
    path = tmp_path / "frame.csif"
    store_frame(frame, path)
    assert read_geometry(path) == (1, 2, 30, 25, 500.0)
    k = default_subcarrier_index(30)

    amp = list(iter_channel_blocks(path))
    assert [offset for offset, _ in amp] == [0, 30]
    assert_allclose(np.vstack([b for _, b in amp]), amplitude(frame), rtol=0, atol=0)

    cleaned = np.vstack([b for _, b in iter_channel_blocks(path, "phase")])
    assert_allclose(cleaned, sanitize_phase(phase(frame), k, "least_squares"), atol=1e-12)

    reduced = np.vstack([b for _, b in iter_channel_blocks(path, "phase", reduced=True)])
    basis = sanitized_phase_basis(k, 2, "least_squares")
    assert_allclose(reduced, basis.T @ cleaned, atol=1e-10)
    with pytest.raises(ValueError, match="Unknown channel"):
        next(iter_channel_blocks(path, "power"))


def test_amplitude_and_phase():
    data = np.array([[3 + 4j, -1 + 0j], [complex(-1, -0.0), 0j]])
    frame = CsiFrame(1, 1, 2, data)
    assert_allclose(amplitude(frame), [[5, 1], [1, 0]])
    angles = phase(frame)
    assert angles[0, 1] == pytest.approx(np.pi)
    assert angles[1, 0] == pytest.approx(np.pi)
    assert angles[1, 1] == 0.0
    assert np.all((angles > -np.pi) & (angles <= np.pi))


def test_phase_quality(caplog):
    data = np.ones((2, 5), dtype=complex)
    data[1, 2] = 0
    frame = CsiFrame(1, 1, 2, data)
    quality = phase_quality(frame)
    assert quality.zero_count == 1
    assert quality.zero_fraction == pytest.approx(0.1)
    assert not quality.ok
    assert quality.as_dict()["rows_with_zeros"] == [1]
    phase(frame)
    assert "1 zero-magnitude" in caplog.text


def test_default_subcarrier_index():
    index = default_subcarrier_index(30)
    assert list(index) == list(INTEL_5300_SUBCARRIERS)
    assert index[0] == -28 and index[-1] == 28
    assert np.all(np.diff(index) > 0)
    assert list(default_subcarrier_index(4)) == [0, 1, 2, 3]


def affine_phase(k, blocks=2, t=50, seed=0):
    rng = np.random.default_rng(seed)
    slopes = rng.uniform(-0.05, 0.05, size=(blocks, 1, t))
    offsets = rng.uniform(-3, 3, size=(blocks, 1, t))
    ramp = slopes * np.asarray(k, dtype=float)[None, :, None] + offsets
    return ramp.reshape(blocks * len(k), t)


@pytest.mark.parametrize("method", ["two_point", "least_squares"])
def test_sanitize_removes_affine_phase(method):
    k = default_subcarrier_index(30)
    cleaned = sanitize_phase(affine_phase(k), k, method)
    assert np.max(np.abs(cleaned)) < 1e-9


def test_sanitize_removes_wrapped_ramp():
    k = np.arange(16)
    ramp = 0.3 * k[:, None] + np.linspace(0, 20, 8)[None, :]
    wrapped = np.angle(np.exp(1j * ramp))
    assert np.max(np.abs(sanitize_phase(wrapped, k))) < 1e-9


@pytest.mark.parametrize("method", ["two_point", "least_squares"])
def test_sanitize_properties(method):
    k = default_subcarrier_index(30)
    rng = np.random.default_rng(3)
    noisy = affine_phase(k, seed=1) + rng.normal(0, 0.1, size=(60, 50))
    cleaned = sanitize_phase(noisy, k, method)
    blocks = cleaned.reshape(2, 30, 50)
    assert_allclose(blocks.mean(axis=1), 0, atol=1e-12)
    if method == "two_point":
        assert_allclose(blocks[:, -1, :], blocks[:, 0, :], atol=1e-12)
    else:
        kc = k - k.mean()
        assert_allclose(np.einsum("i,bit->bt", kc, blocks), 0, atol=1e-9)
    assert_allclose(sanitize_phase(cleaned, k, method), cleaned, atol=1e-12)


def test_sanitize_keeps_local_structure():
    k = default_subcarrier_index(30)
    rng = np.random.default_rng(5)
    bump = np.exp(-((k - 5.0) ** 2) / 8.0)[:, None] * np.linspace(0.5, 1.5, 20)[None, :]
    affine = rng.uniform(-0.05, 0.05, size=20) * k[:, None] + rng.uniform(-1, 1, size=20)
    cleaned = sanitize_phase(affine + bump, k, "least_squares")
    design = np.column_stack([np.ones(30), k])
    fit = design @ np.linalg.lstsq(design, bump, rcond=None)[0]
    assert_allclose(cleaned, bump - fit, atol=1e-9)
    assert np.all(np.argmax(cleaned, axis=0) == np.argmax(bump[:, 0]))


@pytest.mark.parametrize("method", ["two_point", "least_squares"])
def test_sanitized_phase_basis(method):
    k = default_subcarrier_index(30)
    basis = sanitized_phase_basis(k, 2, method)
    assert basis.shape == (60, 56)
    assert_allclose(basis.T @ basis, np.eye(56), atol=1e-12)
    cleaned = sanitize_phase(np.random.default_rng(2).normal(size=(60, 50)), k, method)
    assert_allclose(basis @ (basis.T @ cleaned), cleaned, atol=1e-10)
    assert sanitized_phase_basis([0, 1], 3, method).shape == (6, 0)


def test_sanitized_phase_basis_errors():
    with pytest.raises(ValueError, match="Unknown phase sanitization"):
        sanitized_phase_basis([0, 1, 2], 1, "median")  # type: ignore[arg-type]
    with pytest.raises(ValueError, match="blocks"):
        sanitized_phase_basis([0, 1, 2], 0)


def test_sanitize_errors():
    with pytest.raises(ValidationError, match="blocks of 4"):
        sanitize_phase(np.zeros((6, 3)), [0, 1, 2, 3])
    with pytest.raises(ValueError, match="strictly increasing"):
        sanitize_phase(np.zeros((4, 3)), [0, 2, 1, 3])
    with pytest.raises(ValueError, match="at least 2 subcarriers"):
        sanitize_phase(np.zeros((4, 3)), [0])
    with pytest.raises(ValueError, match="Unknown phase sanitization"):
        sanitize_phase(np.zeros((4, 3)), [0, 1, 2, 3], "median")  # type: ignore[arg-type]


def test_dataset_roundtrip(tmp_path):
    frames = [
        LabeledFrame(random_frame(n_sc=4, seed=i), label, f"s{i}")
        for i, label in enumerate(["walk", "sit", "walk"])
    ]
    save_dataset(tmp_path, frames)
    loaded = load_dataset(tmp_path)
    assert [(f.label, f.sample_id) for f in loaded] == [
        ("sit", "s1"),
        ("walk", "s0"),
        ("walk", "s2"),
    ]
    assert loaded[1].frame == frames[0].frame


def test_load_dataset_missing(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_dataset(tmp_path / "nowhere")


def test_check_consistent_shapes():
    good = [LabeledFrame(random_frame(n_sc=4, seed=i), "a", f"s{i}") for i in range(3)]
    assert check_consistent_shapes(good) == (1, 2, 4, 40)
    odd = LabeledFrame(random_frame(n_sc=4, t=30), "b", "odd")
    with pytest.raises(ValidationError, match=r"b/odd \(1, 2, 4, 30\)"):
        check_consistent_shapes([*good, odd])
    with pytest.raises(ValidationError, match="Empty dataset"):
        check_consistent_shapes([])
