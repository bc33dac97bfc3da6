import numpy as np
import pytest

from tfmodes.container import MAGIC, read_container, write_container
from tfmodes.errors import UnsupportedEncodingError
from tfmodes.tfa import SpectrogramKind
from tests.conftest import make_spec


def test_complex_spectrogram_with_planes(tmp_path):
    rng = np.random.default_rng(3)
    z = (rng.normal(size=(9, 6)) + 1j * rng.normal(size=(9, 6))).astype(np.complex64)
    spec = make_spec(z.astype(np.complex128), kind=SpectrogramKind.COMPLEX, guard_bins=2, channel_id="ch3")
    baseline = rng.normal(size=(9, 6)).astype(np.float32)
    scale = np.linspace(1, 2, 6, dtype=np.float32)
    path = tmp_path / "a.tfs"
    write_container(path, spec, {"baseline": baseline, "residual_scale": scale}, meta={"stage": "test"})

    assert path.read_bytes().startswith(MAGIC)
    loaded = read_container(path)
    out = loaded.spectrogram
    assert out.kind == SpectrogramKind.COMPLEX
    assert out.guard_bins == 2
    assert out.channel_id == "ch3"
    assert out.window_len == spec.window_len and out.hop == spec.hop
    np.testing.assert_array_equal(out.values, z)
    np.testing.assert_array_equal(out.freq_axis_hz, spec.freq_axis_hz)
    np.testing.assert_array_equal(out.time_axis_ms, spec.time_axis_ms)
    np.testing.assert_array_equal(loaded.planes["baseline"], baseline)
    np.testing.assert_array_equal(loaded.planes["residual_scale"], scale[None, :])
    assert loaded.meta == {"stage": "test"}


def test_mask_and_labels_keep_integer_values(tmp_path):
    labels = np.array([[0, 1, 1], [0, 0, 2], [3, 0, 2]], dtype=np.int32)
    spec = make_spec(labels, kind=SpectrogramKind.LABELS)
    write_container(tmp_path / "l.tfs", spec)
    out = read_container(tmp_path / "l.tfs").spectrogram
    assert out.values.dtype == np.int32
    np.testing.assert_array_equal(out.values, labels)

    mask = make_spec((labels > 0).astype(np.uint8), kind=SpectrogramKind.MASK)
    write_container(tmp_path / "m.tfs", mask)
    assert read_container(tmp_path / "m.tfs").spectrogram.values.dtype == np.uint8


def test_foreign_file_is_rejected(tmp_path):
    path = tmp_path / "x.tfs"
    path.write_bytes(b"PNG\x00\x00\x00\x00\x00rest")
    with pytest.raises(UnsupportedEncodingError):
        read_container(path)


@pytest.mark.parametrize("cut", [10, 40, -7])
def test_truncated_file_is_rejected(tmp_path, cut):
    path = tmp_path / "t.tfs"
    write_container(path, make_spec(np.ones((9, 6))), {"baseline": np.zeros((9, 6))})
    path.write_bytes(path.read_bytes()[:cut])
    with pytest.raises(UnsupportedEncodingError):
        read_container(path)


def test_garbled_header_is_rejected(tmp_path):
    path = tmp_path / "h.tfs"
    path.write_bytes(MAGIC + (5).to_bytes(4, "little") + b"{nope")
    with pytest.raises(UnsupportedEncodingError):
        read_container(path)
