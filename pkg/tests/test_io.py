import struct

import numpy as np
import pytest

from waveformer import io
from waveformer.model import ParamStore, init_params, toy_config


@pytest.fixture
def vol():
    return np.random.default_rng(0).standard_normal((2, 4, 6, 8)).astype(np.float32)


class TestVolume:
    def test_roundtrip_bit_exact(self, tmp_path, vol):
        vol[0, 0, 0, :3] = [np.inf, -0.0, 1e-45]
        io.write_volume(tmp_path / "v.wvf", vol)
        back = io.read_volume(tmp_path / "v.wvf")
        assert back.dtype == np.float32 and back.shape == vol.shape
        assert back.tobytes() == vol.tobytes()

    def test_header_layout(self, vol):
        buf = io.encode_volume(vol)
        assert buf[:4] == b"WVF1"
        assert struct.unpack("<6I", buf[4:28]) == (4, 2, 4, 6, 8, 0)
        assert len(buf) == 28 + vol.size * 4

    def test_3d_is_single_channel(self):
        assert io.decode_volume(io.encode_volume(np.zeros((2, 2, 2)))).shape == (1, 2, 2, 2)

    @pytest.mark.parametrize("mutate,msg", [
        (lambda b: b"XXXX" + b[4:], "bad magic"),
        (lambda b: b[:-1], "truncated"),
        (lambda b: b[:10], "truncated"),
        (lambda b: b + b"\0", "trailing"),
        (lambda b: b[:4] + struct.pack("<I", 3) + b[8:], "ndim"),
        (lambda b: b[:24] + struct.pack("<I", 7) + b[28:], "dtype"),
        (lambda b: b[:8] + struct.pack("<I", 0) + b[12:], "zero extent"),
    ])
    def test_rejects_corruption(self, vol, mutate, msg):
        with pytest.raises(io.FormatError, match=msg):
            io.decode_volume(mutate(io.encode_volume(vol)))

    def test_labels(self, tmp_path):
        lab = np.random.default_rng(1).integers(0, 3, (4, 4, 4))
        io.write_volume(tmp_path / "l.wvf", lab[None].astype(np.float32))
        np.testing.assert_array_equal(io.read_labels(tmp_path / "l.wvf"), lab)
        io.write_volume(tmp_path / "bad.wvf", np.full((1, 2, 2, 2), 0.5))
        with pytest.raises(io.FormatError, match="non-integer"):
            io.read_labels(tmp_path / "bad.wvf")
        io.write_volume(tmp_path / "two.wvf", np.zeros((2, 2, 2, 2)))
        with pytest.raises(io.FormatError, match="one channel"):
            io.read_labels(tmp_path / "two.wvf")


class TestCheckpoint:
    def test_roundtrip_bit_exact(self, tmp_path):
        store = init_params(toy_config(), 3)
        io.save_checkpoint(tmp_path / "m.wfck", store)
        back = io.load_checkpoint(tmp_path / "m.wfck")
        assert back.names() == store.names()
        assert all(back[k].tobytes() == store[k].tobytes() and back[k].shape == store[k].shape for k in store)

    def test_layout_and_order(self):
        store = ParamStore({"b": np.ones(2, np.float32), "a": np.zeros((1, 3), np.float32)})
        buf = io.encode_checkpoint(store)
        assert buf[:4] == b"WFCK" and struct.unpack("<II", buf[4:12]) == (1, 2)
        assert struct.unpack("<I", buf[12:16])[0] == 1 and buf[16:17] == b"a"

    @pytest.mark.parametrize("mutate,msg", [
        (lambda b: b"WVF1" + b[4:], "bad magic"),
        (lambda b: b[:4] + struct.pack("<I", 2) + b[8:], "version"),
        (lambda b: b[:-3], "truncated"),
        (lambda b: b + b"xyz", "trailing"),
    ])
    def test_rejects_corruption(self, mutate, msg):
        store = ParamStore({"w": np.arange(6, dtype=np.float32).reshape(2, 3)})
        with pytest.raises(io.FormatError, match=msg):
            io.decode_checkpoint(mutate(io.encode_checkpoint(store)))

    def test_duplicate_names_rejected(self):
        one = io.encode_checkpoint(ParamStore({"w": np.ones(1, np.float32)}))
        body = one[12:]
        buf = one[:8] + struct.pack("<I", 2) + body + body
        with pytest.raises(io.FormatError, match="duplicate"):
            io.decode_checkpoint(buf)


class TestRunConfig:
    def test_parse_flat_mapping(self):
        cfg = io.parse_run_config("base_channels: 8\ninput_extent: 32\nseed: 3\nbins: [20, 40]\nlr: 0.001\n")
        assert cfg.model.base_channels == 8 and cfg.seed == 3 and cfg.bins == (20, 40) and cfg.lr == 0.001
        cfg.validate()

    def test_empty_document_is_defaults(self):
        cfg = io.parse_run_config("")
        assert cfg.model.input_extent == 96 and cfg.iterations == 500

    def test_unknown_key_rejected(self):
        with pytest.raises(ValueError, match="unknown config keys \\['learning_rate'\\]"):
            io.parse_run_config("learning_rate: 0.1\n")

    def test_non_mapping_rejected(self):
        with pytest.raises(ValueError, match="flat mapping"):
            io.parse_run_config("- 1\n- 2\n")

    @pytest.mark.parametrize("text,msg", [
        ("lr: -1\n", "lr"),
        ("metrics: [dice, iou]\n", "unknown metrics"),
        ("bins: [40, 20]\n", "increasing"),
        ("spacing: [1, 1]\n", "spacing"),
        ("input_extent: 100\n", "divisible by 32"),
    ])
    def test_validation(self, text, msg):
        with pytest.raises(ValueError, match=msg):
            io.parse_run_config(text).validate()

    def test_missing_file(self, tmp_path):
        with pytest.raises(FileNotFoundError):
            io.load_run_config(tmp_path / "nope.yaml")
