import numpy as np
import pytest

from msnn.binio import BadMagicError, ChecksumError, FormatError, UnsupportedVersionError
from msnn.layers import softmax
from msnn.model import (
    Checkpoint,
    MsnnConfig,
    MsnnModel,
    load_checkpoint,
    save_checkpoint,
)

from conftest import TINY


def mi_default_config(**kw):
    base = dict(n_channels=64, n_timepoints=1024, sampling_rate=512, n_classes=2, seed=3)
    base.update(kw)
    return MsnnConfig(**base)


class TestConfig:
    def test_mi_defaults_build(self):
        cfg = mi_default_config()
        assert cfg.stem_kernel_len == 256
        assert cfg.n_out_timepoints == 769
        assert cfg.concat_dim == 112
        model = MsnnModel.build(cfg)
        assert model.classifier.weights_.shape == (112, 2)

    def test_same_seed_is_bit_identical(self):
        cfg = MsnnConfig(seed=9, **TINY)
        a = MsnnModel.build(cfg).parameters()
        b = MsnnModel.build(cfg).parameters()
        for name in a:
            np.testing.assert_array_equal(a[name], b[name])

    def test_kernel_exceeding_post_stem_length_rejected(self):
        with pytest.raises(ValueError, match="exceed the post-stem length"):
            mi_default_config(kernel_sizes=(800, 60, 20))

    def test_list_length_mismatch_rejected(self):
        with pytest.raises(ValueError, match="feature_maps"):
            MsnnConfig(
                n_channels=4, n_timepoints=64, sampling_rate=32, n_classes=2,
                kernel_sizes=(8, 4), feature_maps=(2, 4),
            )

    def test_odd_rate_rejected(self):
        with pytest.raises(ValueError, match="even"):
            MsnnConfig(n_channels=4, n_timepoints=64, sampling_rate=31, n_classes=2,
                       kernel_sizes=(4,), feature_maps=(2, 4))

    def test_branch_frequencies(self):
        cfg = mi_default_config()
        np.testing.assert_allclose(cfg.branch_frequencies_hz(), (5.12, 512 / 60, 25.6))

    def test_config_dict_roundtrip(self):
        cfg = mi_default_config(effective_fs=256.0)
        assert MsnnConfig.from_dict(cfg.to_dict()) == cfg


class TestForward:
    def test_mi_default_shapes(self):
        model = MsnnModel.build(mi_default_config())
        x = np.random.default_rng(0).standard_normal((1, 64, 1024, 1))
        out = model.forward(x, mode="train")
        st = out.intermediates["st"]
        sst = out.intermediates["sst"]
        assert [a.shape[1:] for a in st] == [(64, 769, 16), (64, 769, 32), (64, 769, 64)]
        assert [a.shape[1:] for a in sst] == [(1, 769, 16), (1, 769, 32), (1, 769, 64)]
        assert out.intermediates["concat"].shape[1:] == (1, 769, 112)
        assert out.intermediates["gap"].shape[1:] == (1, 1, 112)

    def test_probabilities_sum_to_one(self, primed_tiny_model):
        x = np.random.default_rng(1).standard_normal((5, 2, 32, 1))
        out = primed_tiny_model.forward(x, mode="eval")
        np.testing.assert_allclose(out.probs.sum(axis=1), 1.0, atol=1e-12)

    def test_eval_forward_deterministic(self, primed_tiny_model):
        x = np.random.default_rng(2).standard_normal((3, 2, 32, 1))
        a = primed_tiny_model.forward(x, mode="eval").probs
        b = primed_tiny_model.forward(x, mode="eval").probs
        np.testing.assert_array_equal(a, b)

    def test_shape_mismatch_rejected(self, tiny_model):
        with pytest.raises(ValueError, match="does not match"):
            tiny_model.forward(np.zeros((1, 3, 32, 1)))

    def test_tap_semantics_match_explicit_composition(self, primed_tiny_model):
        """Branch k's tapped feature equals composing the shared stages from
        scratch, rather than coming from a parallel stack."""
        model = primed_tiny_model
        x = np.random.default_rng(3).standard_normal((2, 2, 32, 1))
        out = model.forward(x, mode="eval")
        h = model.stem.forward(x)
        h = model.stem_bn.forward(h, train=False)
        h = model.stem_act.forward(h)
        for k in range(model.config.n_branches):
            h = model.separables[k].forward(h)
            h = model.separable_bns[k].forward(h, train=False)
            h = model.separable_acts[k].forward(h)
            np.testing.assert_allclose(out.intermediates["st"][k], h, atol=1e-12)

    def test_classifier_decomposition(self, primed_tiny_model):
        """probs == softmax(W^T gap + b) recomputed from the exported
        pooled features."""
        model = primed_tiny_model
        x = np.random.default_rng(4).standard_normal((4, 2, 32, 1))
        out = model.forward(x, mode="eval")
        pooled = out.intermediates["gap"].reshape(4, -1)
        logits = pooled @ model.classifier.weights_ + model.classifier.bias
        np.testing.assert_allclose(out.probs, softmax(logits), atol=1e-12)


class TestParamCount:
    def test_classifier_counts_and_reduction(self):
        model = MsnnModel.build(mi_default_config())
        pc = model.param_count()
        assert pc.classifier_weights == 2 * 112 == 224
        assert pc.classifier_weights_without_pooling == 769 * 224 == 172256
        assert pc.pooling_reduction_factor == 769

    def test_shared_kernel_convention_counts(self):
        pc = MsnnModel.build(mi_default_config()).param_count()
        # T_k + F_{k-1} * F_k for the default widths (4, 16, 32, 64)
        assert pc.separable_weights_shared_kernel == (100 + 64, 60 + 512, 20 + 2048)
        assert pc.separable_weights_per_map == (100 * 4 + 64, 60 * 16 + 512, 20 * 32 + 2048)

    def test_no_orphan_parameters(self, tiny_model):
        pc = tiny_model.param_count()
        assert pc.total == sum(arr.size for arr in tiny_model.parameters().values())
        assert pc.total == sum(pc.per_layer.values())


class TestCheckpoint:
    def test_roundtrip_bitwise_probs(self, tmp_path, primed_tiny_model):
        path = tmp_path / "model.msnn"
        primed_tiny_model.save(path)
        loaded = MsnnModel.load(path)
        x = np.random.default_rng(5).standard_normal((8, 2, 32, 1))
        np.testing.assert_array_equal(
            primed_tiny_model.forward(x, mode="eval").probs,
            loaded.forward(x, mode="eval").probs,
        )

    def test_extras_roundtrip(self, tmp_path, primed_tiny_model):
        path = tmp_path / "model.msnn"
        save_checkpoint(
            primed_tiny_model, path,
            extra_arrays={"norm.mean": np.array([1.0, 2.0])},
            extra_config={"preproc.band": "4.0,40.0"},
        )
        ckpt = load_checkpoint(path)
        assert isinstance(ckpt, Checkpoint)
        np.testing.assert_array_equal(ckpt.extra_arrays["norm.mean"], [1.0, 2.0])
        assert ckpt.extra_config["preproc.band"] == "4.0,40.0"

    def test_corrupted_byte_fails_checksum(self, tmp_path, primed_tiny_model):
        path = tmp_path / "model.msnn"
        primed_tiny_model.save(path)
        blob = bytearray(path.read_bytes())
        blob[len(blob) // 2] ^= 0xFF
        path.write_bytes(bytes(blob))
        with pytest.raises(ChecksumError):
            MsnnModel.load(path)

    def test_bad_magic(self, tmp_path):
        import zlib
        import struct

        path = tmp_path / "bad.msnn"
        body = b"NOPE" + struct.pack("<H", 1)
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(BadMagicError):
            MsnnModel.load(path)

    def test_version_mismatch(self, tmp_path):
        import zlib
        import struct

        path = tmp_path / "v9.msnn"
        body = b"MSNN" + struct.pack("<H", 9)
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(UnsupportedVersionError):
            MsnnModel.load(path)

    def test_truncated_file(self, tmp_path, primed_tiny_model):
        path = tmp_path / "model.msnn"
        primed_tiny_model.save(path)
        path.write_bytes(path.read_bytes()[:2])
        with pytest.raises(FormatError):
            MsnnModel.load(path)

    def test_config_only_file_reports_missing_parameters(self, tmp_path, tiny_config):
        import zlib
        import struct

        text = "".join(f"{k}={v}\n" for k, v in sorted(tiny_config.to_dict().items()))
        blob = text.encode()
        body = b"MSNN" + struct.pack("<H", 1) + struct.pack("<I", len(blob)) + blob
        path = tmp_path / "config_only.msnn"
        path.write_bytes(body + struct.pack("<I", zlib.crc32(body)))
        with pytest.raises(FormatError, match="missing parameter section"):
            MsnnModel.load(path)

    def test_missing_array_rejected(self, tmp_path, primed_tiny_model):
        path = tmp_path / "model.msnn"
        # drop one parameter array by saving a hand-built container
        from msnn.binio import ByteWriter

        arrays = {**primed_tiny_model.parameters(), **primed_tiny_model.state_arrays()}
        arrays.pop("classifier.bias")
        w = ByteWriter()
        w.raw(b"MSNN")
        w.u16(1)
        text = "".join(
            f"{k}={v}\n" for k, v in sorted(primed_tiny_model.config.to_dict().items())
        )
        w.block(text.encode())
        w.u32(len(arrays))
        for name, arr in arrays.items():
            arr = np.asarray(arr, dtype=np.float64)
            w.string(name)
            w.u8(arr.ndim)
            for dim in arr.shape:
                w.u32(dim)
            w.f64_array(arr)
        path.write_bytes(w.finish_with_crc())
        with pytest.raises(FormatError, match="missing arrays"):
            MsnnModel.load(path)
