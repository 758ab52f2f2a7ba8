import numpy as np
import pytest

from openset.models import (
    ArchitectureError,
    Network,
    build_triplet,
    expected_parameter_count,
    load_checkpoint,
    parse_architecture,
    save_checkpoint,
)
from openset.tensor import ShapeError, Tensor

ENCODER_64 = "Conv(32)-ReLU-Conv(64)-ReLU-Conv(128)-FC(512)"
DECODER_64 = "FC(8192)-ConvTran(64)-ReLU-ConvTran(32)-ReLU-ConvTran(1)-Tanh"
CLASSIFIER_15 = "FC(512)-FC(15)"

ENCODER_32 = "Conv(8)-ReLU-Conv(16)-ReLU-Conv(32)-FC(64)"
DECODER_32 = "FC(512)-ConvTran(16)-ReLU-ConvTran(8)-ReLU-ConvTran(1)-Tanh"


class TestParse:
    def test_classifier_string(self):
        spec = parse_architecture(CLASSIFIER_15, 512)
        assert [l.kind for l in spec.layers] == ["FC", "FC"]
        assert [l.width for l in spec.layers] == [512, 15]

    def test_encoder_flattened_size_is_8192(self):
        spec = parse_architecture(ENCODER_64, (1, 64, 64))
        # shape before the final FC: 128 channels at 8x8
        assert spec.shapes[-2] == (128, 8, 8)
        assert spec.output_shape == 512

    def test_width_on_activation_rejected(self):
        with pytest.raises(ArchitectureError) as e:
            parse_architecture("ReLU(5)", (1, 8, 8))
        assert "layer 0" in str(e.value)

    def test_unknown_token(self):
        with pytest.raises(ArchitectureError):
            parse_architecture("Conv(4)-Pool", (1, 8, 8))

    def test_missing_width(self):
        with pytest.raises(ArchitectureError):
            parse_architecture("Conv", (1, 8, 8))

    def test_conv_on_flat_input_rejected(self):
        with pytest.raises(ArchitectureError):
            parse_architecture("Conv(4)", 16)

    def test_decoder_reshape_resolution(self):
        spec = parse_architecture(DECODER_64, 512, output_image=(1, 64, 64))
        assert spec.reshapes == {1: (128, 8, 8)}
        assert spec.output_shape == (1, 64, 64)

    def test_decoder_without_output_image_rejected(self):
        with pytest.raises(ArchitectureError):
            parse_architecture(DECODER_64, 512)

    def test_32x32_variant_chain(self):
        spec = parse_architecture(ENCODER_32, (1, 32, 32))
        assert spec.shapes[-2] == (32, 4, 4)
        dec = parse_architecture(DECODER_32, 64, output_image=(1, 32, 32))
        assert dec.reshapes[1] == (32, 4, 4)


class TestInit:
    def test_same_seed_identical(self):
        spec = parse_architecture("FC(8)-FC(3)", 4)
        a, b = Network(spec, seed=7), Network(spec, seed=7)
        for pa, pb in zip(a.parameters(), b.parameters()):
            assert np.array_equal(pa.data, pb.data)

    def test_different_seed_differs(self):
        spec = parse_architecture("FC(8)-FC(3)", 4)
        a, b = Network(spec, seed=7), Network(spec, seed=8)
        assert any(
            not np.array_equal(pa.data, pb.data)
            for pa, pb in zip(a.parameters(), b.parameters())
        )

    def test_fan_based_bound(self):
        spec = parse_architecture("FC(512)", 8192)
        net = Network(spec, seed=0)
        bound = np.sqrt(6.0 / 8704.0)
        w = net.layers[0].weight.data
        assert np.abs(w).max() <= bound
        assert np.abs(w).max() > 0.9 * bound  # uniform support actually reached
        assert np.array_equal(net.layers[0].bias.data, np.zeros(512))

    def test_parameter_count_matches_spec(self):
        for text, shape, out in [
            (ENCODER_64, (1, 64, 64), None),
            (DECODER_64, 512, (1, 64, 64)),
            (CLASSIFIER_15, 512, None),
        ]:
            spec = parse_architecture(text, shape, out)
            assert Network(spec, seed=0).parameter_count() == expected_parameter_count(spec)


@pytest.fixture(scope="module")
def small_triplet():
    return build_triplet(ENCODER_32, DECODER_32, "FC(32)-FC(5)", (1, 32, 32), seed=3)


class TestTriplet:
    def test_encoder_batch_shape(self, small_triplet):
        z = small_triplet.forward_encoder(Tensor(np.zeros((4, 1, 32, 32))))
        assert z.shape == (4, 64)

    def test_single_sample(self, small_triplet):
        z = small_triplet.forward_encoder(Tensor(np.zeros((1, 1, 32, 32))))
        assert z.shape == (1, 64)
        assert np.isfinite(z.data).all()

    def test_decoder_shape_and_range(self, small_triplet):
        rng = np.random.default_rng(0)
        xr = small_triplet.forward_decoder(Tensor(rng.normal(size=(2, 64))))
        assert xr.shape == (2, 1, 32, 32)
        assert np.all(xr.data > -1.0) and np.all(xr.data < 1.0)

    def test_round_trip_preserves_shape(self, small_triplet):
        x = Tensor(np.random.default_rng(1).normal(size=(3, 1, 32, 32)))
        xr = small_triplet.forward_decoder(small_triplet.forward_encoder(x))
        assert xr.shape == x.shape

    def test_classifier_probabilities(self, small_triplet):
        z = Tensor(np.random.default_rng(2).normal(size=(4, 64)))
        probs = small_triplet.forward_classifier(z)
        assert probs.shape == (4, 5)
        assert np.abs(probs.data.sum(axis=1) - 1.0).max() < 1e-9
        assert np.all(probs.data >= 0.0) and np.all(probs.data <= 1.0)

    def test_argmax_tie_breaks_low(self, small_triplet):
        probs = np.array([[0.3, 0.3, 0.2, 0.1, 0.1]])
        assert small_triplet.predict_labels(probs)[0] == 0

    def test_input_shape_mismatch(self, small_triplet):
        with pytest.raises(ShapeError):
            small_triplet.forward_encoder(Tensor(np.zeros((1, 1, 16, 16))))

    def test_shared_encoder_perturbation_moves_both_heads(self, small_triplet):
        x = Tensor(np.random.default_rng(3).normal(size=(2, 1, 32, 32)) * 0.5)
        z = small_triplet.forward_encoder(x)
        before = (
            small_triplet.forward_classifier(z).data.copy(),
            small_triplet.forward_decoder(z).data.copy(),
        )
        p = small_triplet.encoder.parameters()[0]
        p.data = p.data + 0.05
        z2 = small_triplet.forward_encoder(x)
        after = (
            small_triplet.forward_classifier(z2).data,
            small_triplet.forward_decoder(z2).data,
        )
        p.data = p.data - 0.05
        assert not np.allclose(before[0], after[0])
        assert not np.allclose(before[1], after[1])


class TestCheckpoint:
    def test_round_trip_bit_exact(self, tmp_path, small_triplet):
        path = tmp_path / "model.ckpt"
        nets = {
            "encoder": small_triplet.encoder,
            "decoder": small_triplet.decoder,
            "classifier": small_triplet.classifier,
        }
        meta = {"input_shape": [1, 32, 32], "mode": "mlosr"}
        save_checkpoint(path, nets, meta)
        loaded, meta2 = load_checkpoint(path)
        assert meta2 == meta
        for name, net in nets.items():
            for p, q in zip(net.parameters(), loaded[name].parameters()):
                assert np.array_equal(p.data, q.data)
        # saving the loaded model reproduces the file byte for byte
        path2 = tmp_path / "model2.ckpt"
        save_checkpoint(path2, loaded, meta2)
        assert path.read_bytes() == path2.read_bytes()

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "junk.ckpt"
        p.write_bytes(b"NOPE" + b"\x00" * 16)
        with pytest.raises(ValueError) as e:
            load_checkpoint(p)
        assert "magic" in str(e.value)
