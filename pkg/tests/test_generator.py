import numpy as np
import pytest

from wmfp import autodiff as ad
from wmfp.autodiff import ShapeError, Tensor
from wmfp.codec import affine_layers, identity_style, mapping_network, sample_fingerprint, style_for
from wmfp.generator import (decode, decoder_network, encode, encoder_network, set_variant, stamp,
                            stamp_fingerprint)


@pytest.fixture(scope="module")
def nets():
    rng = np.random.default_rng(11)
    enc, dec = encoder_network(rng), decoder_network(rng)
    mapping = mapping_network(8, rng)
    aff = affine_layers(dec, 32, rng=rng)
    return enc, dec, mapping, aff


def test_encode_decode_shapes(nets, rng):
    enc, dec, _, _ = nets
    x = rng.random((2, 3, 32, 32)).astype(np.float32)
    z = encode(enc, x)
    assert z.shape == (2, 8, 8, 8)
    assert decode(dec, None, z).shape == (2, 3, 32, 32)
    assert encode(enc, x[0]).shape == (8, 8, 8)


def test_encode_rejects_bad_size(nets):
    with pytest.raises(ShapeError):
        encode(nets[0], np.zeros((3, 30, 32), np.float32))


def test_decode_rejects_wrong_channels(nets):
    with pytest.raises(ShapeError):
        decode(nets[1], None, np.zeros((1, 4, 8, 8), np.float32))


def test_output_in_unit_range(nets, rng):
    out = decode(nets[1], None, rng.standard_normal((2, 8, 8, 8)).astype(np.float32) * 5).data
    assert out.min() >= 0 and out.max() <= 1


def test_identity_modulation_is_fingerprint_independent(nets, rng):
    _, dec, _, _ = nets
    mapping = mapping_network(16, rng)
    aff = affine_layers(dec, 64)  # zero weights, unit bias
    z = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    plain = decode(dec, None, z).data
    worst = 0.0
    for s in range(50):
        out = decode(dec, style_for(mapping, aff, sample_fingerprint(16, s)), z).data
        worst = max(worst, float(np.abs(out - plain).max()))
    assert worst < 1e-6


def test_stamp_matches_modulated_forward(nets, rng):
    _, dec, mapping, aff = nets
    z = rng.standard_normal((100, 8, 8, 8)).astype(np.float32)
    for s in range(3):
        phi = sample_fingerprint(8, s)
        stamped = stamp_fingerprint(dec, mapping, aff, phi)
        live = decode(dec, style_for(mapping, aff, phi), z).data
        assert np.max(np.abs(stamped(z).data - live)) < 1e-6
    assert stamped.fingerprint_hash == phi.digest()
    assert stamped.network.meta["fingerprint_hash"] == phi.digest()


def test_stamp_does_not_touch_source(nets):
    _, dec, mapping, aff = nets
    before = {k: v.data.copy() for k, v in dec.params.items()}
    stamp_fingerprint(dec, mapping, aff, sample_fingerprint(8, 5))
    assert all(np.array_equal(before[k], v.data) for k, v in dec.params.items())


def test_stamp_rejects_batched_style(nets):
    _, dec, _, _ = nets
    style = {k: Tensor(np.ones((2,) + v.shape, np.float32)) for k, v in identity_style(dec).items()}
    with pytest.raises(ShapeError):
        stamp(dec, style)


def test_per_sample_style_equals_loop(nets, rng):
    _, dec, mapping, aff = nets
    z = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
    phis = [sample_fingerprint(8, s) for s in (1, 2)]
    bits = np.stack([p.as_float() for p in phis])
    batched = decode(dec, style_for(mapping, aff, bits), z).data
    for i, p in enumerate(phis):
        single = decode(dec, style_for(mapping, aff, p), z[i:i + 1]).data[0]
        assert np.max(np.abs(batched[i] - single)) < 1e-5


def test_conv_only_variant_skips_attention(nets):
    dec = set_variant(nets[1], "conv-only")
    names = {s.name for s in dec.modulatable_layers()}
    assert "attn" not in names and "dec_out" in names
    assert "attn" in {s.name for s in nets[1].modulatable_layers()}
    with pytest.raises(ValueError):
        decoder_network(None, variant="everything")
