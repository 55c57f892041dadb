import struct

import numpy as np
import pytest

from wmfp.codec import affine_layers, mapping_network, sample_fingerprint
from wmfp.generator import decoder_network, stamp_fingerprint
from wmfp.modelfile import (MAGIC, ModelFormatError, file_hash, from_bytes, load, load_stamped, save,
                            save_stamped, to_bytes)


@pytest.fixture
def decoder():
    return decoder_network(np.random.default_rng(0))


def test_round_trip_is_exact(decoder, tmp_path):
    digest = save(decoder, tmp_path / "d.wmfp")
    back = load(tmp_path / "d.wmfp")
    assert digest == file_hash(tmp_path / "d.wmfp")
    assert back.layers == decoder.layers and back.kind == decoder.kind
    for k, v in decoder.params.items():
        assert back.params[k].data.tobytes() == v.data.tobytes()
    assert to_bytes(back) == to_bytes(decoder)


def test_header_layout(decoder):
    raw = to_bytes(decoder)
    magic, version, n = struct.unpack_from("<4sHI", raw)
    assert magic == MAGIC and version == 1
    assert raw[10:10 + n].startswith(b"{")


def test_stamped_round_trip(decoder, tmp_path):
    rng = np.random.default_rng(1)
    phi = sample_fingerprint(8, 2)
    st = stamp_fingerprint(decoder, mapping_network(8, rng), affine_layers(decoder, 32, rng=rng), phi)
    save_stamped(st, tmp_path / "s.wmfp")
    back = load_stamped(tmp_path / "s.wmfp")
    assert back.fingerprint_hash == phi.digest()
    z = rng.standard_normal((1, 8, 8, 8)).astype(np.float32)
    assert np.array_equal(back(z).data, st(z).data)
    save(decoder, tmp_path / "plain.wmfp")
    with pytest.raises(ModelFormatError, match="not a stamped model"):
        load_stamped(tmp_path / "plain.wmfp")


@pytest.mark.parametrize("mutate, message, offset", [
    (lambda r: b"XXXX" + r[4:], "bad magic", 0),
    (lambda r: r[:4] + struct.pack("<H", 7) + r[6:], "unsupported format version 7", 4),
    (lambda r: r[:8], "shorter than header", 8),
    (lambda r: r[:-3], "truncated", None),
    (lambda r: r + b"\0\0\0\0", "trailing", None),
])
def test_corruption_is_reported(decoder, mutate, message, offset):
    with pytest.raises(ModelFormatError, match=message) as info:
        from_bytes(mutate(to_bytes(decoder)))
    if offset is not None:
        assert info.value.offset == offset
