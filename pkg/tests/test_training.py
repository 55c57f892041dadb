import numpy as np
import pytest

from wmfp.autodiff import Tensor
from wmfp.generator import decode
from wmfp.training import ConfigError, TrainConfig, decode_all, pretrain, train


def tiny(**kw):
    base = dict(iterations=3, batch_size=4, train_images=32, pretrain_iterations=5, log_every=1,
                eval_fingerprints=8, learning_rate=1e-3, lambda2=30.0)
    base.update(kw)
    return TrainConfig(**base)


@pytest.fixture(scope="module")
def base():
    return pretrain(tiny())


def _snapshot(net):
    return {k: v.data.copy() for k, v in net.params.items()}


def test_single_iteration_report(base):
    _, report = train(tiny(iterations=1, log_every=100), base=base)
    assert len(report) == 1
    assert set(report.final) == {"iteration", "loss_phi", "loss_quality", "bit_accuracy", "psnr"}
    assert report.final["loss_phi"] >= 0 and report.final["loss_quality"] >= 0


def test_encoder_frozen_and_others_move(base):
    enc_before = _snapshot(base[0])
    pipe, _ = train(tiny(), base=base)
    assert all(np.array_equal(enc_before[k], v.data) for k, v in pipe.encoder.params.items())
    base_after = _snapshot(base[1])
    assert not all(np.array_equal(base_after[k], v.data) for k, v in pipe.decoder.params.items())
    assert any(np.any(v.data != 0) for k, v in pipe.affine.params.items() if k.endswith(".weight"))
    assert pipe.fpdecoder is not None


def test_training_is_bitwise_deterministic(base):
    a, ra = train(tiny(), base=base)
    b, rb = train(tiny(), base=base)
    assert ra.to_ndjson() == rb.to_ndjson()
    for part in ("decoder", "mapping", "affine", "fpdecoder"):
        na, nb = getattr(a, part), getattr(b, part)
        assert all(na.params[k].data.tobytes() == nb.params[k].data.tobytes() for k in na.params)


def test_decode_all_chunks_per_sample_style(base, rng):
    pipe, _ = train(tiny(iterations=1), base=base)
    z = rng.standard_normal((7, 8, 8, 8)).astype(np.float32)
    bits = rng.integers(0, 2, (7, pipe.d_phi)).astype(np.float32)
    whole = decode(pipe.decoder, pipe.style(bits), Tensor(z)).data
    np.testing.assert_allclose(decode_all(pipe.decoder, z, pipe.style(bits), chunk=3), whole, atol=1e-6)
    shared = pipe.style(bits[0])
    np.testing.assert_allclose(decode_all(pipe.decoder, z, shared, chunk=3),
                               decode(pipe.decoder, shared, Tensor(z)).data, atol=1e-6)


def test_seed_changes_result(base):
    _, ra = train(tiny(), base=base)
    _, rb = train(tiny(seed=5), base=base)
    assert ra.to_ndjson() != rb.to_ndjson()


def test_robust_training_runs(base):
    _, rep = train(tiny(robust="combination"), base=base)
    assert len(rep) == 3


def test_quality_only_stays_at_chance(base):
    cfg = tiny(lambda1=0.0, iterations=60, log_every=60, eval_fingerprints=64)
    _, rep = train(cfg, base=base)
    assert 0.45 <= rep.final["bit_accuracy"] <= 0.55


def test_lambda2_ramp():
    cfg = TrainConfig(lambda2=400.0, lambda2_start=20.0, iterations=5)
    assert cfg.lambda2_at(1) == pytest.approx(20.0)
    assert cfg.lambda2_at(5) == pytest.approx(400.0)
    assert cfg.lambda2_at(3) == pytest.approx(np.sqrt(20.0 * 400.0))
    assert TrainConfig(lambda2=3.0).lambda2_at(7) == 3.0


@pytest.mark.parametrize("field, value", [("d_phi", 0), ("lambda1", -1.0), ("iterations", 0), ("batch_size", 0),
                                          ("learning_rate", 0.0), ("variant", "some"), ("robust", "sharpen"),
                                          ("lambda2_start", -1.0)])
def test_invalid_config(field, value):
    with pytest.raises(ConfigError):
        TrainConfig(**{field: value})


def test_config_text_round_trip():
    cfg = TrainConfig(d_phi=32, robust="blur,jpeg", lambda2=50.0)
    assert TrainConfig.from_text(cfg.to_text()) == cfg
    with pytest.raises(ConfigError, match="unknown config key"):
        TrainConfig.from_text("colour=red\n")
    with pytest.raises(ConfigError, match="line 2"):
        TrainConfig.from_text("d_phi=8\nnonsense\n")
