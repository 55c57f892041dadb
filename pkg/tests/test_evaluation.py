import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from wmfp.attacks import AttackSpec, apply
from wmfp.codec import Fingerprint, sample_fingerprint
from wmfp.data import SyntheticSceneSpec, generate_batch
from wmfp.evaluation import (CapacityError, attribution_accuracy, chance_band, dwt_embed, dwt_extract, psnr,
                             quality_metrics)
from wmfp.evaluation.dwt import haar2, ihaar2
from wmfp.evaluation.experiments import (CSV_HEADER, ConfigMismatch, EvalReport, attack_specs, check_same_config,
                                         inversions, mid_strength)
from wmfp.training import TrainConfig


@pytest.fixture(scope="module")
def scenes():
    return generate_batch(SyntheticSceneSpec(seed=4), range(20))


def test_accuracy_examples():
    phi = sample_fingerprint(32, 1)
    assert attribution_accuracy(phi, phi) == 1.0
    assert attribution_accuracy(phi, Fingerprint(1 - phi.bits)) == 0.0
    flipped = phi.bits.copy()
    flipped[5] ^= 1
    assert attribution_accuracy(phi, Fingerprint(flipped)) == 31 / 32
    with pytest.raises(ValueError):
        attribution_accuracy(phi, sample_fingerprint(16, 1))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 64), st.integers(0, 2**31))
def test_accuracy_symmetric(d, seed):
    a, b = sample_fingerprint(d, seed), sample_fingerprint(d, seed + 1)
    assert attribution_accuracy(a, b) == attribution_accuracy(b, a)


def test_quality_examples(scenes):
    same = quality_metrics(scenes, scenes)
    assert same == {"psnr": "inf", "proxy": 0.0}
    x = np.full((4, 3, 8, 8), 0.4, np.float32)
    q = quality_metrics(x, x + 0.1)
    assert abs(q["psnr"] - 20.0) < 1e-5
    with pytest.raises(ValueError):
        quality_metrics(x[:0], x[:0])
    with pytest.raises(ValueError):
        quality_metrics(x, x[:2])


def test_psnr_matches_scalar_loop(rng):
    a, b = rng.random((2, 3, 4, 4)), rng.random((2, 3, 4, 4))
    total = sum((float(u) - float(v)) ** 2 for u, v in zip(a.ravel(), b.ravel()))
    assert abs(psnr(a, b) - 10 * np.log10(1 / (total / a.size))) < 1e-6


def test_chance_band():
    lo, hi = chance_band(200, 16)
    assert abs((hi - lo) / 2 - 4 * np.sqrt(0.25 / 3200)) < 1e-12


def test_haar_is_orthonormal(rng):
    y = rng.random((8, 6))
    bands = haar2(y)
    assert np.allclose(ihaar2(*bands), y)
    assert np.isclose(sum((b ** 2).sum() for b in bands), (y ** 2).sum())


def test_dwt_round_trip_is_exact(scenes):
    for i, x in enumerate(scenes):
        phi = sample_fingerprint(32, i)
        marked = dwt_embed(x, phi, seed=i)
        assert marked.min() >= 0 and marked.max() <= 1
        assert dwt_extract(marked, 32, seed=i) == phi
        assert psnr(marked, x) > 35


def test_dwt_unmarked_is_chance(scenes):
    accs = [attribution_accuracy(sample_fingerprint(32, 100 + i), dwt_extract(x, 32, seed=i))
            for i, x in enumerate(scenes)]
    lo, hi = chance_band(len(scenes), 32)
    assert lo <= np.mean(accs) <= hi


def test_dwt_degrades_under_jpeg(scenes):
    clean, attacked = [], []
    for i, x in enumerate(scenes):
        phi = sample_fingerprint(32, i)
        marked = dwt_embed(x, phi, seed=i)
        clean.append(attribution_accuracy(phi, dwt_extract(marked, 32, seed=i)))
        j = apply(AttackSpec("jpeg", {"quality": 50}), marked).data
        attacked.append(attribution_accuracy(phi, dwt_extract(j, 32, seed=i)))
    assert np.mean(attacked) < np.mean(clean) == 1.0


def test_dwt_capacity_and_shape_errors():
    with pytest.raises(CapacityError):
        dwt_embed(np.zeros((3, 4, 4), np.float32), sample_fingerprint(9, 0))
    with pytest.raises(ValueError, match="even"):
        dwt_embed(np.zeros((3, 5, 4), np.float32), sample_fingerprint(2, 0))


def test_report_csv_header_and_cells(tmp_path):
    rep = EvalReport("demo", seeds={"eval": 1})
    rep.add(model="clean", attack="none", strength="", spec="", d_phi=16, accuracy=0.75, psnr=float("inf"),
            proxy=0.0, count=10)
    lines = rep.to_csv().splitlines()
    assert lines[0] == ",".join(CSV_HEADER)
    assert lines[1].split(",")[7] == "inf"
    paths = rep.write(tmp_path)
    assert open(paths["ndjson"]).read().count("\n") == 2
    with pytest.raises(ValueError):
        rep.add(accuracy=1.2, count=1)
    with pytest.raises(ValueError):
        rep.add(accuracy=0.5, count=0)


def test_attack_specs_deterministic():
    assert attack_specs("rotation", 12.0, 5, 3) == attack_specs("rotation", 12.0, 5, 3)
    assert all(abs(s.params["degrees"]) == 12.0 for s in attack_specs("rotation", 12.0, 20, 3))
    assert mid_strength("jpeg") == 70 and mid_strength("blur") == 5


def test_inversions():
    assert inversions([0.9, 0.8, 0.8, 0.7]) == 0
    assert inversions([0.9, 0.91, 0.8, 0.85]) == 2


def test_config_check():
    a = TrainConfig(seed=1)
    check_same_config(a, a.replace(seed=2))
    with pytest.raises(ConfigMismatch, match="seed"):
        check_same_config(a, a)
    with pytest.raises(ConfigMismatch, match="d_phi"):
        check_same_config(a, a.replace(seed=2, d_phi=32))
