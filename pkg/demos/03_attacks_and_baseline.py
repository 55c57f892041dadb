"""
Post-processing attacks and the wavelet baseline
================================================

The eight attacks used for robust training, applied to a synthetic scene,
and a classical watermark (Haar DWT + quantization index modulation) that
survives clean copies but not JPEG.
"""

import numpy as np

from wmfp.attacks import KINDS, STRENGTH_GRID, AttackSpec, apply, sample_spec, spec_at
from wmfp.codec import sample_fingerprint
from wmfp.data import SyntheticSceneSpec, generate, generate_batch
from wmfp.evaluation import attribution_accuracy, dwt_embed, dwt_extract, psnr

x = generate(SyntheticSceneSpec(seed=0), 5)

# one random draw per kind, as robust training would make them
for kind in KINDS:
    spec = sample_spec(kind, seed=3)
    y = apply(spec, x).data
    print(f"{spec.to_text():70s} psnr {psnr(y, x):6.2f} dB")

# stronger blur, noise and jpeg cost more PSNR
imgs = generate_batch(SyntheticSceneSpec(seed=1), range(16))
for kind in ("blur", "noise", "jpeg"):
    vals = [psnr(apply(spec_at(kind, s, 0), imgs).data, imgs) for s in STRENGTH_GRID[kind]]
    print(kind, " ".join(f"{v:.1f}" for v in vals))

# the baseline: exact on clean copies, degraded by JPEG quality 50
clean, jpeg = [], []
for i, img in enumerate(imgs):
    phi = sample_fingerprint(32, i)
    marked = dwt_embed(img, phi, seed=i)
    clean.append(attribution_accuracy(phi, dwt_extract(marked, 32, seed=i)))
    attacked = apply(AttackSpec("jpeg", {"quality": 50}), marked).data
    jpeg.append(attribution_accuracy(phi, dwt_extract(attacked, 32, seed=i)))
print(f"dwt clean {np.mean(clean):.3f}  after jpeg 50 {np.mean(jpeg):.3f}")
