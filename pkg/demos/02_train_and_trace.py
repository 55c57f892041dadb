"""
Train, issue models to users, trace an image back
=================================================

Pretrains the small autoencoder, fine-tunes it for 16-bit fingerprints with
the desk preset, issues stamped decoders to two users and identifies which
user produced a given image.  Full size takes about ten minutes on one core;
pass --quick for a seconds-long smoke run (its accuracy is meaningless).
"""

import sys

import numpy as np

from wmfp import autodiff as ad
from wmfp.fpdecoder import decode_bits
from wmfp.generator import encode
from wmfp.registry import Registry
from wmfp.training import desk_config, heldout_data, pretrain, train

quick = "--quick" in sys.argv
cfg = desk_config()
if quick:
    cfg = cfg.replace(iterations=30, pretrain_iterations=30, train_images=64, log_every=10, eval_fingerprints=8)

# 1. the base model: an autoencoder fitted to synthetic scenes
enc, dec = pretrain(cfg, progress=lambda it, loss: print(f"pretrain {it:5d}  loss {loss:.4f}"))

# 2. joint fine-tuning of the mapping net, affine layers, decoder and fingerprint decoder
pipe, report = train(cfg, base=(enc, dec),
                     progress=lambda r: print(f"train {r['iteration']:5d}  bits {r['bit_accuracy']:.3f}  "
                                              f"psnr {r['psnr']:.1f} dB"))

# 3. the distributor issues fingerprints and stamped decoders
registry = Registry(cfg.d_phi)
stamped = {}
for user in ("alice", "bob"):
    rec = registry.register(user, seed=cfg.seed, issued_at=0)
    stamped[user] = pipe.stamp(rec.fingerprint)
    print(user, "gets fingerprint", rec.fingerprint.hex())

# 4. bob generates an image from an unseen scene latent
x = heldout_data(cfg, 1).images
image = stamped["bob"](encode(pipe.encoder, ad.Tensor(x))).data[0]

# 5. the distributor decodes the bits and matches them against the registry
print("decoded", decode_bits(pipe.fpdecoder, image).hex())
result = registry.identify(image, pipe.fpdecoder)
print("identified:", result.status, result.user_id, "distance", result.distance, "margin", result.margin)
