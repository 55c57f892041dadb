"""
Weight modulation in a few lines
================================

A fingerprint is a bit string.  The mapping network turns it into a vector,
the affine layers turn that into one scale per output channel of every
modulated decoder layer, and the layer's weights are multiplied by those
scales.  This script walks through the pieces on an untrained decoder.
"""

import numpy as np

from wmfp.autodiff import Tensor
from wmfp.autodiff.gradcheck import op_suite
from wmfp.codec import affine_layers, mapping_network, modulate_weights, sample_fingerprint, style_for
from wmfp.generator import decode, decoder_network, stamp_fingerprint

rng = np.random.default_rng(0)

# a fingerprint: 16 bits, deterministic in its seed
phi = sample_fingerprint(16, seed=42)
print("fingerprint", phi.hex(), "bits", phi.bits)

# the modulation rule itself: each output channel j is scaled by u[j]
w = Tensor(np.array([[2.0], [3.0]], np.float32))
u = Tensor(np.array([0.5, 2.0], np.float32))
print("modulated weight", modulate_weights(w, u).data.ravel())  # [1. 6.]

# a decoder with conv layers and one channel-attention layer
dec = decoder_network(rng)
print("modulated layers", [s.name for s in dec.modulatable_layers()])

# freshly initialised affine layers (zero weights, unit bias) give the identity style,
# so every fingerprint produces exactly the same image
mapping = mapping_network(16, rng)
aff = affine_layers(dec, 4 * 16)
z = rng.standard_normal((2, 8, 8, 8)).astype(np.float32)
a = decode(dec, style_for(mapping, aff, phi), z).data
b = decode(dec, style_for(mapping, aff, sample_fingerprint(16, 7)), z).data
print("identity at init: max diff", np.abs(a - b).max())

# with random affine weights the fingerprint changes the output
aff = affine_layers(dec, 64, rng=rng)
a = decode(dec, style_for(mapping, aff, phi), z).data
b = decode(dec, style_for(mapping, aff, sample_fingerprint(16, 7)), z).data
print("random affine: max diff", np.abs(a - b).max())

# stamping folds one user's scales into the weights; the result takes latents only
stamped = stamp_fingerprint(dec, mapping, aff, phi)
print("stamped vs live:", np.abs(stamped(z).data - a).max(), "hash", stamped.fingerprint_hash[:16])

# every differentiable op is checked against float64 central differences
rows = op_suite(seed=0)
print(f"gradient checks: {len(rows)} cases, worst relative error {max(r['max_rel_error'] for r in rows):.1e}")
