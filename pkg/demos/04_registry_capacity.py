"""
How many users can a fingerprint length serve?
==============================================

Birthday bound for issuing random fingerprints, and the identification
rates of nearest-neighbour matching when decoded bits are noisy.
"""

from wmfp.registry import collision_report

for n, d in ((1_000, 32), (1_024, 32), (100_000, 32), (2 ** 32, 32), (100_000, 64)):
    r = collision_report(n, d, 0.0, trials=0)
    print(f"N={n:>12,d}  d={d}  expected colliding pairs {r['expected_colliding_pairs']:.3g}  "
          f"P(any collision) {r['collision_probability']:.3g}")

# noisy bits: 10% flips against 1,024 registered users
for d in (16, 32, 64):
    r = collision_report(1024, d, 0.1, trials=20_000, seed=0)
    a, s = r["analytic"], r["simulated"]
    print(f"d={d}: correct {a['correct']:.4f} (sim {s['correct']:.4f})  "
          f"false no-match {a['no_match']:.2e}  stranger rejected {a['unregistered_no_match']:.4f}")
