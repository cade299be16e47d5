"""How the upload filter behaves on a stream whose entropy decays.

The dynamic upper threshold tracks the cumulative average entropy, so as
adaptation sharpens predictions the filter tightens; the static lower
threshold drops samples that are already near-certain.
"""

import numpy as np

from cetta import filtration as filt

C = 10
config = filt.FiltrationConfig(num_classes=C)
state = filt.init_state(config)
print(f"initial thresholds: E_max = {state.e_max_t:.4f}, E_min = {state.e_min:.4f} "
      f"(ln C = {np.log(C):.4f})")

rng = np.random.default_rng(1)
print(f"\n{'batch':>5} {'mean entropy':>13} {'E_max^t':>9} {'uploaded':>9}")
for t in range(12):
    # prediction entropy decays over time as the model adapts
    level = 1.4 * (0.75 ** t) + 0.05
    entropies = np.clip(rng.gamma(shape=2.0, scale=level / 2, size=64), 0, np.log(C))
    uploaded = int(filt.score_batch(entropies, state).sum())
    filt.update_threshold(state, entropies)
    print(f"{t:>5} {entropies.mean():>13.4f} {state.e_max_t:>9.4f} {uploaded:>6}/64")

print("\nlate-stream confident samples now fail both tests:")
for e in (0.01, 0.10, 0.40, 1.20):
    print(f"  entropy {e:.2f}: uploaded={filt.score(e, state)}")

print("\nredundancy filter on near-duplicate probability vectors:")
r_state = filt.init_state(filt.FiltrationConfig(num_classes=3, redundancy_enabled=True))
for probs in ([0.8, 0.1, 0.1], [0.79, 0.11, 0.1], [0.1, 0.8, 0.1]):
    keep = filt.redundancy_pass(np.array(probs), r_state)
    print(f"  probs {probs}: keep={keep}")
