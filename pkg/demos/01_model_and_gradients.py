"""Tour of the dense network engine.

Builds a small normalized MLP, runs it in both statistics modes, and
verifies one analytic gradient against central finite differences.
"""

import numpy as np

from cetta import nn

rng = np.random.default_rng(0)
spec = nn.ModelSpec(input_dim=8, hidden_dims=(16, 16), num_classes=5)
params = nn.init_params(spec, rng)
batch = rng.normal(size=(32, 8)).astype(np.float32)

print("== two normalization modes")
logits_b, _ = nn.forward(params.copy(), spec, batch, nn.NormMode.BATCH)
logits_r, _ = nn.forward(params, spec, batch, nn.NormMode.RUNNING)
probs, entropy = nn.softmax_entropy(logits_r)
print(f"batch-stats logits[0,:3]   = {logits_b[0, :3]}")
print(f"running-stats logits[0,:3] = {logits_r[0, :3]}")
print(f"prediction entropy: min {entropy.min():.3f}, max {entropy.max():.3f} "
      f"(uniform would be ln 5 = {np.log(5):.3f})")

print("\n== gradient of the mean entropy, affine parameters only")
params64 = params.astype(np.float64)
logits, cache = nn.forward(params64, spec, batch, nn.NormMode.BATCH)
probs, ent = nn.softmax_entropy(logits)
d_logits = -(probs * (np.log(np.clip(probs, 1e-300, None)) + ent[:, None])) / len(batch)
grads = nn.backward(params64, spec, cache, d_logits, nn.ParamMask.AFFINE_ONLY)

h = 1e-3
gamma = params64.blocks[0].gamma
orig = gamma[0]
gamma[0] = orig + h
up, _ = nn.forward(params64, spec, batch, nn.NormMode.BATCH)
gamma[0] = orig - h
down, _ = nn.forward(params64, spec, batch, nn.NormMode.BATCH)
gamma[0] = orig
fd = (nn.softmax_entropy(up)[1].mean() - nn.softmax_entropy(down)[1].mean()) / (2 * h)
print(f"analytic d(mean entropy)/d(gamma[0,0]) = {grads['block0.gamma'][0]:+.8f}")
print(f"central difference (h=1e-3)            = {fd:+.8f}")

print("\n== the transmitted subset")
aset = nn.extract_affine(params, version=1)
n_affine = sum(l.gamma.size + l.beta.size for l in aset.layers)
print(f"affine entries: {n_affine} of {nn.param_count(spec)} total "
      f"({100 * n_affine / nn.param_count(spec):.2f}%)")
