"""Anatomy of one cloud adaptation step.

A step takes one uploaded batch: it enters the replay buffer, the
foundation model minimizes its weighted prediction entropy, and the edge
model distills from the refreshed teacher on uploaded + replayed
samples. Only normalization scale/shift vectors move; the versioned
result is what goes back over the wire.
"""

import numpy as np

from cetta import nn, wire
from cetta.adapt import AdaptConfig, AdaptationEngine
from cetta.edge import affine_to_wire
from cetta.samples import Sample

rng = np.random.default_rng(0)
f_spec = nn.ModelSpec(16, (32, 32), 6)
e_spec = nn.ModelSpec(16, (12, 12), 6)
engine = AdaptationEngine(
    f_spec, nn.init_params(f_spec, rng),
    e_spec, nn.init_params(e_spec, rng),
    AdaptConfig(upload_batch=8, replay_draw=24, learning_rate=0.01),
    seed=0,
)

print(f"weighting reference entropy: {engine.e_max_ref:.4f} (0.4 ln C)")

for step in range(4):
    feats = rng.normal(size=(8, 16)).astype(np.float32)
    batch = [Sample(sample_id=step * 8 + i, features=feats[i]) for i in range(8)]
    result = engine.step(batch)
    payload = wire.encode(affine_to_wire(result.affine_set))
    print(f"step {step + 1}: version={result.version} "
          f"foundation_loss={result.foundation_loss:.4f} "
          f"edge_loss={result.edge_loss:.4f} "
          f"distill_batch={result.batch_size} "
          f"buffer={len(engine.buffer)} "
          f"update_payload={len(payload)}B")

print("\nthe update carries only scale/shift vectors:")
for layer in result.affine_set.layers:
    print(f"  layer {layer.layer_idx}: gamma[:4]={np.round(layer.gamma[:4], 4)} "
          f"beta[:4]={np.round(layer.beta[:4], 4)}")
edge_ckpt = nn.checkpoint_size(e_spec)
print(f"\npayload {len(payload)} B vs full edge checkpoint {edge_ckpt} B "
      f"-> {100 * len(payload) / edge_ckpt:.2f}%")
