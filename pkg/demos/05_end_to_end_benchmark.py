"""The full pipeline on one corrupted stream, scenario by scenario.

Pretrains a foundation/edge pair on clean blobs, then streams corrupted
samples through an in-process edge+cloud loop under the standard
configurations: frozen baseline, upload-everything, static threshold,
and the full dynamic filter with replay distillation.

Takes a couple of minutes at the default desk scale.
"""

import numpy as np

from cetta import streams
from cetta.experiment import (DESK_ADAPT_OVERRIDES, default_specs,
                              make_scenario, run_loopback)
from cetta.pretrain import pretrain_pair

print("pretraining the model pair on clean data ...")
f_spec, e_spec = default_specs()
f_res, e_res = pretrain_pair(f_spec, e_spec, seed=0)
print(f"  foundation holdout {f_res.holdout_accuracy:.3f}, "
      f"edge holdout {e_res.holdout_accuracy:.3f}")

stream_spec = streams.StreamSpec(corruption="affine", severity=5,
                                 num_samples=20_000, seed=100)
stream = streams.gen_stream(stream_spec)
print(f"\nstream: {stream_spec.corruption} severity {stream_spec.severity}, "
      f"{stream_spec.num_samples} samples, seed {stream_spec.seed}")

print(f"\n{'scenario':<18} {'accuracy':>8} {'uploads':>8} {'steps':>6} "
      f"{'drops':>6} {'payload B':>10} {'ece':>6}")
for name in ("no-adapt", "upload-all", "static-threshold", "cema"):
    scenario = make_scenario(name, adapt_overrides=dict(DESK_ADAPT_OVERRIDES))
    art = run_loopback(f_spec, f_res.params, e_spec, e_res.params,
                       stream, scenario)
    r = art.report
    print(f"{name:<18} {r.accuracy:>8.3f} {r.uploads:>8d} {r.steps:>6d} "
          f"{r.queue_drops:>6d} {r.param_payload_bytes:>10d} {r.ece:>6.3f}")

print("\nreplay ablation on a noisy stream (severity 3):")
noisy = streams.gen_stream(streams.StreamSpec(
    corruption="gaussian", severity=3, num_samples=20_000, seed=100))
for cap in (10_000, 0):
    scenario = make_scenario("cema", buffer_capacity=cap,
                             adapt_overrides=dict(DESK_ADAPT_OVERRIDES))
    art = run_loopback(f_spec, f_res.params, e_spec, e_res.params, noisy, scenario)
    print(f"  buffer capacity {cap:>6}: accuracy {art.report.accuracy:.3f}")
