"""
Learning then unlearning a domain
=================================

A shortened default run: the federation learns four synthetic domains, then
the server removes domain 0 by updating only the non-causal block theta_V.
Both retraining baselines are run on the same world for comparison.
"""
import time

import numpy as np

from fedunlearn.experiment import ExperimentConfig, build_world, forget_series, simulate, summarize
from fedunlearn.metrics import time_to_forget

cfg = ExperimentConfig(r_learn=40, r_unlearn=20)
world = build_world(cfg)

t0 = time.perf_counter()
res = simulate(cfg, world=world)
print("foul run took %.0fs" % (time.perf_counter() - t0))

print("round stage     FA     RA     TA    MIA  cos_F  cos_R")
for r in res.records[::5] + res.records[-1:]:
    print("%5d %-7s %.3f  %.3f  %.3f  %.3f  %+.2f  %+.2f"
          % (r.round, r.stage, r.fa, r.ra, r.ta, r.mia, r.cos_forget, r.cos_retain))

# only theta_V moved during unlearning
before, after = res.learned_model.to_vector(), res.model.to_vector()
for seg in before.layout:
    print("segment %s changed: %s" % (seg.name, not np.array_equal(before.segment(seg.name), after.segment(seg.name))))

for scenario in ("retrain_noreset", "retrain_reset"):
    other = simulate(cfg.replace(scenario=scenario), world=world, learned=res.learned_model)
    print("%-16s final FA %.3f  T2F %.4f" % (scenario, other.records[-1].fa,
                                             time_to_forget(forget_series(other.records)).t2f))
print("%-16s final FA %.3f  T2F %.4f" % ("foul", res.records[-1].fa,
                                         time_to_forget(forget_series(res.records)).t2f))

s = summarize(res.records)
print("payload bytes: learn round %d, unlearn round %d" % (res.records[0].payload_bytes, res.records[-1].payload_bytes))
print("total payload %d bytes, total flops %.3g" % (s["payload_bytes_total"], s["flops_total"]))
