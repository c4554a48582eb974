"""
How invariant is z_K across domains?
====================================

After the learning stage, per-class means of the causal latent z_K should sit
together across domains while the non-causal latent z_V spreads them apart.
"""
from fedunlearn.datagen import LabeledDataset
from fedunlearn.experiment import ExperimentConfig, latent_invariance, simulate

for rhos in [(0.9, 0.8, -0.9), (0.9, 0.8, 0.7, -0.9)]:
    cfg = ExperimentConfig(rhos=rhos, r_unlearn=0)
    res = simulate(cfg)
    data = LabeledDataset.concat([c.validation for c in res.world.clients])
    rep = latent_invariance(res.model, data)
    print("rhos %-22s z_K ratio %.3f   z_V ratio %.3f" % (rhos, rep.k_ratio, rep.v_ratio))
