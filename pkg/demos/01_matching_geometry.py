"""
Matched unlearning direction on a toy problem
=============================================

Two retain clients and one forget client send pseudo-gradients in 3-d.  The
server mixes them with simplex weights and steers the FedAvg direction onto a
sphere of radius kappa * |g_FL| around it.
"""
import numpy as np

from fedunlearn.server import MatchConfig, compute_foul_gradient, optimize_gamma

rng = np.random.default_rng(0)
retain = np.array([[1.0, 0.2, 0.0], [0.8, -0.1, 0.3]])
forget = np.array([[0.9, 0.0, -0.4]])
g_fl = np.vstack([retain, forget]).mean(axis=0)

def cos(a, b):
    return a @ b / np.linalg.norm(a) / np.linalg.norm(b)

# FedAvg points straight into the forget client's update
print("cos(g_FL, forget)   %+.3f" % cos(g_fl, forget[0]))

for kappa in (0.25, 0.5, 1.0, 2.0):
    cfg = MatchConfig(kappa=kappa)
    sol = optimize_gamma(retain, forget, g_fl, cfg)
    compute_foul_gradient(g_fl, sol.g_retain, sol.g_forget, cfg, solution=sol)
    g = sol.g_foul
    print("kappa %.2f  gamma_R %s  |g-g_FL|/|g_FL| %.3f  cos(forget) %+.3f  cos(retain avg) %+.3f"
          % (kappa, np.round(sol.gamma.retain, 3), np.linalg.norm(g - g_fl) / np.linalg.norm(g_fl),
             cos(g, forget[0]), cos(g, retain.mean(axis=0))))

# the optimum of the linear objective on the sphere is the point the solver returns
cfg = MatchConfig(kappa=0.5)
sol = optimize_gamma(retain, forget, g_fl, cfg)
compute_foul_gradient(g_fl, sol.g_retain, sol.g_forget, cfg, solution=sol)
d = sol.g_retain - sol.g_forget
u = rng.normal(size=(5000, 3))
pts = g_fl + 0.5 * np.linalg.norm(g_fl) * u / np.linalg.norm(u, axis=1, keepdims=True)
print("best random point %.6f   matched point %.6f" % ((pts @ d).max(), sol.g_foul @ d))
