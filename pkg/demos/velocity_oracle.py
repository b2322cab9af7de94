# Stage 1 on a problem with a known answer.
#
# Data N((2, 0), I) against a standard normal prior. For linear paths
# z_t = (1 - t) x + t z the optimal velocity E[z - x | z_t] is linear in z_t,
# so a trained network can be checked point by point.

import numpy as np

from reflowlab.dist2d import gaussian_velocity_oracle, single_gaussian_task
from reflowlab.nncore import AdamConfig, NetSpec
from reflowlab.rectflow import integrate_ode, train_rectified_flow

task = single_gaussian_task()
rng = np.random.default_rng(0)

# a few thousand steps already gets close; EMA weights smooth out the last bit of noise
res = train_rectified_flow(task, NetSpec((64, 64, 64)), 4000, 512, AdamConfig(ema_decay=0.999), rng)
flow = res.model
print("loss: first %.3f, last-100 mean %.3f" % (res.loss_trace[0], res.loss_trace[-100:].mean()))

mu = np.array([2.0, 0.0])
for t in (0.1, 0.5, 0.9):
    pts = (1 - t) * mu + rng.normal(size=(500, 2))
    err = np.abs(flow.velocity(pts, t) - gaussian_velocity_oracle(mu, 1.0, t, pts)).mean()
    print(f"t={t:.1f}  mean |v_net - v_oracle| = {err:.4f}")

# integrate noise -> data; the sample mean should sit near (2, 0)
z = task.sample_prior(5000, rng)
x = integrate_ode(flow, z, 50)
print("sample mean", x.mean(axis=0).round(3), "sample std", x.std(axis=0).round(3))
