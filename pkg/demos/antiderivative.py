"""Learn s(x) = int_0^x u without any solution data, then compare against RK45.

    python demos/antiderivative.py [iterations]

A few thousand iterations already bring the test error well under 10%.
"""
import sys

import numpy as np

from pideeponet import datagen, harness

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 3000
cfg = harness.preset("antiderivative", iterations=iters, log_every=500)
data = harness.generate(cfg)
params, metrics = harness.train(cfg, data)
for r in metrics:
    print(f"iter {r.iteration:6d}  loss {r.total_loss:.3e}  (ic {r.ic_loss:.2e}, residual {r.physics_loss:.2e})")

ev = harness.evaluate(params, data.test)
print("test relative L2:", ev.summary())

# an input the model never saw: u(x) = cos(2 pi x)
x = np.linspace(0, 1, cfg.m)
u = np.cos(2 * np.pi * x)
pred = harness.predict(params, u, x[:, None])
ref = datagen.solve_antiderivative_rk45(datagen.FieldSample(x, u))
print(f"cos(2 pi x): max |pred - ref| = {np.max(np.abs(pred - ref)):.3e}")
