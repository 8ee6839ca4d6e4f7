"""Signed distance to circles from the boundary points alone.

    python demos/eikonal_circles.py [iterations]

Prints the recovered radius of a few held-out circles and writes the
predicted field of the first one to eikonal_prediction.csv.
"""
import sys

import numpy as np

from pideeponet import harness

iters = int(sys.argv[1]) if len(sys.argv) > 1 else 5000
cfg = harness.preset("eikonal", iterations=iters, log_every=1000)
data = harness.generate(cfg)
params, _ = harness.train(cfg, data)
print("test relative L2:", harness.evaluate(params, data.test).summary())

for r, u in zip(data.test.extras["radii"][:5], data.test.branch_inputs[:5]):
    est = harness.zero_level_radius(params, u)
    print(f"radius {r:.4f}  zero level set {est:.4f}  ({abs(est - r) / r:.2%})")

values = harness.predict(params, data.test.branch_inputs[0], data.test.grid)
harness.write_prediction_csv("eikonal_prediction.csv", values, data.test.axes)
print("wrote eikonal_prediction.csv, |min| of field:", float(np.min(values)))
