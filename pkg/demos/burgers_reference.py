"""Reference Burgers solutions: conservation, dissipation and resolution.

    python demos/burgers_reference.py

No training; exercises the spectral solver on one random initial condition.
"""
import numpy as np

from pideeponet import datagen

rng = np.random.default_rng(0)
x = np.arange(100) / 100
spec = datagen.PeriodicGrfSpec.for_grid(100)
a, b = datagen.periodic_grf_coefficients(spec, rng, 1)
u0 = datagen.periodic_field(a, b, x)[0] + 0.5 * np.sin(2 * np.pi * x)

S = datagen.solve_burgers_spectral(u0)
energy = (S**2).mean(axis=0)
print(f"mean drift {np.ptp(S.mean(axis=0)):.1e}")
print(f"energy {energy[0]:.4f} -> {energy[-1]:.4f}, monotone: {bool(np.all(np.diff(energy) <= 1e-12))}")

fine = datagen.solve_burgers_spectral(u0, nx=256, dt=2.5e-4, output_nx=100)
print(f"t=1 gap to the finer solve: {np.linalg.norm(S[:, -1] - fine[:, -1]) / np.linalg.norm(fine[:, -1]):.1e}")
