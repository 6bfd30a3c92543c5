# %% [markdown]
# # Learning a position-dependent mass
#
# A double integrator whose mass varies along the stroke,
# m(rho) = m_bar (1 - 2 (1/2 - rho)^2).  ILC with an acceleration basis learns
# the mass at four positions; a Gaussian process interpolates between them and
# supplies feedforward parameters at positions that were never trained.
#
# Run from the repository root: ``python demos/01_example_mass.py``.

# %%
from pathlib import Path

import numpy as np

from gpff.config import build_run_config, load_config
from gpff.framework import predict_parameters, run_pipeline

root = Path(__file__).resolve().parents[1]
run = build_run_config(load_config(root / "configs" / "example.toml"), "out/demo_example", None, None, None)
plan = run.plan
plant = plan.plant

# %% [markdown]
# ## Training data
# Each training position runs 20 ILC trials; the mean of the last 8 parameter
# estimates is the GP observation.

# %%
report = run_pipeline(plan)
for s in report.training.summaries:
    rho = s["position"][0]
    print(f"rho = {rho:.2f}  learned mass {s['observation'][0]:.5f}  true {float(plant.mass(rho)):.5f}")

# %% [markdown]
# ## GP posterior against the true curve

# %%
grid = np.linspace(0.0, 1.0, 21)
mean, var = predict_parameters(report.models, grid[:, None])
print(f"{'rho':>5} {'true':>8} {'mean':>8} {'2 sigma':>9}")
for r, m, v in zip(grid, mean[:, 0], var[:, 0]):
    print(f"{r:5.2f} {float(plant.mass(r)):8.4f} {m:8.4f} {2 * np.sqrt(v):9.4f}")

model = report.models["acc_0"]
print("\nfitted hyperparameters:", model.kernel, f"noise variance {model.noise_variance:.3g}")

# %% [markdown]
# ## Tracking error at the test positions
# ``center`` reuses the parameters learned at rho = 0.5, ``gp`` uses the
# posterior mean, ``local_ilc`` runs a fresh ILC session at each test position.

# %%
table = report.table()
print("position " + "".join(f"{m:>12}" for m in report.methods))
for p, row in zip(plan.test_positions[:, 0], table):
    print(f"{p:8.2f} " + "".join(f"{v:12.3e}" for v in row))
