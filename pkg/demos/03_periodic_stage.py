# %% [markdown]
# # Two-axis stage with a periodic force constant
#
# Axis 1 is driven by a linear motor whose force constant repeats every magnet
# pitch, so its ideal acceleration parameter is periodic in rho_1.  Axis 2 has
# Coulomb friction and a mildly position-dependent mass.  One GP per parameter
# is trained on a 17 x 3 grid.

# %%
from pathlib import Path

import numpy as np

from gpff.config import build_run_config, load_config
from gpff.framework import collect_training_data, fit_models, predict_parameters

root = Path(__file__).resolve().parents[1]
run = build_run_config(load_config(root / "configs" / "periodic.toml"), "out/demo_periodic", None, None, None)
plan = run.plan
plant = plan.plant

data = collect_training_data(plan)
models = fit_models(plan, data)
for name, m in models.items():
    ls = ", ".join(f"{v:.3g}" for v in m.kernel.lengthscales)
    print(f"{name:>10}: lengthscales [{ls}]  signal variance {m.kernel.signal_variance:.3g}")

# %% [markdown]
# ## Spatial spectrum of the learned axis-1 acceleration parameter
# Sampled at rho_2 = 0.5 over one unit of travel; the dominant bin is the
# number of magnet periods per unit length.

# %%
n = 128
rho_1 = np.arange(n) / n
pts = np.column_stack([rho_1, np.full(n, 0.5)])
mean, _ = predict_parameters({"acc_0": models["acc_0"]}, pts)
spectrum = np.abs(np.fft.rfft(mean[:, 0] - mean[:, 0].mean()))
print(f"dominant bin {int(np.argmax(spectrum))}, 1/pitch = {1 / plant.pitch:g}")

truth = np.array([plant.true_parameters(p)[1] for p in pts])
print(f"max |mean - truth| along rho_1: {np.abs(mean[:, 0] - truth).max():.4f}")

# %% [markdown]
# ## All parameters at the test positions

# %%
mean, var = predict_parameters(models, plan.test_positions)
for p, m, v in zip(plan.test_positions, mean, var):
    truth = plant.true_parameters(p)
    print(f"rho = {p}")
    for name, a, b, t in zip(models, m, v, truth):
        print(f"  {name:>10} {a:9.4f} +- {2 * np.sqrt(b):.4f}   true {t:9.4f}")
