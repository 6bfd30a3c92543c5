# %% [markdown]
# # ILC with basis functions
#
# One ILC session at a single position.  With an exact model and no noise the
# first update lands on the true parameters, up to the small bias introduced by
# the feedforward-effort weight w_f; with a nominal model that is 30% too light
# the iteration needs a few more trials.

# %%
import numpy as np

from gpff.ilcbf import IlcWeights, nominal_law, run_session
from gpff.plant import SpatialMassPlant, default_controller
from gpff.trajectory import build_basis, polynomial_reference

plant = SpatialMassPlant()
ts = plant.sample_time
ref = polynomial_reference(0.0, 0.01, 0.5, ts, post_rest=0.5)
basis = build_basis(ref, ["vel", "acc"])
ctrl = default_controller(1.0, ts)
rho = 0.2
print(f"true mass at rho = {rho}: {float(plant.mass(rho)):.6f}")

# %% [markdown]
# ## Exact model

# %%
exact = run_session(plant, rho, ctrl, ref, basis, IlcWeights(1.0, 1e-8, 0.0), trials=10)
for h in exact.history:
    print(f"trial {h.j:2d}  |e|_2 = {h.error_norm:.3e}  theta = {np.array2string(h.theta, precision=6)}")

# %% [markdown]
# ## Mismatched nominal model
# The update law is built from a plant with m_bar = 0.7 at the center.

# %%
light = SpatialMassPlant(m_bar=0.7)
law = nominal_law(light(0.5), ctrl, basis, IlcWeights(1.0, 1e-8, 0.0))
mismatched = run_session(plant, rho, ctrl, ref, basis, law=law, trials=15)
for h in mismatched.history[::3]:
    print(f"trial {h.j:2d}  |e|_2 = {h.error_norm:.3e}  acc = {h.theta[1]:.6f}")
