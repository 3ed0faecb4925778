"""Aligning a six-step inference schedule to the 50-step training schedule.

The network only ever saw integer steps 0..49 during training, each tied to a
noise level abar_t. A short sampler jumps between far fewer levels, so every
level it visits has to be translated back into a (fractional) training step
before the network is queried. Run with ``python demos/schedule_alignment.py``.
"""

# %%
import numpy as np

from faststi.schedule import SIX_STEP_XIS, build_aligned_schedule, default_training_schedule

training = default_training_schedule()
print(f"training schedule: T={training.T}, abar_1={training.alpha_bars[0]:.4f}, "
      f"abar_T={training.alpha_bars[-1]:.4f}")

# %% [markdown]
# The short schedule is given as per-step noise increments xi. Their running
# product of (1 - xi) is the cumulative level phi_bar the sampler moves through.

# %%
aligned = build_aligned_schedule(SIX_STEP_XIS, training)
print(f"{'c':>2} {'xi':>8} {'phi_bar':>12} {'t_aligned':>10}")
for c, (xi, pb, t) in enumerate(zip(aligned.xis, aligned.phi_bars, aligned.t_aligned), start=1):
    print(f"{c:>2} {xi:>8.4f} {pb:>12.8f} {t:>10.4f}")

# %% [markdown]
# The aligned steps land between integer training steps. Interpolating sqrt(abar)
# at those fractional steps gives back exactly the levels we started from.

# %%
recovered = training.abar_at(aligned.t_aligned)
print("max |abar(t_aligned) - phi_bar| =", float(np.max(np.abs(recovered - aligned.phi_bars))))

# %% [markdown]
# Feeding the training schedule's own levels through the alignment returns the
# integers 0..49, which is a quick way to convince yourself nothing is shifted.

# %%
betas = 1.0 - training.alpha_bars / np.concatenate([[1.0], training.alpha_bars[:-1]])
roundtrip = build_aligned_schedule(betas[:10], training).t_aligned
print("first ten training levels align to", np.round(roundtrip, 12))
