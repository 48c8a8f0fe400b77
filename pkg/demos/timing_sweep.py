# %% [markdown]
# Wrong-MAC writes swept across the busy window, one pulse per 10 ns step.

# %%
from rpmb_emfi.campaign import run_timing_sweep

for profile in ("target1", "target3"):
    res = run_timing_sweep(profile, window=(110_000, 125_000), seed=3)
    print(profile, "compare window:", res.compare_window)
    print("  successes:", res.successes)
    print("  merged windows:", res.windows)
    print("  counts:", res.counts())
