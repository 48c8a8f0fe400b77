# %% [markdown]
# Spatial profiling with the fault observer, then a voltage/duration search at
# the hotspot.

# %%
from rpmb_emfi.campaign import best_cell, heatmap_csv, run_parameter_search, run_profiling

cells = run_profiling("target1", iterations=25, seed=1)
print("hotspot:", best_cell(cells))
print(heatmap_csv(sorted(cells, key=lambda c: -c.glitch_rate)[:5]))

# %% [markdown]
# Only voltage matters; the duration bands should look flat.

# %%
res = run_parameter_search("target3", trials=1500, seed=2)
print("crash rate above 200 V:", round(res.crash_rate(above=True), 3))
print("crash rate below 200 V:", round(res.crash_rate(above=False), 3))
print("duration chi-square p:", round(res.duration_chi2_p, 3))
