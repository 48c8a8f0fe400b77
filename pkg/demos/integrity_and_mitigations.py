# %% [markdown]
# End-to-end integrity check of a successful attack, then the hardened
# variants under the same sweep.

# %%
from rpmb_emfi.campaign import run_integrity_campaign, run_timing_sweep

report = run_integrity_campaign("target1", seed=5, address=2)
for k, v in report.to_dict().items():
    print(f"{k}: {v}")

# %%
for variant in ("naive", "double-check", "hardened-constant", "constant-time"):
    res = run_timing_sweep("target1", window=(117_000, 119_000), seed=6, variant=variant)
    print(f"{variant:18s} successes={len(res.successes)}")
