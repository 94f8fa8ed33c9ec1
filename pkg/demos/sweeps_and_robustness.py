"""Sweeps over positives and temperature, and accuracy under input noise.

Run: python3 demos/sweeps_and_robustness.py
"""

from supconlab import experiments as ex

base = ex.RunConfig(loss="SupOut", dataset="blobs", epochs=30, severities=(0,))

print(ex.format_table(ex.POSITIVES_HEADER, ex.sweep_positives(base, [1, 4, None])), end="")
print(ex.format_table(ex.TEMPERATURE_HEADER, ex.sweep_temperature(base, [0.05, 0.1, 0.5])), end="")

rob = ex.RunConfig(loss="SupOut", dataset="blobs", epochs=30)
print(ex.format_table(ex.ROBUSTNESS_HEADER, ex.robustness(rob, "xent")), end="")
