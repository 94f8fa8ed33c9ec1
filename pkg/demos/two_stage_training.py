"""Contrastive pretraining of a small MLP, then a linear probe on frozen features.

Run: python3 demos/two_stage_training.py
"""

import tempfile
from pathlib import Path

from supconlab import experiments as ex
from supconlab.model import evaluate, inference_parameter_count, load_checkpoint, save_checkpoint

cfg = ex.RunConfig(loss="SupOut", dataset="blobs", tau=0.1, epochs=100, batch_n=64, seed=0)
data = ex.load_dataset(cfg.dataset)
model, probe, trajectory = ex.train_models(cfg, data)

print(f"loss: epoch 1 {trajectory[0]:.3f} -> epoch {len(trajectory)} {trajectory[-1]:.3f}")
top1, ece = evaluate(model, probe, *data.heldout())
print(f"held-out top-1 {top1:.4f}, ECE {ece:.4f}")
print("inference parameters (encoder + probe):", inference_parameter_count(model, probe))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "encoder.ckpt"
    save_checkpoint(model, path)
    restored = load_checkpoint(path)
    print(f"checkpoint {path.stat().st_size} bytes, reloaded top-1 "
          f"{evaluate(restored, probe, *data.heldout())[0]:.4f}")

result = ex.run_train(cfg, data)
print(ex.dumps_result({k: result[k] for k in ("probe_top1", "ece", "centroid_oracle_top1")}), end="")
