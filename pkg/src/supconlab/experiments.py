"""Desk-scale experiment runner: datasets by name, single runs and sweeps.

A run is fully described by a :class:`RunConfig`; its result is a plain
dict serialized as sorted, indented JSON so that repeating a run with the
same config produces the same bytes.  Wall time is deliberately left out of
the file (see :func:`run_train`).
"""

import json
import math
from dataclasses import asdict, dataclass, field

from .data import AugmentSpec, load_csv, make_blobs, nearest_centroid_accuracy
from .losses import LossSpec, Variant
from .model import (
    TrainConfig,
    evaluate,
    evaluate_corrupted,
    inference_parameter_count,
    reinit_head_retrain,
    train_contrastive,
    train_linear_probe,
    train_xent_baseline,
)

RESULT_SCHEMA = "supconlab.result/1"
POSITIVES_HEADER = ("k", "top1")
TEMPERATURE_HEADER = ("tau", "top1")
ROBUSTNESS_HEADER = ("severity", "top1_supcon", "top1_xent", "ece_supcon", "ece_xent")
TABLE_VERSION = "# supconlab.table/1"

CONTRASTIVE_LOSSES = ("SelfSup", "SupOut", "SupIn")
XENT_LOSSES = ("xent", "two-stage-xent")
LOSSES = CONTRASTIVE_LOSSES + XENT_LOSSES

# name -> make_blobs keyword arguments; data always drawn with seed 0 so the
# run seed only changes training randomness
DATASETS = {
    "blobs": dict(classes=4, per_class=200, dim=10, separation=4.0, spread=1.0),
    "overlap": dict(classes=4, per_class=500, dim=10, separation=2.0, spread=1.0),
    "tiny": dict(classes=3, per_class=20, dim=4, separation=4.0, spread=1.0),
}
DATA_SEED = 0


def load_dataset(name):
    """A named blobs preset, or ``csv:PATH`` for a file."""
    if name.startswith("csv:"):
        return load_csv(name[4:], seed=DATA_SEED)
    if name not in DATASETS:
        raise ValueError(f"dataset: unknown name {name!r}; expected one of "
                         f"{sorted(DATASETS)} or csv:PATH")
    return make_blobs(seed=DATA_SEED, **DATASETS[name])


@dataclass(frozen=True)
class RunConfig:
    loss: str = "SupOut"
    tau: float = 0.1
    epochs: int = 100
    batch_n: int = 64
    max_positives: int | None = None
    seed: int = 0
    dataset: str = "blobs"
    rescale_by_tau: bool = True
    learning_rate: float = 0.2
    momentum: float = 0.9
    probe_epochs: int = 50
    probe_learning_rate: float = 0.5
    augment: dict = field(default_factory=lambda: dict(noise_sigma=0.3, mask_prob=0.1,
                                                       scale_jitter=0.1))
    severities: tuple = (0, 1, 2, 3, 4, 5)
    base_sigma: float = 0.5

    def __post_init__(self):
        errors = []
        if self.loss not in LOSSES:
            errors.append(f"loss: must be one of {list(LOSSES)}, got {self.loss!r}")
        if not (isinstance(self.tau, (int, float)) and self.tau > 0 and math.isfinite(self.tau)):
            errors.append(f"tau: must be a positive finite number, got {self.tau!r}")
        if self.epochs < 0:
            errors.append(f"epochs: must be >= 0, got {self.epochs}")
        if self.probe_epochs < 0:
            errors.append(f"probe_epochs: must be >= 0, got {self.probe_epochs}")
        if self.batch_n < 2:
            errors.append(f"batch_n: must be >= 2, got {self.batch_n}")
        if self.max_positives is not None and self.max_positives < 1:
            errors.append(f"max_positives: must be >= 1, got {self.max_positives}")
        if not self.base_sigma >= 0:
            errors.append(f"base_sigma: must be >= 0, got {self.base_sigma}")
        if any(s not in range(6) for s in self.severities):
            errors.append(f"severities: must be integers in 0..5, got {list(self.severities)}")
        if errors:
            raise ValueError("; ".join(errors))
        object.__setattr__(self, "severities", tuple(int(s) for s in self.severities))

    def train_config(self):
        variant = self.loss if self.loss in CONTRASTIVE_LOSSES else Variant.SUP_OUT
        return TrainConfig(
            loss_spec=LossSpec(variant, self.tau, self.max_positives, self.rescale_by_tau),
            epochs=self.epochs, batch_n=self.batch_n, learning_rate=self.learning_rate,
            momentum=self.momentum, seed=self.seed, probe_epochs=self.probe_epochs,
            probe_learning_rate=self.probe_learning_rate, augment=AugmentSpec(**self.augment))

    def to_dict(self):
        d = asdict(self)
        d["severities"] = list(self.severities)
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        d["severities"] = tuple(d.get("severities", ()))
        return cls(**d)


def _check_finite(obj, where="result"):
    if isinstance(obj, float) and not math.isfinite(obj):
        raise ValueError(f"{where} is not finite")
    if isinstance(obj, dict):
        for k, v in obj.items():
            _check_finite(v, f"{where}.{k}")
    elif isinstance(obj, list):
        for k, v in enumerate(obj):
            _check_finite(v, f"{where}[{k}]")


def train_models(cfg, dataset=None):
    """Train the model described by ``cfg``; returns ``(encoder, head, trajectory)``.

    For contrastive losses the head is the stage-two probe; ``xent`` keeps
    its end-to-end head and ``two-stage-xent`` retrains a fresh head on the
    frozen cross-entropy encoder.
    """
    dataset = load_dataset(cfg.dataset) if dataset is None else dataset
    tc = cfg.train_config()
    if cfg.loss in CONTRASTIVE_LOSSES:
        model, traj = train_contrastive(tc, dataset)
        probe, _ = train_linear_probe(model, dataset, tc)
        return model, probe, traj
    xm, _, traj = train_xent_baseline(tc, dataset)
    if cfg.loss == "two-stage-xent":
        head, _ = reinit_head_retrain(xm, dataset, tc)
        return xm.model, head, traj
    return xm.model, xm.head, traj


def run_train(cfg, dataset=None):
    """One training run; returns the result dict (see ``RESULT_SCHEMA``)."""
    dataset = load_dataset(cfg.dataset) if dataset is None else dataset
    model, head, traj = train_models(cfg, dataset)
    top1, ece = evaluate(model, head, *dataset.heldout())
    sev = evaluate_corrupted(model, head, dataset, cfg.severities, cfg.base_sigma, cfg.seed)
    result = {
        "schema": RESULT_SCHEMA,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "loss_trajectory": [float(v) for v in traj],
        "probe_top1": float(top1),
        "ece": float(ece),
        "severities": list(cfg.severities),
        "severity_top1": [float(a) for a, _ in sev],
        "severity_ece": [float(e) for _, e in sev],
        "inference_parameters": int(inference_parameter_count(model, head)),
        "centroid_oracle_top1": float(nearest_centroid_accuracy(dataset)),
    }
    _check_finite(result)
    return result


def dumps_result(result):
    return json.dumps(result, sort_keys=True, indent=2) + "\n"


def write_result(result, path):
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(dumps_result(result))


def read_result(path):
    """Load a result file and rebuild its :class:`RunConfig`."""
    with open(path, encoding="utf-8") as fh:
        result = json.load(fh)
    if result.get("schema") != RESULT_SCHEMA:
        raise ValueError(f"unsupported result schema {result.get('schema')!r}")
    return result, RunConfig.from_dict(result["config"])


# -- sweeps -------------------------------------------------------------------

def sweep_positives(base, k_list, dataset=None):
    """``(k, top1)`` rows; ``k=None`` means uncapped."""
    dataset = load_dataset(base.dataset) if dataset is None else dataset
    rows = []
    for k in k_list:
        cfg = RunConfig.from_dict({**base.to_dict(), "max_positives": k})
        _, head_top1 = _probe_top1(cfg, dataset)
        rows.append((k, head_top1))
    return rows


def sweep_temperature(base, tau_list, dataset=None):
    dataset = load_dataset(base.dataset) if dataset is None else dataset
    rows = []
    for tau in tau_list:
        cfg = RunConfig.from_dict({**base.to_dict(), "tau": tau})
        rows.append((tau, _probe_top1(cfg, dataset)[1]))
    return rows


def _probe_top1(cfg, dataset):
    model, head, _ = train_models(cfg, dataset)
    return model, evaluate(model, head, *dataset.heldout())[0]


def robustness(base, xent_loss="xent", dataset=None):
    """Per-severity accuracy and ECE for a contrastive model and a CE model
    trained with otherwise identical settings."""
    dataset = load_dataset(base.dataset) if dataset is None else dataset
    out = {}
    for tag, loss in (("supcon", base.loss), ("xent", xent_loss)):
        cfg = RunConfig.from_dict({**base.to_dict(), "loss": loss})
        model, head, _ = train_models(cfg, dataset)
        out[tag] = evaluate_corrupted(model, head, dataset, cfg.severities, cfg.base_sigma, cfg.seed)
    return [(s, out["supcon"][j][0], out["xent"][j][0], out["supcon"][j][1], out["xent"][j][1])
            for j, s in enumerate(base.severities)]


def format_table(header, rows):
    """Versioned CSV text; ``None`` is written as an empty field, floats by repr."""
    def cell(v):
        if v is None:
            return ""
        return repr(float(v)) if isinstance(v, float) else str(v)
    lines = [TABLE_VERSION, ",".join(header)]
    lines += [",".join(cell(v) for v in row) for row in rows]
    return "\n".join(lines) + "\n"
