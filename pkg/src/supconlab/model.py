"""Small MLP encoder + projection head with hand-written backprop, momentum
SGD, and the two-stage (contrastive pretraining, then frozen-encoder linear
probe) protocol together with the cross-entropy baselines.

Forward pass::

    x -> encoder MLP -> r_raw -> r = r_raw/|r_raw| -> projection MLP -> w -> z = w/|w|

The probe and the cross-entropy head read ``r``; the contrastive loss reads ``z``.
"""

import struct
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.special import expit, log_softmax, softmax

from .data import AugmentSpec, assemble_multiview_batch, corrupt, stream
from .embedding import as_real, normalization_jacobian_apply, normalize_rows
from .grads import grad_total_w
from .losses import LossSpec, Variant, cap_positives, compute_loss

ECE_BINS = 15


# -- layers -------------------------------------------------------------------

def _act(name, x):
    if name == "identity":
        return x
    if name == "relu":
        return np.maximum(x, 0.0)
    if name == "swish":
        return x * expit(x)
    if name == "tanh":
        return np.tanh(x)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, x):
    if name == "identity":
        return np.ones_like(x)
    if name == "relu":
        return (x > 0).astype(x.dtype)
    if name == "swish":
        s = expit(x)
        return s + x * s * (1.0 - s)
    if name == "tanh":
        return 1.0 - np.tanh(x) ** 2
    raise ValueError(f"unknown activation {name!r}")


ACTIVATIONS = ("identity", "relu", "swish", "tanh")


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray
    activation: str = "identity"

    @classmethod
    def init(cls, fan_in, fan_out, activation, rng):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        b = rng.uniform(-bound, bound, size=fan_out)
        return cls(W, b, activation)

    def copy(self):
        return Layer(self.W.copy(), self.b.copy(), self.activation)


def _mlp_forward(layers, h):
    cache = []
    for layer in layers:
        pre = h @ layer.W.T + layer.b
        cache.append((h, pre))
        h = _act(layer.activation, pre)
    return h, cache


def _mlp_backward(layers, cache, g):
    grads = []
    for layer, (h_in, pre) in zip(reversed(layers), reversed(cache)):
        g_pre = g * _act_grad(layer.activation, pre)
        grads.append((g_pre.T @ h_in, g_pre.sum(axis=0)))
        g = g_pre @ layer.W
    grads.reverse()
    return [a for pair in grads for a in pair], g


# -- models -------------------------------------------------------------------

@dataclass
class EncoderModel:
    encoder: list
    projection: list
    input_dim: int

    @classmethod
    def init(cls, input_dim, hidden=(64,), rep_dim=32, proj_hidden=(), proj_dim=16,
             activation="swish", seed=0):
        """Seeded uniform(+-1/sqrt(fan_in)) init; the last layer of each MLP is affine.

        ``hidden=None`` gives a zero-depth (identity) encoder with ``r = x / |x|``.
        """
        rng = stream(seed, "init")
        enc = []
        if hidden is not None:
            dims = [input_dim, *hidden, rep_dim]
            for k in range(len(dims) - 1):
                act = activation if k < len(dims) - 2 else "identity"
                enc.append(Layer.init(dims[k], dims[k + 1], act, rng))
        d_e = enc[-1].W.shape[0] if enc else input_dim
        dims = [d_e, *proj_hidden, proj_dim]
        proj = [Layer.init(dims[k], dims[k + 1], activation if k < len(dims) - 2 else "identity", rng)
                for k in range(len(dims) - 1)]
        return cls(enc, proj, input_dim)

    @property
    def rep_dim(self):
        return self.encoder[-1].W.shape[0] if self.encoder else self.input_dim

    @property
    def proj_dim(self):
        return self.projection[-1].W.shape[0]

    def layers(self):
        return self.encoder + self.projection

    def parameters(self):
        return [a for layer in self.layers() for a in (layer.W, layer.b)]

    def encoder_parameters(self):
        return [a for layer in self.encoder for a in (layer.W, layer.b)]

    def with_parameters(self, params):
        params = list(params)
        it = iter(params)
        enc = [Layer(next(it), next(it), l.activation) for l in self.encoder]
        proj = [Layer(next(it), next(it), l.activation) for l in self.projection]
        return EncoderModel(enc, proj, self.input_dim)

    def copy(self):
        return self.with_parameters([p.copy() for p in self.parameters()])


@dataclass
class LinearProbe:
    W: np.ndarray  # (C, D_E)
    b: np.ndarray

    @classmethod
    def init(cls, rep_dim, classes, rng):
        layer = Layer.init(rep_dim, classes, "identity", rng)
        return cls(layer.W, layer.b)

    def logits(self, r):
        return r @ self.W.T + self.b

    def parameters(self):
        return [self.W, self.b]

    def parameter_count(self):
        return self.W.size + self.b.size


@dataclass
class XentModel:
    """Encoder trained end-to-end with a linear softmax head."""

    model: EncoderModel
    head: LinearProbe


@dataclass
class Forward:
    r: np.ndarray
    w: np.ndarray
    z: np.ndarray
    r_raw: np.ndarray
    enc_cache: list = field(repr=False)
    proj_cache: list = field(repr=False)


def encode(model, X):
    """Normalized representations ``r`` only (the inference path)."""
    X = as_real(X)
    r_raw, _ = _mlp_forward(model.encoder, X)
    return normalize_rows(r_raw)


def forward(model, X):
    """Full pass; long-double inputs and parameters stay long double."""
    X = as_real(X)
    if X.ndim != 2 or X.shape[1] != model.input_dim:
        raise ValueError(f"expected inputs with {model.input_dim} columns, got {X.shape}")
    r_raw, enc_cache = _mlp_forward(model.encoder, X)
    r = normalize_rows(r_raw)
    w, proj_cache = _mlp_forward(model.projection, r)
    z = normalize_rows(w)
    return Forward(r, w, z, r_raw, enc_cache, proj_cache)


def backward(model, fwd, grad_w=None, grad_r=None):
    """Parameter gradients from upstream gradients on ``w`` and/or ``r``.

    Returns a list aligned with ``model.parameters()``.  With only
    ``grad_r`` the projection gradients are zero.
    """
    if grad_w is not None:
        proj_grads, g_r = _mlp_backward(model.projection, fwd.proj_cache, grad_w)
    else:
        proj_grads = [np.zeros_like(p) for l in model.projection for p in (l.W, l.b)]
        g_r = np.zeros_like(fwd.r)
    if grad_r is not None:
        g_r = g_r + grad_r
    g_raw = normalization_jacobian_apply(fwd.r_raw, g_r)
    enc_grads, _ = _mlp_backward(model.encoder, fwd.enc_cache, g_raw)
    return enc_grads + proj_grads


def sgd_momentum_step(params, grads, lr, momentum, velocity=None):
    """``v <- momentum * v + g``; ``p <- p - lr * v``.  Returns new (params, velocity)."""
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    if not (len(params) == len(grads) == len(velocity)):
        raise ValueError("params, grads and velocity must align")
    new_v, new_p = [], []
    for p, g, v in zip(params, grads, velocity):
        if p.shape != g.shape:
            raise ValueError(f"shape mismatch {p.shape} vs {g.shape}")
        v = momentum * v + g
        new_v.append(v)
        new_p.append(p - lr * v)
    return new_p, new_v


# -- objectives ---------------------------------------------------------------

def contrastive_objective(model, inputs, spec, cap_seed=None):
    """Per-anchor-mean loss and parameter gradients for one multiview batch."""
    fwd = forward(model, inputs.X)
    batch = inputs.to_batch(fwd.z)
    if spec.max_positives is not None:
        batch = cap_positives(batch, spec.max_positives, 0 if cap_seed is None else cap_seed)
    out = compute_loss(batch, spec)
    tau = 1.0 if spec.variant is Variant.NPAIRS else spec.tau
    g_w = grad_total_w(fwd.w, batch, tau, spec.variant, rescale_by_tau=spec.rescale_by_tau)
    n = batch.size
    grads = backward(model, fwd, grad_w=g_w / n)
    return out.total / n, out, grads


def ce_loss_and_grad(logits, labels):
    """Mean softmax cross-entropy and its gradient with respect to the logits."""
    labels = np.asarray(labels, dtype=np.intp)
    n = len(labels)
    loss = -log_softmax(logits, axis=1)[np.arange(n), labels].mean()
    g = softmax(logits, axis=1)
    g[np.arange(n), labels] -= 1.0
    return float(loss), g / n


# -- training -----------------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    loss_spec: LossSpec = field(default_factory=LossSpec)
    epochs: int = 100
    batch_n: int = 64
    learning_rate: float = 0.2
    momentum: float = 0.9
    seed: int = 0
    probe_epochs: int = 50
    probe_learning_rate: float = 0.5
    probe_batch: int = 64
    augment: AugmentSpec = field(default_factory=lambda: AugmentSpec(0.3, 0.1, 0.1))
    hidden: tuple = (64,)
    rep_dim: int = 32
    proj_hidden: tuple = ()
    proj_dim: int = 16
    activation: str = "swish"

    def __post_init__(self):
        if self.epochs < 0 or self.probe_epochs < 0:
            raise ValueError("epochs must be >= 0")
        if self.batch_n < 1 or self.probe_batch < 1:
            raise ValueError("batch sizes must be positive")
        if not (self.learning_rate > 0 and self.probe_learning_rate > 0):
            raise ValueError("learning rates must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must be in [0, 1)")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation must be one of {ACTIVATIONS}")

    @property
    def max_positives(self):
        return self.loss_spec.max_positives

    def replace(self, **changes):
        return replace(self, **changes)

    def init_model(self, input_dim):
        return EncoderModel.init(input_dim, self.hidden, self.rep_dim, self.proj_hidden,
                                 self.proj_dim, self.activation, self.seed)


def _epoch_batches(n_train, batch_n, rng, min_size):
    order = rng.permutation(n_train)
    chunks = [order[k:k + batch_n] for k in range(0, n_train, batch_n)]
    return [c for c in chunks if len(c) >= min_size]


def train_contrastive(config, dataset, model=None):
    """Stage one: contrastive training of encoder + projection head.

    Returns the model (projection head kept) and the per-epoch mean
    per-anchor loss (never tau-rescaled, so runs are comparable).
    """
    dataset.check_trainable()
    spec = config.loss_spec
    if spec.variant in (Variant.TRIPLET, Variant.XENT_CONTRASTIVE):
        raise ValueError(f"{spec.variant.value} is not a multiview training loss")
    model = config.init_model(dataset.dim) if model is None else model.copy()
    Xtr, ytr = dataset.train()
    supervised = spec.variant is not Variant.SELF_SUP
    params = model.parameters()
    velocity = None
    trajectory = []
    for epoch in range(config.epochs):
        loss_sum, anchors = 0.0, 0
        for b, idx in enumerate(_epoch_batches(len(ytr), config.batch_n,
                                                     stream(config.seed, "shuffle", epoch), 2)):
            inputs = assemble_multiview_batch(Xtr, ytr, idx, config.augment,
                                              stream(config.seed, "augment", epoch, b),
                                              labels=supervised)
            cap_seed = int(stream(config.seed, "cap", epoch, b).integers(2**32))
            _, out, grads = contrastive_objective(model, inputs, spec, cap_seed)
            loss_sum += float(np.sum(out.per_anchor))
            anchors += len(out.per_anchor) - len(out.skipped_anchors)
            params, velocity = sgd_momentum_step(params, grads, config.learning_rate,
                                                 config.momentum, velocity)
            model = model.with_parameters(params)
        trajectory.append(loss_sum / max(anchors, 1))
    return model, trajectory


def _train_head(R, y, classes, config, role):
    rng = stream(config.seed, role, "init")
    probe = LinearProbe.init(R.shape[1], classes, rng)
    params, velocity = probe.parameters(), None
    for epoch in range(config.probe_epochs):
        order = stream(config.seed, role, "shuffle", epoch)
        for idx in _epoch_batches(len(y), config.probe_batch, order, 1):
            _, g = ce_loss_and_grad(R[idx] @ params[0].T + params[1], y[idx])
            grads = [g.T @ R[idx], g.sum(axis=0)]
            params, velocity = sgd_momentum_step(params, grads, config.probe_learning_rate,
                                                 config.momentum, velocity)
    return LinearProbe(*params)


def train_linear_probe(model, dataset, config, role="probe"):
    """Stage two: softmax probe on frozen, normalized representations.

    Returns the probe and its held-out top-1 accuracy.  ``model`` is never
    modified.
    """
    Xtr, ytr = dataset.train()
    probe = _train_head(encode(model, Xtr), ytr, dataset.num_classes, config, role)
    Xte, yte = dataset.heldout()
    top1, _ = evaluate(model, probe, Xte, yte)
    return probe, top1


def train_xent_baseline(config, dataset):
    """End-to-end cross-entropy training of encoder + linear head.

    Each step sees the same ``2N`` augmented views a contrastive step does.
    Returns the trained :class:`XentModel`, held-out top-1 and the per-epoch
    mean loss.
    """
    dataset.check_trainable()
    model = config.init_model(dataset.dim)
    head = LinearProbe.init(model.rep_dim, dataset.num_classes, stream(config.seed, "head", "init"))
    Xtr, ytr = dataset.train()
    n_enc = len(model.encoder_parameters())
    proj_params = model.parameters()[n_enc:]
    params = model.encoder_parameters() + head.parameters()
    velocity = None
    trajectory = []
    for epoch in range(config.epochs):
        loss_sum, count = 0.0, 0
        for b, idx in enumerate(_epoch_batches(len(ytr), config.batch_n,
                                                     stream(config.seed, "shuffle", epoch), 2)):
            inputs = assemble_multiview_batch(Xtr, ytr, idx, config.augment,
                                              stream(config.seed, "augment", epoch, b))
            model = model.with_parameters(params[:n_enc] + proj_params)
            fwd = forward(model, inputs.X)
            loss, g_logits = ce_loss_and_grad(fwd.r @ params[-2].T + params[-1], inputs.class_labels)
            enc_grads = backward(model, fwd, grad_r=g_logits @ params[-2])[:n_enc]
            grads = enc_grads + [g_logits.T @ fwd.r, g_logits.sum(axis=0)]
            params, velocity = sgd_momentum_step(params, grads, config.learning_rate,
                                                 config.momentum, velocity)
            loss_sum += loss * len(g_logits)
            count += len(g_logits)
        trajectory.append(loss_sum / max(count, 1))
    model = model.with_parameters(params[:n_enc] + proj_params)
    xm = XentModel(model, LinearProbe(params[-2], params[-1]))
    top1, _ = evaluate(xm.model, xm.head, *dataset.heldout())
    return xm, top1, trajectory


def reinit_head_retrain(xent_model, dataset, config):
    """Re-initialize the final layer, freeze the encoder and retrain the head
    with cross-entropy.  Returns the new head and its held-out top-1."""
    return train_linear_probe(xent_model.model, dataset, config, role="head")


# -- evaluation ---------------------------------------------------------------

def top1_accuracy(logits, labels):
    """Fraction of rows whose argmax (lowest index on ties) equals the label."""
    return float(np.mean(np.argmax(logits, axis=1) == np.asarray(labels)))


def expected_calibration_error(probs, labels, n_bins=ECE_BINS):
    """Binned |accuracy - confidence| gap over max-softmax confidence.

    Bins are ``(k/n, (k+1)/n]`` for ``k = 0..n-1``; the gap of each bin is
    weighted by its share of the samples.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    conf = probs.max(axis=1)
    correct = np.argmax(probs, axis=1) == labels
    edges = np.linspace(0.0, 1.0, n_bins + 1)
    ece = 0.0
    for lo, hi in zip(edges[:-1], edges[1:]):
        in_bin = (conf > lo) & (conf <= hi)
        if np.any(in_bin):
            ece += in_bin.mean() * abs(correct[in_bin].mean() - conf[in_bin].mean())
    return float(ece)


def evaluate(model, probe, X, y):
    """Top-1 accuracy and 15-bin ECE of ``probe`` on ``encode(model, X)``."""
    logits = probe.logits(encode(model, X))
    return top1_accuracy(logits, y), expected_calibration_error(softmax(logits, axis=1), y)


def evaluate_corrupted(model, probe, dataset, severities, base_sigma, seed):
    """Per-severity (top1, ece) on corrupted held-out inputs.

    Every severity reuses one noise draw, scaled, so the sweep compares the
    same perturbation directions at growing magnitude.
    """
    Xte, yte = dataset.heldout()
    rows = []
    for s in severities:
        Xc = corrupt(Xte, s, base_sigma, stream(seed, "corrupt"))
        rows.append(evaluate(model, probe, Xc, yte))
    return rows


def inference_parameter_count(model, probe):
    """Parameters used at inference: encoder + linear classifier (no projection head)."""
    return sum(p.size for p in model.encoder_parameters()) + probe.parameter_count()


# -- checkpoints --------------------------------------------------------------

CHECKPOINT_MAGIC = b"SUPCONCK"
CHECKPOINT_VERSION = 1
_ACT_CODES = {name: k for k, name in enumerate(ACTIVATIONS)}


def save_checkpoint(model, path):
    """Binary checkpoint, all integers little-endian ``uint32``::

        magic "SUPCONCK" | version | input_dim | n_encoder | n_projection
        per layer (encoder then projection): out | in | activation code
        per layer, same order: W (out*in float64 LE, row-major) then b (out float64 LE)

    Activation codes: 0 identity, 1 relu, 2 swish, 3 tanh.
    """
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<4I", CHECKPOINT_VERSION, model.input_dim,
                             len(model.encoder), len(model.projection)))
        for layer in model.layers():
            out, inp = layer.W.shape
            fh.write(struct.pack("<3I", out, inp, _ACT_CODES[layer.activation]))
        for layer in model.layers():
            fh.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
            fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError("not a checkpoint file")
    version, input_dim, n_enc, n_proj = struct.unpack_from("<4I", data, 8)
    if version != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {version}")
    off = 24
    shapes = []
    for _ in range(n_enc + n_proj):
        shapes.append(struct.unpack_from("<3I", data, off))
        off += 12
    layers = []
    for out, inp, code in shapes:
        W = np.frombuffer(data, dtype="<f8", count=out * inp, offset=off).reshape(out, inp)
        off += 8 * out * inp
        b = np.frombuffer(data, dtype="<f8", count=out, offset=off)
        off += 8 * out
        layers.append(Layer(W.astype(np.float64), b.astype(np.float64), ACTIVATIONS[code]))
    if off != len(data):
        raise ValueError("trailing bytes in checkpoint")
    return EncoderModel(layers[:n_enc], layers[n_enc:], input_dim)
