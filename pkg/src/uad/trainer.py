"""MLP classifier, label-smoothed cross-entropy, momentum SGD and the training loops."""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from uad.errors import DivergenceError, InvalidConfig, InvalidInput
from uad.selection import refresh_pseudo_labels


@dataclass
class TrainerConfig:
    base_lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 1e-3
    batch_size: int = 32
    epochs: int = 100
    smoothing: float = 0.1
    alpha: float = 10.0
    beta: float = 0.75
    seed: int = 0
    hidden: tuple = (64,)

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.base_lr <= 0 or self.weight_decay < 0 or self.alpha <= 0 or self.beta <= 0:
            raise InvalidConfig("base_lr, alpha, beta must be positive and weight_decay >= 0")
        if self.batch_size < 1 or self.epochs < 0:
            raise InvalidConfig("batch_size must be >= 1 and epochs >= 0")
        if not 0 <= self.smoothing < 1:
            raise InvalidConfig("smoothing must be in [0, 1)")

    def to_dict(self):
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class AdaptConfig(TrainerConfig):
    """Target adaptation settings: 15 epochs, hard targets, refreshed pseudo-labels."""

    epochs: int = 15
    smoothing: float = 0.0
    # from this epoch on (1-based) the target model competes as a teacher; 0 disables
    target_from_epoch: int = 2
    pl_threshold: float = 0.0


@dataclass
class MlpClassifier:
    """Fully connected net: rectifier hidden layers, linear output layer.

    ``weights[l]`` has shape (layer_dims[l], layer_dims[l+1]).
    """

    layer_dims: list
    weights: list = field(repr=False)
    biases: list = field(repr=False)

    @classmethod
    def init(cls, layer_dims, rng):
        """He-normal weights scaled by fan-in, zero biases."""
        dims = [int(d) for d in layer_dims]
        if len(dims) < 2 or min(dims) < 1:
            raise InvalidConfig(f"bad layer dims {dims}")
        ws = [rng.normal(0.0, math.sqrt(2.0 / a), size=(a, b)) for a, b in zip(dims[:-1], dims[1:])]
        bs = [np.zeros(b) for b in dims[1:]]
        return cls(dims, ws, bs)

    @property
    def n_classes(self):
        return self.layer_dims[-1]

    def params(self):
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self):
        return MlpClassifier(
            list(self.layer_dims), [w.copy() for w in self.weights], [b.copy() for b in self.biases]
        )

    def predict(self, features):
        return np.argmax(forward(self, features), axis=1)


@dataclass
class LabeledDataset:
    features: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] < 1:
            raise InvalidInput("features must be a non-empty n x d array")
        if self.labels.shape != (self.features.shape[0],):
            raise InvalidInput("need exactly one label per row")
        if (self.labels < 0).any():
            raise InvalidInput("labels must be non-negative")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_classes(self):
        return int(self.labels.max()) + 1


def _check_features(model, features):
    x = np.asarray(features, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != model.layer_dims[0]:
        raise InvalidInput(f"feature width {x.shape[-1] if x.ndim else '?'} != model input {model.layer_dims[0]}")
    return x


def _forward_trace(model, x):
    acts = [x]
    h = x
    last = len(model.weights) - 1
    for l, (w, b) in enumerate(zip(model.weights, model.biases)):
        h = h @ w + b
        if l < last:
            h = np.maximum(h, 0.0)
        acts.append(h)
    return acts


def forward(model, features):
    """Logits, shape (batch, K)."""
    return _forward_trace(model, _check_features(model, features))[-1]


def _log_softmax(logits):
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def _smoothed_targets(labels, k, smoothing):
    q = np.full((labels.shape[0], k), smoothing / k)
    q[np.arange(labels.shape[0]), labels] += 1.0 - smoothing
    return q


def ce_loss_smoothed(logits, labels, smoothing=0.0):
    """Mean cross-entropy against (1-eps)*onehot + eps/K targets."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    q = _smoothed_targets(labels, logits.shape[1], smoothing)
    return float(-(q * _log_softmax(logits)).sum(axis=1).mean())


def loss_and_grads(model, features, labels, smoothing=0.0):
    """Loss and its gradients, ordered like ``model.params()``."""
    x = _check_features(model, features)
    labels = np.asarray(labels, dtype=np.int64)
    acts = _forward_trace(model, x)
    logits = acts[-1]
    logp = _log_softmax(logits)
    q = _smoothed_targets(labels, logits.shape[1], smoothing)
    loss = float(-(q * logp).sum(axis=1).mean())

    delta = (np.exp(logp) - q) / x.shape[0]
    grads = []
    for l in range(len(model.weights) - 1, -1, -1):
        grads.append(delta.sum(axis=0))
        grads.append(acts[l].T @ delta)
        if l:
            delta = (delta @ model.weights[l].T) * (acts[l] > 0)
    grads.reverse()  # -> [W0, b0, W1, b1, ...]
    return loss, grads


def sgd_step(model, grads, velocity, lr, cfg):
    """One momentum SGD step with coupled weight decay, in place.

    v <- momentum*v + g + wd*w ;  w <- w - lr*v
    """
    params = model.params()
    if len(grads) != len(params) or any(g.shape != p.shape for g, p in zip(grads, params)):
        raise InvalidInput("gradient shapes do not match parameters")
    if not all(np.all(np.isfinite(g)) for g in grads):
        raise DivergenceError("non-finite gradient")
    if velocity is None:
        velocity = [np.zeros_like(p) for p in params]
    for p, g, v in zip(params, grads, velocity):
        v *= cfg.momentum
        v += g + cfg.weight_decay * p
        p -= lr * v
    return model, velocity


def lr_at(progress, cfg):
    """Annealed learning rate base_lr / (1 + alpha*p)**beta."""
    if not 0.0 <= progress <= 1.0:
        raise InvalidInput(f"progress must be in [0, 1], got {progress}")
    return cfg.base_lr / (1.0 + cfg.alpha * progress) ** cfg.beta


def _run_epochs(model, features, label_fn, cfg, rng, on_epoch=None):
    """Mini-batch loop shared by source training and adaptation.

    ``label_fn(epoch, model)`` returns the labels for this epoch and an optional
    boolean row mask. The schedule counts ceil(n/B) iterations per epoch.
    """
    n = features.shape[0]
    total = max(1, math.ceil(n / cfg.batch_size)) * cfg.epochs
    velocity = None
    it = 0
    for epoch in range(1, cfg.epochs + 1):
        labels, keep = label_fn(epoch, model)
        rows = np.arange(n) if keep is None else np.flatnonzero(keep)
        order = rows[rng.permutation(rows.shape[0])]
        loss_sum = 0.0
        for bi, start in enumerate(range(0, order.shape[0], cfg.batch_size)):
            idx = order[start : start + cfg.batch_size]
            loss, grads = loss_and_grads(model, features[idx], labels[idx], cfg.smoothing)
            if not math.isfinite(loss):
                raise DivergenceError(f"non-finite loss at epoch {epoch}, batch {bi}")
            lr = lr_at(min(it / total, 1.0), cfg)
            try:
                _, velocity = sgd_step(model, grads, velocity, lr, cfg)
            except DivergenceError as exc:
                raise DivergenceError(f"{exc} at epoch {epoch}, batch {bi}") from None
            it += 1
            loss_sum += loss * idx.shape[0]
        if on_epoch is not None:
            on_epoch(epoch, model, loss_sum / max(order.shape[0], 1))
    return model


def train_source(data, cfg=None, n_classes=None):
    """Train an MLP on a labelled source domain with label-smoothed CE."""
    cfg = cfg or TrainerConfig()
    k = int(n_classes or data.n_classes)
    if data.labels.max() >= k:
        raise InvalidInput("labels exceed n_classes")
    rng = np.random.default_rng(cfg.seed)
    model = MlpClassifier.init([data.features.shape[1], *cfg.hidden, k], rng)
    return _run_epochs(model, data.features, lambda e, m: (data.labels, None), cfg, rng)


def adapt_target(init, target_features, zoo, cfg=None, on_epoch=None):
    """Fine-tune ``init`` on the unlabelled target set with refreshed pseudo-labels.

    At the start of every epoch pseudo-labels are regenerated from the zoo;
    from ``cfg.target_from_epoch`` on the current target model is a candidate
    teacher as well. ``on_epoch(epoch, model, pseudo, loss)`` is called after
    each epoch. Returns the adapted copy; ``init`` is not modified.
    """
    cfg = cfg or AdaptConfig()
    x = np.ascontiguousarray(target_features, dtype=np.float64)
    n, k = zoo.shape
    if x.ndim != 2 or x.shape[0] != n:
        raise InvalidInput(f"target features have {x.shape[0]} rows, zoo logits have {n}")
    if init.n_classes != k:
        raise InvalidInput(f"model has {init.n_classes} outputs, zoo has {k} classes")
    model = init.copy()
    _check_features(model, x)
    rng = np.random.default_rng(cfg.seed)
    current = {}

    def labels_for(epoch, m):
        use_target = cfg.target_from_epoch > 0 and epoch >= cfg.target_from_epoch
        pl = refresh_pseudo_labels(zoo, forward(m, x) if use_target else None)
        current["pl"] = pl
        keep = pl.mask(cfg.pl_threshold) if cfg.pl_threshold > 0 else None
        return pl.labels, keep

    hook = None
    if on_epoch is not None:
        def hook(epoch, m, loss):
            on_epoch(epoch, m, current["pl"], loss)

    return _run_epochs(model, x, labels_for, cfg, rng, hook)
