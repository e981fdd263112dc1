"""Target, substitute and conditional-generator networks.

All networks are dense MLPs.  Classifiers map ``N x D`` inputs to ``N x K``
logits; the generator maps noise ``z`` concatenated with a one-hot pseudo
label to ``N x D`` features in the classifier's input space.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .tensor import DTYPE, Optimizer, OptimizerState, ParamSet, Tensor

log = logging.getLogger(__name__)

_ACTIVATIONS = {"relu": T.relu, "tanh": T.tanh, "sigmoid": T.sigmoid}


@dataclass
class NetworkSpec:
    role: str  # "target" | "substitute" | "generator"
    input_dim: int
    num_classes: int
    hidden: tuple[int, ...] = (32, 32)
    activation: str = "relu"
    latent_dim: int = 0
    # generator output squashing: "box" maps tanh into [low, high] per feature
    output_activation: str = "linear"
    output_low: tuple[float, ...] | None = None
    output_high: tuple[float, ...] | None = None
    init_scheme: str = "fan_in_uniform"
    seed: int = 0

    def __post_init__(self):
        self.hidden = tuple(int(h) for h in self.hidden)
        if self.role not in ("target", "substitute", "generator"):
            raise ValueError(f"unknown network role '{self.role}'")
        if self.num_classes < 2:
            raise ValueError(f"num_classes must be >= 2, got {self.num_classes}")
        if self.input_dim < 1 or any(h < 1 for h in self.hidden):
            raise ValueError("layer widths must be positive")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation '{self.activation}'")
        if self.role == "generator":
            if self.latent_dim < 1:
                raise ValueError("generator needs latent_dim >= 1")
            if self.output_activation not in ("linear", "tanh", "sigmoid", "box"):
                raise ValueError(f"unknown output activation '{self.output_activation}'")
            if self.output_activation == "box":
                if self.output_low is None or self.output_high is None:
                    raise ValueError("box output needs output_low and output_high")
                if len(self.output_low) != self.input_dim or len(self.output_high) != self.input_dim:
                    raise ValueError("box bounds must have input_dim entries")
                self.output_low = tuple(float(v) for v in self.output_low)
                self.output_high = tuple(float(v) for v in self.output_high)
        if self.init_scheme != "fan_in_uniform":
            raise ValueError(f"unknown init scheme '{self.init_scheme}'")

    @property
    def layer_sizes(self) -> list[int]:
        if self.role == "generator":
            return [self.latent_dim + self.num_classes, *self.hidden, self.input_dim]
        return [self.input_dim, *self.hidden, self.num_classes]

    def to_dict(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        for key in ("output_low", "output_high"):
            if d[key] is not None:
                d[key] = list(d[key])
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        d = dict(d)
        for key in ("hidden", "output_low", "output_high"):
            if d.get(key) is not None:
                d[key] = tuple(d[key])
        return cls(**d)


class Network:
    """A built network: parameters plus a forward function."""

    def __init__(self, spec: NetworkSpec, params: ParamSet):
        self.spec = spec
        self.params = params
        self._act = _ACTIVATIONS[spec.activation]
        self._n_layers = len(spec.layer_sizes) - 1
        if spec.output_activation == "box":
            lo = np.asarray(spec.output_low, dtype=DTYPE)
            hi = np.asarray(spec.output_high, dtype=DTYPE)
            self._box_centre = (hi + lo) / 2
            self._box_half = (hi - lo) / 2

    @property
    def num_classes(self) -> int:
        return self.spec.num_classes

    def _mlp(self, h: Tensor, params) -> Tensor:
        for i in range(self._n_layers):
            h = h @ params[f"W{i}"] + params[f"b{i}"]
            if i < self._n_layers - 1:
                h = self._act(h)
        return h

    def _params(self, frozen: bool):
        if frozen:
            return {name: Tensor(t.data) for name, t in self.params}
        return self.params.entries

    def forward(self, x, frozen: bool = False) -> Tensor:
        """Logits for a classifier; ``frozen`` keeps parameters out of the graph."""
        if self.spec.role == "generator":
            raise TypeError("use generate() on a generator")
        x = T.as_tensor(x)
        if x.ndim != 2 or x.shape[1] != self.spec.input_dim:
            raise ValueError(f"expected N x {self.spec.input_dim} input, got {x.shape}")
        return self._mlp(x, self._params(frozen))

    __call__ = forward

    def generate(self, z, onehot, frozen: bool = False) -> Tensor:
        if self.spec.role != "generator":
            raise TypeError("generate() is only defined for generators")
        z, onehot = T.as_tensor(z), T.as_tensor(onehot)
        if z.shape[1] != self.spec.latent_dim or onehot.shape[1] != self.spec.num_classes:
            raise ValueError(f"generator input mismatch: z {z.shape}, labels {onehot.shape}")
        h = self._mlp(T.concat([z, onehot], axis=1), self._params(frozen))
        act = self.spec.output_activation
        if act == "tanh":
            h = T.tanh(h)
        elif act == "sigmoid":
            h = T.sigmoid(h)
        elif act == "box":
            h = T.tanh(h) * self._box_half + self._box_centre
        if h.shape[1] != self.spec.input_dim:
            raise ValueError("generator output does not match classifier input dimension")
        return h

    def logits(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        """Forward without graph construction, for evaluation."""
        x = np.asarray(x, dtype=DTYPE)
        out = [self.forward(x[i : i + batch_size], frozen=True).data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.num_classes), dtype=DTYPE)

    def predict(self, x: np.ndarray) -> np.ndarray:
        # np.argmax returns the first maximum: ties go to the lowest class index
        return self.logits(x).argmax(axis=1).astype(np.int64)

    def copy(self) -> "Network":
        return Network(self.spec, self.params.copy())


def build_network(spec: NetworkSpec) -> Network:
    """Deterministically initialise a network from its spec."""
    rng = np.random.default_rng(spec.seed)
    params = ParamSet(rng_seed=spec.seed)
    sizes = spec.layer_sizes
    for i, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = 1.0 / np.sqrt(fan_in)
        params.add(f"W{i}", rng.uniform(-bound, bound, size=(fan_in, fan_out)))
        params.add(f"b{i}", rng.uniform(-bound, bound, size=(fan_out,)))
    return Network(spec, params)


def one_hot(labels: np.ndarray, k: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"label out of range [0, {k})")
    out = np.zeros((labels.shape[0], k), dtype=DTYPE)
    out[np.arange(labels.shape[0]), labels] = 1
    return out


def sample_pseudo_labels(batch_size: int, k: int, rng: np.random.Generator) -> np.ndarray:
    """Class-balanced label indices in shuffled order.

    Each class appears floor(batch/k) or ceil(batch/k) times; which classes
    receive the remainder is drawn from ``rng``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    if k < 2:
        raise ValueError("need at least two classes")
    base, extra = divmod(batch_size, k)
    counts = np.full(k, base, dtype=np.int64)
    if extra:
        counts[rng.choice(k, size=extra, replace=False)] += 1
    labels = np.repeat(np.arange(k, dtype=np.int64), counts)
    rng.shuffle(labels)
    return labels


@dataclass
class TrainConfig:
    epochs: int = 200
    batch_size: int = 64
    optimizer: str = "adam"  # or "sgd_momentum"
    learning_rate: float = 0.01
    momentum: float = 0.9
    seed: int = 0

    def optimizer_state(self) -> OptimizerState:
        if self.optimizer == "adam":
            return T.adam(self.learning_rate)
        return T.sgd(self.learning_rate, self.momentum)


@dataclass
class TrainResult:
    network: Network
    test_accuracy: float
    losses: list[float] = field(default_factory=list)


class TrainingDiverged(FloatingPointError):
    def __init__(self, epoch: int, cause: Exception):
        super().__init__(f"training diverged at epoch {epoch}: {cause}")
        self.epoch = epoch


def train_classifier(net: Network, x: np.ndarray, y: np.ndarray, cfg: TrainConfig) -> list[float]:
    from .losses import classification_loss

    rng = np.random.default_rng(cfg.seed)
    opt = Optimizer(net.params, cfg.optimizer_state())
    x = np.asarray(x, dtype=DTYPE)
    y = np.asarray(y, dtype=np.int64)
    history = []
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(x))
        total = 0.0
        try:
            for start in range(0, len(x), cfg.batch_size):
                idx = order[start : start + cfg.batch_size]
                loss = classification_loss(net(x[idx]), y[idx])
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
        except FloatingPointError as exc:
            raise TrainingDiverged(epoch, exc) from exc
        history.append(total / len(x))
    return history


def train_target(dataset, spec: NetworkSpec, epochs: int, cfg: TrainConfig | None = None) -> TrainResult:
    """Train the victim classifier and report held-out accuracy."""
    cfg = cfg or TrainConfig()
    cfg = TrainConfig(**{**asdict(cfg), "epochs": epochs})
    classes = np.unique(dataset.y_train)
    if len(classes) < 2:
        raise ValueError("training set contains a single class; K >= 2 required")
    if spec.num_classes < int(classes.max()) + 1:
        raise ValueError("labels exceed the network's num_classes")
    net = build_network(spec)
    history = train_classifier(net, dataset.x_train, dataset.y_train, cfg)
    acc = float((net.predict(dataset.x_test) == dataset.y_test).mean())
    log.info("target trained: %d epochs, test accuracy %.4f", epochs, acc)
    return TrainResult(net, acc, history)
