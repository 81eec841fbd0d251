"""Classifiers with batch norm, the latent autoencoder, and the conditional noise predictor."""

from __future__ import annotations

import logging
import warnings
from dataclasses import asdict, dataclass, field
from typing import NamedTuple

import numpy as np

from . import checkpoint
from . import tensor as T
from .conditions import WorldBinding
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)

MODES = ("train", "inference", "guidance")


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, loss: float):
        super().__init__(f"training diverged at epoch {epoch} (loss={loss!r})")
        self.epoch = epoch
        self.loss = loss


@dataclass
class TrainConfig:
    epochs: int = 30
    batch_size: int = 128
    lr: float = 0.05
    momentum: float = 0.9
    weight_decay: float = 0.0
    clip_norm: float | None = 5.0
    seed: int = 0
    record_bn_history: bool = False


ACTIVATIONS = {"relu": T.relu, "silu": T.silu, "tanh": T.tanh, "linear": lambda a: a}


def _param(rng: np.random.Generator, shape, scale: float) -> Tensor:
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def _linear_init(rng, d_in: int, d_out: int) -> tuple[Tensor, Tensor]:
    return _param(rng, (d_in, d_out), np.sqrt(2.0 / d_in)), Tensor(np.zeros(d_out), requires_grad=True)


class SGD:
    """Stochastic gradient descent with heavy-ball momentum and optional global-norm clipping."""

    def __init__(self, params, lr: float, momentum: float = 0.9, weight_decay: float = 0.0,
                 clip_norm: float | None = None):
        self.params = list(params)
        self.lr = lr
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.clip_norm = clip_norm
        self._velocity = [np.zeros_like(p.data) for p in self.params]

    def step(self, lr: float | None = None) -> float:
        lr = self.lr if lr is None else lr
        grads = [p.grad if p.grad is not None else np.zeros_like(p.data) for p in self.params]
        norm = float(np.sqrt(sum(float((g * g).sum()) for g in grads)))
        scale = 1.0
        if self.clip_norm is not None and norm > self.clip_norm:
            scale = self.clip_norm / norm
        for p, g, v in zip(self.params, grads, self._velocity):
            g = g * scale
            if self.weight_decay:
                g = g + self.weight_decay * p.data
            v *= self.momentum
            v += g
            p.data = p.data - lr * v
            p.grad = None
        return norm


def cosine_lr(base: float, step: int, total: int) -> float:
    return 0.5 * base * (1.0 + np.cos(np.pi * min(step, total) / max(total, 1)))


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


# ----------------------------------------------------------------------------- classifier


class ForwardResult(NamedTuple):
    logits: Tensor
    features: Tensor
    bn_stats: list  # [(mean, var)] per BN layer; Tensors in guidance mode, arrays in train mode


@dataclass
class BNLayer:
    weight: Tensor
    bias: Tensor
    gamma: Tensor
    beta: Tensor
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1
    eps: float = 1e-5


class ClassifierModel:
    """MLP classifier ``d_in -> hidden (Linear+BN+act) ... -> K`` logits."""

    model_type = "classifier"

    def __init__(self, d_in: int, hidden: tuple[int, ...], n_classes: int, seed: int = 0,
                 activation: str = "relu", bn_momentum: float = 0.1):
        rng = np.random.default_rng([seed, 11])
        self.d_in = d_in
        self.hidden = tuple(int(h) for h in hidden)
        self.n_classes = n_classes
        self.activation = activation
        self.seed = seed
        self.trained = False
        self.train_config: dict = {}
        self.layers: list[BNLayer] = []
        prev = d_in
        for h in self.hidden:
            w, b = _linear_init(rng, prev, h)
            self.layers.append(BNLayer(
                w, b, Tensor(np.ones(h), requires_grad=True), Tensor(np.zeros(h), requires_grad=True),
                np.zeros(h), np.ones(h), momentum=bn_momentum,
            ))
            prev = h
        self.head_w, self.head_b = _linear_init(rng, prev, n_classes)
        self.head_w.data *= 0.5

    @property
    def feature_dim(self) -> int:
        return self.hidden[-1] if self.hidden else self.d_in

    def parameters(self) -> list[Tensor]:
        ps = []
        for layer in self.layers:
            ps += [layer.weight, layer.bias, layer.gamma, layer.beta]
        return ps + [self.head_w, self.head_b]

    def running_stats(self) -> list[tuple[np.ndarray, np.ndarray]]:
        return [(layer.running_mean, layer.running_var) for layer in self.layers]

    def forward(self, x, mode: str = "inference") -> ForwardResult:
        if mode not in MODES:
            raise ValueError(f"unknown mode {mode!r}; expected one of {MODES}")
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d_in:
            raise ValueError(f"classifier expects B x {self.d_in} input, got {x.shape}")
        if mode == "guidance" and x.shape[0] < 2:
            raise ValueError("guidance mode needs a batch of at least 2 samples")
        act = ACTIVATIONS[self.activation]
        h = x
        stats = []
        for layer in self.layers:
            pre = T.matmul(h, layer.weight) + layer.bias
            if mode == "train":
                mu, var = T.batchnorm_stats(pre)
                stats.append((mu.data.copy(), var.data.copy()))
                normed = (pre - mu) / T.sqrt(var + layer.eps)
            else:
                if mode == "guidance":
                    stats.append(T.batchnorm_stats(pre))
                normed = (pre - layer.running_mean) / np.sqrt(layer.running_var + layer.eps)
            h = act(normed * layer.gamma + layer.beta)
        logits = T.matmul(h, self.head_w) + self.head_b
        return ForwardResult(logits, h, stats)

    def logits(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size]).logits.data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.n_classes))

    def features(self, x: np.ndarray, batch_size: int = 4096) -> np.ndarray:
        out = [self.forward(x[i : i + batch_size]).features.data for i in range(0, len(x), batch_size)]
        return np.concatenate(out) if out else np.zeros((0, self.feature_dim))

    def predict(self, x: np.ndarray) -> np.ndarray:
        return self.logits(x).argmax(axis=1)

    # persistence
    def state(self) -> tuple[dict, dict]:
        meta = {
            "model_type": self.model_type, "d_in": self.d_in, "hidden": list(self.hidden),
            "n_classes": self.n_classes, "activation": self.activation, "seed": self.seed,
            "trained": self.trained, "train_config": self.train_config,
            "bn_momentum": [layer.momentum for layer in self.layers],
        }
        arrays = {}
        for i, layer in enumerate(self.layers):
            arrays[f"l{i}.weight"] = layer.weight.data
            arrays[f"l{i}.bias"] = layer.bias.data
            arrays[f"l{i}.gamma"] = layer.gamma.data
            arrays[f"l{i}.beta"] = layer.beta.data
            arrays[f"l{i}.running_mean"] = layer.running_mean
            arrays[f"l{i}.running_var"] = layer.running_var
        arrays["head.weight"] = self.head_w.data
        arrays["head.bias"] = self.head_b.data
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "ClassifierModel":
        m = cls(meta["d_in"], tuple(meta["hidden"]), meta["n_classes"], seed=meta["seed"],
                activation=meta["activation"])
        for i, layer in enumerate(m.layers):
            layer.weight.data = arrays[f"l{i}.weight"]
            layer.bias.data = arrays[f"l{i}.bias"]
            layer.gamma.data = arrays[f"l{i}.gamma"]
            layer.beta.data = arrays[f"l{i}.beta"]
            layer.running_mean = arrays[f"l{i}.running_mean"]
            layer.running_var = arrays[f"l{i}.running_var"]
            layer.momentum = meta["bn_momentum"][i]
        m.head_w.data = arrays["head.weight"]
        m.head_b.data = arrays["head.bias"]
        m.trained = meta["trained"]
        m.train_config = meta.get("train_config", {})
        return m


def teacher_model(d_in: int, n_classes: int, seed: int = 0) -> ClassifierModel:
    return ClassifierModel(d_in, (128, 64), n_classes, seed=seed)


def student_model(d_in: int, n_classes: int, seed: int = 0) -> ClassifierModel:
    return ClassifierModel(d_in, (32,), n_classes, seed=seed)


def cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    logp = T.log_softmax(logits, axis=1)
    picked = T.getitem(logp, (np.arange(len(labels)), labels))
    return -T.mean(picked)


@dataclass
class TrainHistory:
    losses: list = field(default_factory=list)
    bn_history: list = field(default_factory=list)  # per step: [(mean, var)] per layer


def update_running_stats(model: ClassifierModel, stats) -> None:
    for layer, (mu, var) in zip(model.layers, stats):
        m = layer.momentum
        layer.running_mean = (1.0 - m) * layer.running_mean + m * mu
        layer.running_var = (1.0 - m) * layer.running_var + m * var


def train_classifier(data, cfg: TrainConfig | None = None, model: ClassifierModel | None = None,
                     hidden: tuple[int, ...] = (128, 64), soft_targets=None):
    """Fit a classifier by cross-entropy with SGD+momentum.

    ``data`` is a :class:`~dfkdlab.world.LabeledSet`.  Returns ``(model, history)``.
    Zero epochs returns the initial model untouched.
    """
    cfg = cfg or TrainConfig()
    x, y = data.x, data.y
    if len(x) == 0:
        raise ValueError("cannot train on an empty set")
    if model is None:
        model = ClassifierModel(x.shape[1], hidden, int(y.max()) + 1, seed=cfg.seed)
    if y.min() < 0 or y.max() >= model.n_classes:
        raise ValueError(f"labels must lie in [0, {model.n_classes})")
    history = TrainHistory()
    if cfg.epochs == 0:
        return model, history
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    rng = np.random.default_rng([cfg.seed, 12])
    for epoch in range(cfg.epochs):
        total, count = 0.0, 0
        for idx in _batches(len(x), cfg.batch_size, rng):
            if len(idx) < 2:
                continue
            with Tape() as tape:
                out = model.forward(x[idx], mode="train")
                loss = cross_entropy(out.logits, y[idx])
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, float(loss.data))
            opt.step()
            update_running_stats(model, out.bn_stats)
            if cfg.record_bn_history:
                history.bn_history.append(out.bn_stats)
            total += float(loss.data) * len(idx)
            count += len(idx)
        history.losses.append(total / max(count, 1))
    model.trained = True
    model.train_config = asdict(cfg)
    return model, history


# ----------------------------------------------------------------------------- autoencoder


class AutoencoderModel:
    """Encoder ``d_x -> d_z`` and decoder ``d_z -> d_x``.

    Latents are reported standardized: ``encode`` subtracts ``latent_shift``
    and divides by ``latent_scale`` (fitted after training) so the diffusion
    model sees roughly unit-variance coordinates; ``decode`` undoes it.
    """

    model_type = "autoencoder"

    def __init__(self, d_x: int, d_z: int, seed: int = 0, activation: str = "linear"):
        rng = np.random.default_rng([seed, 21])
        self.d_x, self.d_z, self.seed, self.activation = d_x, d_z, seed, activation
        self.enc_w, self.enc_b = _param(rng, (d_x, d_z), 1.0 / np.sqrt(d_x)), Tensor(np.zeros(d_z), requires_grad=True)
        self.dec_w, self.dec_b = _param(rng, (d_z, d_x), 1.0 / np.sqrt(d_z)), Tensor(np.zeros(d_x), requires_grad=True)
        self.latent_shift = np.zeros(d_z)
        self.latent_scale = 1.0
        self.meta: dict = {"trained": False}

    def parameters(self) -> list[Tensor]:
        return [self.enc_w, self.enc_b, self.dec_w, self.dec_b]

    def _encode_raw(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 2 or x.shape[1] != self.d_x:
            raise ValueError(f"encoder expects B x {self.d_x} input, got {x.shape}")
        return ACTIVATIONS[self.activation](T.matmul(x, self.enc_w) + self.enc_b)

    def _decode_raw(self, h: Tensor) -> Tensor:
        return T.matmul(h, self.dec_w) + self.dec_b

    def encode(self, x) -> Tensor:
        return (self._encode_raw(x) - self.latent_shift) / self.latent_scale

    def decode(self, z) -> Tensor:
        z = z if isinstance(z, Tensor) else Tensor(z)
        if z.ndim != 2 or z.shape[1] != self.d_z:
            raise ValueError(f"decoder expects B x {self.d_z} latents, got {z.shape}")
        return self._decode_raw(z * self.latent_scale + self.latent_shift)

    def reconstruct(self, x: np.ndarray) -> np.ndarray:
        return self._decode_raw(self._encode_raw(x)).data

    def reconstruction_mse(self, x: np.ndarray) -> float:
        return float(((self.reconstruct(x) - x) ** 2).mean())

    def state(self) -> tuple[dict, dict]:
        meta = {"model_type": self.model_type, "d_x": self.d_x, "d_z": self.d_z,
                "seed": self.seed, "activation": self.activation, "latent_scale": self.latent_scale,
                "meta": self.meta}
        arrays = {"enc.weight": self.enc_w.data, "enc.bias": self.enc_b.data,
                  "dec.weight": self.dec_w.data, "dec.bias": self.dec_b.data,
                  "latent_shift": self.latent_shift}
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "AutoencoderModel":
        m = cls(meta["d_x"], meta["d_z"], seed=meta["seed"], activation=meta["activation"])
        m.enc_w.data, m.enc_b.data = arrays["enc.weight"], arrays["enc.bias"]
        m.dec_w.data, m.dec_b.data = arrays["dec.weight"], arrays["dec.bias"]
        m.latent_shift = arrays["latent_shift"]
        m.latent_scale = meta["latent_scale"]
        m.meta = meta["meta"]
        return m


def train_autoencoder(x: np.ndarray, cfg: TrainConfig | None = None, d_z: int = 16,
                      activation: str = "linear", holdout: float = 0.1,
                      threshold_factor: float = 0.05) -> AutoencoderModel:
    """Fit by mean-squared reconstruction error and report held-out quality in ``model.meta``.

    Missing the threshold ``threshold_factor * Var(x)`` issues a warning and
    sets ``meta["passed"] = False``; callers decide whether that is fatal.
    """
    cfg = cfg or TrainConfig(epochs=60, lr=0.01, batch_size=128)
    x = np.asarray(x, dtype=np.float64)
    rng = np.random.default_rng([cfg.seed, 22])
    order = rng.permutation(len(x))
    n_hold = max(1, int(round(holdout * len(x))))
    held, train = x[order[:n_hold]], x[order[n_hold:]]
    model = AutoencoderModel(x.shape[1], d_z, seed=cfg.seed, activation=activation)
    opt = SGD(model.parameters(), cfg.lr, cfg.momentum, cfg.weight_decay, cfg.clip_norm)
    losses = []
    for epoch in range(cfg.epochs):
        total = 0.0
        for idx in _batches(len(train), cfg.batch_size, rng):
            xb = Tensor(train[idx])
            with Tape() as tape:
                diff = model._decode_raw(model._encode_raw(xb)) - xb
                loss = T.mean(T.square(diff))
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, float(loss.data))
            opt.step()
            total += float(loss.data) * len(idx)
        losses.append(total / len(train))
    codes = model._encode_raw(train).data
    model.latent_shift = codes.mean(axis=0)
    model.latent_scale = float(np.sqrt(codes.var(axis=0).mean())) or 1.0
    input_var = float(held.var(axis=0).mean())
    mse = model.reconstruction_mse(held)
    threshold = threshold_factor * input_var
    model.meta = {
        "trained": cfg.epochs > 0, "train_config": asdict(cfg), "losses": losses,
        "heldout_mse": mse, "input_var": input_var, "threshold": threshold, "passed": mse <= threshold,
    }
    if mse > threshold:
        warnings.warn(
            f"autoencoder held-out MSE {mse:.4g} exceeds threshold {threshold:.4g} "
            f"({threshold_factor} x input variance)", RuntimeWarning, stacklevel=2,
        )
    return model


# ----------------------------------------------------------------------------- noise predictor


def timestep_embedding(t, dim: int = 16, max_period: float = 10000.0, t_scale: float = 1.0) -> np.ndarray:
    t = np.atleast_1d(np.asarray(t, dtype=np.float64)) * t_scale
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = t[:, None] * freqs[None, :]
    return np.concatenate([np.sin(args), np.cos(args)], axis=1)


class NoisePredictorModel:
    """``eps(z_t, t, c)``: MLP on ``[z_t, time embedding, condition embedding]``.

    A condition code is embedded as the sum of three learned rows: one for
    its class, one for its (class, content) pair and one for its style.
    Factors dropped by the code (class-only / unconditional) use dedicated
    null rows, so styles share statistics across all classes.
    """

    model_type = "noise_predictor"

    def __init__(self, d_z: int, binding: WorldBinding, width: int = 128, depth: int = 3,
                 time_dim: int = 16, cond_dim: int = 16, seed: int = 0, t_scale: float = 10.0):
        rng = np.random.default_rng([seed, 31])
        self.d_z, self.binding, self.width, self.depth = d_z, binding, width, depth
        self.time_dim, self.cond_dim, self.seed = time_dim, cond_dim, seed
        self.t_scale = t_scale  # maps step indices onto a 0..1000-like range
        K, nc, ns = binding.K, binding.n_content, binding.n_style
        self.class_table = _param(rng, (K + 1, cond_dim), 1.0)
        self.content_table = _param(rng, (K * nc + 1, cond_dim), 1.0)
        self.style_table = _param(rng, (ns + 1, cond_dim), 1.0)
        rows = np.array([self._factor_rows(c) for c in range(binding.n_codes)], dtype=np.int64)
        self._code_rows = rows.reshape(-1, 3)
        self.trunk = []
        prev = d_z + time_dim + cond_dim
        for _ in range(depth):
            self.trunk.append(_linear_init(rng, prev, width))
            prev = width
        self.out_w, self.out_b = _linear_init(rng, prev, d_z)
        self.out_w.data *= 0.1

    @property
    def n_codes(self) -> int:
        return self.binding.n_codes

    def _factor_rows(self, code: int) -> tuple[int, int, int]:
        b = self.binding
        k, c, s = b.decode(code)
        return (
            b.K if k is None else k,
            b.K * b.n_content if c is None else k * b.n_content + c,
            b.n_style if s is None else s,
        )

    def parameters(self) -> list[Tensor]:
        ps = [self.class_table, self.content_table, self.style_table]
        for w, b in self.trunk:
            ps += [w, b]
        return ps + [self.out_w, self.out_b]

    def condition_embedding(self, cond: np.ndarray) -> Tensor:
        rows = self._code_rows[cond]
        return (T.embedding(self.class_table, rows[:, 0])
                + T.embedding(self.content_table, rows[:, 1])
                + T.embedding(self.style_table, rows[:, 2]))

    def forward(self, z_t, t, cond) -> Tensor:
        z_t = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
        if z_t.ndim != 2 or z_t.shape[1] != self.d_z:
            raise ValueError(f"noise predictor expects B x {self.d_z} latents, got {z_t.shape}")
        B = z_t.shape[0]
        cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (B,))
        if B and (cond.min() < 0 or cond.max() >= self.n_codes):
            bad = cond[(cond < 0) | (cond >= self.n_codes)][0]
            raise KeyError(f"unknown condition code {int(bad)} (model has {self.n_codes} codes)")
        temb = timestep_embedding(np.broadcast_to(np.asarray(t), (B,)), self.time_dim, t_scale=self.t_scale)
        h = T.concat([z_t, Tensor(temb), self.condition_embedding(cond)], axis=1)
        for w, b in self.trunk:
            h = T.silu(T.matmul(h, w) + b)
        return T.matmul(h, self.out_w) + self.out_b

    def state(self) -> tuple[dict, dict]:
        meta = {"model_type": self.model_type, "d_z": self.d_z, "binding": self.binding.to_dict(),
                "width": self.width, "depth": self.depth, "time_dim": self.time_dim,
                "cond_dim": self.cond_dim, "seed": self.seed, "t_scale": self.t_scale}
        arrays = {"class_table": self.class_table.data, "content_table": self.content_table.data,
                  "style_table": self.style_table.data}
        for i, (w, b) in enumerate(self.trunk):
            arrays[f"trunk{i}.weight"] = w.data
            arrays[f"trunk{i}.bias"] = b.data
        arrays["out.weight"] = self.out_w.data
        arrays["out.bias"] = self.out_b.data
        return meta, arrays

    @classmethod
    def from_state(cls, meta: dict, arrays: dict) -> "NoisePredictorModel":
        m = cls(meta["d_z"], WorldBinding(**meta["binding"]), meta["width"], meta["depth"],
                meta["time_dim"], meta["cond_dim"], meta["seed"], meta["t_scale"])
        m.class_table.data = arrays["class_table"]
        m.content_table.data = arrays["content_table"]
        m.style_table.data = arrays["style_table"]
        for i, (w, b) in enumerate(m.trunk):
            w.data, b.data = arrays[f"trunk{i}.weight"], arrays[f"trunk{i}.bias"]
        m.out_w.data, m.out_b.data = arrays["out.weight"], arrays["out.bias"]
        return m


# ----------------------------------------------------------------------------- persistence

_REGISTRY = {cls.model_type: cls for cls in (ClassifierModel, AutoencoderModel, NoisePredictorModel)}


def register_model(cls) -> None:
    _REGISTRY[cls.model_type] = cls


def save_model(path, model, extra: dict | None = None) -> str:
    meta, arrays = model.state()
    if extra:
        meta = {**meta, "extra": extra}
    return checkpoint.save(path, meta, arrays)


def load_model(path):
    meta, arrays = checkpoint.load(path)
    cls = _REGISTRY.get(meta.get("model_type"))
    if cls is None:
        raise checkpoint.CheckpointError(f"unknown model_type {meta.get('model_type')!r} in {path}")
    return cls.from_state(meta, arrays)
