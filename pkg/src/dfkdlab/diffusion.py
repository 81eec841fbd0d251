"""Latent diffusion: schedule, forward corruption, clean-point prediction and ancestral sampling.

``alpha_bar[t]`` is the cumulative signal coefficient with ``alpha_bar[0] == 1``.
One reverse step draws

    z_{t-1} ~ N(sqrt(a_{t-1}) z0_hat + sqrt(1 - a_{t-1} - sigma_t^2) eps, sigma_t^2 I),
    sigma_t^2 = eta^2 (1 - a_{t-1}) / (1 - a_t) * (1 - a_t / a_{t-1}).
"""

from __future__ import annotations

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import checkpoint
from . import tensor as T
from .conditions import WorldBinding
from .nets import SGD, cosine_lr, AutoencoderModel, NoisePredictorModel, TrainingDivergedError, _batches
from .tensor import Tape, Tensor

log = logging.getLogger(__name__)


class ScheduleError(ValueError):
    pass


@dataclass
class NoiseSchedule:
    alpha_bar: np.ndarray  # length T + 1
    eta: float = 1.0

    def __post_init__(self):
        self.alpha_bar = np.asarray(self.alpha_bar, dtype=np.float64)
        if not 0.0 <= self.eta <= 1.0:
            raise ScheduleError(f"eta must lie in [0, 1], got {self.eta}")
        if self.alpha_bar.ndim != 1 or len(self.alpha_bar) < 2:
            raise ScheduleError("alpha_bar needs at least two entries (t = 0 and t = 1)")
        if self.alpha_bar[0] != 1.0:
            raise ScheduleError("alpha_bar[0] must equal 1")
        a = self.alpha_bar
        if np.any(a[1:] <= 0.0) or np.any(np.diff(a) >= 0.0):
            raise ScheduleError("alpha_bar must be strictly decreasing and positive")

    @classmethod
    def linear(cls, T: int = 100, eta: float = 1.0, beta_start: float | None = None,
               beta_end: float | None = None) -> "NoiseSchedule":
        """Linear betas rescaled by ``1000 / T`` (capped below 1)."""
        if T < 1:
            raise ScheduleError("T must be at least 1")
        b0 = beta_start if beta_start is not None else 1e-4 * 1000.0 / T
        b1 = beta_end if beta_end is not None else 0.02 * 1000.0 / T
        betas = np.minimum(np.linspace(b0, b1, T), 0.999)
        return cls(np.concatenate([[1.0], np.cumprod(1.0 - betas)]), eta)

    @property
    def T(self) -> int:
        return len(self.alpha_bar) - 1

    def check_t(self, t: int) -> None:
        if not 1 <= t <= self.T:
            raise ScheduleError(f"t={t} outside [1, {self.T}]")

    def sigma2(self, t: int) -> float:
        self.check_t(t)
        a_t, a_prev = self.alpha_bar[t], self.alpha_bar[t - 1]
        return float(self.eta ** 2 * (1.0 - a_prev) / (1.0 - a_t) * (1.0 - a_t / a_prev))

    def to_dict(self) -> dict:
        return {"T": self.T, "eta": self.eta}


def forward_diffuse(z0, t: int, noise, schedule: NoiseSchedule):
    schedule.check_t(t)
    z0, noise = np.asarray(z0, dtype=np.float64), np.asarray(noise, dtype=np.float64)
    if z0.shape != noise.shape:
        raise ValueError(f"noise shape {noise.shape} != z0 shape {z0.shape}")
    a = schedule.alpha_bar[t]
    return np.sqrt(a) * z0 + np.sqrt(1.0 - a) * noise


def predict_z0(z_t, t: int, eps_pred, schedule: NoiseSchedule):
    """Clean latent implied by ``eps_pred``; differentiable when given Tensors."""
    schedule.check_t(t)
    a = schedule.alpha_bar[t]
    if a == 0.0:
        raise ScheduleError("alpha_bar[t] == 0; cannot invert the corruption")
    if np.shape(z_t) != np.shape(eps_pred.data if isinstance(eps_pred, Tensor) else eps_pred):
        raise ValueError("z_t and eps_pred shapes differ")
    if isinstance(z_t, Tensor) or isinstance(eps_pred, Tensor):
        return (z_t - eps_pred * np.sqrt(1.0 - a)) * (1.0 / np.sqrt(a))
    return (np.asarray(z_t) - np.sqrt(1.0 - a) * np.asarray(eps_pred)) / np.sqrt(a)


def step_mean(z_t: np.ndarray, t: int, eps_pred: np.ndarray, schedule: NoiseSchedule) -> tuple[np.ndarray, float]:
    a_prev = schedule.alpha_bar[t - 1]
    s2 = schedule.sigma2(t)
    dir_coef = 1.0 - a_prev - s2
    if dir_coef < 0.0:
        raise ScheduleError(f"1 - alpha_bar[t-1] - sigma_t^2 = {dir_coef} < 0 at t={t}")
    z0 = predict_z0(z_t, t, eps_pred, schedule)
    return np.sqrt(a_prev) * z0 + np.sqrt(dir_coef) * eps_pred, s2


def sampler_step(z_t, t: int, eps_pred, schedule: NoiseSchedule, rng: np.random.Generator):
    """One stochastic reverse step.  Always consumes one normal draw per entry."""
    z_t, eps_pred = np.asarray(z_t, dtype=np.float64), np.asarray(eps_pred, dtype=np.float64)
    mu, s2 = step_mean(z_t, t, eps_pred, schedule)
    noise = rng.standard_normal(z_t.shape)
    if s2 == 0.0:
        return mu
    return mu + np.sqrt(s2) * noise


# ----------------------------------------------------------------------------- model


@dataclass
class DiffusionTrainConfig:
    epochs: int = 400
    batch_size: int = 256
    lr: float = 0.1
    momentum: float = 0.9
    clip_norm: float | None = 10.0
    cond_dropout: float = 0.1  # share of draws whose content/style (or everything) is dropped
    seed: int = 0
    width: int = 128
    depth: int = 3


@dataclass
class DiffusionModel:
    predictor: NoisePredictorModel
    schedule: NoiseSchedule
    binding: WorldBinding
    autoencoder: AutoencoderModel | None = None
    history: dict = field(default_factory=dict)

    @property
    def d_z(self) -> int:
        return self.predictor.d_z

    def eps(self, z_t, t: int, cond) -> Tensor:
        return self.predictor.forward(z_t, t, cond)

    def decode(self, z) -> Tensor:
        if self.autoencoder is None:
            raise ValueError("diffusion model has no decoder attached")
        return self.autoencoder.decode(z)

    def save(self, path) -> str:
        meta, arrays = self.predictor.state()
        meta = {"model_type": "diffusion", "predictor": meta, "schedule": self.schedule.to_dict(),
                "alpha_bar_len": len(self.schedule.alpha_bar), "binding": self.binding.to_dict(),
                "history": self.history}
        arrays = {**arrays, "alpha_bar": self.schedule.alpha_bar}
        return checkpoint.save(path, meta, arrays)

    @classmethod
    def load(cls, path, autoencoder: AutoencoderModel | None = None) -> "DiffusionModel":
        meta, arrays = checkpoint.load(path)
        if meta.get("model_type") != "diffusion":
            raise checkpoint.CheckpointError(f"{path} is not a diffusion checkpoint")
        pred = NoisePredictorModel.from_state(meta["predictor"], arrays)
        sched = NoiseSchedule(arrays["alpha_bar"], meta["schedule"]["eta"])
        return cls(pred, sched, WorldBinding(**meta["binding"]), autoencoder, meta["history"])


def training_conditions(data, binding: WorldBinding, dropout: float, rng: np.random.Generator) -> np.ndarray:
    """Condition codes from sample provenance with dropout to class-only / unconditional."""
    codes = binding.combo_code(data.y, data.content, data.style)
    u = rng.random(len(codes))
    class_only = u < dropout / 2
    uncond = (u >= dropout / 2) & (u < dropout)
    codes = np.where(class_only, binding.class_code(data.y), codes)
    return np.where(uncond, binding.uncond_code, codes)


def train_diffusion(data, autoencoder: AutoencoderModel, binding: WorldBinding,
                    cfg: DiffusionTrainConfig | None = None,
                    schedule: NoiseSchedule | None = None) -> DiffusionModel:
    """Fit the noise predictor by eps-MSE on encoded latents of ``data``."""
    cfg = cfg or DiffusionTrainConfig()
    schedule = schedule or NoiseSchedule.linear()
    if not autoencoder.meta.get("trained", False):
        raise ValueError("autoencoder must be trained before the diffusion model")
    z_all = autoencoder.encode(data.x).data
    rng = np.random.default_rng([cfg.seed, 41])
    pred = NoisePredictorModel(autoencoder.d_z, binding, cfg.width, cfg.depth, seed=cfg.seed,
                              t_scale=1000.0 / schedule.T)
    opt = SGD(pred.parameters(), cfg.lr, cfg.momentum, clip_norm=cfg.clip_norm)
    sqrt_a = np.sqrt(schedule.alpha_bar)
    sqrt_1ma = np.sqrt(1.0 - schedule.alpha_bar)
    losses = []
    steps_per_epoch = -(-len(z_all) // cfg.batch_size)
    total_steps, step = cfg.epochs * steps_per_epoch, 0
    for epoch in range(cfg.epochs):
        codes = training_conditions(data, binding, cfg.cond_dropout, rng)
        total = 0.0
        for idx in _batches(len(z_all), cfg.batch_size, rng):
            z0 = z_all[idx]
            t = rng.integers(1, schedule.T + 1, size=len(idx))
            noise = rng.standard_normal(z0.shape)
            z_t = sqrt_a[t, None] * z0 + sqrt_1ma[t, None] * noise
            with Tape() as tape:
                err = pred.forward(Tensor(z_t), t, codes[idx]) - noise
                loss = T.mean(T.square(err))
                tape.backward(loss)
            if not np.isfinite(loss.data):
                raise TrainingDivergedError(epoch, float(loss.data))
            opt.step(cosine_lr(cfg.lr, step, total_steps))
            step += 1
            total += float(loss.data) * len(idx)
        losses.append(total / len(z_all))
    history = {"losses": losses, "train_config": asdict(cfg)}
    return DiffusionModel(pred, schedule, binding, autoencoder, history)


# ----------------------------------------------------------------------------- sampling


def plain_step(model: DiffusionModel, z_t: np.ndarray, t: int, cond, rng) -> np.ndarray:
    eps = model.eps(z_t, t, cond).data
    return sampler_step(z_t, t, eps, model.schedule, rng)


@dataclass
class SampleResult:
    z0: np.ndarray
    x: np.ndarray | None
    batch_info: list


def _run_batch(model: DiffusionModel, cond: np.ndarray, seed: int, index: int, guidance) -> tuple:
    rng = np.random.default_rng([seed, index])
    z = rng.standard_normal((len(cond), model.d_z))
    info: dict = {}
    for t in range(model.schedule.T, 0, -1):
        if guidance is None:
            z = plain_step(model, z, t, cond, rng)
        else:
            z, step_info = guidance.step(model, z, t, cond, rng)
            if step_info:
                info = step_info
    return z, info


def sample(model: DiffusionModel, cond, n: int, seed: int = 0, guidance=None,
           batch_size: int = 16, decode: bool = True, workers: int = 1,
           batch_offset: int = 0) -> SampleResult:
    """Draw ``n`` latents by iterating the reverse process from ``t = T`` to ``1``.

    ``cond`` is a single code or one code per sample.  Sample ``i`` belongs to
    batch ``i // batch_size``, whose noise comes from the substream
    ``(seed, batch_offset + batch index)``, so results do not depend on
    ``workers``.  ``guidance`` is an object with a ``step(model, z_t, t, cond,
    rng) -> (z_{t-1}, info)`` method.
    """
    cond = np.broadcast_to(np.asarray(cond, dtype=np.int64), (n,)).copy()
    if n == 0:
        x = np.zeros((0, model.autoencoder.d_x)) if decode and model.autoencoder else None
        return SampleResult(np.zeros((0, model.d_z)), x, [])
    chunks = [(i, cond[s : s + batch_size]) for i, s in enumerate(range(0, n, batch_size))]
    run = lambda item: _run_batch(model, item[1], seed, batch_offset + item[0], guidance)  # noqa: E731
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(run, chunks))
    else:
        results = [run(c) for c in chunks]
    z0 = np.concatenate([r[0] for r in results])
    x = model.decode(z0).data if decode else None
    return SampleResult(z0, x, [r[1] for r in results])
