"""Energy-guided distribution alignment for the reverse diffusion process.

Inside the window ``tau_end <= t <= tau_start`` every reverse step becomes

    z_{t-1} = s(z_t, t, eps) - rho_t * grad_{z_t} L_BN - gamma_t * grad_{z_t} L_E

where both losses are evaluated on the decoded clean prediction ``D(z0_hat)``
under the frozen teacher, and the gradients flow back through the decoder and
(by default) the noise predictor.  ``rho_t = rho0 * sqrt(1 - a_t)`` and
``gamma_t = gamma0 * sqrt(1 - a_t)``.
"""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import tensor as T
from .diffusion import DiffusionModel, predict_z0, sample, sampler_step
from .nets import ClassifierModel
from .tensor import Tape, Tensor
from .world import LabeledSet

GRAD_MODES = ("full_backprop", "stop_grad_eps")
TARGETS = ("logit", "prob")
MIXING = ("mixed", "class")


@dataclass
class GuidanceConfig:
    alpha: float = 1.0
    rho0: float = 0.1
    gamma0: float = 0.01
    tau_start: int | None = None  # None -> ceil(0.6 T)
    tau_end: int = 0
    grad_mode: str = "full_backprop"
    batch_size: int = 16
    max_grad_norm: float | None = 10.0
    target: str = "logit"
    allow_early_window: bool = False
    batch_mixing: str = "mixed"

    def resolve_window(self, T_steps: int) -> tuple[int, int]:
        """Concrete ``(tau_start, tau_end)`` for a schedule with ``T_steps`` steps."""
        floor = math.ceil(0.6 * T_steps)
        start = floor if self.tau_start is None else int(self.tau_start)
        if not T_steps >= start >= self.tau_end >= 0:
            raise ValueError(f"need T >= tau_start >= tau_end >= 0, got {T_steps}, {start}, {self.tau_end}")
        if start < floor and not self.allow_early_window:
            raise ValueError(
                f"tau_start={start} < ceil(0.6 T)={floor}; set allow_early_window=True to override"
            )
        return start, self.tau_end

    def validate(self) -> None:
        if not self.alpha > 0:
            raise ValueError("alpha must be positive")
        if self.rho0 < 0 or self.gamma0 < 0:
            raise ValueError("rho0 and gamma0 must be non-negative")
        if self.grad_mode not in GRAD_MODES:
            raise ValueError(f"grad_mode must be one of {GRAD_MODES}")
        if self.target not in TARGETS:
            raise ValueError(f"target must be one of {TARGETS}")
        if self.batch_mixing not in MIXING:
            raise ValueError(f"batch_mixing must be one of {MIXING}")
        if self.batch_size < 2:
            raise ValueError("guidance batch must hold at least 2 samples")

    def to_dict(self) -> dict:
        return asdict(self)


def energy(logits, alpha: float = 1.0) -> Tensor:
    """Per-row energy ``-alpha * log sum_i exp(logits_i / alpha)``."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    if not alpha > 0:
        raise ValueError(f"alpha must be positive, got {alpha}")
    if logits.ndim == 1:
        return -T.logsumexp(logits, alpha)
    return -T.logsumexp(logits, alpha, axis=1)


def energy_loss(logits, y, alpha: float = 1.0, target: str = "logit") -> Tensor:
    """Batch mean of ``f_y * E``; ``f_y`` is the target logit (or its softmax probability)."""
    logits = logits if isinstance(logits, Tensor) else Tensor(logits)
    B, K = logits.shape
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (B,))
    if B and (y.min() < 0 or y.max() >= K):
        raise ValueError(f"target class out of range [0, {K})")
    rows = np.arange(B)
    if target == "logit":
        score = T.getitem(logits, (rows, y))
    elif target == "prob":
        score = T.getitem(T.softmax(logits, axis=1), (rows, y))
    else:
        raise ValueError(f"unknown target {target!r}")
    return T.mean(score * energy(logits, alpha))


def bn_loss(batch_stats, running_stats) -> Tensor:
    """Sum over layers of ``||mu_batch - mu_run||_2 + ||var_batch - var_run||_2``."""
    if len(batch_stats) != len(running_stats):
        raise ValueError(f"{len(batch_stats)} batch layers vs {len(running_stats)} running layers")
    total = Tensor(0.0)
    for (mu, var), (rmu, rvar) in zip(batch_stats, running_stats):
        mu = mu if isinstance(mu, Tensor) else Tensor(mu)
        var = var if isinstance(var, Tensor) else Tensor(var)
        if mu.shape != np.shape(rmu) or var.shape != np.shape(rvar):
            raise ValueError(f"channel mismatch: batch {mu.shape}/{var.shape} vs running {np.shape(rmu)}/{np.shape(rvar)}")
        total = total + T.l2_norm(mu - rmu) + T.l2_norm(var - rvar)
    return total


def scale_at(base: float, t: int, alpha_bar: np.ndarray) -> float:
    return base * math.sqrt(1.0 - alpha_bar[t])


def _clip(g: np.ndarray, max_norm: float | None) -> tuple[np.ndarray, float]:
    norm = float(np.sqrt((g * g).sum()))
    if max_norm is not None and norm > max_norm:
        g = g * (max_norm / norm)
    return g, norm


def guidance_losses(z_t, t: int, model: DiffusionModel, teacher: ClassifierModel, y, cond,
                    cfg: GuidanceConfig) -> dict:
    """Forward pass of the guidance objectives as Tensors (fresh graph each call)."""
    z = z_t if isinstance(z_t, Tensor) else Tensor(z_t)
    eps = model.eps(z, t, cond)
    if cfg.grad_mode == "stop_grad_eps":
        eps = Tensor(eps.data)
    z0 = predict_z0(z, t, eps, model.schedule)
    x_hat = model.decode(z0)
    out = teacher.forward(x_hat, mode="guidance")
    return {
        "eps": eps,
        "bn": bn_loss(out.bn_stats, teacher.running_stats()),
        "energy": energy_loss(out.logits, y, cfg.alpha, cfg.target),
    }


def _grad_of(which: str, z_t: np.ndarray, t, model, teacher, y, cond, cfg) -> tuple[np.ndarray, float, np.ndarray]:
    with Tape() as tape:
        z = Tensor(z_t, requires_grad=True)
        losses = guidance_losses(z, t, model, teacher, y, cond, cfg)
        tape.backward(losses[which])
    return z.grad, float(losses[which].data), losses["eps"].data


def guided_step(z_t: np.ndarray, t: int, model: DiffusionModel, teacher: ClassifierModel, y, cond,
                cfg: GuidanceConfig, rng: np.random.Generator) -> tuple[np.ndarray, dict]:
    """One reverse step with EDA applied when ``t`` lies inside the window.

    Returns ``(z_{t-1}, info)``; ``info`` is empty outside the window.  The
    stochastic draw inside the plain step uses ``rng`` identically in both
    branches, so guided and unguided trajectories share their noise.
    """
    z_t = np.asarray(z_t, dtype=np.float64)
    start, end = cfg.resolve_window(model.schedule.T)
    rho = scale_at(cfg.rho0, t, model.schedule.alpha_bar)
    gamma = scale_at(cfg.gamma0, t, model.schedule.alpha_bar)
    if not (end <= t <= start) or (rho == 0.0 and gamma == 0.0):
        eps = model.eps(z_t, t, cond).data
        return sampler_step(z_t, t, eps, model.schedule, rng), {}

    info = {"t": t, "L_BN": 0.0, "L_E": 0.0, "grad_norm_BN": 0.0, "grad_norm_E": 0.0}
    shift = np.zeros_like(z_t)
    eps = None
    if rho != 0.0:
        g, info["L_BN"], eps = _grad_of("bn", z_t, t, model, teacher, y, cond, cfg)
        g, info["grad_norm_BN"] = _clip(g, cfg.max_grad_norm)
        shift = shift + rho * g
    if gamma != 0.0:
        g, info["L_E"], eps = _grad_of("energy", z_t, t, model, teacher, y, cond, cfg)
        g, info["grad_norm_E"] = _clip(g, cfg.max_grad_norm)
        shift = shift + gamma * g
    z_prev = sampler_step(z_t, t, eps, model.schedule, rng)
    return z_prev - shift, info


@dataclass
class GuidanceHook:
    """Binds teacher, target labels and config into the ``sample(guidance=...)`` protocol.

    ``y`` is a single class or a ``{condition code: class}`` mapping used to
    label mixed-class batches.
    """

    teacher: ClassifierModel
    y: object
    cfg: GuidanceConfig
    trace: list | None = None

    def labels(self, cond) -> np.ndarray:
        if isinstance(self.y, dict):
            return np.array([self.y[int(c)] for c in np.atleast_1d(cond)], dtype=np.int64)
        return np.broadcast_to(np.asarray(self.y, dtype=np.int64), np.shape(np.atleast_1d(cond)))

    def step(self, model, z_t, t, cond, rng):
        z, info = guided_step(z_t, t, model, self.teacher, self.labels(cond), cond, self.cfg, rng)
        if info and self.trace is not None:
            self.trace.append(info)
        return z, info


def write_trace_csv(path, rows: list[dict]) -> None:
    cols = ["batch", "t", "L_BN", "L_E", "grad_norm_BN", "grad_norm_E"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols, extrasaction="ignore", lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(v) if isinstance(v, float) else v) for k, v in r.items()})


@dataclass
class Prompt:
    """One conditioning entry of a synthesis run."""

    code: int
    y: int
    prompt_id: int = 0
    content: int = 0
    style: int = 0


def _sampling_order(prompts: list, per_prompt: int, mixing: str) -> list[np.ndarray]:
    """Prompt indices of every sample, grouped into independently sampled runs.

    ``class`` gives one run per class.  ``mixed`` gives a single run ordered
    so that consecutive samples cycle through the classes.
    """
    by_class: dict[int, list[int]] = {}
    for i, p in enumerate(prompts):
        by_class.setdefault(int(p.y), []).append(i)
    classes = sorted(by_class)
    if mixing == "class":
        return [np.repeat(by_class[y], per_prompt) for y in classes]
    longest = max(len(v) for v in by_class.values())
    order = [by_class[y][j] for _ in range(per_prompt) for j in range(longest)
             for y in classes if j < len(by_class[y])]
    return [np.asarray(order, dtype=np.int64)]


def synthesize_dataset(model: DiffusionModel, teacher: ClassifierModel | None, prompts: list,
                       per_prompt: int, cfg: GuidanceConfig | None, seed: int = 0,
                       trace: list | None = None) -> LabeledSet:
    """Run (optionally guided) sampling for every prompt and decode the results.

    Samples are processed in batches of ``cfg.batch_size``; ``cfg.batch_mixing``
    decides whether a batch holds one class or cycles through all classes.
    ``cfg=None`` disables guidance.  The output is sorted by prompt order, with
    per-sample provenance in ``extras``.
    """
    batch_size = cfg.batch_size if cfg is not None else 16
    mixing = cfg.batch_mixing if cfg is not None else "mixed"
    if cfg is not None:
        cfg.validate()
        if teacher is None:
            raise ValueError("guided synthesis needs a teacher")
    d_x = model.autoencoder.d_x
    if not prompts or per_prompt == 0:
        return LabeledSet.empty(d_x, synthetic=True)
    codes_all = np.array([p.code for p in prompts], dtype=np.int64)
    labels = {}
    for p in prompts:
        if labels.setdefault(int(p.code), int(p.y)) != int(p.y):
            raise ValueError(f"condition code {p.code} is used for two different classes")
    runs = _sampling_order(prompts, per_prompt, mixing)
    idx_parts, x_parts, seed_parts, bn_parts, e_parts = [], [], [], [], []
    offset = 0
    for order in runs:
        hook = None
        if cfg is not None:
            hook = GuidanceHook(teacher, labels, cfg, trace=[] if trace is not None else None)
        res = sample(model, codes_all[order], len(order), seed=seed, guidance=hook,
                     batch_size=batch_size, batch_offset=offset)
        batch_idx = np.arange(len(order)) // batch_size
        idx_parts.append(order)
        x_parts.append(res.x)
        seed_parts.append(offset + batch_idx)
        bn_parts.append(np.array([i.get("L_BN", np.nan) for i in res.batch_info])[batch_idx])
        e_parts.append(np.array([i.get("L_E", np.nan) for i in res.batch_info])[batch_idx])
        if trace is not None and hook is not None:
            n_batches = len(res.batch_info)
            steps = len(hook.trace) // max(n_batches, 1)
            for i, row in enumerate(hook.trace):
                trace.append({"batch": offset + i // max(steps, 1), **row})
        offset += -(-len(order) // batch_size)
    which = np.concatenate(idx_parts)
    perm = np.argsort(which, kind="stable")
    which = which[perm]
    chosen = [prompts[i] for i in which]
    out = LabeledSet(
        np.concatenate(x_parts)[perm],
        np.array([p.y for p in chosen]), np.array([p.content for p in chosen]),
        np.array([p.style for p in chosen]), np.zeros(len(which), dtype=bool),
        synthetic=True,
        info={"seed": seed, "per_prompt": per_prompt,
              "guidance": cfg.to_dict() if cfg is not None else None},
        extras={"prompt_id": np.array([p.prompt_id for p in chosen]),
                "batch_seed": np.concatenate(seed_parts)[perm],
                "final_L_BN": np.concatenate(bn_parts)[perm],
                "final_L_E": np.concatenate(e_parts)[perm]},
    )
    return out
