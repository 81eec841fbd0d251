"""Synthetic factor-structured data: the in-distribution world and its broad prior.

Each class owns ``n_content`` content modes that are rendered in ``n_style``
styles.  A style is an orthogonal transform plus a bias acting on a low
dimensional factor space, which is embedded isometrically into ``d_x``
ambient dimensions.  Distractor contents (``ood_extra`` per class) exist only
in the broad prior corpus used to pretrain the diffusion model.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field
from itertools import combinations

import numpy as np
from scipy.linalg import expm
from scipy.stats import special_ortho_group

from . import checkpoint

SPLITS = ("id_train", "id_test", "broad_prior")
_SPLIT_CODES = {name: i + 1 for i, name in enumerate(SPLITS)}

# Must stay in sync with the bundled lexicon (dfkdlab/data/lexicon.json).
DEFAULT_CLASS_NAMES = (
    "crane", "papillon", "jaguar", "mouse", "bass",
    "bat", "seal", "mole", "kite", "bow",
    "tank", "chip", "palm", "pitcher", "organ",
    "drum", "match", "spring", "ruler", "trunk",
)


@dataclass(frozen=True)
class WorldSpec:
    K: int = 10
    n_content: int = 5
    n_style: int = 4
    d_x: int = 64
    ood_extra: int = 3
    seed: int = 0
    factor_dim: int = 8
    noise_std: float = 0.5
    ambient_std: float = 0.05
    mean_scale: float = 2.0
    class_scale: float = 2.0  # spread of per-class centres; 0 places every mode independently
    style_angle: float | None = 0.3  # largest plane rotation of a style; None draws uniformly from SO(f)
    style_bias_scale: float = 1.0
    min_separation: float = 4.0  # in units of noise_std
    broad_id_fraction: float = 0.7
    id_mask: tuple | None = None  # nested K x n_content x n_style booleans; None = all ID

    def validate(self) -> None:
        if min(self.K, self.n_content, self.n_style, self.d_x) < 1:
            raise ValueError("K, n_content, n_style and d_x must be positive")
        if self.ood_extra < 0:
            raise ValueError("ood_extra must be non-negative")
        if not 1 <= self.factor_dim <= self.d_x:
            raise ValueError(f"factor_dim must lie in [1, d_x={self.d_x}]")
        if not 0.0 <= self.broad_id_fraction <= 1.0:
            raise ValueError("broad_id_fraction must lie in [0, 1]")
        if self.broad_id_fraction < 1.0 and self.ood_extra == 0:
            raise ValueError("broad prior needs distractor modes when broad_id_fraction < 1")
        mask = self.mask()
        if mask.shape != (self.K, self.n_content, self.n_style):
            raise ValueError(f"id_mask shape {mask.shape} != {(self.K, self.n_content, self.n_style)}")
        empty = [k for k in range(self.K) if not mask[k].any()]
        if empty:
            raise ValueError(f"classes without any ID combination: {empty}")

    def mask(self) -> np.ndarray:
        if self.id_mask is None:
            return np.ones((self.K, self.n_content, self.n_style), dtype=bool)
        return np.asarray(self.id_mask, dtype=bool)

    @property
    def n_combos(self) -> int:
        return self.K * self.n_content * self.n_style

    def to_dict(self) -> dict:
        d = asdict(self)
        if self.id_mask is not None:
            d["id_mask"] = self.mask().astype(int).tolist()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "WorldSpec":
        d = dict(d)
        if d.get("id_mask") is not None:
            d["id_mask"] = tuple(tuple(tuple(bool(v) for v in row) for row in plane) for plane in d["id_mask"])
        return cls(**d)


@dataclass
class LabeledSet:
    """Samples with class labels and per-sample generating provenance.

    ``content`` / ``style`` give the generating mode (content indices at or
    above the world's ``n_content`` are distractors).  Synthetic sets carry
    ``synthetic=True`` and arbitrary per-sample ``extras`` arrays.
    """

    x: np.ndarray
    y: np.ndarray
    content: np.ndarray
    style: np.ndarray
    is_ood: np.ndarray
    synthetic: bool = False
    info: dict = field(default_factory=dict)
    extras: dict = field(default_factory=dict)

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=np.float64)
        if self.x.ndim != 2:
            self.x = self.x.reshape(len(self.x), -1) if self.x.size else self.x.reshape(0, 0)
        self.y = np.asarray(self.y, dtype=np.int64)
        self.content = np.asarray(self.content, dtype=np.int64)
        self.style = np.asarray(self.style, dtype=np.int64)
        self.is_ood = np.asarray(self.is_ood, dtype=bool)
        n = len(self.x)
        for name in ("y", "content", "style", "is_ood"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has length {len(getattr(self, name))}, expected {n}")

    def __len__(self) -> int:
        return len(self.x)

    def subset(self, idx) -> "LabeledSet":
        return LabeledSet(
            self.x[idx], self.y[idx], self.content[idx], self.style[idx], self.is_ood[idx],
            synthetic=self.synthetic, info=dict(self.info),
            extras={k: np.asarray(v)[idx] for k, v in self.extras.items()},
        )

    @classmethod
    def empty(cls, d_x: int, synthetic: bool = False) -> "LabeledSet":
        z = np.zeros(0, dtype=np.int64)
        return cls(np.zeros((0, d_x)), z, z, z, z.astype(bool), synthetic=synthetic)

    @classmethod
    def concat(cls, parts: list["LabeledSet"], d_x: int | None = None) -> "LabeledSet":
        if not parts:
            return cls.empty(d_x or 0)
        keys = parts[0].extras.keys()
        return cls(
            np.concatenate([p.x for p in parts]),
            np.concatenate([p.y for p in parts]),
            np.concatenate([p.content for p in parts]),
            np.concatenate([p.style for p in parts]),
            np.concatenate([p.is_ood for p in parts]),
            synthetic=all(p.synthetic for p in parts),
            info=dict(parts[0].info),
            extras={k: np.concatenate([np.asarray(p.extras[k]) for p in parts]) for k in keys},
        )

    def save(self, path, metadata: dict | None = None) -> str:
        meta = {"kind": "dataset", "synthetic": self.synthetic, "info": self.info}
        meta.update(metadata or {})
        arrays = {
            "x": self.x, "y": self.y, "content": self.content,
            "style": self.style, "is_ood": self.is_ood,
        }
        for k, v in self.extras.items():
            arrays[f"extra/{k}"] = v
        return checkpoint.save(path, meta, arrays)

    @classmethod
    def load(cls, path) -> "LabeledSet":
        meta, arr = checkpoint.load(path)
        if meta.get("kind") != "dataset":
            raise checkpoint.CheckpointError(f"{path} is not a dataset file")
        extras = {k[len("extra/"):]: v for k, v in arr.items() if k.startswith("extra/")}
        return cls(
            arr["x"], arr["y"], arr["content"], arr["style"], arr["is_ood"].astype(bool),
            synthetic=bool(meta["synthetic"]), info=meta.get("info", {}), extras=extras,
        )


@dataclass
class World:
    spec: WorldSpec
    content_means: np.ndarray  # K x (n_content + ood_extra) x factor_dim
    style_rot: np.ndarray  # n_style x factor_dim x factor_dim
    style_bias: np.ndarray  # n_style x factor_dim
    embed: np.ndarray  # d_x x factor_dim, orthonormal columns
    class_names: tuple = DEFAULT_CLASS_NAMES

    @property
    def n_modes_per_class(self) -> int:
        return self.spec.n_content + self.spec.ood_extra

    def factor_mode_means(self) -> np.ndarray:
        """Mode means in factor space, shape K x (n_content+ood_extra) x n_style x factor_dim."""
        rotated = np.einsum("sij,kcj->kcsi", self.style_rot, self.content_means)
        return rotated + self.style_bias[None, None, :, :]

    def mode_means(self) -> np.ndarray:
        return self.factor_mode_means() @ self.embed.T

    def id_combos(self) -> np.ndarray:
        """(class, content, style) rows of every ID combination."""
        return np.argwhere(self.spec.mask())

    def distractor_combos(self) -> np.ndarray:
        s = self.spec
        k, e, st = np.meshgrid(np.arange(s.K), np.arange(s.ood_extra), np.arange(s.n_style), indexing="ij")
        return np.stack([k.ravel(), e.ravel() + s.n_content, st.ravel()], axis=1)

    def render(self, combos: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw one sample per (class, content, style) row."""
        s = self.spec
        combos = np.asarray(combos, dtype=np.int64).reshape(-1, 3)
        means = self.factor_mode_means()[combos[:, 0], combos[:, 1], combos[:, 2]]
        noise = rng.standard_normal((len(combos), s.factor_dim)) * s.noise_std
        noise = np.einsum("nij,nj->ni", self.style_rot[combos[:, 2]], noise)
        x = (means + noise) @ self.embed.T
        if s.ambient_std > 0:
            x = x + rng.standard_normal(x.shape) * s.ambient_std
        return x

    def class_names_for(self) -> list[str]:
        names = list(self.class_names)
        if len(names) < self.spec.K:
            raise ValueError(f"world has {self.spec.K} classes but only {len(names)} names")
        return names[: self.spec.K]


def min_mode_separation(world: World) -> float:
    """Smallest pairwise distance between any two mode means (ID and distractor)."""
    means = world.mode_means().reshape(-1, world.spec.d_x)
    best = np.inf
    for i, j in combinations(range(len(means)), 2):
        best = min(best, float(np.linalg.norm(means[i] - means[j])))
    return best


def _min_pairwise(points: np.ndarray) -> float:
    sq = (points * points).sum(1)
    d2 = sq[:, None] + sq[None, :] - 2.0 * points @ points.T
    np.fill_diagonal(d2, np.inf)
    return float(np.sqrt(max(d2.min(), 0.0)))


def build_world(spec: WorldSpec, class_names=DEFAULT_CLASS_NAMES, max_tries: int = 100) -> World:
    spec.validate()
    rng = np.random.default_rng([spec.seed, 0])
    n_modes = spec.n_content + spec.ood_extra
    q, _ = np.linalg.qr(rng.standard_normal((spec.d_x, spec.factor_dim)))
    embed = q[:, : spec.factor_dim]
    if spec.factor_dim > 1 and spec.style_angle is not None:
        rots = np.empty((spec.n_style, spec.factor_dim, spec.factor_dim))
        for i in range(spec.n_style):
            a = rng.standard_normal((spec.factor_dim, spec.factor_dim))
            a = a - a.T
            rots[i] = expm(a * (spec.style_angle / np.abs(np.linalg.eigvals(a)).max()))
    elif spec.factor_dim > 1:
        rots = special_ortho_group.rvs(spec.factor_dim, size=spec.n_style, random_state=rng)
        rots = np.asarray(rots).reshape(spec.n_style, spec.factor_dim, spec.factor_dim)
    else:
        rots = np.ones((spec.n_style, 1, 1))
    bias = rng.standard_normal((spec.n_style, spec.factor_dim)) * spec.style_bias_scale
    needed = spec.min_separation * spec.noise_std
    for _ in range(max_tries):
        means = rng.standard_normal((spec.K, n_modes, spec.factor_dim)) * spec.mean_scale
        if spec.class_scale > 0:
            centres = rng.standard_normal((spec.K, 1, spec.factor_dim)) * spec.class_scale
            means[:, : spec.n_content] += centres
            # distractors ignore the class centre and scatter over the whole space
            means[:, spec.n_content :] *= np.hypot(spec.class_scale, spec.mean_scale) / spec.mean_scale
        world = World(spec, means, rots, bias, embed, tuple(class_names))
        if _min_pairwise(world.factor_mode_means().reshape(-1, spec.factor_dim)) >= needed:
            return world
    raise ValueError(
        f"could not place modes {needed:.3g} apart in {max_tries} tries; increase mean_scale"
    )


def sample_split(world: World, which: str, n: int, seed: int = 0) -> LabeledSet:
    """Draw ``n`` labelled samples from one split.

    ``id_train`` / ``id_test`` draw uniformly over classes and then over the
    class's ID combinations; ``broad_prior`` additionally replaces a
    ``1 - broad_id_fraction`` share of draws by distractor modes.
    """
    if which not in _SPLIT_CODES:
        raise ValueError(f"unknown split {which!r}; expected one of {SPLITS}")
    if n < 1:
        raise ValueError("n must be at least 1")
    s = world.spec
    rng = np.random.default_rng([s.seed, _SPLIT_CODES[which], seed])
    mask = s.mask()
    y = rng.integers(0, s.K, size=n)
    combos = np.empty((n, 3), dtype=np.int64)
    combos[:, 0] = y
    is_ood = np.zeros(n, dtype=bool)
    if which == "broad_prior":
        is_ood = rng.random(n) >= s.broad_id_fraction
    pick = rng.random(n)
    for k in range(s.K):
        rows = np.flatnonzero(y == k)
        ids = np.argwhere(mask[k])
        dis = np.array([(c, st) for c in range(s.n_content, s.n_content + s.ood_extra)
                        for st in range(s.n_style)], dtype=np.int64).reshape(-1, 2)
        for r in rows:
            table = dis if is_ood[r] else ids
            combos[r, 1:] = table[min(int(pick[r] * len(table)), len(table) - 1)]
    x = world.render(combos, rng)
    return LabeledSet(
        x, y, combos[:, 1], combos[:, 2], is_ood,
        info={"split": which, "seed": seed, "world_seed": s.seed},
    )
