"""Distribution-quality measurements between a real and a synthetic sample set.

Features are the teacher's penultimate activations.  Precision and recall
use k-nearest-neighbour radii with exact search.
"""

from __future__ import annotations

import csv
import io
import json
import warnings
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy.spatial.distance import cdist

from .guidance import energy


def _moments(feats: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    feats = np.asarray(feats, dtype=np.float64)
    if feats.ndim != 2 or len(feats) < 2:
        raise ValueError(f"need an N x F feature matrix with N >= 2, got shape {feats.shape}")
    if not np.isfinite(feats).all():
        raise ValueError("features contain non-finite values")
    if len(feats) < feats.shape[1] + 1:
        warnings.warn(f"only {len(feats)} samples for {feats.shape[1]} features; covariance is rank deficient",
                      RuntimeWarning, stacklevel=3)
    mu = feats.mean(axis=0)
    cov = np.atleast_2d(np.cov(feats, rowvar=False))
    if not np.isfinite(cov).all():
        raise ValueError("covariance is not finite")
    return mu, cov


def _psd_eigvals(m: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    w, v = np.linalg.eigh((m + m.T) / 2)
    tol = 1e-8 * max(1.0, float(np.abs(w).max(initial=0.0)))
    if (w < -tol).any():
        raise ValueError(f"matrix is not positive semi-definite (eigenvalue {w.min():.3g})")
    return np.clip(w, 0.0, None), v


def sqrtm_psd(m: np.ndarray) -> np.ndarray:
    """Symmetric square root of a positive semi-definite matrix."""
    w, v = _psd_eigvals(m)
    return (v * np.sqrt(w)) @ v.T


def frechet_from_moments(mu_a, cov_a, mu_b, cov_b) -> float:
    # Tr((Sa Sb)^1/2) equals Tr((Sa^1/2 Sb Sa^1/2)^1/2), whose argument is symmetric
    root_a = sqrtm_psd(cov_a)
    w, _ = _psd_eigvals(root_a @ cov_b @ root_a)
    diff = mu_a - mu_b
    value = float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * np.sqrt(w).sum())
    return max(value, 0.0)


def frechet_distance(feats_a, feats_b) -> float:
    """Fréchet distance between Gaussians fitted to two feature sets."""
    mu_a, cov_a = _moments(feats_a)
    mu_b, cov_b = _moments(feats_b)
    if mu_a.shape != mu_b.shape:
        raise ValueError(f"feature widths differ: {mu_a.shape[0]} vs {mu_b.shape[0]}")
    return frechet_from_moments(mu_a, cov_a, mu_b, cov_b)


def knn_radii(feats: np.ndarray, k: int) -> np.ndarray:
    """Distance from each point to its k-th nearest other point."""
    d = cdist(feats, feats)
    np.fill_diagonal(d, np.inf)
    return np.partition(d, k - 1, axis=1)[:, k - 1]


def _coverage(points: np.ndarray, centers: np.ndarray, radii: np.ndarray) -> float:
    d = cdist(points, centers)
    return float((d <= radii[None, :]).any(axis=1).mean())


def knn_precision_recall(real_feats, syn_feats, k: int = 3) -> tuple[float, float]:
    """``(precision, recall)`` from k-NN balls around each point of the reference set."""
    real = np.asarray(real_feats, dtype=np.float64)
    syn = np.asarray(syn_feats, dtype=np.float64)
    if real.ndim != 2 or syn.ndim != 2 or real.shape[1] != syn.shape[1]:
        raise ValueError(f"incompatible feature shapes {real.shape} and {syn.shape}")
    if not (isinstance(k, (int, np.integer)) and 1 <= k < min(len(real), len(syn))):
        raise ValueError(f"k must be an integer in [1, min(N, M)), got {k} for N={len(real)}, M={len(syn)}")
    precision = _coverage(syn, real, knn_radii(real, k))
    recall = _coverage(real, syn, knn_radii(syn, k))
    return precision, recall


def energy_values(teacher, x, alpha: float = 1.0) -> np.ndarray:
    return energy(teacher.logits(x), alpha).data


def energy_stats(teacher, x, alpha: float = 1.0, bins: int = 20) -> tuple[float, float, tuple]:
    """Mean, standard deviation and histogram ``(counts, edges)`` of teacher energies."""
    e = energy_values(teacher, x, alpha)
    if len(e) == 0:
        raise ValueError("empty set")
    counts, edges = np.histogram(e, bins=bins)
    # spread about the first value so a set of duplicates gives exactly 0
    return float(e.mean()), float((e - e[0]).std()), (counts, edges)


@dataclass
class Projection:
    real_2d: np.ndarray
    syn_2d: np.ndarray
    axes: np.ndarray  # 2 x F
    variances: np.ndarray
    center: np.ndarray


def coverage_projection(real_feats, syn_feats) -> Projection:
    """Project both sets on the top two principal axes of the real set."""
    real = np.asarray(real_feats, dtype=np.float64)
    syn = np.asarray(syn_feats, dtype=np.float64)
    center = real.mean(axis=0)
    cov = np.cov(real, rowvar=False, ddof=0)
    w, v = np.linalg.eigh(np.atleast_2d(cov))
    order = np.argsort(w)[::-1][:2]
    axes = v[:, order].T
    return Projection((real - center) @ axes.T, (syn - center) @ axes.T, axes, w[order], center)


def projection_csv(proj: Projection) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["set", "pc1", "pc2"])
    for name, pts in (("real", proj.real_2d), ("synthetic", proj.syn_2d)):
        for p in pts:
            w.writerow([name, repr(float(p[0])), repr(float(p[1]))])
    return buf.getvalue()


def projection_svg(proj: Projection, size: int = 480, title: str = "") -> str:
    pts = np.vstack([proj.real_2d, proj.syn_2d]) if len(proj.syn_2d) else proj.real_2d
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = np.where(hi - lo > 0, hi - lo, 1.0)
    pad = 20

    def xy(p):
        q = (p - lo) / span
        return pad + q[0] * (size - 2 * pad), size - pad - q[1] * (size - 2 * pad)

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f'<rect width="{size}" height="{size}" fill="white"/>']
    if title:
        lines.append(f'<text x="{pad}" y="14" font-size="12" font-family="sans-serif">{title}</text>')
    for pts_, color in ((proj.real_2d, "#1f77b4"), (proj.syn_2d, "#d62728")):
        for p in pts_:
            x, y = xy(p)
            lines.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="1.5" fill="{color}" fill-opacity="0.5"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


@dataclass
class MetricsReport:
    fid: float
    precision: float
    recall: float
    mean_energy_real: float
    mean_energy_syn: float
    n_real: int
    n_syn: int
    per_class: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)

    def validate(self) -> None:
        for name in ("fid", "precision", "recall", "mean_energy_real", "mean_energy_syn"):
            if not np.isfinite(getattr(self, name)):
                raise ValueError(f"{name} is not finite")
        if self.fid < 0 or not (0 <= self.precision <= 1 and 0 <= self.recall <= 1):
            raise ValueError("metric out of range")

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"


def compute_report(teacher, real, syn, k: int = 3, alpha: float = 1.0, config: dict | None = None) -> MetricsReport:
    """Compare a real reference set against a synthetic set under ``teacher`` features."""
    fr, fs = teacher.features(real.x), teacher.features(syn.x)
    precision, recall = knn_precision_recall(fr, fs, k)
    er, es = energy_values(teacher, real.x, alpha), energy_values(teacher, syn.x, alpha)
    per_class = {}
    for c in np.unique(real.y):
        mr, ms = real.y == c, syn.y == c
        row = {"n_real": int(mr.sum()), "n_syn": int(ms.sum()),
               "mean_energy_real": float(er[mr].mean())}
        if ms.any():
            row["mean_energy_syn"] = float(es[ms].mean())
        if min(mr.sum(), ms.sum()) > k:
            row["precision"], row["recall"] = knn_precision_recall(fr[mr], fs[ms], k)
        per_class[str(int(c))] = row
    cfg = {"k": k, "alpha": alpha, "features": "teacher_penultimate"}
    cfg.update(config or {})
    report = MetricsReport(frechet_distance(fr, fs), precision, recall, float(er.mean()), float(es.mean()),
                           len(real), len(syn), per_class, cfg)
    report.validate()
    return report


def write_report(run_dir, report: MetricsReport, tag: str, teacher=None, real=None, syn=None) -> list[Path]:
    """Write ``<tag>.json``, a per-class CSV and, given the sets, the coverage scatter."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    paths = [run_dir / f"metrics_{tag}.json"]
    paths[0].write_text(report.to_json(), "utf-8")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    cols = ["n_real", "n_syn", "precision", "recall", "mean_energy_real", "mean_energy_syn"]
    w.writerow(["class"] + cols)
    for c, row in report.per_class.items():
        w.writerow([c] + [row.get(col, "") for col in cols])
    paths.append(run_dir / f"per_class_{tag}.csv")
    paths[1].write_text(buf.getvalue(), "utf-8")
    if teacher is not None and real is not None and syn is not None:
        proj = coverage_projection(teacher.features(real.x), teacher.features(syn.x))
        paths.append(run_dir / f"coverage_{tag}.csv")
        paths[-1].write_text(projection_csv(proj), "utf-8")
        paths.append(run_dir / f"coverage_{tag}.svg")
        paths[-1].write_text(projection_svg(proj, title=tag), "utf-8")
    return paths
