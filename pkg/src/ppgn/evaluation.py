"""Sample-set metrics: confidence filtering, quality, diversity, mixing."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import nets
from .nets import ModelBundle
from .samplers import ChainRecord

SSIM_K1, SSIM_K2 = 0.01, 0.03


@dataclass
class EvalReport:
    n_total: int = 0
    n_kept: int = 0
    quality: float = float("nan")
    diversity_l2: float = float("nan")
    diversity_ssim: float = float("nan")
    autocorrelation: dict[int, float] = field(default_factory=dict)
    displacement: float = float("nan")
    extra: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        if self.n_kept > self.n_total:
            raise ValueError(f"n_kept ({self.n_kept}) exceeds n_total ({self.n_total})")

    def as_dict(self) -> dict[str, float | int]:
        d: dict[str, float | int] = {
            "n_total": self.n_total,
            "n_kept": self.n_kept,
            "quality": self.quality,
            "diversity_l2": self.diversity_l2,
            "diversity_ssim": self.diversity_ssim,
            "displacement": self.displacement,
        }
        for lag, v in self.autocorrelation.items():
            d[f"autocorrelation_lag{lag}"] = v
        d.update(self.extra)
        return d


def confidence_filter(samples, C: ModelBundle, target, threshold: float = 0.97) -> np.ndarray:
    """Samples whose softmax probability for ``target`` is at least ``threshold``, in order."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError(f"threshold must lie in [0, 1], got {threshold}")
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        return samples.reshape(0, C.in_dim)
    p = nets.softmax(nets.predict(C, samples))
    tgt = np.broadcast_to(np.asarray(target), (len(samples),))
    return samples[p[np.arange(len(samples)), tgt] >= threshold]


def quality(samples, heldout_C: ModelBundle, target) -> float:
    """Fraction of samples that a second classifier assigns to ``target``."""
    samples = np.asarray(samples, dtype=np.float64)
    if len(samples) == 0:
        raise ValueError("quality of an empty sample set is undefined")
    tgt = np.broadcast_to(np.asarray(target), (len(samples),))
    return float(np.mean(nets.predict(heldout_C, samples).argmax(axis=1) == tgt))


def _box_filter(imgs: np.ndarray, win: int) -> np.ndarray:
    """Mean over every ``win`` x ``win`` window (valid positions only)."""
    c = np.cumsum(np.cumsum(imgs, axis=-2), axis=-1)
    c = np.pad(c, [(0, 0)] * (imgs.ndim - 2) + [(1, 0), (1, 0)])
    s = c[..., win:, win:] - c[..., :-win, win:] - c[..., win:, :-win] + c[..., :-win, :-win]
    return s / (win * win)


def ssim(a, b, side: int = 28, win: int = 7, data_range: float = 1.0) -> float:
    """Single-scale SSIM with a uniform ``win`` x ``win`` window and sample covariances."""
    return float(_ssim_pairs(np.asarray(a, float).reshape(1, side, side),
                             np.asarray(b, float).reshape(1, side, side), win, data_range)[0])


def _ssim_pairs(x: np.ndarray, y: np.ndarray, win: int, data_range: float) -> np.ndarray:
    n = win * win
    cov_norm = n / (n - 1.0)
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    ux, uy = _box_filter(x, win), _box_filter(y, win)
    uxx, uyy, uxy = _box_filter(x * x, win), _box_filter(y * y, win), _box_filter(x * y, win)
    vx = cov_norm * (uxx - ux * ux)
    vy = cov_norm * (uyy - uy * uy)
    vxy = cov_norm * (uxy - ux * uy)
    num = (2 * ux * uy + c1) * (2 * vxy + c2)
    den = (ux * ux + uy * uy + c1) * (vx + vy + c2)
    return (num / den).reshape(len(x), -1).mean(axis=1)


def diversity(samples, side: int = 28, win: int = 7, max_samples: int | None = None,
              seed: int = 0) -> tuple[float, float]:
    """Mean pairwise L2 distance and mean pairwise SSIM over all unordered pairs.

    With ``max_samples`` a fixed-seed random subset of that size is used.
    """
    s = np.asarray(samples, dtype=np.float64)
    if len(s) < 2:
        raise ValueError(f"diversity needs at least 2 samples, got {len(s)}")
    if s[0].size != side * side:
        raise ValueError(f"samples of {s[0].size} values are not {side}x{side} images")
    if max_samples is not None and len(s) > max_samples:
        s = s[np.sort(np.random.default_rng(seed).choice(len(s), max_samples, replace=False))]
    flat = s.reshape(len(s), -1)
    sq = (flat * flat).sum(axis=1)
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * flat @ flat.T, 0.0)
    iu = np.triu_indices(len(s), k=1)
    l2 = float(np.sqrt(d2[iu]).mean())
    imgs = s.reshape(len(s), side, side)
    total, count = 0.0, 0
    for i in range(len(s) - 1):
        rest = imgs[i + 1:]
        vals = _ssim_pairs(np.broadcast_to(imgs[i], rest.shape), rest, win, 1.0)
        total += vals.sum()
        count += len(vals)
    return l2, float(total / count)


def autocorrelation(series: np.ndarray, lags) -> dict[int, float]:
    """Lag autocorrelations averaged over coordinates (and chains).

    ``series`` is ``(T, ...)``; each trailing coordinate is one scalar series.
    Coordinates with zero variance count as perfectly correlated.
    """
    x = np.asarray(series, dtype=np.float64)
    T = x.shape[0]
    x = x.reshape(T, -1)
    lags = list(lags)
    if any(k >= T or k < 0 for k in lags):
        raise ValueError(f"lags {lags} must lie in [0, {T})")
    d = x - x.mean(axis=0)
    var = (d * d).sum(axis=0)
    flat = var <= 1e-300
    out = {}
    for k in lags:
        cov = (d[: T - k] * d[k:]).sum(axis=0)
        r = np.where(flat, 1.0, cov / np.where(flat, 1.0, var))
        out[k] = float(r.mean())
    return out


def mixing(chain: ChainRecord, lags=(1, 5, 10)) -> tuple[dict[int, float], float]:
    """Autocorrelation table of the chain's states and mean step displacement."""
    states = chain.stacked("states")
    if len(states) <= max(lags):
        raise ValueError(f"chain of length {len(states)} too short for lag {max(lags)}")
    acf = autocorrelation(states, lags)
    steps = states[1:] - states[:-1]
    disp = np.linalg.norm(steps.reshape(len(steps), -1) if states.ndim <= 2 else steps, axis=-1)
    return acf, float(np.mean(disp))


def effective_sample_size(series) -> float:
    """ESS of a scalar chain via Geyer's initial positive sequence."""
    x = np.asarray(series, dtype=np.float64).reshape(-1)
    n = len(x)
    d = x - x.mean()
    f = np.fft.rfft(d, 2 * n)
    acov = np.fft.irfft(f * np.conj(f))[:n] / n
    if acov[0] <= 0:
        return float(n)
    rho = acov / acov[0]
    total = 0.0
    for k in range(0, n - 1, 2):
        pair = rho[k] + rho[k + 1]
        if pair < 0:
            break
        total += pair
    tau = -1.0 + 2.0 * total
    return float(n / max(tau, 1e-12))


def classes_above_least_diverse(per_class_ssim: dict[int, float], reference_min: float) -> float:
    """Percent of classes whose mean SSIM is below (more diverse than) ``reference_min``."""
    vals = np.asarray(list(per_class_ssim.values()))
    if vals.size == 0:
        return float("nan")
    return float(100.0 * np.mean(vals < reference_min))


def least_diverse_ssim(images, labels, max_samples: int | None = 200, seed: int = 0) -> float:
    """Highest per-class mean pairwise SSIM of a labelled image set (its least diverse class)."""
    images, labels = np.asarray(images, dtype=np.float64), np.asarray(labels)
    vals = [diversity(images[labels == c], max_samples=max_samples, seed=seed)[1]
            for c in np.unique(labels) if np.sum(labels == c) >= 2]
    if not vals:
        raise ValueError("no class has at least 2 images")
    return float(max(vals))


def evaluate(samples, targets, C: ModelBundle, heldout_C: ModelBundle, threshold: float = 0.97,
             chain: ChainRecord | None = None, lags=(1, 5, 10), max_pairs_samples: int | None = 400,
             reference_ssim: float | None = None) -> EvalReport:
    """Filter, then score quality and diversity; optionally add mixing diagnostics.

    ``reference_ssim`` is the SSIM of the least diverse class of real data
    (see :func:`least_diverse_ssim`); when given, ``diverse_class_percent``
    reports the share of sampled classes more diverse than it.
    """
    samples = np.asarray(samples, dtype=np.float64)
    targets = np.broadcast_to(np.asarray(targets), (len(samples),))
    side = int(round(np.sqrt(samples.shape[-1]))) if samples.ndim > 1 else 1
    kept, kept_t = [], []
    for c in np.unique(targets):
        sel = samples[targets == c]
        k = confidence_filter(sel, C, int(c), threshold)
        kept.append(k)
        kept_t.append(np.full(len(k), c))
    kept_all = np.concatenate(kept) if kept else samples[:0]
    kept_targets = np.concatenate(kept_t) if kept_t else targets[:0]
    rep = EvalReport(n_total=len(samples), n_kept=len(kept_all))
    if len(kept_all):
        rep.quality = quality(kept_all, heldout_C, kept_targets)
    l2s, ssims = [], []
    per_class = {}
    for c, k in zip(np.unique(targets), kept):
        if len(k) >= 2:
            l2, s = diversity(k, side=side, win=min(7, side), max_samples=max_pairs_samples)
            l2s.append(l2)
            ssims.append(s)
            per_class[int(c)] = s
    if l2s:
        rep.diversity_l2 = float(np.mean(l2s))
        rep.diversity_ssim = float(np.mean(ssims))
        if reference_ssim is not None:
            rep.extra["diverse_class_percent"] = classes_above_least_diverse(per_class, reference_ssim)
    if chain is not None and len(chain) > max(lags):
        rep.autocorrelation, rep.displacement = mixing(chain, lags)
    return rep
