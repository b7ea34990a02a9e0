"""Plug-and-play samplers built from a generator, priors, and a condition net.

Every sampler here advances a batch of chains (one row per chain) and
returns a :class:`~ppgn.samplers.ChainRecord` whose ``images`` hold the
decoded sample of every recorded state.

Pixel-space samplers (``sample_ppgn_x`` and the hand-designed-prior
relatives) move images directly and clamp them to ``[0, 1]``.  Code-space
samplers (``sample_dgn_am``, ``sample_ppgn_h``, ``sample_joint``) move the
code ``h`` fed to the generator and never clip it.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy import ndimage

from . import nets
from .nets import ModelBundle
from .samplers import ChainRecord, SamplerConfig, decoupled_step, run_chain
from .tensor import NonFiniteError, ShapeError, Tape, Tensor, make_streams, normal_array

VARIANTS = ("ppgn_x", "dgn_am", "ppgn_h", "joint_ppgn_h", "noiseless_joint")

# pixel-space defaults rescaled from a 0..255 to a 0..1 pixel range
_PIXEL_RANGE = 255.0
DEFAULTS = {
    "ppgn_x": SamplerConfig(eps1=1.0, eps2=1e5 / _PIXEL_RANGE ** 2, eps3=25.6 / _PIXEL_RANGE),
    "dgn_am": SamplerConfig(eps1=0.0, eps2=1.0, eps3=1e-17),
    "ppgn_h": SamplerConfig(eps1=1e-5, eps2=1.0, eps3=1e-5),
    "joint_ppgn_h": SamplerConfig(eps1=1e-5, eps2=1.0, eps3=1e-5),
    "noiseless_joint": SamplerConfig(eps1=1e-5, eps2=1.0, eps3=1e-17),
}

# grids for the noise and prior-strength sweeps
EPS3_SWEEP = (1e-1, 1e-3, 1e-5, 1e-9, 1e-13, 1e-17)
EPS1_SWEEP = (1e-1, 1e-2, 1e-3, 1e-4, 1e-5, 0.0)


def default_config(variant: str, **overrides) -> SamplerConfig:
    if variant not in DEFAULTS:
        raise ValueError(f"unknown variant {variant!r}; expected one of {VARIANTS}")
    return DEFAULTS[variant].replace(**overrides)


# --------------------------------------------------------------------------
# conditions


@dataclass(frozen=True)
class Condition:
    """What the condition term pushes toward.

    ``kind="output_class"`` scores ``log p(y = unit | x)`` from the model's
    output layer.  ``kind="hidden_unit"`` treats the activations of tap
    ``layer`` as logits of a softmax over that layer and scores the named
    unit.  ``unit`` may hold one index per chain.
    """

    model: ModelBundle
    unit: int | Sequence[int]
    kind: str = "output_class"
    layer: str | None = None
    variant: str = "log_softmax"

    def __post_init__(self):
        if self.kind not in ("output_class", "hidden_unit"):
            raise ValueError(f"condition kind must be output_class or hidden_unit, got {self.kind!r}")
        if self.kind == "hidden_unit" and self.layer is None:
            raise ValueError("hidden_unit conditions need a layer tap name")
        width = self.width
        units = np.atleast_1d(np.asarray(self.unit))
        if np.any(units < 0) or np.any(units >= width):
            raise IndexError(f"unit {self.unit} outside layer of width {width}")

    @property
    def width(self) -> int:
        if self.kind == "output_class":
            return self.model.out_dim
        return self.model.tap_dim(self.layer)

    def _upto(self):
        return None if self.kind == "output_class" else self.model.taps[self.layer]

    def targets(self, n: int) -> np.ndarray:
        units = np.atleast_1d(np.asarray(self.unit, dtype=np.int64))
        if units.size == 1:
            return np.full(n, units[0])
        if units.size != n:
            raise ShapeError(f"{units.size} target units for {n} chains")
        return units

    def log_prob(self, tape: Tape, x: Tensor) -> Tensor:
        """Per-row objective on ``tape`` (shape ``(n, 1)`` or ``(n, width)`` one-hot masked)."""
        z, _ = nets.forward(self.model, x, tape, upto=self._upto())
        return nets.class_objective(tape, z, self.targets(z.shape[0]), self.variant)

    def probability(self, x) -> np.ndarray:
        """``p(unit | x)`` per row: softmax over the output or the tapped layer."""
        z = nets.predict(self.model, x, upto=self._upto())
        p = nets.softmax(z)
        return p[np.arange(len(p)), self.targets(len(p))]


def condition_grad(condition: Condition, x) -> np.ndarray:
    """Gradient of the condition objective with respect to the input image(s)."""
    arr = np.asarray(x, dtype=np.float64)
    batch = arr.reshape(1, -1) if arr.ndim == 1 else arr
    if condition.kind == "output_class":
        return nets.class_gradient(condition.model, batch, condition.targets(len(batch)),
                                   condition.variant).reshape(arr.shape)
    tape = Tape()
    xt = tape.leaf(batch)
    obj = tape.sum(condition.log_prob(tape, xt))
    return tape.backward(obj)[xt.node].data.reshape(arr.shape)


# --------------------------------------------------------------------------
# inpainting


@dataclass
class MaskedImage:
    """A real image and a binary mask (1 = region to synthesise, 0 = observed)."""

    x_real: np.ndarray
    mask: np.ndarray

    def __post_init__(self):
        self.x_real = np.asarray(self.x_real, dtype=np.float64).reshape(-1)
        self.mask = np.asarray(self.mask, dtype=np.float64).reshape(-1)
        if self.x_real.shape != self.mask.shape:
            raise ShapeError(f"mask shape {self.mask.shape} != image shape {self.x_real.shape}")
        if not np.all((self.mask == 0) | (self.mask == 1)):
            raise ValueError("mask must be binary")

    @classmethod
    def patch(cls, x_real, x0: int, y0: int, w: int, h: int, side: int = 28) -> "MaskedImage":
        """Mask a ``w`` x ``h`` rectangle whose top-left corner is column ``x0``, row ``y0``."""
        if not (0 <= x0 and 0 <= y0 and x0 + w <= side and y0 + h <= side and w > 0 and h > 0):
            raise ValueError(f"patch ({x0},{y0},{w},{h}) does not fit a {side}x{side} image")
        m = np.zeros((side, side))
        m[y0:y0 + h, x0:x0 + w] = 1.0
        return cls(x_real, m)

    def clamp(self, x: np.ndarray) -> np.ndarray:
        return x * self.mask + (1.0 - self.mask) * self.x_real

    def observed_part(self) -> np.ndarray:
        return (1.0 - self.mask) * self.x_real


def _batch_masks(masked, n):
    """Stack one MaskedImage (broadcast) or one per chain into ``(n, d)`` arrays."""
    items = masked if isinstance(masked, (list, tuple)) else [masked] * n
    if len(items) != n:
        raise ShapeError(f"{len(items)} masked images for {n} chains")
    M = np.stack([m.mask for m in items])
    obs = np.stack([m.observed_part() for m in items])
    return M, obs


# --------------------------------------------------------------------------
# code-space sampling core


def _code_gradients(G, condition, h, M=None, obs=None, context_weight=0.0):
    """Condition gradient w.r.t. ``h`` through ``G`` (and the clamp), plus the context gradient."""
    tape = Tape()
    ht = tape.leaf(h)
    x, _ = nets.forward(G, ht, tape)
    x_used = x if M is None else tape.add(tape.mul(x, M), obs)
    obj = tape.sum(condition.log_prob(tape, x_used))
    g = tape.backward(obj)[ht.node].data
    ctx = None
    if M is not None and context_weight > 0:
        diff = tape.sub(tape.mul(x, 1.0 - M), obs)
        cost = tape.scale(tape.sum(tape.mul(diff, diff)), -context_weight)
        ctx = tape.backward(cost)[ht.node].data
    return g, ctx


def _check_codes(G, h0):
    h0 = np.array(h0, dtype=np.float64)
    if h0.ndim == 1:
        h0 = h0[None, :]
    if h0.shape[1] != G.in_dim:
        raise ShapeError(f"code width {h0.shape[1]} does not match generator input {G.in_dim}")
    if not np.all(np.isfinite(h0)):
        raise NonFiniteError("initial codes contain non-finite values")
    return h0


def _observers(G, condition, M, obs):
    def image(h):
        x = nets.predict(G, h)
        return x if M is None else x * M + obs

    def confidence(h):
        return condition.probability(image(h))

    return {"image": image, "confidence": confidence}


def _run_code_chain(G, condition, h0, cfg, prior_fn=None, decay=None, masked=None, context_weight=0.0,
                    stride=1, streams=None):
    h0 = _check_codes(G, h0)
    n = len(h0)
    rngs = streams or make_streams(cfg.seed, n)
    M, obs = (None, None) if masked is None else _batch_masks(masked, n)
    if M is not None and M.shape[1] != G.out_dim:
        raise ShapeError(f"mask width {M.shape[1]} != generator output {G.out_dim}")

    def step(h, t):
        g, ctx = _code_gradients(G, condition, h, M, obs, context_weight)
        prior = None if prior_fn is None else prior_fn(h, rngs)
        base = h if decay is None else (1.0 - decay) * h
        h_next = decoupled_step(None if prior is None else (lambda _: prior), lambda _: g, base, cfg, rngs,
                                extra=ctx)
        energy = (0.0 if prior is None else float(np.linalg.norm(cfg.eps1 * prior) / np.sqrt(n)),
                  float(np.linalg.norm(cfg.eps2 * g) / np.sqrt(n)))
        return h_next, {"energy": energy}

    return run_chain(step, h0, cfg, _observers(G, condition, M, obs), stride=stride)


def sample_dgn_am(G: ModelBundle, condition: Condition, h0, cfg: SamplerConfig | None = None,
                  lambda_decay: float | None = None, **kw) -> ChainRecord:
    """Code-space activation maximisation with a Gaussian (L2-decay) prior.

    ``h' = (1 - lambda) h + eps2 * d log p(y|G(h)) / dh + N(0, eps3^2)``;
    ``lambda`` defaults to ``cfg.eps1``.
    """
    cfg = cfg or default_config("dgn_am")
    lam = cfg.eps1 if lambda_decay is None else lambda_decay
    if lam < 0:
        raise ValueError("lambda_decay must be >= 0")
    return _run_code_chain(G, condition, h0, cfg, decay=lam, **kw)


def _dae_prior(R_h):
    if isinstance(R_h, ModelBundle):
        return lambda h: nets.predict(R_h, h)
    return R_h


def sample_ppgn_h(G: ModelBundle, R_h, condition: Condition, h0, cfg: SamplerConfig | None = None,
                  **kw) -> ChainRecord:
    """Code-space sampling with a learned prior ``eps1 * (R_h(h) - h)``.

    ``R_h`` is a code-space DAE or any callable reconstructing codes.
    """
    cfg = cfg or default_config("ppgn_h")
    recon = _dae_prior(R_h)
    return _run_code_chain(G, condition, h0, cfg, prior_fn=lambda h, _: recon(h) - h, **kw)


def compose_reconstruction(G: ModelBundle, E: ModelBundle, noise_sigmas=None):
    """``h -> E(G(h))``; with ``noise_sigmas`` Gaussian noise is injected on ``x`` and ``h1``.

    The returned callable takes ``(h, rngs)`` when noisy and ``h`` otherwise.
    """
    h1_idx, h_idx = E.taps["h1"], E.taps["h"]
    if noise_sigmas is None:
        return lambda h: nets.encode(E, nets.predict(G, h), "h")

    def recon(h, rngs):
        x = nets.predict(G, h)
        x = x + normal_array(x.shape, 0.0, noise_sigmas["x"], rngs)
        h1 = nets._predict_range(E, x, 0, h1_idx)
        h1 = h1 + normal_array(h1.shape, 0.0, noise_sigmas["h1"], rngs)
        return nets._predict_range(E, h1, h1_idx + 1, h_idx)

    return recon


def sample_joint(G: ModelBundle, E: ModelBundle, condition: Condition, h0, cfg: SamplerConfig | None = None,
                 noise_sigmas=None, noiseless: bool = True, **kw) -> ChainRecord:
    """Sampling with ``E(G(.))`` acting as the code-space autoencoder.

    ``noiseless=True`` is the noise-free composition (default step sizes
    ``(1e-5, 1, 1e-17)``).  Otherwise ``noise_sigmas`` for ``x``, ``h1`` and
    ``h`` are required; the ``x``/``h1`` noise is injected inside the
    reconstruction at each step, matching training.
    """
    if noiseless:
        cfg = cfg or default_config("noiseless_joint")
        recon = compose_reconstruction(G, E)
        return _run_code_chain(G, condition, h0, cfg, prior_fn=lambda h, _: recon(h) - h, **kw)
    missing = {"x", "h1", "h"} - set(noise_sigmas or {})
    if missing:
        raise ValueError(f"joint sampling needs noise sigmas for {sorted(missing)}")
    cfg = cfg or default_config("joint_ppgn_h").replace(eps3=float(noise_sigmas["h"]))
    recon = compose_reconstruction(G, E, noise_sigmas)
    return _run_code_chain(G, condition, h0, cfg, prior_fn=lambda h, rngs: recon(h, rngs) - h, **kw)


# --------------------------------------------------------------------------
# pixel-space sampling


def _run_pixel_chain(condition, x0, cfg, prior_fn=None, base_fn=None, clamp=True, stride=1):
    x0 = np.array(x0, dtype=np.float64)
    if x0.ndim == 1:
        x0 = x0[None, :]
    if x0.shape[1] != condition.model.in_dim:
        raise ShapeError(f"image width {x0.shape[1]} does not match condition input {condition.model.in_dim}")
    if not np.all(np.isfinite(x0)):
        raise NonFiniteError("initial images contain non-finite values")
    n = len(x0)
    rngs = make_streams(cfg.seed, n)

    def step(x, t):
        g = condition_grad(condition, x)
        prior = None if prior_fn is None else prior_fn(x)
        base = x if base_fn is None else base_fn(x)
        x_next = decoupled_step(None if prior is None else (lambda _: prior), lambda _: g, base, cfg, rngs)
        if clamp:
            x_next = np.clip(x_next, 0.0, 1.0)
        energy = (0.0 if prior is None else float(np.linalg.norm(cfg.eps1 * prior) / np.sqrt(n)),
                  float(np.linalg.norm(cfg.eps2 * g) / np.sqrt(n)))
        return x_next, {"energy": energy}

    observers = {"image": lambda x: x, "confidence": condition.probability}
    return run_chain(step, x0, cfg, observers, stride=stride)


def sample_ppgn_x(R_x: ModelBundle | None, condition: Condition, x0, cfg: SamplerConfig | None = None,
                  clamp: bool = True, stride: int = 1) -> ChainRecord:
    """Pixel-space sampling with an image DAE prior ``eps1 * (R_x(x) - x)``.

    ``R_x=None`` drops the prior (no-prior activation maximisation).
    """
    cfg = cfg or default_config("ppgn_x")
    if R_x is not None:
        if not R_x.meta.get("sigma", 0.0) > 0:
            raise ValueError("R_x must be a DAE trained with sigma > 0")
        if R_x.in_dim != condition.model.in_dim:
            raise ShapeError(f"R_x width {R_x.in_dim} != condition input {condition.model.in_dim}")
        prior_fn = lambda x: nets.predict(R_x, x) - x  # noqa: E731
    else:
        prior_fn = None
    return _run_pixel_chain(condition, x0, cfg, prior_fn=prior_fn, clamp=clamp, stride=stride)


def sample_gaussian_am(condition: Condition, x0, cfg: SamplerConfig, lam: float, clamp: bool = False,
                       stride: int = 1) -> ChainRecord:
    """Pixel-space ascent under a zero-mean Gaussian prior: ``(1 - lam) x + eps2 * grad``."""
    return _run_pixel_chain(condition, x0, cfg, base_fn=lambda x: (1.0 - lam) * x, clamp=clamp, stride=stride)


def sample_regularized(regularizer: Callable[[np.ndarray], np.ndarray], condition: Condition, x0,
                       cfg: SamplerConfig, clamp: bool = False, stride: int = 1) -> ChainRecord:
    """``x' = r(x) + eps2 * grad + N(0, eps3^2)`` for a hand-designed regulariser ``r``."""
    return _run_pixel_chain(condition, x0, cfg, base_fn=regularizer, clamp=clamp, stride=stride)


def blur_regularizer(sigma: float, side: int = 28):
    """Gaussian blur of each image, a common hand-designed image prior."""
    def r(x):
        imgs = x.reshape(len(x), side, side)
        return ndimage.gaussian_filter(imgs, sigma=(0, sigma, sigma)).reshape(len(x), -1)
    return r


def clip_regularizer(lo: float = 0.0, hi: float = 1.0):
    return lambda x: np.clip(x, lo, hi)


# --------------------------------------------------------------------------
# variant dispatch


@dataclass
class VariantSpec:
    """A variant name plus the models it needs."""

    kind: str
    G: ModelBundle | None = None
    E: ModelBundle | None = None
    R_h: object = None
    R_x: ModelBundle | None = None
    noise_sigmas: dict | None = None
    lambda_decay: float = 0.0
    config: SamplerConfig | None = field(default=None)

    def __post_init__(self):
        if self.kind not in VARIANTS:
            raise ValueError(f"unknown variant {self.kind!r}; expected one of {VARIANTS}")
        need = {"ppgn_x": ("R_x",), "dgn_am": ("G",), "ppgn_h": ("G", "R_h"),
                "joint_ppgn_h": ("G", "E", "noise_sigmas"), "noiseless_joint": ("G", "E")}[self.kind]
        missing = [k for k in need if getattr(self, k) is None]
        if missing:
            raise ValueError(f"{self.kind} needs {missing}")
        if self.G is not None and self.E is not None:
            if self.G.in_dim != self.E.tap_dim("h") or self.G.out_dim != self.E.in_dim:
                raise ShapeError("generator and encoder dimensions are incompatible")
        if self.lambda_decay < 0:
            raise ValueError("lambda_decay must be >= 0")

    @property
    def code_space(self) -> bool:
        return self.kind != "ppgn_x"

    def default_config(self) -> SamplerConfig:
        if self.config is not None:
            return self.config
        if self.kind == "joint_ppgn_h":
            return default_config(self.kind, eps3=float(self.noise_sigmas["h"]))
        return default_config(self.kind)


def sample(spec: VariantSpec, condition: Condition, init, cfg: SamplerConfig | None = None, **kw) -> ChainRecord:
    """Run the variant described by ``spec``; ``init`` is ``h0`` or ``x0``."""
    cfg = cfg or spec.default_config()
    if spec.kind == "ppgn_x":
        return sample_ppgn_x(spec.R_x, condition, init, cfg, **kw)
    if spec.kind == "dgn_am":
        return sample_dgn_am(spec.G, condition, init, cfg, lambda_decay=spec.lambda_decay, **kw)
    if spec.kind == "ppgn_h":
        return sample_ppgn_h(spec.G, spec.R_h, condition, init, cfg, **kw)
    return sample_joint(spec.G, spec.E, condition, init, cfg, noise_sigmas=spec.noise_sigmas,
                        noiseless=spec.kind == "noiseless_joint", **kw)


def inpaint(spec: VariantSpec, masked, condition: Condition, h0, cfg: SamplerConfig | None = None,
            context_weight: float = 0.0, **kw) -> ChainRecord:
    """Class-conditional filling of the masked region.

    After each decode the observed pixels are clamped to the real image
    before the condition is evaluated.  ``context_weight > 0`` adds the
    gradient of ``-context_weight * ||(1-M)(x_real - G(h))||^2``.
    """
    if not spec.code_space:
        raise ValueError("inpainting runs in code space; ppgn_x is not supported")
    if context_weight < 0:
        raise ValueError("context_weight must be >= 0")
    return sample(spec, condition, h0, cfg, masked=masked, context_weight=context_weight, **kw)


def random_codes(E: ModelBundle, images, n: int, seed: int) -> np.ndarray:
    """Random starting codes: rectified Gaussians matching per-unit code statistics."""
    codes = nets.encode(E, images, "h")
    rng = np.random.default_rng(seed)
    z = rng.normal(codes.mean(axis=0), codes.std(axis=0) + 1e-12, size=(n, codes.shape[1]))
    return np.maximum(z, 0.0)
