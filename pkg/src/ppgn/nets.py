"""Fully-connected models, their losses, and training loops.

One trained classifier plays two roles: the condition network ``C`` and the
encoder ``E`` whose hidden layers provide the codes ``h1`` (first hidden
layer) and ``h`` (penultimate layer).  The generator ``G`` maps ``h`` back
to pixels; ``D`` judges real against generated images; denoising
autoencoders give prior scores in pixel or code space.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np

from .tensor import Tape, Tensor, ShapeError, make_streams

logger = logging.getLogger(__name__)

ACTIVATIONS = ("relu", "tanh", "sigmoid", "linear")
REAL, FAKE = 0, 1  # discriminator output columns


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"

    def __post_init__(self):
        if self.in_dim <= 0 or self.out_dim <= 0:
            raise ValueError(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"activation {self.activation!r} not in {ACTIVATIONS}")


def chain_specs(dims, hidden="relu", output="linear") -> list[LayerSpec]:
    """Layer specs for consecutive ``dims`` with one hidden and one output activation."""
    n = len(dims) - 1
    return [LayerSpec(dims[i], dims[i + 1], hidden if i < n - 1 else output) for i in range(n)]


@dataclass
class ModelBundle:
    """A network: layer specs, named parameters, and named taps.

    ``taps`` maps a name to the index of the layer whose (post-activation)
    output it exposes.  ``meta`` holds scalars that travel with the model,
    such as the training noise ``sigma`` of a denoising autoencoder.
    """

    name: str
    layers: list[LayerSpec]
    params: dict[str, Tensor]
    taps: dict[str, int] = field(default_factory=dict)
    meta: dict[str, float] = field(default_factory=dict)

    def __post_init__(self):
        for a, b in zip(self.layers, self.layers[1:]):
            if a.out_dim != b.in_dim:
                raise ShapeError(f"{self.name}: layer dims do not chain ({a.out_dim} -> {b.in_dim})")
        for i, layer in enumerate(self.layers):
            W, b = self.params.get(f"W{i}"), self.params.get(f"b{i}")
            if W is None or b is None:
                raise ValueError(f"{self.name}: missing parameters for layer {i}")
            if W.shape != (layer.in_dim, layer.out_dim) or b.shape != (layer.out_dim,):
                raise ShapeError(f"{self.name}: layer {i} expects W{(layer.in_dim, layer.out_dim)}, "
                                 f"b({layer.out_dim},); got {W.shape}, {b.shape}")
        for name, idx in self.taps.items():
            if not 0 <= idx < len(self.layers):
                raise ValueError(f"{self.name}: tap {name!r} points at missing layer {idx}")

    @property
    def in_dim(self) -> int:
        return self.layers[0].in_dim

    @property
    def out_dim(self) -> int:
        return self.layers[-1].out_dim

    def tap_dim(self, tap: str) -> int:
        if tap not in self.taps:
            raise KeyError(f"{self.name} has no tap {tap!r}; taps are {sorted(self.taps)}")
        return self.layers[self.taps[tap]].out_dim

    def param_snapshot(self) -> dict[str, bytes]:
        return {k: v.data.tobytes() for k, v in self.params.items()}


def init_model(name, layers, seed, taps=None, meta=None) -> ModelBundle:
    """Glorot-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    params = {}
    for i, layer in enumerate(layers):
        limit = math.sqrt(6.0 / (layer.in_dim + layer.out_dim))
        params[f"W{i}"] = Tensor(rng.uniform(-limit, limit, (layer.in_dim, layer.out_dim)))
        params[f"b{i}"] = Tensor(np.zeros(layer.out_dim))
    return ModelBundle(name, list(layers), params, dict(taps or {}), dict(meta or {}))


def _as_batch(x):
    arr = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _activate(tape: Tape, h: Tensor, kind: str) -> Tensor:
    if kind == "linear":
        return h
    return tape.apply(kind, h)


def forward(model: ModelBundle, x, tape: Tape, params: Mapping[str, Tensor] | None = None,
            upto: int | None = None):
    """Record a forward pass on ``tape``.

    Returns ``(output, taps)``.  Pass ``params`` (leaves from :func:`bind`)
    to get parameter gradients; otherwise weights enter as constants.
    ``upto`` stops after that layer index.
    """
    p = model.params if params is None else params
    if not isinstance(x, Tensor) or x.tape is not tape:
        x = tape.constant(_as_batch(x))
    if x.shape[-1] != model.in_dim:
        raise ShapeError(f"{model.name}: input width {x.shape[-1]} != {model.in_dim}")
    h = x
    taps = {}
    last = len(model.layers) - 1 if upto is None else upto
    for i, layer in enumerate(model.layers[: last + 1]):
        h = tape.add(tape.matmul(h, p[f"W{i}"]), p[f"b{i}"])
        h = _activate(tape, h, layer.activation)
        for name, idx in model.taps.items():
            if idx == i:
                taps[name] = h
    return h, taps


def bind(model: ModelBundle, tape: Tape) -> dict[str, Tensor]:
    """Place every parameter on ``tape`` as a gradient-receiving leaf."""
    return {k: tape.leaf(v) for k, v in model.params.items()}


_NP_ACT = {
    "relu": lambda z: np.maximum(z, 0.0),
    "tanh": np.tanh,
    "sigmoid": lambda z: 0.5 * (1.0 + np.tanh(0.5 * z)),
    "linear": lambda z: z,
}


def predict(model: ModelBundle, x, upto: int | None = None) -> np.ndarray:
    """Tape-free forward pass on a batch array."""
    h = _as_batch(x)
    if h.shape[-1] != model.in_dim:
        raise ShapeError(f"{model.name}: input width {h.shape[-1]} != {model.in_dim}")
    last = len(model.layers) - 1 if upto is None else upto
    for i, layer in enumerate(model.layers[: last + 1]):
        h = _NP_ACT[layer.activation](h @ model.params[f"W{i}"].data + model.params[f"b{i}"].data)
    return h


def encode(model: ModelBundle, x, tap: str = "h") -> np.ndarray:
    return predict(model, x, upto=model.taps[tap])


def softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def accuracy(model: ModelBundle, images, labels) -> float:
    if len(labels) == 0:
        raise ValueError("accuracy of an empty set is undefined")
    return float(np.mean(predict(model, images).argmax(axis=1) == np.asarray(labels)))


# --------------------------------------------------------------------------
# optimisation


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    lr: float = 2e-4
    eps: float = 1e-8

    @classmethod
    def fresh(cls, params: Mapping[str, Tensor], **kw) -> "AdamState":
        return cls({k: np.zeros(v.shape) for k, v in params.items()},
                   {k: np.zeros(v.shape) for k, v in params.items()}, **kw)


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, Tensor | np.ndarray],
              state: AdamState) -> tuple[dict[str, Tensor], AdamState]:
    """One bias-corrected Adam update; ``state`` is advanced in place and returned."""
    state.t += 1
    c1 = 1.0 - state.beta1 ** state.t
    c2 = 1.0 - state.beta2 ** state.t
    new = {}
    for k, p in params.items():
        g = grads[k]
        g = g.data if isinstance(g, Tensor) else np.asarray(g)
        if g.shape != p.shape:
            raise ShapeError(f"adam_step: grad for {k} has shape {g.shape}, param {p.shape}")
        m = state.m[k] = state.beta1 * state.m[k] + (1.0 - state.beta1) * g
        v = state.v[k] = state.beta2 * state.v[k] + (1.0 - state.beta2) * g * g
        new[k] = Tensor(p.data - state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps))
    return new, state


@dataclass
class TrainConfig:
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.999
    batch_size: int = 64
    epochs: int = 10
    seed: int = 0
    weight_decay: float = 0.0  # L2 coefficient added to gradients
    lr_decay: float = 1.0  # multiplicative, applied after each epoch
    shift_augment: bool = False  # random one-pixel translations (images only)
    image_side: int = 28

    def adam(self, params) -> AdamState:
        return AdamState.fresh(params, beta1=self.beta1, beta2=self.beta2, lr=self.lr)


def _grads_by_name(tape: Tape, bound: Mapping[str, Tensor], loss: Tensor, params, weight_decay=0.0):
    g = tape.backward(loss)
    out = {k: g[t.node].data for k, t in bound.items()}
    if weight_decay:
        out = {k: v + weight_decay * params[k].data for k, v in out.items()}
    return out


def random_shift(images: np.ndarray, rng: np.random.Generator, side: int) -> np.ndarray:
    """Translate each image by one pixel in a random direction (or not at all)."""
    n = images.shape[0]
    imgs = images.reshape(n, side, side)
    out = np.empty_like(imgs)
    moves = rng.integers(0, 5, size=n)
    for k, (dy, dx) in enumerate([(0, 0), (1, 0), (-1, 0), (0, 1), (0, -1)]):
        sel = moves == k
        if sel.any():
            out[sel] = np.roll(imgs[sel], (dy, dx), axis=(1, 2))
    return out.reshape(n, -1)


def _batches(n, batch_size, rng):
    order = rng.permutation(n)
    for s in range(0, n, batch_size):
        yield order[s:s + batch_size]


# --------------------------------------------------------------------------
# classifier / encoder

CLASSIFIER_DIMS = (784, 256, 64, 10)


def classifier_spec(dims=CLASSIFIER_DIMS) -> tuple[list[LayerSpec], dict[str, int]]:
    """Default classifier layers and taps: ``h1`` first hidden, ``h`` penultimate."""
    layers = chain_specs(dims, "relu", "linear")
    return layers, {"h1": 0, "h": len(layers) - 2}


def train_classifier(images, labels, config: TrainConfig | None = None, spec=None,
                     test: tuple | None = None, name: str = "classifier") -> ModelBundle:
    """Cross-entropy training; the result serves as both condition net and encoder.

    Final train (and, if ``test`` is given, test) accuracy is stored in ``meta``.
    """
    config = config or TrainConfig(lr=1e-3, epochs=20)
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if len(images) == 0:
        raise ValueError("cannot train a classifier on an empty dataset")
    layers, taps = spec or classifier_spec((images.shape[1], 256, 64, 10))
    n_classes = layers[-1].out_dim
    model = init_model(name, layers, config.seed, taps)
    onehot = np.eye(n_classes)[labels]
    state = config.adam(model.params)
    rng = np.random.default_rng(config.seed + 1)
    for epoch in range(config.epochs):
        for idx in _batches(len(images), config.batch_size, rng):
            xb = images[idx]
            if config.shift_augment:
                xb = random_shift(xb, rng, config.image_side)
            tape = Tape()
            bound = bind(model, tape)
            logits, _ = forward(model, xb, tape, bound)
            loss = tape.cross_entropy(logits, onehot[idx])
            grads = _grads_by_name(tape, bound, loss, model.params, config.weight_decay)
            model.params, state = adam_step(model.params, grads, state)
        state.lr *= config.lr_decay
        logger.debug("classifier epoch %d loss %.4f", epoch, loss.item())
    model.meta["train_accuracy"] = accuracy(model, images, labels)
    if test is not None:
        model.meta["test_accuracy"] = accuracy(model, *test)
    return model


# --------------------------------------------------------------------------
# denoising autoencoders

H_DAE_DIMS = (64, 48, 32, 16, 32, 48, 64)
X_DAE_DIMS = (784, 512, 256, 512, 784)


def train_dae(data, sigma: float, config: TrainConfig | None = None, layers=None,
              name: str = "dae", refit_output: bool | None = None, refit_rows: int = 200_000) -> ModelBundle:
    """Train ``R`` to minimise ``||R(x + n) - x||^2`` with ``n ~ N(0, sigma^2)``.

    ``sigma`` is stored in ``meta`` so the score can be recovered later.
    ``sigma = 0`` trains a plain autoencoder (its score is undefined).

    The score divides reconstruction error by ``sigma^2``, so Adam's
    parameter jitter is amplified badly for small ``sigma``.  When the output
    layer is linear (and by default), it is therefore re-solved exactly by
    least squares on about ``refit_rows`` fresh noisy copies of the data
    after the Adam epochs, with the hidden layers held fixed.
    """
    if not sigma >= 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    config = config or TrainConfig()
    data = np.asarray(data, dtype=np.float64)
    if data.ndim == 1:
        data = data[:, None]
    if len(data) == 0:
        raise ValueError("cannot train a DAE on an empty dataset")
    layers = layers or chain_specs((data.shape[1], 64, 64, data.shape[1]), "tanh", "linear")
    model = init_model(name, layers, config.seed, meta={"sigma": float(sigma)})
    state = config.adam(model.params)
    rng = np.random.default_rng(config.seed + 1)
    for _ in range(config.epochs):
        for idx in _batches(len(data), config.batch_size, rng):
            xb = data[idx]
            tape = Tape()
            bound = bind(model, tape)
            out, _ = forward(model, xb + sigma * rng.standard_normal(xb.shape), tape, bound)
            loss = tape.mse(out, xb)
            grads = _grads_by_name(tape, bound, loss, model.params, config.weight_decay)
            model.params, state = adam_step(model.params, grads, state)
        state.lr *= config.lr_decay
    if refit_output is None:
        refit_output = layers[-1].activation == "linear"
    if refit_output:
        model.params = _refit_linear_output(model, data, sigma, refit_rows, rng)
    return model


def _refit_linear_output(model: ModelBundle, data, sigma, rows, rng) -> dict[str, Tensor]:
    if model.layers[-1].activation != "linear":
        raise ValueError("only a linear output layer can be refit by least squares")
    last = len(model.layers) - 1
    reps = max(1, rows // len(data))
    clean = np.repeat(data, reps, axis=0)
    noisy = clean + sigma * rng.standard_normal(clean.shape)
    feats = predict(model, noisy, upto=last - 1) if last > 0 else noisy
    design = np.hstack([feats, np.ones((len(feats), 1))])
    sol, *_ = np.linalg.lstsq(design, clean, rcond=None)
    return {**model.params, f"W{last}": Tensor(sol[:-1]), f"b{last}": Tensor(sol[-1])}


def dae_score(R: ModelBundle, x) -> np.ndarray:
    """Estimate of the gradient of log-density: ``(R(x) - x) / sigma^2``."""
    sigma = R.meta.get("sigma", 0.0)
    if not sigma > 0:
        raise ValueError(f"{R.name}: score undefined for a DAE trained with sigma={sigma}")
    arr = np.asarray(x, dtype=np.float64)
    batch = _as_batch(arr)
    return ((predict(R, batch) - batch) / sigma ** 2).reshape(arr.shape)


# --------------------------------------------------------------------------
# class-conditional gradients

GRADIENT_VARIANTS = ("logit", "softmax", "log_softmax")


def class_objective(tape: Tape, logits: Tensor, target, variant: str = "log_softmax") -> Tensor:
    """Per-row scalar (shape ``(n, 1)``) whose gradient drives activation maximisation."""
    if variant not in GRADIENT_VARIANTS:
        raise ValueError(f"gradient variant {variant!r} not in {GRADIENT_VARIANTS}")
    n, k = logits.shape
    targets = np.broadcast_to(np.asarray(target), (n,))
    if np.any(targets < 0) or np.any(targets >= k):
        raise IndexError(f"target unit {target} outside [0, {k})")
    if variant == "logit":
        z = logits
    elif variant == "softmax":
        z = tape.softmax(logits)
    else:
        z = tape.log_softmax(logits)
    if np.all(targets == targets[0]):
        return tape.slice(z, int(targets[0]), int(targets[0]) + 1)
    return tape.mul(z, np.eye(k)[targets])


def class_gradient(C: ModelBundle, x, target, variant: str = "log_softmax") -> np.ndarray:
    """Gradient of the chosen class score of ``C`` with respect to the input.

    ``variant`` is ``"logit"``, ``"softmax"`` or ``"log_softmax"`` (the default);
    ``target`` may be one index or one per row.
    """
    arr = np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64)
    tape = Tape()
    xt = tape.leaf(_as_batch(arr))
    logits, _ = forward(C, xt, tape)
    obj = tape.sum(class_objective(tape, logits, target, variant))
    return tape.backward(obj)[xt.node].data.reshape(arr.shape)


# --------------------------------------------------------------------------
# GAN pieces

GENERATOR_DIMS = (64, 256, 512, 784)
DISCRIMINATOR_DIMS = (784, 256, 64, 2)


def gan_losses(D: ModelBundle, real_batch, fake_batch, tape: Tape, d_params=None):
    """``(L_D, L_GAN)`` as batch means, with ``D``'s two outputs softmax-normalised.

    ``L_D = -mean[log D(x) + log(1 - D(G(h)))]`` and ``L_GAN = -mean log D(G(h))``
    where ``D(.)`` is the probability of the "real" column.
    """
    if D.out_dim != 2:
        raise ShapeError(f"discriminator must have 2 outputs, has {D.out_dim}")
    real_out, _ = forward(D, real_batch, tape, d_params)
    fake_out, _ = forward(D, fake_batch, tape, d_params)
    lr_ = tape.log_softmax(real_out)
    lf_ = tape.log_softmax(fake_out)
    n_real, n_fake = real_out.shape[0], fake_out.shape[0]
    log_real_on_real = tape.sum(tape.slice(lr_, REAL, REAL + 1))
    log_fake_on_fake = tape.sum(tape.slice(lf_, FAKE, FAKE + 1))
    loss_d = tape.add(tape.scale(log_real_on_real, -1.0 / n_real), tape.scale(log_fake_on_fake, -1.0 / n_fake))
    loss_gan = tape.scale(tape.sum(tape.slice(lf_, REAL, REAL + 1)), -1.0 / n_fake)
    return loss_d, loss_gan


@dataclass(frozen=True)
class GanBalanceState:
    train_D: bool
    train_G: bool
    r: float


def gan_balance(loss_D: float, loss_G: float, low: float = 0.1, high: float = 10.0) -> GanBalanceState:
    """Pause whichever network is winning by too much (strict thresholds)."""
    r = math.inf if loss_G == 0 else float(loss_D) / float(loss_G)
    if r < low:
        return GanBalanceState(False, True, r)
    if r > high:
        return GanBalanceState(True, False, r)
    return GanBalanceState(True, True, r)


@dataclass
class GeneratorLog:
    steps: int = 0
    paused_D: int = 0
    paused_G: int = 0
    last: dict = field(default_factory=dict)


def code_statistics(E: ModelBundle, images) -> dict[str, float]:
    """Mean pixel value and mean activations of the ``h1`` and ``h`` taps."""
    return {
        "x": float(np.mean(images)),
        "h1": float(np.mean(encode(E, images, "h1"))),
        "h": float(np.mean(encode(E, images, "h"))),
    }


def joint_noise_sigmas(E: ModelBundle, images, x_frac=0.01, h1_frac=0.10, h_frac=0.10) -> dict[str, float]:
    """Training noise for the joint model as fractions of mean pixel/activation."""
    s = code_statistics(E, images)
    return {"x": x_frac * s["x"], "h1": h1_frac * s["h1"], "h": h_frac * s["h"]}


def train_generator(E: ModelBundle, images, mode: str = "noiseless", noise_sigmas=None,
                    config: TrainConfig | None = None, g_layers=None, d_layers=None,
                    noise_before_encode: bool = False, loss_weights=None,
                    callback: Callable | None = None) -> tuple[ModelBundle, ModelBundle]:
    """Train ``G: h -> x`` against a frozen encoder ``E`` together with ``D``.

    ``mode="noiseless"`` uses ``L_img + L_h1 + L_GAN``; ``mode="joint"`` adds
    ``L_h`` and Gaussian noise on ``x``, ``h1`` and ``h`` with the given sigmas.
    By default noise is applied to ``h`` at the generator input and to the
    reconstructed ``x`` and ``h1`` on the way back through ``E``; with
    ``noise_before_encode`` it is applied to ``x`` and ``h1`` while encoding
    the real image instead.
    """
    if mode not in ("noiseless", "joint"):
        raise ValueError(f"mode must be 'noiseless' or 'joint', got {mode!r}")
    if mode == "joint":
        missing = {"x", "h1", "h"} - set(noise_sigmas or {})
        if missing:
            raise ValueError(f"joint mode needs noise sigmas for {sorted(missing)}")
        sig = {k: float(noise_sigmas[k]) for k in ("x", "h1", "h")}
    else:
        sig = {"x": 0.0, "h1": 0.0, "h": 0.0}
    weights = {"img": 1.0, "h1": 1.0, "h": 1.0, "gan": 1.0, **(loss_weights or {})}
    config = config or TrainConfig()
    images = np.asarray(images, dtype=np.float64)
    h_dim, x_dim = E.tap_dim("h"), E.in_dim
    g_layers = g_layers or chain_specs((h_dim,) + GENERATOR_DIMS[1:-1] + (x_dim,), "relu", "sigmoid")
    d_layers = d_layers or chain_specs((x_dim,) + DISCRIMINATOR_DIMS[1:], "relu", "linear")
    G = init_model("generator", g_layers, config.seed, meta={"mode_joint": float(mode == "joint"), **{
        f"noise_{k}": v for k, v in sig.items()}})
    D = init_model("discriminator", d_layers, config.seed + 1)
    g_state, d_state = config.adam(G.params), config.adam(D.params)
    rng = np.random.default_rng(config.seed + 2)
    h1_idx, h_idx = E.taps["h1"], E.taps["h"]
    log = GeneratorLog()
    clean_h1 = encode(E, images, "h1")
    clean_h = encode(E, images, "h")

    for _ in range(config.epochs):
        for idx in _batches(len(images), config.batch_size, rng):
            x = images[idx]
            if mode == "joint" and noise_before_encode:
                h1 = _predict_range(E, x + sig["x"] * rng.standard_normal(x.shape), 0, h1_idx)
                h1n = h1 + sig["h1"] * rng.standard_normal(h1.shape)
                h_in = _predict_range(E, h1n, h1_idx + 1, h_idx)
                h_in = h_in + sig["h"] * rng.standard_normal(h_in.shape)
                noise_x = noise_h1 = None
            else:
                h_in = clean_h[idx] + sig["h"] * rng.standard_normal((len(idx), h_dim))
                noise_x = sig["x"] * rng.standard_normal(x.shape) if sig["x"] else None
                noise_h1 = sig["h1"] * rng.standard_normal(clean_h1[idx].shape) if sig["h1"] else None

            tape = Tape()
            g_bound, d_bound = bind(G, tape), bind(D, tape)
            x_hat, _ = forward(G, h_in, tape, g_bound)
            loss_img = tape.scale(tape.mse(x_hat, x), x.shape[1] * weights["img"])
            enc_in = x_hat if noise_x is None else tape.add(x_hat, noise_x)
            h1_hat = _forward_range(E, enc_in, tape, 0, h1_idx)
            loss_h1 = tape.scale(tape.mse(h1_hat, clean_h1[idx]), h1_hat.shape[1] * weights["h1"])
            terms = [loss_img, loss_h1]
            if mode == "joint":
                h1_in = h1_hat if noise_h1 is None else tape.add(h1_hat, noise_h1)
                h_hat = _forward_range(E, h1_in, tape, h1_idx + 1, h_idx)
                terms.append(tape.scale(tape.mse(h_hat, clean_h[idx]), h_dim * weights["h"]))
            loss_d, loss_gan = gan_losses(D, x, x_hat, tape, d_bound)
            terms.append(tape.scale(loss_gan, weights["gan"]))
            loss_g = terms[0]
            for t in terms[1:]:
                loss_g = tape.add(loss_g, t)

            bal = gan_balance(loss_d.item(), loss_gan.item())
            if bal.train_G:
                g_grads = _grads_by_name(tape, g_bound, loss_g, G.params, config.weight_decay)
            if bal.train_D:
                d_grads = _grads_by_name(tape, d_bound, loss_d, D.params, config.weight_decay)
                D.params, d_state = adam_step(D.params, d_grads, d_state)
            else:
                log.paused_D += 1
            if bal.train_G:
                G.params, g_state = adam_step(G.params, g_grads, g_state)
            else:
                log.paused_G += 1
            log.steps += 1
            log.last = {"loss_g": loss_g.item(), "loss_d": loss_d.item(), "loss_gan": loss_gan.item(),
                        "loss_img": loss_img.item(), "r": bal.r}
            if callback is not None:
                callback(log)
        g_state.lr *= config.lr_decay
        d_state.lr *= config.lr_decay
    G.meta.update({"steps": float(log.steps), "paused_D": float(log.paused_D), "paused_G": float(log.paused_G)})
    return G, D


def _forward_range(model: ModelBundle, x: Tensor, tape: Tape, first: int, last: int) -> Tensor:
    """Layers ``first..last`` of ``model`` on ``tape`` with frozen weights."""
    h = x
    for i in range(first, last + 1):
        h = tape.add(tape.matmul(h, model.params[f"W{i}"]), model.params[f"b{i}"])
        h = _activate(tape, h, model.layers[i].activation)
    return h


def _predict_range(model: ModelBundle, x: np.ndarray, first: int, last: int) -> np.ndarray:
    h = x
    for i in range(first, last + 1):
        h = _NP_ACT[model.layers[i].activation](h @ model.params[f"W{i}"].data + model.params[f"b{i}"].data)
    return h
