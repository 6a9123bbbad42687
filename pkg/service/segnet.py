"""
Stage-2 segmentation network: a U-Net with a variational-autoencoder shape prior,
trained jointly with Adam. The stage-1 RoI network reuses the same U-Net code
under the ``roi.`` prefix with two classes (background / heart).

Parameter names are flat, e.g. ``unet.enc0.conv1.w``, ``vae.mu.w``,
``roi.head.b``; ``param_layout`` gives the canonical order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from scipy import ndimage

from service.errors import NumericError, TrainingDivergedError, ValidationError
from service.layers import (
    avgpool_backward,
    avgpool_forward,
    conv2d_backward,
    conv2d_forward,
    conv_norm_relu_backward,
    conv_norm_relu_forward,
    dense_backward,
    dense_forward,
    log_softmax,
    maxpool2_backward,
    maxpool2_forward,
    relu_backward,
    relu_forward,
    softmax_backward,
    upsample2_backward,
    upsample2_forward,
)
from service.roi import RoIBox, crop_study, paste_back
from service.settings import DEFAULT_SEED, TrainConfig
from service.study_io import N_CLASSES, CineStudy, LabelMap, VoxelSpacing

logger = logging.getLogger(__name__)

UNET = "unet."
VAE = "vae."
ROI = "roi."

PRIOR_GRID = 16  # VAE sees the mask probabilities average-pooled to at most 16x16
DICE_SMOOTH = 1.0
NORMALIZE_EPS = 1e-8
MAX_SHIFT_PX = 4
INFERENCE_BATCH = 8  # conv caches hold im2col columns; bounds peak memory

DEFAULT_HYPERPARAMS: Dict[str, Any] = {
    "depth": 3,
    "width": 8,
    "latent": 16,
    "vae_hidden": 64,
    "lambda_prior": 0.1,
    "learning_rate": 1e-3,
    "epochs": 500,
    "seed": DEFAULT_SEED,
    "input_size": 128,
    "n_classes": N_CLASSES,
    "roi_depth": 3,
    "roi_width": 8,
    "roi_input_size": 64,
    "has_roi": False,
}


@dataclass
class NetworkParams:
    tensors: Dict[str, np.ndarray]
    hyperparams: Dict[str, Any]
    loss_history: List[float] = field(default_factory=list)
    roi_loss_history: List[float] = field(default_factory=list)

    def __getitem__(self, name: str) -> np.ndarray:
        return self.tensors[name]

    def block(self, prefix: str) -> Dict[str, np.ndarray]:
        return {k: v for k, v in self.tensors.items() if k.startswith(prefix)}

    def copy(self) -> "NetworkParams":
        return NetworkParams(
            tensors={k: v.copy() for k, v in self.tensors.items()},
            hyperparams=dict(self.hyperparams),
            loss_history=list(self.loss_history),
            roi_loss_history=list(self.roi_loss_history),
        )

    @property
    def prior_factor(self) -> int:
        return max(1, int(self.hyperparams["input_size"]) // PRIOR_GRID)


# --- 1. Layout and initialization ---

def _unet_layout(prefix: str, depth: int, width: int, n_classes: int) -> List[Tuple[str, Tuple[int, ...]]]:
    layout: List[Tuple[str, Tuple[int, ...]]] = []
    in_ch = 1
    for level in range(depth):
        ch = width * 2 ** level
        layout.append((f"{prefix}enc{level}.conv1.w", (ch, in_ch, 3, 3)))
        layout.append((f"{prefix}enc{level}.conv2.w", (ch, ch, 3, 3)))
        in_ch = ch
    for level in reversed(range(depth - 1)):
        ch = width * 2 ** level
        layout.append((f"{prefix}up{level}.w", (ch, ch * 2, 3, 3)))
        layout.append((f"{prefix}dec{level}.conv1.w", (ch, ch * 2, 3, 3)))
        layout.append((f"{prefix}dec{level}.conv2.w", (ch, ch, 3, 3)))
    layout.append((f"{prefix}head.w", (n_classes, width, 1, 1)))
    layout.append((f"{prefix}head.b", (n_classes,)))
    return layout


def _vae_layout(hp: Dict[str, Any]) -> List[Tuple[str, Tuple[int, ...]]]:
    size = int(hp["input_size"])
    grid = size // max(1, size // PRIOR_GRID)
    d_in = int(hp["n_classes"]) * grid * grid
    hidden, latent = int(hp["vae_hidden"]), int(hp["latent"])
    return [
        (f"{VAE}enc.w", (d_in, hidden)),
        (f"{VAE}enc.b", (hidden,)),
        (f"{VAE}mu.w", (hidden, latent)),
        (f"{VAE}mu.b", (latent,)),
        (f"{VAE}logvar.w", (hidden, latent)),
        (f"{VAE}logvar.b", (latent,)),
        (f"{VAE}dec1.w", (latent, hidden)),
        (f"{VAE}dec1.b", (hidden,)),
        (f"{VAE}dec2.w", (hidden, d_in)),
        (f"{VAE}dec2.b", (d_in,)),
    ]


def param_layout(hyperparams: Dict[str, Any]) -> List[Tuple[str, Tuple[int, ...]]]:
    """Canonical (name, shape) order used for initialization and serialization."""
    hp = {**DEFAULT_HYPERPARAMS, **hyperparams}
    depth, width, size = int(hp["depth"]), int(hp["width"]), int(hp["input_size"])
    if depth < 1 or width < 1:
        raise ValidationError(f"depth and width must be >= 1, got {depth}/{width}")
    if size % (2 ** (depth - 1)):
        raise ValidationError(f"input size {size} is not divisible by 2^(depth-1)={2 ** (depth - 1)}")
    if float(hp["lambda_prior"]) < 0:
        raise ValidationError("lambda_prior must be >= 0")
    layout = _unet_layout(UNET, depth, width, int(hp["n_classes"])) + _vae_layout(hp)
    if hp["has_roi"]:
        roi_depth, roi_size = int(hp["roi_depth"]), int(hp["roi_input_size"])
        if roi_size % (2 ** (roi_depth - 1)):
            raise ValidationError(f"RoI input size {roi_size} is not divisible by 2^(depth-1)")
        layout += _unet_layout(ROI, roi_depth, int(hp["roi_width"]), 2)
    return layout


def _init_tensor(name: str, shape: Tuple[int, ...], rng: np.random.Generator) -> np.ndarray:
    if name.endswith(".b"):
        return np.zeros(shape)
    fan_in = int(np.prod(shape[1:])) if len(shape) == 4 else shape[0]
    # He init before ReLU, plain 1/fan_in scaling on linear outputs
    linear_out = name.endswith(("head.w", "mu.w", "logvar.w", "dec2.w"))
    std = np.sqrt((1.0 if linear_out else 2.0) / fan_in)
    if name.endswith("logvar.w"):
        std *= 0.1
    return rng.normal(0.0, std, size=shape)


def init_params(hyperparams: Optional[Dict[str, Any]] = None, seed: Optional[int] = None) -> NetworkParams:
    hp = {**DEFAULT_HYPERPARAMS, **(hyperparams or {})}
    if seed is not None:
        hp["seed"] = int(seed)
    rng = np.random.default_rng(int(hp["seed"]))
    tensors = {name: _init_tensor(name, shape, rng) for name, shape in param_layout(hp)}
    return NetworkParams(tensors=tensors, hyperparams=hp)


def _add_roi_tensors(params: NetworkParams, seed: int) -> NetworkParams:
    hp = dict(params.hyperparams, has_roi=True)
    rng = np.random.default_rng([seed, 1])
    tensors = dict(params.tensors)
    for name, shape in param_layout(hp):
        if name.startswith(ROI) and name not in tensors:
            tensors[name] = _init_tensor(name, shape, rng)
    return NetworkParams(tensors, hp, list(params.loss_history), list(params.roi_loss_history))


# --- 2. U-Net ---

def _unet_forward(t: Dict[str, np.ndarray], prefix: str, x: np.ndarray, depth: int) -> Tuple[np.ndarray, dict]:
    cache: Dict[str, Any] = {"enc": [], "pool": [], "dec": []}
    skips = []
    h = x
    for level in range(depth):
        h, c1 = conv_norm_relu_forward(h, t[f"{prefix}enc{level}.conv1.w"])
        h, c2 = conv_norm_relu_forward(h, t[f"{prefix}enc{level}.conv2.w"])
        cache["enc"].append((c1, c2))
        if level < depth - 1:
            skips.append(h)
            h, pc = maxpool2_forward(h)
            cache["pool"].append(pc)
    for level in reversed(range(depth - 1)):
        u, uc = upsample2_forward(h)
        u, cu = conv_norm_relu_forward(u, t[f"{prefix}up{level}.w"])
        cat = np.concatenate([u, skips[level]], axis=1)
        h, c1 = conv_norm_relu_forward(cat, t[f"{prefix}dec{level}.conv1.w"])
        h, c2 = conv_norm_relu_forward(h, t[f"{prefix}dec{level}.conv2.w"])
        cache["dec"].append((level, uc, cu, u.shape[1], c1, c2))
    logits, cache["head"] = conv2d_forward(h, t[f"{prefix}head.w"], t[f"{prefix}head.b"])
    return logits, cache


def _unet_backward(dlogits: np.ndarray, prefix: str, cache: dict, depth: int) -> Dict[str, np.ndarray]:
    grads: Dict[str, np.ndarray] = {}
    dh, grads[f"{prefix}head.w"], grads[f"{prefix}head.b"] = conv2d_backward(dlogits, cache["head"])
    dskips: Dict[int, np.ndarray] = {}
    for level, uc, cu, n_up, c1, c2 in reversed(cache["dec"]):
        dh, grads[f"{prefix}dec{level}.conv2.w"] = conv_norm_relu_backward(dh, c2)
        dcat, grads[f"{prefix}dec{level}.conv1.w"] = conv_norm_relu_backward(dh, c1)
        dskips[level] = dcat[:, n_up:]
        du, grads[f"{prefix}up{level}.w"] = conv_norm_relu_backward(dcat[:, :n_up], cu)
        dh = upsample2_backward(du, uc)
    for level in reversed(range(depth)):
        if level < depth - 1:
            dh = maxpool2_backward(dh, cache["pool"][level]) + dskips[level]
        c1, c2 = cache["enc"][level]
        dh, grads[f"{prefix}enc{level}.conv2.w"] = conv_norm_relu_backward(dh, c2)
        dh, grads[f"{prefix}enc{level}.conv1.w"] = conv_norm_relu_backward(dh, c1)
    return grads


def _as_batch(image: np.ndarray) -> Tuple[np.ndarray, bool]:
    image = np.asarray(image)
    if image.ndim == 2:
        return image[None, None], True
    if image.ndim == 3:
        return image[:, None], False
    raise ValidationError(f"expected an image (H, W) or a batch (N, H, W), got shape {image.shape}")


def _net_config(params: NetworkParams, prefix: str) -> Tuple[int, int]:
    hp = params.hyperparams
    if prefix == ROI:
        if not hp.get("has_roi"):
            raise ValidationError("parameters carry no RoI network")
        return int(hp["roi_depth"]), int(hp["roi_input_size"])
    return int(hp["depth"]), int(hp["input_size"])


def unet_forward(params: NetworkParams, image: np.ndarray, prefix: str = UNET) -> np.ndarray:
    """
    Per-pixel class logits.

    Args:
        params: Network parameters.
        image: One normalized image (H, W) or a batch (N, H, W); H = W = the network's input size.
        prefix: ``unet.`` for segmentation, ``roi.`` for the localization network.

    Returns:
        Logits (C, H, W) for a single image, (N, C, H, W) for a batch.
    """
    depth, size = _net_config(params, prefix)
    x, single = _as_batch(image)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    if x.shape[2:] != (size, size):
        raise ValidationError(f"network expects {size}x{size} input, got {x.shape[2]}x{x.shape[3]}")
    tensors = params.tensors if x.dtype == np.float64 else {k: v.astype(x.dtype) for k, v in params.tensors.items()}
    logits, _ = _unet_forward(tensors, prefix, x, depth)
    return logits[0] if single else logits


# --- 3. Shape prior ---

def kl_divergence(mu: np.ndarray, logvar: np.ndarray) -> np.ndarray:
    """KL(N(mu, exp(logvar)) || N(0, I)) summed over the last axis."""
    mu = np.asarray(mu, dtype=np.float64)
    logvar = np.asarray(logvar, dtype=np.float64)
    return -0.5 * np.sum(1.0 + logvar - mu ** 2 - np.exp(logvar), axis=-1)


def sample_noise(seed: int, indices: Sequence[int], latent: int) -> np.ndarray:
    """Reparameterization noise, one fixed draw per (seed, sample index)."""
    return np.stack([np.random.default_rng([int(seed), int(i)]).standard_normal(latent) for i in indices])


def _vae_forward(t: Dict[str, np.ndarray], probs: np.ndarray, eps: np.ndarray, factor: int) -> Tuple[np.ndarray, np.ndarray, tuple]:
    n = probs.shape[0]
    pooled, pool_cache = avgpool_forward(probs, factor)
    grid_px = pooled.shape[2] * pooled.shape[3]
    h_pre, c_enc = dense_forward(pooled.reshape(n, -1), t[f"{VAE}enc.w"], t[f"{VAE}enc.b"])
    h, m_enc = relu_forward(h_pre)
    mu, c_mu = dense_forward(h, t[f"{VAE}mu.w"], t[f"{VAE}mu.b"])
    logvar, c_lv = dense_forward(h, t[f"{VAE}logvar.w"], t[f"{VAE}logvar.b"])
    if not (np.all(np.isfinite(mu)) and np.all(np.isfinite(logvar))):
        raise NumericError("shape-prior encoder produced non-finite output")
    std = np.exp(0.5 * logvar)
    z = mu + std * eps
    g_pre, c_d1 = dense_forward(z, t[f"{VAE}dec1.w"], t[f"{VAE}dec1.b"])
    g, m_d1 = relu_forward(g_pre)
    out, c_d2 = dense_forward(g, t[f"{VAE}dec2.w"], t[f"{VAE}dec2.b"])
    log_q = log_softmax(out.reshape(pooled.shape), axis=1)
    recon = -(pooled * log_q).sum(axis=(1, 2, 3)) / grid_px
    kl = kl_divergence(mu, logvar)
    cache = (pool_cache, pooled, grid_px, c_enc, m_enc, c_mu, c_lv, mu, logvar, std, eps, c_d1, m_d1, c_d2, log_q)
    return recon, kl, cache


def _vae_backward(d_recon: np.ndarray, d_kl: np.ndarray, cache: tuple) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    pool_cache, pooled, grid_px, c_enc, m_enc, c_mu, c_lv, mu, logvar, std, eps, c_d1, m_d1, c_d2, log_q = cache
    n = pooled.shape[0]
    grads: Dict[str, np.ndarray] = {}
    w = d_recon[:, None, None, None] / grid_px
    q = np.exp(log_q)
    d_out = w * (q * pooled.sum(axis=1, keepdims=True) - pooled)
    d_pooled = -w * log_q

    dg, grads[f"{VAE}dec2.w"], grads[f"{VAE}dec2.b"] = dense_backward(d_out.reshape(n, -1), c_d2)
    dz, grads[f"{VAE}dec1.w"], grads[f"{VAE}dec1.b"] = dense_backward(relu_backward(dg, m_d1), c_d1)
    d_mu = dz + d_kl[:, None] * mu
    d_logvar = 0.5 * dz * eps * std + 0.5 * d_kl[:, None] * (np.exp(logvar) - 1.0)
    dh_mu, grads[f"{VAE}mu.w"], grads[f"{VAE}mu.b"] = dense_backward(d_mu, c_mu)
    dh_lv, grads[f"{VAE}logvar.w"], grads[f"{VAE}logvar.b"] = dense_backward(d_logvar, c_lv)
    dx, grads[f"{VAE}enc.w"], grads[f"{VAE}enc.b"] = dense_backward(relu_backward(dh_mu + dh_lv, m_enc), c_enc)
    d_pooled = d_pooled + dx.reshape(pooled.shape)
    return avgpool_backward(d_pooled, pool_cache), grads


def shape_prior_terms(
    params: NetworkParams, mask_probs: np.ndarray, seed: int, sample_index: int = 0
) -> Tuple[float, float]:
    """
    Reconstruction cross-entropy and KL of the shape prior for one mask.

    Args:
        params: Parameters carrying the ``vae.`` tensors.
        mask_probs: Class probabilities (C, H, W) summing to 1 at every pixel.
        seed: Seed of the reparameterization noise.
        sample_index: Index mixed into the noise seed.

    Returns:
        ``(reconstruction_loss, kl)``.
    """
    probs = np.asarray(mask_probs, dtype=np.float64)
    if probs.ndim != 3:
        raise ValidationError(f"mask_probs must be (C, H, W), got {probs.shape}")
    if not np.allclose(probs.sum(axis=0), 1.0, atol=1e-6):
        raise ValidationError("mask probabilities must sum to 1 at every pixel")
    eps = sample_noise(seed, [sample_index], int(params.hyperparams["latent"]))
    recon, kl, _ = _vae_forward(params.tensors, probs[None], eps, params.prior_factor)
    return float(recon[0]), float(kl[0])


# --- 4. Loss and gradients ---

def _one_hot(labels: np.ndarray, n_classes: int) -> np.ndarray:
    return (labels[:, None] == np.arange(n_classes)[None, :, None, None]).astype(np.float64)


def _segmentation_forward(logits: np.ndarray, labels: np.ndarray) -> Dict[str, np.ndarray]:
    log_p = log_softmax(logits)
    p = np.exp(log_p)
    onehot = _one_hot(labels, logits.shape[1])
    n_px = labels.shape[1] * labels.shape[2]
    inter = (p * onehot).sum(axis=(2, 3))[:, 1:]
    total = p.sum(axis=(2, 3))[:, 1:] + onehot.sum(axis=(2, 3))[:, 1:]
    return {
        "p": p,
        "onehot": onehot,
        "inter": inter,
        "total": total,
        "ce": -(log_p * onehot).sum(axis=(1, 2, 3)) / n_px,
        "dice": ((2.0 * inter + DICE_SMOOTH) / (total + DICE_SMOOTH)).mean(axis=1),
    }


def segmentation_terms(logits: np.ndarray, labels: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-image mean cross-entropy and smoothed soft Dice over the foreground classes."""
    logits = np.asarray(logits, dtype=np.float64)
    labels = np.asarray(labels)
    if logits.ndim == 3:
        logits, labels = logits[None], labels[None]
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ValidationError(f"logits {logits.shape} do not match labels {labels.shape}")
    terms = _segmentation_forward(logits, labels)
    return terms["ce"], terms["dice"]


def total_loss(
    logits: np.ndarray,
    labels: np.ndarray,
    vae_terms: Tuple[Union[float, np.ndarray], Union[float, np.ndarray]],
    config: TrainConfig,
) -> float:
    """w_ce*CE + w_dice*(1 - soft Dice) + lambda*(reconstruction + KL), averaged over the batch."""
    ce, dice = segmentation_terms(logits, labels)
    recon, kl = (np.asarray(v, dtype=np.float64) for v in vae_terms)
    per_image = config.w_ce * ce + config.w_dice * (1.0 - dice) + config.lambda_prior * (recon + kl)
    return float(np.mean(per_image))


def loss_and_gradients(
    params: NetworkParams,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    sample_indices: Optional[Sequence[int]] = None,
    prefix: str = UNET,
    dtype: Any = np.float64,
) -> Tuple[np.ndarray, Dict[str, np.ndarray]]:
    """
    Per-image losses and the gradient of their mean w.r.t. every parameter tensor.

    Tensors the forward graph does not touch get zero gradients; the shape prior
    only enters the ``unet.`` graph and only when ``lambda_prior`` > 0. The
    convolutions run in ``dtype``; losses, the shape prior and the returned
    gradients are always float64.
    """
    depth, size = _net_config(params, prefix)
    x, single = _as_batch(images)
    y = np.asarray(labels)[None] if single else np.asarray(labels)
    if x.shape[2:] != (size, size) or y.shape != (x.shape[0], size, size):
        raise ValidationError(f"expected {size}x{size} images and labels, got {x.shape} / {y.shape}")
    n = x.shape[0]
    indices = list(range(n)) if sample_indices is None else list(sample_indices)
    t = params.tensors
    compute = np.dtype(dtype)
    net = t if compute == np.float64 else {k: v.astype(compute) for k, v in t.items() if k.startswith(prefix)}

    logits, cache = _unet_forward(net, prefix, x.astype(compute), depth)
    logits = logits.astype(np.float64, copy=False)
    n_classes = logits.shape[1]
    n_px = size * size
    terms = _segmentation_forward(logits, y)
    p, onehot, inter, total = terms["p"], terms["onehot"], terms["inter"], terms["total"]
    ce, dice = terms["ce"], terms["dice"]

    use_prior = prefix == UNET and config.lambda_prior > 0
    recon = kl = np.zeros(n)
    if use_prior:
        eps = sample_noise(config.seed, indices, int(params.hyperparams["latent"]))
        recon, kl, vae_cache = _vae_forward(t, p, eps, params.prior_factor)
    losses = config.w_ce * ce + config.w_dice * (1.0 - dice) + config.lambda_prior * (recon + kl)

    # d(mean loss)/d(logits), through CE directly and through the probabilities
    dlogits = config.w_ce * (p - onehot) / (n_px * n)
    dp = np.zeros_like(p)
    s1 = (total + DICE_SMOOTH)[:, :, None, None]
    i2 = (2.0 * inter + DICE_SMOOTH)[:, :, None, None]
    dp[:, 1:] = -config.w_dice / ((n_classes - 1) * n) * (2.0 * onehot[:, 1:] * s1 - i2) / s1 ** 2
    grads = {name: np.zeros_like(v) for name, v in t.items()}
    if use_prior:
        weight = np.full(n, config.lambda_prior / n)
        dprobs, vae_grads = _vae_backward(weight, weight, vae_cache)
        dp += dprobs
        grads.update(vae_grads)
    dlogits += softmax_backward(dp, p)
    unet_grads = _unet_backward(dlogits.astype(compute, copy=False), prefix, cache, depth)
    grads.update({k: g.astype(np.float64, copy=False) for k, g in unet_grads.items()})
    return losses, grads


def backward(params: NetworkParams, image: np.ndarray, labels: np.ndarray, config: TrainConfig) -> Dict[str, np.ndarray]:
    """Gradient of the total loss w.r.t. every parameter tensor."""
    return loss_and_gradients(params, image, labels, config)[1]


# --- 5. Training ---

def normalize_image(image: np.ndarray) -> np.ndarray:
    """Zero mean, unit variance; constant images map to zeros."""
    image = np.asarray(image, dtype=np.float64)
    sd = image.std()
    if sd < NORMALIZE_EPS:
        return np.zeros_like(image)
    return (image - image.mean()) / sd


def augment_batch(images: np.ndarray, labels: np.ndarray, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Seeded random flips and small cyclic shifts, applied identically to images and labels."""
    images, labels = images.copy(), labels.copy()
    for i in range(images.shape[0]):
        for axis in (0, 1):
            if rng.random() < 0.5:
                images[i] = np.flip(images[i], axis=axis)
                labels[i] = np.flip(labels[i], axis=axis)
        shift = tuple(int(s) for s in rng.integers(-MAX_SHIFT_PX, MAX_SHIFT_PX + 1, size=2))
        images[i] = np.roll(images[i], shift, axis=(0, 1))
        labels[i] = np.roll(labels[i], shift, axis=(0, 1))
    return images, labels


class Adam:
    """Bias-corrected Adam over a dict of tensors."""

    def __init__(self, config: TrainConfig) -> None:
        self.config = config
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, tensors: Dict[str, np.ndarray], grads: Dict[str, np.ndarray], prefix: str) -> None:
        c = self.config
        self.step_count += 1
        correction1 = 1.0 - c.beta1 ** self.step_count
        correction2 = 1.0 - c.beta2 ** self.step_count
        for name, g in grads.items():
            if not name.startswith(prefix) and not (prefix == UNET and name.startswith(VAE)):
                continue
            m = self.m.setdefault(name, np.zeros_like(g))
            v = self.v.setdefault(name, np.zeros_like(g))
            m *= c.beta1
            m += (1.0 - c.beta1) * g
            v *= c.beta2
            v += (1.0 - c.beta2) * g * g
            tensors[name] = tensors[name] - c.learning_rate * (m / correction1) / (np.sqrt(v / correction2) + c.adam_eps)


def _fit(
    params: NetworkParams,
    images: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig,
    prefix: str,
) -> List[float]:
    n = images.shape[0]
    optimizer = Adam(config)
    history: List[float] = []
    per_image = np.empty(n)
    for epoch in range(1, config.epochs + 1):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(n)
        for start in range(0, n, config.batch_size):
            batch = order[start:start + config.batch_size]
            x, y = images[batch], labels[batch]
            if config.augment:
                x, y = augment_batch(x, y, rng)
            try:
                losses, grads = loss_and_gradients(
                    params, x, y, config, sample_indices=batch, prefix=prefix, dtype=config.precision
                )
            except NumericError as e:
                raise TrainingDivergedError(epoch) from e
            if not np.all(np.isfinite(losses)):
                raise TrainingDivergedError(epoch, float(np.mean(losses)))
            per_image[batch] = losses
            optimizer.step(params.tensors, grads, prefix)
        epoch_loss = float(per_image.mean())
        history.append(epoch_loss)
        if epoch == 1 or epoch % config.log_every == 0 or epoch == config.epochs:
            logger.info("[%s] epoch %d/%d loss=%.5f", prefix.rstrip("."), epoch, config.epochs, epoch_loss)
    return history


def _label_array(labels: Union[np.ndarray, LabelMap]) -> np.ndarray:
    if isinstance(labels, LabelMap):
        if labels.labels.shape[0] != 1:
            raise ValidationError("training labels must be single 2-D slices")
        return labels.labels[0]
    return np.asarray(labels)


def train(
    dataset: Sequence[Tuple[np.ndarray, Union[np.ndarray, LabelMap]]],
    config: TrainConfig,
    hyperparams: Optional[Dict[str, Any]] = None,
) -> NetworkParams:
    """
    Train the segmentation U-Net and its shape prior jointly.

    Args:
        dataset: (image, labels) pairs, both already cropped to the network input size.
        config: Optimizer and loss settings.
        hyperparams: Architecture overrides (depth, width, latent, ...).

    Returns:
        Final parameters; ``loss_history`` holds the mean per-image loss of every epoch.
    """
    if not dataset:
        raise ValidationError("training set is empty")
    hp = {
        **(hyperparams or {}),
        "lambda_prior": config.lambda_prior,
        "learning_rate": config.learning_rate,
        "epochs": config.epochs,
    }
    params = init_params(hp, seed=config.seed)
    images = np.stack([normalize_image(img) for img, _ in dataset])
    labels = np.stack([_label_array(lab) for _, lab in dataset]).astype(np.int64)
    logger.info("Training segmentation network on %d slices (%d epochs)", len(dataset), config.epochs)
    params.loss_history = _fit(params, images, labels, config, UNET)
    return params


def downsample_frame(image: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resample of a whole native slice to size x size."""
    image = np.asarray(image, dtype=np.float64)
    rows = np.linspace(0.0, image.shape[0] - 1, size)
    cols = np.linspace(0.0, image.shape[1] - 1, size)
    rr, cc = np.meshgrid(rows, cols, indexing="ij")
    return ndimage.map_coordinates(image, [rr, cc], order=1, mode="nearest")


def downsample_mask(mask: np.ndarray, size: int) -> np.ndarray:
    mask = np.asarray(mask)
    rows = np.floor(np.linspace(0.0, mask.shape[0] - 1, size) + 0.5).astype(np.int64)
    cols = np.floor(np.linspace(0.0, mask.shape[1] - 1, size) + 0.5).astype(np.int64)
    return mask[np.ix_(rows, cols)]


def train_roi(
    dataset: Sequence[Tuple[np.ndarray, Union[np.ndarray, LabelMap]]],
    config: TrainConfig,
    params: Optional[NetworkParams] = None,
) -> NetworkParams:
    """Train the two-class localization network on full-field slices downsampled to the RoI-net input size."""
    if not dataset:
        raise ValidationError("training set is empty")
    params = _add_roi_tensors(params or init_params(seed=config.seed), config.seed)
    size = int(params.hyperparams["roi_input_size"])
    images = np.stack([normalize_image(downsample_frame(img, size)) for img, _ in dataset])
    masks = np.stack([(downsample_mask(_label_array(lab), size) > 0) for _, lab in dataset]).astype(np.int64)
    logger.info("Training RoI network on %d slices (%d epochs)", len(dataset), config.epochs)
    params.roi_loss_history = _fit(params, images, masks, config, ROI)
    return params


# --- 6. Inference ---

def predict_heart_center(params: NetworkParams, study: CineStudy) -> Optional[Tuple[float, float]]:
    """Native (row, col) centroid of the RoI network's heart mask over all slices of one frame."""
    size = int(params.hyperparams["roi_input_size"])
    frame = study.ed_frame if study.ed_frame is not None else 0
    batch = np.stack([normalize_image(downsample_frame(s, size)) for s in study.intensities[frame]])
    mask = np.argmax(unet_forward(params, batch, prefix=ROI), axis=1) == 1
    if not mask.any():
        return None
    _, row, col = ndimage.center_of_mass(mask.astype(np.float64))
    _, n_rows, n_cols = study.frame_shape
    return row * (n_rows - 1) / (size - 1), col * (n_cols - 1) / (size - 1)


def predict_labels(params: NetworkParams, images: np.ndarray, dtype: Any = np.float32) -> np.ndarray:
    """Argmax class ids for normalized (N, H, W) images; ties go to the lowest class id."""
    out = np.empty(images.shape, dtype=np.uint8)
    for start in range(0, images.shape[0], INFERENCE_BATCH):
        chunk = images[start:start + INFERENCE_BATCH].astype(dtype)
        out[start:start + INFERENCE_BATCH] = np.argmax(unet_forward(params, chunk), axis=1)
    return out


def segment_study(params: NetworkParams, study: CineStudy, roi: RoIBox) -> List[LabelMap]:
    """Crop, segment and paste back every frame and slice; one LabelMap per frame."""
    crops = crop_study(study, roi)
    n_frames, n_slices = crops.shape[:2]
    flat = crops.reshape((-1,) + crops.shape[2:])
    predicted = predict_labels(params, np.stack([normalize_image(c) for c in flat]))
    predicted = predicted.reshape(n_frames, n_slices, roi.grid, roi.grid)

    native = study.frame_shape[1:]
    spacing = VoxelSpacing(study.spacing.dx, study.spacing.dy, study.spacing.dz, 0.0)
    maps = []
    for t in range(n_frames):
        labels = np.stack([paste_back(predicted[t, k], study.spacing, roi, native) for k in range(n_slices)])
        maps.append(LabelMap(labels=labels, spacing=spacing, frame_index=t))
    logger.debug("case %s: segmented %d frames x %d slices", study.case_id, n_frames, n_slices)
    return maps


def count_components(label_map: Union[LabelMap, np.ndarray], class_id: int) -> int:
    """Connected components of one class, counted slice by slice (4-connectivity)."""
    labels = label_map.labels if isinstance(label_map, LabelMap) else np.asarray(label_map)
    if labels.ndim == 2:
        labels = labels[None]
    return int(sum(ndimage.label(s == class_id)[1] for s in labels))
