"""Recurrent restoration network, global/local discriminators and joint training.

The restorer runs ``T`` stages on the 7-channel stack ``[I, R', A']``::

    Y_0 = I,  h_0 = 0
    x_t = ReLU(stem([Y_{t-1}, R', A']))
    h_t = GRU(h_{t-1}, x_t)
    Y_t = Y_{t-1} + head(DSTB_B(... DSTB_1(h_t)))
    Y'  = clamp(Y_T, 0, 1)

A DSTB block is windowed single-head self-attention (residual) followed by
two densely connected 4D convolutions and a pointwise fusion (residual).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conv import avg_pool_hw
from .errors import ContractError, DomainError, ShapeError
from .lightfield import LightField, PatchSpec, random_patch, to_epi_units
from .losses import l1_mean
from .mgpdnet import MGPDNet, PerceptualProxy, stack_images, supervised_loss
from .nn import (Adam, Conv4d, Module, Pointwise, channel_concat, features_to_stack,
                 stack_to_features)
from .rain_synth import depth_to_fog
from .tensor import (Tensor, as_tensor, backward, clamp, concat, detach, getitem, log, matmul,
                     mean, no_grad, relu, reshape, scale, sigmoid, softmax, tanh, transpose)

PROB_EPS = 1e-6
LOGIT_BOUND = float(np.log((1.0 - PROB_EPS) / PROB_EPS))


@dataclass
class RestoreConfig:
    width: int = 8
    stages: int = 3
    dstb_blocks: int = 2
    window: int = 4
    shift: bool = False
    conv_mode: str = "4d"
    head_gain: float = 0.1


@dataclass
class LossWeights:
    lambda_p: float = 0.04
    lambda_p_real: float = 0.04
    lambda_gp: float = 0.015
    lambda_p_g: float = 0.04
    lambda_gan: float = 0.01

    def validate(self) -> None:
        for k, v in vars(self).items():
            if v < 0:
                raise DomainError(f"{k} must be non-negative, got {v}")


# ---------------------------------------------------------------------------
# building blocks

def _roll_hw(x: Tensor, sy: int, sx: int) -> Tensor:
    """Cyclic shift of the last two axes (``np.roll`` semantics)."""
    h, w = x.shape[-2:]
    sy, sx = sy % h, sx % w
    if sy:
        x = concat([getitem(x, (..., slice(h - sy, h), slice(None))),
                    getitem(x, (..., slice(0, h - sy), slice(None)))], axis=-2)
    if sx:
        x = concat([getitem(x, (..., slice(w - sx, w))),
                    getitem(x, (..., slice(0, w - sx)))], axis=-1)
    return x


class WindowAttention(Module):
    """Single-head self-attention inside non-overlapping ``window x window`` tiles."""

    def __init__(self, c: int, window: int, rng: np.random.Generator, shift: bool = False):
        super().__init__()
        self.q = self.child("q", Pointwise(c, c, rng, bias=False))
        self.k = self.child("k", Pointwise(c, c, rng, bias=False))
        self.v = self.child("v", Pointwise(c, c, rng, bias=False))
        self.out = self.child("out", Pointwise(c, c, rng, bias=False))
        self.c, self.window, self.shift = c, window, shift

    def _tokens(self, t: Tensor) -> Tensor:
        c, S, V, h, w = t.shape
        ws = self.window
        t = reshape(t, (c, S, V, h // ws, ws, w // ws, ws))
        t = transpose(t, (1, 2, 3, 5, 4, 6, 0))
        return reshape(t, (-1, ws * ws, c))

    def _untokens(self, t: Tensor, shape) -> Tensor:
        c, S, V, h, w = shape
        ws = self.window
        t = reshape(t, (S, V, h // ws, w // ws, ws, ws, c))
        t = transpose(t, (6, 0, 1, 2, 4, 3, 5))
        return reshape(t, shape)

    def __call__(self, x: Tensor) -> Tensor:
        h, w = x.shape[-2:]
        if h % self.window or w % self.window:
            raise ShapeError(f"window {self.window} does not divide spatial extent {h}x{w}")
        s = self.window // 2 if self.shift else 0
        xs = _roll_hw(x, -s, -s) if s else x
        q, k, v = self._tokens(self.q(xs)), self._tokens(self.k(xs)), self._tokens(self.v(xs))
        att = softmax(scale(matmul(q, transpose(k, (0, 2, 1))), 1.0 / np.sqrt(self.c)), axis=-1)
        y = self.out(self._untokens(matmul(att, v), x.shape))
        if s:
            y = _roll_hw(y, s, s)
        return x + y


class DSTB(Module):
    def __init__(self, c: int, cfg: RestoreConfig, rng: np.random.Generator):
        super().__init__()
        self.attn = self.child("attn", WindowAttention(c, cfg.window, rng, cfg.shift))
        self.conv1 = self.child("conv1", Conv4d(c, c, 3, rng, cfg.conv_mode))
        self.conv2 = self.child("conv2", Conv4d(2 * c, c, 3, rng, cfg.conv_mode))
        self.fuse = self.child("fuse", Pointwise(3 * c, c, rng))

    def __call__(self, x: Tensor) -> Tensor:
        x = self.attn(x)
        a1 = relu(self.conv1(x))
        a2 = relu(self.conv2(channel_concat([x, a1])))
        return x + self.fuse(channel_concat([x, a1, a2]))


class ConvGRU(Module):
    """Convolutional GRU: update gate, reset gate and candidate by 4D convolution."""

    def __init__(self, c: int, rng: np.random.Generator, conv_mode: str = "4d"):
        super().__init__()
        self.update = self.child("update", Conv4d(2 * c, c, 3, rng, conv_mode))
        self.reset = self.child("reset", Conv4d(2 * c, c, 3, rng, conv_mode))
        self.cand = self.child("cand", Conv4d(2 * c, c, 3, rng, conv_mode))

    def __call__(self, h: Tensor, x: Tensor) -> Tensor:
        hx = channel_concat([h, x])
        z = sigmoid(self.update(hx))
        r = sigmoid(self.reset(hx))
        n = tanh(self.cand(channel_concat([r * h, x])))
        return (1.0 - z) * n + z * h


@dataclass
class RestoreOutput:
    restored: Tensor                  # clamped final estimate [S, 3, V, h, w]
    stages: list[Tensor] = field(default_factory=list)   # unclamped per-stage estimates


class RNNAT(Module):
    """Recurrent restorer over ``[S, 7, V, h, w]`` inputs (rainy, rain, fog channels)."""

    def __init__(self, cfg: RestoreConfig | None = None, seed: int = 0, in_channels: int = 7):
        super().__init__()
        self.cfg = cfg = cfg or RestoreConfig()
        rng = np.random.default_rng(seed)
        c = cfg.width
        self.stem = self.child("stem", Conv4d(in_channels, c, 3, rng, cfg.conv_mode))
        self.gru = self.child("gru", ConvGRU(c, rng, cfg.conv_mode))
        self.dstbs = [self.child(f"dstb{i}", DSTB(c, cfg, rng)) for i in range(cfg.dstb_blocks)]
        self.head = self.child("head", Conv4d(c, 3, 3, rng, cfg.conv_mode))
        for t in self.head.parameters():
            t.data = t.data * cfg.head_gain
        self.in_channels = in_channels

    def stage(self, y: Tensor, aux: Tensor, h: Tensor) -> tuple[Tensor, Tensor]:
        """One recurrent step: returns the new estimate and hidden state."""
        x = relu(self.stem(stack_to_features(concat([y, aux], axis=1))))
        h = self.gru(h, x)
        f = h
        for block in self.dstbs:
            f = block(f)
        return y + features_to_stack(self.head(f)), h

    def __call__(self, inputs, stages: int | None = None) -> RestoreOutput:
        inputs = as_tensor(inputs)
        if inputs.ndim != 5 or inputs.shape[1] != self.in_channels:
            raise ShapeError(f"expected [S,{self.in_channels},V,h,w] input, got {inputs.shape}")
        S, _, V, h, w = inputs.shape
        y = getitem(inputs, (slice(None), slice(0, 3)))
        aux = getitem(inputs, (slice(None), slice(3, None)))
        hidden = Tensor(np.zeros((self.cfg.width, S, V, h, w)))
        out = []
        for _ in range(self.cfg.stages if stages is None else stages):
            y, hidden = self.stage(y, aux, hidden)
            out.append(y)
        return RestoreOutput(clamp(y, 0.0, 1.0), out)


def restoration_input(rainy, rain, fog) -> Tensor:
    """Channel stack ``[I, R', A']`` with shapes ``[S,3,..]``, ``[S,3,..]``, ``[S,1,..]``."""
    rainy, rain, fog = as_tensor(rainy), as_tensor(rain), as_tensor(fog)
    if rainy.shape != rain.shape or fog.shape != rainy.shape[:1] + (1,) + rainy.shape[2:]:
        raise ShapeError(f"cannot stack rainy {rainy.shape}, rain {rain.shape}, fog {fog.shape}")
    return concat([rainy, rain, fog], axis=1)


def restore(model: RNNAT, rainy, rain, fog) -> RestoreOutput:
    return model(restoration_input(rainy, rain, fog))


# ---------------------------------------------------------------------------
# discriminators

class Discriminator(Module):
    """Two conv/ReLU/pool stages, global average and a linear score.

    Logits are clamped so the sigmoid output stays inside ``[1e-6, 1 - 1e-6]``.
    """

    def __init__(self, c: int, rng: np.random.Generator, conv_mode: str = "4d", in_channels: int = 3):
        super().__init__()
        self.conv1 = self.child("conv1", Conv4d(in_channels, c, 3, rng, conv_mode))
        self.conv2 = self.child("conv2", Conv4d(c, c, 3, rng, conv_mode))
        self.score = self.child("score", Pointwise(c, 1, rng))

    def logit(self, stack) -> Tensor:
        x = stack_to_features(as_tensor(stack))
        for conv in (self.conv1, self.conv2):
            x = relu(conv(x))
            if x.shape[-1] % 2 == 0 and x.shape[-2] % 2 == 0:
                x = avg_pool_hw(x, 2)
        pooled = mean(reshape(x, (x.shape[0], -1)), axis=1, keepdims=True)
        return reshape(self.score(pooled), ())

    def __call__(self, stack) -> Tensor:
        return sigmoid(clamp(self.logit(stack), -LOGIT_BOUND, LOGIT_BOUND))


def sample_local_patches(rng: np.random.Generator, h: int, w: int, size: int,
                         count: int = 4) -> list[PatchSpec]:
    return [random_patch(rng, h, w, size) for _ in range(count)]


def crop_stack(stack: Tensor, p: PatchSpec) -> Tensor:
    return getitem(as_tensor(stack), (..., slice(p.y, p.y + p.h), slice(p.x, p.x + p.w)))


def gan_losses(real, fake, d_global: Discriminator, d_local: Discriminator | None,
               patches: Sequence[PatchSpec]) -> tuple[Tensor, Tensor]:
    """Global and local adversarial losses ``-log D(real) - log(1 - D(fake))``.

    The local loss averages over ``patches``, cut at identical positions from
    the real and the fake stacks.  Without a local discriminator it is 0.
    """
    real, fake = as_tensor(real), as_tensor(fake)
    if real.shape != fake.shape:
        raise ShapeError(f"real {real.shape} vs fake {fake.shape}")
    l_glob = -log(d_global(real)) - log(1.0 - d_global(fake))
    if d_local is None or not patches:
        return l_glob, Tensor(0.0)
    terms = [-log(d_local(crop_stack(real, p))) - log(1.0 - d_local(crop_stack(fake, p)))
             for p in patches]
    total = terms[0]
    for t in terms[1:]:
        total = total + t
    return l_glob, scale(total, 1.0 / len(terms))


def generator_adversarial(fake, d_global: Discriminator, d_local: Discriminator | None,
                          patches: Sequence[PatchSpec], literal: bool = False) -> Tensor:
    """Adversarial term seen by the generator.

    The default is the non-saturating ``-log D(fake)``; with ``literal`` the
    fake half of the discriminator loss, ``-log(1 - D(fake))``, is used as is.
    """
    def term(d, x):
        return -log(1.0 - d(x)) if literal else -log(d(x))
    total = term(d_global, fake)
    if d_local is not None and patches:
        loc = [term(d_local, crop_stack(fake, p)) for p in patches]
        acc = loc[0]
        for t in loc[1:]:
            acc = acc + t
        total = total + scale(acc, 1.0 / len(loc))
    return total


# ---------------------------------------------------------------------------
# losses

def generator_loss(pred, target, phi: PerceptualProxy | None, lambda_p_g: float = 0.04) -> Tensor:
    """Mean absolute error plus weighted perceptual distance."""
    pred, target = as_tensor(pred), as_tensor(target)
    loss = l1_mean(pred, target)
    if phi is not None and lambda_p_g > 0:
        loss = loss + scale(phi.distance(stack_images(pred), stack_images(target)), lambda_p_g)
    return loss


def derain_loss(l_g, l_gan_global, l_gan_local, lambda_gan: float = 0.01):
    return l_g + lambda_gan * (l_gan_global + l_gan_local)


def total_loss(l_rain, l_derain):
    return l_rain + l_derain


def pseudo_gt_views(rainy, rain) -> np.ndarray:
    """Rain-subtracted views ``clamp(I - R', 0, 1)`` used as targets for real scenes."""
    rainy = np.asarray(rainy.data if isinstance(rainy, Tensor) else rainy, dtype=np.float64)
    rain = np.asarray(rain.data if isinstance(rain, Tensor) else rain, dtype=np.float64)
    if rainy.shape != rain.shape:
        raise ShapeError(f"rainy {rainy.shape} vs rain {rain.shape}")
    return np.clip(rainy - rain, 0.0, 1.0)


# ---------------------------------------------------------------------------
# joint training

@dataclass
class JointConfig:
    steps: int = 300
    lr: float = 2e-4
    patch_size: int = 8
    local_patch: int = 4
    local_patches: int = 4
    use_local: bool = True
    literal_gan: bool = False
    beta: float = 1.8
    seed: int = 0


class JointModels:
    """Everything joint training touches, with one optimizer per side."""

    def __init__(self, detector: MGPDNet, depth, restorer: RNNAT, d_global: Discriminator,
                 d_local: Discriminator | None, lr: float = 2e-4, decay: float = 1.0,
                 decay_every: int = 0):
        if not depth.is_frozen():
            raise ContractError("the depth network must be frozen before joint training")
        self.detector, self.depth, self.restorer = detector, depth, restorer
        self.d_global, self.d_local = d_global, d_local
        self.gen_opt = Adam([detector, restorer], lr=lr, decay=decay, decay_every=decay_every)
        discs = [d_global] + ([d_local] if d_local is not None else [])
        self.disc_opt = Adam(discs, lr=lr, decay=decay, decay_every=decay_every)


def make_discriminators(width: int, seed: int, conv_mode: str = "4d",
                        use_local: bool = True) -> tuple[Discriminator, Discriminator | None]:
    rng = np.random.default_rng([seed, 7])
    d_g = Discriminator(width, rng, conv_mode)
    d_l = Discriminator(width, rng, conv_mode) if use_local else None
    return d_g, d_l


def forward_pipeline(models: JointModels, rainy, beta: float = 1.8):
    """Detector, frozen depth network and restorer on one stack.

    Returns ``(detection, restore_output, fog)``.  The depth branch sees a
    detached rain estimate; gradients reach the detector through the
    restorer's rain input.
    """
    det = models.detector(rainy)
    with no_grad():
        depth = models.depth(Tensor(rainy) - detach(det.rain)).data
    fog = depth_to_fog(depth, beta)[1]
    out = models.restorer(restoration_input(rainy, det.rain, fog))
    return det, out, fog


def joint_step(models: JointModels, scene, cfg: JointConfig, step: int,
               phi: PerceptualProxy | None, weights: LossWeights) -> dict:
    rng = np.random.default_rng([cfg.seed, 3, step])
    H, W = scene.rainy.spatial
    patch = random_patch(rng, H, W, cfg.patch_size)
    rainy = to_epi_units(scene.rainy, patch).data
    det, out, _ = forward_pipeline(models, rainy, cfg.beta)
    rain_t = scene.rain_target()
    if rain_t is not None:
        l_rain = supervised_loss(det.rain, to_epi_units(LightField(rain_t), patch).data,
                                 phi, weights.lambda_p)
    else:
        l_rain = Tensor(0.0)
    if scene.clean is not None:
        target = to_epi_units(scene.clean, patch).data
    else:
        target = pseudo_gt_views(rainy, det.rain)
    fake = out.restored
    local = sample_local_patches(rng, cfg.patch_size, cfg.patch_size, cfg.local_patch,
                                 cfg.local_patches) if models.d_local is not None else []

    # discriminator step on a detached estimate
    lg_d, ll_d = gan_losses(target, detach(fake), models.d_global, models.d_local, local)
    models.disc_opt.step(backward(lg_d + ll_d))

    # generator step
    l_g = generator_loss(fake, target, phi, weights.lambda_p_g)
    adv = generator_adversarial(fake, models.d_global, models.d_local, local, cfg.literal_gan)
    l_derain = l_g + scale(adv, weights.lambda_gan)
    l_total = total_loss(l_rain, l_derain)
    models.gen_opt.step(backward(l_total))
    return {"L_s": l_rain.item(), "L_g": l_g.item(), "L_gan": (lg_d + ll_d).item(),
            "L_total": l_total.item()}


def train_joint(models: JointModels, scenes: Sequence, cfg: JointConfig,
                phi: PerceptualProxy | None = None, weights: LossWeights | None = None,
                start_step: int = 0, on_step=None) -> list[dict]:
    """Alternating discriminator / generator updates; the depth network stays untouched."""
    if not scenes:
        raise ContractError("joint training needs at least one scene")
    weights = weights or LossWeights()
    before = models.depth.checksum()
    log_rows = []
    for step in range(start_step, cfg.steps):
        row = joint_step(models, scenes[step % len(scenes)], cfg, step, phi, weights)
        log_rows.append(row)
        if on_step is not None:
            on_step(step, row)
    if models.depth.checksum() != before:
        raise ContractError("depth network weights changed during joint training")
    return log_rows


def derain_stack(models: JointModels, rainy: np.ndarray, beta: float = 1.8):
    """Inference on one stack: ``(Y', R', D', A')`` as arrays."""
    with no_grad():
        det = models.detector(rainy)
        depth = models.depth(Tensor(rainy) - det.rain).data
        fog = depth_to_fog(depth, beta)[1]
        out = models.restorer(restoration_input(rainy, det.rain, fog))
    return out.restored.data, det.rain.data, depth, fog

