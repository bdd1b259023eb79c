"""Rain-streak detection network with multi-scale GP semi-supervision.

Layout conventions: network inputs are 3D-EPI unit stacks ``[S, C, V, h, w]``;
internally features are channel-first ``[C, S, V, h, w]`` so the 4D
convolutions see the unit axis as a convolved axis.

Wiring of the detector::

    f0 = NonLocal(ReLU(conv4d(I)))
    f1 = Dense_1(f0)                 # 3x3x3x3 kernels
    f2 = Dense_2([f0, f1])           # 5x5x5x5
    f3 = Dense_3([f0, f1, f2])       # 7x7x7x7
    R' = F_conv([f1, f2, f3])
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .conv import avg_pool_hw, conv3d, upsample_hw
from .errors import ContractError, ShapeError
from .gp import FeatureBank, GpConfig, gp_loss, msgp_guide, posterior, unsup_loss_aggregate
from .lightfield import LightField, random_patch, to_epi_units
from .losses import mse, smooth_l1
from .nn import (Adam, Conv4d, Module, Pointwise, channel_concat, features_to_stack,
                 stack_to_features, uniform_init)
from .tensor import (Tensor, as_tensor, backward, getitem, matmul, no_grad, relu, reshape, scale,
                     softmax, transpose)


@dataclass
class NetConfig:
    width: int = 8
    dense_layers: int = 3
    conv_mode: str = "4d"
    use_nonlocal: bool = True
    nonlocal_factor: int = 2


class PerceptualProxy:
    """Frozen three-layer conv feature extractor standing in for VGG-16.

    Each layer is a 3x3 convolution, ReLU, then stride-2 subsampling; the
    channel widths are 8, 16, 16.  Weights come from a fixed seed and are
    plain constants, so no optimizer can ever reach them.
    """

    def __init__(self, seed: int = 1234, channels: Sequence[int] = (8, 16, 16), in_channels: int = 3):
        rng = np.random.default_rng(seed)
        self.layers = []
        c_in = in_channels
        for c_out in channels:
            fan = c_in * 9
            w = Tensor(uniform_init(rng, (c_out, c_in, 1, 3, 3), fan))
            b = Tensor(uniform_init(rng, (c_out,), fan))
            self.layers.append((w, b))
            c_in = c_out

    def features(self, images) -> Tensor:
        """``[N, C, h, w]`` images to ``[N, 16, h/8, w/8]`` features."""
        x = as_tensor(images)
        if x.ndim != 4:
            raise ShapeError(f"perceptual proxy expects [N,C,h,w], got {x.shape}")
        y = reshape(x, (x.shape[0], x.shape[1], 1) + x.shape[2:])
        for w, b in self.layers:
            y = relu(conv3d(y, w, b))
            y = getitem(y, (slice(None), slice(None), slice(None), slice(None, None, 2), slice(None, None, 2)))
        return reshape(y, (y.shape[0], y.shape[1]) + y.shape[3:])

    def distance(self, a, b) -> Tensor:
        """Mean squared feature difference of two image batches."""
        return mse(self.features(a), self.features(b))


def stack_images(x: Tensor) -> Tensor:
    """``[S, C, V, h, w]`` stack to an image batch ``[S*V, C, h, w]``."""
    S, C, V, h, w = x.shape
    return reshape(transpose(x, (0, 2, 1, 3, 4)), (S * V, C, h, w))


class NonLocal(Module):
    """Single-head embedded dot-product attention over pooled positions, residual."""

    def __init__(self, c: int, rng: np.random.Generator, factor: int = 2):
        super().__init__()
        inner = max(1, c // 2)
        self.theta = self.child("theta", Pointwise(c, inner, rng, bias=False))
        self.phi = self.child("phi", Pointwise(c, inner, rng, bias=False))
        self.g = self.child("g", Pointwise(c, inner, rng, bias=False))
        self.out = self.child("out", Pointwise(inner, c, rng, bias=False))
        self.inner = inner
        self.factor = factor

    def __call__(self, x: Tensor) -> Tensor:
        pooled = avg_pool_hw(x, self.factor) if self.factor > 1 else x
        shp = pooled.shape
        t = reshape(self.theta(pooled), (self.inner, -1))
        p = reshape(self.phi(pooled), (self.inner, -1))
        g = reshape(self.g(pooled), (self.inner, -1))
        attn = softmax(scale(matmul(transpose(t, (1, 0)), p), 1.0 / np.sqrt(self.inner)), axis=-1)
        y = matmul(g, transpose(attn, (1, 0)))  # y[:, i] = sum_j attn[i, j] g[:, j]
        y = self.out(reshape(y, (self.inner,) + shp[1:]))
        if self.factor > 1:
            y = upsample_hw(y, self.factor)
        return x + y


class DenseBlock(Module):
    """Densely connected 4D conv layers followed by a pointwise fusion to ``c_out``."""

    def __init__(self, c_in: int, growth: int, layers: int, k: int, c_out: int,
                 rng: np.random.Generator, conv_mode: str = "4d"):
        super().__init__()
        self.convs = []
        ch = c_in
        for i in range(layers):
            self.convs.append(self.child(f"conv{i}", Conv4d(ch, growth, k, rng, conv_mode)))
            ch += growth
        self.fuse = self.child("fuse", Pointwise(ch, c_out, rng))

    def __call__(self, x: Tensor) -> Tensor:
        feats = [x]
        for conv in self.convs:
            feats.append(relu(conv(channel_concat(feats))))
        return relu(self.fuse(channel_concat(feats)))


@dataclass
class DetectOutput:
    rain: Tensor                       # R' as a stack [S, 3, V, h, w]
    features: list[Tensor]             # f0..f3, channel-first
    central: list[Tensor]              # per-scale central-view vectors, length 3*h*w
    image_shape: tuple[int, int, int]


class MGPDNet(Module):
    def __init__(self, cfg: NetConfig | None = None, seed: int = 0, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg = cfg or NetConfig()
        rng = np.random.default_rng(seed)
        c, mode = cfg.width, cfg.conv_mode
        self.stem = self.child("stem", Conv4d(in_channels, c, 3, rng, mode))
        self.nonlocal_block = self.child("nonlocal", NonLocal(c, rng, cfg.nonlocal_factor))
        self.branches = []
        self.heads = []
        for k in (1, 2, 3):
            self.branches.append(self.child(
                f"dense{k}", DenseBlock(c * k, c, cfg.dense_layers, 2 * k + 1, c, rng, mode)))
            self.heads.append(self.child(f"proj{k}", Pointwise(c, 3, rng)))
        self.fconv = self.child("fconv", Conv4d(3 * c, 3, 3, rng, mode))

    def stem_forward(self, stack) -> Tensor:
        x = relu(self.stem(stack_to_features(as_tensor(stack))))
        return self.nonlocal_block(x) if self.cfg.use_nonlocal else x

    def __call__(self, stack) -> DetectOutput:
        stack = as_tensor(stack)
        if stack.ndim != 5:
            raise ShapeError(f"expected [S,C,V,h,w] stack, got {stack.shape}")
        S, _, V, h, w = stack.shape
        f0 = self.stem_forward(stack)
        feats = [f0]
        for branch in self.branches:
            feats.append(branch(channel_concat(feats)))
        rain = features_to_stack(self.fconv(channel_concat(feats[1:])))
        central = []
        for head, f in zip(self.heads, feats[1:]):
            p = getitem(head(f), (slice(None), S // 2, V // 2))
            central.append(reshape(p, (-1,)))
        return DetectOutput(rain, feats, central, (3, h, w))


def supervised_loss(pred, target, phi: PerceptualProxy | None, lambda_p: float = 0.04) -> Tensor:
    """Smooth-L1 plus perceptual distance between predicted and true rain stacks."""
    pred, target = as_tensor(pred), as_tensor(target)
    if pred.shape != target.shape:
        raise ShapeError(f"prediction {pred.shape} vs target {target.shape}")
    loss = smooth_l1(pred - target)
    if phi is not None and lambda_p > 0:
        loss = loss + scale(phi.distance(stack_images(pred), stack_images(target)), lambda_p)
    return loss


def side_loss(out: DetectOutput, target) -> Tensor:
    """Smooth-L1 of every per-scale central-view map against the central rain target.

    Keeps the per-scale feature vectors in the same space as the rain layer,
    so pseudo targets from one scale can guide the next.
    """
    target = as_tensor(target)
    S, V = target.shape[0], target.shape[2]
    ref = reshape(getitem(target, (S // 2, slice(None), V // 2)), (-1,))
    total = smooth_l1(out.central[0] - ref)
    for vec in out.central[1:]:
        total = total + smooth_l1(vec - ref)
    return scale(total, 1.0 / len(out.central))


def rain_loss(l_s, l_r) -> Tensor:
    return as_tensor(l_s) + as_tensor(l_r)


# ---------------------------------------------------------------------------
# training

@dataclass
class TrainStats:
    losses: list[float] = field(default_factory=list)


def _patch_pair(scene, patch, need_target: bool = True):
    inp = to_epi_units(scene.rainy, patch).data
    if not need_target:
        return inp, None
    tgt = scene.rain_target()
    if tgt is None:
        raise ContractError(f"scene {scene.name} has no ground-truth rain layer")
    return inp, to_epi_units(LightField(tgt), patch).data


def make_banks(dim: int, capacity: int | None, scales: int = 3) -> list[FeatureBank]:
    return [FeatureBank(dim, capacity) for _ in range(scales)]


def train_stage1(model: MGPDNet, scenes: Sequence, steps: int, lr: float = 1e-3,
                 patch_size: int = 8, seed: int = 0, banks: list[FeatureBank] | None = None,
                 phi: PerceptualProxy | None = None, lambda_p: float = 0.04,
                 optimizer: Adam | None = None, start_step: int = 0, on_step=None,
                 side_weight: float = 1.0) -> list[float]:
    """Supervised training on synthetic scenes; fills ``banks`` with central-view features.

    The optimised objective is ``L_s + side_weight * side_loss``; the
    returned and reported values are ``L_s`` alone.
    """
    if not scenes:
        raise ContractError("stage-1 training needs at least one synthetic scene")
    opt = optimizer or Adam([model], lr=lr)
    losses = []
    for step in range(start_step, steps):
        rng = np.random.default_rng([seed, 1, step])
        scene = scenes[step % len(scenes)]
        H, W = scene.rainy.spatial
        inp, tgt = _patch_pair(scene, random_patch(rng, H, W, patch_size))
        out = model(inp)
        loss = supervised_loss(out.rain, tgt, phi, lambda_p)
        objective = loss + scale(side_loss(out, tgt), side_weight) if side_weight > 0 else loss
        opt.step(backward(objective))
        if banks is not None:
            for bank, vec in zip(banks, out.central):
                bank.append(vec.data)
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, {"L_s": loss.item()})
    return losses


def stage2_loss(model: MGPDNet, stack, banks: Sequence[FeatureBank], gp_cfg: GpConfig,
                omega: float, phi: PerceptualProxy | None, lambda_gp: float = 0.015,
                lambda_p_real: float = 0.04) -> list[Tensor]:
    """Per-scale GP losses for one real patch, chaining scales through ``omega``."""
    out = model(stack)
    per_scale = []
    prev = None
    for k, (vec, bank) in enumerate(zip(out.central, banks)):
        x = vec if k == 0 or prev is None else msgp_guide(prev, vec, omega)
        post = posterior(x.data, bank, gp_cfg)
        per_scale.append(gp_loss(x, post, phi, lambda_gp, lambda_p_real, out.image_shape))
        prev = post.pseudo_gt
    return per_scale


def train_stage2(model: MGPDNet, scenes: Sequence, banks: Sequence[FeatureBank], steps: int,
                 gp_cfg: GpConfig | None = None, omega: float = 0.5, lr: float = 1e-3,
                 patch_size: int = 8, batch: int = 1, seed: int = 0,
                 phi: PerceptualProxy | None = None, lambda_gp: float = 0.015,
                 lambda_p_real: float = 0.04, optimizer: Adam | None = None,
                 start_step: int = 0, on_step=None) -> list[float]:
    """Unsupervised updates on real patches against the frozen feature banks."""
    gp_cfg = gp_cfg or GpConfig()
    if not banks or any(len(b) == 0 for b in banks):
        raise ContractError("stage-2 training needs populated feature banks")
    if not scenes:
        raise ContractError("stage-2 training needs at least one real scene")
    opt = optimizer or Adam([model], lr=lr)
    losses = []
    for step in range(start_step, steps):
        rng = np.random.default_rng([seed, 2, step])
        rows = []
        for j in range(batch):
            scene = scenes[(step * batch + j) % len(scenes)]
            H, W = scene.rainy.spatial
            inp, _ = _patch_pair(scene, random_patch(rng, H, W, patch_size), need_target=False)
            rows.append(stage2_loss(model, inp, banks, gp_cfg, omega, phi, lambda_gp, lambda_p_real))
        l_r = unsup_loss_aggregate(rows)
        opt.step(backward(l_r))
        losses.append(l_r.item())
        if on_step is not None:
            on_step(step, {"L_r": l_r.item()})
    return losses


def detect(model: MGPDNet, stack) -> np.ndarray:
    with no_grad():
        return model(stack).rain.data
