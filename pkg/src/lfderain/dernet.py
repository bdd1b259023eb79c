"""Depth estimation from rain-subtracted sub-views and depth-to-fog conversion.

The network is a 4D residual stack on ``[C, S, V, h, w]`` features::

    x = ReLU(stem(I - R'))
    x = x + conv_b(ReLU(conv_a(x)))      # repeated ``blocks`` times
    D' = softplus(head(x))               # one channel per sub-view, D' >= 0
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, ShapeError
from .lightfield import LightField, random_patch, to_epi_units
from .losses import smooth_l1
from .nn import Adam, Conv4d, Module, features_to_stack, stack_to_features
from .rain_synth import depth_to_fog
from .tensor import Tensor, as_tensor, backward, no_grad, relu, softplus


@dataclass
class DepthConfig:
    width: int = 8
    blocks: int = 3
    conv_mode: str = "4d"


class ResidualBlock(Module):
    def __init__(self, c: int, rng: np.random.Generator, conv_mode: str = "4d"):
        super().__init__()
        self.conv_a = self.child("conv_a", Conv4d(c, c, 3, rng, conv_mode))
        self.conv_b = self.child("conv_b", Conv4d(c, c, 3, rng, conv_mode))

    def __call__(self, x: Tensor) -> Tensor:
        return x + self.conv_b(relu(self.conv_a(x)))


class DERNet(Module):
    """Maps a rain-subtracted stack ``[S, 3, V, h, w]`` to depth ``[S, 1, V, h, w]``."""

    def __init__(self, cfg: DepthConfig | None = None, seed: int = 0, in_channels: int = 3):
        super().__init__()
        self.cfg = cfg = cfg or DepthConfig()
        rng = np.random.default_rng(seed)
        self.stem = self.child("stem", Conv4d(in_channels, cfg.width, 3, rng, cfg.conv_mode))
        self.blocks = [self.child(f"block{i}", ResidualBlock(cfg.width, rng, cfg.conv_mode))
                       for i in range(cfg.blocks)]
        self.head = self.child("head", Conv4d(cfg.width, 1, 3, rng, cfg.conv_mode))

    def __call__(self, stack) -> Tensor:
        stack = as_tensor(stack)
        if stack.ndim != 5:
            raise ShapeError(f"expected [S,C,V,h,w] stack, got {stack.shape}")
        x = relu(self.stem(stack_to_features(stack)))
        for block in self.blocks:
            x = block(x)
        return features_to_stack(softplus(self.head(x)))


def estimate_depth(model: DERNet, rainy, rain) -> Tensor:
    """Depth of the rain-subtracted stack ``rainy - rain``."""
    rainy, rain = as_tensor(rainy), as_tensor(rain)
    if rainy.shape != rain.shape:
        raise ShapeError(f"rainy stack {rainy.shape} vs rain stack {rain.shape}")
    return model(rainy - rain)


def fog_from_depth(depth, beta: float = 1.8) -> np.ndarray:
    """Fog map ``1 - exp(-beta D)``; the synthesis formula, shared verbatim."""
    return depth_to_fog(depth, beta)[1]


def train_dernet(model: DERNet, scenes: Sequence, steps: int, lr: float = 1e-3,
                 patch_size: int = 8, seed: int = 0, optimizer: Adam | None = None,
                 start_step: int = 0, freeze: bool = True, on_step=None) -> list[float]:
    """Fit depth on synthetic scenes, inputs being the rainy views minus the true rain layer.

    The model is frozen afterwards unless ``freeze`` is false (used when a
    run will be resumed).
    """
    if not scenes:
        raise ContractError("depth training needs at least one scene")
    for s in scenes:
        if s.depth is None or s.rain_target() is None:
            raise ContractError(f"scene {s.name} lacks ground-truth depth or rain")
    opt = optimizer or Adam([model], lr=lr)
    losses = []
    for step in range(start_step, steps):
        rng = np.random.default_rng([seed, 0, step])
        scene = scenes[step % len(scenes)]
        H, W = scene.rainy.spatial
        patch = random_patch(rng, H, W, patch_size)
        inp = to_epi_units(scene.rainy, patch).data
        rain = to_epi_units(LightField(scene.rain_target()), patch).data
        target = to_epi_units(scene.depth, patch).data
        loss = smooth_l1(estimate_depth(model, inp, rain) - target)
        opt.step(backward(loss))
        losses.append(loss.item())
        if on_step is not None:
            on_step(step, {"L_d": loss.item()})
    if freeze:
        model.freeze()
    return losses


def infer_depth(model: DERNet, rainy: np.ndarray, rain: np.ndarray) -> np.ndarray:
    with no_grad():
        return estimate_depth(model, rainy, rain).data
