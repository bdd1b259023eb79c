"""Gaussian-process pseudo-labels for unlabeled (real) rain features.

Synthetic feature vectors collected during supervised training form a bank
per scale.  For a real feature vector the GP (zero mean, cosine kernel,
noise variance ``sigma_eps**2``) conditioned on its nearest bank vectors
gives a pseudo target; posterior variances against the nearest and the
farthest bank vectors enter the unsupervised loss.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import linalg

from .errors import ContractError, DomainError, FormatError, NumericError, ShapeError
from .tensor import Tensor, add, as_tensor, l2_norm, reshape, scale

VAR_EPS = 1e-6


@dataclass
class GpConfig:
    sigma_eps: float = 0.1
    n_near: int = 16
    n_far: int = 16

    def validate(self, bank_size: int | None = None) -> None:
        if self.sigma_eps <= 0:
            raise DomainError("sigma_eps must be positive")
        if self.n_near < 1 or self.n_far < 1:
            raise DomainError("n_near and n_far must be at least 1")
        if bank_size is not None and bank_size < max(self.n_near, self.n_far):
            raise ContractError(
                f"bank holds {bank_size} vectors, need at least {max(self.n_near, self.n_far)}")


@dataclass
class GpPosterior:
    pseudo_gt: np.ndarray
    var_near: float
    var_far: float


class FeatureBank:
    """FIFO matrix of stored synthetic feature vectors for one scale.

    File layout: ``d`` and ``N`` as unsigned 64-bit little-endian integers,
    then ``N x d`` float64 little-endian values, row-major.
    """

    def __init__(self, dim: int, capacity: int | None = None):
        self.dim = int(dim)
        self.capacity = capacity
        self._rows: list[np.ndarray] = []

    def __len__(self) -> int:
        return len(self._rows)

    def append(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=np.float64).reshape(-1)
        if vec.size != self.dim:
            raise ShapeError(f"bank stores vectors of length {self.dim}, got {vec.size}")
        self._rows.append(vec.copy())
        if self.capacity is not None and len(self._rows) > self.capacity:
            del self._rows[0]

    @property
    def matrix(self) -> np.ndarray:
        if not self._rows:
            return np.zeros((0, self.dim))
        return np.stack(self._rows)

    def save(self, path: str | Path) -> None:
        m = np.ascontiguousarray(self.matrix, dtype="<f8")
        Path(path).write_bytes(struct.pack("<QQ", self.dim, m.shape[0]) + m.tobytes())

    @classmethod
    def load(cls, path: str | Path, capacity: int | None = None) -> "FeatureBank":
        blob = Path(path).read_bytes()
        if len(blob) < 16:
            raise FormatError(f"{path}: feature bank header truncated")
        d, n = struct.unpack("<QQ", blob[:16])
        if len(blob) != 16 + 8 * d * n:
            raise FormatError(f"{path}: expected {n}x{d} float64 values")
        bank = cls(d, capacity)
        m = np.frombuffer(blob[16:], dtype="<f8").reshape(n, d)
        for row in m:
            bank.append(row)
        return bank


def _unit_rows(m: np.ndarray) -> np.ndarray:
    m = np.atleast_2d(np.asarray(m, dtype=np.float64))
    n = np.linalg.norm(m, axis=1, keepdims=True)
    if np.any(n == 0):
        raise DomainError("cosine kernel undefined for a zero vector")
    return m / n


def kernel_eval(x: np.ndarray, y: np.ndarray) -> float:
    """Cosine kernel ``<x, y> / (|x| |y|)``."""
    x = np.asarray(x, dtype=np.float64).ravel()
    y = np.asarray(y, dtype=np.float64).ravel()
    if x.size != y.size:
        raise ShapeError(f"kernel operands differ in length: {x.size} vs {y.size}")
    return float(_unit_rows(x)[0] @ _unit_rows(y)[0])


def kernel_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return _unit_rows(a) @ _unit_rows(b).T


def select_banks(f_r: np.ndarray, bank: np.ndarray | FeatureBank, cfg: GpConfig):
    """Nearest ``n_near`` and farthest ``n_far`` bank vectors by cosine similarity.

    Ties keep ascending bank order.  Returns ``(near, far, near_idx, far_idx)``.
    """
    m = bank.matrix if isinstance(bank, FeatureBank) else np.asarray(bank, dtype=np.float64)
    cfg.validate(m.shape[0])
    sims = kernel_matrix(m, f_r)[:, 0]
    order = np.argsort(-sims, kind="stable")
    near_idx = order[:cfg.n_near]
    far_idx = np.argsort(sims, kind="stable")[:cfg.n_far]
    return m[near_idx], m[far_idx], near_idx, far_idx


def _solve(gram: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    try:
        c = linalg.cho_factor(gram, lower=True)
        return linalg.cho_solve(c, rhs)
    except linalg.LinAlgError as exc:
        raise NumericError(f"GP system not positive definite: {exc}") from None


def _reg_gram(F: np.ndarray, cfg: GpConfig) -> np.ndarray:
    return kernel_matrix(F, F) + cfg.sigma_eps ** 2 * np.eye(F.shape[0])


def gp_weights(f_r: np.ndarray, F_n: np.ndarray, cfg: GpConfig) -> np.ndarray:
    """Coefficients ``(K(F,F) + s^2 I)^-1 K(F, f_r)`` over the selected bank rows."""
    return _solve(_reg_gram(F_n, cfg), kernel_matrix(F_n, f_r)[:, 0])


def gp_posterior(f_r: np.ndarray, F_n: np.ndarray, cfg: GpConfig) -> np.ndarray:
    """Posterior-mean pseudo target: a weighted combination of the rows of ``F_n``."""
    F_n = np.atleast_2d(np.asarray(F_n, dtype=np.float64))
    return gp_weights(f_r, F_n, cfg) @ F_n


def posterior_variance(f_r: np.ndarray, F: np.ndarray, cfg: GpConfig) -> float:
    """Unclamped noisy predictive variance of ``f_r`` given bank rows ``F``."""
    F = np.atleast_2d(np.asarray(F, dtype=np.float64))
    kx = kernel_matrix(F, f_r)[:, 0]
    return float(1.0 + cfg.sigma_eps ** 2 - kx @ _solve(_reg_gram(F, cfg), kx))


def gp_variances(f_r: np.ndarray, F_n: np.ndarray, F_f: np.ndarray, cfg: GpConfig,
                 clamp: bool = True) -> tuple[float, float]:
    """Variances against the nearest and the farthest banks.

    With ``clamp`` both are limited to ``[1e-6, 1 - 1e-6]`` so the logs in
    the unsupervised loss stay finite.
    """
    vn = posterior_variance(f_r, F_n, cfg)
    vf = posterior_variance(f_r, F_f, cfg)
    if clamp:
        vn = float(np.clip(vn, VAR_EPS, 1.0 - VAR_EPS))
        vf = float(np.clip(vf, VAR_EPS, 1.0 - VAR_EPS))
    return vn, vf


def posterior(f_r: np.ndarray, bank, cfg: GpConfig) -> GpPosterior:
    """Bank selection, pseudo target and clamped variances for one vector."""
    near, far, _, _ = select_banks(f_r, bank, cfg)
    vn, vf = gp_variances(f_r, near, far, cfg)
    return GpPosterior(gp_posterior(f_r, near, cfg), vn, vf)


def msgp_guide(pseudo_prev, f_curr, omega: float):
    """``omega * pseudo_prev + (1 - omega) * f_curr``; differentiable in ``f_curr``."""
    if not 0.0 <= omega <= 1.0:
        raise DomainError(f"omega must lie in [0,1], got {omega}")
    if isinstance(f_curr, Tensor) or isinstance(pseudo_prev, Tensor):
        a, b = as_tensor(pseudo_prev), as_tensor(f_curr)
        if a.size != b.size:
            raise ShapeError(f"guide length {a.size} != feature length {b.size}")
        return add(scale(a, omega), scale(b, 1.0 - omega))
    a = np.asarray(pseudo_prev, dtype=np.float64)
    b = np.asarray(f_curr, dtype=np.float64)
    if a.shape != b.shape:
        raise ShapeError(f"guide shape {a.shape} != feature shape {b.shape}")
    return omega * a + (1.0 - omega) * b


def gp_loss(f_r: Tensor, post: GpPosterior, perceptual=None, lambda_gp: float = 0.015,
            lambda_p_real: float = 0.04, image_shape: Sequence[int] | None = None) -> Tensor:
    """Per-patch, per-scale unsupervised GP loss.

    ``lambda_gp * (|f_r - pseudo| + log var_near + log(1 - var_far))``
    plus ``lambda_p_real`` times the perceptual distance between ``f_r`` and
    the pseudo target reshaped to ``image_shape``.  The pseudo target and
    the variances are constants.
    """
    f_r = as_tensor(f_r)
    if not (0.0 < post.var_near < 1.0 and 0.0 < post.var_far < 1.0):
        raise DomainError("variances must lie strictly inside (0, 1)")
    target = Tensor(post.pseudo_gt.reshape(f_r.shape))
    const = np.log(post.var_near) + np.log(1.0 - post.var_far)
    loss = scale(add(l2_norm(f_r - target), const), lambda_gp)
    if perceptual is not None and lambda_p_real > 0:
        if image_shape is None:
            raise ContractError("image_shape is required for the perceptual term")
        shp = (1,) + tuple(image_shape)
        loss = loss + scale(perceptual.distance(reshape(f_r, shp), reshape(target, shp)),
                            lambda_p_real)
    return loss


def unsup_loss_aggregate(losses: Sequence[Sequence[Tensor]]) -> Tensor:
    """Mean of ``losses[j][k]`` over real patches ``j`` and scales ``k``."""
    flat = [as_tensor(l) for row in losses for l in row]
    if not flat:
        raise DomainError("no per-patch losses to aggregate")
    total = flat[0]
    for l in flat[1:]:
        total = total + l
    return scale(total, 1.0 / len(flat))
