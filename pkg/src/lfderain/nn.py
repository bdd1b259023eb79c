"""Parameter containers, layers, the Adam optimizer and checkpoint files.

Checkpoint binary layout (all integers unsigned 64-bit little-endian, all
reals float64 little-endian)::

    count
    repeated count times:
        name_length, name bytes (utf-8), rank, dims[rank], values (row-major)
"""

from __future__ import annotations

import hashlib
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .conv import conv4d
from .errors import ContractError, DomainError, FormatError, ShapeError
from .tensor import Gradients, Tensor, concat, matmul, reshape, transpose

CONV_MODES = ("2d", "3d", "4d")


class Module:
    """Named parameter tree with a freeze switch."""

    def __init__(self):
        self._params: dict[str, Tensor] = {}
        self._children: dict[str, Module] = {}
        self.frozen = False

    def param(self, name: str, value: np.ndarray) -> Tensor:
        t = Tensor(value, requires_grad=not self.frozen, name=name)
        self._params[name] = t
        return t

    def child(self, name: str, module: "Module") -> "Module":
        self._children[name] = module
        return module

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, Tensor]]:
        for name, t in self._params.items():
            yield prefix + name, t
        for cname, c in self._children.items():
            yield from c.named_parameters(prefix + cname + ".")

    def parameters(self) -> list[Tensor]:
        return [t for _, t in self.named_parameters()]

    def state_dict(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = sorted(set(own) - set(state))
        if missing:
            raise ContractError(f"checkpoint lacks tensors: {', '.join(missing)}")
        bad = [f"{n} {state[n].shape} != {t.shape}" for n, t in own.items()
               if state[n].shape != t.shape]
        if bad:
            raise ContractError("checkpoint incompatible with network widths: " + "; ".join(bad))
        for n, t in own.items():
            t.data = np.array(state[n], dtype=np.float64)

    def freeze(self) -> None:
        self.frozen = True
        for c in self._children.values():
            c.freeze()
        for t in self._params.values():
            t.requires_grad = False

    def is_frozen(self) -> bool:
        return self.frozen or any(c.is_frozen() for c in self._children.values())

    def zero_(self) -> None:
        """Set every weight and bias to zero (null-network checks)."""
        for t in self.parameters():
            t.data = np.zeros_like(t.data)

    def checksum(self) -> str:
        h = hashlib.sha256()
        for name, t in self.named_parameters():
            h.update(name.encode())
            h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


def uniform_init(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def kernel_extents(k: int, conv_mode: str) -> tuple[int, int, int, int]:
    """Kernel extents over (S, V, H, W) for a convolution mode.

    ``4d`` couples units and views, ``3d`` convolves inside each 3D-EPI unit,
    ``2d`` convolves each sub-view on its own.
    """
    if conv_mode == "4d":
        return (k, k, k, k)
    if conv_mode == "3d":
        return (1, k, k, k)
    if conv_mode == "2d":
        return (1, 1, k, k)
    raise DomainError(f"conv_mode must be one of {CONV_MODES}, got {conv_mode!r}")


class Conv4d(Module):
    """4D convolution layer over ``[C, S, V, H, W]`` features."""

    def __init__(self, c_in: int, c_out: int, k: int, rng: np.random.Generator,
                 conv_mode: str = "4d", bias: bool = True):
        super().__init__()
        ext = kernel_extents(k, conv_mode)
        fan_in = c_in * int(np.prod(ext))
        self.weight = self.param("weight", uniform_init(rng, (c_out, c_in) + ext, fan_in))
        self.bias = self.param("bias", uniform_init(rng, (c_out,), fan_in)) if bias else None
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, x: Tensor) -> Tensor:
        return conv4d(x, self._params["weight"], self._params.get("bias"))


class Pointwise(Module):
    """Per-position channel mixing (a 1x1x1x1 convolution) for ``[C, ...]`` inputs."""

    def __init__(self, c_in: int, c_out: int, rng: np.random.Generator, bias: bool = True):
        super().__init__()
        self.param("weight", uniform_init(rng, (c_out, c_in), c_in))
        if bias:
            self.param("bias", uniform_init(rng, (c_out,), c_in))
        self.c_in, self.c_out = c_in, c_out

    def __call__(self, x: Tensor) -> Tensor:
        if x.shape[0] != self.c_in:
            raise ShapeError(f"pointwise layer expects {self.c_in} channels, got {x.shape[0]}")
        rest = x.shape[1:]
        flat = reshape(x, (self.c_in, -1))
        y = matmul(self._params["weight"], flat)
        if "bias" in self._params:
            y = y + reshape(self._params["bias"], (-1, 1))
        return reshape(y, (self.c_out,) + rest)


def channel_concat(xs: Iterable[Tensor]) -> Tensor:
    return concat(list(xs), axis=0)


def stack_to_features(stack: np.ndarray | Tensor) -> Tensor:
    """``[S, C, V, H, W]`` 3D-EPI unit stack to channel-first ``[C, S, V, H, W]``."""
    t = stack if isinstance(stack, Tensor) else Tensor(stack)
    return transpose(t, (1, 0, 2, 3, 4))


def features_to_stack(x: Tensor) -> Tensor:
    return transpose(x, (1, 0, 2, 3, 4))


class Adam:
    """Adam over a fixed list of modules.

    Stepping raises :class:`ContractError` if any registered module has been
    frozen, so frozen sub-networks can never be updated by accident.  The
    learning rate is multiplied by ``decay`` every ``decay_every`` steps
    (``decay_every = 0`` keeps it constant).
    """

    def __init__(self, modules: Iterable[Module], lr: float = 2e-4, betas=(0.9, 0.999),
                 eps: float = 1e-8, decay: float = 1.0, decay_every: int = 0):
        self.modules = list(modules)
        for m in self.modules:
            if m.is_frozen():
                raise ContractError(f"cannot optimise frozen module {type(m).__name__}")
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.decay, self.decay_every = decay, decay_every
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def current_lr(self) -> float:
        if self.decay_every <= 0:
            return self.lr
        return self.lr * self.decay ** (self.t // self.decay_every)

    def params(self) -> list[Tensor]:
        return [p for m in self.modules for p in m.parameters()]

    def step(self, grads: Gradients) -> None:
        for m in self.modules:
            if m.is_frozen():
                raise ContractError(f"attempted update of frozen module {type(m).__name__}")
        lr = self.current_lr()
        self.t += 1
        c1 = 1.0 - self.b1 ** self.t
        c2 = 1.0 - self.b2 ** self.t
        for i, p in enumerate(self.params()):
            g = grads.get(p)
            if g is None:
                continue
            m = self.m.get(i)
            v = self.v.get(i)
            m = (1 - self.b1) * g if m is None else self.b1 * m + (1 - self.b1) * g
            v = (1 - self.b2) * g * g if v is None else self.b2 * v + (1 - self.b2) * g * g
            self.m[i], self.v[i] = m, v
            p.data = p.data - lr * (m / c1) / (np.sqrt(v / c2) + self.eps)

    def state(self) -> dict[str, np.ndarray]:
        out = {"adam.t": np.array([float(self.t)])}
        for i in self.m:
            out[f"adam.m.{i}"] = self.m[i]
            out[f"adam.v.{i}"] = self.v[i]
        return out

    def load_state(self, state: dict[str, np.ndarray]) -> None:
        self.t = int(state["adam.t"][0])
        self.m = {int(k.split(".")[2]): v.copy() for k, v in state.items() if k.startswith("adam.m.")}
        self.v = {int(k.split(".")[2]): v.copy() for k, v in state.items() if k.startswith("adam.v.")}


# ---------------------------------------------------------------------------
# checkpoint files

_U64 = struct.Struct("<Q")


def save_tensors(path: str | Path, tensors: dict[str, np.ndarray]) -> None:
    parts = [_U64.pack(len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(_U64.pack(len(raw)))
        parts.append(raw)
        parts.append(_U64.pack(arr.ndim))
        parts.extend(_U64.pack(d) for d in arr.shape)
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_tensors(path: str | Path) -> dict[str, np.ndarray]:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n: int) -> bytes:
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos:pos + n]
        pos += n
        return chunk

    out: dict[str, np.ndarray] = {}
    (count,) = _U64.unpack(take(8))
    for _ in range(count):
        (nlen,) = _U64.unpack(take(8))
        name = take(nlen).decode("utf-8")
        (rank,) = _U64.unpack(take(8))
        dims = tuple(_U64.unpack(take(8))[0] for _ in range(rank))
        n = int(np.prod(dims)) if dims else 1
        out[name] = np.frombuffer(take(8 * n), dtype="<f8").reshape(dims).astype(np.float64)
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after {count} tensors")
    return out


def save_module(path: str | Path, module: Module) -> None:
    save_tensors(path, module.state_dict())


def load_module(path: str | Path, module: Module) -> None:
    module.load_state_dict(load_tensors(path))
