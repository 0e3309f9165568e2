"""Convolutional conditional generator mapping an initial condition to a space-time field."""
from __future__ import annotations

import math
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import BatchNormState, Tensor


@dataclass(frozen=True)
class GeneratorConfig:
    resolution: int = 64
    base_resolution: int = 8
    base_channels: int = 32
    min_channels: int = 8
    seed: int = 0
    precision: int = 32
    bn_momentum: float = 0.1

    def __post_init__(self):
        n, b = self.resolution, self.base_resolution
        if not _is_pow2(n) or not 8 <= n <= 1024:
            raise ValueError(f"resolution must be a power of two in [8, 1024], got {n}")
        if not _is_pow2(b) or b > n:
            raise ValueError(f"base_resolution must be a power of two <= resolution, got {b}")
        if self.base_channels < 1 or self.min_channels < 1:
            raise ValueError("channel counts must be positive")
        ad.dtype_for(self.precision)

    @property
    def n_blocks(self) -> int:
        return int(math.log2(self.resolution // self.base_resolution))

    def channel_schedule(self) -> list[int]:
        """Channel count entering each block, followed by the head's input count."""
        chans = [self.base_channels]
        for _ in range(self.n_blocks):
            chans.append(max(self.min_channels, chans[-1] // 2))
        return chans

    def to_dict(self) -> dict:
        return asdict(self)


def _is_pow2(n: int) -> bool:
    return n > 0 and n & (n - 1) == 0


def parameter_layout(cfg: GeneratorConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Ordered (name, shape) list; the order defines the flat parameter vector."""
    n, b = cfg.resolution, cfg.base_resolution
    chans = cfg.channel_schedule()
    layout = [("embed.w", (n, b * b * chans[0])), ("embed.b", (b * b * chans[0],))]
    for k in range(cfg.n_blocks):
        cin, cout = chans[k], chans[k + 1]
        p = f"block{k}."
        layout += [
            (p + "conv1.w", (cout, cin, 3, 3)),
            (p + "bn1.gamma", (cout,)),
            (p + "bn1.beta", (cout,)),
            (p + "conv2.w", (cout, cout, 3, 3)),
            (p + "bn2.gamma", (cout,)),
            (p + "bn2.beta", (cout,)),
            (p + "skip.w", (cout, cin, 1, 1)),
            (p + "skip.b", (cout,)),
        ]
    layout += [("head.w", (1, chans[-1], 1, 1)), ("head.b", (1,))]
    return layout


def _fan_in(name: str, shape) -> int:
    if name == "embed.w":
        return shape[0]
    return int(np.prod(shape[1:]))


class Generator:
    """Holds a flat parameter vector plus batch-norm running statistics.

    ``params`` is the single source of truth; per-layer arrays are views into it.
    """

    def __init__(self, config: GeneratorConfig, params: np.ndarray | None = None):
        self.config = config
        self.dtype = ad.dtype_for(config.precision)
        self.layout = parameter_layout(config)
        self.offsets = {}
        off = 0
        for name, shape in self.layout:
            size = int(np.prod(shape))
            self.offsets[name] = (off, shape)
            off += size
        self.n_params = off
        if params is None:
            params = self._init_params()
        self.params = np.array(params, dtype=self.dtype)
        if self.params.shape != (self.n_params,):
            raise ValueError(f"parameter vector has length {self.params.size}, expected {self.n_params}")
        chans = config.channel_schedule()
        self.bn_states = []
        for k in range(config.n_blocks):
            for _ in range(2):
                self.bn_states.append(BatchNormState(chans[k + 1], momentum=config.bn_momentum, dtype=self.dtype))

    def _init_params(self) -> np.ndarray:
        rng = np.random.Generator(np.random.Philox(self.config.seed))
        out = np.zeros(self.n_params, dtype=np.float64)
        for name, shape in self.layout:
            off, _ = self.offsets[name]
            size = int(np.prod(shape))
            if name.endswith(".w"):
                bound = math.sqrt(6.0 / _fan_in(name, shape))
                out[off:off + size] = rng.uniform(-bound, bound, size)
            elif name.endswith(".gamma"):
                out[off:off + size] = 1.0
        return out

    def view(self, name: str) -> np.ndarray:
        off, shape = self.offsets[name]
        return self.params[off:off + int(np.prod(shape))].reshape(shape)

    # -- parameter vector round-trip

    def flatten(self) -> np.ndarray:
        return self.params.copy()

    def unflatten(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec)
        if vec.shape != (self.n_params,):
            raise ValueError(f"parameter vector has length {vec.size}, expected {self.n_params}")
        self.params[...] = vec

    def checksum(self) -> int:
        """CRC32 of the parameter bytes; fits exactly in a float64."""
        return zlib.crc32(self.params.tobytes())

    # -- batch-norm statistics as one flat vector

    def bn_stats(self) -> np.ndarray:
        if not self.bn_states:
            return np.zeros(0, dtype=self.dtype)
        return np.concatenate([s.running_mean for s in self.bn_states] + [s.running_var for s in self.bn_states])

    def set_bn_stats(self, vec: np.ndarray) -> None:
        vec = np.asarray(vec, dtype=self.dtype)
        total = sum(s.channels for s in self.bn_states)
        if vec.shape != (2 * total,):
            raise ValueError(f"bn stats vector has length {vec.size}, expected {2 * total}")
        off = 0
        for s in self.bn_states:
            s.running_mean[...] = vec[off:off + s.channels]
            off += s.channels
        for s in self.bn_states:
            s.running_var[...] = vec[off:off + s.channels]
            off += s.channels

    def copy(self) -> "Generator":
        g = Generator(self.config, self.params.copy())
        g.set_bn_stats(self.bn_stats())
        return g

    # -- graph construction

    def param_tensors(self, flat: Tensor | None = None) -> dict[str, Tensor]:
        """Leaf tensors for every parameter.

        With ``flat`` given, each parameter is sliced out of that tensor so the
        gradient lands on ``flat`` (used by grad checks).
        """
        out = {}
        for name, shape in self.layout:
            off, _ = self.offsets[name]
            size = int(np.prod(shape))
            if flat is None:
                out[name] = Tensor(self.view(name), requires_grad=True)
            else:
                out[name] = ad.reshape(ad.crop(flat, (slice(off, off + size),)), shape)
        return out

    def gather_grad(self, tensors: dict[str, Tensor]) -> np.ndarray:
        grad = np.zeros(self.n_params, dtype=self.dtype)
        for name, shape in self.layout:
            g = tensors[name].grad
            if g is not None:
                off, _ = self.offsets[name]
                grad[off:off + g.size] = g.reshape(-1)
        return grad


def build_generator(config: GeneratorConfig) -> Generator:
    """New generator with He-uniform weights drawn from ``config.seed``."""
    return Generator(config)


def forward(gen: Generator, ic_batch, mode: str = "eval", params: dict[str, Tensor] | None = None,
            update_stats: bool = True) -> Tensor:
    """Map an initial-condition batch [B, N] to fields [B, 1, N, N] with values in (0, 1)."""
    cfg = gen.config
    x = ic_batch if isinstance(ic_batch, Tensor) else Tensor(np.asarray(ic_batch, dtype=gen.dtype))
    if x.data.ndim != 2 or x.shape[1] != cfg.resolution:
        raise ad.ShapeError(f"forward: ic_batch must have shape [B, {cfg.resolution}], got {x.shape}")
    p = gen.param_tensors() if params is None else params
    B = x.shape[0]
    b, chans = cfg.base_resolution, cfg.channel_schedule()

    h = ad.relu(ad.dense(x, p["embed.w"], p["embed.b"]))
    h = ad.reshape(h, (B, chans[0], b, b))
    for k in range(cfg.n_blocks):
        pre = f"block{k}."
        bn1, bn2 = gen.bn_states[2 * k], gen.bn_states[2 * k + 1]
        u = ad.upsample2x(h)
        a = ad.conv2d(u, p[pre + "conv1.w"], "same")
        a = ad.relu(ad.batchnorm(a, p[pre + "bn1.gamma"], p[pre + "bn1.beta"], bn1, mode, update_stats))
        a = ad.conv2d(a, p[pre + "conv2.w"], "same")
        a = ad.batchnorm(a, p[pre + "bn2.gamma"], p[pre + "bn2.beta"], bn2, mode, update_stats)
        s = ad.conv2d(u, p[pre + "skip.w"], "same", bias=p[pre + "skip.b"])
        h = ad.relu(ad.add(a, s))
    out = ad.conv2d(h, p["head.w"], "same", bias=p["head.b"])
    return ad.sigmoid(out)
