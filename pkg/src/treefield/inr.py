"""Per-shape occupancy networks and their flat weight vectors.

Architecture (``d`` inputs, hidden size ``D``, ``L`` residual blocks)::

    h = relu(x W_in + b_in)
    h = h + relu(h W1 + b1) W2 + b2          (L times)
    f = sigmoid(h W_out + b_out)

The flat vector ``theta`` stores the arrays in exactly that order, each
weight row-major with shape [fan_in, fan_out].
"""

from __future__ import annotations

import json
import logging
import struct
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .sampling import PointSampler, oracle_dim

log = logging.getLogger(__name__)

MAGIC = b"INR1"
HEADER_BYTES = 4 + 4 * 4
META_LEN_BYTES = 8


class CheckpointFormatError(ValueError):
    pass


class TrainingError(FloatingPointError):
    pass


@dataclass(frozen=True)
class InrArch:
    d: int = 3
    D: int = 64
    L: int = 1

    def __post_init__(self):
        if self.d not in (2, 3) or self.D < 1 or self.L < 0:
            raise ValueError(f"invalid architecture {self}")

    @property
    def P(self) -> int:
        return param_count(self)

    def layer_shapes(self) -> list[tuple[str, tuple[int, ...]]]:
        d, D = self.d, self.D
        shapes = [("in.w", (d, D)), ("in.b", (D,))]
        for i in range(self.L):
            shapes += [
                (f"block{i}.w1", (D, D)),
                (f"block{i}.b1", (D,)),
                (f"block{i}.w2", (D, D)),
                (f"block{i}.b2", (D,)),
            ]
        shapes += [("out.w", (D, 1)), ("out.b", (1,))]
        return shapes

    def segment_lengths(self) -> list[int]:
        return [int(np.prod(s)) for _, s in self.layer_shapes()]

    def label(self) -> str:
        return f"d{self.d}-D{self.D}-L{self.L}"


def param_count(arch: InrArch) -> int:
    d, D, L = arch.d, arch.D, arch.L
    return (d * D + D) + L * 2 * (D * D + D) + (D + 1)


def checkpoint_size_bytes(arch: InrArch) -> int:
    """Bytes of the weight payload (4 per float32 parameter)."""
    return 4 * param_count(arch)


def unflatten(theta: np.ndarray, arch: InrArch) -> list[np.ndarray]:
    theta = np.asarray(theta)
    if theta.shape != (arch.P,):
        raise CheckpointFormatError(f"theta has {theta.size} values, architecture needs {arch.P}")
    out, off = [], 0
    for _, shape in arch.layer_shapes():
        n = int(np.prod(shape))
        out.append(theta[off : off + n].reshape(shape))
        off += n
    return out


def flatten(layers) -> np.ndarray:
    return np.concatenate([np.asarray(a, dtype=np.float32).ravel() for a in layers])


def init_layers(arch: InrArch, seed: int) -> list[np.ndarray]:
    """He-uniform weights, zero biases."""
    rng = np.random.default_rng(seed)
    out = []
    for name, shape in arch.layer_shapes():
        if name.endswith("b") or name.endswith(".b1") or name.endswith(".b2"):
            out.append(np.zeros(shape, np.float32))
        else:
            bound = np.sqrt(6.0 / shape[0])
            out.append(rng.uniform(-bound, bound, shape).astype(np.float32))
    return out


def network(layers, x, L: int) -> Tensor:
    """Forward pass through the gradcore ops (records on an active tape)."""
    h = gc.relu(gc.linear(x, layers[0], layers[1]))
    for i in range(L):
        w1, b1, w2, b2 = layers[2 + 4 * i : 6 + 4 * i]
        h = gc.add(h, gc.linear(gc.relu(gc.linear(h, w1, b1)), w2, b2))
    return gc.sigmoid(gc.linear(h, layers[-2], layers[-1]))


@dataclass
class InrCheckpoint:
    arch: InrArch
    theta: np.ndarray
    metadata: dict = field(default_factory=dict)
    history: list = field(default_factory=list, repr=False, compare=False)

    def __post_init__(self):
        self.theta = np.asarray(self.theta, dtype=np.float32)
        if self.theta.shape != (self.arch.P,):
            raise CheckpointFormatError(
                f"theta has {self.theta.size} values, architecture {self.arch.label()} needs {self.arch.P}"
            )

    @property
    def d(self) -> int:
        return self.arch.d

    @property
    def dim(self) -> int:
        return self.arch.d

    def layers(self) -> list[np.ndarray]:
        return unflatten(self.theta, self.arch)

    def forward(self, points, batch: int = 65536) -> np.ndarray:
        pts = np.asarray(points, dtype=np.float32)
        if pts.ndim != 2 or pts.shape[1] != self.arch.d:
            raise gc.DimensionError(f"points must be [M, {self.arch.d}], got {pts.shape}")
        layers = [Tensor(a) for a in self.layers()]
        out = np.empty(len(pts), np.float32)
        for s in range(0, len(pts), batch):
            out[s : s + batch] = network(layers, pts[s : s + batch], self.arch.L).data[:, 0]
        if not np.all(np.isfinite(out)):
            raise gc.NonFiniteError("INR produced non-finite values")
        return out

    def __call__(self, points):
        return self.forward(points)

    def to_bytes(self) -> bytes:
        meta = json.dumps(self.metadata, sort_keys=True).encode("utf-8")
        a = self.arch
        return b"".join(
            [
                MAGIC,
                struct.pack("<IIII", a.d, a.D, a.L, a.P),
                np.ascontiguousarray(self.theta, dtype="<f4").tobytes(),
                struct.pack("<Q", len(meta)),
                meta,
            ]
        )

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "InrCheckpoint":
        if len(raw) < HEADER_BYTES or raw[:4] != MAGIC:
            raise CheckpointFormatError(f"{source}: bad magic")
        d, D, L, P = struct.unpack("<IIII", raw[4:HEADER_BYTES])
        try:
            arch = InrArch(d, D, L)
        except ValueError as exc:
            raise CheckpointFormatError(f"{source}: {exc}") from None
        if arch.P != P:
            raise CheckpointFormatError(f"{source}: header P={P} disagrees with architecture ({arch.P})")
        end = HEADER_BYTES + 4 * P
        if len(raw) < end + META_LEN_BYTES:
            raise CheckpointFormatError(f"{source}: truncated")
        theta = np.frombuffer(raw, dtype="<f4", count=P, offset=HEADER_BYTES).astype(np.float32)
        (mlen,) = struct.unpack("<Q", raw[end : end + META_LEN_BYTES])
        meta_raw = raw[end + META_LEN_BYTES :]
        if len(meta_raw) != mlen:
            raise CheckpointFormatError(f"{source}: truncated metadata")
        return cls(arch, theta, json.loads(meta_raw.decode("utf-8")) if mlen else {})

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "InrCheckpoint":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def zeros_checkpoint(arch: InrArch) -> InrCheckpoint:
    return InrCheckpoint(arch, np.zeros(arch.P, np.float32))


@dataclass
class FitConfig:
    max_iters: int = 5000
    lr: float = 1e-3
    batch: int = 16384
    seed: int = 0
    init_seed: int | None = None  # shared across fits for weight-space comparisons
    tol: float | None = None  # stop once the running loss drops below this
    surface_fraction: float = 0.5
    band: float = 0.05
    window: int = 100
    schedule: str = "constant"  # or "cosine": anneal from lr toward lr_min over max_iters
    lr_min: float = 1e-5
    warmup: int = 0  # linear ramp over the first iterations; avoids saturating the sigmoid on wide nets

    def __post_init__(self):
        if self.max_iters < 1:
            raise ValueError("max_iters must be >= 1")
        if self.schedule not in ("constant", "cosine"):
            raise ValueError(f"unknown lr schedule {self.schedule!r}")
        if self.warmup < 0:
            raise ValueError("warmup must be >= 0")

    def lr_at(self, it: int) -> float:
        """Learning rate for 1-based iteration ``it``."""
        ramp = min(1.0, it / self.warmup) if self.warmup else 1.0
        if self.schedule == "constant":
            return self.lr * ramp
        frac = (it - 1) / max(self.max_iters - 1, 1)
        return ramp * (self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + np.cos(np.pi * frac)))


def train_loop(
    arch: InrArch,
    cfg: FitConfig,
    draw: Callable[[np.random.Generator], tuple[np.ndarray, np.ndarray]],
    callback: Callable[[int, list[np.ndarray]], None] | None = None,
    source: str = "",
) -> InrCheckpoint:
    """MSE fit of an INR with Adam on a fresh batch every iteration."""
    init_seed = cfg.seed if cfg.init_seed is None else cfg.init_seed
    params = [Tensor(a, requires_grad=True, name=n) for a, (n, _) in zip(init_layers(arch, init_seed), arch.layer_shapes())]
    state = gc.AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 1])
    recent: deque[float] = deque(maxlen=cfg.window)
    history = []
    it = 0
    for it in range(1, cfg.max_iters + 1):
        state.lr = cfg.lr_at(it)
        pts, target = draw(rng)
        with gc.Tape() as tape:
            pred = network(params, pts, arch.L)
            loss = gc.mse(pred, target[:, None])
        lv = float(loss.data)
        if not np.isfinite(lv):
            raise TrainingError(f"non-finite loss at iteration {it}")
        tape.backward(loss)
        gc.adam_update(params, state)
        recent.append(lv)
        history.append(lv)
        if callback is not None:
            callback(it, [p.data for p in params])
        if cfg.tol is not None and len(recent) == recent.maxlen and np.mean(recent) < cfg.tol:
            break
    running = float(np.mean(recent))
    log.debug("fit %s: %d iterations, running loss %.3g", source, it, running)
    meta = {
        "source": source,
        "final_loss": running,
        "iterations": it,
        "seed": cfg.seed,
        "init_seed": init_seed,
    }
    return InrCheckpoint(arch, flatten([p.data for p in params]), meta, history)


def fit(oracle, arch: InrArch, cfg: FitConfig | None = None, source: str = "", callback=None) -> InrCheckpoint:
    """Overfit one INR to an occupancy oracle."""
    cfg = cfg or FitConfig()
    if oracle_dim(oracle) != arch.d:
        raise gc.DimensionError(f"oracle is {oracle_dim(oracle)}D but architecture expects {arch.d}D")
    sampler = PointSampler(oracle, cfg.band)

    def draw(rng):
        b = sampler.draw(cfg.batch, cfg.surface_fraction, rng)
        return b.points, b.occupancies

    return train_loop(arch, cfg, draw, callback, source)


def running_mean(values, window: int = 100) -> np.ndarray:
    v = np.asarray(values, dtype=np.float64)
    if len(v) < window:
        return np.array([v.mean()]) if len(v) else v
    c = np.cumsum(np.insert(v, 0, 0.0))
    return (c[window:] - c[:-window]) / window
