"""Denoising diffusion over flattened INR weight vectors.

Weights are normalized per coordinate, cut into fixed-size tokens along
layer boundaries, and denoised by a small transformer that predicts the
clean (normalized) vector directly. Sampling uses DDIM.
"""

from __future__ import annotations

import io
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import gradcore as gc
from .gradcore import Tensor
from .inr import InrArch, InrCheckpoint

log = logging.getLogger(__name__)

MAGIC = b"DDM1"
VERSION = 1
STD_FLOOR = 1e-6


class DatasetError(ValueError):
    pass


class DenoiserFormatError(ValueError):
    pass


# ------------------------------------------------------------------ schedule


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 1e-2

    def __post_init__(self):
        if self.T < 1 or not 0 < self.beta_start <= self.beta_end < 1:
            raise ValueError(f"invalid schedule {self}")

    @property
    def betas(self) -> np.ndarray:
        """beta_1..beta_T (index 0 is step 1)."""
        if self.T == 1:
            return np.array([self.beta_start])
        return np.linspace(self.beta_start, self.beta_end, self.T)

    @property
    def alphas(self) -> np.ndarray:
        return 1.0 - self.betas

    @property
    def alpha_bar(self) -> np.ndarray:
        """Cumulative products indexed by t = 0..T, with alpha_bar[0] = 1."""
        return np.concatenate([[1.0], np.cumprod(self.alphas)])

    def check_step(self, t) -> None:
        t = np.asarray(t)
        if np.any(t < 1) or np.any(t > self.T):
            raise ValueError(f"timestep out of range 1..{self.T}")


def forward_noise(theta0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form q(theta_t | theta_0). ``t`` may be a scalar or one step per row."""
    schedule.check_step(t)
    ab = schedule.alpha_bar[np.asarray(t)]
    theta0 = np.asarray(theta0)
    if np.ndim(ab) == 1 and theta0.ndim == 2:
        ab = ab[:, None]
    return np.sqrt(ab) * theta0 + np.sqrt(1.0 - ab) * np.asarray(eps)


# ------------------------------------------------------------------ tokens


@dataclass(frozen=True)
class TokenLayout:
    segment_lengths: tuple[int, ...]
    C: int = 576

    def __post_init__(self):
        if self.C < 1 or not self.segment_lengths or min(self.segment_lengths) < 1:
            raise ValueError("layout needs C >= 1 and positive segment lengths")

    @classmethod
    def for_arch(cls, arch: InrArch, C: int = 576) -> "TokenLayout":
        return cls(tuple(arch.segment_lengths()), C)

    @property
    def P(self) -> int:
        return sum(self.segment_lengths)

    @property
    def token_counts(self) -> list[int]:
        return [-(-n // self.C) for n in self.segment_lengths]

    @property
    def k(self) -> int:
        return sum(self.token_counts)

    def segments(self) -> list[tuple[int, int, int]]:
        """(offset, length, token_count) per layer segment."""
        out, off = [], 0
        for n, c in zip(self.segment_lengths, self.token_counts):
            out.append((off, n, c))
            off += n
        return out

    def slot_index(self) -> np.ndarray:
        """Theta index for each of the k*C token slots, -1 for padding."""
        idx = np.full(self.k * self.C, -1, dtype=np.int64)
        slot = 0
        for off, n, c in self.segments():
            idx[slot : slot + n] = np.arange(off, off + n)
            slot += c * self.C
        return idx

    def valid_mask(self) -> np.ndarray:
        return (self.slot_index() >= 0).reshape(self.k, self.C)


def tokenize(theta, layout: TokenLayout) -> np.ndarray:
    """[P] -> [k, C] (or [B, P] -> [B, k, C]), zero padding per layer."""
    theta = np.asarray(theta)
    if theta.shape[-1] != layout.P:
        raise gc.DimensionError(f"theta has {theta.shape[-1]} values, layout expects {layout.P}")
    idx = layout.slot_index()
    valid = idx >= 0
    out = np.zeros(theta.shape[:-1] + (idx.size,), dtype=theta.dtype)
    out[..., valid] = theta[..., idx[valid]]
    return out.reshape(theta.shape[:-1] + (layout.k, layout.C))


def detokenize(tokens, layout: TokenLayout) -> np.ndarray:
    tokens = np.asarray(tokens)
    if tokens.shape[-2:] != (layout.k, layout.C):
        raise gc.DimensionError(f"tokens {tokens.shape} do not match layout ({layout.k}, {layout.C})")
    idx = layout.slot_index()
    valid = idx >= 0
    flat = tokens.reshape(tokens.shape[:-2] + (idx.size,))
    out = np.empty(tokens.shape[:-2] + (layout.P,), dtype=tokens.dtype)
    out[..., idx[valid]] = flat[..., valid]
    return out


# ------------------------------------------------------------------ denoiser


@dataclass
class Block:
    ln1_g: Tensor
    ln1_b: Tensor
    attn: gc.AttentionParams
    ln2_g: Tensor
    ln2_b: Tensor
    ff_w1: Tensor
    ff_b1: Tensor
    ff_w2: Tensor
    ff_b2: Tensor

    def tensors(self) -> list[Tensor]:
        return [
            self.ln1_g,
            self.ln1_b,
            *self.attn.tensors(),
            self.ln2_g,
            self.ln2_b,
            self.ff_w1,
            self.ff_b1,
            self.ff_w2,
            self.ff_b2,
        ]


@dataclass
class DenoiserParams:
    in_w: Tensor  # [k, C, H]
    in_b: Tensor  # [k, H]
    pos: Tensor  # [k, H]
    time_w: Tensor  # [H, H]
    time_b: Tensor  # [H]
    blocks: list[Block]
    out_w: Tensor  # [k, H, C]
    out_b: Tensor  # [k, C]
    heads: int = 4

    @property
    def H(self) -> int:
        return self.pos.shape[1]

    def tensors(self) -> list[Tensor]:
        out = [self.in_w, self.in_b, self.pos, self.time_w, self.time_b]
        for b in self.blocks:
            out += b.tensors()
        return out + [self.out_w, self.out_b]

    @classmethod
    def init(
        cls,
        layout: TokenLayout,
        H: int = 128,
        n_blocks: int = 4,
        heads: int = 4,
        seed: int = 0,
        dtype=np.float32,
    ) -> "DenoiserParams":
        if H % heads:
            raise gc.ConfigurationError(f"hidden size {H} not divisible by {heads} heads")
        rng = np.random.default_rng(seed)
        k, C = layout.k, layout.C

        def t(a, name):
            return Tensor(np.asarray(a, dtype), requires_grad=True, name=name)

        def uni(shape, fan_in, name):
            b = np.sqrt(1.0 / fan_in)
            return t(rng.uniform(-b, b, shape), name)

        blocks = []
        for i in range(n_blocks):
            p = f"block{i}"
            blocks.append(
                Block(
                    t(np.ones(H), f"{p}.ln1_g"),
                    t(np.zeros(H), f"{p}.ln1_b"),
                    gc.AttentionParams.init(H, rng, dtype, prefix=f"{p}.attn"),
                    t(np.ones(H), f"{p}.ln2_g"),
                    t(np.zeros(H), f"{p}.ln2_b"),
                    uni((H, 4 * H), H, f"{p}.ff_w1"),
                    t(np.zeros(4 * H), f"{p}.ff_b1"),
                    uni((4 * H, H), 4 * H, f"{p}.ff_w2"),
                    t(np.zeros(H), f"{p}.ff_b2"),
                )
            )
        return cls(
            uni((k, C, H), C, "in_w"),
            t(np.zeros((k, H)), "in_b"),
            t(rng.normal(0, 0.02, (k, H)), "pos"),
            uni((H, H), H, "time_w"),
            t(np.zeros(H), "time_b"),
            blocks,
            # zero output projections: the untrained model predicts the mean
            t(np.zeros((k, H, C)), "out_w"),
            t(np.zeros((k, C)), "out_b"),
            heads,
        )


def timestep_embedding(t, H: int) -> np.ndarray:
    """Sinusoidal embedding [B, H]: sin then cos at frequencies 10000^(-2j/H)."""
    t = np.atleast_1d(np.asarray(t, dtype=np.float64))
    freqs = 10000.0 ** (-2.0 * np.arange(H // 2) / H)
    ang = t[:, None] * freqs[None]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1)


def denoiser_forward(params: DenoiserParams, tokens, t) -> Tensor:
    """Tokens [B, k, C] of noisy normalized weights -> predicted clean tokens."""
    dtype = params.pos.dtype
    emb = timestep_embedding(t, params.H).astype(dtype)
    temb = gc.linear(emb, params.time_w, params.time_b)
    B = emb.shape[0]
    h = gc.token_linear(tokens, params.in_w, params.in_b)
    h = gc.add(h, params.pos)
    h = gc.add(h, gc.reshape(temb, (B, 1, params.H)))
    for blk in params.blocks:
        a = gc.multihead_self_attention(gc.layer_norm(h, blk.ln1_g, blk.ln1_b), blk.attn, params.heads)
        h = gc.add(h, a)
        f = gc.layer_norm(h, blk.ln2_g, blk.ln2_b)
        f = gc.linear(gc.relu(gc.linear(f, blk.ff_w1, blk.ff_b1)), blk.ff_w2, blk.ff_b2)
        h = gc.add(h, f)
    return gc.token_linear(h, params.out_w, params.out_b)


def masked_mse(pred_tokens: Tensor, target_tokens, mask) -> Tensor:
    """MSE over the real (non-padding) coordinates only."""
    m = np.broadcast_to(mask, np.shape(target_tokens)).astype(pred_tokens.dtype)
    diff = gc.mul(gc.sub(pred_tokens, target_tokens), m)
    return gc.mul(gc.sum_all(gc.square(diff)), float(1.0 / m.sum()))


def denoise(theta_star, t, params: DenoiserParams, layout: TokenLayout, schedule: NoiseSchedule | None = None):
    """Predict the clean normalized vector(s) from noisy ones at step ``t``."""
    x = np.asarray(theta_star)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != layout.P:
        raise gc.DimensionError(f"theta has {x.shape[1]} values, layout expects {layout.P}")
    if schedule is not None:
        schedule.check_step(t)
    tt = np.broadcast_to(np.asarray(t), (len(x),))
    out = denoiser_forward(params, tokenize(x.astype(params.pos.dtype), layout), tt).data
    out = detokenize(out, layout)
    return out[0] if single else out


# ------------------------------------------------------------------ model


@dataclass
class DiffusionConfig:
    epochs: int = 6000
    batch: int = 8
    lr: float = 1e-3
    lr_decay: float = 0.9
    decay_every: int = 200
    seed: int = 0
    H: int = 128
    blocks: int = 4
    heads: int = 4
    C: int = 576
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 1e-2
    tol: float | None = None  # stop once the windowed epoch loss drops below this
    window: int = 50

    def __post_init__(self):
        if self.epochs < 1 or self.batch < 1:
            raise ValueError("epochs and batch must be >= 1")


@dataclass
class DiffusionModel:
    arch: InrArch
    layout: TokenLayout
    schedule: NoiseSchedule
    params: DenoiserParams
    mean: np.ndarray
    std: np.ndarray
    losses: list = field(default_factory=list, repr=False)

    def normalize(self, theta):
        return (np.asarray(theta, np.float64) - self.mean) / self.std

    def denormalize(self, x):
        return np.asarray(x, np.float64) * self.std + self.mean

    def denoise_normalized(self, x, t):
        return denoise(x, t, self.params, self.layout)

    def __call__(self, x, t):
        return self.denoise_normalized(x, t)

    # serialization

    def to_bytes(self) -> bytes:
        buf = io.BytesIO()
        lay, sch, a = self.layout, self.schedule, self.arch
        buf.write(MAGIC + struct.pack("<I", VERSION))
        buf.write(struct.pack("<II", lay.C, len(lay.segment_lengths)))
        buf.write(struct.pack(f"<{len(lay.segment_lengths)}I", *lay.segment_lengths))
        buf.write(struct.pack("<III", a.d, a.D, a.L))
        buf.write(struct.pack("<III", self.params.H, len(self.params.blocks), self.params.heads))
        buf.write(struct.pack("<Idd", sch.T, sch.beta_start, sch.beta_end))
        for arr in (self.mean, self.std, *(p.data for p in self.params.tensors())):
            buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
        return buf.getvalue()

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def from_bytes(cls, raw: bytes, source: str = "<bytes>") -> "DiffusionModel":
        if raw[:4] != MAGIC:
            raise DenoiserFormatError(f"{source}: bad magic")
        off = 4

        def take(fmt):
            nonlocal off
            size = struct.calcsize(fmt)
            if off + size > len(raw):
                raise DenoiserFormatError(f"{source}: truncated header")
            vals = struct.unpack(fmt, raw[off : off + size])
            off += size
            return vals

        (version,) = take("<I")
        if version != VERSION:
            raise DenoiserFormatError(f"{source}: unsupported version {version}")
        C, nseg = take("<II")
        segs = take(f"<{nseg}I")
        d, D, L = take("<III")
        H, n_blocks, heads = take("<III")
        T, b0, b1 = take("<Idd")
        try:
            arch = InrArch(d, D, L)
            layout = TokenLayout(tuple(segs), C)
            schedule = NoiseSchedule(T, b0, b1)
        except ValueError as exc:
            raise DenoiserFormatError(f"{source}: {exc}") from None
        if tuple(arch.segment_lengths()) != layout.segment_lengths:
            raise DenoiserFormatError(f"{source}: layout does not match architecture {arch.label()}")
        params = DenoiserParams.init(layout, H, n_blocks, heads)
        arrays = [np.empty(layout.P), np.empty(layout.P)] + [p.data for p in params.tensors()]
        need = off + 4 * sum(a.size for a in arrays)
        if len(raw) != need:
            raise DenoiserFormatError(f"{source}: expected {need} bytes, found {len(raw)}")
        vals = []
        for a in arrays:
            v = np.frombuffer(raw, dtype="<f4", count=a.size, offset=off).reshape(a.shape)
            off += 4 * a.size
            vals.append(v.astype(np.float32))
        for p, v in zip(params.tensors(), vals[2:]):
            p.data = v
        mean, std = vals[0].astype(np.float64), vals[1].astype(np.float64)
        return cls(arch, layout, schedule, params, mean, std)

    @classmethod
    def load(cls, path) -> "DiffusionModel":
        return cls.from_bytes(Path(path).read_bytes(), str(path))


def normalization_stats(thetas: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    mean = thetas.mean(axis=0)
    std = np.maximum(thetas.std(axis=0), STD_FLOOR)
    return mean, std


def stack_dataset(dataset: Sequence[InrCheckpoint]) -> tuple[InrArch, np.ndarray]:
    if not dataset:
        raise DatasetError("diffusion needs at least one checkpoint")
    arch = dataset[0].arch
    for i, c in enumerate(dataset):
        if c.arch != arch:
            raise DatasetError(f"checkpoint {i} has arch {c.arch.label()}, expected {arch.label()}")
    return arch, np.stack([c.theta.astype(np.float64) for c in dataset])


def train_diffusion(
    dataset: Sequence[InrCheckpoint],
    cfg: DiffusionConfig | None = None,
    callback: Callable[[int, float], None] | None = None,
) -> DiffusionModel:
    """Fit the denoiser with Adam on MSE between predicted and clean weights."""
    cfg = cfg or DiffusionConfig()
    arch, thetas = stack_dataset(dataset)
    mean, std = normalization_stats(thetas)
    data = ((thetas - mean) / std).astype(np.float32)
    layout = TokenLayout.for_arch(arch, cfg.C)
    schedule = NoiseSchedule(cfg.T, cfg.beta_start, cfg.beta_end)
    params = DenoiserParams.init(layout, cfg.H, cfg.blocks, cfg.heads, seed=cfg.seed)
    tensors = params.tensors()
    state = gc.AdamState(lr=cfg.lr)
    rng = np.random.default_rng([cfg.seed, 2])
    mask = layout.valid_mask()
    sqrt_ab = np.sqrt(schedule.alpha_bar).astype(np.float32)
    sqrt_1mab = np.sqrt(1.0 - schedule.alpha_bar).astype(np.float32)
    losses: list[float] = []
    N = len(data)
    for epoch in range(cfg.epochs):
        state.lr = cfg.lr * cfg.lr_decay ** (epoch // cfg.decay_every)
        order = rng.permutation(N)
        total = 0.0
        for s in range(0, N, cfg.batch):
            x0 = data[order[s : s + cfg.batch]]
            t = rng.integers(1, schedule.T + 1, size=len(x0))
            eps = rng.standard_normal(x0.shape).astype(np.float32)
            xt = sqrt_ab[t, None] * x0 + sqrt_1mab[t, None] * eps
            target = tokenize(x0, layout)
            with gc.Tape() as tape:
                pred = denoiser_forward(params, tokenize(xt, layout), t)
                loss = masked_mse(pred, target, mask)
            tape.backward(loss)
            gc.adam_update(tensors, state)
            total += float(loss.data) * len(x0)
        losses.append(total / N)
        if callback is not None:
            callback(epoch, losses[-1])
        if cfg.tol is not None and len(losses) >= cfg.window and np.mean(losses[-cfg.window :]) < cfg.tol:
            break
    log.debug("diffusion: %d epochs, final loss %.4g", len(losses), losses[-1])
    return DiffusionModel(arch, layout, schedule, params, mean, std, losses)


# ------------------------------------------------------------------ sampling


def ddim_timesteps(T: int, steps: int) -> np.ndarray:
    """S evenly spaced steps from T downward; the sampler finishes at t=0."""
    if not 1 <= steps <= T:
        raise ValueError(f"steps must lie in 1..{T}")
    return np.round(np.linspace(T, 0, steps + 1)[:-1]).astype(np.int64)


def ddim_loop(
    denoise_fn: Callable[[np.ndarray, int], np.ndarray],
    P: int,
    schedule: NoiseSchedule,
    steps: int,
    eta: float = 0.0,
    rng: np.random.Generator | None = None,
    count: int = 1,
) -> np.ndarray:
    """DDIM in normalized space; returns [count, P]."""
    if eta < 0:
        raise ValueError("eta must be >= 0")
    rng = rng or np.random.default_rng(0)
    ab = schedule.alpha_bar
    ts = ddim_timesteps(schedule.T, steps)
    x = rng.standard_normal((count, P))
    for i, t in enumerate(ts):
        tp = ts[i + 1] if i + 1 < len(ts) else 0
        x0 = np.asarray(denoise_fn(x, int(t)), dtype=np.float64).reshape(count, P)
        eps = (x - np.sqrt(ab[t]) * x0) / np.sqrt(1.0 - ab[t])
        sigma = eta * np.sqrt((1.0 - ab[tp]) / (1.0 - ab[t])) * np.sqrt(1.0 - ab[t] / ab[tp])
        x = np.sqrt(ab[tp]) * x0 + np.sqrt(max(1.0 - ab[tp] - sigma**2, 0.0)) * eps
        if sigma > 0:
            x = x + sigma * rng.standard_normal(x.shape)
    return x


def ddim_sample(
    model: DiffusionModel,
    steps: int = 50,
    eta: float = 0.0,
    seed: int = 0,
    count: int = 1,
) -> list[InrCheckpoint]:
    rng = np.random.default_rng(seed)
    x = ddim_loop(model.denoise_normalized, model.layout.P, model.schedule, steps, eta, rng, count)
    thetas = model.denormalize(x)
    if not np.all(np.isfinite(thetas)):
        raise gc.NonFiniteError("sampled weights are not finite")
    return [
        InrCheckpoint(model.arch, th.astype(np.float32), {"source": f"ddim:seed={seed}:{i}", "steps": steps, "eta": eta})
        for i, th in enumerate(thetas)
    ]
