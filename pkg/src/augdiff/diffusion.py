"""Cosine noise schedule, forward diffusion and the conditional noise predictor.

The denoiser is a residual MLP over standardized D-dim features. Every block
sees the running hidden state concatenated with a projected sinusoidal
time embedding and a learned condition embedding (7 rows: id 0 is the
original-feature / null condition, 1..6 the augmentation families).
"""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .checkpoint import pack, read_tensors, unpack
from .data import Standardizer, standardizer_fit
from .errors import FormatError, InvalidArgument, MissingArtifact, NumericFailure
from .numkit import AdamState, Tape, Tensor, adam_step, backward

log = logging.getLogger(__name__)

N_CONDITIONS = 7
COSINE_S = 0.008
DAE_MAGIC = b"AUGD"
DAE_VERSION = 1


@dataclass
class NoiseSchedule:
    T: int
    betas: np.ndarray       # betas[t - 1] for t = 1..T
    alphas: np.ndarray
    alpha_bar: np.ndarray   # alpha_bar[t] for t = 0..T, alpha_bar[0] == 1
    s: float = COSINE_S

    def check_t(self, t, lo: int = 0):
        t = np.asarray(t)
        if t.size and (t.min() < lo or t.max() > self.T):
            raise InvalidArgument(f"step out of range [{lo}, {self.T}]: {t}")
        return t


def make_cosine_schedule(T: int, s: float = COSINE_S) -> NoiseSchedule:
    if int(T) != T or T < 2:
        raise InvalidArgument(f"T must be an integer >= 2, got {T}")
    T = int(T)
    f = np.cos((np.arange(T + 1) / T + s) / (1 + s) * math.pi / 2) ** 2
    ratio = f / f[0]
    betas = np.clip(1.0 - ratio[1:] / ratio[:-1], 1e-5, 0.999)
    alphas = 1.0 - betas
    alpha_bar = np.concatenate([[1.0], np.cumprod(alphas)])
    return NoiseSchedule(T, betas, alphas, alpha_bar, s)


def q_sample(z0, t, eps, schedule: NoiseSchedule) -> np.ndarray:
    """Closed-form forward marginal; ``t`` may be a scalar or one step per row."""
    t = schedule.check_t(t)
    ab = schedule.alpha_bar[t]
    if ab.ndim == 1:
        ab = ab[:, None]
    return np.sqrt(ab) * np.asarray(z0, dtype=np.float64) + np.sqrt(1.0 - ab) * np.asarray(eps, dtype=np.float64)


def time_embedding(t, dim: int) -> np.ndarray:
    """Interleaved (sin, cos) pairs at frequencies 10000^(-2k/dim).

    Scalar ``t`` gives a (dim,) vector, an array of steps gives (len(t), dim).
    """
    if dim % 2 or dim <= 0:
        raise InvalidArgument(f"time embedding dim must be positive and even, got {dim}")
    t_arr = np.asarray(t, dtype=np.float64)
    freqs = 10000.0 ** (-2.0 * np.arange(dim // 2) / dim)
    ang = t_arr[..., None] * freqs
    out = np.empty(t_arr.shape + (dim,))
    out[..., 0::2] = np.sin(ang)
    out[..., 1::2] = np.cos(ang)
    return out


@dataclass
class DenoiserParams:
    dim: int
    depth: int
    hidden: int
    emb: int
    schedule: NoiseSchedule
    conditional: bool
    standardizer: Standardizer
    weights: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.schedule.T

    def names(self) -> list[str]:
        return list(self.weights)

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.dim, self.depth, self.hidden, self.emb, self.schedule, self.conditional,
                              self.standardizer, {k: v.copy() for k, v in self.weights.items()})


def _glorot(rng, fan_out, fan_in):
    lim = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-lim, lim, size=(fan_out, fan_in))


def init_denoiser(dim: int, schedule: NoiseSchedule, standardizer: Standardizer, *, depth: int = 4,
                  hidden: int = 256, emb: int = 64, conditional: bool = True, seed: int = 0) -> DenoiserParams:
    if emb % 2:
        raise InvalidArgument("embedding width must be even")
    if min(dim, depth, hidden, emb) < 1:
        raise InvalidArgument("denoiser sizes must be positive")
    rng = np.random.default_rng([seed, 0xDAE])
    w: dict[str, np.ndarray] = {
        "in.w": _glorot(rng, hidden, dim),
        "in.b": np.zeros(hidden),
        "time.w": _glorot(rng, emb, emb),
        "time.b": np.zeros(emb),
        "cond": _glorot(rng, N_CONDITIONS, emb),
    }
    for l in range(depth):
        w[f"block{l}.w1"] = _glorot(rng, hidden, hidden + 2 * emb)
        w[f"block{l}.b1"] = np.zeros(hidden)
        w[f"block{l}.w2"] = _glorot(rng, hidden, hidden)
        w[f"block{l}.b2"] = np.zeros(hidden)
    # zero head: the untrained model predicts eps_hat = 0
    w["out.w"] = np.zeros((dim, hidden))
    w["out.b"] = np.zeros(dim)
    return DenoiserParams(dim, depth, hidden, emb, schedule, conditional, standardizer, w)


def denoiser_forward(tape: Tape, P: dict[str, Tensor], z: Tensor, t: np.ndarray, y: np.ndarray,
                     params: DenoiserParams) -> Tensor:
    """eps_hat for a batch of standardized z with per-row steps t and condition ids y."""
    temb = tape.const(time_embedding(t, params.emb))
    temb = tape.silu(tape.linear(temb, P["time.w"], P["time.b"]))
    # the unconditional model always reads row 0
    rows = y if params.conditional else np.zeros_like(y)
    cemb = tape.gather_rows(P["cond"], rows)
    h = tape.linear(z, P["in.w"], P["in.b"])
    for l in range(params.depth):
        u = tape.concat([h, temb, cemb], axis=1)
        u = tape.silu(tape.linear(u, P[f"block{l}.w1"], P[f"block{l}.b1"]))
        h = tape.add(h, tape.linear(u, P[f"block{l}.w2"], P[f"block{l}.b2"]))
    return tape.linear(h, P["out.w"], P["out.b"])


def _batch_args(params: DenoiserParams, z_t, t, y):
    z = np.asarray(z_t, dtype=np.float64)
    single = z.ndim == 1
    z = np.atleast_2d(z)
    if z.shape[1] != params.dim:
        raise InvalidArgument(f"feature dim {z.shape[1]} does not match denoiser dim {params.dim}")
    n = z.shape[0]
    t = np.broadcast_to(np.asarray(t, dtype=np.int64), (n,))
    params.schedule.check_t(t, lo=1)
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (n,))
    if y.size and (y.min() < 0 or y.max() >= N_CONDITIONS):
        raise InvalidArgument(f"condition id must be in 0..{N_CONDITIONS - 1}")
    return z, t, y, single


def denoise_predict(params: DenoiserParams, z_t, t, y=0) -> np.ndarray:
    """Predicted noise for standardized ``z_t`` (one row or a batch)."""
    z, t, y, single = _batch_args(params, z_t, t, y)
    tape = Tape(record=False)
    P = {k: tape.param(v, k) for k, v in params.weights.items()}
    out = denoiser_forward(tape, P, tape.const(z), t, y, params).data
    return out[0] if single else out


def draw_loss_inputs(schedule: NoiseSchedule, n: int, dim: int, rng: np.random.Generator):
    """Step t ~ U{1..T} and eps ~ N(0, I) per row, in that draw order."""
    t = rng.integers(1, schedule.T + 1, size=n)
    eps = rng.standard_normal((n, dim))
    return t, eps


def dae_loss(params: DenoiserParams, z0, y, schedule: NoiseSchedule, rng: np.random.Generator,
             predict=None) -> float:
    """Mean over batch and dimensions of (eps - eps_hat)**2.

    ``predict(z_t, t, y)`` overrides the network, which lets tests plug in
    oracle denoisers.
    """
    z0 = np.atleast_2d(np.asarray(z0, dtype=np.float64))
    if z0.shape[0] == 0:
        raise InvalidArgument("empty batch")
    y = np.broadcast_to(np.asarray(y, dtype=np.int64), (z0.shape[0],))
    t, eps = draw_loss_inputs(schedule, z0.shape[0], z0.shape[1], rng)
    zt = q_sample(z0, t, eps, schedule)
    pred = predict(zt, t, y) if predict is not None else denoise_predict(params, zt, t, y)
    return float(np.mean((eps - pred) ** 2))


def loss_and_grads(params: DenoiserParams, z0: np.ndarray, y: np.ndarray, t: np.ndarray, eps: np.ndarray):
    """Loss for fixed (t, eps) draws and its gradient w.r.t. every weight."""
    tape = Tape()
    P = {k: tape.param(v, k) for k, v in params.weights.items()}
    zt = q_sample(z0, t, eps, params.schedule)
    pred = denoiser_forward(tape, P, tape.const(zt), t, y, params)
    loss = tape.mse(pred, tape.const(eps))
    return float(loss.data), backward(tape, loss)


@dataclass
class DaeTrainConfig:
    T: int = 20
    depth: int = 4
    hidden: int = 256
    emb: int = 64
    batch_size: int = 1200
    base_lr: float = 5.0e-8
    scale_lr_by_batch: bool = True
    epochs: int = 200
    seed: int = 0
    conditional: bool = True
    val_size: int = 512

    def validate(self):
        if self.batch_size < 1:
            raise InvalidArgument("batch size must be >= 1")
        if self.epochs < 0:
            raise InvalidArgument("epochs must be >= 0")
        if self.T < 2:
            raise InvalidArgument("T must be >= 2")
        if self.base_lr <= 0:
            raise InvalidArgument("learning rate must be positive")

    @property
    def lr(self) -> float:
        return self.base_lr * self.batch_size if self.scale_lr_by_batch else self.base_lr


@dataclass
class DaeTrainLog:
    epoch_loss: list[float] = field(default_factory=list)
    val_loss: list[float] = field(default_factory=list)
    steps: int = 0


def train_dae(features, conditions, config: DaeTrainConfig) -> tuple[DenoiserParams, DaeTrainLog]:
    """Fit the noise predictor on raw corpus features with condition ids 0..6.

    Features are standardized with statistics of the whole corpus; those are
    stored in the returned params. ``val_loss`` tracks a frozen batch with
    frozen (t, eps) draws.
    """
    config.validate()
    x = np.asarray(features, dtype=np.float64)
    cond = np.asarray(conditions, dtype=np.int64)
    if x.ndim != 2 or cond.shape != (x.shape[0],):
        raise InvalidArgument("features must be M x D with one condition id per row")
    if x.shape[0] < config.batch_size:
        raise InvalidArgument(f"corpus of {x.shape[0]} rows is smaller than one batch ({config.batch_size})")
    if cond.min() < 0 or cond.max() >= N_CONDITIONS:
        raise InvalidArgument("condition ids must be in 0..6")
    std = standardizer_fit(x)
    z = std.standardize(x)
    schedule = make_cosine_schedule(config.T)
    params = init_denoiser(x.shape[1], schedule, std, depth=config.depth, hidden=config.hidden, emb=config.emb,
                           conditional=config.conditional, seed=config.seed)
    rng = np.random.default_rng([config.seed, 0x7EA1])
    val_rng = np.random.default_rng([config.seed, 0x7A1])
    vidx = val_rng.choice(z.shape[0], size=min(config.val_size, z.shape[0]), replace=False)
    vt, veps = draw_loss_inputs(schedule, len(vidx), z.shape[1], val_rng)
    opt = AdamState(lr=config.lr)
    tlog = DaeTrainLog()
    n = z.shape[0]
    for epoch in range(config.epochs):
        order = rng.permutation(n)
        total, count = 0.0, 0
        for start in range(0, n, config.batch_size):
            idx = order[start:start + config.batch_size]
            t, eps = draw_loss_inputs(schedule, len(idx), z.shape[1], rng)
            loss, grads = loss_and_grads(params, z[idx], cond[idx], t, eps)
            if not math.isfinite(loss):
                raise NumericFailure(f"non-finite DAE loss at epoch {epoch}",
                                     {"epoch": epoch, "step": tlog.steps, "loss": loss})
            adam_step(opt, params.weights, grads)
            tlog.steps += 1
            total += loss * len(idx)
            count += len(idx)
        tlog.epoch_loss.append(total / count)
        vpred = denoise_predict(params, q_sample(z[vidx], vt, veps, schedule), vt, cond[vidx])
        tlog.val_loss.append(float(np.mean((veps - vpred) ** 2)))
        if epoch % 10 == 0 or epoch == config.epochs - 1:
            log.info("dae epoch %d loss %.5f val %.5f", epoch, tlog.epoch_loss[-1], tlog.val_loss[-1])
    return params, tlog


# -- checkpoint files ------------------------------------------------------------------

def encode_dae(params: DenoiserParams) -> bytes:
    header = {
        "D": params.dim, "L": params.depth, "H": params.hidden, "E": params.emb, "T": params.T,
        "schedule": {"kind": "cosine", "s": params.schedule.s},
        "conditional": params.conditional,
        "mean": params.standardizer.mean.tolist(),
        "std": params.standardizer.std.tolist(),
        "tensors": [[k, list(v.shape)] for k, v in params.weights.items()],
    }
    return pack(DAE_MAGIC, DAE_VERSION, header, list(params.weights.values()))


def decode_dae(raw: bytes) -> DenoiserParams:
    h, payload = unpack(raw, DAE_MAGIC, DAE_VERSION)
    if h.get("schedule", {}).get("kind") != "cosine":
        raise FormatError("only cosine schedules are supported")
    weights = read_tensors(payload, h["tensors"])
    std = Standardizer(np.asarray(h["mean"], dtype=np.float64), np.asarray(h["std"], dtype=np.float64))
    schedule = make_cosine_schedule(h["T"], h["schedule"]["s"])
    params = DenoiserParams(h["D"], h["L"], h["H"], h["E"], schedule, bool(h["conditional"]), std, weights)
    if weights["cond"].shape != (N_CONDITIONS, params.emb):
        raise FormatError("condition table must have 7 rows")
    return params


def save_dae(path, params: DenoiserParams) -> str:
    """Write the checkpoint; returns its sha256."""
    raw = encode_dae(params)
    Path(path).write_bytes(raw)
    return hashlib.sha256(raw).hexdigest()


def load_dae(path) -> tuple[DenoiserParams, str]:
    p = Path(path)
    if not p.exists():
        raise MissingArtifact(f"DAE checkpoint not found: {p}")
    raw = p.read_bytes()
    return decode_dae(raw), hashlib.sha256(raw).hexdigest()
