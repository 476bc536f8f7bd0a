"""A small epsilon-prediction network for 2-D toy data.

Layout of the network, for hidden sizes (H1, ..., Hn):

    [x_t, emb(t)] -> Linear -> SiLU -> gated cross-attention on condition tokens
                  -> (Linear -> SiLU) * (n - 1) -> Linear -> eps

The adapter adds ``gate * softmax(Q K^T / sqrt(d_head)) V`` to the first hidden
state, with one query per sample.  The gate starts at exactly 0, so a freshly
initialised network ignores its condition tokens bit-for-bit.  Gradients are
written out by hand; SiLU is used because it is smooth everywhere, which keeps
finite-difference checks meaningful.
"""
from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .boxes import fourier_embed
from .diffusion import NoiseSchedule, cfg_combine, ddim_sample, ddpm_sample, forward_sample
from .errors import ConfigError, FormatError, OddDim, ShapeMismatch

CKPT_MAGIC = b"RDCP"
CKPT_VERSION = 1


@dataclass(frozen=True)
class DenoiserConfig:
    data_dim: int = 2
    hidden: tuple[int, ...] = (128, 128)
    embed_dim: int = 16
    d_tok: int = 16
    d_head: int | None = None  # defaults to d_tok
    T: int = 200

    def __post_init__(self):
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))
        if self.d_head is None:
            object.__setattr__(self, "d_head", self.d_tok)
        if self.embed_dim % 2:
            raise OddDim("timestep embedding dimension must be even")
        if not self.hidden or min(self.hidden) < 1:
            raise ConfigError("need at least one hidden layer of positive width")
        for name in ("data_dim", "d_tok", "d_head", "T"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")

    def shapes(self) -> dict[str, tuple[int, ...]]:
        """Parameter shapes in declaration order."""
        h = self.hidden
        shapes = {
            "W0": (self.data_dim + self.embed_dim, h[0]), "b0": (h[0],),
            "Wq": (h[0], self.d_head), "Wk": (self.d_tok, self.d_head),
            "Wv": (self.d_tok, h[0]), "gate": (),
        }
        for i in range(1, len(h)):
            shapes[f"W{i}"] = (h[i - 1], h[i])
            shapes[f"b{i}"] = (h[i],)
        shapes["Wout"] = (h[-1], self.data_dim)
        shapes["bout"] = (self.data_dim,)
        return shapes


@dataclass
class DenoiserParams:
    config: DenoiserConfig
    arrays: dict[str, np.ndarray]

    def __post_init__(self):
        expected = self.config.shapes()
        if list(self.arrays) != list(expected):
            raise ShapeMismatch(f"parameter names {list(self.arrays)} != {list(expected)}")
        for name, shape in expected.items():
            arr = np.asarray(self.arrays[name], dtype=np.float64)
            if arr.shape != shape:
                raise ShapeMismatch(f"{name}: shape {arr.shape}, expected {shape}")
            if not np.all(np.isfinite(arr)):
                raise ValueError(f"{name} has non-finite entries")
            self.arrays[name] = arr

    def __getitem__(self, name: str) -> np.ndarray:
        return self.arrays[name]

    def copy(self) -> "DenoiserParams":
        return DenoiserParams(self.config, {k: v.copy() for k, v in self.arrays.items()})

    def zeros_like(self) -> dict[str, np.ndarray]:
        return {k: np.zeros_like(v) for k, v in self.arrays.items()}

    def n_params(self) -> int:
        return sum(v.size for v in self.arrays.values())


def init_params(config: DenoiserConfig, rng: np.random.Generator) -> DenoiserParams:
    """Scaled-normal weights, zero biases, zero gate."""
    arrays = {}
    for name, shape in config.shapes().items():
        if name.startswith("W"):
            arrays[name] = rng.normal(0.0, 1.0 / np.sqrt(shape[0]), size=shape)
        else:
            arrays[name] = np.zeros(shape)
    return DenoiserParams(config, arrays)


def timestep_embed(t, T: int, dim: int) -> np.ndarray:
    """Sinusoidal features of t / T at dim/2 geometric frequencies from 1 to 1000.

    Returns sin terms followed by cos terms; ``t`` may be an int or an array.
    """
    if dim % 2:
        raise OddDim("embedding dimension must be even")
    half = dim // 2
    freqs = 1000.0 ** (np.arange(half) / max(half - 1, 1))
    ang = (np.asarray(t, dtype=np.float64) / T)[..., None] * freqs
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=-1)


def _silu(z):
    sig = 1.0 / (1.0 + np.exp(-z))
    return z * sig, sig


def _silu_grad(z, sig):
    return sig * (1.0 + z * (1.0 - sig))


def _attention(q_in, c, Wq, Wk, Wv, d_head):
    """Batched attention: q_in (B, N, d_h), c (B, M, d_tok) -> (B, N, d_h) plus cache."""
    q = q_in @ Wq
    k = c @ Wk
    v = c @ Wv
    scores = q @ np.swapaxes(k, -1, -2) / np.sqrt(d_head)
    scores = scores - scores.max(axis=-1, keepdims=True)
    w = np.exp(scores)
    w /= w.sum(axis=-1, keepdims=True)
    return w @ v, (q, k, v, w)


def gated_cross_attention(h, c, params: DenoiserParams, return_weights: bool = False):
    """h + gate * softmax(Q K^T / sqrt(d_head)) V with Q from ``h`` and K, V from ``c``.

    ``h`` is (N, d_h) or (B, N, d_h); ``c`` is (M, d_tok) or (B, M, d_tok).
    """
    h = np.asarray(h, dtype=np.float64)
    c = np.asarray(c, dtype=np.float64)
    batched = h.ndim == 3
    if not batched:
        h, c = h[None], c[None]
    cfg = params.config
    if h.shape[-1] != cfg.hidden[0] or c.shape[-1] != cfg.d_tok or c.shape[0] != h.shape[0]:
        raise ShapeMismatch(f"features {h.shape} / tokens {c.shape} do not fit the adapter")
    attn, (_, _, _, w) = _attention(h, c, params["Wq"], params["Wk"], params["Wv"], cfg.d_head)
    out = h + params["gate"] * attn
    if not batched:
        out, w = out[0], w[0]
    return (out, w) if return_weights else out


def _prepare(x_t, t, c, cfg: DenoiserConfig):
    x = np.atleast_2d(np.asarray(x_t, dtype=np.float64))
    B = x.shape[0]
    if x.shape[1] != cfg.data_dim:
        raise ShapeMismatch(f"x_t has {x.shape[1]} features, network expects {cfg.data_dim}")
    t = np.broadcast_to(np.asarray(t), (B,))
    if c is None:
        c = np.zeros((B, 1, cfg.d_tok))
    else:
        c = np.asarray(c, dtype=np.float64)
        if c.ndim == 2:
            c = np.broadcast_to(c, (B,) + c.shape)
        if c.ndim != 3 or c.shape[0] != B or c.shape[2] != cfg.d_tok:
            raise ShapeMismatch(f"condition tokens {c.shape} do not match batch {B}, d_tok {cfg.d_tok}")
    return x, t, c


def _forward(params: DenoiserParams, x, t, c):
    cfg = params.config
    inp = np.concatenate([x, timestep_embed(t, cfg.T, cfg.embed_dim)], axis=1)
    z0 = inp @ params["W0"] + params["b0"]
    h0, sig0 = _silu(z0)
    attn, att_cache = _attention(h0[:, None, :], c, params["Wq"], params["Wk"],
                                 params["Wv"], cfg.d_head)
    attn = attn[:, 0, :]
    h = h0 + params["gate"] * attn
    layers = []
    for i in range(1, len(cfg.hidden)):
        z = h @ params[f"W{i}"] + params[f"b{i}"]
        h_next, sig = _silu(z)
        layers.append((h, z, sig))
        h = h_next
    out = h @ params["Wout"] + params["bout"]
    cache = dict(inp=inp, z0=z0, sig0=sig0, h0=h0, attn=attn, att=att_cache,
                 layers=layers, h_last=h, c=c)
    return out, cache


def forward(x_t, t, c, params: DenoiserParams) -> np.ndarray:
    """Noise prediction for a batch (or a single sample).

    ``c`` is (M, d_tok), (B, M, d_tok) or None; None stands for the null
    condition, a single all-zero token.
    """
    single = np.ndim(x_t) == 1
    x, tt, cc = _prepare(x_t, t, c, params.config)
    out, _ = _forward(params, x, tt, cc)
    return out[0] if single else out


def backward(batch: dict, params: DenoiserParams):
    """Loss and exact gradients for a batch {x0, t, noise, c}.

    loss = mean over the batch of ||noise - eps_theta(x_t, t, c)||^2 with
    x_t = forward_sample(x0, t, noise).  The schedule is taken from
    ``batch["schedule"]``.
    """
    cfg = params.config
    s: NoiseSchedule = batch["schedule"]
    x0 = np.atleast_2d(np.asarray(batch["x0"], dtype=np.float64))
    noise = np.atleast_2d(np.asarray(batch["noise"], dtype=np.float64))
    if x0.shape[0] == 0:
        raise ShapeMismatch("empty batch")
    t = np.broadcast_to(np.asarray(batch["t"]), (x0.shape[0],))
    xt = forward_sample(x0, t, noise, s)
    x, t, c = _prepare(xt, t, batch.get("c"), cfg)
    out, k = _forward(params, x, t, c)

    B = x.shape[0]
    resid = out - noise
    loss = float(np.sum(resid * resid) / B)
    g = {}
    dout = 2.0 * resid / B
    g["Wout"] = k["h_last"].T @ dout
    g["bout"] = dout.sum(axis=0)
    dh = dout @ params["Wout"].T
    for i in range(len(cfg.hidden) - 1, 0, -1):
        h_prev, z, sig = k["layers"][i - 1]
        dz = dh * _silu_grad(z, sig)
        g[f"W{i}"] = h_prev.T @ dz
        g[f"b{i}"] = dz.sum(axis=0)
        dh = dz @ params[f"W{i}"].T

    # adapter: h = h0 + gate * attn, attn = softmax(q k^T / sqrt(d)) v
    q, kk, v, w = k["att"]
    q, w = q[:, 0, :], w[:, 0, :]
    gate = params["gate"]
    g["gate"] = np.asarray(np.sum(dh * k["attn"]))
    dattn = gate * dh
    dw = np.einsum("bh,bmh->bm", dattn, v)
    dv = w[:, :, None] * dattn[:, None, :]
    ds = w * (dw - np.sum(w * dw, axis=1, keepdims=True)) / np.sqrt(cfg.d_head)
    dq = np.einsum("bm,bmd->bd", ds, kk)
    dk = ds[:, :, None] * q[:, None, :]
    g["Wq"] = k["h0"].T @ dq
    g["Wk"] = np.einsum("bmt,bmd->td", c, dk)
    g["Wv"] = np.einsum("bmt,bmh->th", c, dv)
    dh0 = dh + dq @ params["Wq"].T

    dz0 = dh0 * _silu_grad(k["z0"], k["sig0"])
    g["W0"] = k["inp"].T @ dz0
    g["b0"] = dz0.sum(axis=0)
    return loss, {name: g[name] for name in cfg.shapes()}


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros(cls, params: DenoiserParams) -> "AdamState":
        return cls(params.zeros_like(), params.zeros_like(), 0)


def adam_step(params: DenoiserParams, grads: dict, state: AdamState, lr: float = 1e-3,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected Adam update.  Returns new params and the advanced state."""
    step = state.step + 1
    new_arrays, m_new, v_new = {}, {}, {}
    c1 = 1.0 - beta1 ** step
    c2 = 1.0 - beta2 ** step
    for name, p in params.arrays.items():
        gr = grads[name]
        m = beta1 * state.m[name] + (1.0 - beta1) * gr
        v = beta2 * state.v[name] + (1.0 - beta2) * gr * gr
        new_arrays[name] = p - lr * (m / c1) / (np.sqrt(v / c2) + eps)
        m_new[name], v_new[name] = m, v
    return DenoiserParams(params.config, new_arrays), AdamState(m_new, v_new, step)


# --------------------------------------------------------------------------
# toy data

RING_MODES = 8
RING_RADIUS = 3.0
RING_SIGMA = 0.2


def ring_centers(n_modes: int = RING_MODES, radius: float = RING_RADIUS) -> np.ndarray:
    ang = 2 * np.pi * np.arange(n_modes) / n_modes
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


def sample_ring(n: int, rng: np.random.Generator, n_modes: int = RING_MODES,
                radius: float = RING_RADIUS, sigma: float = RING_SIGMA):
    """Points from an equal-weight Gaussian mixture on a circle, plus their mode labels."""
    labels = rng.integers(0, n_modes, size=n)
    pts = ring_centers(n_modes, radius)[labels] + sigma * rng.standard_normal((n, 2))
    return pts, labels


def sample_moons(n: int, rng: np.random.Generator, noise: float = 0.1):
    labels = rng.integers(0, 2, size=n)
    ang = np.pi * rng.random(n)
    x = np.where(labels == 0, np.cos(ang), 1.0 - np.cos(ang))
    y = np.where(labels == 0, np.sin(ang), 0.5 - np.sin(ang))
    pts = 1.5 * np.column_stack([x - 0.5, y - 0.25]) + noise * rng.standard_normal((n, 2))
    return pts, labels


DATASETS = {"ring": sample_ring, "moons": sample_moons}


def label_anchor(labels, dataset: str) -> np.ndarray:
    """A 2-D anchor per class label, scaled to roughly [-1, 1]."""
    labels = np.asarray(labels)
    if dataset == "ring":
        return ring_centers()[labels] / RING_RADIUS
    return np.column_stack([np.where(labels == 0, -0.5, 0.5), np.zeros(labels.shape)])


def condition_tokens(labels, dataset: str, n_freq: int) -> np.ndarray:
    """One Fourier-embedded token per sample: (B, 1, 2 * 2 * n_freq)."""
    freqs = (2.0 ** np.arange(n_freq)) * np.pi
    return fourier_embed(label_anchor(labels, dataset), freqs)[:, None, :]


@dataclass(frozen=True)
class TrainConfig:
    dataset: str = "ring"
    steps: int = 20000
    batch: int = 128
    lr: float = 2e-3
    lr_final: float = 1e-4
    null_condition_rate: float = 0.3
    n_freq: int = 4
    ema: float = 0.999

    def __post_init__(self):
        if self.dataset not in DATASETS:
            raise ConfigError(f"unknown dataset {self.dataset!r}; choose from {sorted(DATASETS)}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if not (0.0 <= self.null_condition_rate <= 1.0):
            raise ConfigError("null_condition_rate must lie in [0, 1]")
        if self.lr < 0 or self.lr_final < 0:
            raise ConfigError("learning rates must be non-negative")
        if not (0.0 <= self.ema < 1.0):
            raise ConfigError("ema decay must lie in [0, 1)")


@dataclass
class TrainResult:
    params: DenoiserParams  # EMA weights when ema > 0
    losses: np.ndarray
    init_params: DenoiserParams


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Cosine decay from ``lr`` to ``lr_final`` over the run (step is 0-based)."""
    if cfg.steps <= 1:
        return cfg.lr
    frac = step / (cfg.steps - 1)
    return cfg.lr_final + 0.5 * (cfg.lr - cfg.lr_final) * (1.0 + np.cos(np.pi * frac))


def train(net: DenoiserConfig, cfg: TrainConfig, schedule: NoiseSchedule, seed: int = 0,
          log_every: int = 0, log=print) -> TrainResult:
    """Fit the denoiser with the epsilon-prediction loss; deterministic given ``seed``."""
    if net.T != schedule.T:
        raise ConfigError(f"network T={net.T} does not match schedule T={schedule.T}")
    if net.d_tok != 4 * cfg.n_freq:
        raise ConfigError(f"d_tok must equal 4 * n_freq = {4 * cfg.n_freq} for 2-D anchors")
    rng = np.random.default_rng(seed)
    params = init_params(net, rng)
    start = params.copy()
    state = AdamState.zeros(params)
    avg = params.copy() if cfg.ema else None
    sampler = DATASETS[cfg.dataset]
    losses = np.empty(cfg.steps)
    for step in range(cfg.steps):
        x0, labels = sampler(cfg.batch, rng)
        t = rng.integers(1, schedule.T + 1, size=cfg.batch)
        noise = rng.standard_normal(x0.shape)
        c = condition_tokens(labels, cfg.dataset, cfg.n_freq)
        null = rng.random(cfg.batch) < cfg.null_condition_rate
        c[null] = 0.0
        loss, grads = backward({"x0": x0, "t": t, "noise": noise, "c": c, "schedule": schedule},
                               params)
        params, state = adam_step(params, grads, state, lr=lr_at(step, cfg))
        losses[step] = loss
        if avg is not None:
            for name, arr in params.arrays.items():
                avg.arrays[name] += (1.0 - cfg.ema) * (arr - avg.arrays[name])
        if log_every and (step + 1) % log_every == 0:
            log(f"step {step + 1:6d}  loss {losses[max(0, step - log_every + 1):step + 1].mean():.4f}")
    final = params if avg is None else avg
    return TrainResult(final, losses, start)


def sample(params: DenoiserParams, schedule: NoiseSchedule, n: int, rng: np.random.Generator,
           sampler: str = "ddim", steps: int = 50, labels=None, cfg_scale: float = 1.0,
           dataset: str = "ring", n_freq: int = 4, sigma_choice: str = "beta_tilde",
           x_T=None) -> np.ndarray:
    """Generate ``n`` points.  With ``labels`` the guided prediction
    cfg_combine(eps(x, c), eps(x, null), cfg_scale) is used; without, the
    unconditional prediction."""
    cfg = params.config
    x = rng.standard_normal((n, cfg.data_dim)) if x_T is None else np.asarray(x_T, dtype=float)
    if n == 0:
        return np.zeros((0, cfg.data_dim))
    c = None if labels is None else condition_tokens(np.broadcast_to(labels, (n,)), dataset, n_freq)

    def eps_fn(xt, t):
        eps_u = forward(xt, t, None, params)
        if c is None:
            return eps_u
        return cfg_combine(forward(xt, t, c, params), eps_u, cfg_scale)

    if sampler == "ddim":
        return ddim_sample(eps_fn, x, schedule, steps)
    if sampler == "ddpm":
        noises = (rng.standard_normal(x.shape) for _ in range(schedule.T))
        return ddpm_sample(eps_fn, x, schedule, noises, sigma_choice)
    raise ValueError(f"unknown sampler {sampler!r}")


# --------------------------------------------------------------------------
# checkpoints

def save_checkpoint(path, params: DenoiserParams, meta: dict | None = None) -> None:
    """b"RDCP", u32 version, u32 meta length, meta JSON, u32 tensor count, then per
    tensor: u16 name length, name, u32 ndim, u32 dims, float64 data (LE)."""
    cfg_meta = {"denoiser": asdict(params.config), **(meta or {})}
    blob = json.dumps(cfg_meta, sort_keys=True).encode()
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC + struct.pack("<II", CKPT_VERSION, len(blob)) + blob)
    buf.write(struct.pack("<I", len(params.arrays)))
    for name, arr in params.arrays.items():
        nb = name.encode()
        buf.write(struct.pack("<H", len(nb)) + nb + struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path) -> tuple[DenoiserParams, dict]:
    data = Path(path).read_bytes()
    if data[:4] != CKPT_MAGIC:
        raise FormatError(f"{path}: not an RDCP checkpoint")
    try:
        version, mlen = struct.unpack_from("<II", data, 4)
        if version != CKPT_VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(data[pos:pos + mlen])
        pos += mlen
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            name = data[pos + 2:pos + 2 + nlen].decode()
            pos += 2 + nlen
            (ndim,) = struct.unpack_from("<I", data, pos)
            shape = struct.unpack_from(f"<{ndim}I", data, pos + 4)
            pos += 4 + 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arrays[name] = np.frombuffer(data, "<f8", size, pos).reshape(shape).astype(np.float64)
            pos += 8 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({exc})") from None
    if pos != len(data):
        raise FormatError(f"{path}: {len(data) - pos} trailing bytes")
    den = dict(meta["denoiser"])
    den["hidden"] = tuple(den["hidden"])
    return DenoiserParams(DenoiserConfig(**den), arrays), meta
