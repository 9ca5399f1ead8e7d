"""Residual DDIM predictor over Singular-space anchors.

The latent for one agent is an ``(S, K)`` residual ``y = Y - P'`` between the
ground-truth future coordinate and each adapted anchor.  A small
transformer-conditioned network predicts the noise added to ``y``; sampling
runs deterministic DDIM updates from Gaussian noise and adds the anchors
back.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
import torch
from torch import nn

from .errors import CheckpointError, ConfigError, ShapeError, TrainingError

log = logging.getLogger(__name__)

MODES = ("residual", "initial", "direct")


# --- noise schedule -------------------------------------------------------

@dataclass(frozen=True, eq=False)
class NoiseSchedule:
    betas: np.ndarray

    def __post_init__(self):
        b = np.asarray(self.betas, dtype=np.float64)
        if b.ndim != 1 or len(b) < 1:
            raise ValueError("betas must be a non-empty 1-D sequence")
        if not np.all((b > 0) & (b < 1)):
            raise ValueError("betas must lie in (0, 1)")
        if np.any(np.diff(b) < 0):
            raise ValueError("betas must be non-decreasing")
        object.__setattr__(self, "betas", b)

    @property
    def num_steps(self) -> int:
        return len(self.betas)

    @property
    def alphas_bar(self) -> np.ndarray:
        return np.cumprod(1.0 - self.betas)

    def alpha_bar(self, m: int) -> float:
        """``alpha_bar_m`` for 1-based step ``m``; step 0 is clean data."""
        return 1.0 if m == 0 else float(self.alphas_bar[m - 1])


def make_schedule(num_steps: int, beta_start: float = 1e-4, beta_end: float = 0.05) -> NoiseSchedule:
    if num_steps < 1:
        raise ValueError(f"need at least one diffusion step, got {num_steps}")
    if num_steps == 1:
        return NoiseSchedule(np.array([beta_start]))
    return NoiseSchedule(np.linspace(beta_start, beta_end, num_steps))


def forward_diffuse(y0, m: int, noise, schedule: NoiseSchedule):
    """Closed-form ``q(y_m | y_0)``; works on numpy arrays and tensors."""
    if tuple(y0.shape) != tuple(noise.shape):
        raise ShapeError(f"noise shape {tuple(noise.shape)} != y0 shape {tuple(y0.shape)}")
    if not 1 <= m <= schedule.num_steps:
        raise ValueError(f"step {m} outside [1, {schedule.num_steps}]")
    ab = schedule.alpha_bar(m)
    return math.sqrt(ab) * y0 + math.sqrt(1.0 - ab) * noise


def ddim_step(y_m, eps_hat, m: int, schedule: NoiseSchedule, m_prev: int | None = None):
    """Deterministic (eta = 0) update from step ``m`` to ``m_prev`` (default m-1)."""
    m_prev = m - 1 if m_prev is None else m_prev
    ab, ab_prev = schedule.alpha_bar(m), schedule.alpha_bar(m_prev)
    y0_hat = (y_m - math.sqrt(1.0 - ab) * eps_hat) / math.sqrt(ab)
    return math.sqrt(ab_prev) * y0_hat + math.sqrt(1.0 - ab_prev) * eps_hat


# --- network --------------------------------------------------------------

def timestep_embedding(m: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / max(half, 1))
    args = m.to(torch.float64)[:, None] * freqs[None, :]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class DenoiserNet(nn.Module):
    """Noise estimator ``eps(y_m, m, X, P', G)``.

    Inputs are batched scenes padded to a common agent count:
    ``y (B, N, S, K)``, ``m (B,)``, ``hist (B, N, K)``, ``anchors (B, N, S, K)``
    and a validity ``mask (B, N)``.  Each anchor is a token.  With
    ``joint=True`` the S anchor tokens of an agent attend to each other before
    refinement, so every residual is denoised knowing the whole anchor set;
    otherwise each anchor is refined on its own, as a batch dimension.  Noisy
    residuals are always read per channel: a single read of all S channels
    lets the net recover the future by averaging them, a shortcut that
    disappears at sampling time when the channels are independent noise.
    """

    def __init__(self, k: int, num_samples: int, d_model: int = 256, n_heads: int = 4,
                 joint: bool = True):
        super().__init__()
        self.k, self.num_samples, self.d_model, self.joint = k, num_samples, d_model, joint
        self.hist_enc = nn.Linear(k, d_model)
        self.anchor_enc = nn.Linear(k, d_model)
        if joint:
            self.anchor_attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
            self.anchor_norm = nn.LayerNorm(d_model)
        self.ctx = nn.Linear(2 * d_model, d_model)
        self.attn = nn.MultiheadAttention(d_model, n_heads, batch_first=True)
        self.norm = nn.LayerNorm(d_model)
        self.time_enc = nn.Linear(d_model, d_model)
        self.shared = nn.Linear(3 * d_model, d_model)
        self.y_enc = nn.Linear(k, d_model)
        self.head = nn.Sequential(nn.SiLU(), nn.Linear(d_model, d_model), nn.SiLU(), nn.Linear(d_model, k))
        # step-dependent linear map of (y_s, P'_s, X); the exact noise of a
        # perfectly predictable future is linear in these with gains set by m
        self.skip = nn.Linear(d_model, k * 3 * k)
        nn.init.zeros_(self.skip.weight)
        nn.init.zeros_(self.skip.bias)
        self.register_buffer("trained", torch.zeros((), dtype=torch.bool))

    def config(self) -> dict:
        return {"k": self.k, "num_samples": self.num_samples, "d_model": self.d_model,
                "n_heads": self.attn.num_heads, "joint": self.joint}

    def forward(self, y, m, hist, anchors, mask=None):
        B, N, S, K = y.shape
        if mask is None:
            mask = torch.ones(B, N, dtype=torch.bool, device=y.device)
        h = self.hist_enc(hist)
        a = self.anchor_enc(anchors)                                  # (B, N, S, d)
        if self.joint:
            tok = a.reshape(B * N, S, -1)
            mixed, _ = self.anchor_attn(tok, tok, tok, need_weights=False)
            a = self.anchor_norm(tok + mixed).reshape(B, N, S, -1)
        c = self.ctx(torch.cat([h, a.mean(dim=2)], dim=-1))
        att, _ = self.attn(c, c, c, key_padding_mask=~mask, need_weights=False)
        g = self.norm(c + att)
        temb = self.time_enc(timestep_embedding(m, self.d_model).to(y.dtype))
        t = temb[:, None, :].expand(B, N, -1)
        shared = self.shared(torch.cat([h, g, t], dim=-1))[:, :, None, :]
        gain = self.skip(temb).view(B, 1, 1, K, 3 * K)
        lin_in = torch.cat([y, anchors, hist[:, :, None, :].expand(B, N, S, K)], dim=-1)
        return self.head(shared + a + self.y_enc(y)) + (gain @ lin_in[..., None])[..., 0]


# --- batches ---------------------------------------------------------------

@dataclass
class Batch:
    """Padded scene batch of Singular-space tensors."""

    hist: torch.Tensor          # (B, N, K)
    anchors: torch.Tensor       # (B, N, S, K) adapted anchors
    mask: torch.Tensor          # (B, N) bool
    fut: torch.Tensor | None = None  # (B, N, K) ground-truth future coordinate

    @property
    def num_agents(self) -> int:
        return int(self.mask.sum())


def collate(groups: Sequence[dict], dtype=torch.float32) -> Batch:
    """Pad per-scene arrays (``hist``, ``anchors``, optional ``fut``)."""
    B = len(groups)
    N = max(len(g["hist"]) for g in groups)
    S, K = groups[0]["anchors"].shape[1:]
    hist = torch.zeros(B, N, K, dtype=dtype)
    anchors = torch.zeros(B, N, S, K, dtype=dtype)
    mask = torch.zeros(B, N, dtype=torch.bool)
    has_fut = all(g.get("fut") is not None for g in groups)
    fut = torch.zeros(B, N, K, dtype=dtype) if has_fut else None
    for i, g in enumerate(groups):
        n = len(g["hist"])
        hist[i, :n] = torch.as_tensor(g["hist"], dtype=dtype)
        anchors[i, :n] = torch.as_tensor(g["anchors"], dtype=dtype)
        mask[i, :n] = True
        if has_fut:
            fut[i, :n] = torch.as_tensor(g["fut"], dtype=dtype)
    return Batch(hist, anchors, mask, fut)


def iterate_batches(groups: Sequence[dict], batch_size: int, rng: np.random.Generator | None = None,
                    dtype=torch.float32) -> Iterator[Batch]:
    """Pack whole scenes into batches of roughly ``batch_size`` agents."""
    order = np.arange(len(groups)) if rng is None else rng.permutation(len(groups))
    chunk, count = [], 0
    for i in order:
        chunk.append(groups[i])
        count += len(groups[i]["hist"])
        if count >= batch_size:
            yield collate(chunk, dtype)
            chunk, count = [], 0
    if chunk:
        yield collate(chunk, dtype)


def clean_target(batch: Batch, mode: str = "residual") -> torch.Tensor:
    if batch.fut is None:
        raise ShapeError("training batch has no ground-truth future")
    S = batch.anchors.shape[2]
    fut = batch.fut[:, :, None, :].expand(-1, -1, S, -1)
    if mode == "residual":
        return fut - batch.anchors
    if mode in ("initial", "direct"):
        return fut.clone()
    raise ConfigError(f"unknown denoising mode {mode!r}; expected one of {MODES}")


def denoising_loss(net: DenoiserNet, batch: Batch, schedule: NoiseSchedule, m: torch.Tensor,
                   noise: torch.Tensor, mode: str = "residual") -> torch.Tensor:
    """Masked MSE between predicted and injected noise."""
    y0 = clean_target(batch, mode)
    ab = torch.as_tensor(schedule.alphas_bar, dtype=y0.dtype)[m - 1].view(-1, 1, 1, 1)
    y_m = ab.sqrt() * y0 + (1 - ab).sqrt() * noise
    eps_hat = net(y_m, m, batch.hist, batch.anchors, batch.mask)
    w = batch.mask[:, :, None, None].to(y0.dtype)
    denom = w.sum() * y0.shape[2] * y0.shape[3]
    return (((eps_hat - noise) ** 2) * w).sum() / denom


def train_step(batch: Batch, net: DenoiserNet, schedule: NoiseSchedule, optimizer,
               mode: str = "residual", m=None, noise=None, generator=None) -> float:
    """One optimizer update; ``m`` and ``noise`` may be fixed for replay."""
    B = batch.hist.shape[0]
    dtype = batch.hist.dtype
    if m is None:
        m = torch.randint(1, schedule.num_steps + 1, (B,), generator=generator)
    if noise is None:
        noise = torch.randn(batch.anchors.shape, generator=generator, dtype=dtype)
    net.train()
    optimizer.zero_grad()
    loss = denoising_loss(net, batch, schedule, m, noise, mode)
    if not torch.isfinite(loss):
        raise TrainingError(f"non-finite loss {loss.item()} (steps={m.tolist()}, "
                            f"max |anchor|={batch.anchors.abs().max().item():.3g}, "
                            f"max |fut|={batch.fut.abs().max().item():.3g})")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


# --- sampling --------------------------------------------------------------

def initial_step(schedule: NoiseSchedule) -> int:
    """Entry step for ``initial`` mode: the anchor is noised to mid-chain."""
    return max(1, math.ceil(schedule.num_steps / 2))


@torch.no_grad()
def sample_coords(net: DenoiserNet, batch: Batch, schedule: NoiseSchedule, mode: str = "residual",
                  generator=None, noise=None, eps_fn=None) -> torch.Tensor:
    """Reverse diffusion to ``(B, N, S, K)`` future coordinates.

    ``eps_fn(y, m)`` replaces the network (used by tests and oracles).
    """
    if eps_fn is None:
        if not bool(net.trained):
            raise TrainingError("denoiser has not been trained; refusing to sample")
        net.eval()
        eps_fn = lambda y, m: net(y, m, batch.hist, batch.anchors, batch.mask)  # noqa: E731
    shape = batch.anchors.shape
    dtype = batch.anchors.dtype
    if noise is None:
        noise = torch.randn(shape, generator=generator, dtype=dtype)
    M = schedule.num_steps
    if mode == "initial":
        start = initial_step(schedule)
        ab = schedule.alpha_bar(start)
        y = math.sqrt(ab) * batch.anchors + math.sqrt(1 - ab) * noise
    elif mode in ("residual", "direct"):
        start = M
        y = noise
    else:
        raise ConfigError(f"unknown denoising mode {mode!r}")
    B = shape[0]
    for m in range(start, 0, -1):
        eps_hat = eps_fn(y, torch.full((B,), m, dtype=torch.long))
        y = ddim_step(y, eps_hat, m, schedule)
    if mode == "residual":
        y = batch.anchors + y
    return y


# --- training loop and checkpoints -----------------------------------------

@dataclass
class TrainConfig:
    """Optimisation and model hyper-parameters.

    Defaults are the full-scale values; ``deviations()`` lists anything
    changed from them so run manifests can record it.
    """

    lr: float = 1e-3
    weight_decay: float = 1e-2
    batch_size: int = 512
    epochs: int = 256
    seed: int = 0
    d_model: int = 256
    n_heads: int = 4
    num_steps: int = 10
    beta_start: float = 1e-4
    beta_end: float = 0.05
    mode: str = "residual"
    joint: bool = True
    adapt_train: bool = True
    lr_schedule: str = "constant"
    latent_std: float = 1.0
    augment: int = 0
    k: int = 4
    max_minutes: float | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.augment < 0:
            raise ConfigError("augment must be >= 0")
        if self.lr_schedule not in ("constant", "cosine"):
            raise ConfigError(f"unknown lr_schedule {self.lr_schedule!r}; expected constant or cosine")
        for name in ("lr", "batch_size", "epochs", "d_model", "n_heads", "num_steps", "k", "latent_std"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")

    def to_dict(self) -> dict:
        return asdict(self)

    def hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode()
        return hashlib.sha256(blob).hexdigest()[:12]

    def deviations(self) -> dict:
        ref = TrainConfig()
        skip = {"seed", "extra", "max_minutes"}
        return {k: {"default": getattr(ref, k), "used": v} for k, v in self.to_dict().items()
                if k not in skip and v != getattr(ref, k)}

    @classmethod
    def from_dict(cls, doc: dict) -> "TrainConfig":
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(doc) - known
        if unknown:
            raise ConfigError(f"unknown training options: {sorted(unknown)}")
        return cls(**doc)


def fit(net: DenoiserNet, groups: Sequence[dict], schedule: NoiseSchedule, config: TrainConfig,
        on_epoch=None) -> list[float]:
    """Train ``net`` on per-scene groups; returns mean loss per epoch."""
    import time

    torch.manual_seed(config.seed)
    gen = torch.Generator().manual_seed(config.seed)
    rng = np.random.default_rng(config.seed)
    opt = torch.optim.AdamW(net.parameters(), lr=config.lr, weight_decay=config.weight_decay)
    sched = (torch.optim.lr_scheduler.CosineAnnealingLR(opt, T_max=config.epochs)
             if config.lr_schedule == "cosine" else None)
    history = []
    t0 = time.monotonic()
    for epoch in range(config.epochs):
        losses = []
        for batch in iterate_batches(groups, config.batch_size, rng):
            losses.append(train_step(batch, net, schedule, opt, config.mode, generator=gen))
        history.append(float(np.mean(losses)) if losses else float("nan"))
        if sched is not None:
            sched.step()
        if on_epoch is not None:
            on_epoch(epoch, history[-1])
        if config.max_minutes is not None and time.monotonic() - t0 > 60 * config.max_minutes:
            log.warning("stopping after %d epochs: time budget of %.1f min reached",
                        epoch + 1, config.max_minutes)
            break
    net.trained.fill_(True)
    return history


def save_checkpoint(path, net: DenoiserNet, schedule: NoiseSchedule, payload: dict) -> None:
    """Parameters, schedule and any extra JSON-able payload in one file."""
    torch.save({"net_config": net.config(), "state": net.state_dict(),
                "betas": schedule.betas.tolist(), "payload": payload}, Path(path))


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise CheckpointError(f"checkpoint {path} not found")
    blob = torch.load(path, map_location="cpu", weights_only=False)
    net = DenoiserNet(**blob["net_config"])
    net.load_state_dict(blob["state"])
    return net, NoiseSchedule(np.asarray(blob["betas"])), blob["payload"]
