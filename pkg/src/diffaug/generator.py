"""Class-conditional pixel-space DDPM with a per-class learned token table.

The pipeline keeps three parts: prompt encoding (one learned vector per class),
a conditional noise-prediction network, and a decoder (identity here, since the
model denoises pixels directly).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ClassTaxonomy, ImageRecord, Manifest, new_manifest, save_manifest
from .errors import ConfigError, DataError, TrainingDivergence, ValidationError
from .images import load_manifest_images, save_png
from .rng import derive_seed, seeded_init, torch_gen

CHECKPOINT_VERSION = 1
# Reference-scale generation request per class; desk runs override it.
REFERENCE_SCALE_PER_CLASS = 30000


# ---------------------------------------------------------------------------
# Noise schedule and forward process
# ---------------------------------------------------------------------------


class NoiseSchedule:
    """betas[t-1] is beta_t for t = 1..T; alpha_bar is the running product of 1 - beta."""

    def __init__(self, betas):
        betas = torch.as_tensor(betas, dtype=torch.float64).flatten()
        if betas.numel() < 1:
            raise ValidationError("schedule needs at least one timestep")
        if not torch.all((betas > 0) & (betas < 1)):
            raise ValidationError("every beta must lie strictly inside (0, 1)")
        self.betas = betas
        self.alphas = 1.0 - betas
        self.alpha_bars = torch.cumprod(self.alphas, 0)

    @classmethod
    def linear(cls, T: int = 200, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        return cls(torch.linspace(beta_start, beta_end, T, dtype=torch.float64))

    @property
    def T(self) -> int:
        return self.betas.numel()

    def alpha_bar(self, t) -> torch.Tensor:
        return self.alpha_bars[torch.as_tensor(t) - 1]

    def to_json(self) -> dict:
        return {"betas": self.betas.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "NoiseSchedule":
        return cls(d["betas"])


def forward_noise(x0: torch.Tensor, t, eps: torch.Tensor, schedule: NoiseSchedule) -> torch.Tensor:
    """x_t = sqrt(abar_t) * x0 + sqrt(1 - abar_t) * eps.

    ``t`` is an int or a (B,) tensor of timesteps in 1..T, one per leading item.
    """
    t = torch.as_tensor(t)
    if torch.any(t < 1) or torch.any(t > schedule.T):
        raise ValidationError(f"timestep out of range 1..{schedule.T}")
    ab = schedule.alpha_bar(t)
    if ab.ndim == 1:
        ab = ab.view(-1, *([1] * (x0.ndim - 1)))
    # coefficients in float64 first: 1 - abar loses most of its digits in float32 near t = 1
    return ab.sqrt().to(x0.dtype) * x0 + (1.0 - ab).sqrt().to(x0.dtype) * eps


# ---------------------------------------------------------------------------
# Prompt encoder, denoiser, decoder
# ---------------------------------------------------------------------------


class EmbeddingTable(nn.Module):
    """One learned conditioning vector per taxonomy class."""

    def __init__(self, class_ids, dim: int = 64, seed: int = 0):
        super().__init__()
        self.class_ids = list(class_ids)
        g = torch.Generator().manual_seed(seed)
        init = torch.randn(len(self.class_ids), dim, generator=g) / math.sqrt(dim)
        self.weight = nn.Parameter(init)

    @property
    def dim(self) -> int:
        return self.weight.shape[1]

    def index(self, class_id: str) -> int:
        try:
            return self.class_ids.index(class_id)
        except ValueError:
            raise ValidationError(f"unknown class {class_id!r}") from None

    def forward(self, idx: torch.Tensor) -> torch.Tensor:
        return self.weight[idx]

    def vectors(self) -> dict[str, np.ndarray]:
        w = self.weight.detach().numpy()
        return {c: w[i].copy() for i, c in enumerate(self.class_ids)}


def encode_prompt(class_id: str, table: EmbeddingTable) -> torch.Tensor:
    return table.weight[table.index(class_id)].detach().clone()


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / half)
    args = t.float()[:, None] * freqs[None, :]
    return torch.cat([torch.sin(args), torch.cos(args)], dim=1)


def _group_norm(ch: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(8, ch), ch)


class ResBlock(nn.Module):
    def __init__(self, cin: int, cout: int, cond_dim: int):
        super().__init__()
        self.norm1 = _group_norm(cin)
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.cond = nn.Linear(cond_dim, cout)
        self.norm2 = _group_norm(cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.skip = nn.Conv2d(cin, cout, 1) if cin != cout else nn.Identity()

    def forward(self, x, c):
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.cond(c)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class AttnBlock(nn.Module):
    """Single-head self-attention over spatial positions (used at the lowest resolution)."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = _group_norm(ch)
        self.qkv = nn.Conv2d(ch, 3 * ch, 1)
        self.proj = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        B, C, H, W = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(B, 3, C, H * W).unbind(1)
        a = torch.softmax(q.transpose(1, 2) @ k / math.sqrt(C), dim=-1)
        return x + self.proj((v @ a.transpose(1, 2)).reshape(B, C, H, W))


class Denoiser(nn.Module):
    """Small U-Net predicting the noise added to ``x_t`` given (t, class embedding)."""

    def __init__(self, image_size: int = 32, base_channels: int = 32, cond_dim: int = 64):
        super().__init__()
        if image_size % 4:
            raise ConfigError("image_size must be divisible by 4")
        self.image_size = image_size
        self.base_channels = base_channels
        self.cond_dim = cond_dim
        c1, c2 = base_channels, base_channels * 2
        self.time_mlp = nn.Sequential(nn.Linear(cond_dim, cond_dim), nn.SiLU(), nn.Linear(cond_dim, cond_dim))
        self.cond_act = nn.SiLU()
        self.conv_in = nn.Conv2d(3, c1, 3, padding=1)
        self.down1 = ResBlock(c1, c1, cond_dim)
        self.pool1 = nn.Conv2d(c1, c2, 3, stride=2, padding=1)
        self.down2 = ResBlock(c2, c2, cond_dim)
        self.pool2 = nn.Conv2d(c2, c2, 3, stride=2, padding=1)
        # global context at the bottleneck keeps the overall colour consistent at high noise
        self.attn = AttnBlock(c2)
        self.mid = ResBlock(c2, c2, cond_dim)
        self.up2 = ResBlock(c2 + c2, c2, cond_dim)
        self.up1 = ResBlock(c2 + c1, c1, cond_dim)
        self.norm_out = _group_norm(c1)
        self.conv_out = nn.Conv2d(c1, 3, 3, padding=1)

    def forward(self, x, t, emb):
        c = self.cond_act(self.time_mlp(timestep_embedding(t, self.cond_dim)) + emb)
        h1 = self.down1(self.conv_in(x), c)
        h2 = self.down2(self.pool1(h1), c)
        h = self.mid(self.attn(self.pool2(h2)), c)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up2(torch.cat([h, h2], 1), c)
        h = F.interpolate(h, scale_factor=2, mode="nearest")
        h = self.up1(torch.cat([h, h1], 1), c)
        return self.conv_out(F.silu(self.norm_out(h)))


def decode(x: torch.Tensor) -> torch.Tensor:
    """Model space [-1, 1] -> pixel space [0, 1]. Identity decoder plus rescaling."""
    return ((x.clamp(-1.0, 1.0) + 1.0) / 2.0)


def parameter_checksum(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, p in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(p.detach().contiguous().numpy().tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass
class GeneratorConfig:
    seed: int = 0
    steps: int = 2000
    lr: float = 1e-3
    batch_size: int = 64
    image_size: int = 32
    base_channels: int = 32
    embed_dim: int = 64
    timesteps: int = 200
    # None -> the 1e-4..0.02 reference range (defined for T=1000) rescaled by 1000/T,
    # so that alpha_bar_T is ~0 and sampling from pure noise matches the forward process
    beta_start: Optional[float] = None
    beta_end: Optional[float] = None
    smoothing_window: int = 50
    ema_decay: float = 0.995

    def schedule(self) -> NoiseSchedule:
        scale = 1000.0 / self.timesteps
        lo = self.beta_start if self.beta_start is not None else min(1e-4 * scale, 0.5)
        hi = self.beta_end if self.beta_end is not None else min(0.02 * scale, 0.999)
        return NoiseSchedule.linear(self.timesteps, lo, hi)

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generator config keys: {sorted(unknown)}")
        return cls(**d)


def build_generator(taxonomy: ClassTaxonomy, config: GeneratorConfig) -> tuple[Denoiser, EmbeddingTable]:
    with seeded_init(config.seed, "denoiser-init"):
        model = Denoiser(config.image_size, config.base_channels, config.embed_dim)
    table = EmbeddingTable(taxonomy.class_ids, config.embed_dim, seed=derive_seed(config.seed, "embed-init"))
    return model, table


def smooth_curve(raw, window: int) -> list[float]:
    """Trailing moving average."""
    raw = np.asarray(raw, dtype=np.float64)
    if raw.size == 0:
        return []
    c = np.concatenate([[0.0], np.cumsum(raw)])
    idx = np.arange(1, raw.size + 1)
    lo = np.maximum(0, idx - window)
    return ((c[idx] - c[lo]) / (idx - lo)).tolist()


def _training_tensors(train: Manifest, image_size: int, table: EmbeddingTable):
    if len(train) == 0:
        raise DataError("training manifest is empty")
    imgs = load_manifest_images(train, image_size)
    x = torch.from_numpy(imgs).permute(0, 3, 1, 2).contiguous() * 2.0 - 1.0
    y = torch.tensor([table.index(r.label) for r in train.records], dtype=torch.long)
    return x, y


def _diffusion_loop(model, table, x, y, schedule, params, config, tag, ema=None) -> list[float]:
    opt = torch.optim.Adam(params, lr=config.lr)
    g = torch_gen(config.seed, tag)
    raw = []
    for step in range(config.steps):
        idx = torch.randint(0, x.shape[0], (min(config.batch_size, x.shape[0]),), generator=g)
        t = torch.randint(1, schedule.T + 1, (idx.numel(),), generator=g)
        eps = torch.randn(x[idx].shape, generator=g)
        xt = forward_noise(x[idx], t, eps, schedule)
        loss = F.mse_loss(model(xt, t, table(y[idx])), eps)
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"{tag}: non-finite loss {loss.item()} at step {step} "
                                     f"(lr={config.lr}, batch={config.batch_size})")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        if ema is not None:
            ema.update()
        raw.append(loss.item())
    return raw


class _EMA:
    """Exponential moving average of parameters; ``swap_in`` copies the averages back.

    The decay warms up as (1 + n) / (10 + n) so short runs are not dominated by the init.
    """

    def __init__(self, params, decay: float):
        self.params = list(params)
        self.decay = decay
        self.n = 0
        self.shadow = [p.detach().clone() for p in self.params]

    @torch.no_grad()
    def update(self):
        d = min(self.decay, (1 + self.n) / (10 + self.n))
        self.n += 1
        for s, p in zip(self.shadow, self.params):
            s.mul_(d).add_(p.detach(), alpha=1 - d)

    @torch.no_grad()
    def swap_in(self):
        for s, p in zip(self.shadow, self.params):
            p.copy_(s)


def train_denoiser(train: Manifest, schedule: NoiseSchedule, config: GeneratorConfig,
                   model: Optional[Denoiser] = None, table: Optional[EmbeddingTable] = None):
    """Jointly fit the denoiser and the class table on epsilon-prediction MSE.

    Returns ``(model, table, smoothed_loss_curve)``.
    """
    if model is None or table is None:
        model, table = build_generator(train.taxonomy, config)
    x, y = _training_tensors(train, config.image_size, table)
    params = list(model.parameters()) + list(table.parameters())
    ema = _EMA(params, config.ema_decay) if config.ema_decay else None
    model.train()
    raw = _diffusion_loop(model, table, x, y, schedule, params, config, "train-denoiser", ema)
    if ema is not None:
        ema.swap_in()
    model.eval()
    return model, table, smooth_curve(raw, config.smoothing_window)


def train_embeddings(frozen: Denoiser, train: Manifest, config: GeneratorConfig,
                     schedule: Optional[NoiseSchedule] = None, table: Optional[EmbeddingTable] = None,
                     classes: Optional[list[str]] = None) -> EmbeddingTable:
    """Textual-inversion mode: only the class vectors move; ``frozen`` is untouched.

    ``classes`` restricts updates to those rows (default: every class present in ``train``).
    """
    schedule = schedule or config.schedule()
    if table is None:
        _, table = build_generator(train.taxonomy, config)
    new_table = EmbeddingTable(table.class_ids, table.dim)
    new_table.weight.data.copy_(table.weight.data)
    x, y = _training_tensors(train, config.image_size, new_table)
    classes = classes if classes is not None else sorted({r.label for r in train.records})
    mask = torch.zeros(len(new_table.class_ids), 1)
    for c in classes:
        mask[new_table.index(c)] = 1.0
    new_table.weight.register_hook(lambda grad: grad * mask)

    flags = [p.requires_grad for p in frozen.parameters()]
    for p in frozen.parameters():
        p.requires_grad_(False)
    frozen.eval()
    try:
        _diffusion_loop(frozen, new_table, x, y, schedule, [new_table.weight], config, "train-embeddings")
    finally:
        for p, f in zip(frozen.parameters(), flags):
            p.requires_grad_(f)
    # drop the gradient-mask hook so the table pickles cleanly
    out = EmbeddingTable(new_table.class_ids, new_table.dim)
    out.weight.data.copy_(new_table.weight.data)
    return out


# ---------------------------------------------------------------------------
# Sampling
# ---------------------------------------------------------------------------


@torch.no_grad()
def sample(model: Denoiser, table: EmbeddingTable, class_id: str, n: int, seed: int,
           schedule: NoiseSchedule, batch_size: int = 256, clip_denoised: bool = True) -> list[np.ndarray]:
    """Ancestral DDPM sampling (sigma_t^2 = beta_t) from pure noise, T steps.

    With ``clip_denoised`` the posterior mean is formed from the predicted x0 clamped
    to [-1, 1]; without it, from epsilon directly (the two agree when nothing clips).

    Image ``i`` draws all of its noise from its own stream ``(seed, i)``.
    Returns HxWx3 float32 arrays in [0, 1].
    """
    if n < 0:
        raise ValidationError("n must be >= 0")
    emb = encode_prompt(class_id, table)
    model.eval()
    S = model.image_size
    # per-step coefficients, formed in float64 and then cast
    ab = schedule.alpha_bars
    ab_prev = torch.cat([torch.ones(1, dtype=ab.dtype), ab[:-1]])
    b = schedule.betas
    c_x0 = (ab.rsqrt()).float()                                  # x0 = c_x0 * (x - c_eps * eps)
    c_eps = ((1 - ab).sqrt()).float()
    c_mean_x0 = (b * ab_prev.sqrt() / (1 - ab)).float()          # posterior mean coefficients
    c_mean_xt = ((1 - ab_prev) * schedule.alphas.sqrt() / (1 - ab)).float()
    c_direct = (b / (1 - ab).sqrt()).float()
    c_scale = schedule.alphas.rsqrt().float()
    sigma = b.sqrt().float()
    out: list[np.ndarray] = []
    for start in range(0, n, batch_size):
        ids = range(start, min(n, start + batch_size))
        gens = [torch_gen(seed, "sample", i) for i in ids]
        draw = lambda: torch.stack([torch.randn(3, S, S, generator=g) for g in gens])
        x = draw()
        c = emb.expand(len(gens), -1)
        for t in range(schedule.T, 0, -1):
            tt = torch.full((len(gens),), t, dtype=torch.long)
            eps = model(x, tt, c)
            i = t - 1
            if clip_denoised:
                x0 = (c_x0[i] * (x - c_eps[i] * eps)).clamp(-1.0, 1.0)
                x = c_mean_x0[i] * x0 + c_mean_xt[i] * x
            else:
                x = c_scale[i] * (x - c_direct[i] * eps)
            if t > 1:
                x = x + sigma[i] * draw()
        imgs = decode(x).permute(0, 2, 3, 1).numpy()
        out.extend(np.ascontiguousarray(im) for im in imgs)
    return out


@dataclass
class GeneratorRun:
    run_id: str
    seed: int
    per_class_counts: dict
    out_dir: str
    sampler_steps: Optional[int] = None

    def __post_init__(self):
        if any(int(v) < 0 for v in self.per_class_counts.values()):
            raise ConfigError("requested counts must be >= 0")

    @classmethod
    def from_dict(cls, d: dict) -> "GeneratorRun":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown generation config keys: {sorted(unknown)}")
        return cls(**d)


def generate_to_manifest(run: GeneratorRun, model: Denoiser, table: EmbeddingTable,
                         schedule: NoiseSchedule, taxonomy: ClassTaxonomy) -> Manifest:
    """Sample every requested class and write PNGs under ``out_dir/<run_id>/<class_id>/``."""
    steps = run.sampler_steps or schedule.T
    if steps != schedule.T:
        raise ConfigError(f"sampler_steps={steps} must equal the schedule length T={schedule.T}")
    unknown = [c for c in run.per_class_counts if c not in taxonomy]
    if unknown:
        raise ConfigError(f"unknown classes in per_class_counts: {unknown}")
    out_dir = Path(run.out_dir)
    total = sum(int(v) for v in run.per_class_counts.values())
    records, written = [], 0
    for cid in taxonomy.class_ids:
        n = int(run.per_class_counts.get(cid, 0))
        if n == 0:
            continue
        class_seed = derive_seed(run.seed, run.run_id, cid)
        imgs = sample(model, table, cid, n, class_seed, schedule)
        for i, img in enumerate(imgs):
            rel = f"{run.run_id}/{cid}/{i:05d}.png"
            try:
                save_png(img, out_dir / rel)
            except OSError as e:
                raise OSError(f"writing {out_dir / rel} failed after {written} of {total} images: {e}") from e
            written += 1
            records.append(ImageRecord(
                record_id=f"{run.run_id}-{cid}-{i:05d}",
                image_path=rel,
                label=cid,
                source="synthetic",
                provenance={
                    "generator_run_id": run.run_id,
                    "seed": derive_seed(class_seed, "sample", i),
                    "prompt": taxonomy.get(cid).display_name,
                    "sampler_steps": steps,
                },
            ))
    return new_manifest(records, "generate", root=out_dir, taxonomy=taxonomy)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def save_generator(path, model: Denoiser, table: EmbeddingTable, schedule: NoiseSchedule,
                   config: GeneratorConfig, extra: Optional[dict] = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    state = {
        "format": "diffaug-generator",
        "version": CHECKPOINT_VERSION,
        "schedule": schedule.to_json(),
        "denoiser": {
            "image_size": model.image_size,
            "base_channels": model.base_channels,
            "cond_dim": model.cond_dim,
            "state_dict": model.state_dict(),
        },
        "embeddings": {"class_ids": table.class_ids, "weight": table.weight.detach().clone()},
        "config": asdict(config),
        "extra": extra or {},
    }
    torch.save(state, path)


def load_generator(path):
    """Returns ``(model, table, schedule, config)``."""
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != "diffaug-generator" or state.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not a generator checkpoint (version {CHECKPOINT_VERSION})")
    d = state["denoiser"]
    model = Denoiser(d["image_size"], d["base_channels"], d["cond_dim"])
    model.load_state_dict(d["state_dict"])
    model.eval()
    e = state["embeddings"]
    table = EmbeddingTable(e["class_ids"], e["weight"].shape[1])
    table.weight.data.copy_(e["weight"])
    return model, table, NoiseSchedule.from_json(state["schedule"]), GeneratorConfig(**state["config"])
