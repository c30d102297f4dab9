"""Ensemble classifier training: per-channel normalization, SGD, early stopping.

Members are small, architecturally distinct classifiers registered by id; each
maps images (N, H, W, 3) in [0, 1] to (N, n_classes) probability rows. The
ensemble averages its members' rows.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .dataset import ClassTaxonomy, Manifest, class_counts, keyed_rank, select_split, stratified_split
from .errors import ConfigError, DataError, TrainingDivergence
from .images import load_manifest_images, load_png
from .rng import derive_seed, seeded_init, torch_gen

CHECKPOINT_VERSION = 1
DEFAULT_ARCHITECTURES = ("compact_cnn", "wide_cnn", "tiny_vit")


@dataclass
class TrainConfig:
    epochs: int = 100
    batch_size: int = 8
    lr: float = 0.01
    momentum: float = 0.9
    patience: int = 10
    seed: int = 0
    image_size: int = 32
    # the stopping rule watches validation accuracy; "val_loss" switches it to loss
    monitor: str = "val_accuracy"
    val_fraction: float = 0.2
    architectures: Sequence[str] = DEFAULT_ARCHITECTURES
    aggregation: str = "mean"
    hflip: bool = True

    def __post_init__(self):
        if self.epochs < 1 or self.patience < 1 or self.batch_size < 1:
            raise ConfigError("epochs, patience and batch_size must all be >= 1")
        if self.monitor not in ("val_accuracy", "val_loss"):
            raise ConfigError(f"monitor must be val_accuracy or val_loss, got {self.monitor!r}")
        if self.aggregation not in ("mean", "vote"):
            raise ConfigError(f"aggregation must be mean or vote, got {self.aggregation!r}")
        self.architectures = tuple(self.architectures)
        for a in self.architectures:
            if a not in ARCHITECTURES:
                raise ConfigError(f"unknown architecture {a!r}; known: {sorted(ARCHITECTURES)}")

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown train config keys: {sorted(unknown)}")
        return cls(**d)

    def to_json(self) -> dict:
        d = asdict(self)
        d["architectures"] = list(self.architectures)
        return d


# ---------------------------------------------------------------------------
# Normalization
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class NormalizationStats:
    mean: tuple[float, float, float]
    std: tuple[float, float, float]
    source_digest: str = ""

    def __post_init__(self):
        if any(not s > 0 for s in self.std):
            raise DataError(f"degenerate data: zero-variance channel (std={self.std})")

    def apply(self, x: torch.Tensor) -> torch.Tensor:
        """x is (N, 3, H, W) in [0, 1]."""
        m = torch.tensor(self.mean, dtype=x.dtype).view(1, 3, 1, 1)
        s = torch.tensor(self.std, dtype=x.dtype).view(1, 3, 1, 1)
        return (x - m) / s


def stats_from_images(imgs: np.ndarray, source_digest: str = "") -> NormalizationStats:
    if imgs.shape[0] == 0:
        raise DataError("cannot compute normalization on an empty split")
    flat = imgs.reshape(-1, 3).astype(np.float64)
    return NormalizationStats(tuple(flat.mean(0).tolist()), tuple(flat.std(0).tolist()), source_digest)


def _ids_digest(m: Manifest) -> str:
    return hashlib.sha256("\n".join(sorted(m.record_ids)).encode()).hexdigest()[:16]


def compute_normalization(train_split: Manifest, image_size: Optional[int] = None) -> NormalizationStats:
    """Per-channel mean and population std over every pixel of the split, in [0, 1] units."""
    if len(train_split) == 0:
        raise DataError("cannot compute normalization on an empty split")
    return stats_from_images(load_manifest_images(train_split, image_size), _ids_digest(train_split))


# ---------------------------------------------------------------------------
# Architectures
# ---------------------------------------------------------------------------

ARCHITECTURES: dict[str, Callable[[int, int], nn.Module]] = {}


def register_architecture(name: str):
    def deco(fn):
        ARCHITECTURES[name] = fn
        return fn
    return deco


@register_architecture("compact_cnn")
def compact_cnn(n_classes: int, image_size: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(3, 16, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(16, 32, 3, padding=1), nn.ReLU(), nn.MaxPool2d(2),
        nn.AdaptiveAvgPool2d(1), nn.Flatten(), nn.Linear(32, n_classes),
    )


@register_architecture("wide_cnn")
def wide_cnn(n_classes: int, image_size: int) -> nn.Module:
    return nn.Sequential(
        nn.Conv2d(3, 48, 5, padding=2), nn.BatchNorm2d(48), nn.ReLU(), nn.MaxPool2d(2),
        nn.Conv2d(48, 64, 3, padding=1), nn.BatchNorm2d(64), nn.ReLU(),
        nn.AdaptiveAvgPool2d(2), nn.Flatten(), nn.Dropout(0.2), nn.Linear(256, n_classes),
    )


class TinyViT(nn.Module):
    def __init__(self, n_classes: int, image_size: int, patch: int = 4, dim: int = 48, depth: int = 2):
        super().__init__()
        if image_size % patch:
            raise ConfigError(f"image_size {image_size} not divisible by patch {patch}")
        n_patches = (image_size // patch) ** 2
        self.embed = nn.Conv2d(3, dim, patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, n_patches, dim))
        nn.init.normal_(self.pos, std=0.02)
        layer = nn.TransformerEncoderLayer(dim, nhead=4, dim_feedforward=dim * 2, dropout=0.0,
                                           batch_first=True, norm_first=True)
        self.encoder = nn.TransformerEncoder(layer, depth, enable_nested_tensor=False)
        self.norm = nn.LayerNorm(dim)
        self.head = nn.Linear(dim, n_classes)

    def forward(self, x):
        h = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        h = self.encoder(h)
        return self.head(self.norm(h.mean(1)))


@register_architecture("tiny_vit")
def tiny_vit(n_classes: int, image_size: int) -> nn.Module:
    return TinyViT(n_classes, image_size)


def build_architecture(arch_id: str, n_classes: int, image_size: int, seed: int) -> nn.Module:
    if arch_id not in ARCHITECTURES:
        raise ConfigError(f"unknown architecture {arch_id!r}")
    with seeded_init(seed, arch_id, "init"):
        return ARCHITECTURES[arch_id](n_classes, image_size)


# ---------------------------------------------------------------------------
# Members and ensembles
# ---------------------------------------------------------------------------


def to_tensor(imgs: np.ndarray, image_size: int) -> torch.Tensor:
    x = torch.from_numpy(np.ascontiguousarray(imgs, dtype=np.float32)).permute(0, 3, 1, 2)
    if x.shape[-1] != image_size or x.shape[-2] != image_size:
        x = F.interpolate(x, size=(image_size, image_size), mode="bilinear", align_corners=False)
    return x


class ClassifierMember:
    """One trained network plus the normalization it was trained with."""

    def __init__(self, arch_id: str, net: nn.Module, stats: NormalizationStats, image_size: int):
        self.arch_id = arch_id
        self.net = net.eval()
        self.stats = stats
        self.image_size = image_size

    @torch.no_grad()
    def logits(self, imgs: np.ndarray) -> torch.Tensor:
        return self.net(self.stats.apply(to_tensor(imgs, self.image_size)))

    def __call__(self, imgs: np.ndarray) -> np.ndarray:
        return torch.softmax(self.logits(imgs).double(), dim=1).numpy()


@dataclass
class EnsembleModel:
    members: list
    stats: NormalizationStats
    taxonomy: ClassTaxonomy
    histories: list = field(default_factory=list)
    config: dict = field(default_factory=dict)
    aggregation: str = "mean"
    # scenario name, per-class counts and record ids of the training manifest
    trained_on: dict = field(default_factory=dict)

    def __call__(self, imgs: np.ndarray, batch_size: int = 512) -> np.ndarray:
        out = []
        for i in range(0, imgs.shape[0], batch_size):
            rows = [m(imgs[i:i + batch_size]) for m in self.members]
            out.append(aggregate(rows, self.aggregation))
        if not out:
            return np.zeros((0, len(self.taxonomy)))
        return np.concatenate(out)


def aggregate(rows: Sequence[np.ndarray], how: str = "mean") -> np.ndarray:
    """Combine per-member (N, K) probability rows into one (N, K) probability array."""
    stacked = np.stack([np.asarray(r, dtype=np.float64) for r in rows])
    if how == "mean":
        return stacked.mean(0)
    votes = np.zeros(stacked.shape[1:])
    winners = stacked.argmax(2)
    for member_winners in winners:
        votes[np.arange(votes.shape[0]), member_winners] += 1
    return votes / len(rows)


def predict(ensemble: EnsembleModel, image) -> np.ndarray:
    """Score vector for one image (HxWx3 array in [0, 1] or a PNG path)."""
    if not isinstance(image, np.ndarray):
        image = load_png(image)
    return ensemble(image[None])[0]


# ---------------------------------------------------------------------------
# Early stopping loop
# ---------------------------------------------------------------------------


@dataclass
class History:
    epochs: list = field(default_factory=list)
    best_epoch: int = 0
    stopped_epoch: int = 0
    monitor: str = "val_accuracy"

    @property
    def early_stopped(self) -> bool:
        return bool(self.epochs) and self.stopped_epoch < self.epochs[-1].get("max_epochs", self.stopped_epoch + 1)

    def to_json(self) -> dict:
        return asdict(self)


def fit_with_early_stopping(run_epoch: Callable[[int], dict], epochs: int, patience: int,
                            monitor: str = "val_accuracy",
                            on_improve: Optional[Callable[[int], None]] = None) -> History:
    """Call ``run_epoch(e)`` for e = 1, 2, ... until ``e == min(epochs, best + patience)``.

    ``run_epoch`` returns a dict holding at least the monitored metric. Only a strict
    improvement moves ``best``, so ties keep the earliest epoch.
    """
    hist = History(monitor=monitor)
    best_val = None
    for e in range(1, epochs + 1):
        row = dict(run_epoch(e))
        row["epoch"] = e
        row["max_epochs"] = epochs
        hist.epochs.append(row)
        val = row[monitor]
        better = best_val is None or (val > best_val if monitor == "val_accuracy" else val < best_val)
        if better:
            best_val, hist.best_epoch = val, e
            if on_improve is not None:
                on_improve(e)
        hist.stopped_epoch = e
        if e >= hist.best_epoch + patience:
            break
    return hist


def _train_batches(net, opt, x_tr, y_tr, perm, flips, config: TrainConfig, tag, epoch: int) -> tuple[float, int]:
    total, n = 0.0, 0
    for i in range(0, perm.numel(), config.batch_size):
        idx = perm[i:i + config.batch_size]
        xb = x_tr[idx]
        if config.hflip:
            xb = torch.where(flips[idx].view(-1, 1, 1, 1), xb.flip(3), xb)
        loss = F.cross_entropy(net(xb), y_tr[idx])
        if not torch.isfinite(loss):
            raise TrainingDivergence(f"{tag}: non-finite training loss in epoch {epoch}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
        total += loss.item() * idx.numel()
        n += idx.numel()
    return total, n


def _fit(net: nn.Module, x_tr, y_tr, x_va, y_va, config: TrainConfig, tag) -> History:
    opt = torch.optim.SGD(net.parameters(), lr=config.lr, momentum=config.momentum)
    best_state = {"state": copy.deepcopy(net.state_dict())}

    def run_epoch(epoch: int) -> dict:
        net.train()
        g = torch_gen(config.seed, tag, "epoch", epoch)
        perm = torch.randperm(x_tr.shape[0], generator=g)
        flips = torch.rand(x_tr.shape[0], generator=g) < 0.5
        # dropout draws from the global stream; pin it per epoch so reruns match
        with seeded_init(config.seed, tag, "dropout", epoch):
            total, n = _train_batches(net, opt, x_tr, y_tr, perm, flips, config, tag, epoch)
        net.eval()
        with torch.no_grad():
            logits = net(x_va)
            val_loss = F.cross_entropy(logits, y_va).item() if len(y_va) else float("nan")
            correct = int((logits.argmax(1) == y_va).sum()) if len(y_va) else 0
        return {
            "train_loss": total / max(n, 1),
            "val_accuracy": correct / max(len(y_va), 1),
            "val_loss": val_loss,
        }

    def snapshot(_epoch):
        best_state["state"] = copy.deepcopy(net.state_dict())

    hist = fit_with_early_stopping(run_epoch, config.epochs, config.patience, config.monitor, snapshot)
    net.load_state_dict(best_state["state"])
    net.eval()
    return hist


def _split_tensors(m: Manifest, stats: NormalizationStats, config: TrainConfig):
    ids = m.taxonomy.class_ids
    tr, va = select_split(m, "train"), select_split(m, "val")
    if len(tr) == 0:
        raise DataError("training split is empty")

    def tensors(part):
        x = stats.apply(to_tensor(load_manifest_images(part, config.image_size), config.image_size))
        y = torch.tensor([ids.index(r.label) for r in part.records], dtype=torch.long)
        return x, y

    return tensors(tr) + tensors(va)


def prepare_scenario(scenario: Manifest, config: TrainConfig) -> tuple[Manifest, NormalizationStats]:
    """Split (if needed) and compute normalization on the train split only."""
    if any(r.split not in ("train", "val") for r in scenario.records):
        scenario = stratified_split(scenario, (1 - config.val_fraction, config.val_fraction), config.seed)
    stats = compute_normalization(select_split(scenario, "train"), config.image_size)
    return scenario, stats


def train_member(arch_id: str, scenario: Manifest, config: TrainConfig,
                 stats: Optional[NormalizationStats] = None, seed: Optional[int] = None):
    """Returns ``(member, history)``; weights are restored from the best epoch."""
    if stats is None:
        scenario, stats = prepare_scenario(scenario, config)
    seed = config.seed if seed is None else seed
    x_tr, y_tr, x_va, y_va = _split_tensors(scenario, stats, config)
    net = build_architecture(arch_id, len(scenario.taxonomy), config.image_size, seed)
    member_cfg = copy.copy(config)
    member_cfg.seed = seed
    hist = _fit(net, x_tr, y_tr, x_va, y_va, member_cfg, arch_id)
    return ClassifierMember(arch_id, net, stats, config.image_size), hist


def train_ensemble(scenario: Manifest, config: TrainConfig) -> EnsembleModel:
    scenario, stats = prepare_scenario(scenario, config)
    members, histories = [], []
    for i, arch in enumerate(config.architectures):
        member, hist = train_member(arch, scenario, config, stats, seed=derive_seed(config.seed, "member", i, arch))
        members.append(member)
        histories.append(hist)
    return EnsembleModel(members, stats, scenario.taxonomy, histories, config.to_json(), config.aggregation,
                         describe_scenario(scenario))


def describe_scenario(m: Manifest) -> dict:
    real = class_counts(m, "real")
    syn = class_counts(m, "synthetic")
    return {
        "created_by": m.created_by,
        "per_class_real": max(real.values(), default=0),
        "per_class_synthetic": max(syn.values(), default=0),
        "record_ids": sorted(m.record_ids),
    }


# ---------------------------------------------------------------------------
# Binary in-domain scorer
# ---------------------------------------------------------------------------


class DomainScorer:
    """Binary classifier returning P(in-domain) per image."""

    def __init__(self, member: ClassifierMember, history: Optional[History] = None):
        self.member = member
        self.history = history

    def __call__(self, imgs: np.ndarray) -> np.ndarray:
        return self.member(imgs)[:, 1]


def train_domain_scorer(positives: Manifest, negatives: Sequence, config: TrainConfig) -> DomainScorer:
    """Fit a compact CNN separating manifest images (in-domain) from ``negatives`` (PNG paths)."""
    if len(positives) == 0 or not negatives:
        raise DataError("domain scorer needs both in-domain and out-of-domain images")
    pos = load_manifest_images(positives, config.image_size)
    neg = np.stack([load_png(p, config.image_size) for p in negatives])
    keys = [keyed_rank(config.seed, r.record_id) for r in positives.records]
    keys += [keyed_rank(config.seed, f"neg:{Path(p).name}") for p in negatives]
    imgs = np.concatenate([pos, neg])
    labels = np.array([1] * len(pos) + [0] * len(neg))
    # hash-ordered 80/20 split, stratified by polarity
    is_val = np.zeros(len(imgs), dtype=bool)
    for cls in (0, 1):
        idx = [i for i in np.flatnonzero(labels == cls)]
        idx.sort(key=lambda i: keys[i])
        n_val = len(idx) - int(np.floor((1 - config.val_fraction) * len(idx) + 0.5))
        is_val[idx[len(idx) - n_val:]] = True
    stats = stats_from_images(imgs[~is_val])
    x = stats.apply(to_tensor(imgs, config.image_size))
    y = torch.from_numpy(labels).long()
    tr, va = torch.from_numpy(~is_val), torch.from_numpy(is_val)
    net = build_architecture("compact_cnn", 2, config.image_size, derive_seed(config.seed, "domain"))
    hist = _fit(net, x[tr], y[tr], x[va], y[va], config, "domain")
    return DomainScorer(ClassifierMember("compact_cnn", net, stats, config.image_size), hist)


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------


def _member_state(m: ClassifierMember) -> dict:
    return {"arch_id": m.arch_id, "state_dict": m.net.state_dict(), "image_size": m.image_size}


def _stats_json(s: NormalizationStats) -> dict:
    return {"mean": list(s.mean), "std": list(s.std), "source_digest": s.source_digest}


def _restore_member(d: dict, stats: NormalizationStats, n_classes: int) -> ClassifierMember:
    net = ARCHITECTURES[d["arch_id"]](n_classes, d["image_size"])
    net.load_state_dict(d["state_dict"])
    return ClassifierMember(d["arch_id"], net, stats, d["image_size"])


def save_ensemble(ens: EnsembleModel, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "diffaug-ensemble",
        "version": CHECKPOINT_VERSION,
        "taxonomy": ens.taxonomy.to_json(),
        "stats": _stats_json(ens.stats),
        "members": [_member_state(m) for m in ens.members],
        "histories": [h.to_json() for h in ens.histories],
        "config": ens.config,
        "aggregation": ens.aggregation,
        "trained_on": ens.trained_on,
    }, path)


def load_ensemble(path) -> EnsembleModel:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != "diffaug-ensemble" or state.get("version") != CHECKPOINT_VERSION:
        raise DataError(f"{path}: not an ensemble checkpoint (version {CHECKPOINT_VERSION})")
    tax = ClassTaxonomy.from_json(state["taxonomy"])
    stats = NormalizationStats(tuple(state["stats"]["mean"]), tuple(state["stats"]["std"]),
                               state["stats"]["source_digest"])
    members = [_restore_member(d, stats, len(tax)) for d in state["members"]]
    hists = [History(**h) for h in state["histories"]]
    return EnsembleModel(members, stats, tax, hists, state["config"], state["aggregation"],
                         state.get("trained_on", {}))


def save_domain_scorer(scorer: DomainScorer, path) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save({
        "format": "diffaug-domain",
        "version": CHECKPOINT_VERSION,
        "stats": _stats_json(scorer.member.stats),
        "member": _member_state(scorer.member),
        "history": scorer.history.to_json() if scorer.history else None,
    }, path)


def load_domain_scorer(path) -> DomainScorer:
    state = torch.load(path, map_location="cpu", weights_only=False)
    if state.get("format") != "diffaug-domain":
        raise DataError(f"{path}: not a domain scorer checkpoint")
    s = state["stats"]
    stats = NormalizationStats(tuple(s["mean"]), tuple(s["std"]), s["source_digest"])
    hist = History(**state["history"]) if state["history"] else None
    return DomainScorer(_restore_member(state["member"], stats, 2), hist)


def history_table(ens: EnsembleModel) -> list[dict]:
    rows = []
    for m, h in zip(ens.members, ens.histories):
        for e in h.epochs:
            rows.append({"arch_id": m.arch_id, **{k: v for k, v in e.items() if k != "max_epochs"}})
    return rows
