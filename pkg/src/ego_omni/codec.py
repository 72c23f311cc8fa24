"""Part-aware VQ-VAE: one conv encoder and codebook per body part, a joint decoder.

Each part's column block goes through its own 1D conv encoder (two stride-2
blocks, so T' = T/4), is L2-normalized, and snapped to the nearest row of that
part's codebook. The decoder sees the six quantized streams concatenated along
channels and upsamples back to T frames of the full 263-channel representation.

Inputs are standardized per channel with training-set mean and std; the
decoder predicts standardized channels.
"""

from __future__ import annotations

import copy
import logging
import subprocess
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .kinematics import PARTS
from .reprs import N_CHANNELS, PART_WIDTHS, MotionRepr

log = logging.getLogger(__name__)


class CodecError(ValueError):
    pass


@dataclass
class CodecConfig:
    n_code: int = 256
    code_dim: int = 32
    channels: int = 128
    n_res: int = 3
    beta: float = 0.25
    lr: float = 1e-4
    batch_size: int = 128
    epochs: int = 20
    seed: int = 0
    init: str = "data"  # "data" or "uniform"
    book_norm: bool = False  # project codebook rows onto the unit sphere after each step
    holistic: bool = False  # ablation: one encoder and one (N, 6d) codebook for the whole body

    @classmethod
    def paper(cls, **kw) -> "CodecConfig":
        return replace(cls(n_code=4096, code_dim=64, channels=512), **kw)

    @classmethod
    def desk(cls, **kw) -> "CodecConfig":
        # small batches so a 256-clip toy set still yields ~1300 updates; a
        # larger lr collapses the codebooks to a handful of live rows
        return replace(cls(lr=2e-4, batch_size=4), **kw)


def _part_slices():
    col, out = 0, []
    for p in PARTS:
        out.append((col, col + PART_WIDTHS[p]))
        col += PART_WIDTHS[p]
    return out


PART_SLICES = _part_slices()


class ResBlock(nn.Module):
    def __init__(self, ch):
        super().__init__()
        self.conv1 = nn.Conv1d(ch, ch, 3, padding=1)
        self.conv2 = nn.Conv1d(ch, ch, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.relu(self.conv1(x)))


class PartEncoder(nn.Module):
    def __init__(self, in_dim, ch, out_dim, n_res=3):
        super().__init__()
        layers = [nn.Conv1d(in_dim, ch, 3, padding=1), nn.ReLU()]
        for _ in range(2):
            layers.append(nn.Conv1d(ch, ch, 4, stride=2, padding=1))
            layers.extend(ResBlock(ch) for _ in range(n_res))
        layers.append(nn.Conv1d(ch, out_dim, 3, padding=1))
        self.net = nn.Sequential(*layers)

    def forward(self, x):  # (B, D, T) -> (B, d, T/4)
        return self.net(x)


class Decoder(nn.Module):
    def __init__(self, in_dim, ch, out_dim, n_res=3):
        super().__init__()
        layers = [nn.Conv1d(in_dim, ch, 3, padding=1), nn.ReLU()]
        for _ in range(2):
            layers.extend(ResBlock(ch) for _ in range(n_res))
            layers.append(nn.Upsample(scale_factor=2, mode="nearest"))
            layers.append(nn.Conv1d(ch, ch, 3, padding=1))
        layers.extend([nn.ReLU(), nn.Conv1d(ch, out_dim, 3, padding=1)])
        self.net = nn.Sequential(*layers)

    def forward(self, x):
        return self.net(x)


@dataclass
class QuantizedLatent:
    indices: torch.Tensor  # (..., T', 6) long
    features: torch.Tensor  # (..., T', 6, d)

    def __post_init__(self):
        if self.indices.shape[-2] < 2:
            raise CodecError("quantized latent needs T' >= 2")


def nearest_code(Q: torch.Tensor, book: torch.Tensor, chunk: int = 4096) -> torch.Tensor:
    """Index of the Euclidean-nearest row of ``book`` for each row of ``Q`` (N, d).

    Distances are formed from explicit differences so symmetric ties stay
    exact; argmin then resolves them to the lowest index.
    """
    out = []
    book = book.detach()
    step = max(1, chunk * 64 // max(1, book.shape[0]))
    for s in range(0, Q.shape[0], step):
        q = Q[s:s + step].detach()
        d2 = ((q[:, None, :] - book[None, :, :]) ** 2).sum(-1)
        out.append(torch.argmin(d2, dim=1))
    return torch.cat(out) if out else torch.zeros(0, dtype=torch.long)


def quantize(Q: torch.Tensor, books: torch.Tensor) -> QuantizedLatent:
    """Per-part nearest-neighbour quantization of Q (..., T', 6, d) with books (6, N, d).

    ``features`` are exact codebook rows (gradient flows into ``books`` only);
    use :func:`straight_through` to route decoder gradients back to Q.
    """
    if books.shape[0] != len(PARTS):
        raise CodecError(f"expected {len(PARTS)} codebooks, got {books.shape[0]}")
    return quantize_books(Q, books)


def quantize_books(Q: torch.Tensor, books: torch.Tensor) -> QuantizedLatent:
    """Slot i of Q (..., T', K, d) against books[i] for K codebooks."""
    if not torch.isfinite(Q).all():
        raise CodecError("non-finite features")
    lead, K = Q.shape[:-2], books.shape[0]
    idx = torch.stack(
        [nearest_code(Q[..., i, :].reshape(-1, Q.shape[-1]), books[i]).reshape(lead) for i in range(K)],
        dim=-1,
    )
    feats = torch.stack([books[i][idx[..., i]] for i in range(K)], dim=-2)
    return QuantizedLatent(idx, feats)


def straight_through(Q: torch.Tensor, q: QuantizedLatent) -> torch.Tensor:
    return Q + (q.features - Q).detach()


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"], capture_output=True, text=True,
                             timeout=5, cwd=Path(__file__).parent)
        return out.stdout.strip() or "unknown"
    except (OSError, subprocess.SubprocessError):
        return "unknown"


class PartVQVAE(nn.Module):
    """Encoders, codebooks and decoder; these are the codec weights."""

    def __init__(self, cfg: CodecConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or CodecConfig()
        n = len(PARTS)
        if cfg.holistic:
            # same codebook parameter budget: N rows of width 6d instead of 6 x N of width d
            self.encoders = nn.ModuleList([PartEncoder(N_CHANNELS, cfg.channels, n * cfg.code_dim, cfg.n_res)])
            book_shape = (1, cfg.n_code, n * cfg.code_dim)
        else:
            self.encoders = nn.ModuleList(
                PartEncoder(PART_WIDTHS[p], cfg.channels, cfg.code_dim, cfg.n_res) for p in PARTS
            )
            book_shape = (n, cfg.n_code, cfg.code_dim)
        bound = 1.0 / cfg.n_code
        self.books = nn.Parameter(torch.empty(book_shape).uniform_(-bound, bound))
        self.decoder = Decoder(len(PARTS) * cfg.code_dim, cfg.channels, N_CHANNELS, cfg.n_res)
        self.register_buffer("mean", torch.zeros(N_CHANNELS))
        self.register_buffer("std", torch.ones(N_CHANNELS))

    # representation <-> network space
    def normalize(self, x):
        return (x - self.mean.to(x.dtype)) / self.std.to(x.dtype)

    def denormalize(self, y):
        return y * self.std.to(y.dtype) + self.mean.to(y.dtype)

    def set_stats(self, data: np.ndarray, floor: float = 1e-2):
        flat = np.asarray(data, dtype=np.float64).reshape(-1, N_CHANNELS)
        self.mean.copy_(torch.as_tensor(flat.mean(0), dtype=self.mean.dtype))
        std = flat.std(0)
        # near-constant channels (e.g. foot contacts of a static clip) get the floor
        self.std.copy_(torch.as_tensor(np.maximum(std, floor * max(std.max(), 1e-6)), dtype=self.std.dtype))

    def encode(self, x) -> torch.Tensor:
        """Unit-norm pre-quantization features (..., T/4, 6, d) from reprs (..., T, 263)."""
        x = _as_batch(x, self.std.dtype)
        if x.shape[-1] != N_CHANNELS:
            raise CodecError(f"expected {N_CHANNELS} channels, got {x.shape[-1]}")
        if x.shape[-2] % 4:
            raise CodecError(f"T={x.shape[-2]} not divisible by 4")
        lead = x.shape[:-2]
        h = self.normalize(x).reshape(-1, *x.shape[-2:]).transpose(1, 2)
        if self.cfg.holistic:
            Q = F.normalize(self.encoders[0](h).transpose(1, 2), dim=-1)  # (B, T', 6d)
            Q = Q.reshape(*Q.shape[:2], len(PARTS), self.cfg.code_dim)
        else:
            parts = [enc(h[:, a:b]) for enc, (a, b) in zip(self.encoders, PART_SLICES)]
            Q = torch.stack(parts, dim=1).permute(0, 3, 1, 2)  # (B, T', 6, d)
            Q = F.normalize(Q, dim=-1)
        return Q.reshape(*lead, *Q.shape[1:])

    def quantize(self, Q) -> QuantizedLatent:
        if self.cfg.holistic:
            flat = Q.reshape(*Q.shape[:-2], 1, -1)
            q = quantize_books(flat, self.books)
            return QuantizedLatent(q.indices, q.features.reshape(Q.shape))
        return quantize(Q, self.books)

    def decode(self, features) -> torch.Tensor:
        """Representation rows (..., 4 T', 263) from per-part features (..., T', 6, d)."""
        if isinstance(features, QuantizedLatent):
            features = features.features
        lead = features.shape[:-3]
        f = features.reshape(-1, *features.shape[-3:])
        h = f.flatten(2).transpose(1, 2)  # (B, 6d, T')
        y = self.decoder(h).transpose(1, 2)
        y = self.denormalize(y)
        return y.reshape(*lead, *y.shape[1:])

    def reconstruct(self, x) -> torch.Tensor:
        return self.decode(self.quantize(self.encode(x)))

    def loss(self, x) -> dict:
        """Total loss and its commitment / codebook / reconstruction terms."""
        x = _as_batch(x, self.std.dtype)
        Q = self.encode(x)
        q = self.quantize(Q)
        commit = F.mse_loss(Q, q.features.detach())
        codebook = F.mse_loss(q.features, Q.detach())
        recon_in = straight_through(Q, q)
        y = self.normalize(self.decode(recon_in))
        recon = F.mse_loss(y, self.normalize(x))
        total = len(PARTS) * (self.cfg.beta * commit + codebook) + recon
        return {"total": total, "commit": commit, "codebook": codebook, "recon": recon}

    def frozen_decoder(self, dtype=torch.float64) -> "PartVQVAE":
        """Detached copy for test-time optimization (no parameter gradients)."""
        m = copy.deepcopy(self).to(dtype).eval()
        for p in m.parameters():
            p.requires_grad_(False)
        return m

    def save(self, path, extra: dict | None = None):
        tensors = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"kind": "codec", "config": asdict(self.cfg), "git": _git_describe()}
        meta.update(extra or {})
        return container.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "PartVQVAE":
        manifest, tensors = container.load(path)
        if manifest.get("kind") != "codec":
            raise CodecError(f"{path} is not a codec checkpoint")
        m = cls(CodecConfig(**manifest["config"]))
        m.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        return m.eval()


CodecWeights = PartVQVAE


def _as_batch(x, dtype):
    if isinstance(x, MotionRepr):
        x = x.data
    if isinstance(x, (list, tuple)):
        x = np.stack([r.data if isinstance(r, MotionRepr) else np.asarray(r) for r in x])
    if not isinstance(x, torch.Tensor):
        x = torch.as_tensor(np.asarray(x))
    return x.to(dtype)


def encode(repr_, w: PartVQVAE):
    return w.encode(repr_)


def decode(q, w: PartVQVAE):
    return w.decode(q)


def codec_loss(repr_, w: PartVQVAE) -> dict:
    return w.loss(repr_)


@dataclass
class TrainHistory:
    epoch_losses: list = field(default_factory=list)  # per epoch: dict of mean terms
    initial: dict = field(default_factory=dict)


def _mean_terms(model, data, batch):
    sums = {}
    with torch.no_grad():
        for s in range(0, len(data), batch):
            terms = model.loss(data[s:s + batch])
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v) * len(data[s:s + batch])
    return {k: v / len(data) for k, v in sums.items()}


def init_books_from_data(model: PartVQVAE, data: torch.Tensor, gen: torch.Generator, jitter: float = 1e-3):
    """Seed each codebook with encoder outputs of random training windows.

    The uniform init puts every row near the origin, so one row wins every
    unit-norm query and the rest never move. Starting on the data avoids that
    without any resets during training.
    """
    with torch.no_grad():
        Q = model.encode(data[: min(len(data), 512)])  # (B, T', 6, d)
        if model.cfg.holistic:
            Q = Q.reshape(*Q.shape[:2], 1, -1)
        K = model.books.shape[0]
        flat = Q.permute(2, 0, 1, 3).reshape(K, -1, Q.shape[-1])
        n = model.cfg.n_code
        for i in range(K):
            pick = torch.randint(flat.shape[1], (n,), generator=gen)
            noise = torch.randn(n, flat.shape[-1], generator=gen) * jitter
            model.books[i].copy_(flat[i, pick] + noise)


def train_codec(dataset, cfg: CodecConfig | None = None, out_dir=None, log_every: int = 0):
    """Fit a PartVQVAE with Adam; returns (model, history).

    ``dataset`` is a sequence of MotionRepr / (T, 263) arrays of equal T, or
    an (N, T, 263) array. With ``out_dir`` a checkpoint is written per epoch.
    """
    cfg = cfg or CodecConfig.desk()
    data = _as_batch(dataset if not isinstance(dataset, MotionRepr) else [dataset], torch.float32) \
        if len(dataset) else None
    if data is None or data.shape[0] == 0:
        raise CodecError("empty dataset")
    torch.manual_seed(cfg.seed)
    model = PartVQVAE(cfg)
    model.set_stats(data.numpy())
    gen = torch.Generator().manual_seed(cfg.seed)
    if cfg.init == "data":
        init_books_from_data(model, data, gen)
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    hist = TrainHistory(initial=_mean_terms(model, data, cfg.batch_size))
    for epoch in range(cfg.epochs):
        model.train()
        perm = torch.randperm(len(data), generator=gen)
        for s in range(0, len(data), cfg.batch_size):
            batch = data[perm[s:s + cfg.batch_size]]
            terms = model.loss(batch)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            if cfg.book_norm:
                with torch.no_grad():
                    model.books.copy_(F.normalize(model.books, dim=-1))
        model.eval()
        hist.epoch_losses.append(_mean_terms(model, data, cfg.batch_size))
        if log_every and (epoch + 1) % log_every == 0:
            log.info("codec epoch %d: %s", epoch + 1, hist.epoch_losses[-1])
        if out_dir is not None:
            model.save(Path(out_dir) / f"codec_epoch{epoch + 1:03d}.egoc", {"epoch": epoch + 1, "seed": cfg.seed})
    model.eval()
    return model, hist
