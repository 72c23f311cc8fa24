"""Multi-modal encoder: IMU tokens (+ optional image/text features) to code logits.

Token layout per clip: [image, text, imu(0, H), imu(0, LP), ..., imu(T'-1, RW)].
Absent image/text features and inactive sensors are replaced by learned
embeddings with ``torch.where``, so outputs never depend on masked content.
Two transformer encoder stacks follow; for each timestep the five sensor
outputs are concatenated and mapped to logits over every part's codebook.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .codec import PartVQVAE, QuantizedLatent, _git_describe
from .imusim import N_IMU, ImuRecord, random_setup, synth_imu
from .kinematics import PARTS, MotionSequence, Skeleton, rotmat_to_6d
from .providers import FEATURE_DIM, FeatureProvider, StubHashProvider
from .reprs import build_repr, initial_root_of

log = logging.getLogger(__name__)

GROUP = 4
RAW_DIM = GROUP * (3 + 6)


class FusionError(ValueError):
    pass


@dataclass
class FusionConfig:
    n_code: int = 256
    d_model: int = 512
    heads: int = 4
    layers1: int = 4
    ffn1: int = 2048
    layers2: int = 3
    ffn2: int = 1024
    dropout: float = 0.1
    max_steps: int = 64  # longest T' the positional table covers
    tau: float = 1.0
    lambda_rec: float = 0.001
    p_drop_image: float = 0.5
    p_drop_text: float = 0.5
    epochs: int = 25
    lr: float = 1e-4
    batch_size: int = 128
    seed: int = 0

    @classmethod
    def paper(cls, **kw):
        return replace(cls(n_code=4096), **kw)

    @classmethod
    def desk(cls, **kw):
        return replace(cls(d_model=128, layers1=2, ffn1=512, layers2=1, ffn2=256, epochs=10,
                           lr=1e-3, batch_size=16), **kw)


@dataclass
class FusionInput:
    imu: ImuRecord
    image_feature: np.ndarray | None = None
    text_feature: np.ndarray | None = None

    def __post_init__(self):
        for name in ("image_feature", "text_feature"):
            v = getattr(self, name)
            if v is not None:
                v = np.asarray(v, dtype=np.float64)
                if v.shape != (FEATURE_DIM,):
                    raise FusionError(f"{name} must have dimension {FEATURE_DIM}, got {v.shape}")
                setattr(self, name, v)

    @property
    def modality_mask(self) -> tuple[bool, bool]:
        return self.image_feature is not None, self.text_feature is not None


@dataclass
class CodeLogits:
    logits: torch.Tensor  # (..., T', 6, N_code)
    tau: float = 1.0

    def probs(self):
        return torch.softmax(self.logits / self.tau, dim=-1)


def tokenize_imu(imu: ImuRecord) -> tuple[np.ndarray, np.ndarray]:
    """Raw IMU tokens (T/4, 5, 36) and the active mask.

    A token is 4 consecutive frames of (accel, 6D rotation) for one sensor.
    Inactive sensors are zero here and replaced by the mask token inside the
    model.
    """
    return _raw_tokens(imu.accel, imu.rot, imu.active), imu.active.copy()


def _raw_tokens(accel, rot, active):
    T = accel.shape[0]
    if T % GROUP:
        raise FusionError(f"T={T} not divisible by {GROUP}")
    rot = np.where(active[None, :, None, None], rot, np.eye(3))
    feat = np.concatenate([accel, rotmat_to_6d(rot)], axis=-1)  # (T, 5, 9)
    feat = np.where(active[None, :, None], feat, 0.0)
    return feat.reshape(T // GROUP, GROUP, N_IMU, 9).transpose(0, 2, 1, 3).reshape(T // GROUP, N_IMU, RAW_DIM)


def _stack_inputs(inputs: list[FusionInput], dtype=torch.float32):
    toks, act, img, txt, has_img, has_txt = [], [], [], [], [], []
    zero = np.zeros(FEATURE_DIM)
    for inp in inputs:
        t, a = tokenize_imu(inp.imu)
        toks.append(t)
        act.append(a)
        hi, ht = inp.modality_mask
        img.append(inp.image_feature if hi else zero)
        txt.append(inp.text_feature if ht else zero)
        has_img.append(hi)
        has_txt.append(ht)
    return {
        "tokens": torch.as_tensor(np.stack(toks), dtype=dtype),
        "active": torch.as_tensor(np.stack(act)),
        "image": torch.as_tensor(np.stack(img), dtype=dtype),
        "text": torch.as_tensor(np.stack(txt), dtype=dtype),
        "has_image": torch.as_tensor(has_img),
        "has_text": torch.as_tensor(has_txt),
    }


class FusionModel(nn.Module):
    def __init__(self, cfg: FusionConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or FusionConfig()
        d = cfg.d_model
        self.imu_proj = nn.Linear(RAW_DIM, d)
        self.imu_mask = nn.Parameter(torch.randn(d) * 0.02)
        self.image_proj = nn.Linear(FEATURE_DIM, d)
        self.text_proj = nn.Linear(FEATURE_DIM, d)
        self.image_absent = nn.Parameter(torch.randn(d) * 0.02)
        self.text_absent = nn.Parameter(torch.randn(d) * 0.02)
        self.pos = nn.Parameter(torch.randn(cfg.max_steps, d) * 0.02)
        self.sensor = nn.Parameter(torch.randn(N_IMU, d) * 0.02)
        self.type_emb = nn.Parameter(torch.randn(2, d) * 0.02)  # image, text

        def stack(n, ffn):
            layer = nn.TransformerEncoderLayer(d, cfg.heads, ffn, cfg.dropout, batch_first=True)
            return nn.TransformerEncoder(layer, n, enable_nested_tensor=False)

        self.stage1 = stack(cfg.layers1, cfg.ffn1)
        self.stage2 = stack(cfg.layers2, cfg.ffn2)
        self.head = nn.Linear(N_IMU * d, len(PARTS) * cfg.n_code)
        self.register_buffer("tok_mean", torch.zeros(RAW_DIM))
        self.register_buffer("tok_std", torch.ones(RAW_DIM))

    def set_stats(self, tokens: np.ndarray, active: np.ndarray):
        """Per-channel standardization of raw tokens from active sensor slots."""
        flat = tokens[np.broadcast_to(active[:, None, :], tokens.shape[:3])]
        self.tok_mean.copy_(torch.as_tensor(flat.mean(0)))
        std = flat.std(0)
        self.tok_std.copy_(torch.as_tensor(np.maximum(std, 1e-3 * max(std.max(), 1e-8))))

    def forward(self, batch: dict) -> torch.Tensor:
        tokens = batch["tokens"]
        B, Tp = tokens.shape[:2]
        if Tp > self.cfg.max_steps:
            raise FusionError(f"T'={Tp} exceeds max_steps={self.cfg.max_steps}")
        for key in ("image", "text"):
            if batch[key].shape[-1] != FEATURE_DIM:
                raise FusionError(f"{key} feature must have dimension {FEATURE_DIM}")
        x = self.imu_proj((tokens - self.tok_mean) / self.tok_std)  # (B, T', 5, d)
        act = batch["active"][:, None, :, None]
        x = torch.where(act, x, self.imu_mask)
        x = x + self.pos[:Tp, None, :] + self.sensor
        img = torch.where(batch["has_image"][:, None], self.image_proj(batch["image"]), self.image_absent)
        txt = torch.where(batch["has_text"][:, None], self.text_proj(batch["text"]), self.text_absent)
        seq = torch.cat([(img + self.type_emb[0])[:, None], (txt + self.type_emb[1])[:, None],
                         x.reshape(B, Tp * N_IMU, -1)], dim=1)
        h = self.stage2(self.stage1(seq))
        h = h[:, 2:].reshape(B, Tp, N_IMU * self.cfg.d_model)
        return self.head(h).reshape(B, Tp, len(PARTS), self.cfg.n_code)

    def save(self, path, extra: dict | None = None):
        tensors = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"kind": "fusion", "config": asdict(self.cfg), "git": _git_describe()}
        meta.update(extra or {})
        return container.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> "FusionModel":
        manifest, tensors = container.load(path)
        if manifest.get("kind") != "fusion":
            raise FusionError(f"{path} is not a fusion checkpoint")
        m = cls(FusionConfig(**manifest["config"]))
        m.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        return m.eval()


FusionWeights = FusionModel


def fuse(inp: FusionInput | list, weights: FusionModel) -> CodeLogits:
    """Code logits (T', 6, N_code) for one input, or batched for a list."""
    single = isinstance(inp, FusionInput)
    batch = _stack_inputs([inp] if single else list(inp))
    weights.eval()
    with torch.no_grad():
        logits = weights(batch)
    return CodeLogits(logits[0] if single else logits, weights.cfg.tau)


def gumbel_softmax(logits: torch.Tensor, tau: float = 1.0, generator: torch.Generator | None = None,
                   hard: bool = True, noise: torch.Tensor | None = None):
    """(y, y_soft, index). ``y`` is one-hot in the forward pass when ``hard``
    and carries the tempered-softmax gradient."""
    if noise is None:
        u = torch.rand(logits.shape, generator=generator, dtype=logits.dtype)
        u = u.clamp(torch.finfo(logits.dtype).tiny, 1.0)
        noise = -torch.log((-torch.log(u)).clamp_min(torch.finfo(logits.dtype).tiny))
    y_soft = torch.softmax((logits + noise) / tau, dim=-1)
    index = y_soft.argmax(-1)
    if not hard:
        return y_soft, y_soft, index
    y_hard = F.one_hot(index, logits.shape[-1]).to(logits.dtype)
    return y_hard + (y_soft - y_soft.detach()), y_soft, index


def select_codes(logits, books: torch.Tensor, mode: str = "argmax", seed=None, tau: float | None = None,
                 generator: torch.Generator | None = None) -> QuantizedLatent:
    """Pick one code per (timestep, part). Features are exact codebook rows."""
    if isinstance(logits, CodeLogits):
        tau = logits.tau if tau is None else tau
        logits = logits.logits
    tau = 1.0 if tau is None else tau
    books = books.to(logits.dtype)
    if mode == "argmax":
        idx = logits.argmax(-1)
        feats = torch.stack([books[i][idx[..., i]] for i in range(len(PARTS))], dim=-2)
        return QuantizedLatent(idx, feats)
    if mode != "hard-sample":
        raise FusionError(f"unknown mode {mode!r}")
    if generator is None:
        generator = torch.Generator().manual_seed(0 if seed is None else int(seed))
    y, _, idx = gumbel_softmax(logits, tau, generator)
    feats = torch.einsum("...pn,pnd->...pd", y, books)
    return QuantizedLatent(idx, feats)


class _DecodeOnly(nn.Module):
    """Wrapper so ``functional_call`` can run the codec decoder on detached parameters."""

    def __init__(self, m):
        super().__init__()
        self.m = m

    def forward(self, feats):
        return self.m.decode(feats)


def fusion_loss(batch: dict, targets: torch.Tensor, gt_repr: torch.Tensor, weights: FusionModel,
                codec: PartVQVAE, generator: torch.Generator | None = None, lambda_rec: float | None = None) -> dict:
    """Cross-entropy on target code indices plus lambda * reconstruction error
    of the decoded hard-sampled codes (standardized channels)."""
    lam = weights.cfg.lambda_rec if lambda_rec is None else lambda_rec
    logits = weights(batch)
    ce = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), targets.reshape(-1))
    q = select_codes(CodeLogits(logits, weights.cfg.tau), codec.books.detach(), "hard-sample", generator=generator)
    # frozen codec: parameters enter as constants, gradients reach the logits only
    params = {f"m.{k}": v.detach() for k, v in codec.named_parameters()}
    params.update({f"m.{k}": v for k, v in codec.named_buffers()})
    y = torch.func.functional_call(_DecodeOnly(codec), params, (q.features,))
    rec = F.mse_loss(codec.normalize(y), codec.normalize(gt_repr).detach())
    return {"total": ce + lam * rec, "ce": ce, "recon": rec}


# training data -------------------------------------------------------------

def full_imu_streams(seq: MotionSequence, skeleton: Skeleton, noise=(0.0, 0.0), seed: int = 0):
    """Accel (T, 5, 3) and rot (T, 5, 3, 3) for all five placements."""
    a = synth_imu(seq, skeleton, [True, True, True, False, False], noise, seed)
    b = synth_imu(seq, skeleton, [False, False, False, True, True], noise, seed + 1)
    accel = np.where(a.active[None, :, None], a.accel, b.accel)
    rot = np.where(a.active[None, :, None, None], a.rot, b.rot)
    return accel, rot


@dataclass
class FusionSample:
    repr: np.ndarray  # (T, 263)
    accel: np.ndarray  # (T, 5, 3)
    rot: np.ndarray  # (T, 5, 3, 3)
    image_id: str = ""
    text: str = ""
    label: str = ""
    initial_root: tuple | None = None  # (xyz, heading) anchor of the clip
    question: str = ""

    def input(self, active, provider: FeatureProvider | None = None, image: bool = False,
              text: bool = False, text_override: str | None = None) -> FusionInput:
        active = np.asarray(active, dtype=bool)
        imu = ImuRecord(np.where(active[None, :, None], self.accel, 0.0),
                        np.where(active[None, :, None, None], self.rot, 0.0), active)
        provider = provider or StubHashProvider()
        img = provider.image(self.image_id) if image else None
        txt = provider.text(self.text if text_override is None else text_override) if text else None
        return FusionInput(imu, img, txt)


def make_fusion_samples(dataset, skeleton: Skeleton | None = None, noise=(0.0, 0.0), seed: int = 0) -> list:
    """FusionSamples from a synthetic dataset (items with .seq/.image_id/.description)."""
    skeleton = skeleton or Skeleton()
    out = []
    for k, s in enumerate(dataset):
        accel, rot = full_imu_streams(s.seq, skeleton, noise, seed + 2 * k)
        out.append(FusionSample(build_repr(s.seq, skeleton).data, accel, rot, s.image_id, s.description, s.label,
                                initial_root_of(s.seq), s.question))
    return out


def _batch_from(samples, active, img_on, txt_on, provider):
    inputs = [s.input(active, provider, bool(i), bool(t)) for s, i, t in zip(samples, img_on, txt_on)]
    return _stack_inputs(inputs)


def code_targets(codec: PartVQVAE, reprs: np.ndarray) -> torch.Tensor:
    with torch.no_grad():
        return codec.quantize(codec.encode(torch.as_tensor(reprs, dtype=torch.float32))).indices


@dataclass
class FusionHistory:
    epoch_losses: list = field(default_factory=list)


def train_fusion(dataset: list, codec: PartVQVAE | None, provider: FeatureProvider | None = None,
                 cfg: FusionConfig | None = None, out_dir=None):
    """Train on FusionSamples against a frozen codec; returns (model, history)."""
    if codec is None:
        raise FusionError("a trained codec checkpoint is required")
    if not dataset:
        raise FusionError("empty dataset")
    cfg = cfg or FusionConfig.desk(n_code=codec.cfg.n_code)
    if cfg.n_code != codec.cfg.n_code:
        raise FusionError(f"fusion n_code {cfg.n_code} != codec n_code {codec.cfg.n_code}")
    provider = provider or StubHashProvider()
    codec = codec.eval()
    torch.manual_seed(cfg.seed)
    rng = np.random.default_rng(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed)
    model = FusionModel(cfg)
    reprs = np.stack([s.repr for s in dataset])
    targets = code_targets(codec, reprs)
    gt = torch.as_tensor(reprs, dtype=torch.float32)
    all_on = np.ones(N_IMU, dtype=bool)
    toks = np.stack([_raw_tokens(s.accel, s.rot, all_on) for s in dataset])
    model.set_stats(toks, np.tile(all_on, (len(dataset), 1)))
    # provider lookups are cached per string
    img_cache = {s.image_id: provider.image(s.image_id) for s in dataset}
    txt_cache = {s.text: provider.text(s.text) for s in dataset}
    opt = torch.optim.Adam(model.parameters(), lr=cfg.lr)
    hist = FusionHistory()
    n = len(dataset)
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(n)
        sums, count = {}, 0
        for s in range(0, n, cfg.batch_size):
            idx = perm[s:s + cfg.batch_size]
            active = random_setup(rng)
            img_on = rng.random(len(idx)) >= cfg.p_drop_image
            txt_on = rng.random(len(idx)) >= cfg.p_drop_text
            inputs = []
            for j, k in enumerate(idx):
                smp = dataset[k]
                imu = ImuRecord(np.where(active[None, :, None], smp.accel, 0.0),
                                np.where(active[None, :, None, None], smp.rot, 0.0), active)
                inputs.append(FusionInput(imu, img_cache[smp.image_id] if img_on[j] else None,
                                          txt_cache[smp.text] if txt_on[j] else None))
            batch = _stack_inputs(inputs)
            terms = fusion_loss(batch, targets[idx], gt[idx], model, codec, gen)
            opt.zero_grad()
            terms["total"].backward()
            opt.step()
            for k, v in terms.items():
                sums[k] = sums.get(k, 0.0) + float(v.detach()) * len(idx)
            count += len(idx)
        hist.epoch_losses.append({k: v / count for k, v in sums.items()})
        log.info("fusion epoch %d: %s", epoch + 1, hist.epoch_losses[-1])
        if out_dir is not None:
            model.save(Path(out_dir) / f"fusion_epoch{epoch + 1:03d}.egoc", {"epoch": epoch + 1, "seed": cfg.seed})
    model.eval()
    return model, hist


def code_accuracy(model: FusionModel, codec: PartVQVAE, samples: list, masks=None, provider=None,
                  image: bool = False, text: bool = False) -> float:
    """Argmax code accuracy against the codec's own quantization, averaged over masks."""
    from .imusim import all_masks

    masks = all_masks() if masks is None else masks
    targets = code_targets(codec, np.stack([s.repr for s in samples]))
    hits, total = 0, 0
    for m in masks:
        logits = fuse([s.input(m, provider, image, text) for s in samples], model).logits
        hits += int((logits.argmax(-1) == targets).sum())
        total += targets.numel()
    return hits / total
