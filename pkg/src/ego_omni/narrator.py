"""Motion-token language model: a small decoder-only transformer that reads
motion codes and image features alongside text and answers questions about
the motion.

Training runs in stages:

* ``warmup_language``: full training on question/answer text only. This
  stands in for the pretrained language model the real system starts from.
* ``pretrain_motion``: only the motion embedding E_M is updated.
* ``finetune_multimodal``: E_I, E_M and the low-rank adapters are updated;
  the base matrices stay fixed.

A sample is serialized as

    BOS [MOT m_1 .. m_6T' SEP] [IMG v SEP] question SEP answer EOS

with blocks in recipe order and motion codes timestep-major in part order.
"""

from __future__ import annotations

import json
import logging
import math
import re
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import container
from .codec import PartVQVAE, _git_describe
from .fusion import FusionInput, FusionModel, fuse, select_codes
from .fusion import FusionSample, _stack_inputs, code_targets, fusion_loss
from .imusim import ImuRecord, random_setup
from .kinematics import PARTS, Skeleton
from .providers import FEATURE_DIM, FeatureProvider, StubHashProvider
from .tracker import EnergyConfig, TrackResult, track
from .textmetrics import text_metrics  # noqa: F401  (re-exported)

log = logging.getLogger(__name__)

SPECIALS = ("<pad>", "<bos>", "<eos>", "<sep>", "<img>", "<mot>", "<unk>")
PAD, BOS, EOS, SEP, IMG, MOT, UNK = range(len(SPECIALS))
RECIPES = {"I": ("I",), "AR": ("AR",), "ARI": ("AR", "I")}
MAX_NEW_TOKENS = 64

_WORD = re.compile(r"[a-z0-9']+|[?.!,]")


class NarratorError(ValueError):
    pass


def words(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass
class TokenVocab:
    tokens: list

    @classmethod
    def build(cls, texts) -> "TokenVocab":
        seen = sorted({w for t in texts for w in words(t)})
        return cls(list(SPECIALS) + seen)

    def __post_init__(self):
        if tuple(self.tokens[:len(SPECIALS)]) != SPECIALS:
            raise NarratorError("vocabulary must start with the reserved special tokens")
        self.index = {w: i for i, w in enumerate(self.tokens)}

    def __len__(self):
        return len(self.tokens)

    def encode(self, text: str) -> list[int]:
        return [self.index.get(w, UNK) for w in words(text)]

    def decode(self, ids) -> str:
        return " ".join(self.tokens[i] for i in ids if i >= len(SPECIALS))


@dataclass
class NarratorConfig:
    dim: int = 256
    layers: int = 4
    heads: int = 8
    context: int = 512
    n_code: int = 256
    lora_rank: int = 8
    lora_alpha: float = 16.0
    # stage schedules: (epochs, lr, batch)
    warmup: tuple = (30, 1e-3, 16)
    pretrain: tuple = (1, 1e-3, 16)
    finetune: tuple = (4, 2e-5, 16)
    seed: int = 0

    @classmethod
    def paper(cls, **kw):
        return replace(cls(n_code=4096, lora_rank=128, lora_alpha=256.0), **kw)

    @classmethod
    def desk(cls, **kw):
        # the toy backbone starts from scratch, so the motion stages get more passes
        return replace(cls(warmup=(30, 1e-3, 16), pretrain=(20, 1e-3, 16), finetune=(20, 5e-4, 16)), **kw)


@dataclass
class InstructionSample:
    recipe: str
    question: str
    answer: str
    codes: np.ndarray | None = None  # (T', 6) code ids
    image_feature: np.ndarray | None = None
    label: str = ""

    def validate(self):
        if self.recipe not in RECIPES:
            raise NarratorError(f"unknown recipe {self.recipe!r}")
        wants_mot = "AR" in RECIPES[self.recipe]
        wants_img = "I" in RECIPES[self.recipe]
        if wants_mot != (self.codes is not None):
            raise NarratorError(f"recipe {self.recipe} {'needs' if wants_mot else 'forbids'} motion codes")
        if wants_img != (self.image_feature is not None):
            raise NarratorError(f"recipe {self.recipe} {'needs' if wants_img else 'forbids'} an image feature")
        if self.codes is not None and (np.ndim(self.codes) != 2 or np.shape(self.codes)[1] != len(PARTS)):
            raise NarratorError("motion codes must be (T', 6)")


class LoRALinear(nn.Module):
    """Frozen-able base linear plus a rank-r update B A scaled by alpha / r."""

    def __init__(self, d_in, d_out, rank, alpha, bias=True):
        super().__init__()
        self.base = nn.Linear(d_in, d_out, bias=bias)
        self.lora_A = nn.Parameter(torch.randn(rank, d_in) / math.sqrt(d_in))
        self.lora_B = nn.Parameter(torch.zeros(d_out, rank))
        self.scale = alpha / rank

    def delta(self):
        return self.scale * self.lora_B @ self.lora_A

    def forward(self, x):
        return self.base(x) + self.scale * F.linear(F.linear(x, self.lora_A), self.lora_B)


class Block(nn.Module):
    def __init__(self, cfg: NarratorConfig):
        super().__init__()
        d, r, a = cfg.dim, cfg.lora_rank, cfg.lora_alpha
        self.heads = cfg.heads
        self.ln1 = nn.LayerNorm(d)
        self.q, self.k, self.v, self.o = (LoRALinear(d, d, r, a) for _ in range(4))
        self.ln2 = nn.LayerNorm(d)
        self.up = LoRALinear(d, 4 * d, r, a)
        self.down = LoRALinear(4 * d, d, r, a)

    def forward(self, x, past=None):
        B, L, d = x.shape
        h = self.ln1(x)

        def split(t):
            return t.reshape(B, L, self.heads, d // self.heads).transpose(1, 2)

        q, k, v = split(self.q(h)), split(self.k(h)), split(self.v(h))
        if past is not None:
            k = torch.cat([past[0], k], dim=2)
            v = torch.cat([past[1], v], dim=2)
        n_past = k.shape[2] - L
        att = q @ k.transpose(-1, -2) / math.sqrt(d // self.heads)
        causal = torch.ones(L, k.shape[2], dtype=torch.bool).tril(n_past)
        att = att.masked_fill(~causal, float("-inf")).softmax(-1)
        y = (att @ v).transpose(1, 2).reshape(B, L, d)
        x = x + self.o(y)
        x = x + self.down(F.gelu(self.up(self.ln2(x))))
        return x, (k, v)


class NarratorModel(nn.Module):
    def __init__(self, vocab_size: int, cfg: NarratorConfig | None = None):
        super().__init__()
        self.cfg = cfg = cfg or NarratorConfig()
        self.vocab_size = vocab_size
        self.tok_emb = nn.Embedding(vocab_size, cfg.dim)
        self.E_M = nn.Embedding(len(PARTS) * cfg.n_code, cfg.dim)
        self.E_I = nn.Linear(FEATURE_DIM, cfg.dim)
        self.pos = nn.Embedding(cfg.context, cfg.dim)
        self.blocks = nn.ModuleList(Block(cfg) for _ in range(cfg.layers))
        self.ln_f = nn.LayerNorm(cfg.dim)
        self.head = nn.Linear(cfg.dim, vocab_size, bias=False)
        nn.init.normal_(self.tok_emb.weight, std=0.02)
        nn.init.normal_(self.E_M.weight, std=0.02)
        nn.init.normal_(self.pos.weight, std=0.02)

    # parameter groups used by the stage contracts
    def param_groups(self) -> dict:
        groups = {"E_M": [], "E_I": [], "adapters": [], "base": []}
        for name, p in self.named_parameters():
            if name.startswith("E_M."):
                groups["E_M"].append(name)
            elif name.startswith("E_I."):
                groups["E_I"].append(name)
            elif "lora_" in name:
                groups["adapters"].append(name)
            else:
                groups["base"].append(name)
        return groups

    def adapters(self):
        return {n: m for n, m in self.named_modules() if isinstance(m, LoRALinear)}

    def forward(self, emb, past=None):
        """Logits (B, L, V) and the new key/value cache from input embeddings (B, L, dim)."""
        n_past = 0 if past is None else past[0][0].shape[2]
        L = emb.shape[1]
        if n_past + L > self.cfg.context:
            raise NarratorError(f"sequence of {n_past + L} exceeds context {self.cfg.context}")
        x = emb + self.pos(torch.arange(n_past, n_past + L))
        cache = []
        for i, blk in enumerate(self.blocks):
            x, kv = blk(x, None if past is None else past[i])
            cache.append(kv)
        return self.head(self.ln_f(x)), cache

    def save(self, path, vocab: TokenVocab, extra: dict | None = None):
        tensors = {k: v.detach().cpu().numpy() for k, v in self.state_dict().items()}
        meta = {"kind": "narrator", "config": asdict(self.cfg), "vocab": vocab.tokens, "git": _git_describe(),
                "motion_serialization": "timestep-major, parts " + ",".join(PARTS)}
        meta.update(extra or {})
        return container.save(path, tensors, meta)

    @classmethod
    def load(cls, path) -> tuple["NarratorModel", TokenVocab]:
        manifest, tensors = container.load(path)
        if manifest.get("kind") != "narrator":
            raise NarratorError(f"{path} is not a narrator checkpoint")
        cfg = manifest["config"]
        for k in ("warmup", "pretrain", "finetune"):
            cfg[k] = tuple(cfg[k])
        vocab = TokenVocab(manifest["vocab"])
        m = cls(len(vocab), NarratorConfig(**cfg))
        m.load_state_dict({k: torch.as_tensor(v) for k, v in tensors.items()})
        return m.eval(), vocab


NarratorWeights = NarratorModel


# serialization ---------------------------------------------------------------

@dataclass
class Embedded:
    emb: torch.Tensor  # (L, dim)
    targets: torch.Tensor  # (L,) next-token targets, -100 outside the answer
    answer_start: int  # index of the SEP preceding the answer
    n_motion: int = 0


def _instruction_items(sample: InstructionSample, vocab: TokenVocab):
    """Prompt as a list of ('tok', id) / ('mot', code id) / ('img', vector)."""
    sample.validate()
    items = [("tok", BOS)]
    for block in RECIPES[sample.recipe]:
        if block == "AR":
            items.append(("tok", MOT))
            codes = np.asarray(sample.codes, dtype=np.int64)
            for t in range(codes.shape[0]):
                for p in range(len(PARTS)):
                    items.append(("mot", p, int(codes[t, p])))
            items.append(("tok", SEP))
        else:
            items += [("tok", IMG), ("img", sample.image_feature), ("tok", SEP)]
    items += [("tok", i) for i in vocab.encode(sample.question)]
    items.append(("tok", SEP))
    return items


def _embed_items(items, model: NarratorModel) -> torch.Tensor:
    rows, n_code = [], model.cfg.n_code
    tok_ids = [it[1] for it in items if it[0] == "tok"]
    tok = model.tok_emb(torch.tensor(tok_ids, dtype=torch.long)) if tok_ids else None
    mot_ids = [it[1] * n_code + it[2] for it in items if it[0] == "mot"]
    if any(not 0 <= it[2] < n_code for it in items if it[0] == "mot"):
        raise NarratorError("motion code outside the codebook")
    mot = model.E_M(torch.tensor(mot_ids, dtype=torch.long)) if mot_ids else None
    ti = mi = 0
    for it in items:
        if it[0] == "tok":
            rows.append(tok[ti])
            ti += 1
        elif it[0] == "mot":
            rows.append(mot[mi])
            mi += 1
        else:
            rows.append(model.E_I(torch.as_tensor(it[1], dtype=model.E_I.weight.dtype)))
    return torch.stack(rows)


def build_instruction(sample: InstructionSample, vocab: TokenVocab, model: NarratorModel,
                      with_answer: bool = True) -> Embedded:
    """Embedded sequence and answer-only targets for one sample."""
    items = _instruction_items(sample, vocab)
    n_prompt = len(items)
    answer = vocab.encode(sample.answer) if with_answer else []
    if with_answer and not answer:
        raise NarratorError("answer must be nonempty")
    if with_answer:
        items = items + [("tok", i) for i in answer] + [("tok", EOS)]
    emb = _embed_items(items, model)
    targets = torch.full((len(items),), -100, dtype=torch.long)
    if with_answer:
        # logits at position i predict item i+1; answer tokens then EOS
        seq = answer + [EOS]
        targets[n_prompt - 1:n_prompt - 1 + len(seq)] = torch.tensor(seq)
    n_mot = sum(1 for it in items if it[0] == "mot")
    return Embedded(emb, targets, n_prompt - 1, n_mot)


def _batch(embs: list[Embedded]):
    L = max(e.emb.shape[0] for e in embs)
    d = embs[0].emb.shape[1]
    x = torch.zeros(len(embs), L, d)
    y = torch.full((len(embs), L), -100, dtype=torch.long)
    for i, e in enumerate(embs):
        # right padding; causal attention keeps real positions independent of it
        x[i, :e.emb.shape[0]] = e.emb
        y[i, :e.emb.shape[0]] = e.targets
    return x, y


def nll(sample: InstructionSample, model: NarratorModel, vocab: TokenVocab, include_eos: bool = False,
        incremental: bool = False) -> torch.Tensor:
    """Negative log-likelihood of the answer tokens (summed) given the instruction.

    ``incremental`` evaluates position by position with the key/value cache
    instead of one full forward pass.
    """
    e = build_instruction(sample, vocab, model)
    targets = e.targets.clone()
    if not include_eos:
        targets[targets == EOS] = -100
    if not incremental:
        logits, _ = model(e.emb[None])
        return F.cross_entropy(logits[0], targets, ignore_index=-100, reduction="sum")
    past, total = None, torch.zeros((), dtype=e.emb.dtype)
    for i in range(e.emb.shape[0]):
        logits, past = model(e.emb[None, i:i + 1], past)
        if targets[i] >= 0:
            total = total + F.cross_entropy(logits[0], targets[i:i + 1], reduction="sum")
    return total


# training stages ---------------------------------------------------------------

def _train(model, samples, vocab, trainable: list[str], schedule, seed, text_only=False):
    epochs, lr, batch = schedule
    names = set(trainable)
    params = []
    for n, p in model.named_parameters():
        p.requires_grad_(n in names)
        if n in names:
            params.append(p)
    opt = torch.optim.Adam(params, lr=lr)
    rng = np.random.default_rng(seed)
    losses = []
    model.train()
    for _ in range(epochs):
        perm = rng.permutation(len(samples))
        tot, cnt = 0.0, 0
        for s in range(0, len(samples), batch):
            chunk = [samples[i] for i in perm[s:s + batch]]
            build = _text_only if text_only else build_instruction
            embs = [build(c, vocab, model) for c in chunk]
            x, y = _batch(embs)
            logits, _ = model(x)
            loss = F.cross_entropy(logits.reshape(-1, logits.shape[-1]), y.reshape(-1), ignore_index=-100)
            opt.zero_grad()
            loss.backward()
            opt.step()
            tot += float(loss.detach()) * len(chunk)
            cnt += len(chunk)
        losses.append(tot / cnt)
    for p in model.parameters():
        p.requires_grad_(True)
    model.eval()
    return losses


def _text_only(sample: InstructionSample, vocab, model) -> Embedded:
    q = vocab.encode(sample.question)
    a = vocab.encode(sample.answer)
    ids = [BOS] + q + [SEP] + a + [EOS]
    emb = model.tok_emb(torch.tensor(ids))
    targets = torch.full((len(ids),), -100, dtype=torch.long)
    targets[len(q) + 1:len(ids) - 1] = torch.tensor(a + [EOS])
    return Embedded(emb, targets, len(q) + 1)


def warmup_language(corpus: list, model: NarratorModel, vocab: TokenVocab, cfg: NarratorConfig | None = None):
    """Train the base network on question/answer text with no motion or image."""
    cfg = cfg or model.cfg
    base = model.param_groups()["base"]
    return _train(model, corpus, vocab, base, cfg.warmup, cfg.seed, text_only=True)


def pretrain_motion(corpus: list, model: NarratorModel, vocab: TokenVocab, cfg: NarratorConfig | None = None):
    """Stage 1: learn E_M only, on motion-only recipes."""
    cfg = cfg or model.cfg
    bad = [s.recipe for s in corpus if s.recipe != "AR"]
    if bad:
        raise NarratorError(f"motion pre-training accepts only AR recipes, found {sorted(set(bad))}")
    return _train(model, corpus, vocab, model.param_groups()["E_M"], cfg.pretrain, cfg.seed + 1)


def finetune_multimodal(corpus: list, model: NarratorModel, vocab: TokenVocab, cfg: NarratorConfig | None = None):
    """Stage 2: learn E_I, E_M and the low-rank adapters."""
    cfg = cfg or model.cfg
    g = model.param_groups()
    return _train(model, corpus, vocab, g["E_I"] + g["E_M"] + g["adapters"], cfg.finetune, cfg.seed + 2)


# generation ---------------------------------------------------------------------

def generate(sample: InstructionSample, model: NarratorModel, vocab: TokenVocab, decoding: str = "greedy",
             seed: int = 0, top_k: int = 5, max_new: int = MAX_NEW_TOKENS) -> str:
    """Decode an answer for the instruction part of ``sample``."""
    if decoding not in ("greedy", "top-k"):
        raise NarratorError(f"unknown decoding {decoding!r}")
    model.eval()
    gen = torch.Generator().manual_seed(int(seed))
    banned = torch.zeros(len(vocab), dtype=torch.bool)
    banned[[PAD, BOS, SEP, IMG, MOT, UNK]] = True
    out = []
    with torch.no_grad():
        e = build_instruction(replace(sample, answer=""), vocab, model, with_answer=False)
        logits, past = model(e.emb[None])
        for _ in range(max_new):
            step = logits[0, -1].masked_fill(banned, float("-inf"))
            if decoding == "greedy":
                nxt = int(step.argmax())
            else:
                vals, idx = step.topk(min(top_k, len(vocab)))
                probs = torch.softmax(vals, -1)
                nxt = int(idx[torch.multinomial(probs, 1, generator=gen)])
            if nxt == EOS:
                break
            out.append(nxt)
            if e.emb.shape[0] + len(out) >= model.cfg.context:
                break
            logits, past = model(model.tok_emb(torch.tensor([[nxt]])), past)
    return vocab.decode(out)


def motion_codes(imu: ImuRecord, image_feature, fusion: FusionModel, codec: PartVQVAE) -> np.ndarray:
    """Argmax code ids (T', 6) from the fusion encoder with the text modality masked."""
    logits = fuse(FusionInput(imu, image_feature, None), fusion)
    return select_codes(logits, codec.books.detach(), "argmax").indices.numpy()


def describe(imu: ImuRecord, image_feature, fusion: FusionModel, codec: PartVQVAE, model: NarratorModel,
             vocab: TokenVocab, decoding: str = "greedy", seed: int = 0, question: str | None = None) -> str:
    from .bench.synth import QUESTIONS

    codes = motion_codes(imu, image_feature, fusion, codec)
    recipe = "ARI" if image_feature is not None else "AR"
    sample = InstructionSample(recipe, question or QUESTIONS[0], "", codes, image_feature)
    return generate(sample, model, vocab, decoding, seed)


def adapter_rank(model: NarratorModel, tol: float = 1e-6) -> dict:
    """Numerical rank of every adapter's effective weight delta."""
    out = {}
    with torch.no_grad():
        for name, m in model.adapters().items():
            s = torch.linalg.svdvals(m.delta().double())
            out[name] = int((s > tol * max(float(s[0]), 1e-30)).sum()) if float(s[0]) > 0 else 0
    return out


def make_instructions(samples: list[FusionSample], fusion: FusionModel, codec: PartVQVAE,
                      provider: FeatureProvider | None = None, recipes=("I", "AR", "ARI"), seed: int = 0,
                      masks=None) -> list[InstructionSample]:
    """Instruction samples with a randomly selected recipe, IMU setup and
    question per clip; motion codes come from the fusion encoder (text masked)."""
    from .bench.synth import QUESTIONS

    provider = provider or StubHashProvider()
    rng = np.random.default_rng(seed)
    out = []
    for s in samples:
        recipe = recipes[int(rng.integers(len(recipes)))]
        m = random_setup(rng) if masks is None else masks[int(rng.integers(len(masks)))]
        img = provider.image(s.image_id) if "I" in RECIPES[recipe] else None
        codes = None
        if "AR" in RECIPES[recipe]:
            inp = s.input(m, provider, image=img is not None)
            codes = motion_codes(inp.imu, img, fusion, codec)
        q = QUESTIONS[int(rng.integers(len(QUESTIONS)))]
        out.append(InstructionSample(recipe, q, s.text, codes, img, s.label))
    return out


@dataclass
class NarratorHistory:
    warmup: list = field(default_factory=list)
    pretrain: list = field(default_factory=list)
    finetune: list = field(default_factory=list)


def train_narrator(corpus_pre: list, corpus_ft: list, vocab: TokenVocab, cfg: NarratorConfig | None = None):
    """All three stages from scratch; returns (model, history)."""
    cfg = cfg or NarratorConfig.desk()
    torch.manual_seed(cfg.seed)
    model = NarratorModel(len(vocab), cfg)
    hist = NarratorHistory()
    hist.warmup = warmup_language(corpus_ft, model, vocab, cfg)
    hist.pretrain = pretrain_motion(corpus_pre, model, vocab, cfg)
    hist.finetune = finetune_multimodal(corpus_ft, model, vocab, cfg)
    return model, hist


def save_corpus(path, records: list[dict]):
    """One JSON record per line."""
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as f:
        for r in records:
            f.write(json.dumps(r, sort_keys=True) + "\n")


def load_corpus(path) -> list[dict]:
    need = {"motion_bundle_path", "image_id", "question", "answer", "class_label"}
    out = []
    with open(path) as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            r = json.loads(line)
            missing = need - set(r)
            if missing:
                raise NarratorError(f"{path}:{n}: missing fields {sorted(missing)}")
            out.append(r)
    return out


# feedback loop ------------------------------------------------------------------

@dataclass
class FeedbackResult:
    with_text: TrackResult
    without_text: TrackResult
    text: str


def _track_from(inp: FusionInput, fusion, codec, energy_cfg, initial_root, optimize, fps):
    init = select_codes(fuse(inp, fusion), codec.books.detach(), "argmax").features
    cfg = energy_cfg or EnergyConfig()
    if not optimize:
        cfg = replace(cfg, max_iters=0)
    return track(init, inp.imu, codec.frozen_decoder(), Skeleton(), cfg, initial_root=initial_root, fps=fps)


def feedback_track(imu: ImuRecord, image_feature, fusion: FusionModel, codec: PartVQVAE, model: NarratorModel,
                   vocab: TokenVocab, provider: FeatureProvider | None = None, energy_cfg: EnergyConfig | None = None,
                   initial_root=None, decoding: str = "greedy", seed: int = 0, optimize: bool = True,
                   fps: float = 30.0, text: str | None = None) -> FeedbackResult:
    """Describe the motion, feed the description back as the text modality and
    track with and without it. ``text`` bypasses generation (reference text)."""
    provider = provider or StubHashProvider()
    if text is None:
        text = describe(imu, image_feature, fusion, codec, model, vocab, decoding, seed)
    text_feat = provider.text(text)
    with_t = _track_from(FusionInput(imu, image_feature, text_feat), fusion, codec, energy_cfg, initial_root,
                         optimize, fps)
    without = _track_from(FusionInput(imu, image_feature, None), fusion, codec, energy_cfg, initial_root,
                          optimize, fps)
    return FeedbackResult(with_t, without, text)


def feedback_finetune(fusion: FusionModel, codec: PartVQVAE, samples: list[FusionSample], model: NarratorModel,
                      vocab: TokenVocab, provider: FeatureProvider | None = None, iters: int = 300,
                      lr: float = 1e-4, batch_size: int = 16, seed: int = 0) -> FusionModel:
    """Continue training the fusion encoder for ``iters`` steps with generated
    descriptions as the text modality (generated text only, no references)."""
    provider = provider or StubHashProvider()
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    generated = []
    for s in samples:
        m = random_setup(rng)
        inp = s.input(m, provider, image=True)
        generated.append(describe(inp.imu, inp.image_feature, fusion, codec, model, vocab))
    feats = [provider.text(t) for t in generated]
    reprs = np.stack([s.repr for s in samples])
    targets = code_targets(codec, reprs)
    gt = torch.as_tensor(reprs, dtype=torch.float32)
    opt = torch.optim.Adam(fusion.parameters(), lr=lr)
    fusion.train()
    for _ in range(iters):
        idx = rng.choice(len(samples), size=min(batch_size, len(samples)), replace=False)
        active = random_setup(rng)
        inputs = []
        for k in idx:
            inp = samples[k].input(active, provider, image=bool(rng.random() >= fusion.cfg.p_drop_image))
            inputs.append(FusionInput(inp.imu, inp.image_feature, feats[k]))
        terms = fusion_loss(_stack_inputs(inputs), targets[idx], gt[idx], fusion, codec, gen)
        opt.zero_grad()
        terms["total"].backward()
        opt.step()
    fusion.eval()
    return fusion
