"""Evaluation harness: 24 IMU setups x modality combinations, with and without
test-time optimization, reported as CSV, structured text and SVG bars."""

from __future__ import annotations

import hashlib
import io
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
import torch

from ..codec import CodecConfig, PartVQVAE, train_codec
from ..imusim import enumerate_setups
from ..fusion import FusionInput, FusionModel, FusionSample, fuse, select_codes
from ..kinematics import Skeleton
from ..narrator import NarratorModel, TokenVocab, describe
from ..providers import FeatureProvider, StubHashProvider
from ..reprs import recover_positions
from ..tracker import EnergyConfig, track
from .config import EvalConfig
from .metrics import jitter, mpjpe, pa_mpjpe

COMBOS = ("imu", "imu+image", "imu+text", "imu+image+text", "imu+gentext", "imu+image+gentext")
METRICS = ("mpjpe", "pa_mpjpe", "jitter")
VARIANTS = ("optim", "wo_optim")


class EvalError(ValueError):
    pass


@dataclass
class Models:
    codec: PartVQVAE | None = None
    fusion: FusionModel | None = None
    narrator: NarratorModel | None = None
    vocab: TokenVocab | None = None
    provider: FeatureProvider = field(default_factory=StubHashProvider)


@dataclass
class EvalReport:
    columns: list  # "combo/variant/metric"
    rows: list  # (setup label, [values])
    provenance: dict = field(default_factory=dict)

    def means(self) -> list:
        return list(np.mean(np.array([r[1] for r in self.rows]), axis=0))

    def validate(self):
        if len(self.rows) != 24:
            raise EvalError(f"report has {len(self.rows)} rows, expected 24")
        vals = np.array([r[1] for r in self.rows])
        if not (np.isfinite(vals).all() and (vals >= 0).all()):
            raise EvalError("report cells must be finite and non-negative")

    def to_csv(self) -> str:
        buf = io.StringIO()
        buf.write(",".join(["setup"] + self.columns) + "\n")
        for label, vals in self.rows:
            buf.write(",".join([label] + [f"{v:.6f}" for v in vals]) + "\n")
        buf.write(",".join(["mean"] + [f"{v:.6f}" for v in self.means()]) + "\n")
        return buf.getvalue()

    def to_text(self) -> str:
        doc = {
            "columns": self.columns,
            "rows": [{"setup": lab, "values": [round(float(v), 6) for v in vals]} for lab, vals in self.rows],
            "mean": [round(float(v), 6) for v in self.means()],
            "provenance": self.provenance,
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    def to_svg(self, metric: str, variant: str = "optim") -> str:
        """Bar chart of the per-combo mean of one metric."""
        cols = [c for c in self.columns if c.endswith(f"/{variant}/{metric}")]
        if not cols:
            raise EvalError(f"no columns for {metric}/{variant}")
        means = dict(zip(self.columns, self.means()))
        vals = [means[c] for c in cols]
        top = max(max(vals), 1e-12)
        W, H, bw = 80 + 90 * len(cols), 260, 60
        parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}">',
                 f'<text x="10" y="18" font-size="13">{metric} ({variant}), mean over setups</text>']
        for i, (c, v) in enumerate(zip(cols, vals)):
            h = 180 * v / top
            x = 40 + 90 * i
            parts.append(f'<rect x="{x}" y="{220 - h:.2f}" width="{bw}" height="{h:.2f}" fill="#4a7ab5"/>')
            parts.append(f'<text x="{x}" y="{214 - h:.2f}" font-size="10">{v:.3f}</text>')
            parts.append(f'<text x="{x}" y="236" font-size="9">{c.split("/")[0]}</text>')
        parts.append("</svg>")
        return "\n".join(parts) + "\n"

    def write(self, out_dir, svg: bool = False) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        written = [out / "report.csv", out / "report.json"]
        written[0].write_text(self.to_csv())
        written[1].write_text(self.to_text())
        if svg:
            for m in METRICS:
                p = out / f"report_{m}.svg"
                p.write_text(self.to_svg(m))
                written.append(p)
        return written


def state_hash(module: torch.nn.Module | None) -> str:
    if module is None:
        return "absent"
    h = hashlib.sha256()
    for k, v in sorted(module.state_dict().items()):
        h.update(k.encode())
        h.update(v.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()[:16]


def _needs(models: Models, combos):
    missing = [n for n in ("codec", "fusion") if getattr(models, n) is None]
    if any("gentext" in c for c in combos):
        missing += [n for n in ("narrator", "vocab") if getattr(models, n) is None]
    if missing:
        raise FileNotFoundError(f"missing checkpoints: {', '.join(missing)}")


def _fusion_input(sample: FusionSample, active, combo: str, models: Models) -> FusionInput:
    use_img = "image" in combo
    base = sample.input(active, models.provider, image=use_img)
    text = None
    if "gentext" in combo:
        gen = describe(base.imu, base.image_feature, models.fusion, models.codec, models.narrator, models.vocab)
        text = models.provider.text(gen)
    elif "text" in combo:
        text = models.provider.text(sample.text)
    return FusionInput(base.imu, base.image_feature, text)


def evaluate(models: Models, dataset: list[FusionSample], options: EvalConfig | None = None,
             energy_cfg: EnergyConfig | None = None, seed: int = 0) -> EvalReport:
    """Run every (setup, combo) on ``options.clips_per_setup`` clips of ``dataset``."""
    options = options or EvalConfig()
    combos = tuple(options.combos)
    bad = set(combos) - set(COMBOS)
    if bad:
        raise EvalError(f"unknown modality combinations {sorted(bad)}")
    _needs(models, combos)
    if not dataset:
        raise EvalError("empty evaluation set")
    skeleton = Skeleton()
    energy_cfg = energy_cfg or EnergyConfig()
    cfg_opt = replace(energy_cfg, max_iters=options.max_iters)
    cfg_no = replace(energy_cfg, max_iters=0)
    dec = models.codec.frozen_decoder()
    en = enumerate_setups()
    rng = np.random.default_rng(seed)
    n_clip = min(options.clips_per_setup, len(dataset))
    columns = [f"{c}/{v}/{m}" for c in combos for v in VARIANTS for m in METRICS]
    rows = []
    for label, active in zip(en.labels, en.setups):
        clips = rng.choice(len(dataset), size=n_clip, replace=False)
        acc = np.zeros(len(columns))
        for k in clips:
            s = dataset[int(k)]
            gt = recover_positions(s.repr, skeleton, s.initial_root)
            vals = []
            for combo in combos:
                inp = _fusion_input(s, active, combo, models)
                init = select_codes(fuse(inp, models.fusion), models.codec.books.detach(), "argmax").features
                for cfg in (cfg_opt, cfg_no):
                    res = track(init, inp.imu, dec, skeleton, cfg, initial_root=s.initial_root)
                    vals += [mpjpe(res.positions, gt), pa_mpjpe(res.positions, gt), jitter(res.positions, 30.0)]
            acc += np.array(vals)
        rows.append((label, list(acc / n_clip)))
    report = EvalReport(columns, rows, {
        "seed": seed,
        "codec": state_hash(models.codec),
        "fusion": state_hash(models.fusion),
        "narrator": state_hash(models.narrator),
        "provider": models.provider.kind,
        "eval": {"clips_per_setup": n_clip, "max_iters": options.max_iters, "combos": list(combos)},
    })
    report.validate()
    return report


def codec_ablation(train_reprs: np.ndarray, test_reprs: np.ndarray, test_roots: list, cfg: CodecConfig | None = None
                   ) -> dict:
    """Reconstruction MPJPE (mm) of part-aware vs holistic codecs trained with the same budget."""
    cfg = cfg or CodecConfig.desk()
    skeleton = Skeleton()
    out = {}
    for name, holistic in (("part_aware", False), ("holistic", True)):
        model, _ = train_codec(train_reprs, replace(cfg, holistic=holistic))
        with torch.no_grad():
            rec = model.reconstruct(torch.as_tensor(test_reprs, dtype=torch.float32)).double().numpy()
        errs = [mpjpe(recover_positions(r, skeleton, root), recover_positions(x, skeleton, root))
                for r, x, root in zip(rec, test_reprs, test_roots)]
        out[name] = float(np.mean(errs))
    return out
