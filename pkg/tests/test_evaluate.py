import numpy as np
import pytest
import torch

from ego_omni.bench.config import EvalConfig
from ego_omni.bench.evaluate import (
    EvalError,
    EvalReport,
    Models,
    codec_ablation,
    evaluate,
    state_hash,
)
from ego_omni.bench.synth import QUESTIONS, TEMPLATES, synth_dataset
from ego_omni.codec import CodecConfig, PartVQVAE
from ego_omni.fusion import FusionConfig, FusionModel, make_fusion_samples
from ego_omni.narrator import NarratorConfig, NarratorModel, TokenVocab

TINY_CODEC = CodecConfig(n_code=16, code_dim=8, channels=16, n_res=1, epochs=1, batch_size=8, lr=1e-3)
TINY_FUSION = FusionConfig(n_code=16, d_model=32, heads=4, layers1=1, ffn1=64, layers2=1, ffn2=64)
TINY_NARRATOR = NarratorConfig(dim=32, layers=1, heads=4, context=128, n_code=16, lora_rank=2, lora_alpha=4.0)
OPTS = EvalConfig(clips_per_setup=1, max_iters=2, combos=("imu", "imu+image", "imu+gentext"))


@pytest.fixture(scope="module")
def samples():
    return make_fusion_samples(synth_dataset(4, seed=8, T=16))


@pytest.fixture(scope="module")
def models(samples):
    torch.manual_seed(0)
    codec = PartVQVAE(TINY_CODEC)
    codec.set_stats(np.stack([s.repr for s in samples]))
    vocab = TokenVocab.build([t for ts in TEMPLATES.values() for t in ts] + list(QUESTIONS))
    return Models(codec.eval(), FusionModel(TINY_FUSION).eval(), NarratorModel(len(vocab), TINY_NARRATOR).eval(),
                  vocab)


@pytest.fixture(scope="module")
def report(models, samples):
    return evaluate(models, samples, OPTS, seed=5)


def test_grid_shape(report, models):
    assert len(report.rows) == 24
    assert len(report.columns) == 3 * 2 * 3
    assert report.columns[:3] == ["imu/optim/mpjpe", "imu/optim/pa_mpjpe", "imu/optim/jitter"]
    assert any(c.startswith("imu+gentext/wo_optim/") for c in report.columns)
    vals = np.array([r[1] for r in report.rows])
    assert np.isfinite(vals).all() and (vals >= 0).all()
    assert report.rows[0][0] == "H" and report.rows[-1][0] == "RW+RP+H"
    assert report.provenance["codec"] == state_hash(models.codec) and report.provenance["seed"] == 5


def test_rerun_is_byte_identical(models, samples, report):
    again = evaluate(models, samples, OPTS, seed=5)
    assert again.to_csv() == report.to_csv() and again.to_text() == report.to_text()


def test_without_optimization_column(models, samples, report):
    i_opt = report.columns.index("imu/optim/mpjpe")
    i_no = report.columns.index("imu/wo_optim/mpjpe")
    vals = np.array([r[1] for r in report.rows])
    # both variants populated; the optimized one should differ somewhere
    assert (vals[:, i_no] > 0).all() and np.abs(vals[:, i_opt] - vals[:, i_no]).max() > 0


def test_missing_checkpoints(samples, models):
    with pytest.raises(FileNotFoundError, match="codec, fusion"):
        evaluate(Models(), samples, OPTS)
    with pytest.raises(FileNotFoundError, match="narrator"):
        evaluate(Models(models.codec, models.fusion), samples, OPTS)
    with pytest.raises(EvalError):
        evaluate(models, samples, EvalConfig(combos=("imu+smell",)))


def test_report_files(report, tmp_path):
    paths = report.write(tmp_path, svg=True)
    names = sorted(p.name for p in paths)
    assert names == ["report.csv", "report.json", "report_jitter.svg", "report_mpjpe.svg", "report_pa_mpjpe.svg"]
    csv = (tmp_path / "report.csv").read_text().splitlines()
    assert len(csv) == 1 + 24 + 1 and csv[-1].startswith("mean,")
    assert "<svg" in (tmp_path / "report_mpjpe.svg").read_text()


def test_report_validation():
    with pytest.raises(EvalError):
        EvalReport(["a"], [("H", [1.0])]).validate()
    with pytest.raises(EvalError):
        EvalReport(["a"], [(str(i), [float("nan")]) for i in range(24)]).validate()


def test_codec_ablation_reports_both(samples):
    reprs = np.stack([s.repr for s in samples])
    out = codec_ablation(reprs, reprs[:2], [s.initial_root for s in samples[:2]], TINY_CODEC)
    assert set(out) == {"part_aware", "holistic"} and all(np.isfinite(v) and v > 0 for v in out.values())
