import json

import pytest

from ego_omni.cli import main

TINY = {
    "profile": "desk",
    "data": {"n_train": 8, "n_test": 4, "T": 16},
    "codec": {"n_code": 16, "code_dim": 8, "channels": 16, "n_res": 1, "epochs": 1, "batch_size": 8, "lr": 0.001},
    "fusion": {"n_code": 16, "d_model": 32, "heads": 4, "layers1": 1, "ffn1": 64, "layers2": 1, "ffn2": 64,
               "epochs": 1, "batch_size": 8},
    "narrator": {"dim": 32, "layers": 1, "heads": 4, "context": 128, "n_code": 16, "lora_rank": 2,
                 "lora_alpha": 4.0, "warmup": [1, 0.001, 8], "pretrain": [1, 0.001, 8], "finetune": [1, 0.001, 8]},
    "eval": {"clips_per_setup": 1, "max_iters": 1, "combos": ["imu", "imu+gentext"]},
}


@pytest.fixture(scope="module")
def run(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    cfg = root / "tiny.json"
    cfg.write_text(json.dumps(TINY))
    out = root / "run"
    base = ["--config", str(cfg), "--out", str(out)]
    codes = {c: main(base + [c]) for c in
             ("synth-data", "train-vqvae", "train-encoder", "pretrain-narrator", "finetune-narrator")}
    return base, out, codes


def test_pipeline(run):
    base, out, codes = run
    assert all(v == 0 for v in codes.values()), codes
    bundle = str(out / "test" / "clip_0000.egob")
    assert main(base + ["track", "--bundle", bundle, "--setup", "LP+RW", "--max-iters", "2"]) == 0
    trace = json.loads((out / "energy_trace.json").read_text())
    assert trace["iterations"] <= 2 and len(trace["energy_trace"]) == trace["iterations"] + 1
    assert main(base + ["describe", "--bundle", bundle, "--decoding", "top-k"]) == 0
    assert (out / "description.txt").exists()
    assert main(base + ["eval"]) == 0
    assert len((out / "report.csv").read_text().splitlines()) == 26
    assert main(base + ["feedback-eval", "--clips", "1"]) == 0
    fb = json.loads((out / "feedback.json").read_text())
    assert set(fb["mean"]) == {"mpjpe_with_generated_text", "mpjpe_without_text"}


def test_flags_after_command(run, tmp_path):
    base, out, _ = run
    # global flags are accepted on either side of the command name
    assert main(["train-vqvae", "--out", str(tmp_path), "--data", str(out), base[0], base[1]]) == 0
    assert (tmp_path / "codec.egoc").exists()


def test_exit_codes(run, tmp_path):
    base, out, _ = run
    assert main(["--help"]) == 0
    assert main(["fly"]) == 2
    assert main(["train-vqvae", "--out", str(tmp_path)]) == 3  # no clips there
    assert main(base + ["track", "--codec", str(tmp_path / "none.egoc"), "--bundle", "x"]) == 3
    assert main(base + ["track", "--bundle", str(out / "test" / "clip_0000.egob"), "--setup", "LW+LW+LW+RW"]) == 2
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps({"codec": {"wings": 2}}))
    assert main(["--config", str(bad), "synth-data", "--out", str(tmp_path)]) == 2
    assert main(["--config", str(tmp_path / "absent.json"), "synth-data"]) == 3


def test_env_seed_overrides_flag(tmp_path, monkeypatch):
    cfg = tmp_path / "c.json"
    cfg.write_text(json.dumps({"data": {"n_train": 2, "n_test": 1, "T": 8}}))

    def corpus(out, seed, env=None):
        if env is None:
            monkeypatch.delenv("EGO_OMNI_SEED", raising=False)
        else:
            monkeypatch.setenv("EGO_OMNI_SEED", env)
        assert main(["--config", str(cfg), "--out", str(tmp_path / out), "--seed", str(seed), "synth-data"]) == 0
        return (tmp_path / out / "corpus_train.jsonl").read_bytes()

    a = corpus("a", 5)
    b = corpus("b", 6, env="5")
    c = corpus("c", 6)
    assert a == b.replace(b"/b/", b"/a/") and a != c
    monkeypatch.setenv("EGO_OMNI_SEED", "five")
    assert main(["--out", str(tmp_path / "d"), "synth-data", "--n-train", "1", "--n-test", "1"]) == 2
