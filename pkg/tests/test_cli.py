from __future__ import annotations

import numpy as np
import pytest

from attenuate import cli
from attenuate.audio import read_wav, write_wav

from .conftest import sine


@pytest.fixture(scope="module")
def workspace(tmp_path_factory):
    """One tiny end-to-end CLI workspace: corpus, 5-step model, shards."""
    root = tmp_path_factory.mktemp("cli")
    assert cli.run(["synth-corpus", "--out", str(root / "corpus"),
                    "--per-class", "3", "--seed", "1",
                    "--eval-shards", str(root / "shards"),
                    "--eval-per-condition", "2"]) == 0
    assert cli.run(["train", "--catalog", str(root / "corpus"),
                    "--steps", "5", "--seed", "3", "--val-per-condition", "0",
                    "--out", str(root / "run")]) == 0
    return root


def test_synth_corpus_layout(workspace):
    assert (workspace / "corpus" / "manifest.txt").exists()
    wavs = list((workspace / "corpus").glob("*/*.wav"))
    assert len(wavs) == 18  # 6 classes x 3 files


def test_train_outputs(workspace):
    run = workspace / "run"
    assert (run / "model.attn").exists()
    assert (run / "store.embd").exists()
    assert (run / "train_log.txt").exists()
    assert (run / "train_loss.png").exists()
    log = (run / "train_log.txt").read_text()
    assert sum(1 for l in log.splitlines() if l.startswith("step=")) == 5


def test_train_zero_steps_checkpoint_equals_init(tmp_path, workspace):
    out1 = tmp_path / "a"
    out2 = tmp_path / "b"
    for out in (out1, out2):
        assert cli.run(["train", "--catalog", str(workspace / "corpus"),
                        "--steps", "0", "--seed", "9", "--val-per-condition", "0",
                        "--out", str(out)]) == 0
    a = (out1 / "model.attn").read_bytes()
    b = (out2 / "model.attn").read_bytes()
    assert a == b  # deterministic init, untouched by a zero-step run


def test_bench_identity_hook_and_outputs(workspace, capsys):
    rc = cli.run(["bench", "--model", str(workspace / "run" / "model.attn"),
                  "--store", str(workspace / "run" / "store.embd"),
                  "--shards", str(workspace / "shards"),
                  "--mask-hook", "ones",
                  "--out", str(workspace / "bench")])
    assert rc == 0
    table = capsys.readouterr().out
    assert "1-class" in table and "3-class" in table
    for line in table.splitlines()[1:]:
        si_snri = float(line.split()[3])
        assert abs(si_snri) <= 0.01  # identity mask: no processing
    assert (workspace / "bench" / "bench_report.txt").exists()
    assert (workspace / "bench" / "bench_records.txt").exists()
    assert (workspace / "bench" / "bench_sisnr.png").exists()


def test_bench_records_match_in_process(workspace, capsys):
    from attenuate.embeddings import EmbeddingStore
    from attenuate.metrics import run_benchmark
    from attenuate.suppressor import load_model

    rc = cli.run(["bench", "--model", str(workspace / "run" / "model.attn"),
                  "--store", str(workspace / "run" / "store.embd"),
                  "--shards", str(workspace / "shards"),
                  "--format", "records"])
    assert rc == 0
    out = capsys.readouterr().out
    model = load_model(workspace / "run" / "model.attn")
    store = EmbeddingStore.load(workspace / "run" / "store.embd")
    rep = run_benchmark(model, store, workspace / "shards")
    for line in out.splitlines():
        if not line.startswith("condition="):
            continue
        kv = dict(p.split("=") for p in line.split(" "))
        row = rep.row(int(kv["condition"]))
        assert float(kv["si_snri"]) == pytest.approx(row.si_snri_mean, abs=1e-6)


def test_process_strength_zero_is_copy(workspace, tmp_path):
    src = tmp_path / "in.wav"
    write_wav(src, sine(440, 1.0, amp=0.4), "float32")
    dst = tmp_path / "out.wav"
    rc = cli.run(["process", str(src), str(dst),
                  "--targets", "siren", "--strength", "0",
                  "--model", str(workspace / "run" / "model.attn"),
                  "--store", str(workspace / "run" / "store.embd")])
    assert rc == 0
    a, b = read_wav(src), read_wav(dst)
    assert len(a) == len(b)
    assert np.max(np.abs(a.samples - b.samples)) <= 1e-6


def test_process_deterministic(workspace, tmp_path):
    src = tmp_path / "in.wav"
    write_wav(src, sine(440, 1.0, amp=0.4), "float32")
    outs = []
    for name in ("o1.wav", "o2.wav"):
        rc = cli.run(["process", str(src), str(tmp_path / name),
                      "--targets", "siren", "--strength", "0.7",
                      "--model", str(workspace / "run" / "model.attn"),
                      "--store", str(workspace / "run" / "store.embd")])
        assert rc == 0
        outs.append(read_wav(tmp_path / name).samples)
    assert np.array_equal(outs[0], outs[1])


def test_embed_builds_store_entry(workspace, tmp_path):
    rec = tmp_path / "rec.wav"
    write_wav(rec, sine(1200, 1.5, amp=0.4), "float32")
    store_path = tmp_path / "custom.embd"
    rc = cli.run(["embed", str(rec), "--class-id", "my_noise",
                  "--model", str(workspace / "run" / "model.attn"),
                  "--store", str(store_path)])
    assert rc == 0
    from attenuate.embeddings import EmbeddingStore

    store = EmbeddingStore.load(store_path)
    assert "my_noise" in store
    assert store.get("my_noise").provenance == "custom"


def test_profile_subcommand(workspace, tmp_path, capsys):
    rc = cli.run(["profile", "--model", str(workspace / "run" / "model.attn"),
                  "--store", str(workspace / "run" / "store.embd"),
                  "--duration", "2", "--device-rate", "16000",
                  "--targets", "siren",
                  "--out", str(tmp_path / "prof")])
    assert rc == 0
    out = capsys.readouterr().out
    kv = dict(p.split("=") for p in out.split())
    assert int(kv["hops"]) == 80  # 2 s / 25 ms
    assert kv["cpu_percent"] == "unavailable"
    assert kv["battery_pct_per_hour"] == "unavailable"
    assert int(kv["buffer_highwater_samples"]) <= int(kv["buffer_cap_samples"])
    assert (tmp_path / "prof" / "profile_records.txt").exists()
    assert (tmp_path / "prof" / "profile_hops.png").exists()


def test_config_file_overlay(workspace, tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("per_class=2\nseed=4  # comment\n")
    rc = cli.run(["synth-corpus", "--out", str(tmp_path / "c2"),
                  "--config", str(cfg), "--verbose"])
    assert rc == 0
    out = capsys.readouterr().out
    assert "# per_class=2" in out
    assert "# seed=4" in out
    wavs = list((tmp_path / "c2").glob("*/*.wav"))
    assert len(wavs) == 12  # config file set per_class=2


def test_flag_beats_config_file(tmp_path, capsys):
    cfg = tmp_path / "cfg.txt"
    cfg.write_text("per_class=2\n")
    rc = cli.run(["synth-corpus", "--out", str(tmp_path / "c3"),
                  "--config", str(cfg), "--per-class", "1", "--verbose"])
    assert rc == 0
    assert "# per_class=1" in capsys.readouterr().out
    assert len(list((tmp_path / "c3").glob("*/*.wav"))) == 6


def test_exit_codes(tmp_path):
    assert cli.run(["no-such-command"]) == 1
    assert cli.run(["process", "--bogus-flag", "x", "y"]) == 1
    rc = cli.run(["bench", "--model", str(tmp_path / "missing.attn"),
                  "--store", str(tmp_path / "missing.embd"),
                  "--shards", str(tmp_path)])
    assert rc == 2
