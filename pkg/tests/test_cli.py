import csv
import json
import time

import numpy as np

from lmdm.bench import CSV_COLUMNS
from lmdm.cli import main
from lmdm.io import load_latents, save_latents

TINY = ["model.channels=4", "model.hidden=16", "model.layers=1", "model.heads=2",
        "model.head_dim=8", "model.context_frames=4", "model.target_frames=2", "model.cond_dim=4",
        "spec.channels=4", "spec.n_conditions=4", "spec.frames=32", "data.items=8"]


def run(tmp_path, *args):
    sets = TINY + [f"paths.{k}={tmp_path / v}" for k, v in (
        ("checkpoint", "m.lmdc"), ("posttrained", "arc.lmdc"), ("train_log", "loss.csv"),
        ("arc_metrics", "arc.csv"), ("samples", "s.lat"), ("bench_csv", "b.csv"))]
    sets.append(f"data.corpus_dir={tmp_path / 'corpus'}")
    argv = list(args)
    for s in sets:
        argv += ["--set", s]
    return main(argv)


def test_pipeline(tmp_path, capsys):
    assert run(tmp_path, "gen-data") == 0
    assert (tmp_path / "corpus" / "manifest.jsonl").exists()
    assert run(tmp_path, "train", "--set", "train.steps=6", "--set", "train.batch=4",
               "--stop-at", "3") == 0
    assert run(tmp_path, "train", "--set", "train.steps=6", "--set", "train.batch=4",
               "--resume", str(tmp_path / "m.lmdc")) == 0
    rows = list(csv.reader(open(tmp_path / "loss.csv")))
    assert rows[0] == ["step", "loss", "lr"] and [r[0] for r in rows[1:]] == list("012345")
    assert run(tmp_path, "sample", "--blocks", "3", "--condition", "2") == 0
    assert load_latents(tmp_path / "s.lat").shape == (4, 6)
    assert run(tmp_path, "sample", "--blocks", "4", "--transition", "0,1,0:0.3:0.7:1") == 0
    err = capsys.readouterr().err
    events = [json.loads(line)["event"] for line in err.splitlines() if line.startswith("{")]
    assert events.count("context_dropout") == 1
    assert run(tmp_path, "bench", "--set", "bench.trials=5", "--set", "bench.warmup=0",
               "--set", "sampler.steps=2") == 0
    header = open(tmp_path / "b.csv").readline().strip().split(",")
    assert header == CSV_COLUMNS


def test_posttrain_command(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert run(tmp_path, "train", "--set", "train.steps=2", "--set", "train.batch=2") == 0
    assert run(tmp_path, "posttrain", "--set", "arc.steps=1", "--set", "arc.batch=2",
               "--set", "arc.warmstart_steps=1", "--set", "arc.warmstart_batch=2",
               "--set", "arc.probe_items=2", "--set", "rollout.blocks=6",
               "--set", "sampler.steps=2") == 0
    assert (tmp_path / "arc.lmdc").exists()
    assert open(tmp_path / "arc.csv").readline().strip() == "step,L_R_D,L_C,L_G,drift"


def test_error_exit_codes(tmp_path, capsys):
    assert main(["train", "--set", "train.nope=1"]) == 2
    assert "train.nope" in capsys.readouterr().err
    assert main(["sample", "--checkpoint", str(tmp_path / "missing.lmdc")]) == 2
    (tmp_path / "bad.lmdc").write_bytes(b"LMDC\x01")
    assert main(["sample", "--checkpoint", str(tmp_path / "bad.lmdc")]) == 2
    assert main(["frobnicate"]) == 2
    bad = tmp_path / "bad.yaml"
    bad.write_text("model: [unclosed")
    assert main(["verify", "--config", str(bad)]) == 2


def _digest(err):
    return [json.loads(line)["sha256"] for line in err.splitlines()
            if line.startswith("{") and json.loads(line)["event"] == "gen_data"][-1]


def test_seed_flag_changes_the_corpus(tmp_path, capsys):
    digests = []
    for seed in (1, 1, 2):
        assert run(tmp_path, "gen-data", "--seed", str(seed)) == 0
        digests.append(_digest(capsys.readouterr().err))
    assert digests[0] == digests[1] != digests[2]


def test_sample_with_prime_and_block_count(tmp_path):
    assert run(tmp_path, "gen-data") == 0
    assert run(tmp_path, "train", "--set", "train.steps=2", "--set", "train.batch=2") == 0
    prime = tmp_path / "prime.lat"
    save_latents(prime, np.ones((4, 6), np.float32))
    for engine in ("encdec", "blockcausal", "baseline"):
        out = tmp_path / f"{engine}.lat"
        assert run(tmp_path, "sample", "--engine", engine, "--blocks", "4", "--prime", str(prime),
                   "--output", str(out)) == 0
        assert load_latents(out).shape == (4, 4 * 2)
    save_latents(prime, np.ones((3, 6), np.float32))
    assert run(tmp_path, "sample", "--prime", str(prime)) == 2


def test_verify_fast_is_quick(capsys):
    start = time.perf_counter()
    assert main(["verify", "--fast"]) == 0
    assert time.perf_counter() - start < 60
    out = capsys.readouterr().out.splitlines()
    assert out and all(line.startswith("PASS") for line in out)
