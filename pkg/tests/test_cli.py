"""Command-line surface: replayability, worked end-to-end examples, the
documented exit-code contract, and flag/config precedence.

Tests call main(argv) in process; stdout is the interface under test.
"""

import json

import pytest

from dietcap.cli import main
from dietcap.episode import EpisodeManifest
from dietcap.vocab import Vocabulary


def run(capsys, *argv):
    code = main([str(a) for a in argv])
    captured = capsys.readouterr()
    return code, captured.out, captured.err


# build-vocab

def test_build_vocab_frequency_order(tmp_path, capsys):
    corpus = tmp_path / "caps.txt"
    corpus.write_text("a b a\n")
    out = tmp_path / "vocab.txt"
    code, _, _ = run(capsys, "build-vocab", corpus, "-o", out)
    assert code == 0
    assert out.read_text() == "a\nb\n"


def test_build_vocab_is_replayable(tmp_path, capsys):
    corpus = tmp_path / "caps.txt"
    corpus.write_text("the subject is eating a half bowl of rice\n")
    a, b = tmp_path / "a.txt", tmp_path / "b.txt"
    assert run(capsys, "build-vocab", corpus, "-o", a)[0] == 0
    assert run(capsys, "build-vocab", corpus, "-o", b)[0] == 0
    assert a.read_bytes() == b.read_bytes()


def test_build_vocab_empty_corpus_is_usage_error(tmp_path, capsys):
    corpus = tmp_path / "caps.txt"
    corpus.write_text("\n\n")
    code, _, err = run(capsys, "build-vocab", corpus, "-o", tmp_path / "v.txt")
    assert code == 2
    assert "error DataError" in err


def test_missing_input_file_is_usage_error(tmp_path, capsys):
    code, _, err = run(capsys, "build-vocab", tmp_path / "nope.txt",
                       "-o", tmp_path / "v.txt")
    assert code == 2
    assert "error DataError" in err and "nope.txt" in err


# hull-volume

def test_hull_volume_unit_cube_fixture(capsys):
    code, out, _ = run(capsys, "hull-volume")
    assert code == 0
    assert out.strip() == "1000.000"


def test_hull_volume_respects_data_dir_env(tmp_path, capsys, monkeypatch):
    pts = tmp_path / "unit_cube.xyz"
    # same cube, scaled by 2: volume 8000 cm^3
    rows = [f"{0.2 * x} {0.2 * y} {0.2 * z}"
            for x in (0, 1) for y in (0, 1) for z in (0, 1)]
    pts.write_text("\n".join(rows) + "\n")
    monkeypatch.setenv("DIETCAP_DATA_DIR", str(tmp_path))
    code, out, _ = run(capsys, "hull-volume")
    assert code == 0
    assert out.strip() == "8000.000"


# eval-metrics and parse-accuracy

def test_eval_metrics_identical_corpus_fixed_point(tmp_path, capsys):
    lines = ["the subject is eating a half bowl of rice",
             "a full bowl of stew and an empty bowl of okra"]
    cand = tmp_path / "cand.txt"
    ref = tmp_path / "ref.txt"
    cand.write_text("\n".join(lines) + "\n")
    ref.write_text("\n".join(lines) + "\n")
    code, out, _ = run(capsys, "eval-metrics", cand, ref)
    assert code == 0
    scores = dict(ln.split() for ln in out.strip().splitlines())
    assert float(scores["bleu4"]) == 100.0
    assert float(scores["rouge_l"]) == 100.0


def test_eval_metrics_jsonl_corpus(tmp_path, capsys):
    corpus = tmp_path / "corpus.jsonl"
    items = [{"id": i, "candidate": "a half bowl of rice",
              "references": ["a half bowl of rice"]} for i in range(2)]
    corpus.write_text("\n".join(json.dumps(x) for x in items) + "\n")
    code, out, _ = run(capsys, "eval-metrics", corpus)
    assert code == 0
    assert "bleu4 100.0000" in out


def test_parse_accuracy_perfect_captions(tmp_path, capsys):
    caps = tmp_path / "caps.txt"
    caps.write_text("the subject is eating a half bowl of rice\n")
    code, out, _ = run(capsys, "parse-accuracy", caps, caps)
    assert code == 0
    for line in out.strip().splitlines():
        category, rate = line.split()[:2]
        assert float(rate) == 1.0, category


# synth and estimate-episode

def test_synth_is_replayable(tmp_path, capsys):
    a, b = tmp_path / "a", tmp_path / "b"
    assert run(capsys, "synth", a, "--episodes", 2, "--seed", 9)[0] == 0
    assert run(capsys, "synth", b, "--episodes", 2, "--seed", 9)[0] == 0
    files_a = sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file())
    files_b = sorted(p.relative_to(b) for p in b.rglob("*") if p.is_file())
    assert files_a == files_b
    for rel in files_a:
        assert (a / rel).read_bytes() == (b / rel).read_bytes()


def test_synth_seed_flag_overrides_config_file(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"seed": 1}\n')
    flagged, plain = tmp_path / "flagged", tmp_path / "plain"
    run(capsys, "synth", flagged, "--episodes", 1, "--config", cfg, "--seed", 2)
    run(capsys, "synth", plain, "--episodes", 1, "--seed", 2)
    man_a = (flagged / "ep-000" / "manifest.jsonl").read_bytes()
    man_b = (plain / "ep-000" / "manifest.jsonl").read_bytes()
    assert man_a == man_b


def test_oracle_estimate_within_five_percent(tmp_path, capsys):
    eps = tmp_path / "eps"
    assert run(capsys, "synth", eps, "--episodes", 3, "--seed", 7)[0] == 0
    for ep_dir in sorted(d for d in eps.iterdir() if d.is_dir()):
        report_path = tmp_path / f"{ep_dir.name}.json"
        code, out, _ = run(capsys, "estimate-episode", ep_dir,
                           "--oracle-captions", "-o", report_path)
        assert code == 0
        assert "Overall (abs. mean)" in out
        report = json.loads(report_path.read_text())
        truth = EpisodeManifest.load(ep_dir).gt_food_cm3
        for c in report["containers"]:
            est = c["v_food_cm3"]
            want = truth[c["container_id"]]
            assert est == pytest.approx(want, rel=0.05, abs=1.0)


def test_estimate_episode_report_is_replayable(tmp_path, capsys):
    eps = tmp_path / "eps"
    run(capsys, "synth", eps, "--episodes", 1, "--seed", 4)
    r1, r2 = tmp_path / "r1.json", tmp_path / "r2.json"
    run(capsys, "estimate-episode", eps / "ep-000", "--oracle-captions", "-o", r1)
    run(capsys, "estimate-episode", eps / "ep-000", "--oracle-captions", "-o", r2)
    assert r1.read_bytes() == r2.read_bytes()


def test_estimate_episode_model_mode_needs_checkpoint(tmp_path, capsys):
    eps = tmp_path / "eps"
    run(capsys, "synth", eps, "--episodes", 1, "--seed", 4)
    code, _, err = run(capsys, "estimate-episode", eps / "ep-000")
    assert code == 2
    assert "error ConfigError" in err


# train and caption round trip

def test_train_caption_round_trip(tmp_path, capsys):
    eps = tmp_path / "eps"
    run(capsys, "synth", eps, "--episodes", 2, "--seed", 5)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "variant": "l", "max_epochs": 2, "batch_size": 8, "lr": 1e-3,
        "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1,
                  "n_dec_layers": 1, "n_regions": 4, "feature_dim": 18,
                  "max_caption_len": 24},
    }) + "\n")
    ckpt = tmp_path / "model.ckpt"
    code, out, _ = run(capsys, "train", eps, "-o", ckpt, "--config", cfg)
    assert code == 0
    assert ckpt.exists()
    assert "final loss" in out

    caps = tmp_path / "captions.txt"
    code, _, _ = run(capsys, "caption", eps / "ep-000", "--checkpoint", ckpt,
                     "--vocab", eps / "vocab.txt", "--config", cfg, "-o", caps)
    assert code == 0
    n_frames = len(EpisodeManifest.load(eps / "ep-000").frames)
    lines = caps.read_text().splitlines()
    assert len(lines) == n_frames
    vocab = Vocabulary.load(eps / "vocab.txt")
    for ln in lines:
        vocab.encode(ln)  # every emitted token is in the vocabulary


def test_train_split_flag_partitions_episodes(tmp_path, capsys):
    eps = tmp_path / "eps"
    run(capsys, "synth", eps, "--episodes", 4, "--seed", 5)
    cfg = tmp_path / "run.json"
    cfg.write_text(json.dumps({
        "variant": "l", "max_epochs": 1, "batch_size": 8,
        "model": {"d_model": 16, "n_heads": 2, "n_enc_layers": 1,
                  "n_dec_layers": 1, "n_regions": 4, "feature_dim": 18,
                  "max_caption_len": 24},
    }) + "\n")
    code, out, _ = run(capsys, "train", eps, "-o", tmp_path / "m.ckpt",
                       "--config", cfg, "--split", 2)
    assert code == 0
    assert "split-2: training on 2 of 4 episodes" in out


def test_unknown_config_field_is_usage_error(tmp_path, capsys):
    cfg = tmp_path / "run.json"
    cfg.write_text('{"learning_rate": 0.1}\n')
    code, _, err = run(capsys, "synth", tmp_path / "x", "--episodes", 1,
                       "--config", cfg)
    assert code == 2
    assert "error ConfigError" in err and "learning_rate" in err
