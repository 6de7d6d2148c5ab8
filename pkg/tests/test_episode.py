"""Episode pipeline: manifest round trips, caption-to-container attribution,
the empty-frame capacity rule, and ground-truth scoring.

Oracle-caption mode (stored captions, no model) pins the geometry half of
the pipeline; the model half here uses a tiny untrained captioner only,
since caption quality belongs to the acceptance suite.
"""

import json
from dataclasses import replace
from fractions import Fraction

import numpy as np
import pytest

from dietcap.captioner import GLTransformer, ModelConfig
from dietcap.episode import (
    E_NO_EMPTY,
    F_PRE_EATING_SHORT,
    ContainerResult,
    EpisodeManifest,
    EpisodeReport,
    check_vocab_covers,
    evaluate_volume,
    frame_inputs,
    frame_samples,
    run_episode,
)
from dietcap.errors import ConfigError, DataError, FileFormatError, PipelineError
from dietcap.synth import EpisodeSpec, suite_vocabulary, synth_episode, template_lexicon
from dietcap.vocab import Vocabulary

LEX = template_lexicon()
VOCAB = suite_vocabulary()

F = Fraction


def bowl_episode(tmp_path, fills, radii=None, foods=None, noise_sigma=0.0,
                 episode_id="t-000", seed=0):
    """Synthesize an episode from per-container fill schedules."""
    k = len(fills)
    radii = radii or tuple([0.08, 0.07, 0.075][:k])
    foods = foods or tuple(["rice", "okra", "soup"][:k])
    spec = EpisodeSpec(episode_id=episode_id, radii=radii, foods=foods,
                       fills=tuple(tuple(row) for row in fills),
                       noise_sigma=noise_sigma, seed=seed)
    return synth_episode(spec, tmp_path)


def with_captions(man, captions):
    frames = [replace(fr, caption=c) for fr, c in zip(man.frames, captions)]
    return EpisodeManifest(
        episode_id=man.episode_id, root=man.root, intrinsics=man.intrinsics,
        containers=man.containers, frames=frames,
        gt_container_cm3=man.gt_container_cm3, gt_food_cm3=man.gt_food_cm3)


# manifest round trip and validation

def test_manifest_round_trip_is_byte_identical(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0), F(0))])
    raw = (man.root / "manifest.jsonl").read_bytes()
    again = EpisodeManifest.load(man.root)
    again.save()
    assert (man.root / "manifest.jsonl").read_bytes() == raw
    assert again.containers == man.containers
    assert again.gt_food_cm3 == pytest.approx(man.gt_food_cm3)


def test_manifest_rejects_nonincreasing_timestamps(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    man.frames[1] = replace(man.frames[1], timestamp=man.frames[0].timestamp)
    with pytest.raises(DataError, match="strictly increasing"):
        man.validate()


def test_manifest_rejects_mask_key_mismatch(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    man.frames[0] = replace(man.frames[0], masks={"elsewhere": "x.pgm"})
    with pytest.raises(DataError, match="masks"):
        man.validate()


def test_manifest_rejects_missing_file(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    (man.root / man.frames[0].depth).unlink()
    with pytest.raises(DataError, match="missing file"):
        man.validate()


def test_manifest_rejects_ground_truth_for_unknown_container(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    man.gt_food_cm3["bowl9"] = 1.0
    with pytest.raises(DataError, match="bowl9"):
        man.validate()


def test_manifest_load_rejects_wrong_schema(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    mpath = man.root / "manifest.jsonl"
    lines = mpath.read_text().splitlines()
    head = json.loads(lines[0])
    head["schema"] = 99
    mpath.write_text("\n".join([json.dumps(head), *lines[1:]]) + "\n")
    with pytest.raises(FileFormatError, match="schema"):
        EpisodeManifest.load(man.root)


def test_manifest_load_rejects_malformed_line(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    mpath = man.root / "manifest.jsonl"
    mpath.write_text(mpath.read_text() + "{not json\n")
    with pytest.raises(FileFormatError):
        EpisodeManifest.load(man.root)


# vocabulary/lexicon coverage and model inputs

def test_vocab_covers_template_lexicon():
    check_vocab_covers(VOCAB, LEX)


def test_vocab_coverage_failure_names_missing_tokens():
    small = Vocabulary.from_corpus(["the subject is eating"])
    with pytest.raises(ConfigError, match="empty"):
        check_vocab_covers(small, LEX)


def test_frame_inputs_by_variant(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2),), (F(1, 4),)])
    rec = man.frames[0]
    base = dict(vocab_size=len(VOCAB), d_model=16, n_heads=2, n_enc_layers=1,
                n_dec_layers=1, n_regions=4, feature_dim=18, image_size=32)
    local = frame_inputs(man, rec, ModelConfig(variant="l", **base))
    assert set(local) == {"features"}
    assert local["features"].rows.shape == (4, 18)
    imaged = frame_inputs(man, rec, ModelConfig(variant="g", **base))
    assert set(imaged) == {"image"}
    assert imaged["image"].shape[0] == 3
    assert imaged["image"].max() <= 1.0
    frozen = frame_inputs(man, rec, ModelConfig(variant="gl-frozen", **base))
    assert set(frozen) == {"features", "global_vec"}
    assert frozen["global_vec"].shape == (18,)


def test_frame_samples_wrap_captions(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    cfg = ModelConfig(vocab_size=len(VOCAB), d_model=16, n_heads=2,
                      n_enc_layers=1, n_dec_layers=1, n_regions=4,
                      feature_dim=18, variant="l")
    samples = frame_samples(man, VOCAB, cfg)
    assert len(samples) == len(man.frames)
    for s in samples:
        assert s.caption_ids[0] == 0 and s.caption_ids[-1] == 1  # BOS, EOS


def test_frame_samples_need_captions(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    cfg = ModelConfig(vocab_size=len(VOCAB), d_model=16, n_heads=2,
                      n_enc_layers=1, n_dec_layers=1, n_regions=4,
                      feature_dim=18, variant="l")
    with pytest.raises(DataError, match="no caption"):
        frame_samples(with_captions(man, [None] * len(man.frames)), VOCAB, cfg)


# oracle-caption volume estimation

def test_oracle_single_bowl_estimate_tracks_ground_truth(tmp_path):
    # plateau of 3/4 over the five-frame window, then eaten: the estimate is
    # capacity * 3/4 and capacity reconstructs within a few percent
    fills = (F(3, 4),) * 5 + (F(1, 4), F(0), F(0))
    man = bowl_episode(tmp_path, [fills])
    rep = run_episode(man, None, None, LEX, oracle_captions=True)
    c = rep.container("bowl0")
    assert c.error is None
    assert c.flags == []
    assert c.pre_eating_values == ["3/4"] * 5
    truth = man.gt_food_cm3["bowl0"]
    assert c.v_food_cm3 == pytest.approx(truth, rel=0.05)
    assert c.v_empty_cm3 == pytest.approx(man.gt_container_cm3["bowl0"], rel=0.05)


def test_short_pre_eating_window_zero_pads_and_flags(tmp_path):
    # only two quantified frames: the average still divides by n=5
    man = bowl_episode(tmp_path, [(F(1, 2), F(1, 4), F(0), F(0))])
    rep = run_episode(man, None, None, LEX, oracle_captions=True)
    c = rep.container("bowl0")
    assert F_PRE_EATING_SHORT in c.flags
    assert c.pre_eating_values == ["1/2", "1/4"]
    assert c.v_food_cm3 == pytest.approx(c.v_empty_cm3 * 0.15, rel=1e-9)


def test_two_bowls_attribute_by_mention_order(tmp_path):
    fills0 = (F(3, 4),) * 5 + (F(0), F(0))
    fills1 = (F(1, 4),) * 5 + (F(0), F(0))
    man = bowl_episode(tmp_path, [fills0, fills1])
    rep = run_episode(man, None, None, LEX, oracle_captions=True)
    c0, c1 = rep.container("bowl0"), rep.container("bowl1")
    assert c0.pre_eating_values == ["3/4"] * 5
    assert c1.pre_eating_values == ["1/4"] * 5
    assert c0.v_food_cm3 == pytest.approx(man.gt_food_cm3["bowl0"], rel=0.05)
    assert c1.v_food_cm3 == pytest.approx(man.gt_food_cm3["bowl1"], rel=0.05)


def test_never_empty_episode_raises(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(1, 2), F(1, 2))])
    with pytest.raises(PipelineError, match=E_NO_EMPTY):
        run_episode(man, None, None, LEX, oracle_captions=True)


def test_one_container_never_empty_is_recorded_not_raised(tmp_path):
    fills0 = (F(1, 2), F(0), F(0))
    fills1 = (F(1, 2), F(1, 2), F(1, 2))
    man = bowl_episode(tmp_path, [fills0, fills1])
    rep = run_episode(man, None, None, LEX, oracle_captions=True)
    assert rep.container("bowl0").v_food_cm3 is not None
    c1 = rep.container("bowl1")
    assert c1.error is not None and c1.error.startswith(E_NO_EMPTY)
    assert c1.v_food_cm3 is None
    assert rep.errors == [c1.error]


def test_lone_empty_mention_empties_every_container(tmp_path):
    # a caption naming fewer portions than containers normally gives no
    # evidence, except the all-empty case, which is unambiguous
    man = bowl_episode(tmp_path, [(F(1, 2), F(0)), (F(1, 2), F(0))])
    doctored = with_captions(man, [
        man.frames[0].caption,
        "the subject is eating an empty bowl of rice",
    ])
    rep = run_episode(doctored, None, None, LEX, oracle_captions=True)
    assert rep.container("bowl0").empty_frames == [1]
    assert rep.container("bowl1").empty_frames == [1]


def test_mismatched_mention_count_gives_no_evidence(tmp_path):
    # two bowls but only one nonzero portion mentioned: neither container
    # can claim it, so the frame contributes nothing
    fills = [(F(1, 2),) * 5 + (F(0), F(0))] * 2
    man = bowl_episode(tmp_path, fills)
    short = "the subject is eating a half bowl of rice"
    doctored = with_captions(
        man, [short] + [fr.caption for fr in man.frames[1:]])
    rep = run_episode(doctored, None, None, LEX, oracle_captions=True)
    for cid in ("bowl0", "bowl1"):
        assert rep.container(cid).pre_eating_frames == [1, 2, 3, 4]
        assert F_PRE_EATING_SHORT in rep.container(cid).flags


def test_dropping_post_eating_frames_changes_nothing(tmp_path):
    fills = (F(1, 2), F(1, 4), F(0), F(0), F(0))
    man_full = bowl_episode(tmp_path / "full", [fills])
    man_cut = bowl_episode(tmp_path / "cut", [fills[:-1]])
    rep_full = run_episode(man_full, None, None, LEX, oracle_captions=True)
    rep_cut = run_episode(man_cut, None, None, LEX, oracle_captions=True)
    assert (rep_full.container("bowl0").v_food_cm3
            == rep_cut.container("bowl0").v_food_cm3)


def test_oracle_report_is_deterministic(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0), F(0))], noise_sigma=4e-4)
    a = run_episode(man, None, None, LEX, oracle_captions=True)
    b = run_episode(man, None, None, LEX, oracle_captions=True)
    assert a.to_dict() == b.to_dict()


def test_oracle_mode_requires_stored_captions(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    doctored = with_captions(man, [man.frames[0].caption, None])
    with pytest.raises(DataError, match="no stored caption"):
        run_episode(doctored, None, None, LEX, oracle_captions=True)


def test_model_mode_requires_model_and_vocab(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    with pytest.raises(ConfigError, match="model mode"):
        run_episode(man, None, None, LEX)


def test_bad_window_rejected(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(0))])
    with pytest.raises(ConfigError, match="window"):
        run_episode(man, None, None, LEX, n=0, oracle_captions=True)


def test_threaded_model_mode_matches_serial(tmp_path):
    # an untrained model captions arbitrarily, possibly never saying empty;
    # serial and threaded runs must agree either way, error included
    man = bowl_episode(tmp_path, [(F(1, 2), F(0), F(0))])
    cfg = ModelConfig(vocab_size=len(VOCAB), d_model=16, n_heads=2,
                      n_enc_layers=1, n_dec_layers=1, n_regions=4,
                      feature_dim=18, variant="l", max_caption_len=24)
    model = GLTransformer(cfg, seed=3)

    def outcome(threads):
        try:
            return run_episode(man, model, VOCAB, LEX, threads=threads).to_dict()
        except PipelineError as e:
            return str(e)

    assert outcome(1) == outcome(4)


def test_report_save_and_table(tmp_path):
    man = bowl_episode(tmp_path, [(F(1, 2), F(1, 4), F(0), F(0))])
    rep = run_episode(man, None, None, LEX, oracle_captions=True)
    out = tmp_path / "report.json"
    rep.save(out)
    loaded = json.loads(out.read_text())
    assert loaded["schema"] == 1
    assert loaded["episode_id"] == man.episode_id
    assert loaded["config"]["oracle_captions"] is True
    text = rep.table()
    assert "bowl0" in text and "PRE_EATING_SHORT" in text


# scoring against ground truth

def report_with(episode_id, v_food):
    """Minimal report carrying fixed estimates."""
    containers = [ContainerResult(container_id=cid, v_food_cm3=v)
                  for cid, v in v_food.items()]
    return EpisodeReport(episode_id=episode_id, config={}, frames=[],
                         containers=containers)


def test_evaluate_volume_signed_rows_and_pooled_abs_mean():
    reports = [report_with("e0", {"bowl0": 110.0, "bowl1": 170.0}),
               report_with("e1", {"bowl0": 311.0})]
    truth = {"e0": {"bowl0": 100.0, "bowl1": 200.0},
             "e1": {"bowl0": 300.0}}
    ev = evaluate_volume(reports, truth)
    assert ev.rows[0].errors_cm3 == pytest.approx({"bowl0": 10.0, "bowl1": -30.0})
    assert ev.rows[0].mean_cm3 == pytest.approx(-10.0)
    assert ev.rows[1].errors_cm3 == pytest.approx({"bowl0": 11.0})
    # pooled over containers, not an average of episode means
    assert ev.overall_abs_mean_cm3 == pytest.approx((10 + 30 + 11) / 3)
    assert ev.excluded == []


def test_evaluate_volume_perfect_estimates_score_zero():
    reports = [report_with("e0", {"bowl0": 250.0})]
    ev = evaluate_volume(reports, {"e0": {"bowl0": 250.0}})
    assert ev.overall_abs_mean_cm3 == 0.0


def test_evaluate_volume_excludes_unscorable_containers():
    reports = [report_with("e0", {"bowl0": 100.0}),
               report_with("e1", {"bowl0": 100.0})]
    reports[0].containers.append(
        ContainerResult(container_id="bowl1", error=f"{E_NO_EMPTY}: never"))
    truth = {"e0": {"bowl0": 90.0, "bowl1": 50.0}}
    ev = evaluate_volume(reports, truth)
    assert len(ev.rows) == 1
    assert any("bowl1" in note for note in ev.excluded)
    assert any("e1" in note for note in ev.excluded)
    assert ev.overall_abs_mean_cm3 == pytest.approx(10.0)


def test_evaluation_table_headline_row():
    ev = evaluate_volume([report_with("e0", {"bowl0": 120.0})],
                         {"e0": {"bowl0": 100.0}})
    text = ev.table()
    assert "Overall (abs. mean)" in text
    assert "+20.00" in text
