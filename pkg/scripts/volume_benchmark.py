"""Food-volume accuracy on seeded synthetic episodes, oracle vs model.

Oracle mode feeds the stored captions straight into the volume pipeline,
bounding the geometry error alone; model mode trains the captioner from
scratch on a disjoint curriculum and runs the full chain. Prints both
error tables plus worst-case per-container relative error.

    python scripts/volume_benchmark.py --work /tmp/volbench
"""

from __future__ import annotations

import argparse
import json
import time
from pathlib import Path

from dietcap.captioner import GLTransformer, ModelConfig, train_captioner
from dietcap.episode import EpisodeManifest, evaluate_volume, frame_samples, run_episode
from dietcap.synth import FEATURE_WIDTH, synth_suite, template_lexicon, training_suite
from dietcap.vocab import Vocabulary


def worst_rel(reports, gt) -> float:
    worst = 0.0
    for rep in reports:
        for c in rep.containers:
            truth = gt[rep.episode_id][c.container_id]
            if c.v_food_cm3 is None:
                return float("inf")
            worst = max(worst, abs(c.v_food_cm3 - truth) / truth)
    return worst


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="bench-volume", help="suite directory")
    ap.add_argument("--episodes", type=int, default=10)
    ap.add_argument("--epochs", type=int, default=100)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--out", help="also dump the signed errors as JSON")
    args = ap.parse_args()

    work = Path(args.work)
    train_root, test_root = work / "train", work / "test"
    if not (train_root / "vocab.txt").exists():
        training_suite(train_root, seed=11)
        synth_suite(test_root, args.episodes, seed=7)
    vocab = Vocabulary.load(train_root / "vocab.txt")
    lex = template_lexicon()
    train_eps = [EpisodeManifest.load(d) for d in sorted(train_root.iterdir())
                 if d.is_dir()]
    test_eps = [EpisodeManifest.load(d) for d in sorted(test_root.iterdir())
                if d.is_dir()]
    gt = {m.episode_id: m.gt_food_cm3 for m in test_eps}

    oracle = [run_episode(m, None, None, lex, oracle_captions=True)
              for m in test_eps]
    print("oracle captions (geometry error only):")
    print(evaluate_volume(oracle, gt).table())
    print(f"worst per-container rel error {worst_rel(oracle, gt):.2%}\n")

    cfg = ModelConfig(vocab_size=len(vocab), d_model=64, n_heads=4,
                      n_enc_layers=2, n_dec_layers=2, n_regions=4,
                      feature_dim=FEATURE_WIDTH, variant="l", max_caption_len=24)
    model = GLTransformer(cfg, seed=args.seed)
    samples = [s for m in train_eps for s in frame_samples(m, vocab, cfg)]
    t0 = time.monotonic()
    result = train_captioner(model, samples, epochs=args.epochs, batch_size=16,
                             lr=1e-3, seed=3,
                             log_fn=lambda e, l: print(f"  epoch {e:3d} loss {l:.4f}")
                             if e % 20 == 19 else None)
    print(f"trained {len(samples)} samples for {args.epochs} epochs in "
          f"{time.monotonic() - t0:.0f}s, final loss {result.epoch_losses[-1]:.4f}\n")

    modeled = [run_episode(m, model, vocab, lex) for m in test_eps]
    ev = evaluate_volume(modeled, gt)
    print("trained captioner:")
    print(ev.table())
    print(f"worst per-container rel error {worst_rel(modeled, gt):.2%}")

    if args.out:
        rows = {r.episode_id: r.errors_cm3 for r in ev.rows}
        Path(args.out).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")
        print(f"errors -> {args.out}")


if __name__ == "__main__":
    main()
