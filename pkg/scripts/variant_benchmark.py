"""Train every captioner variant on the synthetic curriculum and compare
caption quality on a held-out suite.

The local-stream variant sees the detector-style one-hot rows, the image
variants see the 32x32 cartoon render, and the frozen-global variant gets
the mean feature row standing in for an off-the-shelf embedding. Same
curriculum, same optimizer budget, so the table isolates what each input
stream is worth.

    python scripts/variant_benchmark.py --work /tmp/bench --epochs 60
"""

from __future__ import annotations

import argparse
import time
from collections import defaultdict
from pathlib import Path

from dietcap.captioner import GLTransformer, ModelConfig, train_captioner
from dietcap.episode import EpisodeManifest, frame_inputs, frame_samples
from dietcap.metrics import EvalCorpus, bleu, rouge_l
from dietcap.parsing import accuracy_report
from dietcap.synth import FEATURE_WIDTH, IMAGE_SIZE, synth_suite, template_lexicon, training_suite
from dietcap.vocab import Vocabulary


def model_config(variant: str, vocab_size: int) -> ModelConfig:
    return ModelConfig(
        vocab_size=vocab_size, d_model=64, n_heads=4, n_enc_layers=2,
        n_dec_layers=2, n_regions=4, feature_dim=FEATURE_WIDTH,
        global_feature_dim=FEATURE_WIDTH, image_size=IMAGE_SIZE,
        variant=variant, max_caption_len=24)


def load_episodes(root: Path) -> list[EpisodeManifest]:
    return [EpisodeManifest.load(d) for d in sorted(root.iterdir()) if d.is_dir()]


def evaluate(model: GLTransformer, episodes: list[EpisodeManifest],
             vocab: Vocabulary) -> dict:
    lex = template_lexicon()
    hits: dict[int, int] = defaultdict(int)
    totals: dict[int, int] = defaultdict(int)
    refs, hyps = [], []
    for man in episodes:
        k = len(man.containers)
        for rec in man.frames:
            enc = model.encode(**frame_inputs(man, rec, model.cfg))
            hyp = vocab.decode(model.greedy_decode(enc).ids)
            refs.append(rec.caption)
            hyps.append(hyp)
            totals[k] += 1
            hits[k] += hyp == rec.caption
    corpus = EvalCorpus.from_pairs([(h, [r]) for h, r in zip(hyps, refs)])
    return {
        "exact": {k: (hits[k], totals[k]) for k in sorted(totals)},
        "bleu4": bleu(corpus, 4, smooth=True),
        "rouge_l": rouge_l(corpus),
        "portion": accuracy_report(refs, hyps, "portion", lex).rate,
        "food": accuracy_report(refs, hyps, "food", lex).rate,
    }


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--work", default="bench-variants", help="suite directory")
    ap.add_argument("--variants", nargs="+",
                    default=["gl", "g", "l", "gl-frozen"])
    ap.add_argument("--epochs", type=int, default=60)
    ap.add_argument("--test-episodes", type=int, default=10)
    ap.add_argument("--seed", type=int, default=0)
    args = ap.parse_args()

    work = Path(args.work)
    train_root, test_root = work / "train", work / "test"
    if not (train_root / "vocab.txt").exists():
        training_suite(train_root, seed=11)
        synth_suite(test_root, args.test_episodes, seed=7)
    vocab = Vocabulary.load(train_root / "vocab.txt")
    train_eps = load_episodes(train_root)
    test_eps = load_episodes(test_root)

    print(f"{len(train_eps)} training episodes, {len(test_eps)} held out, "
          f"|V|={len(vocab)}, {args.epochs} epochs per variant")
    header = (f"{'variant':<10}{'exact by bowls':<28}{'BLEU-4':>8}"
              f"{'ROUGE-L':>9}{'portion':>9}{'food':>7}{'train s':>9}")
    print(header)
    print("-" * len(header))
    for variant in args.variants:
        cfg = model_config(variant, len(vocab))
        model = GLTransformer(cfg, seed=args.seed)
        samples = [s for m in train_eps for s in frame_samples(m, vocab, cfg)]
        t0 = time.monotonic()
        train_captioner(model, samples, epochs=args.epochs, batch_size=16,
                        lr=1e-3, seed=3)
        dt = time.monotonic() - t0
        r = evaluate(model, test_eps, vocab)
        exact = " ".join(f"k{k}:{h}/{t}" for k, (h, t) in r["exact"].items())
        print(f"{variant:<10}{exact:<28}{r['bleu4']:>8.2f}{r['rouge_l']:>9.2f}"
              f"{r['portion']:>9.3f}{r['food']:>7.3f}{dt:>9.1f}")


if __name__ == "__main__":
    main()
