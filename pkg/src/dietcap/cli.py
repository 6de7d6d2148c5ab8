"""Command-line front end.

Eight subcommands tie the library together: synth (generate episodes),
build-vocab, train, caption, eval-metrics, parse-accuracy, hull-volume,
and estimate-episode. Every subcommand is replayable: the same config,
seed, and inputs write byte-identical primary outputs.

Exit codes: 0 success; 2 for usage problems (bad flags, missing or
malformed files, invalid configuration); 1 for pipeline failures on valid
inputs (no empty frames, degenerate geometry, undefined rates). Errors
print one machine-readable line on stderr: "error CLASS: message".
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from .captioner import GLTransformer, VARIANTS, load_checkpoint, save_checkpoint
from .config import RunConfig, SplitSpec, fixture_root
from .episode import (
    EpisodeManifest,
    evaluate_volume,
    frame_samples,
    run_episode,
)
from .errors import ConfigError, DataError, DietcapError
from .geometry import hull_volume
from .metrics import EvalCorpus, score_all
from .parsing import CATEGORIES, Lexicon, accuracy_report, load_default_lexicon
from .synth import SUITE_NOISE_SIGMA_M, synth_suite, training_suite
from .vocab import Vocabulary


def _read_lines(path: str | Path) -> list[str]:
    p = Path(path)
    if not p.exists():
        raise DataError(f"missing file {p}")
    return [ln for ln in p.read_text(encoding="utf-8").splitlines() if ln.strip()]


def _load_config(args: argparse.Namespace) -> RunConfig:
    cfg = RunConfig.from_file(args.config) if args.config else RunConfig()
    return cfg.override(
        seed=getattr(args, "seed", None),
        threads=getattr(args, "threads", None),
        variant=getattr(args, "variant", None),
        beam_width=getattr(args, "beam_width", None),
        split=getattr(args, "split", None),
        batch_size=getattr(args, "batch_size", None),
        lr=getattr(args, "lr", None),
        max_epochs=getattr(args, "epochs", None),
        vocab=getattr(args, "vocab", None),
        lexicon=getattr(args, "lexicon", None),
        checkpoint=getattr(args, "checkpoint", None),
    )


def _episode_dirs(root: Path) -> list[Path]:
    if not root.is_dir():
        raise DataError(f"missing episode directory {root}")
    dirs = sorted(d for d in root.iterdir() if (d / "manifest.jsonl").exists())
    if not dirs:
        raise DataError(f"no episode manifests under {root}")
    return dirs


def _load_vocab(cfg: RunConfig, data_dir: Path) -> Vocabulary:
    path = Path(cfg.vocab) if cfg.vocab else data_dir / "vocab.txt"
    if not path.exists():
        raise DataError(f"missing vocabulary file {path}")
    return Vocabulary.load(path)


def _load_lexicon(cfg: RunConfig, data_dir: Path | None) -> Lexicon:
    if cfg.lexicon:
        return Lexicon.load(cfg.lexicon)
    if data_dir is not None and (data_dir / "lexicon.json").exists():
        return Lexicon.load(data_dir / "lexicon.json")
    return load_default_lexicon()


# subcommands

def cmd_build_vocab(args: argparse.Namespace) -> int:
    lines = _read_lines(args.captions)
    if not lines:
        raise DataError(f"empty caption corpus {args.captions}")
    vocab = Vocabulary.from_corpus(lines)
    vocab.save(args.out)
    print(f"{len(vocab)} ids ({len(vocab.tokens)} corpus tokens) -> {args.out}")
    return 0


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if args.curriculum:
        manifests = training_suite(args.out_dir, seed=cfg.seed,
                                   noise_sigma=args.noise_sigma)
    else:
        manifests = synth_suite(args.out_dir, n_episodes=args.episodes,
                                seed=cfg.seed, noise_sigma=args.noise_sigma)
    frames = sum(len(m.frames) for m in manifests)
    print(f"{len(manifests)} episodes, {frames} frames -> {args.out_dir}")
    return 0


def cmd_train(args: argparse.Namespace) -> int:
    from .captioner import train_captioner  # heavy import kept local

    cfg = _load_config(args)
    data_dir = Path(args.data_dir)
    vocab = _load_vocab(cfg, data_dir)
    dirs = _episode_dirs(data_dir)
    manifests = [EpisodeManifest.load(d) for d in dirs]
    if cfg.split is not None:
        spec = SplitSpec.numbered(cfg.split, [m.episode_id for m in manifests])
        manifests = [m for m in manifests if m.episode_id in set(spec.train)]
        print(f"{spec.name}: training on {len(spec.train)} of "
              f"{len(spec.train) + len(spec.test)} episodes")
    model_cfg = cfg.model_config(len(vocab))
    samples = []
    for man in manifests:
        samples.extend(frame_samples(man, vocab, model_cfg))
    model = GLTransformer(model_cfg, seed=cfg.seed)
    result = train_captioner(
        model, samples, epochs=cfg.max_epochs, batch_size=cfg.batch_size,
        lr=cfg.lr, seed=cfg.seed,
        log_fn=lambda e, l: print(f"epoch {e:3d} loss {l:.4f}"))
    save_checkpoint(model, args.out)
    print(f"{len(samples)} samples, final loss {result.epoch_losses[-1]:.4f} "
          f"-> {args.out}")
    return 0


def cmd_caption(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    if not cfg.checkpoint:
        raise ConfigError("caption needs --checkpoint")
    model = load_checkpoint(cfg.checkpoint)
    man = EpisodeManifest.load(args.manifest_dir)
    vocab = _load_vocab(cfg, Path(args.manifest_dir).parent)
    if len(vocab) != model.cfg.vocab_size:
        raise ConfigError(
            f"vocabulary size {len(vocab)} != checkpoint vocab_size "
            f"{model.cfg.vocab_size}")
    from .episode import _caption_one

    lines = [_caption_one(model, vocab, man, fr, cfg.beam_width)
             for fr in man.frames]
    text = "".join(ln + "\n" for ln in lines)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"{len(lines)} captions -> {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_eval_metrics(args: argparse.Namespace) -> int:
    if len(args.files) == 1:
        corpus = EvalCorpus.load_jsonl(args.files[0])
    elif len(args.files) == 2:
        cands = _read_lines(args.files[0])
        refs = _read_lines(args.files[1])
        if len(cands) != len(refs):
            raise DataError(
                f"candidate/reference line counts differ: {len(cands)} vs {len(refs)}")
        corpus = EvalCorpus.from_pairs((c, [r]) for c, r in zip(cands, refs))
    else:
        raise ConfigError("eval-metrics takes CORPUS.jsonl or CANDIDATES REFERENCES")
    for name, value in score_all(corpus).items():
        print(f"{name} {value:.4f}")
    return 0


def cmd_parse_accuracy(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    lex = _load_lexicon(cfg, None)
    gt = _read_lines(args.gt)
    gen = _read_lines(args.generated)
    for category in CATEGORIES:
        rep = accuracy_report(gt, gen, category, lex)
        print(f"{category} {rep.rate:.4f} used {rep.pairs_used} "
              f"excluded {rep.pairs_excluded}")
    return 0


def cmd_hull_volume(args: argparse.Namespace) -> int:
    path = Path(args.points) if args.points else fixture_root() / "unit_cube.xyz"
    if not path.exists():
        raise DataError(f"missing points file {path}")
    pts = np.loadtxt(path, dtype=np.float64, ndmin=2)
    if pts.ndim != 2 or pts.shape[1] != 3:
        raise DataError(f"{path}: expected x y z per line, got shape {pts.shape}")
    cm3 = hull_volume(pts) * 1e6
    print(f"{cm3:.3f}")
    return 0


def cmd_estimate_episode(args: argparse.Namespace) -> int:
    cfg = _load_config(args)
    man = EpisodeManifest.load(args.manifest_dir)
    data_dir = Path(args.manifest_dir).parent
    lex = _load_lexicon(cfg, data_dir)
    if args.oracle_captions:
        model, vocab = None, None
    else:
        if not cfg.checkpoint:
            raise ConfigError("model mode needs --checkpoint (or --oracle-captions)")
        model = load_checkpoint(cfg.checkpoint)
        vocab = _load_vocab(cfg, data_dir)
    report = run_episode(man, model, vocab, lex, n=cfg.pre_eating_window,
                         oracle_captions=args.oracle_captions,
                         beam_width=cfg.beam_width, threads=cfg.threads)
    print(report.table())
    if man.gt_food_cm3:
        print(evaluate_volume([report], {man.episode_id: man.gt_food_cm3}).table())
    if args.out:
        report.save(args.out)
        print(f"report -> {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config; flags override it")
    common.add_argument("--seed", type=int, help="PRNG seed (default 0)")
    common.add_argument("--threads", type=int,
                        help="worker threads, default 1 for determinism")

    model_flags = argparse.ArgumentParser(add_help=False)
    model_flags.add_argument("--variant", choices=VARIANTS,
                             help="captioner variant (default gl)")
    model_flags.add_argument("--beam-width", type=int, dest="beam_width",
                             help="beam search width; omit for greedy")
    model_flags.add_argument("--vocab", help="vocabulary file")

    parser = argparse.ArgumentParser(
        prog="dietcap",
        description="Dietary captioning and food-volume estimation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("build-vocab", parents=[common],
                       help="frequency-sorted vocabulary from a caption corpus")
    p.add_argument("captions", help="text file, one caption per line")
    p.add_argument("-o", "--out", required=True)
    p.set_defaults(func=cmd_build_vocab)

    p = sub.add_parser("synth", parents=[common],
                       help="generate synthetic episodes with ground truth")
    p.add_argument("out_dir")
    p.add_argument("--episodes", type=int, default=10)
    p.add_argument("--noise-sigma", type=float, default=SUITE_NOISE_SIGMA_M,
                   dest="noise_sigma", help="depth noise in meters")
    p.add_argument("--curriculum", action="store_true",
                   help="captioner training curriculum instead of random episodes")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common, model_flags],
                       help="train a captioner on episode directories")
    p.add_argument("data_dir", help="directory of episode subdirectories")
    p.add_argument("-o", "--out", required=True, help="checkpoint path")
    p.add_argument("--split", type=int, choices=(1, 2, 3),
                   help="train on the named split's train half")
    p.add_argument("--epochs", type=int, help="default 10")
    p.add_argument("--batch-size", type=int, dest="batch_size", help="default 10")
    p.add_argument("--lr", type=float, help="default 5e-4")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("caption", parents=[common, model_flags],
                       help="caption every frame of one episode")
    p.add_argument("manifest_dir")
    p.add_argument("--checkpoint", help="trained model")
    p.add_argument("-o", "--out", help="write captions here instead of stdout")
    p.set_defaults(func=cmd_caption)

    p = sub.add_parser("eval-metrics", parents=[common],
                       help="BLEU-1..4, ROUGE-L, CIDEr")
    p.add_argument("files", nargs="+",
                   help="corpus.jsonl, or CANDIDATES REFERENCES text files")
    p.set_defaults(func=cmd_eval_metrics)

    p = sub.add_parser("parse-accuracy", parents=[common],
                       help="portion/food/action term accuracy")
    p.add_argument("gt", help="ground-truth captions, one per line")
    p.add_argument("generated", help="generated captions, aligned")
    p.add_argument("--lexicon", help="lexicon JSON (default: packaged)")
    p.set_defaults(func=cmd_parse_accuracy)

    p = sub.add_parser("hull-volume", parents=[common],
                       help="convex hull volume of an x y z point file, in cm^3")
    p.add_argument("points", nargs="?",
                   help="default: unit_cube.xyz under the fixture root")
    p.set_defaults(func=cmd_hull_volume)

    p = sub.add_parser("estimate-episode", parents=[common, model_flags],
                       help="per-container food volume for one episode")
    p.add_argument("manifest_dir")
    p.add_argument("--oracle-captions", action="store_true",
                   help="use the manifest's stored captions, no model")
    p.add_argument("--checkpoint", help="trained model for model mode")
    p.add_argument("--lexicon", help="lexicon JSON (default: episode directory)")
    p.add_argument("-o", "--out", help="also write the report as JSON")
    p.set_defaults(func=cmd_estimate_episode)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except DietcapError as e:
        print(f"error {type(e).__name__}: {e}", file=sys.stderr)
        return 2 if isinstance(e, (ConfigError, DataError)) else 1


if __name__ == "__main__":
    sys.exit(main())
