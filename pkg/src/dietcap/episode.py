"""Eating-episode orchestration: caption, find empties, measure, deduce.

An episode is an ordered run of frames over one meal. The estimator captions
every frame, reads each container's fill state out of the parsed captions,
reconstructs the container from the frames where it is seen empty, and then
multiplies that capacity by the average fill fraction over the first few
pre-eating frames. Reports carry the full per-frame trail so a bad estimate
can always be traced back to the caption that caused it.

Caption-to-container attribution is positional: synthetic captions mention
containers in manifest order, one portion phrase each, and a model caption is
trusted only when its portion-phrase count matches the container count. The
one exception, for multi-container frames, is an all-zero caption, which
counts as empty for every container. Frames that fit neither pattern are
excluded from that container's evidence rather than guessed at.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .captioner import GLTransformer, ModelConfig, RegionalFeatures, TrainSample
from .errors import (
    ConfigError,
    DataError,
    FileFormatError,
    PipelineError,
    ReconstructionError,
)
from .fileio import read_pfm, read_pgm, read_ppm
from .geometry import Intrinsics, food_volume, reconstruct_container
from .parsing import Lexicon, ParsedCaption, parse
from .vocab import Vocabulary

REPORT_SCHEMA = 1
MANIFEST_SCHEMA = 1
PRE_EATING_WINDOW = 5

E_NO_EMPTY = "E_NO_EMPTY"
E_RECONSTRUCTION = "E_RECONSTRUCTION"
F_PRE_EATING_SHORT = "PRE_EATING_SHORT"

_MANIFEST_NAME = "manifest.jsonl"
_INTRINSICS_NAME = "intrinsics.json"


def _canonical_line(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


@dataclass(frozen=True)
class FrameRecord:
    """One frame's files, all paths relative to the episode directory."""

    timestamp: float
    image: str
    features: str
    depth: str
    masks: dict[str, str]
    caption: str | None = None


@dataclass
class EpisodeManifest:
    """An episode directory's index: frames, camera, optional ground truth.

    Ground-truth volumes are cm^3 per container id; gt_container_cm3 is the
    empty container capacity, gt_food_cm3 the food actually present before
    eating. Either dict may be empty for real (non-synthetic) recordings.
    """

    episode_id: str
    root: Path
    intrinsics: Intrinsics
    containers: tuple[str, ...]
    frames: list[FrameRecord]
    gt_container_cm3: dict[str, float] = field(default_factory=dict)
    gt_food_cm3: dict[str, float] = field(default_factory=dict)

    def path(self, rel: str) -> Path:
        return self.root / rel

    def validate(self, check_files: bool = True) -> None:
        if not self.episode_id:
            raise DataError("episode_id must be nonempty")
        if not self.containers:
            raise DataError(f"{self.episode_id}: no containers")
        if not self.frames:
            raise DataError(f"{self.episode_id}: no frames")
        last = -np.inf
        for i, fr in enumerate(self.frames):
            if not fr.timestamp > last:
                raise DataError(
                    f"{self.episode_id}: timestamps must be strictly increasing, "
                    f"frame {i} has {fr.timestamp} after {last}")
            last = fr.timestamp
            if set(fr.masks) != set(self.containers):
                raise DataError(
                    f"{self.episode_id}: frame {i} masks {sorted(fr.masks)} != "
                    f"containers {sorted(self.containers)}")
            if check_files:
                for rel in (fr.image, fr.features, fr.depth, *fr.masks.values()):
                    if not self.path(rel).exists():
                        raise DataError(f"{self.episode_id}: missing file {rel}")
        for gt in (self.gt_container_cm3, self.gt_food_cm3):
            for cid in gt:
                if cid not in self.containers:
                    raise DataError(f"{self.episode_id}: ground truth for unknown "
                                    f"container {cid!r}")

    def save(self) -> None:
        """Write manifest.jsonl and the intrinsics sidecar under root."""
        self.validate(check_files=False)
        self.root.mkdir(parents=True, exist_ok=True)
        header = {
            "record": "episode",
            "schema": MANIFEST_SCHEMA,
            "episode_id": self.episode_id,
            "intrinsics": _INTRINSICS_NAME,
            "containers": list(self.containers),
            "gt_container_cm3": self.gt_container_cm3,
            "gt_food_cm3": self.gt_food_cm3,
        }
        lines = [_canonical_line(header)]
        for fr in self.frames:
            lines.append(_canonical_line({
                "record": "frame",
                "timestamp": fr.timestamp,
                "image": fr.image,
                "features": fr.features,
                "depth": fr.depth,
                "masks": fr.masks,
                "caption": fr.caption,
            }))
        (self.root / _MANIFEST_NAME).write_text("\n".join(lines) + "\n",
                                                encoding="utf-8")
        (self.root / _INTRINSICS_NAME).write_text(
            json.dumps(self.intrinsics.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8")

    @classmethod
    def load(cls, directory: str | Path) -> "EpisodeManifest":
        root = Path(directory)
        mpath = root / _MANIFEST_NAME
        if not mpath.exists():
            raise DataError(f"no {_MANIFEST_NAME} under {root}")
        records = []
        with open(mpath, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    records.append(json.loads(line))
                except json.JSONDecodeError as e:
                    raise FileFormatError(f"{mpath}:{lineno}: {e}") from e
        if not records or records[0].get("record") != "episode":
            raise FileFormatError(f"{mpath}: first record must be the episode header")
        head = records[0]
        if head.get("schema") != MANIFEST_SCHEMA:
            raise FileFormatError(f"{mpath}: unsupported schema {head.get('schema')!r}")
        ipath = root / head["intrinsics"]
        if not ipath.exists():
            raise DataError(f"{root}: missing intrinsics file {head['intrinsics']}")
        intr = Intrinsics.from_dict(json.loads(ipath.read_text(encoding="utf-8")))
        frames = []
        for rec in records[1:]:
            if rec.get("record") != "frame":
                raise FileFormatError(f"{mpath}: unexpected record {rec.get('record')!r}")
            frames.append(FrameRecord(
                timestamp=float(rec["timestamp"]), image=rec["image"],
                features=rec["features"], depth=rec["depth"],
                masks=dict(rec["masks"]), caption=rec.get("caption")))
        manifest = cls(episode_id=head["episode_id"], root=root, intrinsics=intr,
                       containers=tuple(head["containers"]), frames=frames,
                       gt_container_cm3={k: float(v) for k, v in
                                         head.get("gt_container_cm3", {}).items()},
                       gt_food_cm3={k: float(v) for k, v in
                                    head.get("gt_food_cm3", {}).items()})
        manifest.validate(check_files=True)
        return manifest


@dataclass
class FrameAnalysis:
    """Caption and parsed terms for one frame."""

    index: int
    timestamp: float
    caption: str
    portions: list[str]
    portion_values: list[str | None]
    foods: list[str]
    actions: list[str]

    def to_dict(self) -> dict:
        return {"index": self.index, "timestamp": self.timestamp,
                "caption": self.caption, "portions": self.portions,
                "portion_values": self.portion_values, "foods": self.foods,
                "actions": self.actions}


@dataclass
class ContainerResult:
    """Volume evidence and outcome for one container."""

    container_id: str
    v_empty_cm3: float | None = None
    v_food_cm3: float | None = None
    empty_frames: list[int] = field(default_factory=list)
    pre_eating_frames: list[int] = field(default_factory=list)
    pre_eating_values: list[str] = field(default_factory=list)
    flags: list[str] = field(default_factory=list)
    error: str | None = None

    def to_dict(self) -> dict:
        return {"container_id": self.container_id, "v_empty_cm3": self.v_empty_cm3,
                "v_food_cm3": self.v_food_cm3, "empty_frames": self.empty_frames,
                "pre_eating_frames": self.pre_eating_frames,
                "pre_eating_values": self.pre_eating_values,
                "flags": self.flags, "error": self.error}


@dataclass
class EpisodeReport:
    episode_id: str
    config: dict
    frames: list[FrameAnalysis]
    containers: list[ContainerResult]
    errors: list[str] = field(default_factory=list)
    schema: int = REPORT_SCHEMA

    def container(self, cid: str) -> ContainerResult:
        for c in self.containers:
            if c.container_id == cid:
                return c
        raise DataError(f"{self.episode_id}: no container {cid!r} in report")

    def to_dict(self) -> dict:
        return {"schema": self.schema, "episode_id": self.episode_id,
                "config": self.config,
                "frames": [f.to_dict() for f in self.frames],
                "containers": [c.to_dict() for c in self.containers],
                "errors": self.errors}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n",
            encoding="utf-8")

    def table(self) -> str:
        rows = [f"episode {self.episode_id}"]
        rows.append(f"{'container':<12}{'v_empty cm^3':>14}{'V_food cm^3':>14}  notes")
        for c in self.containers:
            ve = "-" if c.v_empty_cm3 is None else f"{c.v_empty_cm3:.1f}"
            vf = "-" if c.v_food_cm3 is None else f"{c.v_food_cm3:.1f}"
            notes = "; ".join([*c.flags, *([c.error] if c.error else [])])
            rows.append(f"{c.container_id:<12}{ve:>14}{vf:>14}  {notes}")
        return "\n".join(rows)


def check_vocab_covers(vocab: Vocabulary, lexicon: Lexicon) -> None:
    """The decoder can only emit what the parser needs if the vocabulary
    holds every lexicon surface token."""
    needed: set[str] = set()
    for ph in lexicon.portion_phrases:
        needed.update(ph)
    for ph in lexicon.food_phrases:
        needed.update(ph)
    needed.update(lexicon.action_forms)
    missing = sorted(t for t in needed if t not in vocab)
    if missing:
        raise ConfigError(
            f"model vocabulary does not cover the lexicon; missing {missing[:8]}"
            + ("..." if len(missing) > 8 else ""))


def frame_inputs(manifest: EpisodeManifest, rec: FrameRecord, cfg: ModelConfig) -> dict:
    """Model inputs for one frame, keyed for GLTransformer.encode.

    The frozen-global variant gets the mean regional-feature row, standing in
    for an off-the-shelf whole-image embedding.
    """
    kwargs: dict = {}
    rows = np.asarray(read_pfm(manifest.path(rec.features)), dtype=np.float64)
    if rows.ndim != 2:
        raise DataError(f"{rec.features}: regional features must be 2-D")
    if cfg.uses_local():
        kwargs["features"] = RegionalFeatures.from_array(rows, cfg.n_regions)
    if cfg.uses_image():
        im = read_ppm(manifest.path(rec.image)).astype(np.float64) / 255.0
        kwargs["image"] = im.transpose(2, 0, 1)
    if cfg.uses_frozen_global():
        kwargs["global_vec"] = rows.mean(axis=0)
    return kwargs


def _caption_one(model: GLTransformer, vocab: Vocabulary, manifest: EpisodeManifest,
                 rec: FrameRecord, beam_width: int | None) -> str:
    enc = model.encode(**frame_inputs(manifest, rec, model.cfg))
    if beam_width is None:
        out = model.greedy_decode(enc)
    else:
        out = model.beam_decode(enc, beam_width)
    return vocab.decode(out.ids)


def _attributed_value(parsed: ParsedCaption, k: int,
                      n_containers: int) -> Fraction | None:
    """The fill fraction this caption asserts for container k, or None when
    the caption gives no usable evidence for it."""
    vals = parsed.portion_values
    if not vals:
        return None
    if n_containers == 1:
        return vals[0]
    if len(vals) == n_containers:
        return vals[k]
    if all(v == 0 for v in vals):
        return Fraction(0)
    return None


def run_episode(manifest: EpisodeManifest, model: GLTransformer | None,
                vocab: Vocabulary | None, lexicon: Lexicon,
                n: int = PRE_EATING_WINDOW, oracle_captions: bool = False,
                beam_width: int | None = None, threads: int = 1) -> EpisodeReport:
    """Estimate per-container food volume for one episode.

    Every frame is captioned (greedy unless beam_width is set), captions are
    parsed against the lexicon, each container's capacity comes from the
    frames that call it empty, and its food volume is capacity times the
    average fill over the first n quantified nonzero frames. With
    oracle_captions=True the manifest's stored captions are used verbatim and
    the model is not consulted, which bounds the geometry error on synthetic
    data independently of captioner quality.
    """
    if n <= 0:
        raise ConfigError(f"pre-eating window must be positive, got {n}")
    if threads < 1:
        raise ConfigError(f"threads must be >= 1, got {threads}")
    if not oracle_captions:
        if model is None or vocab is None:
            raise ConfigError("model mode needs a model and its vocabulary")
        check_vocab_covers(vocab, lexicon)

    if oracle_captions:
        captions = []
        for i, fr in enumerate(manifest.frames):
            if fr.caption is None:
                raise DataError(f"{manifest.episode_id}: frame {i} has no stored "
                                "caption for oracle mode")
            captions.append(fr.caption)
    elif threads == 1:
        captions = [_caption_one(model, vocab, manifest, fr, beam_width)
                    for fr in manifest.frames]
    else:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            captions = list(pool.map(
                lambda fr: _caption_one(model, vocab, manifest, fr, beam_width),
                manifest.frames))

    parsed = [parse(c, lexicon) for c in captions]
    frames = [FrameAnalysis(
        index=i, timestamp=fr.timestamp, caption=captions[i],
        portions=list(parsed[i].portions),
        portion_values=[None if v is None else str(v)
                        for v in parsed[i].portion_values],
        foods=sorted(parsed[i].foods), actions=sorted(parsed[i].actions))
        for i, fr in enumerate(manifest.frames)]

    n_containers = len(manifest.containers)
    results = []
    for k, cid in enumerate(manifest.containers):
        res = ContainerResult(container_id=cid)
        values = [_attributed_value(p, k, n_containers) for p in parsed]
        res.empty_frames = [i for i, v in enumerate(values) if v == 0]
        quantified = [(i, v) for i, v in enumerate(values)
                      if v is not None and v > 0]
        pre = quantified[:n]
        res.pre_eating_frames = [i for i, _ in pre]
        res.pre_eating_values = [str(v) for _, v in pre]
        if len(pre) < n:
            res.flags.append(F_PRE_EATING_SHORT)
        if not res.empty_frames:
            res.error = f"{E_NO_EMPTY}: no frame captions container {cid} as empty"
            results.append(res)
            continue
        depths = [np.asarray(read_pfm(manifest.path(manifest.frames[i].depth)),
                             dtype=np.float64) for i in res.empty_frames]
        masks = [read_pgm(manifest.path(manifest.frames[i].masks[cid])).astype(bool)
                 for i in res.empty_frames]
        try:
            est = reconstruct_container(depths, masks, manifest.intrinsics)
        except ReconstructionError as e:
            res.error = f"{E_RECONSTRUCTION}: {e}"
            results.append(res)
            continue
        res.v_empty_cm3 = est.volume_cm3
        res.v_food_cm3 = food_volume(est.volume_cm3, [v for _, v in pre], n)
        results.append(res)

    if all(r.error is not None and r.error.startswith(E_NO_EMPTY) for r in results):
        raise PipelineError(
            f"{E_NO_EMPTY}: {manifest.episode_id}: no container is ever "
            "captioned empty, cannot reconstruct")

    config = {"n": n, "oracle_captions": oracle_captions,
              "beam_width": beam_width, "threads": threads,
              "decode": "greedy" if beam_width is None else f"beam-{beam_width}",
              "variant": None if model is None else model.cfg.variant,
              "model_config": None if model is None else model.cfg.to_dict()}
    return EpisodeReport(episode_id=manifest.episode_id, config=config,
                         frames=frames, containers=results,
                         errors=[r.error for r in results if r.error])


def frame_samples(manifest: EpisodeManifest, vocab: Vocabulary,
                  cfg: ModelConfig) -> list[TrainSample]:
    """Training pairs from a manifest's stored captions."""
    samples = []
    for i, fr in enumerate(manifest.frames):
        if fr.caption is None:
            raise DataError(f"{manifest.episode_id}: frame {i} has no caption "
                            "to train on")
        ids = np.asarray(vocab.encode(fr.caption), dtype=np.int64)
        samples.append(TrainSample(caption_ids=ids,
                                   **frame_inputs(manifest, fr, cfg)))
    return samples


# accuracy bookkeeping against ground truth


@dataclass
class EpisodeErrorRow:
    episode_id: str
    errors_cm3: dict[str, float]

    @property
    def mean_cm3(self) -> float:
        return float(np.mean(list(self.errors_cm3.values())))

    @property
    def std_cm3(self) -> float:
        return float(np.std(list(self.errors_cm3.values())))


@dataclass
class VolumeEvaluation:
    """Signed estimate-minus-truth errors, episode rows plus a pooled
    absolute mean over every scored container."""

    rows: list[EpisodeErrorRow]
    overall_abs_mean_cm3: float
    excluded: list[str]

    def table(self) -> str:
        lines = [f"{'episode':<24}{'containers':>11}{'mean err cm^3':>15}{'std':>9}"]
        for row in self.rows:
            lines.append(f"{row.episode_id:<24}{len(row.errors_cm3):>11}"
                         f"{row.mean_cm3:>+15.2f}{row.std_cm3:>9.2f}")
        lines.append(f"{'Overall (abs. mean)':<24}{'':>11}"
                     f"{self.overall_abs_mean_cm3:>15.2f}")
        for note in self.excluded:
            lines.append(f"excluded: {note}")
        return "\n".join(lines)


def evaluate_volume(reports: Sequence[EpisodeReport],
                    ground_truth: dict[str, dict[str, float]]) -> VolumeEvaluation:
    """Score reports against true food volumes (cm^3 per container).

    Containers without a truth entry or without an estimate are excluded and
    flagged rather than scored.
    """
    rows = []
    excluded = []
    pooled = []
    for rep in reports:
        truth = ground_truth.get(rep.episode_id)
        if truth is None:
            excluded.append(f"{rep.episode_id}: no ground truth")
            continue
        errs: dict[str, float] = {}
        for c in rep.containers:
            if c.container_id not in truth:
                excluded.append(f"{rep.episode_id}/{c.container_id}: no ground truth")
                continue
            if c.v_food_cm3 is None:
                excluded.append(f"{rep.episode_id}/{c.container_id}: no estimate "
                                f"({c.error})")
                continue
            errs[c.container_id] = c.v_food_cm3 - truth[c.container_id]
        if errs:
            rows.append(EpisodeErrorRow(episode_id=rep.episode_id, errors_cm3=errs))
            pooled.extend(errs.values())
    overall = float(np.mean(np.abs(pooled))) if pooled else 0.0
    return VolumeEvaluation(rows=rows, overall_abs_mean_cm3=overall,
                            excluded=excluded)
