"""File formats: MOT-style annotation files, split manifests and run config.

Ground truth / predictions are CSV lines `frame,id,x,y,w,h,conf,class,visibility`.
Split manifests are CSV lines `sequence_name,domain,split`. Run configuration
is a flat `key = value` text document with `#` comments.
"""

from dataclasses import dataclass, field, replace

from .core import AnnotatedSequence, BoundingBox, Detection, Track


class ParseError(ValueError):
    def __init__(self, message, line_no=None):
        if line_no is not None:
            message = f"line {line_no}: {message}"
        super().__init__(message)
        self.line_no = line_no


class IntegrityError(ValueError):
    pass


class ManifestError(ValueError):
    pass


class ConfigError(ValueError):
    pass


def parse_mot_file(text: str, name: str = "", frame_count: int | None = None,
                   domain: str = "source") -> AnnotatedSequence:
    """Parse a MOT ground-truth/prediction file into an AnnotatedSequence.

    Lines with conf = 0 are inactive annotations and are skipped. The result
    does not depend on line order.
    """
    per_id: dict = {}
    max_frame = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise ParseError(f"expected 9 comma-separated fields, got {len(parts)}", line_no)
        try:
            frame = int(float(parts[0]))
            tid = int(float(parts[1]))
            x, y, w, h = (float(v) for v in parts[2:6])
            conf = float(parts[6])
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", line_no) from None
        if conf == 0:
            continue
        entries = per_id.setdefault(tid, {})
        if frame in entries:
            raise IntegrityError(
                f"duplicate (frame={frame}, id={tid}) pair in {name or 'input'}"
            )
        entries[frame] = BoundingBox(x, y, w, h)
        max_frame = max(max_frame, frame)
    if frame_count is None:
        frame_count = max(max_frame, 1)
    tracks = [Track(tid, entries) for tid, entries in per_id.items()]
    return AnnotatedSequence(name, frame_count, tracks, domain=domain)


def parse_detections(text: str, frame_count: int | None = None) -> list:
    """Parse a MOT detections file (track id ignored) into per-frame lists of
    Detection, indexed 0-based for frames 1..frame_count."""
    dets = []
    max_frame = 0
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line:
            continue
        parts = line.split(",")
        if len(parts) != 9:
            raise ParseError(f"expected 9 comma-separated fields, got {len(parts)}", line_no)
        try:
            frame = int(float(parts[0]))
            x, y, w, h = (float(v) for v in parts[2:6])
            conf = float(parts[6])
        except ValueError as exc:
            raise ParseError(f"non-numeric field: {exc}", line_no) from None
        if conf == 0:
            continue
        dets.append(Detection(frame, BoundingBox(x, y, w, h), min(conf, 1.0)))
        max_frame = max(max_frame, frame)
    if frame_count is None:
        frame_count = max(max_frame, 1)
    per_frame = [[] for _ in range(frame_count)]
    for d in dets:
        if 1 <= d.frame <= frame_count:
            per_frame[d.frame - 1].append(d)
    return per_frame


def write_mot_file(seq: AnnotatedSequence) -> str:
    """Serialize a sequence to MOT format, lines sorted by (frame, id)."""
    rows = []
    for track in seq.tracks:
        for frame, box in track.entries.items():
            rows.append((frame, track.id, box))
    rows.sort(key=lambda r: (r[0], r[1]))
    lines = [
        f"{frame},{tid},{_fmt(box.x)},{_fmt(box.y)},{_fmt(box.w)},{_fmt(box.h)},1,1,1"
        for frame, tid, box in rows
    ]
    return "".join(line + "\n" for line in lines)


def _fmt(v: float) -> str:
    # repr round-trips doubles exactly; strip trailing ".0" for integral values
    v = float(v)   # numpy scalars repr as np.float64(...), plain floats don't
    return str(int(v)) if v == int(v) else repr(v)


VALID_SPLITS = ("train", "val", "test")
VALID_DOMAINS = ("source", "target")


@dataclass(frozen=True)
class SplitManifest:
    split: str
    domain: str
    sequence_names: tuple


def load_split_manifest(text: str):
    """Parse `sequence_name,domain,split` lines into SplitManifest groups.

    Raises ManifestError if a sequence appears in two splits of one domain.
    """
    groups: dict = {}
    seen: dict = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 3:
            raise ParseError(f"expected `sequence_name,domain,split`, got {raw!r}", line_no)
        name, domain, split = parts
        if domain not in VALID_DOMAINS:
            raise ParseError(f"unknown domain {domain!r}", line_no)
        if split not in VALID_SPLITS:
            raise ParseError(f"unknown split {split!r}", line_no)
        key = (domain, name)
        if key in seen and seen[key] != split:
            raise ManifestError(
                f"sequence {name!r} appears in both {seen[key]!r} and {split!r} "
                f"splits of domain {domain!r}"
            )
        if key in seen:
            continue
        seen[key] = split
        groups.setdefault((domain, split), []).append(name)
    return [
        SplitManifest(split=split, domain=domain, sequence_names=tuple(names))
        for (domain, split), names in sorted(groups.items())
    ]


@dataclass(frozen=True)
class SortConfig:
    max_age: int = 3
    min_hits: int = 2
    iou_gate: float = 0.3


@dataclass(frozen=True)
class EmdConfig:
    gate_distance: float = 20.0


@dataclass(frozen=True)
class TrainerConfig:
    epochs: int = 8
    batch_size: int = 2
    learning_rate: float = 1e-4
    weight_decay: float = 1e-4
    seed: int = 0
    steps_per_epoch: int = 40


@dataclass(frozen=True)
class RunConfig:
    gamma: float = 2.0
    lambda_local: float = 100.0
    lambda_global: float = 100.0
    lambda_track: float = 100.0
    iou_match_threshold: float = 0.5
    sort: SortConfig = field(default_factory=SortConfig)
    emd: EmdConfig = field(default_factory=EmdConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)


_INT_KEYS = {
    "sort.max_age", "sort.min_hits",
    "trainer.epochs", "trainer.batch_size", "trainer.seed",
    "trainer.steps_per_epoch",
}
_TOP_FLOATS = {
    "gamma", "lambda_local", "lambda_global", "lambda_track", "iou_match_threshold",
}


def load_config(text: str) -> RunConfig:
    """Parse a flat `key = value` document; missing keys take defaults."""
    values = {}
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {line_no}: expected `key = value`, got {raw!r}")
        key, _, val = line.partition("=")
        values[key.strip()] = val.strip()

    cfg = RunConfig()
    top = {}
    sort_kw, emd_kw, trainer_kw = {}, {}, {}
    for key, val in values.items():
        try:
            num = int(val) if key in _INT_KEYS else float(val)
        except ValueError:
            raise ConfigError(f"key {key!r}: non-numeric value {val!r}") from None
        if key in _TOP_FLOATS:
            top[key.replace(".", "_")] = num
        elif key.startswith("sort."):
            sort_kw[key.split(".", 1)[1]] = num
        elif key.startswith("emd."):
            emd_kw[key.split(".", 1)[1]] = num
        elif key.startswith("trainer."):
            trainer_kw[key.split(".", 1)[1]] = num
        else:
            raise ConfigError(f"unknown config key {key!r}")

    try:
        cfg = replace(
            cfg,
            sort=replace(cfg.sort, **sort_kw),
            emd=replace(cfg.emd, **emd_kw),
            trainer=replace(cfg.trainer, **trainer_kw),
            **top,
        )
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    _validate(cfg)
    return cfg


def _validate(cfg: RunConfig):
    if cfg.gamma <= 0:
        raise ConfigError(f"key 'gamma': must be > 0, got {cfg.gamma}")
    for key in ("lambda_local", "lambda_global", "lambda_track"):
        if getattr(cfg, key) < 0:
            raise ConfigError(f"key {key!r}: must be >= 0, got {getattr(cfg, key)}")
    if not (0 < cfg.iou_match_threshold < 1):
        raise ConfigError(
            f"key 'iou_match_threshold': must be in (0,1), got {cfg.iou_match_threshold}"
        )
    if not (0 < cfg.sort.iou_gate < 1):
        raise ConfigError(f"key 'sort.iou_gate': must be in (0,1), got {cfg.sort.iou_gate}")
    if cfg.sort.max_age < 1 or cfg.sort.min_hits < 1:
        raise ConfigError("keys 'sort.max_age'/'sort.min_hits': must be >= 1")
    if cfg.emd.gate_distance <= 0:
        raise ConfigError(f"key 'emd.gate_distance': must be > 0, got {cfg.emd.gate_distance}")
    if cfg.trainer.epochs < 1 or cfg.trainer.batch_size < 1:
        raise ConfigError("keys 'trainer.epochs'/'trainer.batch_size': must be >= 1")
    if cfg.trainer.learning_rate <= 0:
        raise ConfigError("key 'trainer.learning_rate': must be > 0")
