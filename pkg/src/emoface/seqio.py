"""Expression sequence data model, binary clip container, synthetic corpus.

A clip is a ``(T, D)`` float32 array of per-frame expression coefficients.
The channel map splits the ``D`` channels into three groups:

* ``upper_face``: slowly oscillating emotion-carrying channels,
* ``lip``: jaw/lip channels driven by spoken content,
* ``blink``: a single pulse channel.

Clips travel in a small binary container (magic ``EMDF``) so they can be
handed between CLI stages and regenerated byte-identically from a seed.
The synthetic corpus generator writes, for every sample, the exact additive
decomposition it used (content + style + blink + noise residual), which is
what turns the usual perceptual metrics into checkable ground-truth analogs.
"""

from __future__ import annotations

import dataclasses
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DecodeError

MAGIC = b"EMDF"
FORMAT_VERSION = 1
# magic (4s) | format version (u16) | header length (u32), little-endian
_PREFIX = struct.Struct("<4sHI")

DEFAULT_FPS = 25.0
DEFAULT_DIM = 53  # 50 upper-face channels + 2 lip channels + 1 blink channel
DEFAULT_FRAMES = 64
DEFAULT_CLASSES = 8

PHONEME_COUNT = 16
PHONEME_EMBED_DIM = 16
PROSODY_DIM = 8
AUDIO_DIM = PHONEME_EMBED_DIM + PROSODY_DIM
AUDIO_FRAMES = 48
TEXT_FILLER_TOKENS = 16  # class token for class k is TEXT_FILLER_TOKENS + k
TEXT_LEN = 10

BLINK_RATE_HZ = 0.35
BLINK_PULSE_FRAMES = 5
NOISE_SIGMA = 0.02
# truncating the generator noise keeps |residual| surely below 5 sigma
NOISE_CLIP_SIGMAS = 4.0
STYLE_MIN_DISTANCE = 0.1
PARTS = ("content", "style", "blink", "residual")


def default_channel_map(dim: int = DEFAULT_DIM) -> dict[str, tuple[int, ...]]:
    """Standard channel layout: upper-face block, two lip channels, blink last."""
    if dim < 4:
        raise ValueError(f"need at least 4 channels, got {dim}")
    return {
        "upper_face": tuple(range(dim - 3)),
        "lip": (dim - 3, dim - 2),
        "blink": (dim - 1,),
    }


def derive_rng(*key: int) -> np.random.Generator:
    """Deterministic generator for a composite integer key.

    Every randomized stage of the pipeline derives its stream this way, so a
    (seed, index) pair always maps to the same sample no matter the order or
    subset in which samples are produced.
    """
    entropy = [int(k) & 0x7FFFFFFFFFFFFFFF for k in key]
    return np.random.default_rng(np.random.SeedSequence(entropy))


@dataclass
class ExpressionSequence:
    """One motion clip: frames ``(T, D)`` float32 plus channel/identity info."""

    frames: np.ndarray
    fps: float
    channel_map: dict[str, tuple[int, ...]]
    subject_id: str
    emotion_class: int | None = None

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        self.channel_map = {k: tuple(int(i) for i in v) for k, v in self.channel_map.items()}
        self.validate()

    def validate(self) -> None:
        if self.frames.ndim != 2:
            raise ValueError(f"frames must be (T, D), got shape {self.frames.shape}")
        if self.fps <= 0:
            raise ValueError(f"fps must be positive, got {self.fps}")
        used = sorted(i for idx in self.channel_map.values() for i in idx)
        if used != list(range(self.dim)):
            raise ValueError("channel_map must cover every channel exactly once")

    @property
    def num_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def dim(self) -> int:
        return self.frames.shape[1]

    @property
    def duration(self) -> float:
        return self.num_frames / self.fps

    def channels(self, group: str) -> np.ndarray:
        """View of the frames restricted to one channel group."""
        return self.frames[:, list(self.channel_map[group])]


@dataclass
class ContentTrack:
    """Frame-aligned spoken-content features with their phoneme ids."""

    phoneme_ids: np.ndarray
    features: np.ndarray
    fps: float

    def __post_init__(self):
        self.phoneme_ids = np.ascontiguousarray(self.phoneme_ids, dtype=np.int64)
        self.features = np.ascontiguousarray(self.features, dtype=np.float32)
        if self.features.ndim != 2 or self.phoneme_ids.shape != (self.features.shape[0],):
            raise ValueError("features must be (T, F) with one phoneme id per frame")

    @property
    def num_frames(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]


def _write_container(path: Path, header: dict, payload: np.ndarray) -> None:
    payload = np.ascontiguousarray(payload, dtype="<f4")
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_PREFIX.pack(MAGIC, FORMAT_VERSION, len(header_bytes)))
        fh.write(header_bytes)
        fh.write(payload.tobytes())


def _read_container(path: Path) -> tuple[dict, np.ndarray]:
    blob = Path(path).read_bytes()
    if len(blob) < _PREFIX.size:
        raise DecodeError("file shorter than the fixed prefix", len(blob))
    magic, version, header_len = _PREFIX.unpack_from(blob, 0)
    if magic != MAGIC:
        raise DecodeError(f"bad magic {magic!r}", 0)
    if version != FORMAT_VERSION:
        raise DecodeError(f"unsupported format version {version}", 4)
    header_end = _PREFIX.size + header_len
    if len(blob) < header_end:
        raise DecodeError("declared header length runs past end of file", _PREFIX.size)
    try:
        header = json.loads(blob[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DecodeError(f"header is not valid UTF-8 JSON: {exc}", _PREFIX.size) from exc
    for key in ("fps", "T", "D"):
        if key not in header:
            raise DecodeError(f"header missing required field {key!r}", _PREFIX.size)
    frames, dim = int(header["T"]), int(header["D"])
    expected = frames * dim * 4
    if len(blob) - header_end != expected:
        raise DecodeError(
            f"payload of {len(blob) - header_end} bytes does not match "
            f"T*D*4 = {expected}",
            header_end,
        )
    payload = np.frombuffer(blob[header_end:], dtype="<f4").reshape(frames, dim).copy()
    return header, payload


def write_sequence(seq: ExpressionSequence, path: str | Path) -> None:
    """Serialize a motion clip to the binary container."""
    seq.validate()
    header = {
        "kind": "expression",
        "fps": seq.fps,
        "T": seq.num_frames,
        "D": seq.dim,
        "channel_map": {k: list(v) for k, v in seq.channel_map.items()},
        "subject_id": seq.subject_id,
        "emotion_class": seq.emotion_class,
    }
    _write_container(Path(path), header, seq.frames)


def read_sequence(path: str | Path) -> ExpressionSequence:
    """Load a motion clip, raising :class:`DecodeError` on any malformation."""
    header, payload = _read_container(Path(path))
    if header.get("kind", "expression") != "expression":
        raise DecodeError(f"expected an expression clip, got kind={header.get('kind')!r}", _PREFIX.size)
    if "channel_map" not in header or "subject_id" not in header:
        raise DecodeError("expression header missing channel_map/subject_id", _PREFIX.size)
    emotion = header.get("emotion_class")
    return ExpressionSequence(
        frames=payload,
        fps=float(header["fps"]),
        channel_map={k: tuple(v) for k, v in header["channel_map"].items()},
        subject_id=str(header["subject_id"]),
        emotion_class=None if emotion is None else int(emotion),
    )


def write_track(track: ContentTrack, path: str | Path, kind: str) -> None:
    """Serialize a feature track (``kind`` is ``content`` or ``audio``)."""
    if kind not in ("content", "audio"):
        raise ValueError(f"kind must be 'content' or 'audio', got {kind!r}")
    header = {
        "kind": kind,
        "fps": track.fps,
        "T": track.num_frames,
        "D": track.dim,
        "channel_map": None,
        "phoneme_ids": [int(p) for p in track.phoneme_ids],
    }
    _write_container(Path(path), header, track.features)


def read_track(path: str | Path, kind: str | None = None) -> ContentTrack:
    header, payload = _read_container(Path(path))
    got = header.get("kind")
    if got not in ("content", "audio") or (kind is not None and got != kind):
        raise DecodeError(f"expected a {kind or 'feature'} track, got kind={got!r}", _PREFIX.size)
    ids = header.get("phoneme_ids")
    if not isinstance(ids, list) or len(ids) != payload.shape[0]:
        raise DecodeError("feature track needs one phoneme id per frame", _PREFIX.size)
    return ContentTrack(phoneme_ids=np.array(ids, dtype=np.int64), features=payload, fps=float(header["fps"]))


@dataclass
class ClassStyle:
    """Generator parameters of one emotion class."""

    offset: np.ndarray      # per-upper-face-channel baseline
    amplitude: float        # oscillation amplitude, shared across channels
    frequency: float        # oscillation frequency in Hz
    prosody: np.ndarray     # audio-side prosody vector

    def as_vector(self) -> np.ndarray:
        return np.concatenate([self.offset, [self.amplitude, self.frequency], self.prosody])


@dataclass
class SampleRecord:
    index: int
    motion_path: str
    content_path: str
    audio_path: str
    parts_path: str
    subject_id: str
    emotion_class: int
    split: str
    text_tokens: list[int]
    blink_frames: list[int]
    style_phase: float


@dataclass
class PromptBundle:
    """The four aligned emotion carriers of one sample."""

    motion: ExpressionSequence
    audio: ContentTrack
    text_tokens: np.ndarray
    label: int


@dataclass
class CorpusManifest:
    seed: int
    num_classes: int
    n_samples: int
    frames_per_clip: int
    fps: float
    dim: int
    channel_map: dict[str, tuple[int, ...]]
    phoneme_count: int
    audio_dim: int
    audio_frames: int
    text_vocab: int
    text_len: int
    noise_sigma: float
    lip_table: np.ndarray
    phoneme_embed: np.ndarray
    class_styles: list[ClassStyle]
    subjects: list[str]
    samples: list[SampleRecord]
    root: Path | None = None

    def records(self, split: str | None = None) -> list[SampleRecord]:
        if split is None:
            return list(self.samples)
        if split not in ("train", "val", "test"):
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.samples if r.split == split]

    def _resolve(self, rel: str) -> Path:
        if self.root is None:
            raise ValueError("manifest has no root directory; load it from disk or set .root")
        return self.root / rel

    def load_motion(self, rec: SampleRecord) -> ExpressionSequence:
        return read_sequence(self._resolve(rec.motion_path))

    def load_content(self, rec: SampleRecord) -> ContentTrack:
        return read_track(self._resolve(rec.content_path), "content")

    def load_audio(self, rec: SampleRecord) -> ContentTrack:
        return read_track(self._resolve(rec.audio_path), "audio")

    def load_parts(self, rec: SampleRecord) -> dict[str, np.ndarray]:
        stack = np.load(self._resolve(rec.parts_path))
        return {name: stack[i] for i, name in enumerate(PARTS)}

    def bundle(self, rec: SampleRecord) -> PromptBundle:
        return PromptBundle(
            motion=self.load_motion(rec),
            audio=self.load_audio(rec),
            text_tokens=np.array(rec.text_tokens, dtype=np.int64),
            label=rec.emotion_class,
        )

    def to_json(self) -> dict:
        out = {
            "seed": self.seed,
            "num_classes": self.num_classes,
            "n_samples": self.n_samples,
            "frames_per_clip": self.frames_per_clip,
            "fps": self.fps,
            "dim": self.dim,
            "channel_map": {k: list(v) for k, v in self.channel_map.items()},
            "phoneme_count": self.phoneme_count,
            "audio_dim": self.audio_dim,
            "audio_frames": self.audio_frames,
            "text_vocab": self.text_vocab,
            "text_len": self.text_len,
            "noise_sigma": self.noise_sigma,
            "lip_table": self.lip_table.tolist(),
            "phoneme_embed": self.phoneme_embed.tolist(),
            "class_styles": [
                {
                    "offset": s.offset.tolist(),
                    "amplitude": s.amplitude,
                    "frequency": s.frequency,
                    "prosody": s.prosody.tolist(),
                }
                for s in self.class_styles
            ],
            "subjects": list(self.subjects),
            "samples": [dataclasses.asdict(r) for r in self.samples],
        }
        return out

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), sort_keys=True, indent=1))

    @classmethod
    def from_json(cls, data: dict, root: Path | None = None) -> "CorpusManifest":
        return cls(
            seed=data["seed"],
            num_classes=data["num_classes"],
            n_samples=data["n_samples"],
            frames_per_clip=data["frames_per_clip"],
            fps=data["fps"],
            dim=data["dim"],
            channel_map={k: tuple(v) for k, v in data["channel_map"].items()},
            phoneme_count=data["phoneme_count"],
            audio_dim=data["audio_dim"],
            audio_frames=data["audio_frames"],
            text_vocab=data["text_vocab"],
            text_len=data["text_len"],
            noise_sigma=data["noise_sigma"],
            lip_table=np.array(data["lip_table"], dtype=np.float64),
            phoneme_embed=np.array(data["phoneme_embed"], dtype=np.float64),
            class_styles=[
                ClassStyle(
                    offset=np.array(s["offset"], dtype=np.float64),
                    amplitude=s["amplitude"],
                    frequency=s["frequency"],
                    prosody=np.array(s["prosody"], dtype=np.float64),
                )
                for s in data["class_styles"]
            ],
            subjects=list(data["subjects"]),
            samples=[SampleRecord(**r) for r in data["samples"]],
            root=root,
        )


def load_manifest(path: str | Path) -> CorpusManifest:
    path = Path(path)
    return CorpusManifest.from_json(json.loads(path.read_text()), root=path.parent)


def _phoneme_run_sequence(rng: np.random.Generator, frames: int, phoneme_count: int) -> np.ndarray:
    """Piecewise-constant phoneme ids with run lengths of 3 to 8 frames."""
    ids: list[int] = []
    while len(ids) < frames:
        ids.extend([int(rng.integers(phoneme_count))] * int(rng.integers(3, 9)))
    return np.array(ids[:frames], dtype=np.int64)


def _smooth3(x: np.ndarray) -> np.ndarray:
    """3-frame moving average along axis 0 with edge replication."""
    padded = np.concatenate([x[:1], x, x[-1:]], axis=0)
    return (padded[:-2] + padded[1:-1] + padded[2:]) / 3.0


def _blink_frames(rng: np.random.Generator, frames: int, fps: float) -> list[int]:
    """Poisson blink onsets, dropping any onset within a pulse of the last kept one."""
    duration = frames / fps
    onsets: list[int] = []
    t = rng.exponential(1.0 / BLINK_RATE_HZ)
    while t < duration:
        f = int(t * fps)
        if f < frames and (not onsets or f - onsets[-1] >= BLINK_PULSE_FRAMES):
            onsets.append(f)
        t += rng.exponential(1.0 / BLINK_RATE_HZ)
    return onsets


def count_rising_edges(x: np.ndarray, threshold: float = 0.5) -> int:
    """Number of upward crossings of ``threshold``, counting an initial high frame."""
    above = np.asarray(x) > threshold
    edges = int(above[0]) + int(np.count_nonzero(above[1:] & ~above[:-1]))
    return edges


def _synthesize_sample(
    rng: np.random.Generator,
    manifest: CorpusManifest,
    emotion_class: int,
) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray, list[int], float]:
    """Build one clip; returns frames, parts, phoneme ids, blink onsets, phase."""
    frames_n, dim = manifest.frames_per_clip, manifest.dim
    cmap = manifest.channel_map
    upper = list(cmap["upper_face"])
    lip = list(cmap["lip"])
    blink_ch = cmap["blink"][0]
    style = manifest.class_styles[emotion_class]

    phon = _phoneme_run_sequence(rng, frames_n, manifest.phoneme_count)
    content = np.zeros((frames_n, dim))
    content[:, lip] = _smooth3(manifest.lip_table[phon])

    phase = float(rng.uniform(0.0, 2.0 * np.pi))
    tt = np.arange(frames_n) / manifest.fps
    wave = np.sin(2.0 * np.pi * style.frequency * tt + phase)
    style_part = np.zeros((frames_n, dim))
    style_part[:, upper] = style.offset[None, :] + style.amplitude * wave[:, None]

    blink_part = np.zeros((frames_n, dim))
    onsets = _blink_frames(rng, frames_n, manifest.fps)
    for f in onsets:
        blink_part[f : f + BLINK_PULSE_FRAMES, blink_ch] = 1.0

    sigma = manifest.noise_sigma
    noise = rng.normal(0.0, sigma, size=(frames_n, dim))
    np.clip(noise, -NOISE_CLIP_SIGMAS * sigma, NOISE_CLIP_SIGMAS * sigma, out=noise)

    frames32 = (content + style_part + blink_part + noise).astype(np.float32)
    parts = {
        "content": content.astype(np.float32),
        "style": style_part.astype(np.float32),
        "blink": blink_part.astype(np.float32),
    }
    # the residual is defined in float32 arithmetic so the decomposition is exact
    parts["residual"] = frames32 - (parts["content"] + parts["style"] + parts["blink"])
    return frames32, parts, phon, onsets, phase


def _draw_class_styles(rng: np.random.Generator, num_classes: int, n_upper: int) -> list[ClassStyle]:
    for _ in range(100):
        styles = [
            ClassStyle(
                offset=rng.normal(0.0, 0.4, size=n_upper),
                amplitude=float(rng.uniform(0.15, 0.35)),
                frequency=float(rng.uniform(0.8, 3.0)),
                prosody=rng.normal(0.0, 1.0, size=PROSODY_DIM),
            )
            for _ in range(num_classes)
        ]
        vecs = [s.as_vector() for s in styles]
        dmin = min(
            float(np.linalg.norm(vecs[a] - vecs[b]))
            for a in range(num_classes)
            for b in range(a + 1, num_classes)
        )
        if dmin >= STYLE_MIN_DISTANCE:
            return styles
    raise RuntimeError("could not draw well-separated class styles")


def generate_corpus(
    out_dir: str | Path,
    seed: int = 1,
    num_classes: int = DEFAULT_CLASSES,
    n_samples: int = 512,
    frames_per_clip: int = DEFAULT_FRAMES,
    fps: float = DEFAULT_FPS,
    dim: int = DEFAULT_DIM,
    n_subjects: int = 4,
) -> CorpusManifest:
    """Generate the synthetic oracle corpus under ``out_dir``.

    Regeneration with identical arguments is byte-identical: every random
    choice flows from ``derive_rng(seed, ...)`` streams, and all payloads are
    little-endian float32.
    """
    if num_classes < 2:
        raise ValueError(f"need at least 2 emotion classes, got {num_classes}")
    if n_samples < num_classes:
        raise ValueError(f"need at least one sample per class, got {n_samples} for {num_classes}")
    if frames_per_clip < 32:
        raise ValueError(f"clips shorter than 32 frames are not supported, got {frames_per_clip}")
    if dim < 4 or fps <= 0:
        raise ValueError("dim must be >= 4 and fps positive")

    out_dir = Path(out_dir)
    (out_dir / "samples").mkdir(parents=True, exist_ok=True)

    master = derive_rng(seed)
    cmap = default_channel_map(dim)
    n_upper = len(cmap["upper_face"])

    manifest = CorpusManifest(
        seed=seed,
        num_classes=num_classes,
        n_samples=n_samples,
        frames_per_clip=frames_per_clip,
        fps=fps,
        dim=dim,
        channel_map=cmap,
        phoneme_count=PHONEME_COUNT,
        audio_dim=AUDIO_DIM,
        audio_frames=AUDIO_FRAMES,
        text_vocab=TEXT_FILLER_TOKENS + num_classes,
        text_len=TEXT_LEN,
        noise_sigma=NOISE_SIGMA,
        lip_table=master.uniform(-1.0, 1.0, size=(PHONEME_COUNT, len(cmap["lip"]))),
        phoneme_embed=master.normal(0.0, 1.0, size=(PHONEME_COUNT, PHONEME_EMBED_DIM)),
        class_styles=_draw_class_styles(master, num_classes, n_upper),
        subjects=[f"subj{j:02d}" for j in range(n_subjects)],
        samples=[],
        root=out_dir,
    )

    # round-robin class assignment, stratified 70/15/15 split inside each class
    classes = [i % num_classes for i in range(n_samples)]
    split_of = {}
    for k in range(num_classes):
        members = [i for i in range(n_samples) if classes[i] == k]
        members = list(master.permutation(members))
        n_test = max(1, round(0.15 * len(members)))
        n_val = max(1, round(0.15 * len(members)))
        for j, i in enumerate(members):
            split_of[i] = "test" if j < n_test else ("val" if j < n_test + n_val else "train")
    subject_of = master.integers(0, n_subjects, size=n_samples)

    for i in range(n_samples):
        rng = derive_rng(seed, i)
        k = classes[i]
        frames32, parts, phon, onsets, phase = _synthesize_sample(rng, manifest, k)

        # frame-aligned content features: phoneme embedding + zero prosody + bounded jitter
        feats = np.concatenate(
            [manifest.phoneme_embed[phon], np.zeros((frames_per_clip, PROSODY_DIM))], axis=1
        )
        feats = feats + rng.uniform(-0.01, 0.01, size=feats.shape)
        content_track = ContentTrack(phoneme_ids=phon, features=feats.astype(np.float32), fps=fps)

        # emotional audio: its own phoneme stream + the class prosody vector + noise
        phon_a = _phoneme_run_sequence(rng, AUDIO_FRAMES, manifest.phoneme_count)
        prosody = manifest.class_styles[k].prosody
        audio_feats = np.concatenate(
            [manifest.phoneme_embed[phon_a], np.tile(prosody, (AUDIO_FRAMES, 1))], axis=1
        )
        audio_feats = audio_feats + rng.normal(0.0, 0.05, size=audio_feats.shape)
        audio_track = ContentTrack(phoneme_ids=phon_a, features=audio_feats.astype(np.float32), fps=fps)

        # templated text: filler tokens with one class token at a random interior slot
        tokens = rng.integers(0, TEXT_FILLER_TOKENS, size=TEXT_LEN)
        tokens[int(rng.integers(1, TEXT_LEN - 1))] = TEXT_FILLER_TOKENS + k

        subject = manifest.subjects[int(subject_of[i])]
        seq = ExpressionSequence(
            frames=frames32, fps=fps, channel_map=cmap, subject_id=subject, emotion_class=k
        )
        rec = SampleRecord(
            index=i,
            motion_path=f"samples/s{i:05d}.emdf",
            content_path=f"samples/s{i:05d}.content.emdf",
            audio_path=f"samples/s{i:05d}.audio.emdf",
            parts_path=f"samples/s{i:05d}.parts.npy",
            subject_id=subject,
            emotion_class=k,
            split=split_of[i],
            text_tokens=[int(t) for t in tokens],
            blink_frames=onsets,
            style_phase=phase,
        )
        write_sequence(seq, out_dir / rec.motion_path)
        write_track(content_track, out_dir / rec.content_path, "content")
        write_track(audio_track, out_dir / rec.audio_path, "audio")
        np.save(out_dir / rec.parts_path, np.stack([parts[p] for p in PARTS]))
        manifest.samples.append(rec)

    manifest.save(out_dir / "manifest.json")
    return manifest
