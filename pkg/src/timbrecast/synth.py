"""Synthetic instrument corpus with exact timbre and structure labels.

Instruments are additive ADSR synths, so the timbre class of every clip
is known by construction. Clips are grouped into tracks: all clips in a
group share one set of timbre parameters and differ only in their notes,
which is what lets training pair a target clip with a same-timbre,
different-structure sibling.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensorio

__all__ = [
    "TimbreParams",
    "Note",
    "NoteList",
    "AudioClip",
    "DatasetConfig",
    "DatasetManifest",
    "GroupEntry",
    "ClipEntry",
    "ConfigError",
    "midi_to_hz",
    "hz_to_midi",
    "synth_clip",
    "make_dataset",
    "load_manifest",
    "load_clip",
    "balanced_weights",
    "write_notes_csv",
    "read_notes_csv",
]

PEAK_LEVEL = 0.95
SUSTAIN_LEVEL = 0.75


class ConfigError(ValueError):
    pass


def midi_to_hz(pitch: float) -> float:
    return 440.0 * 2.0 ** ((pitch - 69) / 12.0)


def hz_to_midi(freq: float) -> float:
    return 69.0 + 12.0 * math.log2(freq / 440.0)


@dataclass(frozen=True)
class TimbreParams:
    harmonic_decay: float
    n_harmonics: int
    attack_s: float
    decay_s: float
    release_s: float
    vibrato_depth: float  # semitones
    vibrato_rate: float  # Hz
    class_id: int

    def __post_init__(self):
        if not 0.0 < self.harmonic_decay < 1.0:
            raise ConfigError(f"harmonic_decay must be in (0,1), got {self.harmonic_decay}")
        if self.n_harmonics < 1:
            raise ConfigError(f"n_harmonics must be >= 1, got {self.n_harmonics}")
        for name in ("attack_s", "decay_s", "release_s", "vibrato_depth", "vibrato_rate"):
            value = getattr(self, name)
            if not math.isfinite(value) or value < 0:
                raise ConfigError(f"{name} must be finite and non-negative, got {value}")


@dataclass(frozen=True, order=True)
class Note:
    onset: float
    duration: float
    pitch: int
    velocity: float


class NoteList:
    """Ordered note events: non-decreasing onsets, positive durations."""

    def __init__(self, events=()):
        events = tuple(
            e if isinstance(e, Note) else Note(*e) for e in events
        )
        last = -math.inf
        for e in events:
            if e.onset < last:
                raise ValueError(f"onsets must be non-decreasing, got {e.onset} after {last}")
            if e.duration <= 0:
                raise ValueError(f"durations must be positive, got {e.duration}")
            if not 0 <= e.pitch <= 127:
                raise ValueError(f"pitch {e.pitch} outside MIDI range")
            if not 0.0 < e.velocity <= 1.0:
                raise ValueError(f"velocity must be in (0,1], got {e.velocity}")
            last = e.onset
        self.events = events

    def __len__(self):
        return len(self.events)

    def __iter__(self):
        return iter(self.events)

    def __getitem__(self, idx):
        return self.events[idx]

    def __eq__(self, other):
        return isinstance(other, NoteList) and self.events == other.events

    def __repr__(self):
        return f"NoteList({len(self.events)} events)"

    def end_time(self) -> float:
        return max((e.onset + e.duration for e in self.events), default=0.0)


@dataclass
class AudioClip:
    samples: np.ndarray
    sample_rate: int
    timbre: TimbreParams | None = None
    notes: NoteList | None = None
    track_id: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float32)
        if self.sample_rate <= 0:
            raise ConfigError(f"sample_rate must be positive, got {self.sample_rate}")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.sample_rate

    def rms(self) -> float:
        return float(np.sqrt(np.mean(np.square(self.samples)))) if len(self.samples) else 0.0


def _adsr(n: int, sr: int, attack_s: float, decay_s: float, release_n: int) -> np.ndarray:
    """Envelope over a note of n sounding samples plus a release tail."""
    env = np.full(n + release_n, SUSTAIN_LEVEL, dtype=np.float64)
    a = min(int(round(attack_s * sr)), n)
    d = min(int(round(decay_s * sr)), n - a)
    if a > 0:
        env[:a] = np.linspace(0.0, 1.0, a, endpoint=False)
    if d > 0:
        env[a : a + d] = np.linspace(1.0, SUSTAIN_LEVEL, d, endpoint=False)
    elif a < n and a > 0:
        pass  # jump straight to sustain
    if release_n > 0:
        env[n:] = env[n - 1 if n > 0 else 0] * np.linspace(1.0, 0.0, release_n, endpoint=False)
    return env


def synth_clip(
    timbre: TimbreParams,
    notes: NoteList,
    sample_rate: int,
    duration: float,
) -> AudioClip:
    """Additive rendering of a note list with one instrument.

    Each note stacks harmonics h = 1..n with amplitude decay^h under an
    ADSR envelope scaled by velocity; harmonics whose instantaneous
    frequency would cross Nyquist are dropped rather than aliased. The
    mix is peak-normalized. An empty note list yields silence.
    """
    if duration <= 0:
        raise ConfigError(f"duration must be positive, got {duration}")
    n_total = int(round(duration * sample_rate))
    out = np.zeros(n_total, dtype=np.float64)
    nyquist = sample_rate / 2.0
    for note in notes:
        if note.onset >= duration:
            raise ConfigError(f"note onset {note.onset} beyond clip duration {duration}")
        start = int(round(note.onset * sample_rate))
        sounding = int(round(note.duration * sample_rate))
        release_n = int(round(timbre.release_s * sample_rate))
        span = min(sounding + release_n, n_total - start)
        if span <= 0:
            continue
        f0 = midi_to_hz(note.pitch)
        t = np.arange(span) / sample_rate
        if timbre.vibrato_depth > 0 and timbre.vibrato_rate > 0:
            factor = 2.0 ** (
                timbre.vibrato_depth * np.sin(2 * np.pi * timbre.vibrato_rate * t) / 12.0
            )
        else:
            factor = np.ones(span)
        phase = 2 * np.pi * f0 * np.cumsum(factor) / sample_rate
        f_max = f0 * factor.max()
        env = _adsr(min(sounding, span), sample_rate, timbre.attack_s, timbre.decay_s,
                    max(0, span - sounding))
        wave = np.zeros(span)
        for h in range(1, timbre.n_harmonics + 1):
            if h * f_max >= nyquist:
                break
            wave += timbre.harmonic_decay**h * np.sin(h * phase)
        out[start : start + span] += note.velocity * env[:span] * wave
    peak = np.abs(out).max()
    if peak > 0:
        out *= PEAK_LEVEL / peak
    return AudioClip(out.astype(np.float32), sample_rate, timbre=timbre, notes=notes)


# ---------------------------------------------------------------------------
# corpus generation
# ---------------------------------------------------------------------------


@dataclass
class DatasetConfig:
    n_classes: int = 4
    groups_per_class: int = 16
    clips_per_group: int = 4
    sample_rate: int = 8000
    duration_s: float = 2.0
    seed: int = 0
    pitch_lo: int = 48
    pitch_hi: int = 72
    min_gap_s: float = 0.3
    notes_min: int = 3
    notes_max: int = 5

    def validate(self):
        if self.n_classes < 2:
            raise ConfigError(f"need >= 2 instrument classes, got {self.n_classes}")
        if self.clips_per_group < 2:
            raise ConfigError(f"need >= 2 clips per group, got {self.clips_per_group}")
        if self.groups_per_class < 1:
            raise ConfigError("need >= 1 group per class")
        if self.pitch_lo >= self.pitch_hi:
            raise ConfigError("pitch_lo must be below pitch_hi")


# class archetypes: widely separated spectral envelopes and envelopes
_ARCHETYPES = [
    dict(harmonic_decay=0.30, n_harmonics=9, attack_s=0.004, decay_s=0.10,
         release_s=0.02, vibrato_depth=0.0, vibrato_rate=0.0),
    dict(harmonic_decay=0.55, n_harmonics=7, attack_s=0.010, decay_s=0.16,
         release_s=0.04, vibrato_depth=0.25, vibrato_rate=5.5),
    dict(harmonic_decay=0.78, n_harmonics=6, attack_s=0.020, decay_s=0.25,
         release_s=0.06, vibrato_depth=0.0, vibrato_rate=0.0),
    dict(harmonic_decay=0.93, n_harmonics=3, attack_s=0.030, decay_s=0.30,
         release_s=0.08, vibrato_depth=0.35, vibrato_rate=4.0),
]


def class_archetype(class_id: int) -> TimbreParams:
    base = dict(_ARCHETYPES[class_id % len(_ARCHETYPES)])
    if class_id >= len(_ARCHETYPES):
        base["n_harmonics"] = max(1, base["n_harmonics"] - 2 * (class_id // len(_ARCHETYPES)))
    return TimbreParams(class_id=class_id, **base)


def _jitter_timbre(base: TimbreParams, rng: np.random.Generator) -> TimbreParams:
    hd = float(np.clip(base.harmonic_decay * (1 + rng.uniform(-0.03, 0.03)), 0.05, 0.99))
    return replace(
        base,
        harmonic_decay=hd,
        attack_s=base.attack_s * (1 + float(rng.uniform(-0.2, 0.2))),
        decay_s=base.decay_s * (1 + float(rng.uniform(-0.15, 0.15))),
    )


def random_notes(config: DatasetConfig, rng: np.random.Generator) -> NoteList:
    """Monophonic notes with inter-onset gaps of at least min_gap_s."""
    tail = 0.35
    usable = config.duration_s - 0.05 - tail
    max_notes = max(1, int(usable / config.min_gap_s))
    n = int(rng.integers(config.notes_min, config.notes_max + 1))
    n = min(n, max_notes)
    slot = usable / n
    events = []
    for i in range(n):
        onset = 0.05 + i * slot + float(rng.uniform(0.0, max(slot - config.min_gap_s, 0.0)))
        duration = float(rng.uniform(0.16, min(0.28, config.min_gap_s - 0.02)))
        pitch = int(rng.integers(config.pitch_lo, config.pitch_hi + 1))
        velocity = float(np.round(rng.uniform(0.55, 1.0), 4))
        events.append(Note(round(onset, 4), round(duration, 4), pitch, velocity))
    return NoteList(events)


@dataclass
class ClipEntry:
    index: int
    clip_path: str
    notes_path: str


@dataclass
class GroupEntry:
    track_id: str
    class_id: int
    timbre: TimbreParams
    clips: list[ClipEntry] = field(default_factory=list)


@dataclass
class DatasetManifest:
    root: Path
    sample_rate: int
    duration_s: float
    groups: list[GroupEntry]

    def n_clips(self) -> int:
        return sum(len(g.clips) for g in self.groups)

    def class_sizes(self) -> dict[int, int]:
        sizes: dict[int, int] = {}
        for g in self.groups:
            sizes[g.class_id] = sizes.get(g.class_id, 0) + len(g.clips)
        return sizes

    def save(self, path: Path, config_text: str = "") -> None:
        lines = ["# timbrecast dataset manifest v1"]
        for cfg_line in config_text.splitlines():
            lines.append(f"# config: {cfg_line}")
        lines.append(f"sample_rate = {self.sample_rate}")
        lines.append(f"duration_s = {self.duration_s!r}")
        lines.append(f"n_groups = {len(self.groups)}")
        lines.append(f"n_clips = {self.n_clips()}")
        for g in self.groups:
            lines.append(f"[group {g.track_id} class {g.class_id}]")
            t = g.timbre
            lines.append(
                "timbre = "
                f"harmonic_decay={t.harmonic_decay!r} n_harmonics={t.n_harmonics} "
                f"attack_s={t.attack_s!r} decay_s={t.decay_s!r} release_s={t.release_s!r} "
                f"vibrato_depth={t.vibrato_depth!r} vibrato_rate={t.vibrato_rate!r}"
            )
            for c in g.clips:
                lines.append(f"clip {c.index} {c.clip_path} {c.notes_path}")
        Path(path).write_text("\n".join(lines) + "\n")


def load_manifest(path) -> DatasetManifest:
    path = Path(path)
    groups: list[GroupEntry] = []
    sample_rate = 0
    duration_s = 0.0
    current: GroupEntry | None = None
    for raw in path.read_text().splitlines():
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if line.startswith("[group "):
            parts = line.strip("[]").split()
            current = GroupEntry(track_id=parts[1], class_id=int(parts[3]), timbre=None)
            groups.append(current)
        elif line.startswith("timbre = "):
            fields = dict(kv.split("=") for kv in line[len("timbre = "):].split())
            current.timbre = TimbreParams(
                harmonic_decay=float(fields["harmonic_decay"]),
                n_harmonics=int(fields["n_harmonics"]),
                attack_s=float(fields["attack_s"]),
                decay_s=float(fields["decay_s"]),
                release_s=float(fields["release_s"]),
                vibrato_depth=float(fields["vibrato_depth"]),
                vibrato_rate=float(fields["vibrato_rate"]),
                class_id=current.class_id,
            )
        elif line.startswith("clip "):
            _, idx, clip_path, notes_path = line.split()
            current.clips.append(ClipEntry(int(idx), clip_path, notes_path))
        elif " = " in line:
            key, value = [s.strip() for s in line.split("=", 1)]
            if key == "sample_rate":
                sample_rate = int(value)
            elif key == "duration_s":
                duration_s = float(value)
    return DatasetManifest(path.parent, sample_rate, duration_s, groups)


def load_clip(manifest: DatasetManifest, group: GroupEntry, entry: ClipEntry) -> AudioClip:
    samples = tensorio.read_tensor(manifest.root / entry.clip_path)
    notes = read_notes_csv(manifest.root / entry.notes_path)
    return AudioClip(samples, manifest.sample_rate, timbre=group.timbre,
                     notes=notes, track_id=group.track_id)


def make_dataset(config: DatasetConfig, out_dir) -> DatasetManifest:
    """Materialize the corpus on disk, deterministically from the seed.

    Every clip draws from its own (seed, clip_index) random stream, so
    generation order cannot change the bytes.
    """
    config.validate()
    out_dir = Path(out_dir)
    (out_dir / "clips").mkdir(parents=True, exist_ok=True)
    (out_dir / "notes").mkdir(parents=True, exist_ok=True)
    groups = []
    clip_index = 0
    for class_id in range(config.n_classes):
        archetype = class_archetype(class_id)
        for g in range(config.groups_per_class):
            group_rng = np.random.default_rng([config.seed, class_id, g])
            timbre = _jitter_timbre(archetype, group_rng)
            track_id = f"g{class_id:02d}_{g:03d}"
            group = GroupEntry(track_id=track_id, class_id=class_id, timbre=timbre)
            group_notes: list[NoteList] = []
            for _ in range(config.clips_per_group):
                rng = np.random.default_rng([config.seed, clip_index])
                while True:
                    notes = random_notes(config, rng)
                    if notes not in group_notes:
                        group_notes.append(notes)
                        break
                clip = synth_clip(timbre, notes, config.sample_rate, config.duration_s)
                clip_rel = f"clips/clip_{clip_index:05d}.tnsr"
                notes_rel = f"notes/clip_{clip_index:05d}.csv"
                tensorio.write_tensor(out_dir / clip_rel, clip.samples)
                write_notes_csv(out_dir / notes_rel, notes)
                group.clips.append(ClipEntry(clip_index, clip_rel, notes_rel))
                clip_index += 1
            groups.append(group)
    manifest = DatasetManifest(out_dir, config.sample_rate, config.duration_s, groups)
    manifest.save(out_dir / "manifest.txt")
    return manifest


# ---------------------------------------------------------------------------
# balanced sampling
# ---------------------------------------------------------------------------


def balanced_weights(sizes, exponent: float = 0.3) -> np.ndarray:
    """Sampling probabilities proportional to (n_i / sum n_j) ** exponent.

    The raw weights do not sum to one, so they are renormalized; this
    keeps the intended flattening of source imbalance.
    """
    sizes = np.asarray(sizes, dtype=np.float64)
    if sizes.ndim != 1 or len(sizes) == 0:
        raise ValueError("sizes must be a non-empty 1-d sequence")
    if (sizes <= 0).any():
        raise ValueError(f"all sizes must be positive, got {sizes.tolist()}")
    w = (sizes / sizes.sum()) ** exponent
    return w / w.sum()


# ---------------------------------------------------------------------------
# notes CSV
# ---------------------------------------------------------------------------

NOTES_CSV_HEADER = "onset_s,duration_s,pitch,velocity"


def write_notes_csv(path, notes: NoteList) -> None:
    lines = [NOTES_CSV_HEADER]
    for e in notes:
        lines.append(f"{e.onset!r},{e.duration!r},{e.pitch},{e.velocity!r}")
    Path(path).write_text("\n".join(lines) + "\n")


def read_notes_csv(path) -> NoteList:
    text = Path(path).read_text().strip().splitlines()
    if not text or text[0].strip() != NOTES_CSV_HEADER:
        raise ValueError(f"bad notes CSV header in {path}")
    events = []
    for line in text[1:]:
        onset, duration, pitch, velocity = line.split(",")
        events.append(Note(float(onset), float(duration), int(pitch), float(velocity)))
    return NoteList(events)
