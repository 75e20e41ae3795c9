"""Synthetic-singer dataset generation and the dataset manifest.

Each synthetic singer is a fixed random profile: a parallel formant
(two-pole resonator) bank, a vibrato rate/depth, and a base pitch range
drawn from one of two pitch-profile classes ("low" / "high", the
desk-scale analog of the gender buckets). A clip is a random melody of
piecewise-constant notes with vibrato, rendered as a harmonic source
through the singer's filter plus low-level noise.

Generation is deterministic: every random draw derives from
(seed, singer index, clip index), so worker count never matters.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import freqz, lfilter

from .audio import AudioClip, save_wav
from .config import Config, derive_seed
from .errors import ValidationError

PITCH_CLASSES = ("low", "high")
PITCH_RANGES = {"low": (100.0, 240.0), "high": (210.0, 500.0)}
SPLITS = ("train", "test-seen", "test-unseen")


@dataclass
class ManifestEntry:
    path: str
    singer_id: str
    split: str


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    base_dir: Path = field(default_factory=Path)

    def save(self, path: str | Path) -> None:
        rows = [{"path": e.path, "singer_id": e.singer_id, "split": e.split}
                for e in self.entries]
        Path(path).write_text(json.dumps(rows, indent=2, sort_keys=True) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> "DatasetManifest":
        p = Path(path)
        if not p.exists():
            raise ValidationError(f"manifest not found: {p}")
        try:
            rows = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ValidationError(f"{p}: invalid manifest JSON ({exc})") from exc
        if not isinstance(rows, list):
            raise ValidationError(f"{p}: manifest must be a JSON array")
        entries = []
        for row in rows:
            try:
                entries.append(ManifestEntry(row["path"], row["singer_id"], row["split"]))
            except (KeyError, TypeError) as exc:
                raise ValidationError(f"{p}: bad manifest row {row!r}") from exc
        m = cls(entries=entries, base_dir=p.parent)
        m.validate()
        return m

    def validate(self) -> None:
        for e in self.entries:
            if e.split not in SPLITS:
                raise ValidationError(f"unknown split tag {e.split!r}")
        train = self.singers("train")
        unseen = self.singers("test-unseen")
        if train & unseen:
            raise ValidationError(
                f"singers in both train and test-unseen: {sorted(train & unseen)}")
        missing = self.singers("test-seen") - train
        if missing:
            raise ValidationError(
                f"test-seen singers absent from train: {sorted(missing)}")

    def by_split(self, split: str) -> list[ManifestEntry]:
        return [e for e in self.entries if e.split == split]

    def singers(self, split: str | None = None) -> set[str]:
        return {e.singer_id for e in self.entries
                if split is None or e.split == split}

    def entry_path(self, entry: ManifestEntry) -> Path:
        p = Path(entry.path)
        return p if p.is_absolute() else self.base_dir / p


def pitch_class_of(singer_id: str) -> str | None:
    for cls in PITCH_CLASSES:
        if singer_id.startswith(cls):
            return cls
    return None


@dataclass
class SingerProfile:
    singer_id: str
    pitch_class: str
    note_lo: float
    note_hi: float
    formants: list[tuple[float, float, float]]  # (center Hz, bandwidth Hz, gain)
    vibrato_rate: float
    vibrato_depth: float  # semitones


def make_profile(seed: int, singer_index: int, pitch_class: str) -> SingerProfile:
    rng = np.random.default_rng(derive_seed(seed, f"singer:{singer_index}"))
    lo, hi = PITCH_RANGES[pitch_class]
    center = np.exp(rng.uniform(np.log(lo * 1.15), np.log(hi / 1.3)))
    formants = [
        (rng.uniform(300, 900), rng.uniform(80, 200), rng.uniform(0.6, 1.0)),
        (rng.uniform(1000, 2400), rng.uniform(100, 300), rng.uniform(0.3, 0.9)),
        (rng.uniform(2600, 4500), rng.uniform(150, 400), rng.uniform(0.1, 0.6)),
    ]
    return SingerProfile(
        singer_id=f"{pitch_class}{singer_index:02d}",
        pitch_class=pitch_class,
        note_lo=center / 1.35,
        note_hi=center * 1.35,
        formants=formants,
        vibrato_rate=rng.uniform(4.5, 6.5),
        vibrato_depth=rng.uniform(0.3, 0.8),
    )


def make_melody(rng: np.random.Generator, profile: SingerProfile,
                seconds: float) -> list[tuple[float, float]]:
    """Piecewise-constant (note_hz, duration_s) segments; hz=0 is a rest."""
    semitones = int(np.floor(12 * np.log2(profile.note_hi / profile.note_lo)))
    melody: list[tuple[float, float]] = []
    total = 0.0
    while total < seconds:
        note = profile.note_lo * 2.0 ** (rng.integers(0, semitones + 1) / 12.0)
        dur = rng.uniform(0.22, 0.5)
        melody.append((float(note), float(dur)))
        total += dur
        if rng.random() < 0.3:
            rest = rng.uniform(0.05, 0.09)
            melody.append((0.0, float(rest)))
            total += rest
    return melody


def _note_f0(melody, n_samples: int, sr: int) -> np.ndarray:
    f0 = np.zeros(n_samples, dtype=np.float64)
    pos = 0
    for hz, dur in melody:
        n = int(round(dur * sr))
        f0[pos:pos + n] = hz
        pos += n
        if pos >= n_samples:
            break
    return f0


def _harmonic_source(f0: np.ndarray, sr: int, rng: np.random.Generator,
                     max_harmonics: int = 24) -> np.ndarray:
    """Sawtooth-like sum of harmonics with 1/k amplitudes; harmonics above
    0.45*sr are muted per sample to avoid aliasing."""
    phase = 2.0 * np.pi * np.cumsum(f0) / sr
    k = np.arange(1, max_harmonics + 1, dtype=np.float64)[:, None]
    partials = np.sin(k * phase[None, :]) / k
    partials *= (k * f0[None, :] < 0.45 * sr)
    voiced = (f0 > 0).astype(np.float64)
    out = partials.sum(axis=0) * voiced
    out += 0.002 * rng.standard_normal(len(f0))
    return out


def _resonator_coeffs(center: float, bandwidth: float, sr: int):
    r = np.exp(-np.pi * bandwidth / sr)
    theta = 2.0 * np.pi * center / sr
    a = np.array([1.0, -2.0 * r * np.cos(theta), r * r])
    b = np.array([1.0])
    _, h = freqz(b, a, worN=[theta])
    return b / max(np.abs(h[0]), 1e-12), a


def render_clip(profile: SingerProfile, melody, seconds: float, sr: int,
                rng: np.random.Generator) -> AudioClip:
    n = int(round(seconds * sr))
    note_f0 = _note_f0(melody, n, sr)
    vib_phase = rng.uniform(0, 2 * np.pi)
    t = np.arange(n) / sr
    vibrato = 2.0 ** (profile.vibrato_depth / 12.0
                      * np.sin(2 * np.pi * profile.vibrato_rate * t + vib_phase))
    f0 = note_f0 * vibrato
    source = _harmonic_source(f0, sr, rng)
    out = 0.15 * source
    for center, bandwidth, gain in profile.formants:
        b, a = _resonator_coeffs(center, bandwidth, sr)
        out = out + gain * lfilter(b, a, source)
    peak = np.max(np.abs(out))
    if peak > 0:
        out = 0.5 * out / peak
    return AudioClip(samples=out.astype(np.float32), sample_rate=sr)


def synth_clip(seed: int, profile: SingerProfile, singer_index: int,
               clip_index: int, seconds: float, sr: int) -> AudioClip:
    """Render one clip; deterministic in (seed, singer index, clip index)."""
    rng = np.random.default_rng(
        derive_seed(seed, f"clip:{singer_index}:{clip_index}"))
    melody = make_melody(rng, profile, seconds)
    return render_clip(profile, melody, seconds, sr, rng)


def plan_singers(n_singers: int, n_unseen: int, seed: int) -> tuple[list[SingerProfile], set[str]]:
    """Profiles (classes alternate low/high) plus the unseen-id subset,
    chosen stratified across classes."""
    if n_unseen >= n_singers:
        raise ValidationError("n_unseen must be smaller than n_singers")
    profiles = [make_profile(seed, i, PITCH_CLASSES[i % 2])
                for i in range(n_singers)]
    rng = np.random.default_rng(derive_seed(seed, "unseen-split"))
    unseen: list[str] = []
    by_class = {cls: [p.singer_id for p in profiles if p.pitch_class == cls]
                for cls in PITCH_CLASSES}
    for ids in by_class.values():
        rng.shuffle(ids)
    turn = 0
    while len(unseen) < n_unseen:
        ids = by_class[PITCH_CLASSES[turn % 2]]
        if ids:
            unseen.append(ids.pop())
        turn += 1
    return profiles, set(unseen)


def plan_entries(n_singers: int, clips_per_singer: int, n_unseen: int,
                 test_clips_per_seen: int, seed: int
                 ) -> tuple[list[SingerProfile], list[ManifestEntry]]:
    """Singer profiles and manifest rows (no audio rendered). Seen singers
    keep their last ``test_clips_per_seen`` clips as test-seen; unseen
    singers contribute only test-unseen clips."""
    profiles, unseen_ids = plan_singers(n_singers, n_unseen, seed)
    entries = []
    for profile in profiles:
        for c in range(clips_per_singer):
            if profile.singer_id in unseen_ids:
                split = "test-unseen"
            elif c >= clips_per_singer - test_clips_per_seen:
                split = "test-seen"
            else:
                split = "train"
            entries.append(ManifestEntry(
                path=f"wavs/{profile.singer_id}/{c:02d}.wav",
                singer_id=profile.singer_id, split=split))
    return profiles, entries


def synth_dataset(out_dir: str | Path, cfg: Config, n_singers: int | None = None,
                  clips_per_singer: int | None = None, n_unseen: int | None = None,
                  seed: int | None = None) -> DatasetManifest:
    """Write WAVs and manifest.json under ``out_dir``; returns the manifest."""
    n_singers = cfg.n_singers if n_singers is None else n_singers
    clips_per_singer = cfg.clips_per_singer if clips_per_singer is None else clips_per_singer
    n_unseen = cfg.n_unseen if n_unseen is None else n_unseen
    seed = cfg.seed if seed is None else seed

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    profiles, entries = plan_entries(n_singers, clips_per_singer, n_unseen,
                                     cfg.test_clips_per_seen, seed)
    profile_of = {p.singer_id: (i, p) for i, p in enumerate(profiles)}
    for entry in entries:
        i, profile = profile_of[entry.singer_id]
        c = int(Path(entry.path).stem)
        (out / "wavs" / profile.singer_id).mkdir(parents=True, exist_ok=True)
        clip = synth_clip(seed, profile, i, c, cfg.clip_seconds, cfg.sample_rate)
        save_wav(clip, out / entry.path)
    manifest = DatasetManifest(entries=entries, base_dir=out)
    manifest.validate()
    manifest.save(out / "manifest.json")
    return manifest
