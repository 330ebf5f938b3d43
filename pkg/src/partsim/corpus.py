"""Multi-stem corpus handling: scanning, synthesis, presence, segmentation.

A corpus is a directory of tracks, each holding ``metadata.yaml`` (keys
``tempo_bpm`` and ``split``) and ``stems/{drums,bass,piano,guitar,others}.wav``
as mono PCM16 or float32 at one corpus-wide sample rate. Missing stem files
are treated as silent rather than as errors.
"""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from scipy.io import wavfile

from . import INSTRUMENTS

log = logging.getLogger(__name__)

SPLITS = ("train", "val", "test")
SILENCE_THRESHOLD_DB = -60.0
POWER_EPS = 1e-12
CLIP_PEAK = 0.95

N_TEMPO_CLASSES = 36
TEMPO_LO = 40.0
TEMPO_HI = 220.0
TEMPO_BIN_BPM = 5.0


@dataclass
class TrackIssue:
    track_id: str
    reason: str


@dataclass
class StemTrack:
    """One multi-stem track; audio loads lazily and is cached per stem."""

    track_id: str
    tempo_bpm: float
    split: str
    sample_rate: int
    n_samples: int
    stem_paths: dict[str, Path | None]
    _stems: dict[str, np.ndarray] = field(default_factory=dict, repr=False)

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    def stem(self, name: str) -> np.ndarray:
        """Float32 samples in [-1, 1]; missing stems come back as silence."""
        if name not in INSTRUMENTS:
            raise KeyError(f"unknown instrument {name!r}")
        if name not in self._stems:
            path = self.stem_paths.get(name)
            if path is None:
                self._stems[name] = np.zeros(self.n_samples, dtype=np.float32)
            else:
                _, data = wavfile.read(path)
                self._stems[name] = _to_float(data)
        return self._stems[name]

    def stem_window(self, name: str, start_s: float, length_s: float) -> np.ndarray:
        start = int(round(start_s * self.sample_rate))
        length = int(round(length_s * self.sample_rate))
        if start < 0 or start + length > self.n_samples:
            raise ValueError(
                f"window [{start_s}, {start_s + length_s}) s outside track "
                f"{self.track_id} of {self.duration_s:.2f} s"
            )
        return self.stem(name)[start : start + length]

    @classmethod
    def from_arrays(
        cls,
        track_id: str,
        tempo_bpm: float,
        split: str,
        stems: dict[str, np.ndarray],
        sample_rate: int,
    ) -> "StemTrack":
        lengths = {v.size for v in stems.values()}
        if len(lengths) != 1:
            raise ValueError(f"stems of {track_id} differ in length: {lengths}")
        track = cls(
            track_id=track_id,
            tempo_bpm=tempo_bpm,
            split=split,
            sample_rate=sample_rate,
            n_samples=lengths.pop(),
            stem_paths={name: None for name in INSTRUMENTS},
        )
        track._stems = {k: np.asarray(v, dtype=np.float32) for k, v in stems.items()}
        return track


@dataclass
class Segment:
    """A window of one source, with per-instrument presence flags."""

    source_label: str
    start_s: float
    length_s: float
    presence: np.ndarray
    sample_rate: int
    audio: np.ndarray | None = None


def _to_float(data: np.ndarray) -> np.ndarray:
    if data.ndim != 1:
        raise ValueError(f"expected mono audio, got shape {data.shape}")
    if data.dtype == np.int16:
        return (data / 32768.0).astype(np.float32)
    if data.dtype in (np.float32, np.float64):
        return data.astype(np.float32)
    raise ValueError(f"unsupported sample format {data.dtype}")


def _wav_header(path: Path) -> tuple[int, int]:
    """(sample_rate, n_samples) without loading sample data."""
    sr, data = wavfile.read(path, mmap=True)
    if data.ndim != 1:
        raise ValueError(f"{path.name}: expected mono audio, got shape {data.shape}")
    if data.dtype not in (np.int16, np.float32, np.float64):
        raise ValueError(f"{path.name}: unsupported sample format {data.dtype}")
    return sr, data.shape[0]


def scan_corpus(root_path, issues: list[TrackIssue] | None = None) -> list[StemTrack]:
    """Build metadata-only StemTracks for every readable track directory.

    Defective tracks are skipped and reported (appended to ``issues`` when a
    list is given, and logged); an entirely empty corpus is a hard error.
    """
    root = Path(root_path)
    if not root.is_dir():
        raise FileNotFoundError(f"corpus root {root} does not exist")
    tracks = []
    for track_dir in sorted(p for p in root.iterdir() if p.is_dir()):
        track_id = track_dir.name
        try:
            tracks.append(_scan_track(track_dir))
        except Exception as exc:  # noqa: BLE001 - per-track isolation
            log.warning("skipping track %s: %s", track_id, exc)
            if issues is not None:
                issues.append(TrackIssue(track_id=track_id, reason=str(exc)))
    if not tracks:
        raise ValueError(f"no tracks found under {root}")
    return tracks


def _scan_track(track_dir: Path) -> StemTrack:
    meta_path = track_dir / "metadata.yaml"
    if not meta_path.is_file():
        raise ValueError("missing metadata.yaml")
    meta = yaml.safe_load(meta_path.read_text())
    if not isinstance(meta, dict) or "tempo_bpm" not in meta:
        raise ValueError("metadata lacks tempo_bpm")
    tempo = float(meta["tempo_bpm"])
    if tempo <= 0:
        raise ValueError(f"non-positive tempo {tempo}")
    split = str(meta.get("split", "train"))
    if split not in SPLITS:
        raise ValueError(f"unknown split {split!r}")

    stem_paths: dict[str, Path | None] = {}
    headers = {}
    for name in INSTRUMENTS:
        path = track_dir / "stems" / f"{name}.wav"
        if path.is_file():
            headers[name] = _wav_header(path)
            stem_paths[name] = path
        else:
            stem_paths[name] = None
    if not headers:
        raise ValueError("no stem files")
    if len(set(headers.values())) != 1:
        raise ValueError(f"stems disagree on rate/length: {headers}")
    sample_rate, n_samples = next(iter(headers.values()))
    return StemTrack(
        track_id=track_dir.name,
        tempo_bpm=tempo,
        split=split,
        sample_rate=sample_rate,
        n_samples=n_samples,
        stem_paths=stem_paths,
    )


def detect_presence(stem_audio: np.ndarray, silence_threshold_db: float = SILENCE_THRESHOLD_DB) -> int:
    """1 iff average power 10*log10(mean(x^2) + 1e-12) clears the threshold."""
    audio = np.asarray(stem_audio, dtype=np.float64)
    if audio.size == 0:
        return 0
    power_db = 10.0 * np.log10(np.mean(audio * audio) + POWER_EPS)
    return int(power_db > silence_threshold_db)


def assign_tempo_class(tempo_bpm: float) -> int:
    """Uniform 5-BPM bins over [40, 220): class 0 holds 40-45 BPM and so on."""
    if tempo_bpm <= 0:
        raise ValueError(f"non-positive tempo {tempo_bpm}")
    if not TEMPO_LO <= tempo_bpm < TEMPO_HI:
        log.warning("tempo %.1f BPM outside [40, 220), clamping", tempo_bpm)
        tempo_bpm = min(max(tempo_bpm, TEMPO_LO), np.nextafter(TEMPO_HI, TEMPO_LO))
    return int((tempo_bpm - TEMPO_LO) // TEMPO_BIN_BPM)


def segment_starts(duration_s: float, length_s: float, overlap_ratio: float) -> list[float]:
    """Window starts at multiples of the stride; the tail that cannot fill a
    whole window is dropped."""
    stride = length_s * (1.0 - overlap_ratio)
    if stride <= 0:
        raise ValueError(f"non-positive stride from overlap {overlap_ratio}")
    starts = []
    k = 0
    while k * stride + length_s <= duration_s + 1e-9:
        starts.append(k * stride)
        k += 1
    return starts


def segment_track(
    track: StemTrack,
    length_s: float,
    overlap_ratio: float = 0.0,
    silence_threshold_db: float = SILENCE_THRESHOLD_DB,
) -> list[Segment]:
    """Cut one track into fixed-length windows with per-stem presence."""
    segments = []
    for start in segment_starts(track.duration_s, length_s, overlap_ratio):
        presence = np.array(
            [
                detect_presence(
                    track.stem_window(name, start, length_s), silence_threshold_db
                )
                for name in INSTRUMENTS
            ],
            dtype=np.int64,
        )
        segments.append(
            Segment(
                source_label=track.track_id,
                start_s=start,
                length_s=length_s,
                presence=presence,
                sample_rate=track.sample_rate,
            )
        )
    return segments


def mix_stems(
    selection: dict[int, tuple[StemTrack, float]],
    length_s: float,
    silence_threshold_db: float = SILENCE_THRESHOLD_DB,
) -> tuple[np.ndarray, np.ndarray]:
    """Sum the selected stem windows into one mono signal.

    ``selection`` maps instrument index to (source track, window start in
    seconds) for every included slot; excluded slots are simply absent and
    get presence 0. If the sum clips, it is rescaled to peak 0.95.
    """
    if not selection:
        raise ValueError("empty mixture: no stem included")
    rates = {track.sample_rate for track, _ in selection.values()}
    if len(rates) != 1:
        raise ValueError(f"sample rates disagree: {rates}")
    sample_rate = rates.pop()
    n = int(round(length_s * sample_rate))
    mix = np.zeros(n, dtype=np.float64)
    presence = np.zeros(len(INSTRUMENTS), dtype=np.int64)
    for code, (track, start_s) in sorted(selection.items()):
        window = track.stem_window(INSTRUMENTS[code], start_s, length_s)
        presence[code] = detect_presence(window, silence_threshold_db)
        mix += window
    peak = np.abs(mix).max()
    if peak > 1.0:
        mix *= CLIP_PEAK / peak
    return mix.astype(np.float32), presence


def prune_test_tracks(
    tracks: list[StemTrack],
    fraction: float = 0.1,
    silence_threshold_db: float = SILENCE_THRESHOLD_DB,
) -> list[StemTrack]:
    """Drop the test tracks with the least usable stem material.

    Each test track is scored by the minimum, over instruments, of its
    non-silent duration (one-second windows passing the presence test);
    the lowest floor(fraction * n_test) scores are removed. Other splits
    pass through untouched.
    """
    test = [t for t in tracks if t.split == "test"]
    n_drop = int(len(test) * fraction)
    if n_drop == 0:
        return list(tracks)

    def score(track: StemTrack) -> float:
        per_stem = []
        for name in INSTRUMENTS:
            audio = track.stem(name)
            whole = audio[: int(track.duration_s) * track.sample_rate]
            windows = whole.reshape(-1, track.sample_rate)
            per_stem.append(
                float(
                    sum(detect_presence(w, silence_threshold_db) for w in windows)
                )
            )
        return min(per_stem)

    ranked = sorted(test, key=lambda t: (score(t), t.track_id))
    dropped = {t.track_id for t in ranked[:n_drop]}
    log.info("pruning %d test tracks: %s", n_drop, sorted(dropped))
    return [t for t in tracks if t.track_id not in dropped]


def corpus_fingerprint(root_path) -> str:
    """Content hash over the corpus files, stable across rescans.

    Run manifests are skipped: they carry timestamps and describe how the
    corpus was produced, not what it contains.
    """
    root = Path(root_path)
    digest = hashlib.sha256()
    for path in sorted(p for p in root.rglob("*") if p.is_file()):
        if path.name == "manifest.json":
            continue
        digest.update(str(path.relative_to(root)).encode())
        digest.update(path.read_bytes())
    return digest.hexdigest()


def split_tracks(tracks: list[StemTrack]) -> dict[str, list[StemTrack]]:
    out: dict[str, list[StemTrack]] = {s: [] for s in SPLITS}
    for track in tracks:
        out[track.split].append(track)
    return out


def default_split_counts(n_tracks: int) -> tuple[int, int, int]:
    """(train, val, test) counts; proportions chosen so evaluation splits
    stay large enough for the similarity-table protocols."""
    n_test = round(n_tracks * 10 / 24)
    n_val = round(n_tracks * 4 / 24)
    n_train = n_tracks - n_val - n_test
    while n_train < 2 and (n_test > 0 or n_val > 0):
        if n_test >= n_val:
            n_test -= 1
        else:
            n_val -= 1
        n_train += 1
    return n_train, n_val, n_test


def generate_synthetic_corpus(
    n_tracks: int,
    seed: int,
    out_path,
    sample_rate: int = 22050,
    duration_s: float = 24.0,
    splits: tuple[int, int, int] | None = None,
) -> list[StemTrack]:
    """Write a deterministic synthetic stem corpus and return its scan.

    Every track gets five audible stems with track-specific timbres: noise
    bursts on the beat for drums, a low two-note bassline, decaying chord
    tones for piano, plucked harmonics for guitar, and a detuned pad for
    the remaining-instruments slot. Tempo is drawn from [40, 220) BPM.
    """
    if n_tracks < 2:
        raise ValueError("need at least 2 tracks to form similarity tuples")
    root = Path(out_path)
    root.mkdir(parents=True, exist_ok=True)
    if splits is None:
        splits = default_split_counts(n_tracks)
    if sum(splits) != n_tracks:
        raise ValueError(f"splits {splits} do not sum to {n_tracks}")
    split_of = (
        ["train"] * splits[0] + ["val"] * splits[1] + ["test"] * splits[2]
    )

    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    t = np.arange(n, dtype=np.float64) / sample_rate
    for idx in range(n_tracks):
        track_id = f"track{idx:03d}"
        tempo = float(rng.uniform(TEMPO_LO, TEMPO_HI))
        stems = _synthesize_stems(rng, t, sample_rate, tempo)
        track_dir = root / track_id
        (track_dir / "stems").mkdir(parents=True, exist_ok=True)
        for name, audio in stems.items():
            wavfile.write(
                track_dir / "stems" / f"{name}.wav",
                sample_rate,
                audio.astype(np.float32),
            )
        meta = {"tempo_bpm": round(tempo, 3), "split": split_of[idx]}
        (track_dir / "metadata.yaml").write_text(
            yaml.safe_dump(meta, sort_keys=True)
        )
    return scan_corpus(root)


def _synthesize_stems(rng, t, sample_rate, tempo) -> dict[str, np.ndarray]:
    n = t.size
    beat = 60.0 / tempo
    beats = np.arange(0.0, t[-1], beat)

    def normalize(x, peak=0.5):
        m = np.abs(x).max()
        return (x * (peak / m)) if m > 0 else x

    # Drums: a decaying band-limited noise burst on every beat; the band
    # center distinguishes tracks. Voiced above the tonal stems so the
    # noise band stays clear of their registers.
    center = rng.uniform(5000.0, 9500.0)
    width = rng.uniform(500.0, 1200.0)
    noise = rng.standard_normal(n)
    spec = np.fft.rfft(noise)
    freqs = np.fft.rfftfreq(n, 1.0 / sample_rate)
    spec[(freqs < center - width) | (freqs > center + width)] = 0.0
    colored = np.fft.irfft(spec, n)
    env = np.zeros(n)
    decay = rng.uniform(18.0, 35.0)
    for b in beats:
        i0 = int(b * sample_rate)
        length = min(int(0.25 * sample_rate), n - i0)
        env[i0 : i0 + length] = np.maximum(
            env[i0 : i0 + length], np.exp(-decay * np.arange(length) / sample_rate)
        )
    drums = normalize(colored * env)

    # Bass: a four-note riff looping every two beats, built on a
    # track-specific root, interval pattern, and harmonic stack. The loop
    # is short enough that any few-second window hears the whole pitch
    # set, and the harmonics carry identity into the mid bands.
    f0 = rng.uniform(60.0, 200.0)
    pattern = rng.choice(np.array([0, 2, 3, 5, 7]), size=4, replace=False)
    h_weights = rng.uniform(0.2, 1.0, size=3) / np.arange(1, 4)
    bass = np.zeros(n)
    half = beat / 2.0
    for k, b in enumerate(np.arange(0.0, t[-1], half)):
        i0 = int(b * sample_rate)
        length = min(int(half * sample_rate), n - i0)
        if length <= 0:
            break
        tt = np.arange(length) / sample_rate
        f = f0 * 2.0 ** (pattern[k % 4] / 12.0)
        note = sum(
            w * np.sin(2 * np.pi * f * (h + 1) * tt)
            for h, w in enumerate(h_weights)
        )
        bass[i0 : i0 + length] += note * np.exp(-4.0 * tt)
    bass = normalize(bass)

    # Piano: a track-specific four-note chord struck on every beat with a
    # slow decay, so the full pitch set rings through any window.
    root_f = rng.uniform(200.0, 360.0)
    offsets = np.sort(
        rng.choice(np.array([3, 4, 5, 7, 9, 11, 12, 14, 16]), size=3, replace=False)
    )
    chord_f = root_f * 2.0 ** (np.concatenate(([0.0], offsets)) / 12.0)
    chord_g = rng.uniform(0.5, 1.0, size=4)
    piano = np.zeros(n)
    for b in beats:
        i0 = int(b * sample_rate)
        length = min(int(2 * beat * sample_rate), n - i0)
        tt = np.arange(length) / sample_rate
        chord = sum(g * np.sin(2 * np.pi * f * tt) for g, f in zip(chord_g, chord_f))
        piano[i0 : i0 + length] += chord * np.exp(-1.2 * tt)
    piano = normalize(piano)

    # Guitar: off-beat plucks alternating between two track-specific pitches,
    # with a track-specific harmonic weight profile, voiced above the piano
    # register so the two stay separable in a mix.
    g0 = rng.uniform(1200.0, 1700.0)
    g_step = float(rng.choice(np.array([2.0, 3.0, 5.0, 7.0])))
    weights = rng.uniform(0.2, 1.0, size=3) / np.array([1.0, 4.0, 9.0])
    guitar = np.zeros(n)
    for j, b in enumerate(beats + beat / 2):
        i0 = int(b * sample_rate)
        if i0 >= n:
            break
        length = min(int(beat * sample_rate), n - i0)
        tt = np.arange(length) / sample_rate
        f = g0 * 2.0 ** ((g_step / 12.0) * (j % 2))
        pluck = sum(
            w * np.sin(2 * np.pi * f * (h + 1) * tt) for h, w in enumerate(weights)
        )
        guitar[i0 : i0 + length] += pluck * np.exp(-3.0 * tt)
    guitar = normalize(guitar)

    # Others: a sustained high pad built from three partials whose interval
    # geometry is track-specific, sitting above the plucked and struck
    # registers, with slow amplitude movement.
    p0 = rng.uniform(1400.0, 2000.0)
    ratios = np.sort(
        rng.choice(
            np.array([1.2, 1.26, 1.35, 1.5, 1.6, 1.7, 1.8, 1.9]), size=2, replace=False
        )
    )
    partials = np.concatenate(([1.0], ratios)) * p0
    gains = rng.uniform(0.5, 1.0, size=3)
    lfo = 0.85 + 0.15 * np.sin(2 * np.pi * rng.uniform(0.1, 0.4) * t)
    others = normalize(
        sum(g * np.sin(2 * np.pi * f * t) for g, f in zip(gains, partials)) * lfo
    )

    return {
        "drums": drums,
        "bass": bass,
        "piano": piano,
        "guitar": guitar,
        "others": others,
    }
