"""Audio to normalized dB-scaled mel spectrograms, the encoder input.

The analysis chain is: frame without center padding (Hann window, power
spectrum), apply a triangular mel filterbank, convert to dB with a fixed
floor, then standardize each gram to zero mean and unit variance.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

DB_FLOOR_POWER = 1e-10  # 10*log10 of this is the -100 dB floor
STD_FLOOR = 1e-8

_CACHE_VERSION = 1


@dataclass
class FeatureParams:
    sample_rate: int = 22050
    n_fft: int = 2048
    hop: int = 512
    n_mels: int = 128

    def key(self) -> str:
        blob = json.dumps(
            {
                "sample_rate": self.sample_rate,
                "n_fft": self.n_fft,
                "hop": self.hop,
                "n_mels": self.n_mels,
            },
            sort_keys=True,
        )
        return hashlib.sha256(blob.encode()).hexdigest()[:16]


@dataclass
class FeatureGram:
    """A (n_mels, n_frames) matrix plus the segment it came from."""

    values: np.ndarray
    source: str = ""

    @property
    def n_mels(self) -> int:
        return self.values.shape[0]

    @property
    def n_frames(self) -> int:
        return self.values.shape[1]


def n_frames_for(num_samples: int, n_fft: int = 2048, hop: int = 512) -> int:
    """Frame count for uncentered analysis of num_samples samples."""
    if num_samples < n_fft:
        raise ValueError(f"audio of {num_samples} samples is shorter than one window")
    return 1 + (num_samples - n_fft) // hop


def hz_to_mel(hz):
    return 2595.0 * np.log10(1.0 + np.asarray(hz, dtype=np.float64) / 700.0)


def mel_to_hz(mel):
    return 700.0 * (10.0 ** (np.asarray(mel, dtype=np.float64) / 2595.0) - 1.0)


def mel_filterbank(sample_rate: int, n_fft: int, n_mels: int) -> np.ndarray:
    """(n_mels, 1 + n_fft//2) triangular filters with unit peaks."""
    n_bins = 1 + n_fft // 2
    bin_hz = np.linspace(0.0, sample_rate / 2.0, n_bins)
    corners = mel_to_hz(np.linspace(hz_to_mel(0.0), hz_to_mel(sample_rate / 2.0), n_mels + 2))
    fb = np.zeros((n_mels, n_bins), dtype=np.float64)
    for m in range(n_mels):
        lo, mid, hi = corners[m], corners[m + 1], corners[m + 2]
        up = (bin_hz - lo) / max(mid - lo, 1e-12)
        down = (hi - bin_hz) / max(hi - mid, 1e-12)
        fb[m] = np.clip(np.minimum(up, down), 0.0, None)
    return fb.astype(np.float32)


def melspectrogram(
    audio: np.ndarray,
    sample_rate: int,
    n_fft: int = 2048,
    hop: int = 512,
    n_mels: int = 128,
) -> FeatureGram:
    """dB-scaled mel spectrogram before normalization.

    No center padding: the first frame starts at sample 0, so the frame
    count is 1 + (len(audio) - n_fft) // hop.
    """
    audio = np.asarray(audio, dtype=np.float64)
    if audio.ndim != 1:
        raise ValueError(f"expected mono audio, got shape {audio.shape}")
    frames = n_frames_for(audio.size, n_fft, hop)
    window = np.hanning(n_fft + 1)[:-1]  # periodic Hann
    starts = np.arange(frames) * hop
    segs = audio[starts[:, None] + np.arange(n_fft)[None, :]]
    spec = np.fft.rfft(segs * window[None, :], axis=1)
    power = spec.real**2 + spec.imag**2  # (frames, bins)
    mel = power @ mel_filterbank(sample_rate, n_fft, n_mels).astype(np.float64).T
    db = 10.0 * np.log10(np.maximum(mel, DB_FLOOR_POWER))
    return FeatureGram(values=np.ascontiguousarray(db.T, dtype=np.float32))


def normalize(gram: FeatureGram) -> FeatureGram:
    """Per-gram z-score; a constant gram maps to all zeros."""
    v = gram.values.astype(np.float64)
    std = v.std()
    out = (v - v.mean()) / max(std, STD_FLOOR)
    if std < STD_FLOOR:
        out = np.zeros_like(v)
    return FeatureGram(values=out.astype(np.float32), source=gram.source)


def segment_gram(
    audio: np.ndarray, params: FeatureParams, source: str = ""
) -> np.ndarray:
    """Full pipeline for one segment: mel dB gram, normalized, as an array."""
    gram = melspectrogram(
        audio, params.sample_rate, params.n_fft, params.hop, params.n_mels
    )
    gram.source = source
    return normalize(gram).values


@dataclass
class FeatureCache:
    """Optional single-file gram cache, invalidated when parameters change.

    Keys combine the corpus fingerprint and a segment identifier; the
    feature parameters are part of the archive header, so loading an
    archive written with different parameters discards it.
    """

    params: FeatureParams
    corpus_hash: str = ""
    _store: dict[str, np.ndarray] = field(default_factory=dict)

    def _key(self, segment_id: str) -> str:
        return f"{self.corpus_hash}::{segment_id}"

    def get_or_compute(self, segment_id: str, compute) -> np.ndarray:
        key = self._key(segment_id)
        if key not in self._store:
            self._store[key] = compute()
        return self._store[key]

    def save(self, path) -> None:
        meta = json.dumps(
            {
                "version": _CACHE_VERSION,
                "params_key": self.params.key(),
                "corpus_hash": self.corpus_hash,
            }
        )
        arrays = {f"g::{k}": v for k, v in self._store.items()}
        with open(path, "wb") as fh:  # keep the exact name, no .npz suffixing
            np.savez_compressed(
                fh, __meta__=np.frombuffer(meta.encode(), np.uint8), **arrays
            )

    def load(self, path) -> bool:
        """Returns True if the archive matched this cache's parameters."""
        with np.load(path) as data:
            meta = json.loads(bytes(data["__meta__"]).decode())
            if (
                meta.get("version") != _CACHE_VERSION
                or meta.get("params_key") != self.params.key()
                or meta.get("corpus_hash") != self.corpus_hash
            ):
                return False
            self._store = {k[3:]: data[k] for k in data.files if k.startswith("g::")}
        return True
