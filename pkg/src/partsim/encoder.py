"""The conditional similarity encoder, its masks, and masked distances.

One network maps a mel gram to a single (5*D)-dimensional embedding whose
five contiguous D-wide slices belong to drums, bass, piano, guitar and
others, in that fixed order. Similarity under condition c compares only
slice c. Per-instrument teacher networks share the architecture but end
in a D-dimensional output.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import INSTRUMENTS, nn

N_CONDITIONS = len(INSTRUMENTS)

CHECKPOINT_VERSION = 1


@dataclass
class EncoderConfig:
    n_mels: int = 128
    subspace_dim: int = 128
    channels: tuple[int, ...] = (32, 32, 64, 64, 128, 128, 256, 256, 512, 512)
    kernel_size: int = 3
    pool_every: int = 2
    pool_size: int = 2

    @property
    def embedding_dim(self) -> int:
        return N_CONDITIONS * self.subspace_dim

    @property
    def n_pools(self) -> int:
        return len(self.channels) // self.pool_every

    def validate(self) -> None:
        if self.subspace_dim < 1:
            raise ValueError("subspace_dim must be positive")
        if len(self.channels) % self.pool_every != 0:
            raise ValueError("channel plan must fill whole conv blocks")
        h = self.n_mels
        for _ in range(self.n_pools):
            h //= self.pool_size
        if h < 1:
            raise ValueError(
                f"n_mels={self.n_mels} collapses to nothing after {self.n_pools} pools"
            )

    def to_dict(self) -> dict:
        return {
            "n_mels": self.n_mels,
            "subspace_dim": self.subspace_dim,
            "channels": list(self.channels),
            "kernel_size": self.kernel_size,
            "pool_every": self.pool_every,
            "pool_size": self.pool_size,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "EncoderConfig":
        d = dict(d)
        d["channels"] = tuple(d["channels"])
        return cls(**d)


@dataclass
class ConditionMask:
    c: int
    m: np.ndarray


def build_mask(c: int, D: int) -> ConditionMask:
    """Binary selector: ones exactly on dimensions cD through (c+1)D - 1."""
    if not 0 <= c < N_CONDITIONS:
        raise ValueError(f"condition {c} outside 0..{N_CONDITIONS - 1}")
    if D < 1:
        raise ValueError("subspace width must be at least 1")
    m = np.zeros(N_CONDITIONS * D, dtype=np.float64)
    m[c * D : (c + 1) * D] = 1.0
    return ConditionMask(c=c, m=m)


def subspace(v: np.ndarray, c: int) -> np.ndarray:
    """Slice c of an embedding (or batch of embeddings, last axis)."""
    dim = v.shape[-1]
    if dim % N_CONDITIONS != 0:
        raise ValueError(f"embedding length {dim} not divisible by {N_CONDITIONS}")
    if not 0 <= c < N_CONDITIONS:
        raise ValueError(f"condition {c} outside 0..{N_CONDITIONS - 1}")
    D = dim // N_CONDITIONS
    return v[..., c * D : (c + 1) * D]


def masked_distance(e1: np.ndarray, e2: np.ndarray, c: int) -> float:
    """Euclidean distance restricted to the condition-c slice."""
    e1 = np.asarray(e1, dtype=np.float64)
    e2 = np.asarray(e2, dtype=np.float64)
    if e1.shape != e2.shape:
        raise ValueError(f"embedding shapes differ: {e1.shape} vs {e2.shape}")
    diff = subspace(e1, c) - subspace(e2, c)
    return float(np.sqrt((diff * diff).sum()))


class SpectrogramEncoder:
    """Conv stack (batch norm + ReLU, pool every block), time average, FC.

    ``output_dim`` defaults to the full partitioned embedding; teacher
    networks pass ``output_dim=config.subspace_dim`` instead.
    """

    def __init__(
        self,
        config: EncoderConfig,
        rng: np.random.Generator,
        output_dim: int | None = None,
        dtype=np.float32,
    ):
        config.validate()
        self.config = config
        self.output_dim = output_dim or config.embedding_dim
        self.trained = False

        layers = []
        prev = 1
        h = config.n_mels
        for i, ch in enumerate(config.channels):
            layers.append(nn.Conv2d(prev, ch, config.kernel_size, rng, dtype=dtype))
            layers.append(nn.BatchNorm2d(ch, dtype=dtype))
            layers.append(nn.ReLU())
            prev = ch
            if (i + 1) % config.pool_every == 0:
                layers.append(nn.MaxPool2d(config.pool_size))
                h //= config.pool_size
        self.backbone = nn.Sequential(layers)
        self.head = nn.Sequential(
            [
                nn.TimeAverage(),
                nn.Flatten(),
                nn.Dense(prev * h, self.output_dim, rng, dtype=dtype),
            ]
        )
        self._min_frames = config.pool_size**config.n_pools

    def _check_input(self, grams: np.ndarray) -> np.ndarray:
        grams = np.asarray(grams)
        if grams.ndim == 2:
            grams = grams[None]
        if grams.ndim != 3 or grams.shape[1] != self.config.n_mels:
            raise ValueError(
                f"expected grams shaped (batch, {self.config.n_mels}, frames), "
                f"got {grams.shape}"
            )
        if grams.shape[2] < self._min_frames:
            raise ValueError(
                f"{grams.shape[2]} frames pool away to nothing "
                f"(need at least {self._min_frames})"
            )
        return grams

    def forward(self, grams: np.ndarray, train: bool) -> np.ndarray:
        """(batch, n_mels, n_frames) float grams -> (batch, output_dim)."""
        x = self._check_input(grams)[:, None, :, :]
        return self.head.forward(self.backbone.forward(x, train), train)

    def backward(self, dy: np.ndarray) -> None:
        self.backbone.backward(self.head.backward(dy))

    def encode(self, gram: np.ndarray) -> np.ndarray:
        """Single gram to a single embedding, evaluation mode."""
        return self.forward(gram[None] if gram.ndim == 2 else gram, train=False)[0]

    def feature_map(self, grams: np.ndarray, train: bool = False) -> np.ndarray:
        """Pre-aggregation feature map (batch, ch, h, time), for inspection."""
        x = self._check_input(grams)[:, None, :, :]
        return self.backbone.forward(x, train)

    def head_only(self, fmap: np.ndarray, train: bool = False) -> np.ndarray:
        return self.head.forward(fmap, train)

    def named_params(self):
        for name, layer, pname, param in self.backbone.named_params():
            yield f"backbone.{name}", layer, pname, param
        for name, layer, pname, param in self.head.named_params():
            yield f"head.{name}", layer, pname, param

    def state_dict(self) -> dict[str, np.ndarray]:
        out = {f"backbone.{k}": v for k, v in self.backbone.state_dict().items()}
        out.update({f"head.{k}": v for k, v in self.head.state_dict().items()})
        return out

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        self.backbone.load_state_dict(
            {k[9:]: v for k, v in state.items() if k.startswith("backbone.")}
        )
        self.head.load_state_dict(
            {k[5:]: v for k, v in state.items() if k.startswith("head.")}
        )
        self.trained = True


def teacher_encode(teacher: SpectrogramEncoder, gram: np.ndarray) -> np.ndarray:
    """Per-instrument target embedding from a clean stem gram."""
    if not teacher.trained:
        raise RuntimeError("teacher network has not been trained")
    return teacher.encode(gram)


class _TrainableOptimizerModel(nn.Sequential):
    """Flat view over an encoder's layers so one Adam instance covers all."""

    def __init__(self, encoder: SpectrogramEncoder):
        super().__init__(encoder.backbone.layers + encoder.head.layers)


def make_optimizer(encoder: SpectrogramEncoder, lr: float = 1e-4) -> nn.Adam:
    return nn.Adam(_TrainableOptimizerModel(encoder), lr=lr)


def save_checkpoint(
    path,
    encoder: SpectrogramEncoder,
    extra_arrays: dict[str, np.ndarray] | None = None,
    meta: dict | None = None,
) -> None:
    """Versioned single-file archive: weights, config, caller metadata."""
    header = json.dumps(
        {
            "version": CHECKPOINT_VERSION,
            "config": encoder.config.to_dict(),
            "output_dim": encoder.output_dim,
            "meta": meta or {},
        },
        sort_keys=True,
    )
    arrays = {f"w::{k}": v for k, v in encoder.state_dict().items()}
    for k, v in (extra_arrays or {}).items():
        arrays[f"x::{k}"] = v
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:  # keep the exact name, no .npz suffixing
        np.savez(fh, __header__=np.frombuffer(header.encode(), np.uint8), **arrays)


def load_checkpoint(path) -> tuple[SpectrogramEncoder, dict[str, np.ndarray], dict]:
    """Returns (encoder with weights loaded, extra arrays, metadata)."""
    with np.load(path) as data:
        header = json.loads(bytes(data["__header__"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(
                f"checkpoint version {header.get('version')} not supported"
            )
        config = EncoderConfig.from_dict(header["config"])
        encoder = SpectrogramEncoder(
            config, np.random.default_rng(0), output_dim=header["output_dim"]
        )
        encoder.load_state_dict(
            {k[3:]: data[k] for k in data.files if k.startswith("w::")}
        )
        extra = {k[3:]: data[k] for k in data.files if k.startswith("x::")}
    return encoder, extra, header["meta"]
