"""Training pipelines: per-instrument teachers, distillation pretraining,
and the main conditional-similarity loop.

All three stages share one config object, draw every random decision from
seeded generators, and write checkpoints plus an append-only epochs.jsonl
(no wall-clock fields, so reruns with the same seed match byte for byte).
Data realization runs sequentially in-process; that is also the strict
reproducibility mode.
"""

from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import INSTRUMENTS, features, objectives, sampler
from .corpus import StemTrack, detect_presence, mix_stems, segment_starts, split_tracks
from .encoder import (
    EncoderConfig,
    SpectrogramEncoder,
    load_checkpoint,
    save_checkpoint,
)
from . import nn

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    """Settings shared by the teacher, pretraining, and main stages."""

    margin: float = 0.2
    lam: float = 0.1
    epochs: int = 1000
    batch_size: int = 32
    triplets_per_epoch: int = 5000
    learning_rate: float = 1e-4
    optimizer: str = "adam"
    seed: int = 0
    use_norm_loss: bool = True
    use_pseudo: bool = True
    use_additional: bool = True
    use_pretrain: bool = True
    segment_s: float = 3.0
    p_include: float = 0.8
    n_val_triplets: int = 200
    teacher_epochs: int = 30
    teacher_triplets_per_epoch: int = 512
    pretrain_epochs: int = 100
    pretrain_learning_rate: float | None = None
    patience: int = 10
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    features: features.FeatureParams = field(default_factory=features.FeatureParams)

    def __post_init__(self):
        self.validate()

    def validate(self) -> None:
        positive = {
            "margin": self.margin,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "triplets_per_epoch": self.triplets_per_epoch,
            "learning_rate": self.learning_rate,
            "segment_s": self.segment_s,
            "n_val_triplets": self.n_val_triplets,
            "teacher_epochs": self.teacher_epochs,
            "teacher_triplets_per_epoch": self.teacher_triplets_per_epoch,
            "pretrain_epochs": self.pretrain_epochs,
            "patience": self.patience,
        }
        for name, value in positive.items():
            if value <= 0:
                raise ValueError(f"{name} must be positive, got {value}")
        if self.lam < 0:
            raise ValueError(f"lam must be non-negative, got {self.lam}")
        if self.optimizer != "adam":
            raise ValueError(f"unsupported optimizer {self.optimizer!r} (supported: adam)")
        if not 0.0 < self.p_include <= 1.0:
            raise ValueError(f"p_include must be in (0, 1], got {self.p_include}")
        if self.pretrain_learning_rate is not None and self.pretrain_learning_rate <= 0:
            raise ValueError("pretrain_learning_rate must be positive")
        self.encoder.validate()
        if self.features.n_mels != self.encoder.n_mels:
            raise ValueError(
                f"feature mel bins {self.features.n_mels} != encoder input "
                f"{self.encoder.n_mels}"
            )

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        out["encoder"] = self.encoder.to_dict()
        out["features"] = dataclasses.asdict(self.features)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ValueError(f"unknown config keys: {unknown} (valid: {sorted(known)})")
        if "encoder" in data:
            data["encoder"] = EncoderConfig.from_dict(data["encoder"])
        if "features" in data:
            data["features"] = features.FeatureParams(**data["features"])
        return cls(**data)


def load_config(path) -> TrainConfig:
    with open(path) as fh:
        data = yaml.safe_load(fh) or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping")
    return TrainConfig.from_dict(data)


def save_config(config: TrainConfig, path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        yaml.safe_dump(config.to_dict(), fh, sort_keys=True)


def apply_overrides(config: TrainConfig, overrides: list[str]) -> TrainConfig:
    """Apply ``key=value`` strings (dots reach nested sections) on top of a
    config; unknown keys are an error."""
    data = config.to_dict()
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not of the form key=value")
        key, raw = item.split("=", 1)
        parts = key.strip().split(".")
        node = data
        for part in parts[:-1]:
            if not isinstance(node.get(part), dict):
                raise ValueError(f"unknown config section {part!r} in {key!r}")
            node = node[part]
        leaf = parts[-1]
        if leaf not in node:
            raise ValueError(f"unknown config key {key!r} (valid: {sorted(node)})")
        node[leaf] = yaml.safe_load(raw)
    return TrainConfig.from_dict(data)


def ensure_train_only(tracks: list[StemTrack]) -> None:
    """Hard guard: optimization must never touch test-tagged tracks."""
    offenders = sorted(t.track_id for t in tracks if t.split == "test")
    if offenders:
        raise RuntimeError(f"test-split tracks reached a training path: {offenders}")


def _train_val(tracks: list[StemTrack]) -> tuple[list[StemTrack], list[StemTrack]]:
    by_split = split_tracks(tracks)
    train = by_split.get("train", [])
    val = by_split.get("val", [])
    if not train:
        raise ValueError("empty train split")
    ensure_train_only(train + val)
    return train, val


class _NormBias(nn.Layer):
    """Holds the five learnable norm-loss biases so one optimizer instance
    covers them together with the encoder weights."""

    def __init__(self, b: np.ndarray | None = None):
        super().__init__()
        init = np.zeros(len(INSTRUMENTS)) if b is None else np.asarray(b, dtype=np.float64)
        self.params = {"b": init.copy()}

    @property
    def b(self) -> np.ndarray:
        return self.params["b"]


def _make_optimizer(encoder: SpectrogramEncoder, bias: _NormBias | None, lr: float) -> nn.Adam:
    layers = encoder.backbone.layers + encoder.head.layers
    if bias is not None:
        layers = layers + [bias]
    return nn.Adam(nn.Sequential(layers), lr=lr)


def _jsonable(value):
    """Recursively coerce numpy scalars so records serialize cleanly."""
    if isinstance(value, dict):
        return {k: _jsonable(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    if isinstance(value, np.integer):
        return int(value)
    if isinstance(value, np.floating):
        return float(value)
    return value


def _write_jsonl(path: Path, record: dict) -> None:
    with open(path, "a") as fh:
        fh.write(json.dumps(_jsonable(record), sort_keys=True) + "\n")


# ---------------------------------------------------------------------------
# Teachers


def _plain_triplet_grad(a, p, n, margin):
    """Unmasked triplet hinge over the whole output vector."""
    a = np.asarray(a, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    n = np.asarray(n, dtype=np.float64)
    d_ap = float(np.linalg.norm(a - p))
    d_an = float(np.linalg.norm(a - n))
    loss = d_ap - d_an + margin
    zeros = np.zeros_like(a)
    if loss <= 0.0:
        return 0.0, zeros.copy(), zeros.copy(), zeros.copy()
    u_ap = (a - p) / d_ap if d_ap > 0 else zeros
    u_an = (a - n) / d_an if d_an > 0 else zeros
    return loss, u_ap - u_an, -u_ap, u_an


def _stem_windows(
    tracks: list[StemTrack], instrument: str, segment_s: float, overlap: float = 0.5
) -> dict[str, list[float]]:
    """Per track: starts of non-silent clean-stem windows on the overlap grid."""
    windows = {}
    for track in tracks:
        starts = [
            s
            for s in segment_starts(track.duration_s, segment_s, overlap)
            if detect_presence(track.stem_window(instrument, s, segment_s))
        ]
        if starts:
            windows[track.track_id] = starts
    return windows


def _teacher_triplet_specs(windows, rng, n_triplets):
    """(track, start) triples with track identity as the label."""
    anchors = sorted(t for t, s in windows.items() if len(s) >= 2)
    all_tracks = sorted(windows)
    specs = []
    for _ in range(n_triplets):
        a_track = anchors[int(rng.integers(len(anchors)))]
        i, j = rng.choice(len(windows[a_track]), size=2, replace=False)
        negatives = [t for t in all_tracks if t != a_track]
        n_track = negatives[int(rng.integers(len(negatives)))]
        n_start = windows[n_track][int(rng.integers(len(windows[n_track])))]
        specs.append(
            (
                (a_track, windows[a_track][int(i)]),
                (a_track, windows[a_track][int(j)]),
                (n_track, n_start),
            )
        )
    return specs


def train_teachers(
    tracks: list[StemTrack],
    config: TrainConfig,
    out_dir,
) -> dict[str, Path]:
    """Train one D-output encoder per instrument on clean stem segments,
    with same-track windows as positives and other tracks as negatives."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_tracks, val_tracks = _train_val(tracks)
    cache = features.FeatureCache(config.features)
    by_id = {t.track_id: t for t in train_tracks + val_tracks}

    def gram(track_id: str, instrument: str, start: float) -> np.ndarray:
        key = f"{track_id}:{instrument}:{start:g}"
        return cache.get_or_compute(
            key,
            lambda: features.segment_gram(
                by_id[track_id].stem_window(instrument, start, config.segment_s),
                config.features,
            ),
        )

    paths = {}
    ss = np.random.SeedSequence(config.seed)
    for instrument, child in zip(INSTRUMENTS, ss.spawn(len(INSTRUMENTS))):
        init_seq, sample_seq, val_seq = child.spawn(3)
        windows = _stem_windows(train_tracks, instrument, config.segment_s)
        anchors = [t for t, s in windows.items() if len(s) >= 2]
        if len(windows) < 2 or not anchors:
            raise ValueError(
                f"instrument {instrument}: need 2 tracks with non-silent stems, "
                f"have {len(windows)}"
            )
        teacher = SpectrogramEncoder(
            config.encoder,
            rng=np.random.default_rng(init_seq),
            output_dim=config.encoder.subspace_dim,
        )
        optimizer = _make_optimizer(teacher, None, config.learning_rate)
        sample_rng = np.random.default_rng(sample_seq)

        val_windows = _stem_windows(val_tracks, instrument, config.segment_s)
        val_specs = []
        if len(val_windows) >= 2 and any(len(s) >= 2 for s in val_windows.values()):
            val_specs = _teacher_triplet_specs(
                val_windows, np.random.default_rng(val_seq), config.n_val_triplets
            )

        def embed_specs(specs, train):
            grams = np.stack(
                [gram(t, instrument, s) for spec in specs for (t, s) in spec]
            )
            return teacher.forward(grams, train=train)

        history = []
        for epoch in range(config.teacher_epochs):
            specs = _teacher_triplet_specs(
                windows, sample_rng, config.teacher_triplets_per_epoch
            )
            loss_sum = 0.0
            for lo in range(0, len(specs), config.batch_size):
                chunk = specs[lo : lo + config.batch_size]
                emb = embed_specs(chunk, train=True).astype(np.float64)
                d_emb = np.zeros_like(emb)
                for bi in range(len(chunk)):
                    loss, da, dp, dn = _plain_triplet_grad(
                        emb[3 * bi], emb[3 * bi + 1], emb[3 * bi + 2], config.margin
                    )
                    loss_sum += loss
                    d_emb[3 * bi] += da / len(chunk)
                    d_emb[3 * bi + 1] += dp / len(chunk)
                    d_emb[3 * bi + 2] += dn / len(chunk)
                teacher.backward(d_emb.astype(np.float32))
                optimizer.step()
            val_acc = float("nan")
            if val_specs:
                emb = embed_specs(val_specs, train=False).astype(np.float64)
                hits = sum(
                    np.linalg.norm(emb[3 * i] - emb[3 * i + 1])
                    < np.linalg.norm(emb[3 * i] - emb[3 * i + 2])
                    for i in range(len(val_specs))
                )
                val_acc = float(hits / len(val_specs))
            history.append(
                {"epoch": epoch, "loss": float(loss_sum / len(specs)), "val_accuracy": val_acc}
            )
            log.info("teacher %s epoch %d: %s", instrument, epoch, history[-1])
        teacher.trained = True
        path = out_dir / f"teacher_{instrument}.ckpt"
        save_checkpoint(
            path,
            teacher,
            meta={"stage": "teacher", "instrument": instrument, "history": history},
        )
        paths[instrument] = path
    return paths


def load_teachers(paths: dict[str, Path]) -> dict[str, SpectrogramEncoder]:
    teachers = {}
    for instrument in INSTRUMENTS:
        encoder, _, meta = load_checkpoint(paths[instrument])
        if meta.get("instrument") not in (None, instrument):
            raise ValueError(
                f"checkpoint {paths[instrument]} is for {meta.get('instrument')}, "
                f"expected {instrument}"
            )
        teachers[instrument] = encoder
    return teachers


# ---------------------------------------------------------------------------
# Pretraining


def _distillation_items(tracks, teachers, config):
    """(mix gram, unit target) pairs over 50%-overlap segments; segments
    with no instrument present are skipped."""
    items = []
    teacher_list = [teachers[name] for name in INSTRUMENTS]
    for track in tracks:
        for start in segment_starts(track.duration_s, config.segment_s, 0.5):
            audio, q = mix_stems(
                {j: (track, start) for j in range(len(INSTRUMENTS))}, config.segment_s
            )
            if not q.any():
                continue
            stem_grams = [
                features.segment_gram(
                    track.stem_window(name, start, config.segment_s), config.features
                )
                if q[j]
                else None
                for j, name in enumerate(INSTRUMENTS)
            ]
            target = objectives.pretrain_target(stem_grams, teacher_list, q)
            if target is None:
                continue
            items.append((features.segment_gram(audio, config.features), target))
    return items


def pretrain(
    tracks: list[StemTrack],
    teachers: dict[str, SpectrogramEncoder],
    config: TrainConfig,
    out_dir,
) -> Path:
    """Distill the teachers into the main encoder; stops when validation
    MSE stops improving for ``patience`` epochs and keeps the best state."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_tracks, val_tracks = _train_val(tracks)
    train_items = _distillation_items(train_tracks, teachers, config)
    if not train_items:
        raise ValueError("no segments with any instrument present")
    val_items = _distillation_items(val_tracks, teachers, config) or train_items

    ss = np.random.SeedSequence(config.seed)
    init_seq, order_seq = ss.spawn(2)
    encoder = SpectrogramEncoder(config.encoder, rng=np.random.default_rng(init_seq))
    lr = config.pretrain_learning_rate or config.learning_rate
    optimizer = _make_optimizer(encoder, None, lr)
    order_rng = np.random.default_rng(order_seq)

    val_grams = np.stack([g for g, _ in val_items])
    val_targets = np.stack([t for _, t in val_items])

    def val_mse() -> float:
        preds = encoder.forward(val_grams, train=False).astype(np.float64)
        return objectives.pretrain_loss(preds, val_targets)

    initial = val_mse()
    history = [{"epoch": -1, "val_mse": initial}]
    best = initial
    best_state = {k: v.copy() for k, v in encoder.state_dict().items()}
    best_epoch = -1
    stale = 0
    metrics_path = out_dir / "pretrain.jsonl"
    metrics_path.unlink(missing_ok=True)
    _write_jsonl(metrics_path, history[0])
    for epoch in range(config.pretrain_epochs):
        order = order_rng.permutation(len(train_items))
        loss_sum = 0.0
        for lo in range(0, len(order), config.batch_size):
            chunk = order[lo : lo + config.batch_size]
            grams = np.stack([train_items[i][0] for i in chunk])
            targets = np.stack([train_items[i][1] for i in chunk])
            preds = encoder.forward(grams, train=True).astype(np.float64)
            loss, d_pred = objectives.pretrain_loss_grad(preds, targets)
            loss_sum += loss * len(chunk)
            encoder.backward(d_pred.astype(np.float32))
            optimizer.step()
        record = {
            "epoch": epoch,
            "train_mse": loss_sum / len(order),
            "val_mse": val_mse(),
        }
        if not math.isfinite(record["train_mse"]):
            raise RuntimeError(f"pretraining diverged at epoch {epoch}")
        history.append(record)
        _write_jsonl(metrics_path, record)
        log.info("pretrain epoch %d: %s", epoch, record)
        if record["val_mse"] < best:
            best = record["val_mse"]
            best_state = {k: v.copy() for k, v in encoder.state_dict().items()}
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= config.patience:
                break
    encoder.load_state_dict(best_state)
    encoder.trained = True
    path = out_dir / "pretrain.ckpt"
    save_checkpoint(
        path,
        encoder,
        meta={
            "stage": "pretrain",
            "epoch": best_epoch,
            "initial_val_mse": initial,
            "best_val_mse": best,
            "config": config.to_dict(),
        },
    )
    return path


# ---------------------------------------------------------------------------
# Main conditional training


@dataclass
class _RealizedTriplet:
    grams: np.ndarray  # (3, n_mels, n_frames)
    c: int
    q: tuple[np.ndarray, np.ndarray, np.ndarray]
    extra_c: int | None  # condition of the role-swapped triplet, if any


def _realize(entry, tracks_by_id, config) -> _RealizedTriplet:
    basic, extra = entry
    grams = []
    presences = []
    for piece in (basic.anchor, basic.positive, basic.negative):
        audio, q = sampler.realize_piece(piece, tracks_by_id, basic.length_s)
        grams.append(features.segment_gram(audio, config.features))
        presences.append(q)
    return _RealizedTriplet(
        grams=np.stack(grams),
        c=basic.c,
        q=tuple(presences),
        extra_c=extra.c if extra is not None else None,
    )


def _batch_items(realized, embeddings):
    """Triplet loss inputs plus the row indices their gradients flow to."""
    items = []
    rows = []
    for bi, r in enumerate(realized):
        base = 3 * bi
        q_a, q_p, q_n = r.q
        items.append(
            objectives.TripletEmbeddings(
                embeddings[base], embeddings[base + 1], embeddings[base + 2],
                r.c, q_a, q_p, q_n,
            )
        )
        rows.append((base, base + 1, base + 2))
        if r.extra_c is not None:
            items.append(
                objectives.TripletEmbeddings(
                    embeddings[base], embeddings[base + 2], embeddings[base + 1],
                    r.extra_c, q_a, q_n, q_p,
                )
            )
            rows.append((base, base + 2, base + 1))
    return items, rows


def validate(
    encoder: SpectrogramEncoder,
    val_plan: list[_RealizedTriplet],
    norm_params: objectives.NormLossParams,
    config: TrainConfig,
) -> dict:
    """Triplet satisfaction rate and losses on a fixed plan; no mutation."""
    if not val_plan:
        raise ValueError("empty validation plan")
    satisfied = 0
    trip_sum = 0.0
    norm_sum = 0.0
    for lo in range(0, len(val_plan), config.batch_size):
        chunk = val_plan[lo : lo + config.batch_size]
        grams = np.concatenate([r.grams for r in chunk])
        emb = encoder.forward(grams, train=False).astype(np.float64)
        items, _ = _batch_items(chunk, emb)
        for item in items:
            d_ap = objectives.masked_distance(item.a, item.p, item.c)
            d_an = objectives.masked_distance(item.a, item.n, item.c)
            satisfied += d_ap < d_an
            trip_sum += objectives.triplet_loss(
                item.a, item.p, item.n, item.c, config.margin
            )
            norm_sum += objectives.norm_loss(item, norm_params)
    n = sum(2 if r.extra_c is not None else 1 for r in val_plan)
    lam = config.lam if config.use_norm_loss else 0.0
    return {
        "satisfaction": satisfied / n,
        "triplet_loss": trip_sum / n,
        "norm_loss": norm_sum / n,
        "total_loss": (trip_sum + lam * norm_sum) / n,
        "n_triplets": n,
    }


def _build_val_plan(val_tracks, config, rng, tracks_by_id) -> list[_RealizedTriplet]:
    """Fixed pseudo-piece validation plan, realized once."""
    plan = sampler.build_epoch(
        val_tracks,
        config.n_val_triplets,
        rng,
        length_s=config.segment_s,
        p_incl=config.p_include,
        use_pseudo=True,
        use_additional=False,
    )
    return [_realize(entry, tracks_by_id, config) for entry in plan]


def train(
    tracks: list[StemTrack],
    config: TrainConfig,
    out_dir,
    run_id: str = "run",
    initial: Path | str | None = None,
) -> Path:
    """Main loop: a fresh triplet plan per epoch, embeddings through the
    encoder, combined loss, Adam updates, per-epoch validation, and the
    best checkpoint kept by validation satisfaction rate."""
    run_dir = Path(out_dir) / run_id
    run_dir.mkdir(parents=True, exist_ok=True)
    train_tracks, val_tracks = _train_val(tracks)
    if not val_tracks:
        raise ValueError("empty val split")
    tracks_by_id = {t.track_id: t for t in train_tracks + val_tracks}

    ss = np.random.SeedSequence(config.seed)
    init_seq, epoch_seq, val_seq = ss.spawn(3)
    if initial is not None:
        encoder, extra, _ = load_checkpoint(initial)
        bias = _NormBias(extra.get("norm_b"))
    else:
        encoder = SpectrogramEncoder(config.encoder, rng=np.random.default_rng(init_seq))
        bias = _NormBias()
    optimizer = _make_optimizer(encoder, bias, config.learning_rate)
    epoch_rng = np.random.default_rng(epoch_seq)
    val_plan = _build_val_plan(
        val_tracks, config, np.random.default_rng(val_seq), tracks_by_id
    )

    lam = config.lam if config.use_norm_loss else 0.0
    metrics_path = run_dir / "epochs.jsonl"
    metrics_path.unlink(missing_ok=True)
    best_satisfaction = -1.0
    best_path = run_dir / "best.ckpt"
    for epoch in range(config.epochs):
        plan = sampler.build_epoch(
            train_tracks,
            config.triplets_per_epoch,
            epoch_rng,
            length_s=config.segment_s,
            p_incl=config.p_include,
            use_pseudo=config.use_pseudo,
            use_additional=config.use_additional,
        )
        sums = {"total": 0.0, "triplet": 0.0, "norm": 0.0}
        n_items = 0
        for lo in range(0, len(plan), config.batch_size):
            realized = [
                _realize(entry, tracks_by_id, config)
                for entry in plan[lo : lo + config.batch_size]
            ]
            grams = np.concatenate([r.grams for r in realized])
            emb = encoder.forward(grams, train=True).astype(np.float64)
            items, rows = _batch_items(realized, emb)
            params = objectives.NormLossParams(b=bias.b)
            report, item_grads, db = objectives.total_loss_grad(
                items, params, lam=lam, margin=config.margin
            )
            if not math.isfinite(report.total):
                snapshot = run_dir / "diverged.ckpt"
                save_checkpoint(
                    snapshot, encoder,
                    extra_arrays={"norm_b": bias.b},
                    meta={"stage": "diverged", "epoch": epoch},
                )
                raise RuntimeError(
                    f"loss diverged at epoch {epoch} (snapshot: {snapshot})"
                )
            d_emb = np.zeros_like(emb)
            for (ia, ip, in_), (da, dp, dn) in zip(rows, item_grads):
                d_emb[ia] += da
                d_emb[ip] += dp
                d_emb[in_] += dn
            encoder.backward(d_emb.astype(np.float32))
            bias.grads = {"b": db}
            optimizer.step()
            sums["total"] += report.total * len(items)
            sums["triplet"] += report.triplet * len(items)
            sums["norm"] += report.norm * len(items)
            n_items += len(items)
        encoder.trained = True
        val = validate(encoder, val_plan, objectives.NormLossParams(b=bias.b), config)
        record = {
            "epoch": epoch,
            "train_total": sums["total"] / n_items,
            "train_triplet": sums["triplet"] / n_items,
            "train_norm": sums["norm"] / n_items,
            "n_train_triplets": n_items,
            **{f"val_{k}": v for k, v in val.items()},
        }
        _write_jsonl(metrics_path, record)
        log.info("epoch %d: %s", epoch, record)
        ckpt_meta = {
            "stage": "train",
            "epoch": epoch,
            "config": config.to_dict(),
            "val": val,
        }
        save_checkpoint(
            run_dir / f"epoch_{epoch}.ckpt",
            encoder,
            extra_arrays={"norm_b": bias.b},
            meta=ckpt_meta,
        )
        if val["satisfaction"] > best_satisfaction:
            best_satisfaction = val["satisfaction"]
            save_checkpoint(
                best_path,
                encoder,
                extra_arrays={"norm_b": bias.b},
                meta=ckpt_meta,
            )
    if not best_path.exists():
        raise RuntimeError("no checkpoint was written")
    return best_path
