"""Objective evaluations over a frozen encoder.

Five protocols: music identification by kNN over each subspace, the
pseudo-piece kNN check that punishes cross-instrument leakage, instrument
identification from subspace norms, distance-matrix correlations within
and across subspaces, and A/B pair comparison. Plus a 2-D scatter export.

Every protocol takes an ``embed_batch`` callable mapping a list of audio
windows to a float64 embedding matrix, so tests can substitute analytic
embeddings for a real encoder.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import INSTRUMENTS, features
from .corpus import SILENCE_THRESHOLD_DB, StemTrack, detect_presence, mix_stems, segment_starts
from .encoder import N_CONDITIONS, SpectrogramEncoder, subspace
from .sampler import PieceSpec, Slot

log = logging.getLogger(__name__)

DEFAULT_K = 5
PSEUDO_N_LABELS = 10
PSEUDO_PIECES_PER_LABEL = 4


@dataclass
class EmbeddingTable:
    """Parallel rows: segment id, source (piece) label, per-slot labels,
    embeddings as one float64 matrix."""

    segment_ids: list[str] = field(default_factory=list)
    source_labels: list[str] = field(default_factory=list)
    slot_labels: list[tuple] = field(default_factory=list)
    embeddings: np.ndarray | None = None
    _pending: list[np.ndarray] = field(default_factory=list, repr=False)

    def add(self, segment_id: str, source_label: str, slot_labels: tuple, embedding: np.ndarray) -> None:
        self.segment_ids.append(segment_id)
        self.source_labels.append(source_label)
        self.slot_labels.append(tuple(slot_labels))
        self._pending.append(np.asarray(embedding, dtype=np.float64))

    def freeze(self) -> "EmbeddingTable":
        if self._pending:
            new = np.stack(self._pending)
            self.embeddings = (
                new if self.embeddings is None else np.vstack([self.embeddings, new])
            )
            self._pending = []
        if self.embeddings is None:
            raise ValueError("empty table")
        if len(set(self.segment_ids)) != len(self.segment_ids):
            raise ValueError("segment ids are not unique")
        return self

    def __len__(self) -> int:
        return len(self.segment_ids)

    def index_of(self, segment_id: str) -> int:
        return self.segment_ids.index(segment_id)

    def save(self, path) -> None:
        self.freeze()
        with open(path, "wb") as fh:
            np.savez(
                fh,
                segment_ids=np.array(self.segment_ids),
                source_labels=np.array(self.source_labels),
                slot_labels=np.array(
                    [[x if x is not None else "" for x in row] for row in self.slot_labels]
                ),
                embeddings=self.embeddings,
            )

    @classmethod
    def load(cls, path) -> "EmbeddingTable":
        with np.load(path) as data:
            table = cls(
                segment_ids=[str(x) for x in data["segment_ids"]],
                source_labels=[str(x) for x in data["source_labels"]],
                slot_labels=[
                    tuple(str(x) if x else None for x in row)
                    for row in data["slot_labels"]
                ],
                embeddings=data["embeddings"].astype(np.float64),
            )
        return table.freeze()


def make_embedder(encoder: SpectrogramEncoder, params: features.FeatureParams, batch_size: int = 32):
    """Wrap an encoder as embed_batch(list of audio arrays) -> (n, dim)."""

    def embed_batch(windows: list[np.ndarray]) -> np.ndarray:
        out = []
        for lo in range(0, len(windows), batch_size):
            grams = np.stack(
                [features.segment_gram(w, params) for w in windows[lo : lo + batch_size]]
            )
            out.append(encoder.forward(grams, train=False).astype(np.float64))
        return np.vstack(out)

    return embed_batch


def _subspace_distances(embeddings: np.ndarray, target: np.ndarray, c: int) -> np.ndarray:
    diff = subspace(embeddings, c) - subspace(target, c)[None, :]
    return np.sqrt((diff * diff).sum(axis=1))


def knn_predict(
    table: EmbeddingTable,
    target_id: str,
    c: int,
    k: int = DEFAULT_K,
    labels: list[str] | None = None,
    mask: np.ndarray | None = None,
) -> str:
    """Majority vote over the k nearest reference rows under subspace c.

    The target row itself is never a reference; ``mask`` (True = usable)
    removes further rows. Vote ties break by smaller summed distance of
    the tied labels within the top k, then by the earliest-ranked member.
    """
    table.freeze()
    idx = table.index_of(target_id)
    labels = list(labels) if labels is not None else list(table.source_labels)
    usable = np.ones(len(table), dtype=bool) if mask is None else mask.copy()
    usable[idx] = False
    candidates = np.flatnonzero(usable)
    if candidates.size < k:
        raise ValueError(f"only {candidates.size} reference rows, need {k}")
    dists = _subspace_distances(
        table.embeddings[candidates], table.embeddings[idx], c
    )
    order = np.argsort(dists, kind="stable")[:k]
    top = [(labels[candidates[i]], float(dists[i]), rank) for rank, i in enumerate(order)]

    counts: dict[str, int] = {}
    sums: dict[str, float] = {}
    best_rank: dict[str, int] = {}
    for label, dist, rank in top:
        counts[label] = counts.get(label, 0) + 1
        sums[label] = sums.get(label, 0.0) + dist
        best_rank.setdefault(label, rank)
    return min(counts, key=lambda lb: (-counts[lb], sums[lb], best_rank[lb]))


def _full_mix_windows(track: StemTrack, length_s: float) -> list[tuple[str, float]]:
    return [
        (f"{track.track_id}:{length_s:g}:{start:g}", start)
        for start in segment_starts(track.duration_s, length_s, 0.0)
    ]


def eval_music_id(
    embed_batch,
    test_tracks: list[StemTrack],
    lengths=(3.0, 5.0, 10.0),
    k: int = DEFAULT_K,
) -> dict[float, dict[str, float]]:
    """Track identification from mixture segments, per length and instrument."""
    report: dict[float, dict[str, float]] = {}
    for length_s in lengths:
        table = EmbeddingTable()
        windows = []
        for track in test_tracks:
            for seg_id, start in _full_mix_windows(track, length_s):
                audio, _ = mix_stems(
                    {j: (track, start) for j in range(N_CONDITIONS)}, length_s
                )
                windows.append((seg_id, track.track_id, audio))
        embeddings = embed_batch([w[2] for w in windows])
        for (seg_id, track_id, _), emb in zip(windows, embeddings):
            table.add(seg_id, track_id, (track_id,) * N_CONDITIONS, emb)
        table.freeze()
        per_instrument = {}
        for c, name in enumerate(INSTRUMENTS):
            correct = sum(
                knn_predict(table, seg_id, c, k) == table.source_labels[i]
                for i, seg_id in enumerate(table.segment_ids)
            )
            per_instrument[name] = correct / len(table)
        report[length_s] = per_instrument
    return report


@dataclass(frozen=True)
class EvalPiece:
    """One pseudo piece in the evaluation plan for instrument c."""

    piece_id: str
    label: str  # source track of the condition slot
    c: int
    piece: PieceSpec
    piece_len_s: float
    seg_len_s: float

    @property
    def n_segments(self) -> int:
        return int(self.piece_len_s // self.seg_len_s)


def build_pseudo_eval_plan(
    test_tracks: list[StemTrack],
    rng: np.random.Generator,
    n_labels: int = PSEUDO_N_LABELS,
    pieces_per_label: int = PSEUDO_PIECES_PER_LABEL,
    piece_len_s: float = 12.0,
    seg_len_s: float = 3.0,
) -> dict[int, list[EvalPiece]]:
    """Per instrument: n_labels condition sources, each in pieces_per_label
    pseudo pieces whose remaining slots come from one other test track."""
    if len(test_tracks) < n_labels:
        raise ValueError(
            f"need {n_labels} test tracks for the label set, have {len(test_tracks)}"
        )
    if len(test_tracks) < 2:
        raise ValueError("need at least 2 test tracks")
    for track in test_tracks:
        if track.duration_s < piece_len_s:
            raise ValueError(
                f"track {track.track_id} shorter than piece length {piece_len_s} s"
            )
    by_id = sorted(test_tracks, key=lambda t: t.track_id)
    label_tracks = by_id[:n_labels]
    plan: dict[int, list[EvalPiece]] = {}
    for c in range(N_CONDITIONS):
        pieces = []
        for label_track in label_tracks:
            others = [t for t in by_id if t.track_id != label_track.track_id]
            k = min(pieces_per_label, len(others))
            else_tracks = [others[i] for i in rng.choice(len(others), size=k, replace=False)]
            while len(else_tracks) < pieces_per_label:
                else_tracks.append(others[int(rng.integers(len(others)))])
            for pi, else_track in enumerate(else_tracks):
                c_start = float(rng.uniform(0.0, label_track.duration_s - piece_len_s))
                e_start = float(rng.uniform(0.0, else_track.duration_s - piece_len_s))
                slots = tuple(
                    Slot(label_track.track_id, c_start)
                    if j == c
                    else Slot(else_track.track_id, e_start)
                    for j in range(N_CONDITIONS)
                )
                pieces.append(
                    EvalPiece(
                        piece_id=f"{INSTRUMENTS[c]}:{label_track.track_id}:{pi}",
                        label=label_track.track_id,
                        c=c,
                        piece=PieceSpec(slots=slots),
                        piece_len_s=piece_len_s,
                        seg_len_s=seg_len_s,
                    )
                )
        plan[c] = pieces
    return plan


def _validate_pseudo_plan(pieces: list[EvalPiece], c: int) -> None:
    labels: dict[str, int] = {}
    for piece in pieces:
        if piece.c != c:
            raise ValueError(f"piece {piece.piece_id} has condition {piece.c}, expected {c}")
        labels[piece.label] = labels.get(piece.label, 0) + 1
    if len(labels) != PSEUDO_N_LABELS or set(labels.values()) != {PSEUDO_PIECES_PER_LABEL}:
        raise ValueError(
            f"plan for {INSTRUMENTS[c]} must be {PSEUDO_N_LABELS} labels x "
            f"{PSEUDO_PIECES_PER_LABEL} pieces, got {dict(sorted(labels.items()))}"
        )


def eval_pseudo_knn(
    embed_batch,
    plan: dict[int, list[EvalPiece]],
    tracks_by_id: dict[str, StemTrack],
    k: int = DEFAULT_K,
) -> dict[str, float]:
    """kNN over each instrument's pseudo pieces where the reference set
    never contains segments of the target's own piece."""
    report = {}
    for c in range(N_CONDITIONS):
        pieces = plan[c]
        _validate_pseudo_plan(pieces, c)
        table = EmbeddingTable()
        windows = []
        for piece in pieces:
            for seg in range(piece.n_segments):
                selection = {
                    j: (tracks_by_id[slot.track_id], slot.start_s + seg * piece.seg_len_s)
                    for j, slot in enumerate(piece.piece.slots)
                    if slot is not None
                }
                audio, _ = mix_stems(selection, piece.seg_len_s)
                windows.append((f"{piece.piece_id}:seg{seg}", piece, audio))
        embeddings = embed_batch([w[2] for w in windows])
        for (seg_id, piece, _), emb in zip(windows, embeddings):
            table.add(seg_id, piece.piece_id, piece.piece.label(), emb)
        table.freeze()
        labels = [row[c] for row in table.slot_labels]
        piece_arr = np.array(table.source_labels)
        correct = 0
        for i, seg_id in enumerate(table.segment_ids):
            mask = piece_arr != piece_arr[i]
            # No reference row may come from the target's own pseudo piece.
            assert all(table.source_labels[j] != table.source_labels[i] for j in np.flatnonzero(mask))
            predicted = knn_predict(table, seg_id, c, k, labels=labels, mask=mask)
            correct += predicted == labels[i]
        report[INSTRUMENTS[c]] = correct / len(table)
    return report


@dataclass
class InstrumentIdReport:
    accuracy: dict[str, float]
    n_evaluated: dict[str, int]
    n_excluded: dict[str, int]

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(list(self.accuracy.values())))


def eval_instrument_id(
    embed_batch,
    test_tracks: list[StemTrack],
    length_s: float = 3.0,
    silence_threshold_db: float = SILENCE_THRESHOLD_DB,
) -> InstrumentIdReport:
    """Predict the instrument of clean stem segments as the index of the
    largest subspace norm (exact ties go to the lowest index); silent
    segments are excluded and counted."""
    windows: list[tuple[int, np.ndarray]] = []
    excluded = {name: 0 for name in INSTRUMENTS}
    for track in test_tracks:
        for start in segment_starts(track.duration_s, length_s, 0.0):
            for j, name in enumerate(INSTRUMENTS):
                audio = track.stem_window(name, start, length_s)
                if not detect_presence(audio, silence_threshold_db):
                    excluded[name] += 1
                    continue
                windows.append((j, audio))
    if not windows:
        raise ValueError("no non-silent stem segments to evaluate")
    embeddings = embed_batch([w[1] for w in windows])
    correct = {name: 0 for name in INSTRUMENTS}
    totals = {name: 0 for name in INSTRUMENTS}
    for (j, _), emb in zip(windows, embeddings):
        norms = [float(np.linalg.norm(subspace(emb, c))) for c in range(N_CONDITIONS)]
        predicted = int(np.argmax(norms))  # argmax takes the lowest index on ties
        name = INSTRUMENTS[j]
        totals[name] += 1
        correct[name] += predicted == j
    accuracy = {
        name: (correct[name] / totals[name]) if totals[name] else float("nan")
        for name in INSTRUMENTS
    }
    return InstrumentIdReport(accuracy=accuracy, n_evaluated=totals, n_excluded=excluded)


def distance_matrix(embeddings: np.ndarray, c: int) -> np.ndarray:
    """Pairwise masked distances: symmetric, zero diagonal, float64."""
    e = subspace(np.asarray(embeddings, dtype=np.float64), c)
    if e.ndim != 2 or e.shape[0] < 2:
        raise ValueError("need at least 2 embeddings")
    sq = (e * e).sum(axis=1)
    gram = e @ e.T
    d2 = np.maximum(sq[:, None] + sq[None, :] - 2.0 * gram, 0.0)
    m = np.sqrt(d2)
    m = (m + m.T) / 2.0
    np.fill_diagonal(m, 0.0)
    return m


def matrix_correlation(m1: np.ndarray, m2: np.ndarray) -> float:
    """Pearson r over the strictly-upper-triangle entries."""
    m1 = np.asarray(m1, dtype=np.float64)
    m2 = np.asarray(m2, dtype=np.float64)
    if m1.shape != m2.shape:
        raise ValueError(f"shape mismatch: {m1.shape} vs {m2.shape}")
    iu = np.triu_indices(m1.shape[0], k=1)
    v1, v2 = m1[iu], m2[iu]
    if v1.std() == 0.0 or v2.std() == 0.0:
        raise ValueError("constant distance matrix: correlation undefined")
    return float(np.corrcoef(v1, v2)[0, 1])


def eval_correlations(
    embed_batch,
    test_tracks: list[StemTrack],
    length_s: float = 3.0,
) -> tuple[dict[str, float], np.ndarray]:
    """Report A: per instrument, r between clean-stem and masked-mix
    distance matrices in that subspace. Report B: 5x5 symmetric matrix of
    cross-subspace correlations under mix input (unit diagonal)."""
    mix_windows = []
    stem_windows: dict[int, list[np.ndarray]] = {c: [] for c in range(N_CONDITIONS)}
    for track in test_tracks:
        for start in segment_starts(track.duration_s, length_s, 0.0):
            audio, _ = mix_stems({j: (track, start) for j in range(N_CONDITIONS)}, length_s)
            mix_windows.append(audio)
            for c, name in enumerate(INSTRUMENTS):
                stem_windows[c].append(track.stem_window(name, start, length_s))
    mix_emb = embed_batch(mix_windows)
    report_a = {}
    for c, name in enumerate(INSTRUMENTS):
        stem_emb = embed_batch(stem_windows[c])
        m_stem = distance_matrix(stem_emb, c)
        m_mix = distance_matrix(mix_emb, c)
        report_a[name] = matrix_correlation(m_stem, m_mix)
    report_b = np.eye(N_CONDITIONS)
    mats = [distance_matrix(mix_emb, c) for c in range(N_CONDITIONS)]
    for c1 in range(N_CONDITIONS):
        for c2 in range(c1 + 1, N_CONDITIONS):
            r = matrix_correlation(mats[c1], mats[c2])
            report_b[c1, c2] = report_b[c2, c1] = r
    return report_a, report_b


@dataclass
class PairResult:
    choice: str  # "A" or "B"
    tie: bool
    d_a: float
    d_b: float


def _max_energy_window(track: StemTrack, c: int, length_s: float) -> float:
    """Start of the length_s window maximizing instrument-c energy,
    scanned on a one-second grid (first maximum wins)."""
    stem = track.stem(INSTRUMENTS[c]).astype(np.float64)
    starts = []
    start = 0.0
    while start + length_s <= track.duration_s + 1e-9:
        starts.append(start)
        start += 1.0
    if not starts:
        raise ValueError(f"track {track.track_id} shorter than {length_s} s")
    energies = []
    for s in starts:
        lo = int(round(s * track.sample_rate))
        hi = lo + int(round(length_s * track.sample_rate))
        seg = stem[lo:hi]
        energies.append(float((seg * seg).sum()))
    return starts[int(np.argmax(energies))]


def pair_compare(
    embed_batch,
    track_x: StemTrack,
    track_a: StemTrack,
    track_b: StemTrack,
    c: int,
    length_s: float = 5.0,
) -> PairResult:
    """Which of A or B sits closer to X in subspace c; ties go to A."""
    windows = []
    for track in (track_x, track_a, track_b):
        start = _max_energy_window(track, c, length_s)
        audio, _ = mix_stems({j: (track, start) for j in range(N_CONDITIONS)}, length_s)
        windows.append(audio)
    emb = embed_batch(windows)
    x, a, b = emb[0], emb[1], emb[2]
    d_a = float(np.linalg.norm(subspace(x, c) - subspace(a, c)))
    d_b = float(np.linalg.norm(subspace(x, c) - subspace(b, c)))
    if d_a == d_b:
        return PairResult(choice="A", tie=True, d_a=d_a, d_b=d_b)
    return PairResult(choice="A" if d_a < d_b else "B", tie=False, d_a=d_a, d_b=d_b)


def emit_embedding_plot(
    table: EmbeddingTable,
    c: int,
    out_path,
    method: str = "pca",
    seed: int = 0,
) -> tuple[Path, Path]:
    """Project subspace c to 2-D, write a scatter PNG and the coordinates
    as CSV (segment id, instrument-c label, x, y)."""
    table.freeze()
    if len(table) < 3:
        raise ValueError("need at least 3 rows to plot")
    if method != "pca":
        raise ValueError(f"unknown reduction method {method!r} (supported: pca)")
    e = subspace(table.embeddings, c)
    centered = e - e.mean(axis=0, keepdims=True)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    # Fix the sign of each axis so reruns agree.
    for row in components:
        if row[np.argmax(np.abs(row))] < 0:
            row *= -1.0
    coords = centered @ components.T
    labels = [row[c] if row[c] is not None else "" for row in table.slot_labels]

    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    csv_path = out_path.with_suffix(".csv")
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["segment_id", "label", "x", "y"])
        for seg_id, label, (x, y) in zip(table.segment_ids, labels, coords):
            writer.writerow([seg_id, label, f"{x:.8g}", f"{y:.8g}"])

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    unique = sorted(set(labels))
    cmap = plt.get_cmap("tab10")
    fig, ax = plt.subplots(figsize=(6, 5))
    for i, label in enumerate(unique):
        pick = [j for j, lb in enumerate(labels) if lb == label]
        ax.scatter(
            coords[pick, 0],
            coords[pick, 1],
            s=12,
            color=cmap(i % 10),
            label=str(label),
        )
    ax.set_title(f"{INSTRUMENTS[c]} subspace")
    ax.legend(fontsize=6, markerscale=0.8, ncol=2)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path, csv_path


def write_csv_report(path, rows: list[dict], fieldnames: list[str]) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def write_json_summary(path, payload: dict) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
