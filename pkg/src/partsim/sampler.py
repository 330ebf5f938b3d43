"""Pseudo musical pieces and triplet construction.

A pseudo piece fills each instrument slot from a (possibly different)
source track within one tempo class. A basic triplet under condition c
uses four tracks X, Y, Z, W: anchor takes instrument c from X and the
remaining slots from Y, the positive keeps c from X but fills the rest
from Z, and the negative swaps in W for instrument c while keeping Y
elsewhere. Because anchor and negative share every non-c slot, swapping
the positive and negative roles under another condition yields a second
valid triplet from the same three pieces.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import INSTRUMENTS
from .corpus import SILENCE_THRESHOLD_DB, StemTrack, assign_tempo_class, detect_presence, mix_stems

log = logging.getLogger(__name__)

N_SLOTS = len(INSTRUMENTS)
MIN_POOL = 4  # X, Y, Z, W must be distinct tracks
DEFAULT_P_INCLUDE = 0.8


@dataclass(frozen=True)
class Slot:
    """One filled instrument slot: which track, and where its window starts."""

    track_id: str
    start_s: float


@dataclass(frozen=True)
class PieceSpec:
    """A pseudo piece: per-instrument slots, None where nothing plays."""

    slots: tuple[Slot | None, ...]

    def label(self) -> tuple[str | None, ...]:
        return tuple(s.track_id if s else None for s in self.slots)

    def source_tracks(self) -> set[str]:
        return {s.track_id for s in self.slots if s}


@dataclass(frozen=True)
class TripletSpec:
    anchor: PieceSpec
    positive: PieceSpec
    negative: PieceSpec
    c: int
    kind: str  # "basic" or "additional"
    length_s: float

    def to_dict(self) -> dict:
        def piece(p):
            return [[s.track_id, s.start_s] if s else None for s in p.slots]

        return {
            "anchor": piece(self.anchor),
            "positive": piece(self.positive),
            "negative": piece(self.negative),
            "c": self.c,
            "kind": self.kind,
            "length_s": self.length_s,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TripletSpec":
        def piece(entries):
            return PieceSpec(
                slots=tuple(
                    Slot(track_id=e[0], start_s=float(e[1])) if e else None
                    for e in entries
                )
            )

        return cls(
            anchor=piece(d["anchor"]),
            positive=piece(d["positive"]),
            negative=piece(d["negative"]),
            c=int(d["c"]),
            kind=d["kind"],
            length_s=float(d["length_s"]),
        )


def track_presence(track: StemTrack, threshold_db: float = SILENCE_THRESHOLD_DB) -> np.ndarray:
    """Track-level presence: the stem is audible over the whole track
    (missing stem files read as silence and therefore count as absent)."""
    return np.array(
        [detect_presence(track.stem(name), threshold_db) for name in INSTRUMENTS],
        dtype=np.int64,
    )


def make_partial_mix_plan(
    track: StemTrack,
    rng: np.random.Generator,
    p_incl: float = DEFAULT_P_INCLUDE,
    threshold_db: float = SILENCE_THRESHOLD_DB,
) -> np.ndarray:
    """Independent keep/drop flags over the track's present instruments;
    resampled until at least one stays in."""
    present = track_presence(track, threshold_db).astype(bool)
    if not present.any():
        raise ValueError(f"track {track.track_id} has no present instruments")
    while True:
        flags = present & (rng.random(N_SLOTS) < p_incl)
        if flags.any():
            return flags


def _draw_start(track: StemTrack, length_s: float, rng: np.random.Generator) -> float:
    room = track.duration_s - length_s
    if room < 0:
        raise ValueError(
            f"track {track.track_id} of {track.duration_s:.2f} s too short "
            f"for {length_s} s windows"
        )
    return float(rng.uniform(0.0, room)) if room > 0 else 0.0


def make_pseudo_triplet(
    pool: list[StemTrack],
    c: int,
    rng: np.random.Generator,
    length_s: float = 3.0,
    p_incl: float = DEFAULT_P_INCLUDE,
    tempo_class: object = None,
) -> TripletSpec:
    """One basic triplet from four distinct tracks of one tempo pool.

    Window starts are drawn independently for every (piece, source track)
    pairing; the non-c slot pattern is drawn once per else-source and
    shared where the construction demands it (anchor vs negative).
    """
    if len(pool) < MIN_POOL:
        raise ValueError(
            f"tempo class {tempo_class if tempo_class is not None else '?'}: "
            f"pool has {len(pool)} tracks, need {MIN_POOL}"
        )
    if not 0 <= c < N_SLOTS:
        raise ValueError(f"condition {c} out of range")
    x, y, z, w = (pool[i] for i in rng.choice(len(pool), size=4, replace=False))

    plan_y = make_partial_mix_plan(y, rng, p_incl)
    plan_z = make_partial_mix_plan(z, rng, p_incl)

    def piece(c_track: StemTrack, else_track: StemTrack, else_plan) -> PieceSpec:
        c_start = _draw_start(c_track, length_s, rng)
        else_start = _draw_start(else_track, length_s, rng)
        slots: list[Slot | None] = []
        for j in range(N_SLOTS):
            if j == c:
                slots.append(Slot(c_track.track_id, c_start))
            elif else_plan[j]:
                slots.append(Slot(else_track.track_id, else_start))
            else:
                slots.append(None)
        return PieceSpec(slots=tuple(slots))

    return TripletSpec(
        anchor=piece(x, y, plan_y),
        positive=piece(x, z, plan_z),
        negative=piece(w, y, plan_y),
        c=c,
        kind="basic",
        length_s=length_s,
    )


def make_additional_triplet(
    basic: TripletSpec, rng: np.random.Generator
) -> TripletSpec | None:
    """Swap positive and negative under a new condition drawn from the
    anchor's filled non-c slots; None when no such slot exists."""
    if basic.kind != "basic":
        raise ValueError("additional triplets derive from basic triplets")
    candidates = [
        j
        for j in range(N_SLOTS)
        if j != basic.c and basic.anchor.slots[j] is not None
    ]
    if not candidates:
        return None
    c_new = int(rng.choice(candidates))
    return TripletSpec(
        anchor=basic.anchor,
        positive=basic.negative,
        negative=basic.positive,
        c=c_new,
        kind="additional",
        length_s=basic.length_s,
    )


def make_dataset_triplet(
    tracks: list[StemTrack],
    c: int,
    rng: np.random.Generator,
    length_s: float = 3.0,
    threshold_db: float = SILENCE_THRESHOLD_DB,
) -> TripletSpec:
    """Plain corpus triplet (no pseudo pieces): anchor and positive are
    different windows of one track, the negative is another track; both
    tracks must actually play instrument c."""
    eligible = [t for t in tracks if track_presence(t, threshold_db)[c]]
    if len(eligible) < 2:
        raise ValueError(
            f"need 2 tracks with {INSTRUMENTS[c]} present, found {len(eligible)}"
        )
    a, b = (eligible[i] for i in rng.choice(len(eligible), size=2, replace=False))

    def whole_piece(track: StemTrack) -> PieceSpec:
        start = _draw_start(track, length_s, rng)
        return PieceSpec(
            slots=tuple(Slot(track.track_id, start) for _ in range(N_SLOTS))
        )

    return TripletSpec(
        anchor=whole_piece(a),
        positive=whole_piece(a),
        negative=whole_piece(b),
        c=c,
        kind="basic",
        length_s=length_s,
    )


def tempo_pools(
    tracks: list[StemTrack], min_size: int = MIN_POOL
) -> list[list[StemTrack]]:
    """Group tracks by tempo class, merging undersized classes into their
    nearest occupied neighbor until every pool can form triplets."""
    bins: dict[int, list[StemTrack]] = {}
    for track in tracks:
        bins.setdefault(assign_tempo_class(track.tempo_bpm), []).append(track)
    if sum(len(v) for v in bins.values()) < min_size:
        raise ValueError(
            f"corpus has {len(tracks)} usable tracks, need {min_size} in one tempo class"
        )
    # Pools are keyed by the sorted tuple of classes they absorbed.
    pools: dict[tuple[int, ...], list[StemTrack]] = {
        (k,): v for k, v in sorted(bins.items())
    }
    while True:
        undersized = [k for k, v in sorted(pools.items()) if len(v) < min_size]
        if not undersized or len(pools) == 1:
            break
        key = undersized[0]
        center = np.mean(key)
        others = [k for k in pools if k != key]
        nearest = min(others, key=lambda k: (abs(np.mean(k) - center), k))
        pools[tuple(sorted(nearest + key))] = pools.pop(nearest) + pools.pop(key)
    merged = [v for _, v in sorted(pools.items())]
    if any(len(v) < min_size for v in merged):
        raise ValueError(
            f"even after merging, largest tempo pool has "
            f"{max(len(v) for v in merged)} tracks, need {min_size}"
        )
    return merged


def build_epoch(
    tracks: list[StemTrack],
    n_triplets: int,
    rng: np.random.Generator,
    length_s: float = 3.0,
    p_incl: float = DEFAULT_P_INCLUDE,
    use_pseudo: bool = True,
    use_additional: bool = True,
) -> list[tuple[TripletSpec, TripletSpec | None]]:
    """One epoch's plan: basic triplets with conditions cycling 0..4, one
    additional triplet attempted per basic (pseudo mode only)."""
    usable = [t for t in tracks if t.duration_s >= length_s]
    dropped = len(tracks) - len(usable)
    if dropped:
        log.warning("%d tracks shorter than %.0f s skipped", dropped, length_s)
    pairs: list[tuple[TripletSpec, TripletSpec | None]] = []
    if use_pseudo:
        pools = tempo_pools(usable)
        sizes = np.array([len(p) for p in pools], dtype=np.float64)
        weights = sizes / sizes.sum()
        for i in range(n_triplets):
            c = i % N_SLOTS
            pool = pools[int(rng.choice(len(pools), p=weights))]
            basic = make_pseudo_triplet(pool, c, rng, length_s, p_incl)
            extra = make_additional_triplet(basic, rng) if use_additional else None
            pairs.append((basic, extra))
    else:
        if len(usable) < 2:
            raise ValueError("need at least 2 usable tracks")
        for i in range(n_triplets):
            c = i % N_SLOTS
            pairs.append((make_dataset_triplet(usable, c, rng, length_s), None))
    return pairs


def validate_basic(spec: TripletSpec) -> None:
    """Raises unless the label pattern matches the basic-triplet contract."""
    c = spec.c
    a, p, n = spec.anchor.slots, spec.positive.slots, spec.negative.slots
    if a[c] is None or p[c] is None or n[c] is None:
        raise AssertionError("condition slot must be filled in all three pieces")
    if a[c].track_id != p[c].track_id:
        raise AssertionError("anchor and positive must share the condition source")
    if a[c].track_id == n[c].track_id:
        raise AssertionError("negative must differ from the anchor in slot c")
    for j in range(N_SLOTS):
        if j == c:
            continue
        a_track = a[j].track_id if a[j] else None
        n_track = n[j].track_id if n[j] else None
        if a_track != n_track:
            raise AssertionError(f"anchor and negative disagree on slot {j}")


def validate_tempo_consistency(spec: TripletSpec, tracks_by_id: dict[str, StemTrack]) -> None:
    """Raises unless all tracks used by the triplet share one tempo pool.

    Merged pools make distinct classes legitimate; this checks the strict
    version and is used on corpora whose pools did not merge.
    """
    classes = {
        assign_tempo_class(tracks_by_id[tid].tempo_bpm)
        for piece in (spec.anchor, spec.positive, spec.negative)
        for tid in piece.source_tracks()
    }
    if len(classes) > 1:
        raise AssertionError(f"triplet spans tempo classes {sorted(classes)}")


def realize_piece(
    piece: PieceSpec,
    tracks_by_id: dict[str, StemTrack],
    length_s: float,
    threshold_db: float = SILENCE_THRESHOLD_DB,
) -> tuple[np.ndarray, np.ndarray]:
    """Mix a piece's slots into (audio, presence)."""
    selection = {
        j: (tracks_by_id[slot.track_id], slot.start_s)
        for j, slot in enumerate(piece.slots)
        if slot is not None
    }
    return mix_stems(selection, length_s, threshold_db)


def write_epoch_jsonl(path, pairs) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        for basic, extra in pairs:
            fh.write(json.dumps({"basic": basic.to_dict(),
                                 "additional": extra.to_dict() if extra else None}))
            fh.write("\n")


def read_epoch_jsonl(path) -> list[tuple[TripletSpec, TripletSpec | None]]:
    pairs = []
    with open(path) as fh:
        for line in fh:
            d = json.loads(line)
            pairs.append(
                (
                    TripletSpec.from_dict(d["basic"]),
                    TripletSpec.from_dict(d["additional"]) if d["additional"] else None,
                )
            )
    return pairs
