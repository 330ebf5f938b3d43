"""Pseudo-piece triplet construction, role swaps, epoch plans, mix plans."""

import numpy as np
import pytest

from partsim import INSTRUMENTS, sampler
from partsim.corpus import StemTrack
from partsim.sampler import PieceSpec, Slot, TripletSpec


def make_track(track_id, tempo=120.0, sr=4000, seconds=4.0, silent=(), seed=None):
    rng = np.random.default_rng(abs(hash(track_id)) % 2**32 if seed is None else seed)
    n = int(seconds * sr)
    stems = {
        name: np.zeros(n, dtype=np.float32)
        if name in silent
        else (rng.standard_normal(n) * 0.1).astype(np.float32)
        for name in INSTRUMENTS
    }
    return StemTrack.from_arrays(track_id, tempo, "train", stems, sr)


@pytest.fixture
def pool():
    return [make_track(f"t{i}", tempo=120.0) for i in range(6)]


class TestPartialMixPlan:
    def test_only_present_instruments_survive(self):
        track = make_track("solo", silent=("bass", "piano", "guitar", "others"))
        rng = np.random.default_rng(0)
        for _ in range(20):
            flags = sampler.make_partial_mix_plan(track, rng)
            np.testing.assert_array_equal(flags, [True, False, False, False, False])

    def test_full_probability_keeps_everything(self):
        track = make_track("full")
        flags = sampler.make_partial_mix_plan(track, np.random.default_rng(1), p_incl=1.0)
        assert flags.all()

    def test_never_empty(self):
        track = make_track("x")
        rng = np.random.default_rng(2)
        for _ in range(200):
            assert sampler.make_partial_mix_plan(track, rng, p_incl=0.05).any()

    def test_all_silent_track_is_error(self):
        track = make_track("mute", silent=INSTRUMENTS)
        with pytest.raises(ValueError, match="no present instruments"):
            sampler.make_partial_mix_plan(track, np.random.default_rng(3))

    def test_seeded_determinism(self):
        track = make_track("d")
        a = sampler.make_partial_mix_plan(track, np.random.default_rng(7), p_incl=0.5)
        b = sampler.make_partial_mix_plan(track, np.random.default_rng(7), p_incl=0.5)
        np.testing.assert_array_equal(a, b)


class TestBasicTriplet:
    def test_label_pattern(self, pool):
        spec = sampler.make_pseudo_triplet(pool, 0, np.random.default_rng(4), length_s=1.0, p_incl=1.0)
        a, p, n = spec.anchor.slots, spec.positive.slots, spec.negative.slots
        x = a[0].track_id
        y = a[1].track_id
        z = p[1].track_id
        w = n[0].track_id
        assert len({x, y, z, w}) == 4  # four distinct tracks
        assert p[0].track_id == x
        assert all(a[j].track_id == y for j in range(1, 5))
        assert all(p[j].track_id == z for j in range(1, 5))
        assert all(n[j].track_id == y for j in range(1, 5))
        sampler.validate_basic(spec)

    def test_anchor_negative_share_all_but_c(self, pool):
        rng = np.random.default_rng(5)
        for _ in range(50):
            c = int(rng.integers(5))
            spec = sampler.make_pseudo_triplet(pool, c, rng, length_s=1.0)
            for j in range(5):
                a_slot = spec.anchor.slots[j]
                n_slot = spec.negative.slots[j]
                if j == c:
                    assert a_slot.track_id != n_slot.track_id
                else:
                    a_id = a_slot.track_id if a_slot else None
                    n_id = n_slot.track_id if n_slot else None
                    assert a_id == n_id

    def test_seeded_determinism(self, pool):
        a = sampler.make_pseudo_triplet(pool, 2, np.random.default_rng(6), length_s=1.0)
        b = sampler.make_pseudo_triplet(pool, 2, np.random.default_rng(6), length_s=1.0)
        assert a == b

    def test_small_pool_error_names_class(self, pool):
        with pytest.raises(ValueError, match="tempo class 16"):
            sampler.make_pseudo_triplet(pool[:3], 0, np.random.default_rng(7),
                                        tempo_class=16)

    def test_windows_inside_tracks(self, pool):
        rng = np.random.default_rng(8)
        for _ in range(30):
            spec = sampler.make_pseudo_triplet(pool, 1, rng, length_s=1.0)
            for piece in (spec.anchor, spec.positive, spec.negative):
                for slot in piece.slots:
                    if slot:
                        assert 0.0 <= slot.start_s <= 4.0 - 1.0


class TestAdditionalTriplet:
    def test_roles_swap_and_condition_changes(self, pool):
        rng = np.random.default_rng(9)
        basic = sampler.make_pseudo_triplet(pool, 0, rng, length_s=1.0, p_incl=1.0)
        extra = sampler.make_additional_triplet(basic, rng)
        assert extra.kind == "additional"
        assert extra.anchor == basic.anchor
        assert extra.positive == basic.negative
        assert extra.negative == basic.positive
        assert extra.c != basic.c
        # Anchor and its new positive share the new condition slot.
        assert (
            extra.anchor.slots[extra.c].track_id
            == extra.positive.slots[extra.c].track_id
        )
        assert (
            extra.anchor.slots[extra.c].track_id
            != extra.negative.slots[extra.c].track_id
        )

    def test_condition_only_from_filled_slots(self, pool):
        rng = np.random.default_rng(10)
        for _ in range(50):
            basic = sampler.make_pseudo_triplet(pool, 3, rng, length_s=1.0, p_incl=0.5)
            extra = sampler.make_additional_triplet(basic, rng)
            if extra is None:
                assert all(
                    basic.anchor.slots[j] is None for j in range(5) if j != 3
                )
            else:
                assert basic.anchor.slots[extra.c] is not None

    def test_bare_anchor_gives_skip(self):
        lone = PieceSpec(slots=(Slot("a", 0.0), None, None, None, None))
        other = PieceSpec(slots=(Slot("b", 0.0), None, None, None, None))
        basic = TripletSpec(anchor=lone, positive=lone, negative=other,
                            c=0, kind="basic", length_s=1.0)
        assert sampler.make_additional_triplet(basic, np.random.default_rng(0)) is None

    def test_seeded_determinism(self, pool):
        basic = sampler.make_pseudo_triplet(pool, 0, np.random.default_rng(11), length_s=1.0)
        a = sampler.make_additional_triplet(basic, np.random.default_rng(12))
        b = sampler.make_additional_triplet(basic, np.random.default_rng(12))
        assert a == b


class TestTempoPools:
    def test_single_class_single_pool(self):
        tracks = [make_track(f"t{i}", tempo=100.0) for i in range(5)]
        pools = sampler.tempo_pools(tracks)
        assert len(pools) == 1 and len(pools[0]) == 5

    def test_sparse_classes_merge_to_nearest(self):
        tracks = [make_track(f"a{i}", tempo=42.0) for i in range(3)]
        tracks += [make_track(f"b{i}", tempo=47.0) for i in range(2)]
        tracks += [make_track(f"c{i}", tempo=180.0) for i in range(4)]
        pools = sampler.tempo_pools(tracks)
        sizes = sorted(len(p) for p in pools)
        assert sizes == [4, 5]  # the two slow classes merged, fast one intact

    def test_too_few_tracks_is_error(self):
        tracks = [make_track(f"t{i}", tempo=100.0) for i in range(3)]
        with pytest.raises(ValueError, match="need 4"):
            sampler.tempo_pools(tracks)


class TestEpochPlan:
    def test_counts_and_condition_cycling(self, pool):
        pairs = sampler.build_epoch(pool, 23, np.random.default_rng(13), length_s=1.0)
        assert len(pairs) == 23
        counts = np.bincount([b.c for b, _ in pairs], minlength=5)
        assert counts.max() - counts.min() <= 1

    def test_every_basic_is_valid(self, pool):
        pairs = sampler.build_epoch(pool, 50, np.random.default_rng(14), length_s=1.0)
        by_id = {t.track_id: t for t in pool}
        for basic, extra in pairs:
            sampler.validate_basic(basic)
            sampler.validate_tempo_consistency(basic, by_id)
            if extra is not None:
                assert extra.anchor == basic.anchor
                assert extra.positive == basic.negative

    def test_epochs_differ(self, pool):
        a = sampler.build_epoch(pool, 10, np.random.default_rng(15), length_s=1.0)
        b = sampler.build_epoch(pool, 10, np.random.default_rng(16), length_s=1.0)
        assert a != b

    def test_no_additional_mode(self, pool):
        pairs = sampler.build_epoch(pool, 10, np.random.default_rng(17),
                                    length_s=1.0, use_additional=False)
        assert all(extra is None for _, extra in pairs)

    def test_dataset_mode(self, pool):
        pairs = sampler.build_epoch(pool, 15, np.random.default_rng(18),
                                    length_s=1.0, use_pseudo=False)
        for basic, extra in pairs:
            assert extra is None
            ids_a = {s.track_id for s in basic.anchor.slots}
            ids_p = {s.track_id for s in basic.positive.slots}
            ids_n = {s.track_id for s in basic.negative.slots}
            assert len(ids_a) == 1 and ids_a == ids_p
            assert ids_n != ids_a

    def test_dataset_mode_requires_instrument(self):
        tracks = [make_track(f"t{i}", silent=("drums",)) for i in range(4)]
        with pytest.raises(ValueError, match="drums"):
            sampler.make_dataset_triplet(tracks, 0, np.random.default_rng(19), 1.0)


class TestSerialization:
    def test_jsonl_round_trip(self, pool, tmp_path):
        pairs = sampler.build_epoch(pool, 12, np.random.default_rng(20), length_s=1.0)
        path = tmp_path / "epoch.jsonl"
        sampler.write_epoch_jsonl(path, pairs)
        loaded = sampler.read_epoch_jsonl(path)
        assert loaded == pairs

    def test_realize_piece_mixes_sources(self, pool):
        by_id = {t.track_id: t for t in pool}
        piece = PieceSpec(
            slots=(
                Slot("t0", 0.5),
                Slot("t1", 1.0),
                None,
                None,
                None,
            )
        )
        audio, presence = sampler.realize_piece(piece, by_id, 1.0)
        expected = by_id["t0"].stem_window("drums", 0.5, 1.0) + by_id[
            "t1"
        ].stem_window("bass", 1.0, 1.0)
        peak = np.abs(expected).max()
        if peak > 1.0:
            expected = expected * (0.95 / peak)
        np.testing.assert_allclose(audio, expected, atol=1e-7)
        np.testing.assert_array_equal(presence, [1, 1, 0, 0, 0])
