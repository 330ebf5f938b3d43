"""Masks, masked distances, encoder forward contracts, checkpoints."""

import json

import numpy as np
import pytest

from partsim import encoder as enc
from partsim.encoder import EncoderConfig, SpectrogramEncoder

DESK = EncoderConfig(
    n_mels=64,
    subspace_dim=16,
    channels=(8, 8, 12, 12, 16, 16, 24, 24, 32, 32),
)


def desk_encoder(seed=0, output_dim=None):
    return SpectrogramEncoder(DESK, np.random.default_rng(seed), output_dim=output_dim)


class TestMasks:
    def test_first_subspace(self):
        mask = enc.build_mask(0, 2)
        np.testing.assert_array_equal(mask.m, [1, 1, 0, 0, 0, 0, 0, 0, 0, 0])

    def test_last_subspace(self):
        mask = enc.build_mask(4, 2)
        np.testing.assert_array_equal(mask.m, [0, 0, 0, 0, 0, 0, 0, 0, 1, 1])

    def test_masks_partition_all_dimensions(self):
        for D in (1, 2, 16, 128):
            total = sum(enc.build_mask(c, D).m for c in range(5))
            np.testing.assert_array_equal(total, np.ones(5 * D))
            for c in range(5):
                assert enc.build_mask(c, D).m.sum() == D

    def test_invalid_inputs(self):
        with pytest.raises(ValueError):
            enc.build_mask(5, 2)
        with pytest.raises(ValueError):
            enc.build_mask(-1, 2)
        with pytest.raises(ValueError):
            enc.build_mask(0, 0)


class TestMaskedDistance:
    def test_identical_embeddings(self):
        v = np.arange(10.0)
        assert enc.masked_distance(v, v, 3) == 0.0

    def test_differences_outside_subspace_ignored(self):
        a = np.zeros(10)
        b = np.zeros(10)
        b[2:] = 99.0  # condition 0 spans dims 0..1 when D=2
        assert enc.masked_distance(a, b, 0) == 0.0

    def test_three_four_five(self):
        a = np.zeros(10)
        b = np.zeros(10)
        b[2], b[3] = 3.0, 4.0  # condition 1 subspace when D=2
        assert enc.masked_distance(a, b, 1) == pytest.approx(5.0)

    def test_subspaces_partition_full_distance(self):
        rng = np.random.default_rng(0)
        for D in (1, 2, 16, 128):
            a = rng.standard_normal(5 * D)
            b = rng.standard_normal(5 * D)
            total = sum(enc.masked_distance(a, b, c) ** 2 for c in range(5))
            assert total == pytest.approx(float(((a - b) ** 2).sum()), rel=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            enc.masked_distance(np.zeros(10), np.zeros(15), 0)
        with pytest.raises(ValueError):
            enc.masked_distance(np.zeros(7), np.zeros(7), 0)

    def test_subspace_slices_reassemble(self):
        v = np.arange(20.0)
        parts = [enc.subspace(v, c) for c in range(5)]
        np.testing.assert_array_equal(np.concatenate(parts), v)


class TestEncoderForward:
    def test_output_shape_and_finiteness(self):
        model = desk_encoder()
        grams = np.random.default_rng(1).standard_normal((2, 64, 126)).astype(np.float32)
        out = model.forward(grams, train=False)
        assert out.shape == (2, 80)
        assert np.isfinite(out).all()

    def test_default_config_gives_640(self):
        model = SpectrogramEncoder(EncoderConfig(), np.random.default_rng(2))
        gram = np.random.default_rng(3).standard_normal((128, 126)).astype(np.float32)
        out = model.encode(gram)
        assert out.shape == (640,)
        assert np.isfinite(out).all()

    def test_eval_mode_is_deterministic(self):
        model = desk_encoder()
        gram = np.random.default_rng(4).standard_normal((64, 126)).astype(np.float32)
        np.testing.assert_array_equal(model.encode(gram), model.encode(gram))

    def test_time_average_permutation_invariance(self):
        model = desk_encoder()
        grams = np.random.default_rng(5).standard_normal((1, 64, 126)).astype(np.float32)
        fmap = model.feature_map(grams)
        out = model.head_only(fmap)
        perm = np.random.default_rng(6).permutation(fmap.shape[3])
        out_permuted = model.head_only(fmap[:, :, :, perm])
        np.testing.assert_allclose(out, out_permuted, rtol=1e-5, atol=1e-6)

    def test_shape_mismatch_rejected(self):
        model = desk_encoder()
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 32, 126), dtype=np.float32), train=False)
        with pytest.raises(ValueError):
            model.forward(np.zeros((2, 64, 20), dtype=np.float32), train=False)

    def test_bounded_inputs_give_finite_outputs(self):
        model = desk_encoder()
        rng = np.random.default_rng(7)
        for _ in range(5):
            grams = rng.uniform(-10, 10, size=(2, 64, 126)).astype(np.float32)
            assert np.isfinite(model.forward(grams, train=True)).all()

    def test_invalid_config_rejected(self):
        with pytest.raises(ValueError):
            EncoderConfig(n_mels=16).validate()  # pools collapse to zero height
        with pytest.raises(ValueError):
            EncoderConfig(subspace_dim=0).validate()
        with pytest.raises(ValueError):
            EncoderConfig(channels=(8, 8, 8)).validate()


class TestTeachers:
    def test_untrained_teacher_rejected(self):
        teacher = desk_encoder(output_dim=16)
        gram = np.zeros((64, 126), dtype=np.float32)
        with pytest.raises(RuntimeError):
            enc.teacher_encode(teacher, gram)

    def test_trained_teacher_shape_and_determinism(self):
        teacher = desk_encoder(seed=8, output_dim=16)
        teacher.trained = True
        gram = np.random.default_rng(9).standard_normal((64, 126)).astype(np.float32)
        out = enc.teacher_encode(teacher, gram)
        assert out.shape == (16,)
        np.testing.assert_array_equal(out, enc.teacher_encode(teacher, gram))

    def test_distinct_teachers_differ(self):
        gram = np.random.default_rng(10).standard_normal((64, 126)).astype(np.float32)
        a = desk_encoder(seed=11, output_dim=16)
        b = desk_encoder(seed=12, output_dim=16)
        a.trained = b.trained = True
        assert not np.allclose(enc.teacher_encode(a, gram), enc.teacher_encode(b, gram))


class TestCheckpoints:
    def test_round_trip_is_bit_exact(self, tmp_path):
        model = desk_encoder(seed=13)
        # Perturb running stats so the buffers round-trip too.
        grams = np.random.default_rng(14).standard_normal((2, 64, 126)).astype(np.float32)
        model.forward(grams, train=True)
        path = tmp_path / "enc.ckpt"
        enc.save_checkpoint(
            path,
            model,
            extra_arrays={"bias_terms": np.arange(5.0)},
            meta={"corpus_hash": "abc", "run_id": "r1"},
        )
        loaded, extra, meta = enc.load_checkpoint(path)
        assert meta == {"corpus_hash": "abc", "run_id": "r1"}
        np.testing.assert_array_equal(extra["bias_terms"], np.arange(5.0))
        assert loaded.trained
        np.testing.assert_array_equal(
            model.forward(grams, train=False), loaded.forward(grams, train=False)
        )
        for key, value in model.state_dict().items():
            np.testing.assert_array_equal(value, loaded.state_dict()[key])

    def test_version_mismatch_rejected(self, tmp_path):
        model = desk_encoder()
        path = tmp_path / "enc.ckpt"
        enc.save_checkpoint(path, model)
        with np.load(path) as data:
            arrays = {k: data[k] for k in data.files}
        header = json.loads(bytes(arrays["__header__"]).decode())
        header["version"] = 99
        arrays["__header__"] = np.frombuffer(json.dumps(header).encode(), np.uint8)
        with open(path, "wb") as fh:
            np.savez(fh, **arrays)
        with pytest.raises(ValueError, match="version"):
            enc.load_checkpoint(path)

    def test_teacher_checkpoint_keeps_output_dim(self, tmp_path):
        teacher = desk_encoder(seed=15, output_dim=16)
        path = tmp_path / "teacher.ckpt"
        enc.save_checkpoint(path, teacher)
        loaded, _, _ = enc.load_checkpoint(path)
        assert loaded.output_dim == 16
        gram = np.random.default_rng(16).standard_normal((64, 126)).astype(np.float32)
        np.testing.assert_array_equal(
            teacher.encode(gram), enc.teacher_encode(loaded, gram)
        )
