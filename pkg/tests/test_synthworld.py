import dataclasses

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from anyshot.geometry import box_iou
from anyshot.synthworld import (
    BUDGET_CONVERSION,
    WorldConfig,
    budget_allocate,
    count_novel_instances,
    dataset_to_json,
    generate_dataset,
    load_dataset,
    make_geometry_frames,
    mask_from_str,
    mask_template,
    mask_to_str,
    novel_parents,
    sample_kshot,
    save_dataset,
)


class TestConfig:
    def test_defaults(self):
        c = WorldConfig()
        assert (c.num_classes, c.num_base, c.feature_dim, c.images_train, c.images_test) == (8, 5, 32, 200, 100)

    def test_lists_every_violation(self):
        with pytest.raises(ValueError) as err:
            generate_dataset(WorldConfig(num_base=8, images_train=0, feature_noise=-1))
        msg = str(err.value)
        assert "num_base" in msg and "images_train" in msg and "feature_noise" in msg

    def test_unknown_key(self):
        with pytest.raises(ValueError, match="colour"):
            WorldConfig.from_dict({"colour": 1})


class TestGenerate:
    def test_counts(self, small_world):
        assert len(small_world.train) == 24 and len(small_world.test) == 12
        ids = [r.image_id for r in small_world.train + small_world.test]
        assert len(set(ids)) == len(ids)

    def test_deterministic_bytes(self, tmp_path):
        cfg = WorldConfig(images_train=10, images_test=5, seed=9)
        save_dataset(generate_dataset(cfg), tmp_path / "a.json")
        save_dataset(generate_dataset(cfg), tmp_path / "b.json")
        assert (tmp_path / "a.json").read_bytes() == (tmp_path / "b.json").read_bytes()

    def test_seed_changes_data(self):
        a = generate_dataset(WorldConfig(images_train=3, images_test=1, seed=1))
        b = generate_dataset(WorldConfig(images_train=3, images_test=1, seed=2))
        assert not np.array_equal(a.train[0].features, b.train[0].features)

    def test_prefix_stable(self):
        # per-image seeding: more images never changes the earlier ones
        a = generate_dataset(WorldConfig(images_train=5, images_test=1))
        b = generate_dataset(WorldConfig(images_train=8, images_test=1))
        for ra, rb in zip(a.train, b.train):
            np.testing.assert_array_equal(ra.features, rb.features)

    def test_label_consistency_and_recall(self, default_world):
        C = default_world.split.num_classes
        for r in default_world.train + default_world.test:
            present = np.zeros(C, dtype=np.int64)
            for a in r.annotations:
                present[a.class_id] = 1
                assert a.mask.any()
                assert box_iou(r.boxes, a.box).max() >= 0.5
            np.testing.assert_array_equal(r.labels, present)
            assert np.all(np.isfinite(r.features))
            assert np.all((r.boxes >= 0) & (r.boxes <= 1))

    def test_split_disjoint(self, default_world):
        s = default_world.split
        assert not set(s.base) & set(s.novel)
        assert (s.num_base, s.num_novel) == (5, 3)

    def test_proposal_count(self, small_world):
        cfg = small_world.config
        for r in small_world.train:
            per_obj = 1 + cfg.part_proposals_per_object
            assert r.num_proposals == per_obj * len(r.annotations) + cfg.negative_proposals_per_image

    def test_lingual_tracks_parent(self, default_world):
        from anyshot.similarity import lingual_matrix

        s_lin = lingual_matrix(default_world.split, default_world.embeddings, normalize=True)
        for n, p in novel_parents(8, 5).items():
            assert np.argmax(s_lin[n - 5]) == p

    def test_json_round_trip(self, small_world, tmp_path):
        save_dataset(small_world, tmp_path / "d.json")
        back = load_dataset(tmp_path / "d.json")
        assert back.split == small_world.split
        assert dataset_to_json(back) == dataset_to_json(small_world)


class TestMasks:
    @pytest.mark.parametrize("family", ["rectangle", "ellipse"])
    def test_template_nonempty(self, family):
        m = mask_template(family)
        assert m.shape == (14, 14) and 0 < m.sum() < 196

    def test_string_round_trip(self):
        m = mask_template("ellipse")
        assert len(mask_to_str(m)) == 196
        np.testing.assert_array_equal(mask_from_str(mask_to_str(m)), m)

    def test_bad_string(self):
        with pytest.raises(ValueError):
            mask_from_str("01" * 10)


class TestFrames:
    def test_orthogonal_and_shared(self):
        f = make_geometry_frames(WorldConfig())
        for q in f:
            np.testing.assert_allclose(q @ q.T, np.eye(4), atol=1e-12)
        for n, p in novel_parents(8, 5).items():
            np.testing.assert_array_equal(f[n], f[p])

    def test_identity_when_off(self):
        f = make_geometry_frames(WorldConfig(class_geometry_frames=False))
        np.testing.assert_array_equal(f, np.tile(np.eye(4), (8, 1, 1)))


class TestKShot:
    def test_zero(self, default_world):
        assert sample_kshot(default_world.train, default_world.split, 0, 0) == []

    def test_five_shot_count(self, default_world):
        views = sample_kshot(default_world.train, default_world.split, 5, 0)
        counts = count_novel_instances(views, default_world.split)
        assert counts == {5: 5, 6: 5, 7: 5}
        assert sum(counts.values()) == 15

    def test_seeds_differ(self, default_world):
        def picks(seed):
            views = sample_kshot(default_world.train, default_world.split, 3, seed)
            return {(v.image_id, tuple(a.box)) for v in views for a in v.annotations if a.class_id >= 5}

        a, b = picks(0), picks(1)
        assert len(a) == len(b) == 9
        assert a != b

    def test_insufficient(self, small_world):
        with pytest.raises(ValueError, match="class"):
            sample_kshot(small_world.train, small_world.split, 1000, 0)

    @settings(max_examples=20)
    @given(st.integers(1, 8), st.integers(0, 10_000))
    def test_exact_k_and_base_kept(self, default_world, k, seed):
        views = sample_kshot(default_world.train, default_world.split, k, seed)
        assert set(count_novel_instances(views, default_world.split).values()) == {k}
        by_id = {r.image_id: r for r in default_world.train}
        for v in views:
            src = by_id[v.image_id]
            assert [a.class_id for a in src.annotations if a.class_id < 5] == [
                a.class_id for a in v.annotations if a.class_id < 5
            ]


class TestBudget:
    @pytest.mark.parametrize("f,k,n_weak", [(1.0, 0, 70), (0.0, 10, 0), (0.5, 5, 35)])
    def test_allocations(self, default_world, f, k, n_weak):
        alloc = budget_allocate(default_world.train, default_world.split, 10, f, 0)
        assert alloc.k == k
        assert len(alloc.weak_image_ids) == n_weak == BUDGET_CONVERSION * round(f * 10)
        assert set(count_novel_instances(alloc.shots, default_world.split).values()) <= {k}
        shot_ids = {v.image_id for v in alloc.shots}
        assert not shot_ids & set(alloc.weak_image_ids)
        novel = default_world.split.novel_ids
        for r in alloc.train:
            visible = r.known_labels()[novel].all()
            assert visible == (r.image_id in alloc.weak_image_ids or r.image_id in shot_ids)
            assert r.known_labels()[default_world.split.base_ids].all()

    def test_infeasible(self, small_world):
        with pytest.raises(ValueError, match="only"):
            budget_allocate(small_world.train, small_world.split, 40, 1.0, 0)

    @pytest.mark.parametrize("f", [-0.1, 1.5])
    def test_bad_fraction(self, small_world, f):
        with pytest.raises(ValueError):
            budget_allocate(small_world.train, small_world.split, 10, f, 0)

    def test_does_not_mutate(self, default_world):
        before = [r.label_mask for r in default_world.train]
        budget_allocate(default_world.train, default_world.split, 10, 1.0, 0)
        assert [r.label_mask for r in default_world.train] == before
