import math
import pathlib
import tempfile

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mdnpose.camera import project, world_to_camera
from mdnpose.errors import ConfigError, DimensionError, ParseError
from mdnpose.data import (NormStats, PoseDataset, Skeleton, SynthSpec, chain_skeleton, companion_path,
                          denormalize_y, load_dataset, load_stats, normalize_x, normalize_y, occlude,
                          occlusion_mask, orthogonal_cameras, reflect_depth, root_center, save_dataset, split,
                          synth_generate, synth_multiview)


def small_dataset(n=20, seed=0, mix=0.5):
    return synth_generate(SynthSpec(samples=n, seed=seed, reflection_mix=mix))


class TestSkeleton:
    def test_chain(self):
        sk = chain_skeleton(4)
        assert sk.n_joints == 5 and sk.parents == [0, 0, 1, 2, 3] and sk.limbs == [1, 2, 3, 4]

    def test_cycle_rejected(self):
        with pytest.raises(ConfigError):
            Skeleton(["a", "b", "c"], [0, 2, 1])

    def test_reference_out_of_range(self):
        with pytest.raises(ConfigError):
            Skeleton(["a", "b"], [0, 0], reference=(0, 5))

    def test_dict_round_trip(self):
        sk = chain_skeleton(3)
        assert Skeleton.from_dict(sk.to_dict()) == sk


class TestDataset:
    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            PoseDataset(np.zeros((2, 4)), np.zeros((2, 9)), chain_skeleton(1))

    def test_defaults_and_subset(self):
        ds, _ = small_dataset(6)
        assert (ds.vis).all() and (ds.cam == -1).all()
        sub = ds.subset([4, 1])
        np.testing.assert_array_equal(sub.y, ds.y[[4, 1]])


class TestNormalization:
    def test_root_center(self):
        y = np.array([1.0, 2.0, 3.0, 4.0, 6.0, 8.0])
        np.testing.assert_array_equal(root_center(y), [0, 0, 0, 3, 4, 5])

    def test_round_trip(self):
        ds, _ = small_dataset(50)
        stats = NormStats.compute(ds)
        np.testing.assert_allclose(denormalize_y(normalize_y(ds.y, stats), stats), root_center(ds.y), atol=1e-12)

    def test_constant_dimension_floored(self):
        sk = chain_skeleton(1)
        x = np.array([[0.0, 0.0, 1.0, 0.0], [0.0, 0.0, 2.0, 0.0]])
        y = np.array([[0.0, 0, 0, 1, 0, 0], [0.0, 0, 0, 2, 0, 0]])
        with pytest.warns(RuntimeWarning):
            stats = NormStats.compute(PoseDataset(x, y, sk))
        assert stats.std_x.min() == 1e-8 and stats.warnings
        assert np.isfinite(normalize_x(x, stats)).all()

    def test_root_dims_fixed(self):
        stats = NormStats.compute(small_dataset(30)[0])
        np.testing.assert_array_equal(stats.mean_y[:3], 0.0)
        np.testing.assert_array_equal(stats.std_y[:3], 1.0)

    def test_invisible_joints_zeroed(self):
        ds, _ = small_dataset(10)
        stats = NormStats.compute(ds)
        vis = np.ones((10, 5), dtype=bool)
        vis[:, 2] = False
        xn = normalize_x(ds.x, stats, vis)
        np.testing.assert_array_equal(xn[:, 4:6], 0.0)
        np.testing.assert_array_equal(xn[:, :4], normalize_x(ds.x, stats)[:, :4])

    def test_fingerprint_sensitive(self):
        stats = NormStats.compute(small_dataset(30)[0])
        other = NormStats(stats.mean_x.copy(), stats.std_x.copy(), stats.mean_y.copy(), stats.std_y.copy())
        assert other.fingerprint() == stats.fingerprint()
        other.mean_x[0] = np.nextafter(other.mean_x[0], np.inf)
        assert other.fingerprint() != stats.fingerprint()


class TestOcclusion:
    def test_mask_counts(self):
        vis = occlusion_mask(500, 2, chain_skeleton(4), np.random.default_rng(0))
        np.testing.assert_array_equal((~vis).sum(axis=1), 2)
        assert vis[:, 0].all()

    def test_mask_uniform_over_limbs(self):
        vis = occlusion_mask(40_000, 1, chain_skeleton(4), np.random.default_rng(1))
        freq = (~vis[:, 1:]).mean(axis=0)
        np.testing.assert_allclose(freq, 0.25, atol=0.01)

    def test_eight_limb_uniformity(self):
        sk = Skeleton([f"j{i}" for i in range(9)], [0] * 9, limbs=list(range(1, 9)))
        vis = occlusion_mask(10_000, 1, sk, np.random.default_rng(2))
        np.testing.assert_allclose((~vis[:, 1:]).mean(axis=0), 0.125, atol=0.01)

    def test_per_sample_k(self):
        vis = occlusion_mask(3, np.array([0, 1, 4]), chain_skeleton(4), np.random.default_rng(0))
        np.testing.assert_array_equal((~vis).sum(axis=1), [0, 1, 4])

    def test_too_many(self):
        with pytest.raises(ConfigError):
            occlusion_mask(2, 5, chain_skeleton(4), np.random.default_rng(0))

    def test_occlude_leaves_target(self):
        ds, _ = small_dataset(1)
        out = occlude(ds.sample(0), 2, np.random.default_rng(0), ds.skeleton)
        hidden = np.flatnonzero(~out.visibility)
        assert len(hidden) == 2 and 0 not in hidden
        for j in hidden:
            np.testing.assert_array_equal(out.x[2 * j:2 * j + 2], 0.0)
        np.testing.assert_array_equal(out.y, ds.y[0])


class TestSynthetic:
    def test_bone_lengths_and_root(self):
        spec = SynthSpec(samples=50, bone_lengths=[1.0, 0.5, 2.0, 1.5])
        ds, _ = synth_generate(spec)
        joints = ds.y.reshape(50, 5, 3)
        np.testing.assert_array_equal(joints[:, 0], 0.0)
        np.testing.assert_allclose(np.linalg.norm(np.diff(joints, axis=1), axis=2),
                                   np.tile([1.0, 0.5, 2.0, 1.5], (50, 1)), rtol=1e-12)
        assert spec.chain_length == 5.0

    def test_polar_range(self):
        ds, _ = synth_generate(SynthSpec(samples=200))
        bones = np.diff(ds.y.reshape(200, 5, 3), axis=1)
        assert (np.abs(bones[..., 1]) <= math.cos(math.pi / 6) + 1e-12).all()

    def test_inputs_are_orthographic_projections(self):
        ds, _ = small_dataset(10)
        np.testing.assert_array_equal(ds.x, ds.y.reshape(10, 5, 3)[..., :2].reshape(10, 10))

    def test_reflection_fraction(self):
        ds, _ = synth_generate(SynthSpec(samples=10_000))
        depth = np.diff(ds.y.reshape(-1, 5, 3)[..., 2], axis=1)
        reflected = (depth <= 0).all(axis=1) & (depth < 0).any(axis=1)
        assert abs(reflected.mean() - 0.5) < 0.02

    @pytest.mark.parametrize("mix, count", [(0.0, 1), (0.5, 2), (1.0, 1)])
    def test_oracle_modes_contain_truth(self, mix, count):
        ds, oracle = small_dataset(30, mix=mix)
        modes = oracle.modes(ds.x)
        assert modes.shape == (30, count, 15)
        err = np.abs(modes - ds.y[:, None, :]).max(axis=2).min(axis=1)
        assert err.max() < 1e-12

    def test_modes_project_to_input(self):
        ds, oracle = small_dataset(10)
        for i in range(10):
            for mode in oracle.modes(ds.x[i]):
                np.testing.assert_allclose(mode.reshape(5, 3)[:, :2].reshape(-1), ds.x[i] - np.tile(ds.x[i, :2], 5),
                                           atol=1e-12)

    def test_reflect_is_involution(self):
        y = np.random.default_rng(0).normal(size=(3, 15))
        np.testing.assert_array_equal(reflect_depth(reflect_depth(y)), y)

    def test_deterministic(self):
        a, _ = small_dataset(20, seed=5)
        b, _ = small_dataset(20, seed=5)
        np.testing.assert_array_equal(a.y, b.y)

    @pytest.mark.parametrize("kwargs", [{"reflection_mix": 1.5}, {"bones": 0}, {"bone_lengths": [1.0]},
                                        {"polar": (1.0, 0.5)}, {"samples": 0}])
    def test_bad_spec(self, kwargs):
        with pytest.raises(ConfigError):
            SynthSpec(**kwargs)


class TestMultiview:
    def test_views_are_consistent(self):
        cams = orthogonal_cameras(2)
        world, views, _ = synth_multiview(SynthSpec(samples=40), cams)
        assert len(views) == 2 and world.shape == (40, 15)
        for cam, view in zip(cams, views):
            assert (view.cam == cam.id).all()
            for i in range(40):
                expected = root_center(world_to_camera(cam, world[i]))
                np.testing.assert_allclose(view.y[i], expected, atol=1e-12)
                np.testing.assert_allclose(view.x[i], project(cam, view.y[i]), atol=1e-12)

    def test_each_view_in_support(self):
        world, views, oracle = synth_multiview(SynthSpec(samples=40), orthogonal_cameras(2))
        for view in views:
            err = np.abs(oracle.modes(view.x) - view.y[:, None]).max(axis=2).min(axis=1)
            assert err.max() < 1e-9


class TestSplit:
    def test_disjoint_and_complete(self):
        ds, _ = small_dataset(100)
        a, b = split(ds, 0.9, seed=3)
        assert len(a) == 90 and len(b) == 10
        rows = {tuple(r) for r in np.concatenate([a.y, b.y])}
        assert rows == {tuple(r) for r in ds.y}

    def test_empty_side(self):
        with pytest.raises(ConfigError):
            split(small_dataset(3)[0], 0.9, 0)


class TestFiles:
    def test_round_trip_is_exact(self, tmp_path):
        ds, _ = small_dataset(15)
        ds.vis[3, 2] = False
        path = tmp_path / "d.csv"
        save_dataset(ds, path)
        back = load_dataset(path)
        np.testing.assert_array_equal(back.x, ds.x)
        np.testing.assert_array_equal(back.y, ds.y)
        np.testing.assert_array_equal(back.vis, ds.vis)
        assert back.skeleton == ds.skeleton
        assert load_stats(path).fingerprint() == NormStats.compute(ds).fingerprint()

    def test_companion_path(self, tmp_path):
        assert companion_path(tmp_path / "a.csv", "stats").name == "a.stats.json"

    def test_bad_token_reports_line(self, tmp_path):
        ds, _ = small_dataset(3)
        path = tmp_path / "d.csv"
        save_dataset(ds, path)
        lines = path.read_text().splitlines()
        lines[2] = "abc" + lines[2][lines[2].index(","):]
        path.write_text("\n".join(lines) + "\n")
        with pytest.raises(ParseError) as info:
            load_dataset(path)
        assert info.value.line == 3

    def test_wrong_column_count(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("#mdnpose v1 N=2 fields=x\n1,2,3\n")
        with pytest.raises(ParseError, match="row 2"):
            load_dataset(path)

    def test_sixteen_joint_file(self, tmp_path):
        path = tmp_path / "h.csv"
        rng = np.random.default_rng(0)
        rows = [",".join(repr(float(v)) for v in rng.normal(size=80)) + ",0" for _ in range(3)]
        path.write_text("#mdnpose v1 N=16 fields=x[2N],y[3N],cam\n" + "\n".join(rows) + "\n")
        ds = load_dataset(path)
        assert len(ds) == 3 and ds.n_joints == 16 and ds.vis.all()

    def test_nan_row(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("#mdnpose v1 N=1 fields=x\n1,2,0,0,0,0\nNaN,2,0,0,0,0\n")
        with pytest.raises(ParseError, match="row 3"):
            load_dataset(path)

    def test_bad_header(self, tmp_path):
        path = tmp_path / "d.csv"
        path.write_text("x,y\n")
        with pytest.raises(ParseError):
            load_dataset(path)

    @settings(max_examples=15, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6, allow_nan=False), min_size=10, max_size=10))
    def test_float_text_round_trip(self, values):
        x = np.array([values])
        y = np.zeros((1, 15))
        ds = PoseDataset(x, y, chain_skeleton(4))
        with tempfile.TemporaryDirectory() as d:
            path = pathlib.Path(d) / "d.csv"
            save_dataset(ds, path, stats=NormStats(np.zeros(10), np.ones(10), np.zeros(15), np.ones(15)))
            np.testing.assert_array_equal(load_dataset(path).x, x)
