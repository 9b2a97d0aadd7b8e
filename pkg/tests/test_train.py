import numpy as np
import pytest

from voxshape import data, train
from voxshape.autodiff import Node
from voxshape.errors import BadMagic, NumericError, Truncated, VersionMismatch
from voxshape.model import ModelConfig, ShapeModel

SMALL = dict(volume_extent=16, stn_channels=[4, 4, 4], cae_channels=[4, 4], descriptor_dim=6, decoder_head_channels=2)


@pytest.fixture(scope="module")
def toy():
    return data.generate_dataset(24, seed=2, extent=16)


def _trainer(epochs=3, passes=1, **kw):
    cfg = train.TrainConfig(epochs=epochs, passes_per_epoch=passes, **kw)
    return train.Trainer(ShapeModel(ModelConfig(**SMALL)), cfg)


class TestAdam:
    def test_zero_grad_leaves_params(self):
        p = {"w": Node(np.array([1.5, -2.0], np.float32), requires_grad=True)}
        s = train.AdamState()
        train.adam_step(p, {"w": np.zeros(2, np.float32)}, s, lr=1e-3)
        np.testing.assert_array_equal(p["w"].value, [1.5, -2.0])
        assert s.step == 1

    @pytest.mark.parametrize("g", [0.3, -5.0, 1e-3])
    def test_first_step_magnitude(self, g):
        p = {"w": Node(np.array([0.0]), requires_grad=True)}
        train.adam_step(p, {"w": np.array([g])}, train.AdamState(), lr=1e-3)
        expected = -np.sign(g) * 1e-3 * abs(g) / (abs(g) + 1e-8)
        assert p["w"].value[0] == pytest.approx(expected, rel=1e-9)

    def test_nan_names_parameter(self):
        p = {"enc.fc.w": Node(np.zeros(2), requires_grad=True)}
        with pytest.raises(NumericError, match="enc.fc.w"):
            train.adam_step(p, {"enc.fc.w": np.array([np.nan, 0.0])}, train.AdamState(), lr=1e-3)

    def test_deterministic_five_steps(self):
        def run():
            rng = np.random.default_rng(0)
            p = {"w": Node(rng.standard_normal(4).astype(np.float32), requires_grad=True)}
            s = train.AdamState()
            for _ in range(5):
                train.adam_step(p, {"w": rng.standard_normal(4).astype(np.float32)}, s, lr=1e-3)
            return p["w"].value

        assert run().tobytes() == run().tobytes()


class TestClip:
    def test_scales_to_norm(self):
        grads = {"a": np.array([3.0]), "b": np.array([4.0])}
        before = train.clip_grads(grads, 1.0)
        assert before == 5.0
        assert np.hypot(grads["a"][0], grads["b"][0]) == pytest.approx(1.0)

    def test_small_untouched(self):
        grads = {"a": np.array([0.3])}
        train.clip_grads(grads, 10.0)
        assert grads["a"][0] == 0.3


class TestConfig:
    def test_defaults(self):
        cfg = train.TrainConfig()
        assert cfg.batch_size == 12 and cfg.per_structure == 4
        assert cfg.lr == 1e-3 and cfg.zeta_start == 1e-10 and cfg.zeta_end == 1e-3
        assert cfg.augment == data.TRAIN_AUGMENT

    def test_batch_must_match_structures(self):
        with pytest.raises(ValueError):
            train.TrainConfig(batch_size=10).check(3)


class TestBatches:
    def test_composition(self, toy):
        cfg = train.TrainConfig(passes_per_epoch=3)
        classes = {r.subject_id: r.structure_class for r in toy.rows}
        train_ids = {r.subject_id for r in toy.split("train")}
        batches = train.batches_for_epoch(toy, cfg, np.random.default_rng(0), 3)
        assert batches
        for b in batches:
            assert len(b) == 12
            assert np.bincount([classes[s] for s in b], minlength=3).tolist() == [4, 4, 4]
            assert set(b) <= train_ids

    def test_every_subject_visited(self, toy):
        cfg = train.TrainConfig(passes_per_epoch=1)
        seen = {s for b in train.batches_for_epoch(toy, cfg, np.random.default_rng(1), 3) for s in b}
        assert seen == {r.subject_id for r in toy.split("train")}

    def test_too_few_subjects(self):
        ds = data.generate_dataset(12, seed=0, extent=16)
        with pytest.raises(ValueError, match="training subjects per structure"):
            train.batches_for_epoch(ds, train.TrainConfig(), np.random.default_rng(0), 3)


class TestBatchPoses:
    def test_antithetic_mean_near_zero(self):
        rng = np.random.default_rng(0)
        poses = train.batch_poses(12, train.TrainConfig(), rng)
        assert poses.shape == (12, 9)
        np.testing.assert_allclose(poses[:, :6].mean(axis=0), 0, atol=1e-15)
        np.testing.assert_allclose(poses[6:], [data.mirror_pose(p) for p in poses[:6]])

    def test_independent_draws(self):
        cfg = train.TrainConfig(antithetic_poses=False)
        poses = train.batch_poses(12, cfg, np.random.default_rng(0))
        assert len({tuple(p) for p in poses}) == 12
        assert not np.allclose(poses[6:, :3], -poses[:6, :3])

    def test_odd_batch(self):
        poses = train.batch_poses(5, train.TrainConfig(), np.random.default_rng(0))
        assert poses.shape == (5, 9)
        np.testing.assert_allclose(poses[3:], [data.mirror_pose(p) for p in poses[:2]])


class TestTraining:
    def test_first_epoch_zeta(self, toy):
        tr = _trainer(epochs=5)
        train.init_templates(tr.model, toy)
        stats = train.train_epoch(tr, toy, 1)
        assert stats.zeta == 1e-10
        assert 0 <= stats.align_dice <= 1 and 0 <= stats.recon_dice <= 1
        assert tr.epoch == 1 and tr.adam.step > 0

    def test_alignment_improves(self):
        # default model at extent 32; 16 passes so each epoch mean averages over 16 batches
        toy32 = data.generate_dataset(24, seed=2)
        tr = train.Trainer(ShapeModel(), train.TrainConfig(epochs=6, passes_per_epoch=16))
        hist = train.fit(tr, toy32)
        dice = [h.align_dice for h in hist]
        assert sum(b > a for a, b in zip(dice, dice[1:])) >= 4, dice

    def test_stats_and_checkpoints_written(self, toy, tmp_path):
        train.fit(_trainer(epochs=2), toy, out_dir=tmp_path)
        lines = (tmp_path / "stats.csv").read_text().splitlines()
        assert lines[0] == train.STATS_HEADER and len(lines) == 3
        assert (tmp_path / "epoch002.vxck").exists() and (tmp_path / "last.vxck").exists()

    def test_seed_subjects_per_class(self, toy):
        seeds = train.seed_subjects(toy, 3)
        classes = {r.subject_id: (r.structure_class, r.split) for r in toy.rows}
        assert sorted(seeds) == [0, 1, 2]
        assert all(classes[sid] == (c, "train") for c, sid in seeds.items())


class TestCheckpoint:
    @pytest.fixture
    def trained(self, toy):
        tr = _trainer(epochs=3)
        train.fit(tr, toy, until_epoch=1)
        return tr

    def test_round_trip_bytes(self, trained, tmp_path):
        p1, p2 = tmp_path / "a.vxck", tmp_path / "b.vxck"
        train.save_checkpoint(p1, trained)
        train.save_checkpoint(p2, train.load_checkpoint(p1))
        assert p1.read_bytes() == p2.read_bytes()

    def test_restores_state(self, trained, tmp_path):
        p = tmp_path / "a.vxck"
        train.save_checkpoint(p, trained)
        back = train.load_checkpoint(p)
        assert back.epoch == 1 and back.adam.step == trained.adam.step
        assert back.cfg == trained.cfg
        for k, v in trained.model.params.items():
            assert back.model.params[k].value.tobytes() == v.value.tobytes()
        assert back.model.normalizer.updates_seen == trained.model.normalizer.updates_seen

    def test_resume_matches_uninterrupted(self, toy, tmp_path):
        full = _trainer(epochs=3)
        train.fit(full, toy)
        part = _trainer(epochs=3)
        train.fit(part, toy, until_epoch=2)
        train.save_checkpoint(tmp_path / "mid.vxck", part)
        resumed = train.load_checkpoint(tmp_path / "mid.vxck")
        train.fit(resumed, toy)
        assert train.checkpoint_bytes(resumed) == train.checkpoint_bytes(full)

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "x.vxck"
        p.write_bytes(b"NOPE" + bytes(20))
        with pytest.raises(BadMagic):
            train.load_checkpoint(p)

    def test_version_mismatch(self, trained, tmp_path):
        raw = bytearray(train.checkpoint_bytes(trained))
        raw[4] = 99
        p = tmp_path / "x.vxck"
        p.write_bytes(bytes(raw))
        with pytest.raises(VersionMismatch):
            train.load_checkpoint(p)

    @pytest.mark.parametrize("cut", [10, 500, -7])
    def test_truncated(self, trained, tmp_path, cut):
        raw = train.checkpoint_bytes(trained)
        p = tmp_path / "x.vxck"
        p.write_bytes(raw[:cut])
        with pytest.raises(Truncated):
            train.load_checkpoint(p)

    def test_trailing_bytes(self, trained, tmp_path):
        p = tmp_path / "x.vxck"
        p.write_bytes(train.checkpoint_bytes(trained) + b"\0")
        with pytest.raises(Truncated):
            train.load_checkpoint(p)
