import numpy as np
import pytest

from voxshape import data, losses, train
from voxshape.autodiff import Node, backward, check_composite, ops
from voxshape.errors import NotTrainedError, ShapeError
from voxshape.model import ModelConfig, ShapeModel

SMALL = dict(volume_extent=16, stn_channels=[4, 4, 4], cae_channels=[4, 4], descriptor_dim=6, decoder_head_channels=2)


def _batch(seed, n=2, extent=16):
    rng = np.random.default_rng(seed)
    vols = []
    for i in range(n):
        spec = data.SubjectSpec.sample(i, i % 3, int(rng.integers(1 << 30)))
        vols.append(data.augment(data.synth_subject(spec, extent), data.TRAIN_AUGMENT, rng))
    return np.stack(vols)


@pytest.fixture(scope="module")
def small64():
    m = ShapeModel(ModelConfig(**SMALL), dtype=np.float64)
    rng = np.random.default_rng(0)
    # non-trivial STN head so gradients through the sampler are exercised
    m.params["stn.fc.w"].value = rng.standard_normal(m.params["stn.fc.w"].shape) * 0.05
    for s in range(3):
        m.init_template(s, data.synth_subject(data.SubjectSpec.sample(s, s, 5), 16), sigma=1.0)
    return m


class TestConfig:
    def test_defaults(self):
        cfg = ModelConfig()
        assert cfg.volume_extent == 32 and cfg.descriptor_dim == 32 and cfg.num_structures == 3
        assert cfg.bottleneck_extent == 4

    def test_indivisible_extent(self):
        with pytest.raises(ValueError):
            ModelConfig(volume_extent=30)


class TestForward:
    def test_untrained_is_identity(self):
        m = ShapeModel()
        x = _batch(0, n=3, extent=32)
        out = m.forward(x)
        np.testing.assert_array_equal(out.theta.value, np.zeros((3, 9)))
        np.testing.assert_array_equal(out.aligned.value, x)

    def test_shapes(self, small64):
        x = _batch(1, n=3)
        out = small64.forward(x)
        assert out.theta.shape == (3, 9)
        assert out.aligned.shape == (3, 16, 16, 16)
        assert out.descriptor.shape == (3, 6)
        assert out.recon.shape == (3, 16, 16, 16)
        assert np.all((out.recon.value > 0) & (out.recon.value < 1))

    def test_decode_encode_round_trip_shape(self, small64):
        z = small64.encode(np.random.default_rng(0).random((2, 16, 16, 16)))
        assert small64.decode(z).shape == (2, 16, 16, 16)

    def test_wrong_extent(self, small64):
        with pytest.raises(ShapeError):
            small64.forward(np.zeros((1, 8, 8, 8)))

    def test_decode_wrong_dim(self, small64):
        with pytest.raises(ShapeError):
            small64.decode(np.zeros((1, 5)))

    def test_eval_requires_training(self):
        with pytest.raises(NotTrainedError):
            ShapeModel(ModelConfig(**SMALL)).describe(np.zeros((1, 16, 16, 16)))

    def test_finite_loss_many_batches(self):
        m = ShapeModel(ModelConfig(**SMALL))
        for seed in range(100):
            x = _batch(seed, n=3)
            out = m.forward(x)
            lb = losses.total_loss(out.aligned, ops.take(m.templates(), [0, 1, 2]), out.recon, 1e-3, batched=True)
            assert np.isfinite(lb.total.value)


class TestTemplates:
    def test_seed_round_trip(self):
        m = ShapeModel(ModelConfig(**SMALL))
        seed = data.synth_subject(data.SubjectSpec.sample(0, 1, 3), 16)
        m.init_template(1, seed, sigma=0)
        np.testing.assert_allclose(m.get_template(1).value, seed, atol=1e-3)

    def test_range(self, small64):
        t = small64.templates().value
        assert t.shape == (3, 16, 16, 16)
        assert np.all((t > 0) & (t < 1))

    def test_bad_structure(self, small64):
        with pytest.raises(IndexError):
            small64.get_template(3)

    def test_zero_logits_uniform_half(self):
        t = ShapeModel(ModelConfig(**SMALL)).get_template(0).value
        assert np.all(t == 0.5)

    def test_logit_gradient(self, small64):
        x = _batch(2, n=1)[0]
        logits = small64.params["template0"].value
        assert check_composite(lambda lg: losses.soft_dice(Node(x), ops.sigmoid(lg)), [logits]) < 1e-4


class TestGradients:
    """Finite differences through the whole pipeline, in 64-bit."""

    def _loss(self, m, x, classes):
        out = m.forward(x)
        ref = ops.take(m.templates(), classes)
        return losses.total_loss(out.aligned, ref, out.recon, 0.3, batched=True).total

    @pytest.mark.parametrize("name", ["stn.fc.w", "stn.conv1.w", "template1", "enc0.down.w", "dec0.up.w",
                                      "dec.out.w", "enc.fc.w"])
    def test_parameter_gradient(self, small64, name):
        from voxshape.autodiff.gradcheck import relative_error

        x = _batch(3, n=2)
        classes = [0, 1]
        small64.zero_grad()
        backward(self._loss(small64, x, classes))
        p = small64.params[name]
        analytic = p.grad.copy()
        rng = np.random.default_rng(1)
        idx = [tuple(rng.integers(0, s) for s in p.shape) for _ in range(6)]
        h = 1e-5
        numeric = []
        for i in idx:
            old = p.value[i]
            p.value[i] = old + h
            up = float(self._loss(small64, x, classes).value)
            p.value[i] = old - h
            down = float(self._loss(small64, x, classes).value)
            p.value[i] = old
            numeric.append((up - down) / (2 * h))
        err = relative_error(np.array([analytic[i] for i in idx]), np.array(numeric))
        assert err < 1e-4

    def test_decoder_kernel_reconstruction_dice(self, small64):
        x = _batch(4, n=1)
        w0 = small64.params["dec1.up.w"].value.copy()

        def fn(w):
            old = small64.params["dec1.up.w"]
            small64.params["dec1.up.w"] = w
            try:
                return losses.soft_dice(Node(x), small64.decode(small64.encode(x)))
            finally:
                small64.params["dec1.up.w"] = old

        assert check_composite(fn, [w0]) < 1e-4


def test_single_step_decreases_loss():
    """One small ADAM step lowers the loss of the batch it was computed on."""
    decreased = 0
    for seed in range(100):
        m = ShapeModel(ModelConfig(**SMALL, init_seed=seed))
        x = _batch(seed, n=3)
        classes = [0, 1, 2]
        for s in range(3):
            m.init_template(s, x[s], sigma=1.0)

        def loss():
            out = m.forward(x)
            return losses.total_loss(out.aligned, ops.take(m.templates(), classes), out.recon, 1e-3, batched=True)

        before = loss()
        m.zero_grad()
        backward(before.total)
        grads = {k: p.grad for k, p in m.params.items() if p.grad is not None}
        # normalizer running mean is updated by the train-mode forward; it does not enter the loss
        train.adam_step(m.params, grads, train.AdamState(), lr=1e-4)
        decreased += float(loss().total.value) < float(before.total.value)
    assert decreased >= 95
