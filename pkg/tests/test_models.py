import numpy as np
import pytest

from stagegen import ndtensor as nd
from stagegen.models import (
    ModelSpec,
    Network,
    discriminator,
    init_params,
    sample_latent,
    stage1_generator,
    stage2_decode,
    stage2_discriminator,
    stage2_encode,
    stage2_generator,
)
from stagegen.ndtensor import ShapeError, Tensor


def _edges(n, side, seed=0):
    rng = np.random.default_rng(seed)
    return Tensor(rng.uniform(-1, 1, (n, 1, side, side)).astype(np.float32))


@pytest.fixture(scope="module")
def tiny():
    spec = ModelSpec(image_side=32, base_feature_maps_g=8, base_feature_maps_d=8, resnet_blocks=2)
    return spec, init_params(spec, seed=0)


class TestSpec:
    @pytest.mark.parametrize("side", [16, 48, 0])
    def test_side_must_be_power_of_two_at_least_32(self, side):
        with pytest.raises(ValueError):
            ModelSpec(image_side=side)

    def test_dict_round_trip_and_unknown_keys(self):
        spec = ModelSpec(image_side=64, dropout_enabled=True)
        assert ModelSpec.from_dict(spec.to_dict()) == spec
        with pytest.raises(ValueError):
            ModelSpec.from_dict({**spec.to_dict(), "resnet_blokcs": 3})

    def test_default_widths_scale_with_side(self):
        assert ModelSpec(image_side=128).base_feature_maps_g == 64
        assert ModelSpec(image_side=64).base_feature_maps_g == 32


class TestShapes:
    @pytest.mark.parametrize("side", [32, 64, 128])
    def test_shape_contract(self, side):
        spec = ModelSpec(image_side=side, base_feature_maps_g=4, base_feature_maps_d=8, resnet_blocks=1)
        nets = init_params(spec, 1)
        with nd.no_grad():
            edge = stage1_generator(sample_latent(2, spec.latent_dim, np.random.default_rng(0)), nets["g1"], spec)
            assert edge.shape == (2, 1, side, side)
            gray = stage2_generator(edge, nets["g2"], spec)
            assert gray.shape == edge.shape
            assert discriminator(edge, nets["d1"]).shape == (2, 1)
            assert stage2_discriminator(edge, gray, nets["d2"]).shape == (2, 1)

    def test_wrong_latent_length(self, tiny):
        spec, nets = tiny
        with pytest.raises(ShapeError):
            stage1_generator(Tensor(np.zeros((2, 7), np.float32)), nets["g1"], spec)

    def test_wrong_edge_side(self, tiny):
        spec, nets = tiny
        with pytest.raises(ShapeError):
            stage2_generator(_edges(1, 64), nets["g2"], spec)

    def test_outputs_strictly_inside_unit_interval(self, tiny):
        spec, nets = tiny
        big = Tensor(np.full((2, spec.latent_dim), 1e4, np.float32))
        out = stage1_generator(big, nets["g1"], spec, training=False).data
        assert np.isfinite(out).all() and np.abs(out).max() < 1
        gray = stage2_generator(Tensor(np.full((1, 1, 32, 32), 1.0, np.float32)), nets["g2"], spec).data
        assert np.abs(gray).max() < 1

    def test_extreme_inputs_give_finite_logits(self, tiny):
        _, nets = tiny
        for v in (-1.0, 1.0):
            img = Tensor(np.full((3, 1, 32, 32), v, np.float32))
            assert np.isfinite(discriminator(img, nets["d1"]).data).all()


class TestDiscriminator:
    def test_reduction_factor_shrinks_params_below_one_eighth(self):
        full = init_params(ModelSpec(image_side=64, disc_reduction_factor=1), 0)["d1"].n_params()
        reduced = init_params(ModelSpec(image_side=64, disc_reduction_factor=4), 0)["d1"].n_params()
        assert reduced / full < 1 / 8

    def test_batch_permutation_permutes_logits(self, tiny):
        _, nets = tiny
        edge, gray = _edges(5, 32, 1), _edges(5, 32, 2)
        perm = np.array([3, 0, 4, 1, 2])
        with nd.no_grad():
            base = stage2_discriminator(edge, gray, nets["d2"], training=False).data
            moved = stage2_discriminator(Tensor(edge.data[perm]), Tensor(gray.data[perm]), nets["d2"],
                                         training=False).data
        np.testing.assert_allclose(moved, base[perm], rtol=1e-5, atol=1e-6)

    def test_swapping_condition_and_output_changes_logits(self, tiny):
        _, nets = tiny
        edge, gray = _edges(2, 32, 1), _edges(2, 32, 2)
        a = stage2_discriminator(edge, gray, nets["d2"], training=False).data
        b = stage2_discriminator(gray, edge, nets["d2"], training=False).data
        assert np.abs(a - b).max() > 0.1 * np.abs(a).max()


class TestStage2Generator:
    def test_zero_second_conv_reduces_to_trunk(self, tiny):
        spec, nets = tiny
        g2 = nets["g2"].copy()
        for i in range(spec.resnet_blocks):
            g2[f"res{i}.conv2.weight"].data[...] = 0
        edge = _edges(2, 32, 5)
        with nd.no_grad():
            full = stage2_generator(edge, g2, spec, training=False).data
            trunk = stage2_decode(stage2_encode(edge, g2), g2).data
        np.testing.assert_allclose(full, trunk, atol=1e-6)

    def test_dropout_only_acts_in_train_mode(self):
        spec = ModelSpec(image_side=32, base_feature_maps_g=8, resnet_blocks=2, dropout_enabled=True)
        g2 = init_params(spec, 0)["g2"]
        edge = _edges(1, 32)
        with nd.no_grad():
            e1 = stage2_generator(edge, g2, spec, training=False, rng=np.random.default_rng(1)).data
            e2 = stage2_generator(edge, g2, spec, training=False, rng=np.random.default_rng(2)).data
            t1 = stage2_generator(edge, g2, spec, training=True, rng=np.random.default_rng(1)).data
            t2 = stage2_generator(edge, g2, spec, training=True, rng=np.random.default_rng(2)).data
        np.testing.assert_array_equal(e1, e2)
        assert np.abs(t1 - t2).max() > 1e-4

    def test_latent_flag_makes_output_depend_on_z2(self):
        spec = ModelSpec(image_side=32, base_feature_maps_g=8, resnet_blocks=1, stage2_latent_enabled=True)
        g2 = init_params(spec, 0)["g2"]
        edge = _edges(1, 32)
        rng = np.random.default_rng(0)
        with nd.no_grad():
            a = stage2_generator(edge, g2, spec, sample_latent(1, spec.latent_dim, rng), training=False).data
            b = stage2_generator(edge, g2, spec, sample_latent(1, spec.latent_dim, rng), training=False).data
        assert np.abs(a - b).max() > 1e-4
        with pytest.raises(ValueError):
            stage2_generator(edge, g2, spec, None)

    def test_composite_with_l1_passes_grad_check(self):
        spec = ModelSpec(image_side=32, base_feature_maps_g=8, base_feature_maps_d=8, resnet_blocks=1)
        g2 = init_params(spec, 3)["g2"].astype(np.float64)
        rng = np.random.default_rng(4)
        edge = rng.uniform(-1, 1, (1, 1, 32, 32))
        target = Tensor(rng.uniform(-1, 1, (1, 1, 32, 32)))
        names = list(g2.params)

        def fn(e, *weights):
            net = Network(dict(zip(names, weights)), g2.buffers)
            return nd.l1_loss(stage2_generator(e, net, spec), target)

        err = nd.grad_check(fn, [edge] + [g2[n].data for n in names], max_checks=6, seed=0)
        assert err <= 1e-3


class TestInit:
    def test_same_seed_same_params(self):
        spec = ModelSpec(image_side=32)
        a, b = init_params(spec, 7), init_params(spec, 7)
        for name in a:
            for k, v in a[name].arrays().items():
                np.testing.assert_array_equal(v, b[name].arrays()[k])

    def test_weight_statistics(self):
        g1 = init_params(ModelSpec(image_side=32), 0)["g1"]
        w = g1["proj.weight"].data.ravel()
        assert w.size >= 10_000
        assert abs(w.mean()) < 3 * 0.02 / np.sqrt(w.size)
        assert abs(w.std() - 0.02) < 0.002

    def test_gammas_near_one_and_biases_zero(self):
        nets = init_params(ModelSpec(image_side=32), 0)
        gam = nets["g1"]["proj.bn.gamma"].data
        assert abs(gam.mean() - 1) < 0.01
        assert np.all(nets["g1"]["out.bias"].data == 0)

    def test_networks_share_no_buffers(self):
        nets = init_params(ModelSpec(image_side=32), 0)
        ids = [id(t.data) for n in nets.values() for t in n.params.values()]
        assert len(ids) == len(set(ids))

    def test_forward_is_deterministic(self, tiny):
        spec, nets = tiny
        z = sample_latent(3, spec.latent_dim, np.random.default_rng(9))
        a = stage1_generator(z, nets["g1"], spec, training=False).data
        b = stage1_generator(z, nets["g1"], spec, training=False).data
        np.testing.assert_array_equal(a, b)
