import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import layer_forward, mps_dense, mps_forward
from tnkit import autodiff as ad
from tnkit.models import (MPS, TTN, UMPS, MPSLayer, add_ones, basis, build_uniform,
                          discretize, embed, poly, unit)
from tnkit.models.mps import eye_plus_noise

FLAGS = list(itertools.product([True, False], repeat=4))
FLAG_IDS = ["as{}-au{}-ii{}-im{}".format(*map(int, f)) for f in FLAGS]


class TestEmbeddings:

    def test_listing_shape(self):
        x = np.random.default_rng(0).uniform(size=(100, 1000))
        assert embed(x, "unit", 2).shape == (100, 1000, 2)

    def test_formulas(self):
        np.testing.assert_allclose(unit(np.array([[0.0]]))[0, 0], [1.0, 0.0], atol=1e-16)
        np.testing.assert_array_equal(add_ones(np.array([[0.5]]))[0, 0], [1.0, 0.5])
        np.testing.assert_array_equal(poly(np.array([[0.5]]), 3)[0, 0], [1.0, 0.5, 0.25])
        np.testing.assert_array_equal(basis(np.array([[2]]), 4)[0, 0], [0, 0, 1, 0])
        np.testing.assert_array_equal(discretize(np.array([[1.0, 0.0, 0.4]]), 4)[0],
                                      [[0, 0, 0, 1], [1, 0, 0, 0], [0, 1, 0, 0]])

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=100), st.integers(2, 6))
    def test_unit_norm(self, xs, d):
        v = unit(np.array([xs]), d)
        np.testing.assert_allclose(np.linalg.norm(v, axis=-1), 1.0, atol=1e-12)

    @pytest.mark.parametrize("mode, d", [("unit", 3), ("add_ones", 2), ("poly", 4),
                                         ("discretize", 5), ("basis", 3)])
    def test_shapes(self, mode, d):
        x = np.random.default_rng(1).uniform(size=(4, 7))
        if mode == "basis":
            x = np.floor(x * d)
        assert embed(x, mode, d).shape == (4, 7, d)

    @pytest.mark.parametrize("mode, data, d", [("unit", [[1.5]], 2), ("unit", [[0.5]], 1),
                                               ("add_ones", [[0.5]], 3), ("basis", [[4]], 4),
                                               ("basis", [[0.5]], 4), ("poly", [[-0.1]], 2),
                                               ("nope", [[0.0]], 2)])
    def test_errors(self, mode, data, d):
        with pytest.raises(ValueError):
            embed(np.array(data, dtype=float), mode, d)


def random_layer(n_inputs, d, out, D, seed=0, std=0.5, **kw):
    return MPSLayer(n_features=n_inputs + 1, in_dim=d, out_dim=out, bond_dim=D,
                    init_std=std, seed=seed, **kw)


class TestMPSLayer:

    def test_listing_shape(self):
        layer = MPSLayer(n_features=1001, in_dim=2, out_dim=10, bond_dim=10, seed=0)
        x = embed(np.random.default_rng(0).uniform(size=(100, 1000)), "unit", 2)
        with ad.no_grad():
            assert layer(x).shape == (100, 10)

    def test_default_out_position(self):
        assert MPSLayer(n_features=5, in_dim=2, out_dim=2, bond_dim=2).out_position == 3
        assert MPSLayer(n_features=2, in_dim=2, out_dim=2, bond_dim=2).out_position == 1

    def test_single_site_by_hand(self):
        site = np.array([[[0.3], [-1.2]]])           # (1, d=2, 1)
        out_core = np.array([[[2.0], [0.5], [-1.0]]])  # (1, out=3, 1)
        layer = MPSLayer(tensors=[site, out_core], out_position=1)
        x = np.array([[[0.7, 0.1]]])
        expected = (0.3 * 0.7 - 1.2 * 0.1) * np.array([2.0, 0.5, -1.0])
        np.testing.assert_allclose(layer(x).value[0], expected, atol=1e-15)

    @pytest.mark.parametrize("flags", FLAGS, ids=FLAG_IDS)
    def test_matches_oracle_in_every_mode(self, flags):
        a_s, a_u, ii, im = flags
        layer = random_layer(4, 2, 2, 3, auto_stack=a_s, auto_unbind=a_u,
                             inline_input=ii, inline_mats=im)
        x = np.random.default_rng(5).uniform(size=(6, 4, 2))
        ref = layer_forward(layer.cores(), layer.out_position, x)
        np.testing.assert_allclose(layer(x).value, ref, atol=1e-10, rtol=0)
        # traced replay gives the same numbers
        layer.trace(np.zeros((1, 4, 2)))
        np.testing.assert_allclose(layer(x).value, ref, atol=1e-10, rtol=0)

    @pytest.mark.parametrize("n", [1, 2, 3, 7])
    def test_lengths_and_positions(self, n):
        for pos in range(n + 1):
            layer = MPSLayer(n_features=n + 1, in_dim=3, out_dim=2, bond_dim=2, out_position=pos,
                             init_std=0.4, seed=pos)
            x = np.random.default_rng(pos).uniform(size=(3, n, 3))
            ref = layer_forward(layer.cores(), pos, x)
            np.testing.assert_allclose(layer(x).value, ref, atol=1e-12)

    def test_wrong_input_shape(self):
        layer = random_layer(4, 2, 2, 3)
        with pytest.raises(ValueError):
            layer(np.ones((2, 5, 2)))

    def test_parameter_count(self):
        layer = MPSLayer(n_features=11, in_dim=2, out_dim=3, bond_dim=4)
        count = sum(p.value.size for p in layer.parameters())
        assert count <= 11 * max(2, 3) * 4 * 4


class TestMPS:

    def test_oracle_and_dense(self):
        m = MPS(n_features=4, in_dim=2, bond_dim=3, init_std=0.5, seed=1)
        x = np.random.default_rng(2).uniform(size=(5, 4, 2))
        np.testing.assert_allclose(m(x).value, mps_forward(m.cores(), x), atol=1e-12)
        np.testing.assert_allclose(m.to_dense().reshape(-1), mps_dense(m.cores()), atol=1e-12)

    def test_identity_init(self):
        t = eye_plus_noise((3, 2, 3), 0.0, np.random.default_rng(0))
        for j in range(2):
            np.testing.assert_array_equal(t[:, j, :], np.eye(3))

    def test_chain_validation(self):
        with pytest.raises(ValueError):
            MPS(tensors=[np.ones((1, 2, 2)), np.ones((3, 2, 1))])
        with pytest.raises(ValueError):
            MPS(tensors=[np.ones((2, 2, 2)), np.ones((2, 2, 1))])

    def test_block_training(self):
        """Freezing every core but a two-site block leaves gradients only on the block."""
        m = MPS(n_features=5, in_dim=2, bond_dim=2, init_std=0.5, seed=3, auto_stack=False)
        for i, site in enumerate(m.sites):
            site.parameterize(i in (2, 3))
        x = np.random.default_rng(0).uniform(size=(4, 5, 2))
        ad.sum_all(m(x)).backward()
        assert len(m.parameters()) == 2
        for i, site in enumerate(m.sites):
            has = site.variable.grad is not None
            assert has == (i in (2, 3))


class TestUniform:

    def test_one_core_in_store(self):
        u = build_uniform("umps", n_features=5, in_dim=2, bond_dim=3, seed=0)
        assert len(u.parameters()) == 1
        addresses = {s.address for s in u.sites} | {u.uniform_node.address}
        assert len(addresses) == 1

    def test_update_reaches_every_site(self):
        u = UMPS(n_features=3, in_dim=2, bond_dim=2, seed=0)
        u.uniform_node.tensor = np.full((2, 2, 2), 0.25)
        for s in u.sites:
            np.testing.assert_array_equal(s.tensor, np.full((2, 2, 2), 0.25))

    def test_gradient_is_sum_over_sites(self):
        core = np.random.default_rng(0).normal(size=(2, 2, 2)) * 0.5
        x = np.random.default_rng(1).uniform(size=(3, 4, 2))
        u = UMPS(n_features=4, in_dim=2, bond_dim=2, tensor=core, auto_stack=False)
        ad.sum_all(u(x)).backward()
        e0 = np.eye(2)[0]
        # open chain with the e_0 borders folded into the end cores
        first, last = core[:1].copy(), core[..., :1].copy()
        m = MPS(tensors=[first, core.copy(), core.copy(), last], auto_stack=False)
        ad.sum_all(m(x)).backward()
        g = [s.variable.grad for s in m.sites]
        total = g[1] + g[2]
        total[:1] += g[0]
        total[..., :1] += g[3]
        np.testing.assert_allclose(u.parameters()[0].grad, total, atol=1e-12)
        np.testing.assert_allclose(u(x).value, mps_forward([core] * 4, x, e0, e0), atol=1e-12)

    def test_errors(self):
        with pytest.raises(ValueError):
            build_uniform("umps", n_features=0, in_dim=2, bond_dim=2)
        with pytest.raises(ValueError):
            build_uniform("upeps", n_features=2)


class TestTTN:

    def test_ones_tree(self):
        tensors = [[np.ones((2, 2, 1))] * 2, [np.ones((1, 1, 1))]]
        tree = TTN(2, 2, in_dim=2, bond_dim=1, tensors=tensors)
        x = np.random.default_rng(0).uniform(size=(5, 4, 2))
        np.testing.assert_allclose(tree(x).value[:, 0], np.prod(x.sum(axis=2), axis=1), atol=1e-14)

    def test_random_tree_oracle(self):
        tree = TTN(2, 2, in_dim=2, bond_dim=2, out_dim=3, seed=0)
        x = np.random.default_rng(1).uniform(size=(4, 4, 2))
        (l0, l1), (root,) = [[n.tensor for n in layer] for layer in tree.layers]
        ref = np.zeros((4, 3))
        for b in range(4):
            p0 = np.einsum("ijp,i,j->p", l0, x[b, 0], x[b, 1])
            p1 = np.einsum("ijp,i,j->p", l1, x[b, 2], x[b, 3])
            ref[b] = np.einsum("pqo,p,q->o", root, p0, p1)
        np.testing.assert_allclose(tree(x).value, ref, atol=1e-12)

    def test_depth_one(self):
        core = np.random.default_rng(2).normal(size=(2, 2, 2, 1))
        tree = TTN(3, 1, in_dim=2, bond_dim=1, tensors=[[core]])
        x = np.random.default_rng(3).uniform(size=(2, 3, 2))
        ref = np.einsum("ijko,bi,bj,bk->bo", core, x[:, 0], x[:, 1], x[:, 2])
        np.testing.assert_allclose(tree(x).value, ref, atol=1e-14)

    def test_leaf_count_mismatch(self):
        with pytest.raises(ValueError):
            TTN(2, 2, in_dim=2, bond_dim=2)(np.ones((1, 3, 2)))


@settings(max_examples=15, deadline=None)
@given(st.integers(1, 5), st.integers(1, 3), st.integers(1, 3), st.integers(0, 1000))
def test_flag_equivalence_property(n, d, D, seed):
    x = np.random.default_rng(seed).uniform(size=(3, n, d))
    outs = [random_layer(n, d, 2, D, seed=seed, inline_input=ii, inline_mats=im)(x).value
            for ii, im in itertools.product([True, False], repeat=2)]
    scale = max(1.0, np.max(np.abs(outs[0])))
    for o in outs[1:]:
        assert np.max(np.abs(o - outs[0])) <= 1e-12 * scale
