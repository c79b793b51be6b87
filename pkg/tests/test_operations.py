import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tnkit as tk
from oracles import loop_batched_contract, loop_tensordot
from tnkit import autodiff as ad
from tnkit.models import MPS


def node(net, shape, axes, name="node", **kw):
    kw.setdefault("init_method", "randn")
    return tk.Node(shape, axes, name=name, network=net, **kw)


class TestContract:

    def test_listing_pair(self):
        net = tk.TensorNetwork()
        a = node(net, (2, 4, 3, 6, 2), ("a0", "a1", "a2", "a3", "a4"))
        b = node(net, (3, 2, 5, 4), ("b0", "b1", "b2", "b3"))
        a["a2"] ^ b["b0"]
        a["a4"] ^ b["b1"]
        c = a @ b
        assert c.shape == (2, 4, 6, 5, 4)
        assert c.axes_names == ["a0", "a1", "a3", "b2", "b3"]
        np.testing.assert_allclose(c.tensor, loop_tensordot(a.tensor, b.tensor, [2, 4], [0, 1]),
                                   atol=1e-12)

    def test_identity_matrix(self):
        net = tk.TensorNetwork()
        a = node(net, (3, 4), ("x", "y"))
        eye = node(net, (4, 4), ("i", "o"), tensor=np.eye(4), init_method=None)
        a["y"] ^ eye["i"]
        np.testing.assert_allclose((a @ eye).tensor, a.tensor, atol=1e-15)

    def test_batch_dot_product(self):
        net = tk.TensorNetwork()
        a = node(net, (7, 3), ("batch", "f"))
        b = node(net, (7, 3), ("batch", "g"))
        a["f"] ^ b["g"]
        c = a @ b
        assert c.shape == (7,)
        ref = [a.tensor[i] @ b.tensor[i] for i in range(7)]
        np.testing.assert_allclose(c.tensor, ref, atol=1e-12)

    def test_inherits_neighbour_edges(self):
        net = tk.TensorNetwork()
        a, b, c = (node(net, (2, 2), ("l", "r"), name=n) for n in "abc")
        a["r"] ^ b["l"]
        b["r"] ^ c["l"]
        ab = a @ b
        assert ab["r"] is c["l"]
        assert (ab @ c).shape == (2, 2)

    def test_errors(self):
        net = tk.TensorNetwork()
        a, b = node(net, (2,), ("x",)), node(net, (2,), ("y",))
        with pytest.raises(ValueError):
            a @ b
        with pytest.raises(ValueError):
            tk.contract_between(a, a)

    def test_successor_reuse(self):
        net = tk.TensorNetwork()
        a, b = node(net, (3, 4), ("x", "y")), node(net, (4, 2), ("y", "z"))
        a["y"] ^ b["y"]
        c1 = a @ b
        created = net.nodes_created
        a.tensor = np.ones((3, 4))
        c2 = a @ b
        assert c2 is c1 and net.nodes_created == created
        np.testing.assert_allclose(c2.tensor, np.ones((3, 4)) @ b.tensor, atol=1e-14)

    def test_cache_soundness_against_reset(self):
        net = tk.TensorNetwork()
        a, b = node(net, (3, 4), ("x", "y")), node(net, (4, 2), ("y", "z"))
        a["y"] ^ b["y"]
        a @ b
        a.tensor = np.full((3, 4), 0.5)
        cached = (a @ b).tensor.copy()
        net.reset()
        np.testing.assert_allclose((a @ b).tensor, cached, atol=1e-12)

    @settings(max_examples=40, deadline=None)
    @given(st.integers(0, 10 ** 6))
    def test_random_pairs_with_batches(self, seed):
        rng = np.random.default_rng(seed)
        a, b, pairs, batch = random_pair(rng)
        out = a @ b
        ref = loop_batched_contract(a.tensor, b.tensor, pairs, batch)
        np.testing.assert_allclose(out.tensor, ref, atol=1e-12)


def random_pair(rng, max_rank=5, max_dim=4):
    """Two connected nodes (at least one edge), sometimes sharing a batch axis."""
    net = tk.TensorNetwork()
    ra, rb = rng.integers(1, max_rank + 1, size=2)
    sa = list(rng.integers(1, max_dim + 1, size=ra))
    sb = list(rng.integers(1, max_dim + 1, size=rb))
    names_a = [f"a{i}" for i in range(ra)]
    names_b = [f"b{i}" for i in range(rb)]
    batch = []
    if ra > 1 and rb > 1 and rng.random() < 0.4:
        i, j = int(rng.integers(ra)), int(rng.integers(rb))
        names_a[i] = names_b[j] = "batch"
        sb[j] = sa[i]
        batch.append((i, j))
    free_a = [i for i in range(ra) if names_a[i] != "batch"]
    free_b = [j for j in range(rb) if names_b[j] != "batch"]
    k = int(rng.integers(1, min(len(free_a), len(free_b)) + 1))
    ia = list(rng.permutation(free_a)[:k])
    jb = list(rng.permutation(free_b)[:k])
    for i, j in zip(ia, jb):
        sb[j] = sa[i]
    a = node(net, sa, names_a, name="a", rng=rng)
    b = node(net, sb, names_b, name="b", rng=rng)
    for i, j in zip(ia, jb):
        a[int(i)] ^ b[int(j)]
    return a, b, list(zip(ia, jb)), batch


class TestSplit:

    def listing_node(self):
        net = tk.TensorNetwork()
        return node(net, (2, 7, 3, 4), ("left_0", "left_1", "right_0", "right_1"))

    def test_listing_shapes(self):
        n1, n2 = tk.split(self.listing_node(), ["left_0", "right_0"], ["left_1", "right_1"],
                          mode="svd", rank=5)
        assert n1.shape == (2, 3, 5) and n2.shape == (5, 7, 4)
        assert n1[-1] is n2[0]

    def test_identity_reconstructs(self):
        net = tk.TensorNetwork()
        eye = node(net, (4, 4), ("i", "j"), tensor=np.eye(4), init_method=None)
        for mode in ("svd", "svdr", "qr"):
            kw = {"rank": 4} if mode != "qr" else {}
            a, b = tk.split(eye, ["i"], ["j"], mode=mode, **kw)
            np.testing.assert_allclose((a @ b).tensor, np.eye(4), atol=1e-12)

    def test_truncation_error(self):
        net = tk.TensorNetwork()
        m = np.random.default_rng(0).normal(size=(6, 6))
        n = node(net, (6, 6), ("i", "j"), tensor=m, init_method=None)
        a, b = tk.split(n, ["i"], ["j"], rank=3)
        s = np.linalg.svd(m, compute_uv=False)
        err = np.linalg.norm((a @ b).tensor - m)
        assert abs(err - np.sqrt(np.sum(s[3:] ** 2))) < 1e-10

    def test_svdr_puts_values_right(self):
        net = tk.TensorNetwork()
        n = node(net, (5, 4), ("i", "j"))
        a, _ = tk.split(n, ["i"], ["j"], mode="svdr")
        np.testing.assert_allclose(a.tensor.T @ a.tensor, np.eye(4), atol=1e-10)

    def test_neighbours_reattach(self):
        net = tk.TensorNetwork()
        n = self.listing_node()
        other = node(net, (3,), ("x",))
        n["right_0"] ^ other["x"]
        a, _ = tk.split(n, ["left_0", "right_0"], ["left_1", "right_1"])
        assert a["right_0"] is other["x"]

    def test_batch_axes_carried(self):
        net = tk.TensorNetwork()
        t = np.random.default_rng(1).normal(size=(3, 4, 5))
        n = node(net, (3, 4, 5), ("batch", "i", "j"), tensor=t, init_method=None)
        a, b = tk.split(n, ["i"], ["j"])
        assert a.axes_names[0] == "batch" and b.axes_names[0] == "batch"
        np.testing.assert_allclose((a @ b).tensor, t, atol=1e-12)

    def test_errors(self):
        n = self.listing_node()
        with pytest.raises(ValueError):
            tk.split(n, ["left_0"], ["left_1", "right_1"])
        with pytest.raises(ValueError):
            tk.split(n, ["left_0", "right_0"], ["left_1", "right_1"], mode="qr", rank=2)

    def test_not_differentiable(self):
        net = tk.TensorNetwork()
        n = node(net, (3, 3), ("i", "j"), role="param")
        with pytest.raises(RuntimeError):
            tk.split(n, ["i"], ["j"])
        with ad.no_grad():
            tk.split(n, ["i"], ["j"])


class TestStackUnbind:

    def nodes(self, k, role="leaf", net=None):
        net = tk.TensorNetwork() if net is None else net
        return [node(net, (2, 4, 2), ("left", "input", "right"), role=role) for _ in range(k)]

    @pytest.mark.parametrize("k", [1, 3, 6])
    def test_listing_shape_and_round_trip(self, k):
        ns = self.nodes(k)
        values = [n.tensor.copy() for n in ns]
        st_node = tk.stack(ns)
        assert st_node.shape == (k, 2, 4, 2) and st_node.axes_names[0] == "stack"
        back = tk.unbind(st_node)
        assert len(back) == k
        for v, b in zip(values, back):
            np.testing.assert_array_equal(b.tensor, v)

    def test_errors(self):
        net = tk.TensorNetwork()
        with pytest.raises(ValueError):
            tk.stack([])
        with pytest.raises(ValueError):
            tk.stack([node(net, (2, 2), ("a", "b")), node(net, (2, 3), ("a", "b"))])
        with pytest.raises(ValueError):
            tk.unbind(node(net, (2, 2), ("a", "b")))

    def test_auto_stack_buffer_reuse(self):
        net = tk.TensorNetwork(auto_stack=True)
        ns = self.nodes(3, role="param", net=net)
        values = [n.tensor.copy() for n in ns]
        first = tk.stack(ns)
        assert first.role == "param_stack"
        assert all(n.is_view() for n in ns)
        live = net.memory.live_bytes
        second = tk.stack(ns)
        assert second is first and net.memory.live_bytes == live
        for n, v in zip(ns, values):
            np.testing.assert_array_equal(n.tensor, v)
        # writing through a node updates the shared buffer
        ns[1].tensor = np.zeros((2, 4, 2))
        np.testing.assert_array_equal(tk.stack(ns).tensor[1], np.zeros((2, 4, 2)))

    def test_auto_stack_off_copies(self):
        net = tk.TensorNetwork(auto_stack=False)
        ns = self.nodes(2, role="param", net=net)
        st_node = tk.stack(ns)
        assert not any(n.is_view() for n in ns)
        live = net.memory.live_bytes
        tk.stack(ns)
        assert net.memory.live_bytes == live   # the copy is overwritten in place, not duplicated

    @pytest.mark.parametrize("auto_unbind", [True, False])
    def test_unbind_views_or_copies(self, auto_unbind):
        net = tk.TensorNetwork(auto_unbind=auto_unbind)
        ns = self.nodes(3, net=net)
        parts = tk.unbind(tk.stack(ns))
        assert all(p.is_view() == auto_unbind for p in parts)
        if auto_unbind:
            with pytest.raises(ValueError):
                parts[0].tensor = np.ones((2, 4, 2))

    def test_stack_gradients(self):
        net = tk.TensorNetwork()
        ns = self.nodes(3, role="param", net=net)
        values = [n.tensor.copy() for n in ns]
        parts = tk.unbind(tk.stack(ns))
        ad.sum_all(ad.mul(parts[2].variable, parts[2].variable)).backward()
        (buf,) = net.parameters()          # the three nodes now live in one buffer
        np.testing.assert_allclose(buf.grad[2], 2 * values[2], atol=1e-14)
        np.testing.assert_array_equal(buf.grad[:2], 0.0)


class TestEinsum:

    def ring(self):
        net = tk.TensorNetwork()
        a = node(net, (10, 15, 100), ("i", "j", "batch"), name="a")
        b = node(net, (15, 7, 100), ("j", "k", "batch"), name="b")
        c = node(net, (7, 10, 100), ("k", "i", "batch"), name="c")
        a["j"] ^ b["j"]
        b["k"] ^ c["k"]
        c["i"] ^ a["i"]
        return a, b, c

    def test_ring_listing(self):
        a, b, c = self.ring()
        out = tk.einsum("ijb,jkb,kib->b", a, b, c)
        assert out.shape == (100,)
        ref = np.array([np.trace(a.tensor[..., n] @ b.tensor[..., n] @ c.tensor[..., n])
                        for n in range(100)])
        np.testing.assert_allclose(out.tensor, ref, rtol=1e-12, atol=1e-12)

    def test_ring_equals_pairwise(self):
        a, b, c = self.ring()
        out = tk.einsum("ijb,jkb,kib->b", a, b, c).tensor.copy()
        pair = (a @ b) @ c
        np.testing.assert_allclose(pair.tensor, out, atol=1e-11)

    def test_transpose(self):
        net = tk.TensorNetwork()
        a = node(net, (2, 3), ("x", "y"))
        np.testing.assert_array_equal(tk.einsum("ij->ji", a).tensor, a.tensor.T)

    @pytest.mark.parametrize("spec", ["ij,jk", "ij,jk->ik->", "i,jk->ik", "ij,jk->ik"])
    def test_malformed_or_unconnected(self, spec):
        net = tk.TensorNetwork()
        a, b = node(net, (2, 3), ("x", "y")), node(net, (3, 4), ("y", "z"))
        with pytest.raises(ValueError):
            tk.einsum(spec, a, b)

    def test_stacked_einsum_matches_map(self):
        net = tk.TensorNetwork()
        lefts = [node(net, (2, 3), ("x", "y"), name="l") for _ in range(3)]
        rights = [node(net, (3, 4), ("y", "z"), name="r") for _ in range(3)]
        for l, r in zip(lefts, rights):
            l["y"] ^ r["y"]
        refs = [l.tensor @ r.tensor for l, r in zip(lefts, rights)]
        outs = tk.stacked_einsum("ij,jk->ik", lefts, rights)
        for o, ref in zip(outs, refs):
            np.testing.assert_allclose(o.tensor, ref, atol=1e-13)
        one = tk.stacked_einsum("ij,jk->ik", lefts[:1], rights[:1])
        np.testing.assert_allclose(one[0].tensor, refs[0], atol=1e-13)
        with pytest.raises(ValueError):
            tk.stacked_einsum("ij,jk->ik", lefts, rights[:2])


class TestElementwiseNodes:

    def test_permute_identity(self):
        net = tk.TensorNetwork()
        a = node(net, (2, 3), ("x", "y"))
        np.testing.assert_array_equal(tk.permute_node(a, ["x", "y"]).tensor, a.tensor)
        assert tk.permute_node(a, ["y", "x"]).axes_names == ["y", "x"]

    def test_tprod(self):
        net = tk.TensorNetwork()
        a, b = node(net, (2,), ("x",)), node(net, (3,), ("y",))
        c = tk.tprod(a, b)
        assert c.shape == (2, 3) and all(e.is_dangling() for e in c.edges)
        np.testing.assert_allclose(c.tensor, np.outer(a.tensor, b.tensor))

    def test_add_negation(self):
        net = tk.TensorNetwork()
        a = node(net, (2, 3), ("x", "y"))
        np.testing.assert_array_equal((a + a * -1).tensor, np.zeros((2, 3)))
        np.testing.assert_allclose((a - a).tensor, 0.0)
        np.testing.assert_allclose((a / 2.0).tensor, a.tensor / 2)


class TestTrace:

    def mps(self, **kw):
        return MPS(n_features=6, in_dim=2, bond_dim=3, init_std=0.3, seed=0, **kw)

    def data(self, batch, seed=1):
        return np.random.default_rng(seed).uniform(size=(batch, 6, 2))

    def test_traced_equals_untraced(self):
        ref = self.mps()(self.data(100)).value.copy()
        m = self.mps()
        m.trace(np.zeros((1, 6, 2)))
        np.testing.assert_allclose(m(self.data(100)).value, ref, atol=1e-12)

    def test_steady_state_creates_no_nodes(self):
        m = self.mps()
        m.trace(np.zeros((1, 6, 2)))
        m(self.data(10))
        created = m.nodes_created
        for s in range(3):
            m(self.data(10, seed=s))
        assert m.nodes_created == created

    def test_intermediates_are_freed(self):
        m = self.mps(inline_input=True, inline_mats=True)
        m.trace(np.zeros((1, 6, 2)))
        m(self.data(5))
        freed = [n for n in m.resultant_nodes().values()
                 if not m.memory.has_value(n.address)]
        assert freed
        with pytest.raises(tk.FreedTensorError):
            freed[0].tensor

    def test_batch_must_be_one(self):
        with pytest.raises(ValueError):
            self.mps().trace(np.zeros((2, 6, 2)))

    def test_reset_round_trip(self):
        m = self.mps()
        m.set_data_nodes()
        before = {k: n.tensor.copy() for k, n in m.nodes.items() if not n.is_empty()}
        m.trace(np.zeros((1, 6, 2)))
        m(self.data(4))
        steps = list(m.trace_plan.steps)
        m.reset()
        assert {k for k, n in m.nodes.items() if n.role != "data"} == set(before)
        for k, v in before.items():
            np.testing.assert_array_equal(m.nodes[k].tensor, v)
        m.trace(np.zeros((1, 6, 2)))
        assert m.trace_plan.steps == steps

    def test_reset_fresh_is_noop(self):
        m = self.mps()
        names = set(m.nodes)
        m.reset()
        assert set(m.nodes) == names

    def test_changed_contraction_is_detected(self):
        m = self.mps()
        m.trace(np.zeros((1, 6, 2)))
        with pytest.raises(RuntimeError):
            m(self.data(3), inline_input=True, inline_mats=True)
