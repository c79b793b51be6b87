import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

import tnkit as tk
from tnkit import autodiff as ad
from tnkit.network import MemoryStore
from tnkit.autodiff import Variable


def make(net, shape=(2, 5, 2), name="node", **kw):
    kw.setdefault("init_method", "randn")
    return tk.Node(shape, ("left", "input", "right")[:len(shape)], name=name, network=net, **kw)


class TestNode:

    def test_listing_node(self):
        net = tk.TensorNetwork()
        node = make(net, name="node1")
        assert node.shape == (2, 5, 2)
        assert node.axes_names == ["left", "input", "right"]
        assert [e.size() for e in node.edges] == [2, 5, 2]
        assert all(e.is_dangling() for e in node.edges)

    def test_zeros_and_ones(self):
        net = tk.TensorNetwork()
        np.testing.assert_array_equal(make(net, init_method="zeros").tensor, np.zeros((2, 5, 2)))
        np.testing.assert_array_equal(make(net, init_method="ones").tensor, np.ones((2, 5, 2)))

    def test_name_suffixing(self):
        net = tk.TensorNetwork()
        names = [make(net).name for _ in range(3)]
        assert names == ["node", "node_1", "node_2"]

    def test_edge_lookup_by_name_and_index(self):
        node = make(tk.TensorNetwork())
        assert node["input"] is node[1]
        assert node.get_axis_num("right") == 2

    @pytest.mark.parametrize("shape, axes", [((2, 2), ("a", "a")), ((2, 2), ("a",)),
                                             ((2,), ("1bad",)), ((0, 2), ("a", "b"))])
    def test_invalid_construction(self, shape, axes):
        with pytest.raises(ValueError):
            tk.Node(shape, axes, network=tk.TensorNetwork())

    def test_batch_axis_flag(self):
        node = tk.Node((3, 2), ("batch_x", "feature"), network=tk.TensorNetwork())
        assert node.axes[0].is_batch and not node.axes[1].is_batch
        assert node.edges[0].is_batch()

    def test_users_cannot_create_resultants(self):
        with pytest.raises(ValueError):
            tk.Node((2,), ("a",), role="resultant", network=tk.TensorNetwork())

    def test_empty_node(self):
        net = tk.TensorNetwork()
        a = tk.Node((2, 3), ("a", "b"), network=net)
        b = make(net, shape=(3,))
        assert a.is_empty()
        a["b"] ^ b["left"]          # connecting empty nodes is allowed
        with pytest.raises(ValueError):
            tk.contract_between(a, b)


class TestConnect:

    def test_listing_connect(self):
        net = tk.TensorNetwork()
        n1, n2 = make(net, name="node1"), make(net, name="node2")
        edge = n1["right"] ^ n2["left"]
        assert edge.size() == 2 and not edge.is_dangling()
        assert n1["right"] is n2["left"]
        assert len(net.resultant_nodes()) == 0    # connecting does not contract

    def test_size_mismatch(self):
        net = tk.TensorNetwork()
        with pytest.raises(ValueError):
            make(net)["input"] ^ make(net)["left"]

    def test_already_connected(self):
        net = tk.TensorNetwork()
        a, b, c = make(net), make(net), make(net)
        a["right"] ^ b["left"]
        with pytest.raises(ValueError):
            a["right"] ^ c["left"]

    def test_batch_axes_are_not_connected(self):
        net = tk.TensorNetwork()
        a = tk.Node((3, 2), ("batch", "f"), network=net, init_method="ones")
        b = tk.Node((3, 2), ("batch", "g"), network=net, init_method="ones")
        with pytest.raises(ValueError):
            a["batch"] ^ b["batch"]

    def test_networks_merge(self):
        net1, net2 = tk.TensorNetwork("one"), tk.TensorNetwork("two")
        a, b = make(net1, name="a"), make(net2, name="b")
        c = make(net2, name="c")
        b["right"] ^ c["left"]
        a["right"] ^ b["left"]
        assert {n.name for n in net1.nodes.values()} == {"a", "b", "c"}
        assert len(net2.nodes) == 0
        assert all(n.network is net1 for n in (a, b, c))
        # edge relations survive the move
        assert a["right"] is b["left"] and b["right"] is c["left"]

    def test_merge_renames_collisions(self):
        net1, net2 = tk.TensorNetwork(), tk.TensorNetwork()
        a, b = make(net1, name="x"), make(net2, name="x")
        a["right"] ^ b["left"]
        assert sorted(net1.nodes) == ["x", "x_1"]

    def test_disconnect_round_trip(self):
        net = tk.TensorNetwork()
        a, b = make(net), make(net)
        edge = a["right"] ^ b["left"]
        e1, e2 = edge.disconnect()
        assert e1.is_dangling() and e2.is_dangling()
        assert (e1.size(), e2.size()) == (2, 2)
        assert a["right"] is e1 and b["left"] is e2


class TestTensors:

    def test_set_and_get(self):
        net = tk.TensorNetwork()
        data = tk.Node((5,), ("feature",), name="data1", network=net, role="data")
        v = np.random.default_rng(0).normal(size=5)
        data.tensor = v
        np.testing.assert_array_equal(data.tensor, v)

    def test_connected_axis_is_frozen(self):
        net = tk.TensorNetwork()
        a, b = make(net), make(net)
        a["right"] ^ b["left"]
        with pytest.raises(ValueError):
            a.tensor = np.ones((2, 5, 3))
        a.tensor = np.ones((4, 6, 2))         # dangling axes may resize
        assert a.shape == (4, 6, 2) and a["input"].size() == 6

    def test_shared_address(self):
        net = tk.TensorNetwork()
        a, b = make(net), make(net)
        b.set_tensor_from(a)
        assert a.address == b.address
        a.tensor = np.full((2, 5, 2), 7.0)
        np.testing.assert_array_equal(b.tensor, np.full((2, 5, 2), 7.0))

    def test_uniform_chain_stores_one_tensor(self):
        net = tk.TensorNetwork()
        virtual = tk.Node((2, 3, 2), ("left", "input", "right"), name="virtual",
                          network=net, role="virtual", init_method="randn")
        nodes = [make(net, shape=(2, 3, 2), init_method=None) for _ in range(3)]
        for n in nodes:
            n.set_tensor_from(virtual)
        assert len({n.address for n in nodes + [virtual]}) == 1
        assert len(net.memory) == 1
        virtual.tensor = np.zeros((2, 3, 2))
        for n in nodes:
            np.testing.assert_array_equal(n.tensor, np.zeros((2, 3, 2)))
        nodes[0].set_tensor_from(nodes[0])       # no-op
        assert nodes[0].address == virtual.address

    def test_share_errors(self):
        net1, net2 = tk.TensorNetwork(), tk.TensorNetwork()
        with pytest.raises(ValueError):
            make(net1).set_tensor_from(make(net2))
        with pytest.raises(ValueError):
            make(net1).set_tensor_from(make(net1, shape=(2, 5)))

    def test_address_count_invariant(self):
        net = tk.TensorNetwork()
        nodes = [make(net) for _ in range(4)]
        assert len(net.memory) == 4
        nodes[1].set_tensor_from(nodes[0])
        assert len(net.memory) == 3 <= len(net.nodes)


class TestParameters:

    def test_parameterize_round_trip(self):
        net = tk.TensorNetwork()
        node = make(net)
        before = node.tensor.copy()
        node.parameterize(True)
        assert node.role == "param" and len(net.parameters()) == 1
        node.parameterize(False)
        assert node.role == "leaf" and net.parameters() == []
        node.parameterize(True)
        np.testing.assert_array_equal(node.tensor, before)

    def test_frozen_node_gets_no_grad(self):
        net = tk.TensorNetwork()
        a = make(net, role="param")
        b = make(net, role="param")
        a["right"] ^ b["left"]
        b.parameterize(False)
        out = tk.contract_between(a, b)
        ad.sum_all(out.variable).backward()
        assert a.variable.grad is not None
        assert not b.variable.requires_grad and b.variable.grad is None

    def test_parameterize_data_fails(self):
        node = tk.Node((2,), ("feature",), network=tk.TensorNetwork(), role="data")
        with pytest.raises(ValueError):
            node.parameterize(True)

    def test_state_dict_round_trip(self, tmp_path):
        net = tk.TensorNetwork()
        a, b = make(net, name="a", role="param"), make(net, name="b")
        assert set(net.state_dict()) == {"a"}
        net.save(tmp_path / "s.tkro")
        saved = a.tensor.copy()
        a.tensor = np.zeros_like(saved)
        net.load(tmp_path / "s.tkro")
        np.testing.assert_array_equal(a.tensor, saved)

    def test_delete_node(self):
        net = tk.TensorNetwork()
        a, b = make(net, name="a"), make(net, name="b")
        a["right"] ^ b["left"]
        net.delete_node(a)
        assert "a" not in net and b["left"].is_dangling()


class TestMemoryStore:

    def test_hand_counted_peak(self):
        store = MemoryStore()
        x, y = store.allocate(), store.allocate()
        store.set(x, Variable(np.zeros(10)))      # 80 bytes
        store.set(y, Variable(np.zeros((2, 5))))  # +80
        assert store.live_bytes == 160 and store.peak_bytes == 160
        store.free(x)
        assert store.live_bytes == 80 and store.peak_bytes == 160
        store.reset_peak()
        assert store.peak_bytes == 80
        v = store.allocate()
        store.set_view(v, y, 1)                   # views cost nothing
        assert store.live_bytes == 80
        np.testing.assert_array_equal(store.get(v).value, np.zeros(5))
        store.release(y)
        assert store.live_bytes == 0

    def test_freed_read_raises(self):
        store = MemoryStore()
        x = store.allocate()
        store.set(x, Variable(np.ones(3)))
        store.free(x)
        with pytest.raises(tk.FreedTensorError):
            store.get(x)

    @settings(max_examples=40)
    @given(st.lists(st.tuples(st.integers(0, 3), st.integers(1, 20)), max_size=30))
    def test_peak_is_running_maximum(self, ops):
        store = MemoryStore()
        addrs = [store.allocate() for _ in range(4)]
        sizes = [0] * 4
        peak = 0
        for slot, n in ops:
            if n % 3 == 0:
                store.free(addrs[slot])
                sizes[slot] = 0
            else:
                store.set(addrs[slot], Variable(np.zeros(n)))
                sizes[slot] = 8 * n
            peak = max(peak, sum(sizes))
            assert store.live_bytes == sum(sizes)
        assert store.peak_bytes == peak
