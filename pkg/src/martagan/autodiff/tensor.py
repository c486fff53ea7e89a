"""Dense tensors and a single-use reverse-mode tape.

A :class:`Graph` is a flat, append-only record of every differentiable
operation executed while it is the active context. Node ids are assigned
in program order, so they are topologically sorted by construction, and
``backward`` replays them once in strictly descending order. A graph is
consumed by its backward pass; each training step records a fresh one.
"""

import numpy as np

_FLOAT_TYPES = (np.float32, np.float64)


class Tensor:
    """N-dimensional value array with an optional gradient slot.

    Values are stored row-major and treated as immutable once created
    (4-D data uses the batch × channels × height × width layout).
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.type not in _FLOAT_TYPES:
            arr = arr.astype(np.float64)
        # asarray keeps rank-0 shapes; ascontiguousarray would promote them to (1,)
        self.data = np.asarray(arr, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def numel(self):
        return self.data.size

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self):
        """Same values, cut loose from any recording (no grad)."""
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={tuple(self.shape)}, dtype={self.data.dtype.name}, requires_grad={self.requires_grad})"


class Node:
    __slots__ = ("op", "input_ids", "out", "backward_fn")

    def __init__(self, op, input_ids, out, backward_fn):
        self.op = op
        self.input_ids = input_ids
        self.out = out
        self.backward_fn = backward_fn


_GRAPH_STACK = []


class Graph:
    """Single-use tape of operation records."""

    def __init__(self):
        self.nodes = []
        self.consumed = False
        self._tensor_ids = {}   # id(tensor) -> node id
        self._needs = []        # node id -> does grad flow through it
        self._refs = []         # keep registered tensors alive (id() stability)

    # -- active-graph bookkeeping -------------------------------------------

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    @staticmethod
    def current():
        return _GRAPH_STACK[-1] if _GRAPH_STACK else None

    # -- recording ------------------------------------------------------------

    def _register_leaf(self, tensor):
        nid = len(self.nodes)
        self.nodes.append(Node("leaf", (), tensor, None))
        self._needs.append(tensor.requires_grad)
        self._tensor_ids[id(tensor)] = nid
        self._refs.append(tensor)
        return nid

    def tensor_id(self, tensor):
        nid = self._tensor_ids.get(id(tensor))
        if nid is None:
            nid = self._register_leaf(tensor)
        return nid

    def needs_grad(self, tensor):
        nid = self._tensor_ids.get(id(tensor))
        if nid is None:
            return tensor.requires_grad
        return self._needs[nid]

    def record(self, op, inputs, out, backward_fn):
        if self.consumed:
            raise RuntimeError("graph already consumed by backward; record on a fresh Graph")
        input_ids = tuple(self.tensor_id(t) for t in inputs)
        nid = len(self.nodes)
        self.nodes.append(Node(op, input_ids, out, backward_fn))
        self._needs.append(any(self._needs[i] for i in input_ids))
        self._tensor_ids[id(out)] = nid
        self._refs.append(out)

    # -- backward ---------------------------------------------------------------

    def backward(self, loss):
        """Populate d(loss)/d(leaf) for every requires_grad leaf, then consume the tape."""
        if self.consumed:
            raise RuntimeError("backward on a consumed graph; the tape is single-use")
        loss_id = self._tensor_ids.get(id(loss))
        if loss_id is None:
            raise ValueError("loss tensor was not produced on this graph")
        if loss.data.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {tuple(loss.shape)}")

        grads = [None] * len(self.nodes)
        grads[loss_id] = np.ones_like(loss.data)
        for nid in range(len(self.nodes) - 1, -1, -1):
            node = self.nodes[nid]
            gout = grads[nid]
            grads[nid] = None
            if gout is None or node.backward_fn is None or not self._needs[nid]:
                if node.backward_fn is None and node.out.requires_grad:
                    # leaf: fix its grad (zeros when the loss never touched it)
                    node.out.grad = (
                        # asarray, not ascontiguousarray: the latter turns rank-0 into (1,)
                        np.zeros_like(node.out.data) if gout is None else np.asarray(gout, order="C")
                    )
                continue
            contribs = node.backward_fn(gout)
            for iid, contrib in zip(node.input_ids, contribs):
                if contrib is None or not self._needs[iid]:
                    continue
                if grads[iid] is None:
                    grads[iid] = contrib
                else:
                    # out-of-place: contributions may be views of other buffers
                    grads[iid] = grads[iid] + contrib

        self.consumed = True
        self.nodes = []
        self._tensor_ids.clear()
        self._needs = []
        self._refs = []


def backward(graph, loss):
    """Run reverse-mode accumulation of a scalar loss over a recorded graph."""
    graph.backward(loss)
