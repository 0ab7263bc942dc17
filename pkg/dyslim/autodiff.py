# dyslim/autodiff.py
"""
A small define-by-run reverse-mode differentiation tape over float64 arrays.

A Graph is built fresh for every training step. Leaves are parameters,
named inputs or constants; every other node is the result of one op from a
closed set (affine, ReLU, add/sub/mul, scale, dilated circular conv1d,
sum/mean, squared norm, pairwise squared distances, rational-quadratic
kernel, reshape, stop-gradient). There is no broadcasting: binary ops need
identical shapes and all shape mixing goes through an explicit op.
"""

from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from dyslim.errors import ContractError, NonFiniteError, ShapeError

# --- Type Aliases ---
Array = np.ndarray
Shape = Tuple[int, ...]


# --- Ops ---

class Op:
    """One differentiable primitive. Subclasses fill in the three hooks."""

    kind = "op"

    def out_shape(self, *shapes: Shape) -> Shape:
        raise NotImplementedError

    def forward(self, *values: Array) -> Array:
        raise NotImplementedError

    def backward(self, grad: Array, out: Array, *values: Array) -> Tuple[Optional[Array], ...]:
        raise NotImplementedError


class Affine(Op):
    kind = "affine"

    def out_shape(self, x, w, b):
        if len(x) != 2 or len(w) != 2 or len(b) != 1:
            raise ValueError(f"affine expects (B,I),(I,O),(O,), got {x},{w},{b}")
        if x[1] != w[0] or w[1] != b[0]:
            raise ValueError(f"affine extents disagree: {x},{w},{b}")
        return (x[0], w[1])

    def forward(self, x, w, b):
        return x @ w + b

    def backward(self, grad, out, x, w, b):
        return grad @ w.T, x.T @ grad, grad.sum(axis=0)


class Relu(Op):
    kind = "relu"

    def out_shape(self, x):
        return x

    def forward(self, x):
        return np.maximum(x, 0.0)

    def backward(self, grad, out, x):
        return (grad * (x > 0.0),)


class _Elementwise(Op):
    def out_shape(self, a, b):
        if a != b:
            raise ValueError(f"{self.kind} needs equal shapes, got {a} and {b}")
        return a


class Add(_Elementwise):
    kind = "add"

    def forward(self, a, b):
        return a + b

    def backward(self, grad, out, a, b):
        return grad, grad


class Sub(_Elementwise):
    kind = "sub"

    def forward(self, a, b):
        return a - b

    def backward(self, grad, out, a, b):
        return grad, -grad


class Mul(_Elementwise):
    kind = "mul"

    def forward(self, a, b):
        return a * b

    def backward(self, grad, out, a, b):
        return grad * b, grad * a


class Scale(Op):
    kind = "scale"

    def __init__(self, factor: float):
        self.factor = float(factor)

    def out_shape(self, x):
        return x

    def forward(self, x):
        return self.factor * x

    def backward(self, grad, out, x):
        return (self.factor * grad,)


class Sum(Op):
    kind = "sum"

    def out_shape(self, x):
        return ()

    def forward(self, x):
        return np.asarray(x.sum())

    def backward(self, grad, out, x):
        return (np.full(x.shape, float(grad)),)


class Mean(Op):
    kind = "mean"

    def out_shape(self, x):
        if int(np.prod(x)) == 0:
            raise ValueError("mean of an empty tensor")
        return ()

    def forward(self, x):
        return np.asarray(x.mean())

    def backward(self, grad, out, x):
        return (np.full(x.shape, float(grad) / x.size),)


class SqNorm(Op):
    kind = "sqnorm"

    def out_shape(self, x):
        return ()

    def forward(self, x):
        return np.asarray(np.sum(x * x))

    def backward(self, grad, out, x):
        return (2.0 * float(grad) * x,)


class Reshape(Op):
    kind = "reshape"

    def __init__(self, shape: Sequence[int]):
        self.shape = tuple(int(s) for s in shape)

    def out_shape(self, x):
        if int(np.prod(x)) != int(np.prod(self.shape)):
            raise ValueError(f"cannot reshape {x} into {self.shape}")
        return self.shape

    def forward(self, x):
        return x.reshape(self.shape)

    def backward(self, grad, out, x):
        return (grad.reshape(x.shape),)


class StopGradient(Op):
    kind = "stop_gradient"

    def out_shape(self, x):
        return x

    def forward(self, x):
        return x.copy()

    def backward(self, grad, out, x):
        return (None,)


class Conv1d(Op):
    """
    Dilated circular convolution (cross-correlation convention).

    x is (B, C, N), w is (O, C, K) with K odd, b is (O,):
        out[b, o, n] = b[o] + sum_{c, j} w[o, c, j] * x[b, c, (n + d*(j - (K-1)/2)) mod N]
    """

    kind = "conv1d"

    def __init__(self, dilation: int = 1):
        self.dilation = int(dilation)

    def out_shape(self, x, w, b):
        if len(x) != 3 or len(w) != 3 or len(b) != 1:
            raise ValueError(f"conv1d expects (B,C,N),(O,C,K),(O,), got {x},{w},{b}")
        if x[1] != w[1] or w[0] != b[0]:
            raise ValueError(f"conv1d channel extents disagree: {x},{w},{b}")
        if w[2] % 2 != 1:
            raise ValueError(f"conv1d kernel width must be odd, got {w[2]}")
        return (x[0], w[0], x[2])

    def _shifts(self, width: int) -> List[int]:
        half = (width - 1) // 2
        return [self.dilation * (j - half) for j in range(width)]

    def _columns(self, x, width):
        # (B, C, K, N) -> (B, C*K, N); channel-major to match w.reshape(O, C*K)
        taps = np.stack([np.roll(x, -s, axis=2) for s in self._shifts(width)], axis=2)
        return taps.reshape(x.shape[0], x.shape[1] * width, x.shape[2])

    def forward(self, x, w, b):
        cols = self._columns(x, w.shape[2])
        return np.matmul(w.reshape(w.shape[0], -1), cols) + b[None, :, None]

    def backward(self, grad, out, x, w, b):
        n_out, n_in, width = w.shape
        cols = self._columns(x, width)
        gw = np.tensordot(grad, cols, axes=([0, 2], [0, 2])).reshape(w.shape)
        gcols = np.matmul(w.reshape(n_out, -1).T, grad).reshape(x.shape[0], n_in, width, x.shape[2])
        gx = np.zeros_like(x)
        for j, s in enumerate(self._shifts(width)):
            gx += np.roll(gcols[:, :, j, :], s, axis=2)
        return gx, gw, grad.sum(axis=(0, 2))


class PairwiseSqDists(Op):
    kind = "pairwise_sq_dists"

    def out_shape(self, a, b):
        if len(a) != 2 or len(b) != 2:
            raise ValueError(f"pairwise distances expect (n,d),(m,d), got {a},{b}")
        if a[1] != b[1]:
            raise ValueError(f"feature dimension mismatch: {a[1]} vs {b[1]}")
        return (a[0], b[0])

    def forward(self, a, b):
        diff = a[:, None, :] - b[None, :, :]
        return np.sum(diff * diff, axis=-1)

    def backward(self, grad, out, a, b):
        ga = 2.0 * (a * grad.sum(axis=1)[:, None] - grad @ b)
        gb = 2.0 * (b * grad.sum(axis=0)[:, None] - grad.T @ a)
        return ga, gb


class RQKernel(Op):
    """Mixture of rational-quadratic kernels applied to squared distances."""

    kind = "rq_kernel"

    def __init__(self, bandwidths: Sequence[float]):
        self.sq_bandwidths = [float(s) ** 2 for s in bandwidths]

    def out_shape(self, d):
        return d

    def forward(self, d):
        out = np.zeros_like(d)
        for s2 in self.sq_bandwidths:
            out += s2 / (s2 + d)
        return out

    def backward(self, grad, out, d):
        slope = np.zeros_like(d)
        for s2 in self.sq_bandwidths:
            slope -= s2 / (s2 + d) ** 2
        return (grad * slope,)


# --- Graph ---

class Node:
    __slots__ = ("id", "op", "inputs", "value", "leaf", "name", "requires_grad")

    def __init__(self, node_id: int, op: Optional[Op], inputs: Tuple[int, ...], value: Array,
                 leaf: Optional[str], name: Optional[str], requires_grad: bool):
        self.id = node_id
        self.op = op
        self.inputs = inputs
        self.value = value
        self.leaf = leaf
        self.name = name
        self.requires_grad = requires_grad

    @property
    def kind(self) -> str:
        return self.op.kind if self.op is not None else self.leaf


class Tensor:
    """A handle on one node of a Graph."""

    __slots__ = ("graph", "id")

    def __init__(self, graph: "Graph", node_id: int):
        self.graph = graph
        self.id = node_id

    @property
    def value(self) -> Array:
        return self.graph.nodes[self.id].value

    @property
    def shape(self) -> Shape:
        return self.value.shape

    @property
    def requires_grad(self) -> bool:
        return self.graph.nodes[self.id].requires_grad

    def __add__(self, other: "Tensor") -> "Tensor":
        return self.graph.apply(Add(), self, other)

    def __sub__(self, other: "Tensor") -> "Tensor":
        return self.graph.apply(Sub(), self, other)

    def __mul__(self, other: "Tensor") -> "Tensor":
        return self.graph.apply(Mul(), self, other)

    def __neg__(self) -> "Tensor":
        return self.graph.apply(Scale(-1.0), self)

    def __repr__(self) -> str:
        return f"Tensor(node={self.id}, shape={self.shape})"


def _as_f64(value) -> Array:
    return np.array(value, dtype=np.float64)


class Graph:
    """
    An append-only tape. Node ids are assigned in creation order, which is
    also the topological order, so the graph cannot contain a cycle.
    """

    def __init__(self):
        self.nodes: List[Node] = []
        self.outputs: Dict[str, int] = {}
        self._leaf_names: Dict[str, int] = {}

    # --- Leaves ---

    def _leaf(self, leaf: str, value, name: Optional[str], requires_grad: bool) -> Tensor:
        arr = _as_f64(value)
        node_id = len(self.nodes)
        if name is not None:
            if name in self._leaf_names:
                raise ContractError(f"duplicate leaf name '{name}'")
            self._leaf_names[name] = node_id
        if not np.all(np.isfinite(arr)):
            raise NonFiniteError(f"non-finite value bound to {leaf} '{name}'", node_id, leaf)
        self.nodes.append(Node(node_id, None, (), arr, leaf, name, requires_grad))
        return Tensor(self, node_id)

    def param(self, name: str, value) -> Tensor:
        return self._leaf("param", value, name, True)

    def input(self, name: str, value) -> Tensor:
        return self._leaf("input", value, name, False)

    def constant(self, value) -> Tensor:
        return self._leaf("constant", value, None, False)

    # --- Ops ---

    def apply(self, op: Op, *inputs: Tensor) -> Tensor:
        node_id = len(self.nodes)
        for t in inputs:
            if t.graph is not self:
                raise ContractError(f"op {op.kind} mixes tensors from different graphs")
        try:
            shape = op.out_shape(*(t.shape for t in inputs))
        except ValueError as e:
            raise ShapeError(str(e), node_id, op.kind) from None
        values = [t.value for t in inputs]
        with np.errstate(all="ignore"):
            out = op.forward(*values)
        if out.shape != shape:
            raise ShapeError(f"op produced {out.shape}, expected {shape}", node_id, op.kind)
        if not np.all(np.isfinite(out)):
            raise NonFiniteError("non-finite value in forward pass", node_id, op.kind)
        requires_grad = (not isinstance(op, StopGradient)) and any(t.requires_grad for t in inputs)
        self.nodes.append(Node(node_id, op, tuple(t.id for t in inputs), out, None, None, requires_grad))
        return Tensor(self, node_id)

    def output(self, name: str, tensor: Tensor) -> Tensor:
        self.outputs[name] = tensor.id
        return tensor

    @property
    def param_ids(self) -> Dict[str, int]:
        return {n.name: n.id for n in self.nodes if n.leaf == "param"}

    # --- Evaluation ---

    def forward_eval(self, inputs: Optional[Mapping[str, Array]] = None) -> Dict[str, Array]:
        """
        Rebinds the named leaves in `inputs` and recomputes every op node in
        tape order. Returns the values of the named outputs.
        """
        for name, value in (inputs or {}).items():
            if name not in self._leaf_names:
                raise ContractError(f"graph has no leaf named '{name}'")
            node = self.nodes[self._leaf_names[name]]
            arr = _as_f64(value)
            if arr.shape != node.value.shape:
                raise ShapeError(f"leaf '{name}' bound with {arr.shape}, expected {node.value.shape}",
                                 node.id, node.leaf)
            if not np.all(np.isfinite(arr)):
                raise NonFiniteError(f"non-finite value bound to '{name}'", node.id, node.leaf)
            node.value = arr
        for node in self.nodes:
            if node.op is None:
                continue
            with np.errstate(all="ignore"):
                out = node.op.forward(*(self.nodes[i].value for i in node.inputs))
            if not np.all(np.isfinite(out)):
                raise NonFiniteError("non-finite value in forward pass", node.id, node.kind)
            node.value = out
        return {name: self.nodes[i].value for name, i in self.outputs.items()}

    def backward(self, output: Tensor) -> Dict[str, Array]:
        """
        Reverse sweep from a scalar output. Returns d(output)/d(param) for every
        parameter leaf on the tape; parameters the output does not depend on
        get a zero array.
        """
        root = self.nodes[output.id]
        if root.value.shape != () and root.value.size != 1:
            raise ContractError(f"backward needs a scalar output, node {root.id} has shape {root.value.shape}")
        adjoints: Dict[int, Array] = {root.id: np.ones_like(root.value)}
        for node in reversed(self.nodes[:root.id + 1]):
            grad = adjoints.pop(node.id, None) if node.op is not None else adjoints.get(node.id)
            if grad is None or node.op is None or not node.requires_grad:
                continue
            values = [self.nodes[i].value for i in node.inputs]
            with np.errstate(all="ignore"):
                parts = node.op.backward(grad, node.value, *values)
            for i, part in zip(node.inputs, parts):
                if part is None or not self.nodes[i].requires_grad:
                    continue
                if not np.all(np.isfinite(part)):
                    raise NonFiniteError("non-finite adjoint in backward pass", node.id, node.kind)
                if i in adjoints:
                    adjoints[i] = adjoints[i] + part
                else:
                    adjoints[i] = part
        grads = {}
        for name, i in self.param_ids.items():
            g = adjoints.get(i)
            grads[name] = np.zeros_like(self.nodes[i].value) if g is None else np.asarray(g, dtype=np.float64)
        return grads


# --- Functional front end ---

def _graph_of(*tensors: Tensor) -> Graph:
    return tensors[0].graph


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    return _graph_of(x).apply(Affine(), x, w, b)


def relu(x: Tensor) -> Tensor:
    return x.graph.apply(Relu(), x)


def scale(x: Tensor, factor: float) -> Tensor:
    return x.graph.apply(Scale(factor), x)


def sum_(x: Tensor) -> Tensor:
    return x.graph.apply(Sum(), x)


def mean(x: Tensor) -> Tensor:
    return x.graph.apply(Mean(), x)


def sqnorm(x: Tensor) -> Tensor:
    return x.graph.apply(SqNorm(), x)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    return x.graph.apply(Reshape(shape), x)


def stop_gradient(x: Tensor) -> Tensor:
    return x.graph.apply(StopGradient(), x)


def conv1d(x: Tensor, w: Tensor, b: Tensor, dilation: int = 1) -> Tensor:
    return x.graph.apply(Conv1d(dilation), x, w, b)


def pairwise_sq_dists(a: Tensor, b: Tensor) -> Tensor:
    return a.graph.apply(PairwiseSqDists(), a, b)


def rq_kernel(sq_dists: Tensor, bandwidths: Sequence[float]) -> Tensor:
    return sq_dists.graph.apply(RQKernel(bandwidths), sq_dists)


def forward_eval(graph: Graph, inputs: Optional[Mapping[str, Array]] = None) -> Dict[str, Array]:
    return graph.forward_eval(inputs)


def backward(graph: Graph, output: Tensor) -> Dict[str, Array]:
    return graph.backward(output)


# --- Parameter storage ---

class ParamStore:
    """
    Named float64 parameters packed into one flat buffer. Entries are fixed
    at construction; values can be overwritten but never reshaped.
    """

    def __init__(self, entries: Iterable[Tuple[str, Array]]):
        names: List[str] = []
        shapes: Dict[str, Shape] = {}
        arrays = []
        for name, value in entries:
            if name in shapes:
                raise ContractError(f"duplicate parameter name '{name}'")
            arr = _as_f64(value)
            names.append(name)
            shapes[name] = arr.shape
            arrays.append(arr.ravel())
        self._names = names
        self._shapes = shapes
        self._offsets: Dict[str, int] = {}
        offset = 0
        for name, arr in zip(names, arrays):
            self._offsets[name] = offset
            offset += arr.size
        self._flat = np.concatenate(arrays) if arrays else np.zeros(0)

    @property
    def names(self) -> List[str]:
        return list(self._names)

    @property
    def size(self) -> int:
        return int(self._flat.size)

    def shape(self, name: str) -> Shape:
        return self._shapes[name]

    def __contains__(self, name: str) -> bool:
        return name in self._shapes

    def __len__(self) -> int:
        return len(self._names)

    def __getitem__(self, name: str) -> Array:
        start = self._offsets[name]
        n = int(np.prod(self._shapes[name], dtype=np.int64))
        return self._flat[start:start + n].reshape(self._shapes[name])

    def __setitem__(self, name: str, value) -> None:
        if name not in self._shapes:
            raise ContractError(f"unknown parameter '{name}'")
        arr = _as_f64(value)
        if arr.shape != self._shapes[name]:
            raise ShapeError(f"parameter '{name}' has shape {self._shapes[name]}, got {arr.shape}")
        self[name][...] = arr

    def items(self):
        return [(name, self[name]) for name in self._names]

    def flatten(self) -> Array:
        return self._flat.copy()

    def assign_flat(self, flat: Array) -> None:
        flat = _as_f64(flat)
        if flat.shape != self._flat.shape:
            raise ShapeError(f"flat parameter vector has shape {flat.shape}, expected {self._flat.shape}")
        self._flat[...] = flat

    def flatten_like(self, grads: Mapping[str, Array]) -> Array:
        """Packs a name -> array mapping in store order; missing names become zeros."""
        out = np.zeros_like(self._flat)
        for name in self._names:
            if name in grads:
                start = self._offsets[name]
                g = np.asarray(grads[name], dtype=np.float64)
                out[start:start + g.size] = g.ravel()
        return out

    def manifest(self) -> List[Dict]:
        """(name, shape, byte offset) per entry, in payload order."""
        return [{"name": n, "shape": list(self._shapes[n]), "offset": 8 * self._offsets[n]}
                for n in self._names]

    def copy(self) -> "ParamStore":
        return ParamStore(self.items())
