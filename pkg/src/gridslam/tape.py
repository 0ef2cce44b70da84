"""Minimal reverse-mode differentiation over numpy arrays.

Graphs are built define-by-run on a Tape: each op records its forward
value and closures computing vector-Jacobian products for each parent.
``Tape.backward`` walks the node list once in reverse and accumulates
gradients into the ``Param`` leaves.

Conventions at non-differentiable points: relu'(0) = 0, d|x|/dx at 0 is
0, elementwise/constant max passes the gradient to the first argument
on ties, and the l2 norm has zero gradient at the origin.

Pose-dependent positions do not tape the exponential map. The
``transform_points`` / ``inv_transform_points`` ops consume a raw twist
parameter eps (meaning T = T_hat @ Exp(eps)) and apply the analytic
3x6 point-vs-twist Jacobian built from the SE(3) right Jacobian.
"""

import numpy as np

from . import geometry, kernels
from .errors import NonScalarOutput, ShapeMismatch
from .interp import trilinear_coords


class Param:
    """Leaf array with a gradient buffer."""

    __slots__ = ("value", "grad", "name")

    def __init__(self, value, name: str = ""):
        self.value = np.array(value, float)
        self.grad = np.zeros_like(self.value)
        self.name = name

    def zero_grad(self):
        self.grad[...] = 0.0


class Node:
    __slots__ = ("value", "parents", "vjps", "param")

    def __init__(self, value, parents=(), vjps=(), param=None):
        self.value = value
        self.parents = parents
        self.vjps = vjps
        self.param = param


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum grad down to the given (broadcastable) shape."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


class Tape:
    """Append-only op recorder; one backward pass per scalar output."""

    def __init__(self):
        self._nodes: list[Node] = []

    def _push(self, value, parents=(), vjps=(), param=None) -> Node:
        node = Node(np.asarray(value, float), tuple(parents), tuple(vjps), param)
        self._nodes.append(node)
        return node

    # ---- leaves ----

    def param(self, p: Param) -> Node:
        return self._push(p.value, param=p)

    def const(self, value) -> Node:
        return self._push(np.asarray(value, float))

    def _as_node(self, x) -> Node:
        return x if isinstance(x, Node) else self.const(x)

    # ---- arithmetic ----

    def add(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        val = a.value + b.value
        return self._push(val, (a, b), (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(g, b.value.shape),
        ))

    def sub(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        val = a.value - b.value
        return self._push(val, (a, b), (
            lambda g: _unbroadcast(g, a.value.shape),
            lambda g: _unbroadcast(-g, b.value.shape),
        ))

    def mul(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        val = a.value * b.value
        return self._push(val, (a, b), (
            lambda g: _unbroadcast(g * b.value, a.value.shape),
            lambda g: _unbroadcast(g * a.value, b.value.shape),
        ))

    def div(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        val = a.value / b.value
        return self._push(val, (a, b), (
            lambda g: _unbroadcast(g / b.value, a.value.shape),
            lambda g: _unbroadcast(-g * a.value / (b.value * b.value),
                                   b.value.shape),
        ))

    def scale(self, a: Node, s: float) -> Node:
        s = float(s)
        return self._push(a.value * s, (a,), (lambda g: g * s,))

    def add_n(self, nodes) -> Node:
        nodes = [self._as_node(n) for n in nodes]
        if not nodes:
            raise ShapeMismatch("add_n needs at least one node")
        val = nodes[0].value.copy()
        for n in nodes[1:]:
            if n.value.shape != val.shape:
                raise ShapeMismatch("add_n shapes differ")
            val += n.value
        return self._push(val, tuple(nodes),
                          tuple(lambda g: g for _ in nodes))

    # ---- linear algebra ----

    def matmul(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        if a.value.ndim != 2 or b.value.ndim != 2 \
                or a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatch(
                f"matmul {a.value.shape} x {b.value.shape}")
        val = a.value @ b.value
        return self._push(val, (a, b), (
            lambda g: g @ b.value.T,
            lambda g: a.value.T @ g,
        ))

    def linear(self, x: Node, w: Node, b: Node) -> Node:
        """Affine map rows(x) @ w + b."""
        return self.add(self.matmul(x, w), b)

    # ---- elementwise nonlinearities ----

    def relu(self, a: Node) -> Node:
        mask = a.value > 0.0
        return self._push(np.where(mask, a.value, 0.0), (a,),
                          (lambda g: g * mask,))

    def abs(self, a: Node) -> Node:
        sign = np.sign(a.value)
        return self._push(np.abs(a.value), (a,), (lambda g: g * sign,))

    def exp(self, a: Node) -> Node:
        val = np.exp(a.value)
        return self._push(val, (a,), (lambda g: g * val,))

    def square(self, a: Node) -> Node:
        return self._push(a.value * a.value, (a,),
                          (lambda g: g * (2.0 * a.value),))

    def sqrt(self, a: Node) -> Node:
        val = np.sqrt(a.value)
        inv = np.where(val > 0.0, 0.5 / np.where(val > 0.0, val, 1.0), 0.0)
        return self._push(val, (a,), (lambda g: g * inv,))

    def max_const(self, a: Node, c: float) -> Node:
        c = float(c)
        mask = a.value >= c
        return self._push(np.maximum(a.value, c), (a,), (lambda g: g * mask,))

    def maximum(self, a: Node, b: Node) -> Node:
        a, b = self._as_node(a), self._as_node(b)
        if a.value.shape != b.value.shape:
            raise ShapeMismatch("maximum shapes differ")
        take_a = a.value >= b.value
        return self._push(np.where(take_a, a.value, b.value), (a, b), (
            lambda g: g * take_a,
            lambda g: g * ~take_a,
        ))

    # ---- reductions / shaping ----

    def sum(self, a: Node) -> Node:
        return self._push(a.value.sum(), (a,),
                          (lambda g: np.broadcast_to(g, a.value.shape).copy(),))

    def mean(self, a: Node) -> Node:
        n = a.value.size
        return self._push(a.value.mean(), (a,),
                          (lambda g: np.broadcast_to(g / n, a.value.shape).copy(),))

    def row_sum(self, a: Node) -> Node:
        """Sum [n, d] over the last axis -> [n]."""
        return self._push(a.value.sum(axis=-1), (a,),
                          (lambda g: np.repeat(g[..., None],
                                               a.value.shape[-1], axis=-1),))

    def concat(self, nodes, axis: int = 0) -> Node:
        nodes = [self._as_node(n) for n in nodes]
        sizes = [n.value.shape[axis] for n in nodes]
        offsets = np.cumsum([0] + sizes)
        val = np.concatenate([n.value for n in nodes], axis=axis)

        def make_vjp(i):
            sl = [slice(None)] * val.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            sl = tuple(sl)
            return lambda g: g[sl]

        return self._push(val, tuple(nodes),
                          tuple(make_vjp(i) for i in range(len(nodes))))

    def reshape(self, a: Node, shape) -> Node:
        old = a.value.shape
        return self._push(a.value.reshape(shape), (a,),
                          (lambda g: g.reshape(old),))

    def moveaxis(self, a: Node, src: int, dst: int) -> Node:
        return self._push(np.moveaxis(a.value, src, dst), (a,),
                          (lambda g: np.moveaxis(g, dst, src),))

    def l2norm(self, a: Node) -> Node:
        """Euclidean norm of a flat vector; zero gradient at the origin."""
        n = float(np.linalg.norm(a.value))
        if n > 0.0:
            direction = a.value / n
            vjp = lambda g: g * direction
        else:
            vjp = lambda g: np.zeros_like(a.value)
        return self._push(n, (a,), (vjp,))

    # ---- grid / volume ops ----

    def gather_trilinear(self, feats: Node, pos, origin, cell_size, dims) -> Node:
        """Trilinear feature gather: [n, d] from flattened [V, d] features.

        ``pos`` may be a Node (pose-dependent) or a plain array. Queries
        are clamped into the lattice; out-of-box rows must be masked by
        the caller.
        """
        feats = self._as_node(feats)
        pos_node = pos if isinstance(pos, Node) else None
        pos_val = pos.value if isinstance(pos, Node) else np.asarray(pos, float)
        if pos_val.ndim != 2 or pos_val.shape[1] != 3:
            raise ShapeMismatch(f"positions must be [n,3], got {pos_val.shape}")
        idx, w, dw = trilinear_coords(pos_val, origin, cell_size, dims)
        val = kernels.gather_weighted(feats.value, idx, w)
        n_vertices = feats.value.shape[0]

        parents = [feats]
        vjps = [lambda g: kernels.scatter_weighted(g, idx, w, n_vertices)]
        if pos_node is not None:
            parents.append(pos_node)

            def vjp_pos(g):
                gw = kernels.gather_dot(feats.value, idx, g)
                return np.einsum("jc,jcx->jx", gw, dw)

            vjps.append(vjp_pos)
        return self._push(val, tuple(parents), tuple(vjps))

    def conv3d(self, x: Node, w: Node, b: Node) -> Node:
        """3D convolution (kernel 3, stride 1, zero padding)."""
        x, w, b = self._as_node(x), self._as_node(w), self._as_node(b)
        if x.value.ndim != 4 or w.value.ndim != 5 \
                or w.value.shape[1] != x.value.shape[0] \
                or w.value.shape[2:] != (3, 3, 3) \
                or b.value.shape != (w.value.shape[0],):
            raise ShapeMismatch(
                f"conv3d shapes x={x.value.shape} w={w.value.shape} "
                f"b={b.value.shape}")
        val = kernels.conv3d(x.value, w.value, b.value)
        cache: list = [None, None]  # [grad array, backward triple]

        def grads(g):
            if cache[1] is None or cache[0] is not g:
                cache[0] = g
                cache[1] = kernels.conv3d_backward(g, x.value, w.value)
            return cache[1]

        return self._push(val, (x, w, b), (
            lambda g: grads(g)[0],
            lambda g: grads(g)[1],
            lambda g: grads(g)[2],
        ))

    def avg_pool_scatter(self, cell_idx: np.ndarray, values: Node,
                         n_cells: int) -> Node:
        """Scatter-mean of per-point values into cells: [n_cells, c].

        Cells that receive no points stay zero.
        """
        values = self._as_node(values)
        idx = np.asarray(cell_idx, np.int64)
        sums, counts = kernels.scatter_mean(idx, values.value, n_cells)
        denom = np.maximum(counts, 1.0)
        val = sums / denom[:, None]

        def vjp(g):
            return (g / denom[:, None])[idx]

        return self._push(val, (values,), (vjp,))

    # ---- pose-dependent transforms ----

    def transform_points(self, eps, t_hat: geometry.Pose, x) -> Node:
        """Apply T_hat @ Exp(eps) to [n, 3] points.

        ``eps`` is a twist Node (or None for a fixed pose); ``x`` may be
        a Node or a plain array.
        """
        eps_node = eps if isinstance(eps, Node) else None
        x_node = x if isinstance(x, Node) else None
        x_val = x.value if isinstance(x, Node) else np.asarray(x, float)
        t_cur, jr = self._current_pose(eps_node, t_hat)
        val = geometry.transform_point(t_cur, x_val)

        parents, vjps = [], []
        if eps_node is not None:
            rot = t_cur.rotation

            def vjp_eps(g):
                p = g @ rot  # rows are R^T g_j
                rot_part = np.cross(x_val, p).sum(axis=0)
                tran_part = p.sum(axis=0)
                return jr.T @ np.concatenate([rot_part, tran_part])

            parents.append(eps_node)
            vjps.append(vjp_eps)
        if x_node is not None:
            parents.append(x_node)
            vjps.append(lambda g: g @ t_cur.rotation)
        return self._push(val, tuple(parents), tuple(vjps))

    def inv_transform_points(self, eps, t_hat: geometry.Pose, x) -> Node:
        """Apply (T_hat @ Exp(eps))^-1 to [n, 3] points."""
        eps_node = eps if isinstance(eps, Node) else None
        x_node = x if isinstance(x, Node) else None
        x_val = x.value if isinstance(x, Node) else np.asarray(x, float)
        t_cur, jr = self._current_pose(eps_node, t_hat)
        val = geometry.transform_point(geometry.inverse(t_cur), x_val)

        parents, vjps = [], []
        if eps_node is not None:

            def vjp_eps(g):
                rot_part = -np.cross(val, g).sum(axis=0)
                tran_part = -g.sum(axis=0)
                return jr.T @ np.concatenate([rot_part, tran_part])

            parents.append(eps_node)
            vjps.append(vjp_eps)
        if x_node is not None:
            parents.append(x_node)
            vjps.append(lambda g: g @ t_cur.rotation.T)
        return self._push(val, tuple(parents), tuple(vjps))

    @staticmethod
    def _current_pose(eps_node, t_hat: geometry.Pose):
        if eps_node is None:
            return t_hat, None
        eps_val = eps_node.value.reshape(6)
        t_cur = geometry.compose(t_hat, geometry.se3_exp(eps_val))
        jr = geometry.se3_right_jacobian(eps_val)
        return t_cur, jr

    # ---- backward ----

    def backward(self, out: Node) -> None:
        """Accumulate d(out)/d(param) into every reachable Param.grad."""
        if out.value.size != 1:
            raise NonScalarOutput(
                f"backward needs a scalar, got shape {out.value.shape}")
        grads: dict[int, np.ndarray] = {
            id(out): np.ones_like(out.value)}
        for node in reversed(self._nodes):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.param is not None:
                node.param.grad += g.reshape(node.param.grad.shape)
            for parent, vjp in zip(node.parents, node.vjps):
                if vjp is None:
                    continue
                contrib = vjp(g)
                prev = grads.get(id(parent))
                grads[id(parent)] = contrib if prev is None else prev + contrib
