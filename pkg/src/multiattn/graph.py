"""Reverse-mode computation graph over float64 numpy arrays.

A :class:`Graph` is a tape: every operation appends a node holding the cached
forward value, its parent nodes, and a vector-Jacobian closure. Nodes are
created in topological order by construction, so :meth:`Graph.backward` is a
single reverse sweep. Named :class:`~multiattn.core.Parameter` leaves are
registered once per graph and receive accumulated gradients.

Graphs built with ``recording=False`` compute forward values only, which makes
repeated evaluation (finite differences, greedy decoding) much cheaper.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .core import NonFiniteError, Parameter, ShapeMismatchError


class GraphError(ValueError):
    """Structural misuse of a computation graph."""


# Test hook: when true, the tanh adjoint is deliberately wrong so that
# gradient-check tooling can be shown to catch a corrupted rule.
_corrupt_tanh_adjoint = False


def set_adjoint_corruption(enabled: bool) -> None:
    global _corrupt_tanh_adjoint
    _corrupt_tanh_adjoint = enabled


class Node:
    """One tape entry: cached value plus the recipe for its gradient."""

    __slots__ = ("value", "parents", "vjp", "idx")

    def __init__(self, value, parents, vjp, idx):
        self.value = value
        self.parents = parents
        self.vjp = vjp
        self.idx = idx

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def __repr__(self) -> str:
        return f"Node(idx={self.idx}, shape={self.value.shape})"


class Graph:
    """Tape of operations with reverse-mode differentiation."""

    __slots__ = ("nodes", "leaves", "recording", "memo")

    def __init__(self, recording: bool = True):
        self.nodes: list[Node] = []
        self.leaves: dict[str, tuple[Parameter, Node]] = {}
        self.recording = recording
        # Per-graph cache for derived nodes that are reused across decoder
        # steps (e.g. projected encoder states).
        self.memo: dict = {}

    # ------------------------------------------------------------------ #
    # node plumbing

    def _node(self, value, parents=(), vjp=None) -> Node:
        if not self.recording:
            parents, vjp = (), None
        node = Node(value, parents, vjp, len(self.nodes))
        self.nodes.append(node)
        return node

    def leaf(self, param: Parameter) -> Node:
        """Register a named parameter as a leaf (cached per graph)."""
        entry = self.leaves.get(param.name)
        if entry is not None:
            if entry[0] is not param:
                raise GraphError(f"two distinct parameters named {param.name!r}")
            return entry[1]
        node = self._node(param.value)
        self.leaves[param.name] = (param, node)
        return node

    def constant(self, values) -> Node:
        """Leaf node for input data; receives no gradient."""
        arr = np.asarray(values, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteError(f"graph constant contains non-finite values (shape {arr.shape})")
        return self._node(arr)

    # ------------------------------------------------------------------ #
    # primitive operations

    def matmul(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.ndim == 0 or vb.ndim == 0 or va.shape[-1] != vb.shape[0]:
            raise ShapeMismatchError("matmul", va.shape, vb.shape)
        out = np.dot(va, vb)
        if not self.recording:
            return self._node(np.asarray(out))

        if va.ndim == 2 and vb.ndim == 2:
            def vjp(g):
                return np.dot(g, vb.T), np.dot(va.T, g)
        elif va.ndim == 2 and vb.ndim == 1:
            def vjp(g):
                return g[:, None] * vb, np.dot(va.T, g)
        elif va.ndim == 1 and vb.ndim == 2:
            def vjp(g):
                return np.dot(vb, g), va[:, None] * g
        else:  # vector . vector -> scalar
            def vjp(g):
                return g * vb, g * va
        return self._node(np.asarray(out), (a, b), vjp)

    def transpose(self, a: Node) -> Node:
        if a.value.ndim != 2:
            raise ShapeMismatchError("transpose", a.value.shape)
        out = a.value.T
        if not self.recording:
            return self._node(out)
        return self._node(out, (a,), lambda g: (g.T,))

    def add(self, a: Node, b: Node) -> Node:
        """Elementwise sum. A rank-1 operand is broadcast across the rows of a
        rank-2 operand; all other shape combinations must match exactly."""
        va, vb = a.value, b.value
        if va.shape == vb.shape:
            out = va + vb
            if not self.recording:
                return self._node(out)
            return self._node(out, (a, b), lambda g: (g, g))
        if va.ndim == 2 and vb.ndim == 1 and va.shape[1] == vb.shape[0]:
            out = va + vb
            if not self.recording:
                return self._node(out)
            return self._node(out, (a, b), lambda g: (g, g.sum(axis=0)))
        if va.ndim == 1 and vb.ndim == 2 and vb.shape[1] == va.shape[0]:
            out = va + vb
            if not self.recording:
                return self._node(out)
            return self._node(out, (a, b), lambda g: (g.sum(axis=0), g))
        raise ShapeMismatchError("add", va.shape, vb.shape)

    def add_n(self, terms: Sequence[Node]) -> Node:
        if not terms:
            raise GraphError("add_n of an empty sequence")
        shape = terms[0].value.shape
        for t in terms[1:]:
            if t.value.shape != shape:
                raise ShapeMismatchError("add_n", shape, t.value.shape)
        out = terms[0].value
        for t in terms[1:]:
            out = out + t.value
        if not self.recording:
            return self._node(np.asarray(out))
        n = len(terms)
        return self._node(np.asarray(out), tuple(terms), lambda g: (g,) * n)

    def scale(self, a: Node, factor: float) -> Node:
        out = a.value * factor
        if not self.recording:
            return self._node(out)
        return self._node(out, (a,), lambda g: (g * factor,))

    def one_minus(self, a: Node) -> Node:
        out = 1.0 - a.value
        if not self.recording:
            return self._node(out)
        return self._node(out, (a,), lambda g: (-g,))

    def elementwise_mul(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.shape != vb.shape:
            raise ShapeMismatchError("elementwise_mul", va.shape, vb.shape)
        out = va * vb
        if not self.recording:
            return self._node(out)
        return self._node(out, (a, b), lambda g: (g * vb, g * va))

    def tanh(self, a: Node) -> Node:
        out = np.tanh(a.value)
        if not self.recording:
            return self._node(out)
        if _corrupt_tanh_adjoint:
            return self._node(out, (a,), lambda g: (g * (1.0 - out),))
        return self._node(out, (a,), lambda g: (g * (1.0 - out * out),))

    def sigmoid(self, a: Node) -> Node:
        out = np.exp(np.negative(a.value))
        out += 1.0
        np.reciprocal(out, out=out)
        if not self.recording:
            return self._node(out)
        return self._node(out, (a,), lambda g: (g * out * (1.0 - out),))

    def softmax(self, a: Node) -> Node:
        """Normalize a rank-1 tensor into a distribution.

        Computed with max-subtraction so arbitrarily large energies stay
        finite; the output sums to 1 to within accumulation roundoff.
        """
        v = a.value
        if v.ndim != 1 or v.shape[0] == 0:
            raise ShapeMismatchError("softmax (wants non-empty rank-1)", v.shape)
        if not np.isfinite(v).all():
            raise NonFiniteError("softmax input contains non-finite values")
        shifted = v - v.max()
        e = np.exp(shifted)
        out = e / e.sum()
        if not self.recording:
            return self._node(out)

        def vjp(g):
            return (out * (g - g @ out),)

        return self._node(out, (a,), vjp)

    def concat_rows(self, parts: Sequence[Node]) -> Node:
        """Concatenate along axis 0: rank-1 parts chain into one longer
        vector, rank-2 parts with equal column counts stack their rows."""
        if not parts:
            raise GraphError("concat_rows of an empty sequence")
        ndim = parts[0].value.ndim
        for p in parts:
            if p.value.ndim != ndim:
                raise ShapeMismatchError("concat_rows", parts[0].value.shape, p.value.shape)
            if ndim == 2 and p.value.shape[1] != parts[0].value.shape[1]:
                raise ShapeMismatchError("concat_rows", parts[0].value.shape, p.value.shape)
        if ndim not in (1, 2):
            raise ShapeMismatchError("concat_rows", parts[0].value.shape)
        out = np.concatenate([p.value for p in parts], axis=0)
        if not self.recording:
            return self._node(out)
        sizes = [p.value.shape[0] for p in parts]

        def vjp(g):
            grads = []
            offset = 0
            for s in sizes:
                grads.append(g[offset:offset + s])
                offset += s
            return tuple(grads)

        return self._node(out, tuple(parts), vjp)

    def stack_rows(self, vectors: Sequence[Node]) -> Node:
        """Stack rank-1 tensors of equal length into a matrix (n x d)."""
        if not vectors:
            raise GraphError("stack_rows of an empty sequence")
        d = vectors[0].value.shape
        for v in vectors:
            if v.value.ndim != 1 or v.value.shape != d:
                raise ShapeMismatchError("stack_rows", d, v.value.shape)
        out = np.stack([v.value for v in vectors])
        if not self.recording:
            return self._node(out)
        n = len(vectors)
        return self._node(out, tuple(vectors), lambda g: tuple(g[i] for i in range(n)))

    def concat_cols(self, a: Node, b: Node) -> Node:
        va, vb = a.value, b.value
        if va.ndim != 2 or vb.ndim != 2 or va.shape[0] != vb.shape[0]:
            raise ShapeMismatchError("concat_cols", va.shape, vb.shape)
        out = np.concatenate([va, vb], axis=1)
        if not self.recording:
            return self._node(out)
        split = va.shape[1]
        return self._node(out, (a, b), lambda g: (g[:, :split], g[:, split:]))

    def take_row(self, m: Node, i: int) -> Node:
        v = m.value
        if v.ndim != 2 or not (0 <= i < v.shape[0]):
            raise ShapeMismatchError(f"take_row(i={i})", v.shape)
        out = v[i].copy()
        if not self.recording:
            return self._node(out)

        def vjp(g):
            gm = np.zeros_like(v)
            gm[i] = g
            return (gm,)

        return self._node(out, (m,), vjp)

    def reshape(self, a: Node, shape: tuple[int, ...]) -> Node:
        v = a.value
        total = 1
        for s in shape:
            total *= s
        if total != v.size:
            raise ShapeMismatchError(f"reshape to {shape}", v.shape)
        out = v.reshape(shape)
        if not self.recording:
            return self._node(out)
        return self._node(out, (a,), lambda g: (np.asarray(g).reshape(v.shape),))

    def embedding_lookup(self, table: Node, ids: Sequence[int]) -> Node:
        v = table.value
        if v.ndim != 2:
            raise ShapeMismatchError("embedding_lookup", v.shape)
        idx = np.asarray(ids, dtype=np.intp)
        if idx.ndim != 1 or idx.size == 0:
            raise GraphError(f"embedding_lookup needs a non-empty id list, got {ids!r}")
        if idx.min() < 0 or idx.max() >= v.shape[0]:
            raise GraphError(
                f"embedding id out of range [0, {v.shape[0]}): {ids!r}")
        out = v[idx]
        if not self.recording:
            return self._node(out)

        def vjp(g):
            gt = np.zeros_like(v)
            np.add.at(gt, idx, g)
            return (gt,)

        return self._node(out, (table,), vjp)

    def affine(self, w: Node, x: Node, b: Node) -> Node:
        """w @ x + b for a rank-1 x; one fused node."""
        vw, vx, vb = w.value, x.value, b.value
        if vw.ndim != 2 or vx.ndim != 1 or vw.shape[1] != vx.shape[0] \
                or vb.shape != (vw.shape[0],):
            raise ShapeMismatchError("affine", vw.shape, vx.shape, vb.shape)
        out = np.dot(vw, vx)
        out += vb
        if not self.recording:
            return self._node(out)

        def vjp(g):
            return g[:, None] * vx, np.dot(vw.T, g), g

        return self._node(out, (w, x, b), vjp)

    def tanh_scores(self, keys: Node, shift: Node, score: Node) -> Node:
        """tanh(keys + shift) @ score: the additive-attention energy kernel,
        fused into one node. keys is (T x a), shift and score are (a,)."""
        vk, vs, vv = keys.value, shift.value, score.value
        if vk.ndim != 2 or vs.shape != (vk.shape[1],) or vv.shape != vs.shape:
            raise ShapeMismatchError("tanh_scores", vk.shape, vs.shape, vv.shape)
        blended = np.tanh(vk + vs)
        out = np.dot(blended, vv)
        if not self.recording:
            return self._node(out)

        if _corrupt_tanh_adjoint:
            def vjp(g):
                d_pre = (g[:, None] * vv) * (1.0 - blended)
                return d_pre, d_pre.sum(axis=0), np.dot(g, blended)
        else:
            def vjp(g):
                d_pre = (g[:, None] * vv) * (1.0 - blended * blended)
                return d_pre, d_pre.sum(axis=0), np.dot(g, blended)

        return self._node(out, (keys, shift, score), vjp)

    def gru_cell(self, x: Node, s: Node, wz: Node, uz: Node, bz: Node,
                 wr: Node, ur: Node, br: Node, wc: Node, uc: Node, bc: Node) -> Node:
        """One fused GRU transition (update gate z, reset gate r, candidate c):

            z = sigmoid(wz x + uz s + bz)
            r = sigmoid(wr x + ur s + br)
            c = tanh(wc x + uc (r * s) + bc)
            out = (1 - z) * s + z * c

        The adjoint propagates through every gate analytically.
        """
        vx, vs = x.value, s.value
        vuc, vbc = uc.value, bc.value
        n = vs.shape[0]
        if vx.ndim != 1 or vs.ndim != 1 or wz.value.shape != (n, vx.shape[0]) \
                or uz.value.shape != (n, n):
            raise ShapeMismatchError("gru_cell", vx.shape, vs.shape, wz.value.shape)

        # Gate weights stacked once per graph; leaf values are fixed for the
        # graph's lifetime, so the cache stays valid.
        stack_key = ("grustack", wz.idx, uz.idx)
        stacks = self.memo.get(stack_key)
        if stacks is None:
            stacks = (np.vstack((wz.value, wr.value, wc.value)),
                      np.vstack((uz.value, ur.value)),
                      np.concatenate((bz.value, br.value)))
            self.memo[stack_key] = stacks
        w_all, u_zr, b_zr = stacks

        xp = np.dot(w_all, vx)                       # [xz; xr; xc]
        zr = xp[:2 * n] + np.dot(u_zr, vs) + b_zr
        zr = np.exp(np.negative(zr, out=zr), out=zr)
        zr += 1.0
        np.reciprocal(zr, out=zr)
        z = zr[:n]
        r = zr[n:]
        gated = r * vs
        c = np.tanh(xp[2 * n:] + np.dot(vuc, gated) + vbc)
        out = (1.0 - z) * vs + z * c
        if not self.recording:
            return self._node(out)

        def vjp(g):
            d_ac = g * z * (1.0 - c * c)
            dz = g * (c - vs) * z * (1.0 - z)
            dr_pre = np.dot(vuc.T, d_ac)             # grad w.r.t. gated = r*s
            dr = dr_pre * vs * r * (1.0 - r)
            ds = g * (1.0 - z) + dr_pre * r
            d_zr = np.concatenate((dz, dr))
            d_all = np.concatenate((d_zr, d_ac))
            ds += np.dot(u_zr.T, d_zr)
            dx = np.dot(w_all.T, d_all)
            dw_all = d_all[:, None] * vx
            du_zr = d_zr[:, None] * vs
            return (dx, ds,
                    dw_all[:n], du_zr[:n], dz,
                    dw_all[n:2 * n], du_zr[n:], dr,
                    dw_all[2 * n:], d_ac[:, None] * gated, d_ac)

        return self._node(out, (x, s, wz, uz, bz, wr, ur, br, wc, uc, bc), vjp)

    def cross_entropy(self, probs: Node, label: int) -> Node:
        """Negative log-likelihood of `label` under a rank-1 distribution."""
        p = probs.value
        if p.ndim != 1:
            raise ShapeMismatchError("cross_entropy", p.shape)
        if not (0 <= label < p.shape[0]):
            raise GraphError(f"cross_entropy label {label} outside vocabulary of {p.shape[0]}")
        p_label = p[label]
        if p_label <= 0.0:
            raise NonFiniteError(f"cross_entropy: probability of label {label} is {p_label}")
        out = np.asarray(-np.log(p_label))
        if not self.recording:
            return self._node(out)

        def vjp(g):
            gp = np.zeros_like(p)
            gp[label] = -float(g) / p_label
            return (gp,)

        return self._node(out, (probs,), vjp)

    # ------------------------------------------------------------------ #
    # reverse sweep

    def backward(self, loss: Node, params: Sequence[Parameter] | None = None) -> dict[str, np.ndarray]:
        """Accumulate d(loss)/d(parameter) for every registered leaf.

        Returns a dict from parameter name to a gradient array of the same
        shape. Parameters not on any path to the loss get zero gradients.
        """
        if not self.recording:
            raise GraphError("backward on a non-recording graph")
        if loss.value.ndim != 0:
            raise GraphError(f"loss must be scalar, got shape {loss.value.shape}")
        grads: list = [None] * len(self.nodes)
        grads[loss.idx] = np.ones(())
        for i in range(loss.idx, -1, -1):
            g = grads[i]
            if g is None:
                continue
            node = self.nodes[i]
            if node.vjp is None:
                continue
            for parent, pg in zip(node.parents, node.vjp(g)):
                j = parent.idx
                if j >= i:
                    raise GraphError("graph cycle: node consumes a later node")
                if grads[j] is None:
                    grads[j] = pg
                else:
                    grads[j] = grads[j] + pg
        out: dict[str, np.ndarray] = {}
        for name, (param, node) in self.leaves.items():
            g = grads[node.idx]
            out[name] = np.zeros_like(param.value) if g is None else np.asarray(g)
        if params is not None:
            for p in params:
                if p.name not in out:
                    out[p.name] = np.zeros_like(p.value)
        return out


@dataclass
class FdCoordinate:
    param: str
    index: int
    numeric: float
    analytic: float
    rel_error: float


@dataclass
class FdReport:
    max_rel_error: float
    worst: FdCoordinate | None
    per_param: dict[str, float]

    def __str__(self) -> str:
        lines = [f"max relative error {self.max_rel_error:.3e}"]
        if self.worst is not None:
            lines.append(
                f"worst at {self.worst.param}[{self.worst.index}]: "
                f"numeric {self.worst.numeric:.6e} vs analytic {self.worst.analytic:.6e}")
        for name in sorted(self.per_param):
            lines.append(f"  {name}: {self.per_param[name]:.3e}")
        return "\n".join(lines)


def finite_difference_check(
    build: Callable[[Graph], Node],
    params: Sequence[Parameter],
    eps: float = 1e-5,
    denom_floor: float = 1e-6,
) -> FdReport:
    """Compare reverse-mode gradients against central finite differences.

    ``build(graph)`` must construct a scalar loss from the current parameter
    values. It is evaluated twice up front; any mismatch means the function is
    not deterministic and is reported as an error. Each parameter coordinate
    is then perturbed by +/- eps and the central difference is compared with
    the tape gradient. The relative error uses |num| + |ana| as denominator,
    floored so that near-zero gradient pairs compare absolutely.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    g = Graph()
    loss = build(g)
    grads = g.backward(loss, params=params)
    base = float(loss.value)

    repeat = float(build(Graph(recording=False)).value)
    if repeat != base:
        raise GraphError(
            f"function is not deterministic: {base!r} != {repeat!r} on re-evaluation")

    worst: FdCoordinate | None = None
    per_param: dict[str, float] = {}
    for p in params:
        flat = p.value.reshape(-1)
        analytic = grads[p.name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = float(build(Graph(recording=False)).value)
            flat[i] = orig - eps
            f_minus = float(build(Graph(recording=False)).value)
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            ana = float(analytic[i])
            err = abs(numeric - ana) / max(abs(numeric) + abs(ana), denom_floor)
            if err > param_worst:
                param_worst = err
            if worst is None or err > worst.rel_error:
                worst = FdCoordinate(p.name, i, numeric, ana, err)
        per_param[p.name] = param_worst
    max_err = max(per_param.values()) if per_param else 0.0
    return FdReport(max_err, worst, per_param)
