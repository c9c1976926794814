"""Minimal reverse-mode autodiff over rank-2 float32 tensors.

A Tape records an append-only DAG of operations; backward() runs one
reverse sweep in fixed (reverse-insertion) order, so gradient
accumulation is deterministic and runs are bit-reproducible. Values are
stored float32; reductions (row means, norms, losses) accumulate in
float64 before casting back.

The op set is exactly what the policy and discriminator need: matmul,
add (with row-broadcast bias), scale, concat_rows/split_rows, mean_rows,
relu, gelu, rms_norm, softmax_rows, single-head attention,
bce_with_logits, l2_loss, and the gradient reversal layer grl.
"""

from __future__ import annotations

import math

import numpy as np

RMS_EPS = 1e-6


class ShapeMismatch(ValueError):
    pass


class NonScalarLoss(ValueError):
    pass


class NonFiniteLoss(FloatingPointError):
    """Raised when a loss op evaluates to a non-finite value."""


def _as_f32_matrix(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float32)
    if a.ndim != 2:
        raise ShapeMismatch(f"expected a rank-2 tensor, got shape {a.shape}")
    return np.ascontiguousarray(a)


class Var:
    """Handle to one tape node: a (rows, cols) float32 value.

    Loss nodes additionally carry `value_hp`, the float64 value before the
    float32 cast, which finite-difference checks read to stay above the
    f32 quantization noise floor.
    """

    __slots__ = ("tape", "id", "value", "value_hp")

    def __init__(self, tape: "Tape", node_id: int, value: np.ndarray):
        self.tape = tape
        self.id = node_id
        self.value = value
        self.value_hp = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def grad(self) -> np.ndarray | None:
        return self.tape._grads.get(self.id)


class Tape:
    def __init__(self):
        self._backward: list = []   # per node: (needs_grad, backward_fn | None)
        self._grads: dict[int, np.ndarray] = {}

    # -- node plumbing ------------------------------------------------------

    def _record(self, value: np.ndarray, needs_grad: bool, backward_fn) -> Var:
        node_id = len(self._backward)
        self._backward.append((needs_grad, backward_fn))
        return Var(self, node_id, value)

    def _accumulate(self, node_id: int, g: np.ndarray):
        buf = self._grads.get(node_id)
        if buf is None:
            self._grads[node_id] = g.astype(np.float32, copy=True)
        else:
            buf += g

    def input(self, x) -> Var:
        """Constant leaf: no gradient is computed into it."""
        return self._record(_as_f32_matrix(x), False, None)

    def param(self, x) -> Var:
        """Trainable leaf: receives a gradient buffer on backward."""
        return self._record(_as_f32_matrix(x), True, None)

    # -- ops ----------------------------------------------------------------

    def matmul(self, a: Var, b: Var) -> Var:
        if a.value.shape[1] != b.value.shape[0]:
            raise ShapeMismatch(f"matmul {a.value.shape} @ {b.value.shape}")
        out = a.value @ b.value
        needs = self._needs(a, b)

        def backward(g):
            if self._node_needs(a):
                self._accumulate(a.id, g @ b.value.T)
            if self._node_needs(b):
                self._accumulate(b.id, a.value.T @ g)

        return self._record(out, needs, backward if needs else None)

    def add(self, a: Var, b: Var) -> Var:
        """Elementwise add; b may be a single row broadcast over a's rows."""
        ra, ca = a.value.shape
        rb, cb = b.value.shape
        if ca != cb or (ra != rb and rb != 1):
            raise ShapeMismatch(f"add {a.value.shape} + {b.value.shape}")
        out = a.value + b.value
        needs = self._needs(a, b)

        def backward(g):
            if self._node_needs(a):
                self._accumulate(a.id, g)
            if self._node_needs(b):
                gb = g if rb == ra else g.sum(axis=0, keepdims=True, dtype=np.float64)
                self._accumulate(b.id, gb.astype(np.float32))

        node = self._record(out, needs, backward if needs else None)
        if a.value_hp is not None and b.value_hp is not None:
            node.value_hp = a.value_hp + b.value_hp
        return node

    def scale(self, a: Var, s: float) -> Var:
        s = float(s)
        out = (a.value * np.float32(s)).astype(np.float32)
        needs = self._needs(a)

        def backward(g):
            self._accumulate(a.id, g * np.float32(s))

        node = self._record(out, needs, backward if needs else None)
        if a.value_hp is not None:
            node.value_hp = a.value_hp * s
        return node

    def concat_rows(self, parts: list[Var]) -> Var:
        if not parts:
            raise ShapeMismatch("concat_rows of nothing")
        cols = parts[0].value.shape[1]
        for p in parts:
            if p.value.shape[1] != cols:
                raise ShapeMismatch("concat_rows with unequal column counts")
        out = np.concatenate([p.value for p in parts], axis=0)
        needs = self._needs(*parts)
        sizes = [p.value.shape[0] for p in parts]

        def backward(g):
            off = 0
            for p, n in zip(parts, sizes):
                if self._node_needs(p):
                    self._accumulate(p.id, g[off : off + n])
                off += n

        return self._record(out, needs, backward if needs else None)

    def split_rows(self, a: Var, sizes: list[int]) -> list[Var]:
        """Inverse of concat_rows; adjoints scatter back into the source."""
        if sum(sizes) != a.value.shape[0]:
            raise ShapeMismatch(f"split_rows sizes {sizes} != {a.value.shape[0]} rows")
        needs = self._needs(a)
        outs = []
        off = 0
        for n in sizes:
            lo = off

            def backward(g, lo=lo, n=n):
                full = np.zeros_like(a.value)
                full[lo : lo + n] = g
                self._accumulate(a.id, full)

            outs.append(self._record(a.value[lo : lo + n].copy(), needs,
                                     backward if needs else None))
            off += n
        return outs

    def mean_rows(self, a: Var) -> Var:
        out = a.value.mean(axis=0, keepdims=True, dtype=np.float64).astype(np.float32)
        needs = self._needs(a)
        m = a.value.shape[0]

        def backward(g):
            self._accumulate(a.id, np.broadcast_to(g / m, a.value.shape))

        return self._record(out, needs, backward if needs else None)

    def relu(self, a: Var) -> Var:
        out = np.maximum(a.value, 0)
        needs = self._needs(a)

        def backward(g):
            self._accumulate(a.id, g * (a.value > 0))

        return self._record(out, needs, backward if needs else None)

    def gelu(self, a: Var) -> Var:
        # tanh approximation; the adjoint differentiates this same form
        c = math.sqrt(2.0 / math.pi)
        x = a.value.astype(np.float64)
        inner = c * (x + 0.044715 * x**3)
        t = np.tanh(inner)
        out = (0.5 * x * (1.0 + t)).astype(np.float32)
        needs = self._needs(a)

        def backward(g):
            d = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * c * (1.0 + 3 * 0.044715 * x**2)
            self._accumulate(a.id, (g.astype(np.float64) * d).astype(np.float32))

        return self._record(out, needs, backward if needs else None)

    def rms_norm(self, a: Var, gain: Var) -> Var:
        rows, cols = a.value.shape
        if gain.value.shape != (1, cols):
            raise ShapeMismatch(f"rms_norm gain {gain.value.shape} for {a.value.shape}")
        x = a.value.astype(np.float64)
        r = np.sqrt((x * x).mean(axis=1, keepdims=True) + RMS_EPS)
        out = (x / r * gain.value).astype(np.float32)
        needs = self._needs(a, gain)

        def backward(g):
            gf = g.astype(np.float64)
            gw = gain.value.astype(np.float64)
            if self._node_needs(a):
                s = (gf * gw * x).sum(axis=1, keepdims=True)
                da = gf * gw / r - x * s / (cols * r**3)
                self._accumulate(a.id, da.astype(np.float32))
            if self._node_needs(gain):
                dg = (gf * x / r).sum(axis=0, keepdims=True)
                self._accumulate(gain.id, dg.astype(np.float32))

        return self._record(out, needs, backward if needs else None)

    def softmax_rows(self, a: Var) -> Var:
        x = a.value.astype(np.float64)
        x = x - x.max(axis=1, keepdims=True)
        e = np.exp(x)
        y = e / e.sum(axis=1, keepdims=True)
        out = y.astype(np.float32)
        needs = self._needs(a)

        def backward(g):
            gf = g.astype(np.float64)
            da = y * (gf - (gf * y).sum(axis=1, keepdims=True))
            self._accumulate(a.id, da.astype(np.float32))

        return self._record(out, needs, backward if needs else None)

    def attention(self, q: Var, k: Var, v: Var) -> Var:
        """Single-head scaled dot-product attention: softmax(QK^T/sqrt(d)) V."""
        if q.value.shape[1] != k.value.shape[1] or k.value.shape[0] != v.value.shape[0]:
            raise ShapeMismatch(
                f"attention shapes {q.value.shape}, {k.value.shape}, {v.value.shape}"
            )
        d = q.value.shape[1]
        inv = 1.0 / math.sqrt(d)
        s = (q.value @ k.value.T).astype(np.float64) * inv
        s -= s.max(axis=1, keepdims=True)
        e = np.exp(s)
        att = e / e.sum(axis=1, keepdims=True)
        att32 = att.astype(np.float32)
        out = att32 @ v.value
        needs = self._needs(q, k, v)

        def backward(g):
            if self._node_needs(v):
                self._accumulate(v.id, att32.T @ g)
            if self._node_needs(q) or self._node_needs(k):
                datt = (g @ v.value.T).astype(np.float64)
                ds = att * (datt - (datt * att).sum(axis=1, keepdims=True))
                ds32 = (ds * inv).astype(np.float32)
                if self._node_needs(q):
                    self._accumulate(q.id, ds32 @ k.value)
                if self._node_needs(k):
                    self._accumulate(k.id, ds32.T @ q.value)

        return self._record(out, needs, backward if needs else None)

    def bce_with_logits(self, logits: Var, labels: Var) -> Var:
        """Mean binary cross-entropy over all elements, stable form."""
        if logits.value.shape != labels.value.shape:
            raise ShapeMismatch(f"bce {logits.value.shape} vs {labels.value.shape}")
        z = logits.value.astype(np.float64)
        y = labels.value.astype(np.float64)
        per = np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))
        val = float(per.mean())
        if not math.isfinite(val):
            raise NonFiniteLoss(f"bce_with_logits is {val}")
        out = np.array([[val]], dtype=np.float32)
        needs = self._needs(logits, labels)
        n = z.size

        def backward(g):
            sig = 1.0 / (1.0 + np.exp(-z))
            scale = float(g[0, 0]) / n
            if self._node_needs(logits):
                self._accumulate(logits.id, ((sig - y) * scale).astype(np.float32))
            if self._node_needs(labels):
                self._accumulate(labels.id, (-z * scale).astype(np.float32))

        node = self._record(out, needs, backward if needs else None)
        node.value_hp = val
        return node

    def l2_loss(self, pred: Var, target: Var) -> Var:
        """Mean squared error over all elements of (pred - target)."""
        if pred.value.shape != target.value.shape:
            raise ShapeMismatch(f"l2_loss {pred.value.shape} vs {target.value.shape}")
        diff = pred.value.astype(np.float64) - target.value.astype(np.float64)
        size = pred.value.size
        val = float((diff * diff).sum() / size)
        if not math.isfinite(val):
            raise NonFiniteLoss(f"l2_loss is {val}")
        out = np.array([[val]], dtype=np.float32)
        needs = self._needs(pred, target)

        def backward(g):
            d = (2.0 / size) * float(g[0, 0]) * diff
            if self._node_needs(pred):
                self._accumulate(pred.id, d.astype(np.float32))
            if self._node_needs(target):
                self._accumulate(target.id, (-d).astype(np.float32))

        node = self._record(out, needs, backward if needs else None)
        node.value_hp = val
        return node

    def grl(self, a: Var) -> Var:
        """Gradient reversal: identity forward, -1 x gradient backward."""
        needs = self._needs(a)

        def backward(g):
            self._accumulate(a.id, -g)

        return self._record(a.value, needs, backward if needs else None)

    # -- backward sweep -----------------------------------------------------

    def backward(self, loss: Var):
        """Reverse sweep from a 1x1 loss; leaves get .grad buffers."""
        if loss.value.shape != (1, 1):
            raise NonScalarLoss(f"loss must be 1x1, got {loss.value.shape}")
        self._grads.clear()
        self._grads[loss.id] = np.ones((1, 1), dtype=np.float32)
        for node_id in range(loss.id, -1, -1):
            g = self._grads.get(node_id)
            if g is None:
                continue
            _, backward_fn = self._backward[node_id]
            if backward_fn is not None:
                backward_fn(g)

    # -- helpers -------------------------------------------------------------

    def _needs(self, *vars_: Var) -> bool:
        return any(self._backward[v.id][0] for v in vars_)

    def _node_needs(self, v: Var) -> bool:
        return self._backward[v.id][0]
