"""Reverse-mode automatic differentiation over small dense matrices.

Everything in the pipeline flows through :class:`Tensor2`, a rows x cols
float64 matrix that remembers how it was computed. Each operation records
parent links and a backward closure; calling ``backward()`` on a 1x1 loss
walks the recorded graph once in reverse topological order, accumulates
gradients into every tensor that requires them, and frees the graph.

Deliberate restrictions, because the shapes here are small and explicit:
no dtype other than float64, no broadcasting beyond row-bias addition,
no views, no graph reuse after backward. Every operation validates its
input shapes and every produced value is checked for finiteness, so
divergence surfaces as :class:`NumericalError` at the op that caused it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import InvariantError, NumericalError

# Row norms below this are treated as zero and rejected during normalization.
NORM_EPSILON = 1e-12


def _require_finite(values, what):
    if not np.all(np.isfinite(values)):
        raise NumericalError(f"non-finite values in {what}")


class Tensor2:
    """A 2-D float64 matrix node in the compute graph.

    Leaf tensors are created directly; interior nodes come out of the
    module-level operations. ``grad`` is accumulated lazily and only for
    tensors whose ancestry includes a ``requires_grad`` leaf.
    """

    __slots__ = ("data", "requires_grad", "grad", "name", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.array(data, dtype=np.float64)
        if arr.ndim != 2:
            raise InvariantError(f"Tensor2 expects a 2-D array, got ndim={arr.ndim}")
        _require_finite(arr, "tensor data")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.name = name
        self._parents = ()
        self._backward = None

    @property
    def rows(self):
        return self.data.shape[0]

    @property
    def cols(self):
        return self.data.shape[1]

    @property
    def shape(self):
        return self.data.shape

    def item(self):
        if self.data.shape != (1, 1):
            raise InvariantError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Propagate from a 1x1 result through the recorded graph, then free it."""
        if self.data.shape != (1, 1):
            raise InvariantError(f"backward() starts from a 1x1 scalar, got {self.shape}")
        if not self.requires_grad:
            raise InvariantError("backward() on a tensor with no trainable ancestors")
        order = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, ready = stack.pop()
            if ready:
                order.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in visited:
                    stack.append((parent, False))
        self.grad = np.ones((1, 1))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
        for node in order:
            node._parents = ()
            node._backward = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor2(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


def _accumulate(tensor, grad):
    if not tensor.requires_grad:
        return
    if tensor.grad is None:
        tensor.grad = np.zeros_like(tensor.data)
    tensor.grad += grad


def _make(data, parents, backward):
    out = Tensor2.__new__(Tensor2)
    arr = np.asarray(data, dtype=np.float64)
    _require_finite(arr, "operation result")
    out.data = arr
    out.requires_grad = any(p.requires_grad for p in parents)
    out.grad = None
    out.name = None
    if out.requires_grad:
        out._parents = tuple(parents)
        out._backward = backward
    else:
        out._parents = ()
        out._backward = None
    return out


def matmul(a, b):
    if a.cols != b.rows:
        raise InvariantError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def backward(g):
        _accumulate(a, g @ b.data.T)
        _accumulate(b, a.data.T @ g)

    return _make(a.data @ b.data, (a, b), backward)


def transpose(a):
    def backward(g):
        _accumulate(a, g.T)

    return _make(a.data.T.copy(), (a,), backward)


def add(a, b):
    if a.shape != b.shape:
        raise InvariantError(f"add shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(b, g)

    return _make(a.data + b.data, (a, b), backward)


def add_row_bias(a, bias):
    """Add a 1 x cols bias row to every row of ``a`` (the only broadcast allowed)."""
    if bias.shape != (1, a.cols):
        raise InvariantError(f"bias must be 1x{a.cols}, got {bias.shape}")

    def backward(g):
        _accumulate(a, g)
        _accumulate(bias, g.sum(axis=0, keepdims=True))

    return _make(a.data + bias.data, (a, bias), backward)


def elementwise_mul(a, b):
    if a.shape != b.shape:
        raise InvariantError(f"elementwise_mul shape mismatch: {a.shape} vs {b.shape}")

    def backward(g):
        _accumulate(a, g * b.data)
        _accumulate(b, g * a.data)

    return _make(a.data * b.data, (a, b), backward)


def scalar_mul(a, value):
    value = float(value)
    if not math.isfinite(value):
        raise NumericalError(f"scalar_mul with non-finite scalar {value}")

    def backward(g):
        _accumulate(a, g * value)

    return _make(a.data * value, (a,), backward)


def concat_rows(parts):
    parts = tuple(parts)
    if not parts:
        raise InvariantError("concat_rows needs at least one part")
    cols = parts[0].cols
    for p in parts:
        if p.cols != cols:
            raise InvariantError(f"concat_rows column mismatch: {p.cols} vs {cols}")
    sizes = [p.rows for p in parts]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            _accumulate(part, g[lo:hi])

    return _make(np.concatenate([p.data for p in parts], axis=0), parts, backward)


def select_rows(a, indices):
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise InvariantError(f"select_rows indices must be 1-D, got ndim={idx.ndim}")
    if idx.size and (idx.min() < 0 or idx.max() >= a.rows):
        raise InvariantError(f"select_rows index out of range for {a.rows} rows")

    def backward(g):
        if not a.requires_grad:
            return
        scattered = np.zeros_like(a.data)
        np.add.at(scattered, idx, g)
        _accumulate(a, scattered)

    return _make(a.data[idx], (a,), backward)


def mean_rows(a):
    """Mean over all rows, yielding a 1 x cols tensor."""
    if a.rows == 0:
        raise InvariantError("mean_rows over an empty tensor")
    inv = 1.0 / a.rows

    def backward(g):
        _accumulate(a, np.repeat(g * inv, a.rows, axis=0))

    return _make(a.data.mean(axis=0, keepdims=True), (a,), backward)


def mean_rows_by_group(a, groups, num_groups):
    """Average rows sharing a group id; output row g is the mean of rows with groups==g."""
    gidx = np.asarray(groups, dtype=np.int64)
    if gidx.shape != (a.rows,):
        raise InvariantError(f"groups must have shape ({a.rows},), got {gidx.shape}")
    if num_groups < 1:
        raise InvariantError("num_groups must be >= 1")
    if gidx.size and (gidx.min() < 0 or gidx.max() >= num_groups):
        raise InvariantError(f"group id out of range for {num_groups} groups")
    counts = np.bincount(gidx, minlength=num_groups).astype(np.float64)
    if np.any(counts == 0):
        empty = np.flatnonzero(counts == 0)
        raise InvariantError(f"empty groups in mean_rows_by_group: {empty.tolist()}")
    sums = np.zeros((num_groups, a.cols))
    np.add.at(sums, gidx, a.data)

    def backward(g):
        _accumulate(a, g[gidx] / counts[gidx, None])

    return _make(sums / counts[:, None], (a,), backward)


def softmax_rows(a):
    shifted = a.data - a.data.max(axis=1, keepdims=True)
    expd = np.exp(shifted)
    probs = expd / expd.sum(axis=1, keepdims=True)

    def backward(g):
        inner = (g * probs).sum(axis=1, keepdims=True)
        _accumulate(a, (g - inner) * probs)

    return _make(probs, (a,), backward)


def l2_normalize_rows(a, eps=NORM_EPSILON):
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    if np.any(norms <= eps):
        bad = np.flatnonzero(norms.ravel() <= eps)
        raise NumericalError(f"zero-norm rows cannot be normalized: {bad.tolist()}")
    unit = a.data / norms

    def backward(g):
        inner = (g * unit).sum(axis=1, keepdims=True)
        _accumulate(a, (g - unit * inner) / norms)

    return _make(unit, (a,), backward)


def tanh(a):
    out_data = np.tanh(a.data)

    def backward(g):
        _accumulate(a, g * (1.0 - out_data**2))

    return _make(out_data, (a,), backward)


def cross_entropy_mean(logits, labels):
    """Mean over rows of -log softmax(logits) at the label column (1x1 output)."""
    lab = np.asarray(labels, dtype=np.int64)
    if lab.shape != (logits.rows,):
        raise InvariantError(f"labels must have shape ({logits.rows},), got {lab.shape}")
    if lab.size == 0:
        raise InvariantError("cross_entropy_mean over an empty batch")
    if lab.min() < 0 or lab.max() >= logits.cols:
        raise InvariantError(f"label out of range for {logits.cols} classes")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_probs = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    rows = np.arange(lab.size)
    loss = -log_probs[rows, lab].mean()

    def backward(g):
        delta = np.exp(log_probs)
        delta[rows, lab] -= 1.0
        _accumulate(logits, g[0, 0] * delta / lab.size)

    return _make(np.array([[loss]]), (logits,), backward)


def mlp_apply(x, hidden_weight, hidden_bias, out_weight, out_bias):
    """Residual two-layer perceptron: x + tanh(x @ W1 + b1) @ W2 + b2.

    With W2 == 0 and b2 == 0 this is exactly the identity map, which is
    how the recompose head starts out.
    """
    hidden = tanh(add_row_bias(matmul(x, hidden_weight), hidden_bias))
    return add_row_bias(add(x, matmul(hidden, out_weight)), out_bias)


@dataclass
class GradCheckReport:
    """Outcome of a central-difference gradient check."""

    max_rel_error: float
    per_param: dict
    tolerance: float
    passed: bool

    def worst_param(self):
        return max(self.per_param, key=self.per_param.get)


def grad_check(fn, params, step=1e-5, tolerance=1e-4, scale_floor=1e-4):
    """Compare analytic gradients of ``fn`` against central differences.

    ``fn`` maps the given parameter tensors to a 1x1 loss and must rebuild
    its graph from the current parameter values on every call. For each
    coordinate the relative error is |analytic - numeric| divided by
    max(|analytic|, |numeric|, scale_floor); the floor makes near-zero
    gradients an absolute comparison instead of an amplified one.
    """
    if step <= 0:
        raise InvariantError("finite-difference step must be positive")
    params = list(params)
    names = [p.name or f"param{i}" for i, p in enumerate(params)]

    def evaluate(context):
        try:
            value = fn(params).item()
        except NumericalError as exc:
            raise NumericalError(f"non-finite loss {context}: {exc}") from exc
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss {context}")
        return value

    for p in params:
        p.zero_grad()
    loss = fn(params)
    if loss.shape != (1, 1):
        raise InvariantError(f"grad_check target must be 1x1, got {loss.shape}")
    if not math.isfinite(loss.item()):
        raise NumericalError("non-finite loss at the unperturbed point")
    loss.backward()
    analytic = [
        p.grad.copy() if p.grad is not None else np.zeros_like(p.data) for p in params
    ]

    per_param = {}
    for p, grad, name in zip(params, analytic, names):
        flat = p.data.reshape(-1)
        gflat = grad.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            f_plus = evaluate(f"perturbing {name}[{i}] (+)")
            flat[i] = original - step
            f_minus = evaluate(f"perturbing {name}[{i}] (-)")
            flat[i] = original
            numeric = (f_plus - f_minus) / (2.0 * step)
            denom = max(abs(gflat[i]), abs(numeric), scale_floor)
            worst = max(worst, abs(gflat[i] - numeric) / denom)
        per_param[name] = worst

    max_err = max(per_param.values()) if per_param else 0.0
    return GradCheckReport(max_err, per_param, tolerance, max_err < tolerance)
