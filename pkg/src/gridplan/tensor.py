"""Rank-4 tensors with reverse-mode gradients.

This is deliberately not a general autodiff system: it provides exactly the
primitives the convolutional planners in :mod:`gridplan.models` are built
from (same-padded convolution, channel max, gates, channel stacking, cell
extraction, softmax cross-entropy) plus a finite-difference gradient
checker. Everything runs in double precision.

Gradients are recorded on an explicit :class:`Tape`: a Wengert list of the
primitive operations executed while the tape is active. ``backward`` replays
the list in reverse, visiting each operation exactly once.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class GradientError(RuntimeError):
    """Backward invoked on a graph the tape never recorded."""


class Tensor:
    """A rank-4 array (batch, channels, height, width) of float64 values.

    ``grad`` is populated by :func:`backward` and always matches ``data`` in
    shape. Tensors are immutable after forward construction except for
    gradient accumulation.
    """

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.ascontiguousarray(data, dtype=np.float64)  # row-major layout
        if arr.ndim != 4:
            raise ShapeError(f"tensors are rank-4, got shape {arr.shape}")
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad

    @property
    def dims(self) -> tuple[int, int, int, int]:
        return self.data.shape

    @staticmethod
    def zeros(dims: Sequence[int], requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(tuple(dims)), requires_grad=requires_grad)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got dims {self.dims}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(dims={self.dims}{flag})"


class ConvKernel:
    """Bias-free convolution weights of shape (out_channels, in_channels, f, f).

    ``f`` must be odd so that same-padding is symmetric. There is no bias
    term anywhere in this type.
    """

    __slots__ = ("weights",)

    def __init__(self, weights):
        w = weights if isinstance(weights, Tensor) else Tensor(weights)
        out_c, in_c, fh, fw = w.dims
        if fh != fw:
            raise ShapeError(f"kernel window must be square, got {fh}x{fw}")
        if fh % 2 == 0 or fh < 1:
            raise ShapeError(f"kernel size must be odd and positive, got {fh}")
        self.weights = w

    @property
    def f(self) -> int:
        return self.weights.dims[2]

    @property
    def in_channels(self) -> int:
        return self.weights.dims[1]

    @property
    def out_channels(self) -> int:
        return self.weights.dims[0]

    def __repr__(self) -> str:
        return f"ConvKernel(out={self.out_channels}, in={self.in_channels}, f={self.f})"


@dataclass
class TapeEntry:
    """One executed primitive: operands, result, and its pullback."""

    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], None]
    # Lazily encoded branch pattern for non-differentiable ops (argmax
    # winners, activation signs); None for smooth primitives.
    signature: Optional[Callable[[], bytes]] = None


_tls = threading.local()


def _tape_stack() -> list:
    stack = getattr(_tls, "stack", None)
    if stack is None:
        stack = _tls.stack = []
    return stack


def active_tape() -> Optional["Tape"]:
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered record of executed primitives; one tape per thread of execution."""

    def __init__(self):
        self.entries: list[TapeEntry] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _tape_stack().pop()
        assert popped is self

    def record(self, entry: TapeEntry) -> None:
        self.entries.append(entry)

    def branch_signature(self) -> tuple[bytes, ...]:
        """Concatenated branch decisions (argmax winners, activation signs)."""
        return tuple(e.signature() for e in self.entries if e.signature is not None)

    def zero_grads(self) -> None:
        for entry in self.entries:
            for t in entry.inputs + (entry.output,):
                t.grad = None


def _accumulate(t: Tensor, delta: np.ndarray, fresh: bool = False) -> None:
    """Add ``delta`` into ``t.grad``; ``fresh`` hands over ownership of the buffer.

    Pullbacks that pass slices or reused gradient arrays must leave ``fresh``
    unset so the first write copies instead of aliasing.
    """
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = delta if fresh else np.array(delta)
    else:
        t.grad += delta


def _track(op: str, inputs: tuple[Tensor, ...], out: Tensor,
           backward: Callable[[np.ndarray], None],
           signature: Optional[Callable[[], bytes]] = None) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(TapeEntry(op, inputs, out, backward, signature))
    return out


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``grad`` for every tracked tensor reachable from ``loss``.

    The tape is replayed exactly once in reverse execution order; entries
    whose output never received a gradient are skipped (dead branches).
    """
    if not tape.entries:
        raise GradientError("backward on an empty tape: no operations were recorded")
    if all(e.output is not loss for e in tape.entries):
        raise GradientError("loss tensor was not produced by an operation on this tape")
    loss.grad = np.ones_like(loss.data) if loss.grad is None else loss.grad + np.ones_like(loss.data)
    for entry in reversed(tape.entries):
        if entry.output.grad is not None:
            entry.backward(entry.output.grad)


# ---------------------------------------------------------------------------
# primitives


def _im2col(x: np.ndarray, f: int) -> np.ndarray:
    """Stride-1 same-padding column matrix: (B*H*W, C*f*f)."""
    b, c, h, w = x.shape
    if f == 1:
        return x.transpose(0, 2, 3, 1).reshape(b * h * w, c)
    pad = (f - 1) // 2
    xp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + w] = x
    win = np.lib.stride_tricks.sliding_window_view(xp, (f, f), axis=(2, 3))
    return win.transpose(0, 2, 3, 1, 4, 5).reshape(b * h * w, c * f * f)


def _col2im(dcol: np.ndarray, shape: tuple, f: int) -> np.ndarray:
    """Scatter column-matrix gradients back onto the (padded) input grid."""
    b, c, h, w = shape
    pad = (f - 1) // 2
    dview = dcol.reshape(b, h, w, c, f, f).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros((b, c, h + 2 * pad, w + 2 * pad))
    for k in range(f):
        for l in range(f):
            dxp[:, :, k:k + h, l:l + w] += dview[:, :, :, :, k, l]
    return dxp[:, :, pad:pad + h, pad:pad + w] if pad else dxp


class _DenseConvPlan:
    """Index plan turning a small-map convolution into one dense matrix.

    For spatial sizes where the full linear operator (out_c*H*W by
    in_c*H*W) stays small, materializing it once per call and running plain
    matrix products beats im2col: inputs and gradients stay in their native
    row-major layout with no strided gathers.
    """

    def __init__(self, h: int, w: int, f: int, in_c: int, out_c: int):
        pad = (f - 1) // 2
        k, l, y, x = np.meshgrid(np.arange(f), np.arange(f),
                                 np.arange(h), np.arange(w), indexing="ij")
        sy, sx = y + k - pad, x + l - pad
        valid = (sy >= 0) & (sy < h) & (sx >= 0) & (sx < w)
        tap = (k * f + l)[valid]
        order = np.argsort(tap, kind="stable")
        self.tap = tap[order]
        out_cell = (y * w + x)[valid][order]
        in_cell = (sy * w + sx)[valid][order]
        counts = np.bincount(self.tap, minlength=f * f)
        if (counts == 0).any():
            raise ShapeError(f"kernel size {f} exceeds the {h}x{w} map reach")
        self.segment_starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        hw = h * w
        o_idx = np.arange(out_c)[:, None, None]
        i_idx = np.arange(in_c)[None, :, None]
        self.flat = ((o_idx * hw + out_cell[None, None, :]) * in_c + i_idx) * hw \
            + in_cell[None, None, :]
        self.shape = (out_c * hw, in_c * hw)
        self.kernel_dims = (out_c, in_c, f, f)

    def materialize(self, w: np.ndarray) -> np.ndarray:
        dense = np.zeros(self.shape)
        dense.flat[self.flat] = w.reshape(w.shape[0], w.shape[1], -1)[:, :, self.tap]
        return dense

    def tap_sums(self, dense_grad: np.ndarray) -> np.ndarray:
        vals = dense_grad.flat[self.flat]
        return np.add.reduceat(vals, self.segment_starts, axis=2).reshape(self.kernel_dims)


_dense_plans: dict = {}

# Above this many spatial cells the dense operator outgrows its usefulness
# and convolution falls back to im2col.
_DENSE_CELL_LIMIT = 128


def _dense_plan(h: int, w: int, f: int, in_c: int, out_c: int) -> Optional[_DenseConvPlan]:
    if h * w > _DENSE_CELL_LIMIT or f > 2 * min(h, w) - 1:
        return None
    key = (h, w, f, in_c, out_c)
    plan = _dense_plans.get(key)
    if plan is None:
        plan = _dense_plans[key] = _DenseConvPlan(h, w, f, in_c, out_c)
    return plan


def _conv_raw(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    out_c = w.shape[0]
    b, _, h, wd = x.shape
    out = _im2col(x, w.shape[2]) @ w.reshape(out_c, -1).T
    return out.reshape(b, h, wd, out_c).transpose(0, 3, 1, 2)


def conv2d_same(x: Tensor, kernel: ConvKernel) -> Tensor:
    """Zero-padded stride-1 convolution with identity activation.

    Output spatial size equals the input's; padding is (f-1)/2 on each side
    so values do not propagate beyond the map border within one application.
    """
    if x.dims[1] != kernel.in_channels:
        raise ShapeError(
            f"conv2d_same: input has {x.dims[1]} channels but kernel expects "
            f"{kernel.in_channels} (input dims {x.dims}, kernel dims {kernel.weights.dims})"
        )
    w = kernel.weights
    f = kernel.f
    b, _, h, wd = x.dims
    out_c = kernel.out_channels
    plan = _dense_plan(h, wd, f, kernel.in_channels, out_c)

    if plan is not None:
        dense = plan.materialize(w.data)
        x2 = x.data.reshape(b, -1)
        out = Tensor((x2 @ dense.T).reshape(b, out_c, h, wd))

        def pullback(g: np.ndarray) -> None:
            g2 = g.reshape(b, -1)
            if w.requires_grad:
                _accumulate(w, plan.tap_sums(g2.T @ x2), fresh=True)
            if x.requires_grad:
                _accumulate(x, (g2 @ dense).reshape(x.dims), fresh=True)

        return _track("conv2d_same", (x, w), out, pullback)

    col = _im2col(x.data, f)  # kept for the weight gradient
    w2 = w.data.reshape(out_c, -1)
    out = Tensor((col @ w2.T).reshape(b, h, wd, out_c).transpose(0, 3, 1, 2))

    def pullback(g: np.ndarray) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(b * h * wd, out_c)
        if w.requires_grad:
            _accumulate(w, (col.T @ g2).T.reshape(w.dims), fresh=True)
        if x.requires_grad:
            dcol = g2 @ w2
            if f == 1:
                dx = np.ascontiguousarray(dcol.reshape(b, h, wd, -1).transpose(0, 3, 1, 2))
            else:
                dx = _col2im(dcol, x.dims, f)
            _accumulate(x, dx, fresh=True)

    return _track("conv2d_same", (x, w), out, pullback)


def conv2d_head(x: Tensor, k1: ConvKernel, k2: ConvKernel, slope: float = 0.01) -> Tensor:
    """Fused two-layer head: ``k2 (1x1, linear)`` over ``LeakyReLU(k1 * x)``.

    Equivalent to ``conv2d_same(leaky_relu(conv2d_same(x, k1), slope), k2)``
    but the wide intermediate activation never leaves column layout, which
    matters when its channel count is large.
    """
    if x.dims[1] != k1.in_channels:
        raise ShapeError(
            f"conv2d_head: input has {x.dims[1]} channels but first kernel expects "
            f"{k1.in_channels} (input dims {x.dims}, kernel dims {k1.weights.dims})"
        )
    if k2.f != 1 or k2.in_channels != k1.out_channels:
        raise ShapeError(
            f"conv2d_head: second kernel must be 1x1 over {k1.out_channels} channels, "
            f"got dims {k2.weights.dims}"
        )
    w1, w2 = k1.weights, k2.weights
    b, _, h, wd = x.dims
    w1_2d = w1.data.reshape(k1.out_channels, -1)
    w2_2d = w2.data.reshape(k2.out_channels, -1)
    col1 = _im2col(x.data, k1.f)
    hidden = col1 @ w1_2d.T  # (B*H*W, hidden), column layout throughout
    negative = hidden < 0
    np.multiply(hidden, slope, out=hidden, where=negative)
    out2 = hidden @ w2_2d.T
    out = Tensor(out2.reshape(b, h, wd, k2.out_channels).transpose(0, 3, 1, 2))

    def pullback(g: np.ndarray) -> None:
        g2 = g.transpose(0, 2, 3, 1).reshape(b * h * wd, k2.out_channels)
        if w2.requires_grad:
            _accumulate(w2, (hidden.T @ g2).T.reshape(w2.dims), fresh=True)
        dhidden = g2 @ w2_2d
        np.multiply(dhidden, slope, out=dhidden, where=negative)
        if w1.requires_grad:
            _accumulate(w1, (col1.T @ dhidden).T.reshape(w1.dims), fresh=True)
        if x.requires_grad:
            dcol = dhidden @ w1_2d
            _accumulate(x, _col2im(dcol, x.dims, k1.f), fresh=True)

    return _track("conv2d_head", (x, w1, w2), out, pullback,
                  signature=lambda: np.packbits(~negative).tobytes())


def channel_max(x: Tensor) -> tuple[Tensor, np.ndarray]:
    """Per-cell maximum over channels plus the winning channel index map.

    Ties break to the lowest channel index; the gradient routes only to the
    winner. The (batch, height, width) index map doubles as the policy
    argmax when the channels are per-action values.
    """
    if x.dims[1] < 1:
        raise ShapeError(f"channel_max needs at least one channel, got dims {x.dims}")
    winners = x.data.argmax(axis=1)  # first occurrence wins ties
    out = Tensor(np.take_along_axis(x.data, winners[:, None], axis=1))

    def pullback(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        np.put_along_axis(dx, winners[:, None], g, axis=1)
        _accumulate(x, dx, fresh=True)

    _track("channel_max", (x,), out, pullback,
           signature=lambda: winners.astype(np.int8).tobytes())
    return out, winners


def sigmoid(x: Tensor) -> Tensor:
    # exp may overflow for very negative inputs; the result still saturates
    # to exactly 0, so the warning is suppressed rather than branched around.
    with np.errstate(over="ignore"):
        out_data = 1.0 / (1.0 + np.exp(-x.data))
    out = Tensor(out_data)

    def pullback(g: np.ndarray) -> None:
        _accumulate(x, g * out_data * (1.0 - out_data), fresh=True)

    return _track("sigmoid", (x,), out, pullback)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """x for x >= 0 else slope*x; the subgradient at exactly 0 is 1."""
    negative = x.data < 0
    out_data = x.data.copy()
    np.multiply(out_data, slope, out=out_data, where=negative)
    out = Tensor(out_data)

    def pullback(g: np.ndarray) -> None:
        dx = g.copy()
        np.multiply(dx, slope, out=dx, where=negative)
        _accumulate(x, dx, fresh=True)

    return _track("leaky_relu", (x,), out, pullback,
                  signature=lambda: np.packbits(~negative).tobytes())


def _check_same_dims(op: str, a: Tensor, b: Tensor) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"{op}: operand dims differ, {a.dims} vs {b.dims}")


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims("add", a, b)
    out = Tensor(a.data + b.data)

    def pullback(g: np.ndarray) -> None:
        _accumulate(a, g)
        _accumulate(b, g)

    return _track("add", (a, b), out, pullback)


def hadamard(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dims("hadamard", a, b)
    out = Tensor(a.data * b.data)

    def pullback(g: np.ndarray) -> None:
        _accumulate(a, g * b.data, fresh=True)
        _accumulate(b, g * a.data, fresh=True)

    return _track("hadamard", (a, b), out, pullback)


def stack_channels(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the channel axis; batch/height/width must agree."""
    if (a.dims[0], a.dims[2], a.dims[3]) != (b.dims[0], b.dims[2], b.dims[3]):
        raise ShapeError(f"stack_channels: batch/height/width differ, {a.dims} vs {b.dims}")
    split = a.dims[1]
    out = Tensor(np.concatenate([a.data, b.data], axis=1))

    def pullback(g: np.ndarray) -> None:
        _accumulate(a, g[:, :split])
        _accumulate(b, g[:, split:])

    return _track("stack_channels", (a, b), out, pullback)


def stack_rows(a: Tensor, b: Tensor) -> Tensor:
    """Concatenate along the leading axis (kernel output planes)."""
    if a.dims[1:] != b.dims[1:]:
        raise ShapeError(f"stack_rows: trailing dims differ, {a.dims} vs {b.dims}")
    split = a.dims[0]
    out = Tensor(np.concatenate([a.data, b.data], axis=0))

    def pullback(g: np.ndarray) -> None:
        _accumulate(a, g[:split])
        _accumulate(b, g[split:])

    return _track("stack_rows", (a, b), out, pullback)


def narrow_channels(x: Tensor, start: int, count: int) -> Tensor:
    """Slice ``count`` channels starting at ``start``."""
    if start < 0 or start + count > x.dims[1]:
        raise ShapeError(f"narrow_channels: [{start}, {start + count}) outside {x.dims[1]} channels")
    out = Tensor(x.data[:, start:start + count])

    def pullback(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[:, start:start + count] = g
        _accumulate(x, dx, fresh=True)

    return _track("narrow_channels", (x,), out, pullback)


def extract_at(x: Tensor, rows: np.ndarray, cols: np.ndarray) -> Tensor:
    """Gather the channel vector at one (row, col) per batch element.

    Returns dims (batch, channels, 1, 1).
    """
    b, c, h, w = x.dims
    rows = np.asarray(rows, dtype=np.intp)
    cols = np.asarray(cols, dtype=np.intp)
    if rows.shape != (b,) or cols.shape != (b,):
        raise ShapeError(f"extract_at: need {b} coordinates, got {rows.shape} rows, {cols.shape} cols")
    if (rows < 0).any() or (rows >= h).any() or (cols < 0).any() or (cols >= w).any():
        bad = int(np.argmax((rows < 0) | (rows >= h) | (cols < 0) | (cols >= w)))
        raise ValueError(
            f"extract_at: coordinate ({rows[bad]}, {cols[bad]}) outside {h}x{w} map"
        )
    batch_idx = np.arange(b)
    out = Tensor(x.data[batch_idx, :, rows, cols].reshape(b, c, 1, 1))

    def pullback(g: np.ndarray) -> None:
        dx = np.zeros_like(x.data)
        dx[batch_idx, :, rows, cols] = g[:, :, 0, 0]
        _accumulate(x, dx, fresh=True)

    return _track("extract_at", (x,), out, pullback)


def total_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a (1,1,1,1) scalar tensor."""
    out = Tensor(np.full((1, 1, 1, 1), x.data.sum()))

    def pullback(g: np.ndarray) -> None:
        _accumulate(x, np.full_like(x.data, g.reshape(())), fresh=True)

    return _track("total_sum", (x,), out, pullback)


def softmax_blend(maps: Sequence[Tensor], logits: Tensor) -> Tensor:
    """Softmax-weighted average of same-shaped maps; one logit per map.

    ``logits`` has dims (k, 1, 1, 1) for k maps.
    """
    k = len(maps)
    if k == 0:
        raise ShapeError("softmax_blend: empty map sequence")
    if logits.dims != (k, 1, 1, 1):
        raise ShapeError(f"softmax_blend: {k} maps need logits dims ({k},1,1,1), got {logits.dims}")
    for m in maps[1:]:
        _check_same_dims("softmax_blend", maps[0], m)
    z = logits.data.reshape(k)
    e = np.exp(z - z.max())
    p = e / e.sum()
    out = Tensor(sum(p[i] * maps[i].data for i in range(k)))

    def pullback(g: np.ndarray) -> None:
        for i, m in enumerate(maps):
            _accumulate(m, p[i] * g, fresh=True)
        if logits.requires_grad:
            s = np.array([float((g * m.data).sum()) for m in maps])
            dz = p * (s - float(p @ s))
            _accumulate(logits, dz.reshape(k, 1, 1, 1), fresh=True)

    return _track("softmax_blend", tuple(maps) + (logits,), out, pullback)


def softmax_cross_entropy(logits: Tensor, one_hot_labels: np.ndarray) -> Tensor:
    """Mean over the batch of -log softmax(logits)[label].

    ``logits`` may have any dims whose non-batch axes flatten to the number
    of classes; stabilized by max-subtraction. Labels must be exactly
    one-hot rows of 0s and a single 1.
    """
    b = logits.dims[0]
    labels = np.asarray(one_hot_labels, dtype=np.float64)
    if labels.ndim != 2 or labels.shape[0] != b:
        raise ValueError(f"labels must be (batch, actions), got {labels.shape} for batch {b}")
    n_class = labels.shape[1]
    if logits.data.size != b * n_class:
        raise ShapeError(
            f"logits dims {logits.dims} do not flatten to batch x {n_class} classes"
        )
    if not np.isin(labels, (0.0, 1.0)).all() or (labels.sum(axis=1) != 1.0).any():
        raise ValueError("labels are not one-hot: each row needs a single 1 and 0s elsewhere")

    z = logits.data.reshape(b, n_class)
    zmax = z.max(axis=1, keepdims=True)
    ez = np.exp(z - zmax)
    probs = ez / ez.sum(axis=1, keepdims=True)
    picked = (z * labels).sum(axis=1)
    lse = zmax[:, 0] + np.log(ez.sum(axis=1))
    out = Tensor(np.full((1, 1, 1, 1), float(np.mean(lse - picked))))

    def pullback(g: np.ndarray) -> None:
        scale = float(g.reshape(())) / b
        _accumulate(logits, (scale * (probs - labels)).reshape(logits.dims), fresh=True)

    return _track("softmax_cross_entropy", (logits,), out, pullback)


def softmax_probs(logits: np.ndarray) -> np.ndarray:
    """Row-wise softmax of a (batch, actions) array (no gradient tracking)."""
    z = np.asarray(logits, dtype=np.float64)
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


# ---------------------------------------------------------------------------
# finite-difference gradient checking


@dataclass
class GradCheckRecord:
    name: str
    index: int
    analytic: float
    numeric: float
    rel_error: float


@dataclass
class GradCheckReport:
    """Outcome of a finite-difference sweep over sampled parameters.

    ``skipped`` counts coordinates whose perturbation flipped a branch
    decision (an argmax winner or a LeakyReLU sign), where the loss is not
    differentiable and central differences are meaningless.
    """

    checked: int = 0
    skipped: int = 0
    max_rel_error: float = 0.0
    failures: list = field(default_factory=list)
    records: list = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return self.checked > 0 and not self.failures


def finite_diff_check(params, loss_fn: Callable[[], Tensor],
                      step: float = 1e-4, tolerance: float = 1e-4,
                      num_samples: int = 200, rng=None) -> GradCheckReport:
    """Compare analytic gradients of ``loss_fn`` against central differences.

    ``params`` is an iterable of (name, Tensor) pairs (or a dict); the check
    samples ``num_samples`` scalar coordinates across all of them. The
    relative error is |g_a - g_fd| / max(1e-8, |g_a| + |g_fd|); a coordinate
    passes when it is below ``tolerance``. ``loss_fn`` must be deterministic.
    """
    if hasattr(params, "items"):
        params = list(params.items())
    else:
        params = list(params)
    rng = np.random.default_rng(rng)

    def run():
        with Tape() as tape:
            loss = loss_fn()
        return loss, tape

    for _, t in params:
        t.grad = None
    loss, tape = run()
    base_sig = tape.branch_signature()
    backward(loss, tape)
    grads = {name: (np.zeros_like(t.data) if t.grad is None else t.grad.copy())
             for name, t in params}

    sizes = [t.data.size for _, t in params]
    total = int(sum(sizes))
    picks = rng.choice(total, size=min(num_samples, total), replace=False)
    offsets = np.cumsum([0] + sizes)

    report = GradCheckReport()
    for flat in sorted(int(i) for i in picks):
        slot = int(np.searchsorted(offsets, flat, side="right") - 1)
        name, tensor = params[slot]
        local = flat - int(offsets[slot])
        view = tensor.data.reshape(-1)
        saved = view[local]

        view[local] = saved + step
        loss_p, tape_p = run()
        sig_p = tape_p.branch_signature()
        view[local] = saved - step
        loss_m, tape_m = run()
        sig_m = tape_m.branch_signature()
        view[local] = saved

        if sig_p != base_sig or sig_m != base_sig:
            report.skipped += 1
            continue
        numeric = (loss_p.item() - loss_m.item()) / (2.0 * step)
        analytic = float(grads[name].reshape(-1)[local])
        rel = abs(analytic - numeric) / max(1e-8, abs(analytic) + abs(numeric))
        rec = GradCheckRecord(name, local, analytic, numeric, rel)
        report.records.append(rec)
        report.checked += 1
        report.max_rel_error = max(report.max_rel_error, rel)
        if rel >= tolerance:
            report.failures.append(rec)
    return report
