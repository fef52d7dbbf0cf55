"""Dense 2-D tensors with a recorded tape and reverse-mode gradients.

Everything is float64 and row-major. Ops executed inside a ``with Tape()``
block are recorded; ``tape.backward(scalar)`` replays the records once, in
reverse execution order, accumulating gradients by summation into each
tensor's ``grad``. Outside a tape, ops are plain forward computations.

A tape and its tensors form a single-threaded context. Parameters
(``requires_grad=True``) live across tapes; call ``zero_grad`` at the
start of each step.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError

_TAPE_STACK: list["Tape"] = []


class Tensor:
    """A (rows, cols) float64 array, optionally tracked for gradients.

    grad is allocated lazily on first accumulation (zeroed up front only
    by zero_grad); copy=False adopts the given array without copying and
    is meant for freshly computed op outputs.
    """

    __slots__ = ("data", "requires_grad", "grad", "_adam_m", "_adam_v")

    def __init__(self, data, requires_grad: bool = False, copy: bool = True):
        if copy:
            arr = np.array(data, dtype=np.float64)
        else:
            arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise ShapeError(f"tensors are 2-D, got ndim={arr.ndim}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad = np.zeros_like(arr) if requires_grad else None
        self._adam_m = None
        self._adam_v = None

    @property
    def shape(self) -> tuple[int, int]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a scalar tensor, shape is {self.shape}")
        return float(self.data[0, 0])

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g)  # copy: g may be shared with a sibling input
        else:
            self.grad += g

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class Tape:
    """Ordered record of executed ops; backward replays it in reverse."""

    def __init__(self):
        self._records: list[tuple[Tensor, callable]] = []

    def __enter__(self) -> "Tape":
        _TAPE_STACK.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        popped = _TAPE_STACK.pop()
        assert popped is self

    def __len__(self) -> int:
        return len(self._records)

    def record(self, out: Tensor, backward_fn) -> None:
        """backward_fn(out_grad) must accumulate into the op's inputs."""
        self._records.append((out, backward_fn))

    def backward(self, out: Tensor) -> None:
        """Seed d(out)=1 and propagate through all records, newest first."""
        if out.data.size != 1:
            raise ShapeError(f"backward needs a scalar, got shape {out.shape}")
        out.accumulate_grad(np.ones_like(out.data))
        for rec_out, backward_fn in reversed(self._records):
            if rec_out.grad is not None:
                backward_fn(rec_out.grad)


def _active_tape() -> Tape | None:
    return _TAPE_STACK[-1] if _TAPE_STACK else None


def apply_op(out_data: np.ndarray, inputs: list[Tensor], backward_fn) -> Tensor:
    """Wrap an op result, recording backward_fn if any input is tracked.

    backward_fn(out_grad, *inputs) returns one gradient array (or None)
    per input. This is the single extension point every op goes through.
    """
    out = Tensor(out_data, copy=False)
    tape = _active_tape()
    track = [t.requires_grad for t in inputs]
    if tape is not None and any(track):
        out.requires_grad = True
        out.grad = None  # allocated when a gradient actually arrives

        def _backward(out_grad):
            grads = backward_fn(out_grad, *inputs)
            for t, g, tracked in zip(inputs, grads, track):
                if tracked and g is not None:
                    t.accumulate_grad(g)

        tape.record(out, _backward)
    return out


# ---------------------------------------------------------------------------
# core ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape} do not chain")

    def back(g, a, b):
        return [g @ b.data.T, a.data.T @ g]

    return apply_op(a.data @ b.data, [a, b], back)


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "add")
    return apply_op(a.data + b.data, [a, b], lambda g, a, b: [g, g])


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "sub")
    return apply_op(a.data - b.data, [a, b], lambda g, a, b: [g, -g])


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_shape(a, b, "mul")
    return apply_op(a.data * b.data, [a, b], lambda g, a, b: [g * b.data, g * a.data])


def elementwise(a: Tensor, b: Tensor, kind: str) -> Tensor:
    try:
        return {"add": add, "sub": sub, "mul": mul}[kind](a, b)
    except KeyError:
        raise ShapeError(f"unknown elementwise kind {kind!r}") from None


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return apply_op(a.data * c, [a], lambda g, a: [g * c])


def add_row_bias(a: Tensor, bias: Tensor) -> Tensor:
    """a (m, d) + bias (1, d), broadcast down the rows."""
    if bias.shape != (1, a.shape[1]):
        raise ShapeError(f"bias shape {bias.shape} does not match columns of {a.shape}")

    def back(g, a, bias):
        return [g, g.sum(axis=0, keepdims=True)]

    return apply_op(a.data + bias.data, [a, bias], back)


def concat_cols(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[0] != b.shape[0]:
        raise ShapeError(f"concat_cols row counts differ: {a.shape} vs {b.shape}")
    p = a.shape[1]

    def back(g, a, b):
        return [g[:, :p], g[:, p:]]

    return apply_op(np.hstack([a.data, b.data]), [a, b], back)


def activation(a: Tensor, kind: str, slope: float = 0.01) -> Tensor:
    """Pointwise nonlinearity. relu uses subgradient 0 at the origin."""
    x = a.data
    if kind == "identity":
        return apply_op(x.copy(), [a], lambda g, a: [g])
    if kind == "relu":
        return apply_op(np.maximum(x, 0.0), [a], lambda g, a: [g * (a.data > 0)])
    if kind == "leaky_relu":
        out = np.where(x > 0, x, slope * x)
        return apply_op(out, [a], lambda g, a: [g * np.where(a.data > 0, 1.0, slope)])
    if kind == "sigmoid":
        s = 1.0 / (1.0 + np.exp(-x))
        return apply_op(s, [a], lambda g, a: [g * s * (1.0 - s)])
    if kind == "tanh":
        t = np.tanh(x)
        return apply_op(t, [a], lambda g, a: [g * (1.0 - t * t)])
    raise ShapeError(f"unknown activation {kind!r}")


def sum_all(a: Tensor) -> Tensor:
    return apply_op(
        np.array([[a.data.sum()]]), [a], lambda g, a: [np.full_like(a.data, g[0, 0])]
    )


def mean_all(a: Tensor) -> Tensor:
    n = a.data.size

    def back(g, a):
        return [np.full_like(a.data, g[0, 0] / n)]

    return apply_op(np.array([[a.data.mean()]]), [a], back)


# ---------------------------------------------------------------------------
# gather / segment ops (the sparse aggregation kernels)
#
# Scattering with np.add.at is unbuffered and dominates epoch time on
# batched graphs, so all reductions go through reduceat over sorted
# segment boundaries instead.

def _sorted_boundaries(seg_sorted):
    """(present segment ids, reduceat start offsets) of a sorted id array."""
    starts = np.nonzero(np.r_[True, seg_sorted[1:] != seg_sorted[:-1]])[0]
    return seg_sorted[starts], starts


def _segment_apply(data, seg, num_segments, ufunc, empty_value=0.0):
    """Per-segment ufunc reduction; absent segments get empty_value rows."""
    out = np.full((num_segments, data.shape[1]), empty_value)
    if seg.size == 0:
        return out, seg, np.arange(0)
    if np.all(seg[1:] >= seg[:-1]):
        order = None
        seg_sorted, data_sorted = seg, data
    else:
        order = np.argsort(seg, kind="stable")
        seg_sorted, data_sorted = seg[order], data[order]
    present, starts = _sorted_boundaries(seg_sorted)
    out[present] = ufunc.reduceat(data_sorted, starts, axis=0)
    return out, seg_sorted, order


def scatter_add_rows(shape, index, updates):
    """rows[index[k]] += updates[k] into a fresh zeros(shape) array."""
    out = np.zeros(shape)
    if index.size == 0:
        return out
    order = np.argsort(index, kind="stable")
    idx_sorted = index[order]
    present, starts = _sorted_boundaries(idx_sorted)
    out[present] = np.add.reduceat(updates[order], starts, axis=0)
    return out


def gather_rows(h: Tensor, index) -> Tensor:
    """Select rows of h by index; backward scatter-adds into h."""
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= h.shape[0]):
        raise ShapeError(f"gather index out of range for {h.shape[0]} rows")

    def back(g, h):
        return [scatter_add_rows(h.data.shape, idx, g)]

    return apply_op(h.data[idx], [h], back)


def _check_segments(n_rows, segment_ids, num_segments):
    seg = np.asarray(segment_ids, dtype=np.int64)
    if seg.shape != (n_rows,):
        raise ShapeError(f"need one segment id per row, got {seg.shape} for {n_rows} rows")
    if seg.size and (seg.min() < 0 or seg.max() >= num_segments):
        raise ShapeError(f"segment id out of range [0, {num_segments})")
    return seg


def segment_reduce(rows: Tensor, segment_ids, num_segments: int, kind: str = "sum") -> Tensor:
    """Reduce rows into per-segment outputs (sum, mean, or max).

    Empty segments produce zero rows for every kind. Mean divides by the
    segment size; max backward routes the gradient to the first argmax
    row of each segment (lowest row index on ties).
    """
    seg = _check_segments(rows.shape[0], segment_ids, num_segments)
    d = rows.shape[1]

    if kind in ("sum", "mean"):
        out, _, _ = _segment_apply(rows.data, seg, num_segments, np.add)
        if kind == "mean":
            counts = np.bincount(seg, minlength=num_segments).astype(np.float64)
            denom = np.maximum(counts, 1.0)[:, None]
            out = out / denom
            edge_inv = 1.0 / denom[seg]  # (rows, 1), reused by backward

            def back(g, rows):
                return [g[seg] * edge_inv]
        else:

            def back(g, rows):
                return [g[seg]]

        return apply_op(out, [rows], back)

    if kind == "max":
        maxes, _, _ = _segment_apply(rows.data, seg, num_segments, np.maximum, -np.inf)
        out = np.where(np.isfinite(maxes), maxes, 0.0)
        # first row index attaining the segment max, per column
        row_ids = np.arange(rows.shape[0], dtype=np.int64)[:, None]
        hit = np.where(
            rows.data == maxes[seg], row_ids, rows.shape[0]
        )
        argmax_f, _, _ = _segment_apply(
            hit.astype(np.float64), seg, num_segments, np.minimum, np.inf
        )

        def back(g, rows):
            grad = np.zeros_like(rows.data)
            valid = np.isfinite(argmax_f) & (argmax_f < rows.shape[0])
            srcs = argmax_f[valid].astype(np.int64)
            cols = np.nonzero(valid)[1]
            grad[srcs, cols] += g[valid]
            return [grad]

        return apply_op(out, [rows], back)

    raise ShapeError(f"unknown reduce kind {kind!r}")


def segment_softmax(scores: Tensor, segment_ids, num_segments: int) -> Tensor:
    """Softmax within each segment of a column of scores.

    Max-subtracted for stability; each nonempty segment sums to 1.
    """
    if scores.shape[1] != 1:
        raise ShapeError(f"segment_softmax expects a column, got {scores.shape}")
    seg = _check_segments(scores.shape[0], segment_ids, num_segments)
    col = scores.data
    seg_max, _, _ = _segment_apply(col, seg, num_segments, np.maximum, -np.inf)
    seg_max = np.where(np.isfinite(seg_max), seg_max, 0.0)
    shifted = np.exp(col - seg_max[seg])
    seg_sum, _, _ = _segment_apply(shifted, seg, num_segments, np.add)
    p = shifted / seg_sum[seg]

    def back(g, scores):
        dot, _, _ = _segment_apply(p * g, seg, num_segments, np.add)
        return [p * (g - dot[seg])]

    return apply_op(p, [scores], back)


def l2_normalize_rows(h: Tensor, eps: float = 1e-12) -> Tensor:
    """Scale each row to unit Euclidean norm; (near-)zero rows pass through."""
    norms = np.linalg.norm(h.data, axis=1, keepdims=True)
    keep = norms <= eps
    safe = np.where(keep, 1.0, norms)
    out = h.data / safe

    def back(g, h):
        # d(x/n)/dx = I/n - x x^T / n^3; pass-through rows get identity
        dots = (h.data * g).sum(axis=1, keepdims=True)
        grad = g / safe - h.data * dots / safe**3
        return [np.where(keep, g, grad)]

    return apply_op(out, [h], back)


# ---------------------------------------------------------------------------
# losses

def mse_loss(pred: Tensor, target: Tensor) -> Tensor:
    _check_same_shape(pred, target, "mse")
    diff = pred.data - target.data
    n = diff.size

    def back(g, pred, target):
        d = g[0, 0] * 2.0 * diff / n
        return [d, -d]

    return apply_op(np.array([[np.mean(diff * diff)]]), [pred, target], back)


def cross_entropy_with_logits(pred: Tensor, target) -> Tensor:
    """Mean cross entropy computed directly from logits.

    Single-column pred: binary labels in {0, 1}, one logit per example.
    Multi-column pred: integer class indices, one row of logits each.
    """
    t = np.asarray(target)
    n = pred.shape[0]
    if pred.shape[1] == 1:
        labels = t.reshape(-1).astype(np.float64)
        if labels.shape[0] != n:
            raise ShapeError(f"{n} logits vs {labels.shape[0]} labels")
        if not np.isin(labels, (0.0, 1.0)).all():
            raise ShapeError("binary targets must be 0 or 1")
        x = pred.data[:, 0]
        # softplus(x) - t*x, stable for large |x|
        per = np.maximum(x, 0.0) - x * labels + np.log1p(np.exp(-np.abs(x)))

        def back(g, pred):
            s = 1.0 / (1.0 + np.exp(-x))
            return [(g[0, 0] * (s - labels) / n)[:, None]]

        return apply_op(np.array([[per.mean()]]), [pred], back)

    labels = t.reshape(-1).astype(np.int64)
    if labels.shape[0] != n:
        raise ShapeError(f"{n} logit rows vs {labels.shape[0]} labels")
    if labels.size and (labels.min() < 0 or labels.max() >= pred.shape[1]):
        raise ShapeError(f"class index out of range [0, {pred.shape[1]})")
    x = pred.data
    m = x.max(axis=1, keepdims=True)
    lse = m[:, 0] + np.log(np.exp(x - m).sum(axis=1))
    per = lse - x[np.arange(n), labels]

    def back(g, pred):
        p = np.exp(x - m)
        p /= p.sum(axis=1, keepdims=True)
        p[np.arange(n), labels] -= 1.0
        return [g[0, 0] * p / n]

    return apply_op(np.array([[per.mean()]]), [pred], back)


def loss(kind: str, pred: Tensor, target) -> Tensor:
    if kind == "mse":
        tgt = target if isinstance(target, Tensor) else Tensor(np.asarray(target, dtype=np.float64))
        return mse_loss(pred, tgt)
    if kind == "cross_entropy_with_logits":
        return cross_entropy_with_logits(pred, target)
    raise ShapeError(f"unknown loss kind {kind!r}")


# ---------------------------------------------------------------------------
# optimizers / utilities

def zero_grad(params: list[Tensor]) -> None:
    for p in params:
        p.grad = np.zeros_like(p.data)


def sgd_step(params: list[Tensor], lr: float) -> None:
    for p in params:
        if p.grad is not None:
            p.data -= lr * p.grad


def adam_step(params, lr, beta1=0.9, beta2=0.999, eps=1e-8, t=1) -> None:
    """One Adam update with bias correction; moments live on the tensors."""
    if t < 1:
        raise ShapeError("adam step count t starts at 1")
    for p in params:
        if p.grad is None:
            continue
        if p._adam_m is None:
            p._adam_m = np.zeros_like(p.data)
            p._adam_v = np.zeros_like(p.data)
        p._adam_m = beta1 * p._adam_m + (1 - beta1) * p.grad
        p._adam_v = beta2 * p._adam_v + (1 - beta2) * p.grad**2
        m_hat = p._adam_m / (1 - beta1**t)
        v_hat = p._adam_v / (1 - beta2**t)
        p.data -= lr * m_hat / (np.sqrt(v_hat) + eps)


def grad_check(fn, params: list[Tensor], eps: float = 1e-5) -> float:
    """Max relative error between tape gradients and central differences.

    fn is a nullary closure over params returning a scalar Tensor.
    Relative error is |g - ghat| / max(1e-8, |g| + |ghat|) per coordinate.
    """
    zero_grad(params)
    with Tape() as tape:
        out = fn()
        tape.backward(out)
    analytic = [p.grad.copy() for p in params]

    worst = 0.0
    for p, g in zip(params, analytic):
        flat = p.data.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = fn().item()
            flat[i] = orig - eps
            f_minus = fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2 * eps)
            rel = abs(gflat[i] - numeric) / max(1e-8, abs(gflat[i]) + abs(numeric))
            worst = max(worst, rel)
    return worst


def _check_same_shape(a: Tensor, b: Tensor, opname: str) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{opname} shapes differ: {a.shape} vs {b.shape}")
