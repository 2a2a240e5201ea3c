"""Minimal deterministic reverse-mode autodiff engine.

Tensors store float32 data in row-major order with layout (batch, channel,
spatial...); spatial order is (z, y, x) with z the through-plane axis.
Scalar loss values are the accumulators themselves and are kept in float64,
as are all internal reductions and batch-norm statistics; bulk storage stays
float32.

Ops record onto the active `Tape` whenever any input takes gradients. The
backward pass replays the tape in exact reverse recording order, so two runs
over the same graph produce bitwise-identical gradients.
"""

from itertools import product as _iterproduct

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are inconsistent with the operation."""


class OptimError(RuntimeError):
    """Optimizer state is invalid (e.g. a parameter without a gradient)."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "decay", "name")

    def __init__(self, data, requires_grad=False, name=None, dtype=np.float32):
        arr = np.asarray(data, dtype=dtype)
        if not arr.flags["C_CONTIGUOUS"]:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        # participates in the L2 weight-decay term (conv / FC weights only)
        self.decay = False
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}, name={self.name})"


_ACTIVE_TAPES = []


class Tape:
    """Ordered record of differentiable operations.

    Every recorded step holds the op's output tensor and a closure that
    propagates the output gradient to the inputs. `backward` visits steps in
    exact reverse recording order; steps whose output never received a
    gradient (i.e. not upstream of the loss) are skipped.
    """

    def __init__(self):
        self._steps = []

    def __enter__(self):
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _ACTIVE_TAPES.pop()
        return False

    def __len__(self):
        return len(self._steps)

    def record(self, out, backward_fn):
        self._steps.append((out, backward_fn))

    def backward(self, loss):
        if loss.size != 1:
            raise ShapeError(f"backward target must be scalar, got shape {loss.shape}")
        for out, _ in self._steps:
            out.grad = None
        loss.grad = np.ones_like(loss.data)
        for out, fn in reversed(self._steps):
            if out.grad is not None:
                fn(out.grad)


def _tape():
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


def _live(*tensors):
    return _tape() is not None and any(t.requires_grad for t in tensors)


def _accum(t, g):
    """Accumulate gradient g into tensor t (cast to t's storage dtype)."""
    if not t.requires_grad:
        return
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        raise ShapeError(f"gradient shape {g.shape} != tensor shape {t.data.shape}")
    if t.grad is None:
        t.grad = g.copy()
    else:
        t.grad += g


def _record(out, backward_fn):
    out.requires_grad = True
    _tape().record(out, backward_fn)


def _as_tuple(value, rank, kind):
    if np.isscalar(value):
        value = (value,) * rank
    value = tuple(int(v) for v in value)
    if len(value) != rank:
        raise ValueError(f"{kind} must have {rank} entries, got {value}")
    return value


# ---------------------------------------------------------------------------
# convolution


def _check_conv_args(x, kernel, stride, padding, transposed=False):
    srank = x.data.ndim - 2
    if srank not in (2, 3):
        raise ShapeError(f"input must be (batch, channel, 2 or 3 spatial dims), got shape {x.shape}")
    if kernel.data.ndim != x.data.ndim:
        raise ShapeError(f"kernel rank {kernel.data.ndim} != input rank {x.data.ndim}")
    cin_axis = 0 if transposed else 1
    if kernel.shape[cin_axis] != x.shape[1]:
        raise ShapeError(
            f"kernel expects {kernel.shape[cin_axis]} input channels, input has {x.shape[1]}"
        )
    stride = _as_tuple(stride, srank, "stride")
    padding = _as_tuple(padding, srank, "padding")
    if any(s <= 0 for s in stride):
        raise ValueError(f"stride entries must be positive, got {stride}")
    if any(p < 0 for p in padding):
        raise ValueError(f"padding entries must be non-negative, got {padding}")
    return srank, stride, padding


def _pad_spatial(arr, padding):
    if not any(padding):
        return arr
    widths = [(0, 0), (0, 0)] + [(p, p) for p in padding]
    return np.pad(arr, widths)


def _windows(arr, ksp, stride):
    """Strided sliding windows over the spatial axes: (B, C, *out, *ksp)."""
    srank = arr.ndim - 2
    win = sliding_window_view(arr, ksp, axis=tuple(range(2, 2 + srank)))
    sl = (slice(None), slice(None)) + tuple(slice(None, None, s) for s in stride)
    return win[sl]


def _corr_core(xd, kd, stride, padding):
    """Strided cross-correlation; returns (out, cols, padded_input, out_sp)."""
    srank = xd.ndim - 2
    batch, cin = xd.shape[:2]
    cout = kd.shape[0]
    ksp = kd.shape[2:]
    out_sp = []
    for i in range(srank):
        ext = (xd.shape[2 + i] + 2 * padding[i] - ksp[i]) // stride[i] + 1
        if xd.shape[2 + i] + 2 * padding[i] < ksp[i] or ext < 1:
            raise ShapeError(
                f"spatial dim {i}: extent {xd.shape[2 + i]} with padding {padding[i]} "
                f"is smaller than kernel {ksp[i]}"
            )
        out_sp.append(ext)
    out_sp = tuple(out_sp)
    xp = _pad_spatial(xd, padding)
    win = _windows(xp, ksp, stride)  # (B, C, *out_sp, *ksp)
    # (B, *out_sp, C, *ksp) -> (B, n_out, C*k)
    order = (0,) + tuple(range(2, 2 + srank)) + (1,) + tuple(range(2 + srank, 2 + 2 * srank))
    cols = np.ascontiguousarray(win.transpose(order)).reshape(
        batch, int(np.prod(out_sp)), cin * int(np.prod(ksp))
    )
    wmat = kd.reshape(cout, -1)
    out = cols @ wmat.T  # (B, n_out, cout)
    out = np.moveaxis(out, -1, 1).reshape(batch, cout, *out_sp)
    return np.ascontiguousarray(out), cols, xp, out_sp


def _scatter_cols(cols6, batch, channels, in_sp, ksp, stride, out_sp_padded):
    """Adjoint of windowing: scatter (B, C, *ksp, *in_sp) into a padded grid."""
    srank = len(ksp)
    full = np.zeros((batch, channels) + out_sp_padded, dtype=cols6.dtype)
    for off in _iterproduct(*(range(k) for k in ksp)):
        sl = tuple(slice(off[i], off[i] + in_sp[i] * stride[i], stride[i]) for i in range(srank))
        full[(slice(None), slice(None)) + sl] += cols6[(slice(None), slice(None)) + off]
    return full


def conv_nd(x, kernel, stride=1, padding=0):
    """Strided cross-correlation over 2 or 3 spatial dims.

    x: (B, Cin, *sp), kernel: (Cout, Cin, *ksp). Output spatial extent per
    dim is floor((in + 2*pad - k) / stride) + 1.
    """
    srank, stride, padding = _check_conv_args(x, kernel, stride, padding)
    out_d, cols, xp, out_sp = _corr_core(x.data, kernel.data, stride, padding)
    out = Tensor(out_d)
    if _live(x, kernel):
        batch, cin = x.shape[:2]
        cout = kernel.shape[0]
        ksp = kernel.shape[2:]

        def backward(g):
            g2 = np.moveaxis(g.reshape(batch, cout, -1), 1, 2)  # (B, n_out, cout)
            if kernel.requires_grad:
                gk = np.tensordot(g2, cols, axes=([0, 1], [0, 1]))  # (cout, C*k)
                _accum(kernel, gk.reshape(kernel.shape))
            if x.requires_grad:
                gcols = g2 @ kernel.data.reshape(cout, -1)  # (B, n_out, C*k)
                gcols = gcols.reshape((batch,) + out_sp + (cin,) + ksp)
                order = (0, 1 + srank) + tuple(range(2 + srank, 2 + 2 * srank)) + tuple(
                    range(1, 1 + srank)
                )
                gcols = gcols.transpose(order)  # (B, C, *ksp, *out_sp)
                gxp = _scatter_cols(gcols, batch, cin, out_sp, ksp, stride, xp.shape[2:])
                crop = (slice(None), slice(None)) + tuple(
                    slice(p, xp.shape[2 + i] - p) for i, p in enumerate(padding)
                )
                _accum(x, gxp[crop])

        _record(out, backward)
    return out


def conv_transpose_nd(x, kernel, stride=1, padding=0):
    """Transposed convolution, the exact adjoint of `conv_nd`.

    x: (B, C1, *sp), kernel: (C1, C2, *ksp). Output spatial extent per dim is
    (in - 1)*stride - 2*pad + k, so <conv(a, k), b> == <a, conv_transpose(b, k)>
    for matched stride/padding.
    """
    srank, stride, padding = _check_conv_args(x, kernel, stride, padding, transposed=True)
    batch, c1 = x.shape[:2]
    c2 = kernel.shape[1]
    ksp = kernel.shape[2:]
    in_sp = x.shape[2:]
    out_sp = []
    for i in range(srank):
        ext = (in_sp[i] - 1) * stride[i] - 2 * padding[i] + ksp[i]
        if ext < 1:
            raise ShapeError(f"spatial dim {i}: transposed output extent {ext} < 1")
        out_sp.append(ext)
    out_sp = tuple(out_sp)

    def forward(xd):
        cols = np.tensordot(xd, kernel.data, axes=([1], [0]))  # (B, *in_sp, C2, *ksp)
        order = (0, 1 + srank) + tuple(range(2 + srank, 2 + 2 * srank)) + tuple(range(1, 1 + srank))
        cols = cols.transpose(order)  # (B, C2, *ksp, *in_sp)
        padded = tuple((in_sp[i] - 1) * stride[i] + ksp[i] for i in range(srank))
        full = _scatter_cols(cols, batch, c2, in_sp, ksp, stride, padded)
        crop = (slice(None), slice(None)) + tuple(
            slice(p, padded[i] - p) for i, p in enumerate(padding)
        )
        return np.ascontiguousarray(full[crop])

    out = Tensor(forward(x.data))
    if _live(x, kernel):

        def backward(g):
            if x.requires_grad:
                gx, _, _, _ = _corr_core(g, kernel.data, stride, padding)
                _accum(x, gx)
            if kernel.requires_grad:
                gp = _pad_spatial(g, padding)
                win = _windows(gp, ksp, stride)  # (B, C2, *in_sp, *ksp)
                gk = np.tensordot(
                    x.data, win, axes=([0] + list(range(2, 2 + srank)), [0] + list(range(2, 2 + srank)))
                )  # (C1, C2, *ksp)
                _accum(kernel, gk)

        _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# normalisation / affine layers


class RunningStats:
    """Per-channel running mean/variance for batch norm inference."""

    def __init__(self, channels):
        self.mean = np.zeros(channels, dtype=np.float32)
        self.var = np.ones(channels, dtype=np.float32)

    def copy(self):
        out = RunningStats(len(self.mean))
        out.mean = self.mean.copy()
        out.var = self.var.copy()
        return out


def batch_norm(x, gamma, beta, running, training, eps=1e-5, momentum=0.9):
    """Per-channel batch normalisation over (batch, *spatial).

    Training mode normalises by batch statistics (computed in float64) and
    updates `running` in place; inference mode uses the running statistics.
    """
    if x.data.ndim < 2:
        raise ShapeError(f"batch_norm input needs (batch, channel, ...), got {x.shape}")
    channels = x.shape[1]
    if gamma.shape != (channels,) or beta.shape != (channels,):
        raise ShapeError(
            f"gamma/beta must have shape ({channels},), got {gamma.shape}/{beta.shape}"
        )
    axes = (0,) + tuple(range(2, x.data.ndim))
    bshape = (1, channels) + (1,) * (x.data.ndim - 2)

    if training:
        mu = x.data.mean(axis=axes, dtype=np.float64)
        var = np.mean((x.data.astype(np.float64) - mu.reshape(bshape)) ** 2, axis=axes)
        running.mean = (momentum * running.mean + (1.0 - momentum) * mu).astype(np.float32)
        running.var = (momentum * running.var + (1.0 - momentum) * var).astype(np.float32)
    else:
        mu = running.mean.astype(np.float64)
        var = running.var.astype(np.float64)

    inv64 = 1.0 / np.sqrt(var + eps)
    xhat64 = (x.data.astype(np.float64) - mu.reshape(bshape)) * inv64.reshape(bshape)
    xhat = xhat64.astype(np.float32)
    out = Tensor(xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape))

    if _live(x, gamma, beta):

        def backward(g):
            if beta.requires_grad:
                _accum(beta, g.sum(axis=axes, dtype=np.float64))
            if gamma.requires_grad:
                _accum(gamma, (g.astype(np.float64) * xhat64).sum(axis=axes))
            if x.requires_grad:
                gh = g.astype(np.float64) * gamma.data.astype(np.float64).reshape(bshape)
                if training:
                    mean_gh = gh.mean(axis=axes).reshape(bshape)
                    mean_gh_xhat = (gh * xhat64).mean(axis=axes).reshape(bshape)
                    gx = inv64.reshape(bshape) * (gh - mean_gh - xhat64 * mean_gh_xhat)
                else:
                    gx = gh * inv64.reshape(bshape)
                _accum(x, gx)

        _record(out, backward)
    return out


def fully_connected(x, weight, bias):
    """Affine map on the flattened non-batch dims: (B, D) @ (D, M) + (M,)."""
    batch = x.shape[0]
    flat = x.data.reshape(batch, -1)
    if weight.data.ndim != 2 or flat.shape[1] != weight.shape[0]:
        raise ShapeError(
            f"fully_connected: input flattens to {flat.shape[1]} features, "
            f"weight is {weight.shape}"
        )
    if bias.shape != (weight.shape[1],):
        raise ShapeError(f"bias shape {bias.shape} != ({weight.shape[1]},)")
    out = Tensor(flat @ weight.data + bias.data)
    if _live(x, weight, bias):

        def backward(g):
            if bias.requires_grad:
                _accum(bias, g.sum(axis=0, dtype=np.float64))
            if weight.requires_grad:
                _accum(weight, flat.T @ g)
            if x.requires_grad:
                _accum(x, (g @ weight.data.T).reshape(x.shape))

        _record(out, backward)
    return out


def add_channel_bias(x, bias):
    """x + bias broadcast over (batch, *spatial); bias has one entry per channel."""
    channels = x.shape[1]
    if bias.shape != (channels,):
        raise ShapeError(f"bias shape {bias.shape} != ({channels},)")
    bshape = (1, channels) + (1,) * (x.data.ndim - 2)
    out = Tensor(x.data + bias.data.reshape(bshape))
    if _live(x, bias):
        axes = (0,) + tuple(range(2, x.data.ndim))

        def backward(g):
            if x.requires_grad:
                _accum(x, g)
            if bias.requires_grad:
                _accum(bias, g.sum(axis=axes, dtype=np.float64))

        _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# elementwise / structural ops


def relu(x):
    """max(0, x); the subgradient at 0 is 0."""
    out = Tensor(np.maximum(x.data, 0))
    if _live(x):
        mask = x.data > 0

        def backward(g):
            _accum(x, g * mask)

        _record(out, backward)
    return out


def softmax(x, axis=1):
    """Stabilised softmax along `axis` (class probabilities per pixel)."""
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(p)
    if _live(x):

        def backward(g):
            dot = (g * p).sum(axis=axis, keepdims=True)
            _accum(x, p * (g - dot))

        _record(out, backward)
    return out


def reshape(x, shape):
    out = Tensor(x.data.reshape(shape))
    if _live(x):

        def backward(g):
            _accum(x, g.reshape(x.shape))

        _record(out, backward)
    return out


def concat(a, b, axis=1):
    out = Tensor(np.concatenate([a.data, b.data], axis=axis))
    if _live(a, b):
        split = a.shape[axis]

        def backward(g):
            ga, gb = np.split(g, [split], axis=axis)
            _accum(a, ga)
            _accum(b, gb)

        _record(out, backward)
    return out


def add(a, b):
    if a.shape != b.shape:
        raise ShapeError(f"add: shapes differ {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data, dtype=np.result_type(a.data, b.data))
    if _live(a, b):

        def backward(g):
            _accum(a, g)
            _accum(b, g)

        _record(out, backward)
    return out


def mul_const(x, c):
    out = Tensor(x.data * c, dtype=x.data.dtype)
    if _live(x):

        def backward(g):
            _accum(x, g * c)

        _record(out, backward)
    return out


def add_const(x, c):
    """x + constant; the gradient passes through unchanged."""
    out = Tensor(x.data + c, dtype=x.data.dtype)
    if _live(x):

        def backward(g):
            _accum(x, g)

        _record(out, backward)
    return out


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits, target, class_count):
    """Mean over all pixels of -log softmax probability of the true class.

    logits: (B, C, *sp); target: integer array (B, *sp) with values in
    [0, class_count). Stabilised by max subtraction; reductions in float64.
    """
    target = np.asarray(target)
    if logits.shape[1] != class_count:
        raise ShapeError(f"logits have {logits.shape[1]} channels, expected {class_count}")
    if target.shape != logits.shape[:1] + logits.shape[2:]:
        raise ShapeError(
            f"target shape {target.shape} incompatible with logits {logits.shape}"
        )
    if target.min() < 0 or target.max() >= class_count:
        raise ValueError(
            f"target labels must lie in [0, {class_count}), got range "
            f"[{target.min()}, {target.max()}]"
        )
    z = logits.data.astype(np.float64)
    z -= z.max(axis=1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - logsumexp
    idx = np.expand_dims(target, 1)
    picked = np.take_along_axis(logp, idx, axis=1)
    count = picked.size
    out = Tensor(-picked.sum() / count, dtype=np.float64)
    if _live(logits):
        probs = np.exp(logp)

        def backward(g):
            grad = probs.copy()
            np.put_along_axis(grad, idx, np.take_along_axis(grad, idx, axis=1) - 1.0, axis=1)
            _accum(logits, grad * (float(g) / count))

        _record(out, backward)
    return out


def huber_loss(pred, target):
    """Mean smooth-l1: 0.5 k^2 for |k| < 1, |k| - 0.5 otherwise, k = pred - target."""
    if pred.shape != target.shape:
        raise ShapeError(f"huber_loss: shapes differ {pred.shape} vs {target.shape}")
    k = pred.data.astype(np.float64) - target.data.astype(np.float64)
    absk = np.abs(k)
    per = np.where(absk < 1.0, 0.5 * k * k, absk - 0.5)
    out = Tensor(per.mean(), dtype=np.float64)
    if _live(pred, target):
        count = k.size

        def backward(g):
            gk = np.clip(k, -1.0, 1.0) * (float(g) / count)
            _accum(pred, gk)
            _accum(target, -gk)

        _record(out, backward)
    return out


def l2_distance(a, b):
    """Sum of squared differences (no mean), differentiable in both arguments."""
    if a.shape != b.shape:
        raise ShapeError(f"l2_distance: shapes differ {a.shape} vs {b.shape}")
    d = a.data.astype(np.float64) - b.data.astype(np.float64)
    out = Tensor((d * d).sum(), dtype=np.float64)
    if _live(a, b):

        def backward(g):
            gd = 2.0 * d * float(g)
            _accum(a, gd)
            _accum(b, -gd)

        _record(out, backward)
    return out


def weight_sq_sum(params) -> float:
    """Sum of squares over decay-eligible parameters (float64 accumulation)."""
    total = 0.0
    for p in params:
        if p.decay:
            total += float(np.sum(p.data.astype(np.float64) ** 2))
    return total


# ---------------------------------------------------------------------------
# optimisation


class OptimState:
    """Plain SGD state: fixed learning rate plus optional L2 weight decay.

    Decay applies only to parameters flagged `decay` (convolution and FC
    weights); biases and batch-norm parameters are exempt.
    """

    def __init__(self, learning_rate=0.001, weight_decay=0.0):
        if learning_rate <= 0:
            raise ValueError(f"learning_rate must be positive, got {learning_rate}")
        if weight_decay < 0:
            raise ValueError(f"weight_decay must be non-negative, got {weight_decay}")
        self.learning_rate = float(learning_rate)
        self.weight_decay = float(weight_decay)
        self.step_count = 0


def sgd_step(params, state):
    """p <- p - lr * (grad + decay * p); gradients are cleared afterwards."""
    lr = np.float32(state.learning_rate)
    lam = np.float32(state.weight_decay)
    for p in params:
        if p.grad is None:
            raise OptimError(f"parameter {p.name or '<unnamed>'} has no gradient")
    for p in params:
        if state.weight_decay != 0.0 and p.decay:
            upd = p.grad + lam * p.data
        else:
            upd = p.grad
        p.data -= lr * upd
        p.grad = None
    state.step_count += 1


# ---------------------------------------------------------------------------
# gradient checking


class GradCheckEntry:
    def __init__(self, name, max_rel_err, passed):
        self.name = name
        self.max_rel_err = max_rel_err
        self.passed = passed

    def __repr__(self):
        status = "ok" if self.passed else "FAIL"
        return f"{self.name}: rel_err={self.max_rel_err:.3e} [{status}]"


class GradCheckReport:
    def __init__(self, entries):
        self.entries = entries
        self.passed = all(e.passed for e in entries)

    def __repr__(self):
        return "\n".join(repr(e) for e in self.entries)


def grad_check(fn, inputs, tol=1e-3, step=1e-3):
    """Compare analytic gradients of scalar-valued `fn` to central differences.

    Perturbations of size `step` are applied in float32 storage; the
    difference quotient is evaluated in float64. The relative error per input
    is max|analytic - fd| / max(inf-norm(fd), inf-norm(analytic), 1e-12).
    """
    saved_flags = [t.requires_grad for t in inputs]
    for t in inputs:
        t.requires_grad = True
        t.grad = None
    try:
        with Tape() as tape:
            out = fn(*inputs)
            if out.size != 1:
                raise ShapeError("grad_check target must be scalar")
            tape.backward(out)
        analytic = [
            np.zeros_like(t.data, dtype=np.float64) if t.grad is None else t.grad.astype(np.float64)
            for t in inputs
        ]
    finally:
        for t, flag in zip(inputs, saved_flags):
            t.requires_grad = flag
            t.grad = None

    def evaluate():
        return float(fn(*inputs).data)

    entries = []
    for idx, t in enumerate(inputs):
        fd = np.zeros_like(t.data, dtype=np.float64)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = np.float32(orig + step)
            hi = np.float64(flat[i]) - np.float64(orig)
            f_plus = evaluate()
            flat[i] = np.float32(orig - step)
            lo = np.float64(orig) - np.float64(flat[i])
            f_minus = evaluate()
            flat[i] = orig
            fd.reshape(-1)[i] = (f_plus - f_minus) / (hi + lo)
        scale = max(np.abs(fd).max(), np.abs(analytic[idx]).max(), 1e-12)
        rel = float(np.abs(analytic[idx] - fd).max() / scale)
        entries.append(GradCheckEntry(t.name or f"input{idx}", rel, rel < tol))
    return GradCheckReport(entries)
