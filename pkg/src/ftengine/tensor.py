"""Dense tensors, layer kernels, and reverse-mode differentiation.

Everything is channels-last: images and activations are (H, W, C) or
(B, H, W, C); kernels accept either and preserve the batch axis. Training
default is float32; gradient checking runs in float64 because float32
finite differences are too noisy to compare against.

Ops take an optional Tape. With a tape they record a backward closure;
without one they are plain forward evaluations (inference).
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import (
    DetachedGraphError,
    InvalidHyperparameterError,
    InvalidRateError,
    ShapeMismatchError,
)

CE_CLAMP = 1e-12

_FLOAT_DTYPES = (np.float32, np.float64)


class Tensor:
    """A named, dense, row-major float array.

    `name` and `trainable` mark parameter leaves; backward() reports
    gradients only for trainable named tensors reached from the loss.
    """

    __slots__ = ("data", "name", "trainable")

    def __init__(self, data, name=None, trainable=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        if not arr.flags["C_CONTIGUOUS"]:  # ascontiguousarray would promote 0-d to 1-d
            arr = np.ascontiguousarray(arr)
        if any(extent < 1 for extent in arr.shape):
            raise ValueError(f"tensor extents must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.name = name
        self.trainable = trainable

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def copy(self):
        return Tensor(self.data.copy(), name=self.name, trainable=self.trainable)

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{tag})"


class TapeRecord:
    __slots__ = ("op", "inputs", "output", "backward_fn", "needs")

    def __init__(self, op, inputs, output, backward_fn, needs):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.needs = needs


class Tape:
    """Ordered record of executed ops; backward replays it in reverse.

    Tracks which tensors transitively depend on a trainable parameter so
    backward can skip subgraphs that cannot contribute a gradient (a fully
    frozen backbone costs no backward time).
    """

    def __init__(self):
        self.records = []
        self._depends = set()

    def record(self, op, inputs, output, backward_fn):
        needs = tuple(t.trainable or id(t) in self._depends for t in inputs)
        if any(needs):
            self._depends.add(id(output))
        self.records.append(TapeRecord(op, tuple(inputs), output, backward_fn, needs))


def backward(tape, loss):
    """Accumulate d(loss)/d(param) for every trainable parameter on the tape.

    Returns a map param name -> gradient Tensor. Parameters the graph never
    touched are absent, as are frozen (trainable=False) parameters.
    """
    if tape is None or not any(rec.output is loss for rec in tape.records):
        raise DetachedGraphError("loss tensor is not an output recorded on this tape")

    grads = {id(loss): np.ones_like(loss.data)}
    for rec in reversed(tape.records):
        g = grads.get(id(rec.output))
        if g is None or not any(rec.needs):
            continue
        input_grads = rec.backward_fn(g, rec.needs)
        for tensor, grad, need in zip(rec.inputs, input_grads, rec.needs):
            if not need or grad is None:
                continue
            held = grads.get(id(tensor))
            grads[id(tensor)] = grad if held is None else held + grad

    out = {}
    for rec in tape.records:
        for tensor in rec.inputs:
            if tensor.trainable and tensor.name is not None and tensor.name not in out:
                g = grads.get(id(tensor))
                if g is not None:
                    out[tensor.name] = Tensor(g)
    return out


# ---------------------------------------------------------------------------
# kernels


def _batched(arr):
    """View a (H,W,C) array as (1,H,W,C); report whether a batch axis existed."""
    if arr.ndim == 3:
        return arr[None], False
    if arr.ndim == 4:
        return arr, True
    raise ShapeMismatchError(f"expected rank 3 or 4, got shape {arr.shape}")


def _im2col(x, k, stride):
    """(B,H,W,C) -> (B,Ho,Wo, k*k*C) patch matrix; single strided copy."""
    b, h, w, c = x.shape
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sh, sw, sc = x.strides
    view = as_strided(
        x,
        shape=(b, ho, wo, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    return np.ascontiguousarray(view).reshape(b, ho, wo, k * k * c)


def conv2d(x, w, b, stride=1, pad=0, tape=None):
    """2-D cross-correlation with zero padding and bias.

    x: (H,W,Cin) or (B,H,W,Cin); w: (k,k,Cin,Cout); b: (Cout,).
    Output extent: floor((H + 2*pad - k) / stride) + 1.
    """
    xd, had_batch = _batched(x.data)
    wd, bd = w.data, b.data
    if wd.ndim != 4 or wd.shape[0] != wd.shape[1]:
        raise ShapeMismatchError(f"kernel must be (k,k,Cin,Cout), got {wd.shape}")
    k, _, cin, cout = wd.shape
    if bd.shape != (cout,):
        raise ShapeMismatchError(f"bias must be ({cout},), got {bd.shape}")
    if xd.shape[3] != cin:
        raise ShapeMismatchError(
            f"input channels {xd.shape[3]} != kernel channels {cin}"
        )
    bsz, h, wdt, _ = xd.shape
    if k < 1 or stride < 1 or h + 2 * pad < k or wdt + 2 * pad < k:
        raise InvalidHyperparameterError(
            f"conv2d: k={k}, stride={stride}, pad={pad} invalid for input {h}x{wdt}"
        )

    if pad:
        xp = np.zeros((bsz, h + 2 * pad, wdt + 2 * pad, cin), dtype=xd.dtype)
        xp[:, pad : pad + h, pad : pad + wdt] = xd
    else:
        xp = xd
    cols = _im2col(xp, k, stride)  # (B,Ho,Wo,k*k*Cin)
    ho, wo = cols.shape[1], cols.shape[2]
    w2 = wd.reshape(k * k * cin, cout)
    # forward accumulates in float64 so binary32 outputs are correctly rounded
    y = cols.reshape(-1, k * k * cin).astype(np.float64) @ w2.astype(np.float64)
    y += bd
    y = y.astype(xd.dtype).reshape(bsz, ho, wo, cout)
    out = Tensor(y if had_batch else y[0])

    if tape is not None:

        def bwd(g, needs):
            g4 = g if g.ndim == 4 else g[None]
            g2 = g4.reshape(-1, cout)
            gw = gb = gx = None
            if needs[1]:
                gw = (cols.reshape(-1, k * k * cin).T @ g2).reshape(wd.shape)
            if needs[2]:
                gb = g2.sum(axis=0)
            if needs[0]:
                gxp = _conv_backward_data(g4, wd, stride, xp.shape)
                gx = gxp[:, pad : pad + h, pad : pad + wdt] if pad else gxp
                if not had_batch:
                    gx = gx[0]
            return gx, gw, gb

        tape.record("conv2d", (x, w, b), out, bwd)
    return out


def _conv_backward_data(g, w, stride, xp_shape):
    """Gradient w.r.t. the padded conv input: full correlation with the
    spatially flipped, channel-transposed kernel (stride handled by
    zero-dilating the output gradient)."""
    k = w.shape[0]
    bsz, hp, wp, cin = xp_shape
    cout = w.shape[3]
    _, ho, wo, _ = g.shape
    if stride > 1:
        gd = np.zeros((bsz, (ho - 1) * stride + 1, (wo - 1) * stride + 1, cout), g.dtype)
        gd[:, ::stride, ::stride] = g
    else:
        gd = g
    # zero canvas sized so the stride-1 correlation lands exactly on (hp, wp);
    # rows a non-exact stride never touched stay zero at the canvas edge
    gp = np.zeros((bsz, hp + k - 1, wp + k - 1, cout), dtype=g.dtype)
    gp[:, k - 1 : k - 1 + gd.shape[1], k - 1 : k - 1 + gd.shape[2]] = gd
    w_rot = np.ascontiguousarray(w[::-1, ::-1].transpose(0, 1, 3, 2))  # (k,k,Cout,Cin)
    cols = _im2col(gp, k, 1)
    gx = cols.reshape(-1, k * k * cout) @ w_rot.reshape(k * k * cout, cin)
    return gx.reshape(bsz, hp, wp, cin)


def maxpool2d(x, k, stride, tape=None):
    """Per-channel k x k max pooling; output extent floor((H-k)/stride)+1."""
    xd, had_batch = _batched(x.data)
    bsz, h, w, c = xd.shape
    if k < 1 or stride < 1 or h < k or w < k:
        raise InvalidHyperparameterError(
            f"maxpool2d: k={k}, stride={stride} invalid for input {h}x{w}"
        )
    ho = (h - k) // stride + 1
    wo = (w - k) // stride + 1
    sb, sh, sw, sc = xd.strides
    view = as_strided(
        xd,
        shape=(bsz, ho, wo, k, k, c),
        strides=(sb, sh * stride, sw * stride, sh, sw, sc),
        writeable=False,
    )
    windows = np.ascontiguousarray(view).reshape(bsz, ho, wo, k * k, c)
    idx = windows.argmax(axis=3)  # first max wins on ties
    y = np.take_along_axis(windows, idx[:, :, :, None, :], axis=3)[:, :, :, 0, :]
    out = Tensor(y if had_batch else y[0])

    if tape is not None:

        def bwd(g, needs):
            g4 = g if g.ndim == 4 else g[None]
            dx = np.zeros_like(xd)
            bi, oi, oj, ci = np.indices(idx.shape, sparse=False)
            rows = oi * stride + idx // k
            cols_ = oj * stride + idx % k
            np.add.at(dx, (bi, rows, cols_, ci), g4)
            return (dx if had_batch else dx[0],)

        tape.record("maxpool2d", (x,), out, bwd)
    return out


def relu(x, tape=None):
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = x.data > 0
    out = Tensor(np.where(mask, x.data, 0))

    if tape is not None:

        def bwd(g, needs):
            return (g * mask,)

        tape.record("relu", (x,), out, bwd)
    return out


def pointwise_dense(x, w, b, tape=None):
    """Affine map over the last axis at every leading position."""
    wd, bd = w.data, b.data
    if wd.ndim != 2:
        raise ShapeMismatchError(f"weight must be 2-D, got {wd.shape}")
    cin, cout = wd.shape
    if x.data.shape[-1] != cin:
        raise ShapeMismatchError(
            f"input last extent {x.data.shape[-1]} != weight rows {cin}"
        )
    if bd.shape != (cout,):
        raise ShapeMismatchError(f"bias must be ({cout},), got {bd.shape}")
    y = (x.data.astype(np.float64) @ wd.astype(np.float64) + bd).astype(x.data.dtype)
    out = Tensor(y)

    if tape is not None:
        lead = x.data.shape[:-1]

        def bwd(g, needs):
            g2 = g.reshape(-1, cout)
            gx = gw = gb = None
            if needs[0]:
                gx = (g2 @ wd.T).reshape(lead + (cin,))
            if needs[1]:
                gw = x.data.reshape(-1, cin).T @ g2
            if needs[2]:
                gb = g2.sum(axis=0)
            return gx, gw, gb

        tape.record("pointwise_dense", (x, w, b), out, bwd)
    return out


def global_avg_pool(x, tape=None):
    """Spatial mean per channel: (H,W,C) -> (C,), batched likewise."""
    xd, had_batch = _batched(x.data)
    _, h, w, _ = xd.shape
    y = xd.mean(axis=(1, 2))
    out = Tensor(y if had_batch else y[0])

    if tape is not None:

        def bwd(g, needs):
            g2 = g if g.ndim == 2 else g[None]
            dx = np.broadcast_to(
                g2[:, None, None, :] / (h * w), xd.shape
            ).astype(xd.dtype, copy=True)
            return (dx if had_batch else dx[0],)

        tape.record("global_avg_pool", (x,), out, bwd)
    return out


def dropout(x, rate, rng, training, tape=None):
    """Inverted dropout: survivors scaled by 1/(1-rate); identity in eval."""
    if not 0 <= rate < 1:
        raise InvalidRateError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0:
        return x
    keep = (rng.random(x.data.shape) >= rate).astype(x.data.dtype)
    scale = x.data.dtype.type(1.0 / (1.0 - rate))
    out = Tensor(x.data * keep * scale)

    if tape is not None:

        def bwd(g, needs):
            return (g * keep * scale,)

        tape.record("dropout", (x,), out, bwd)
    return out


def softmax(x, tape=None):
    """Row softmax over the last axis with max-shift for stability."""
    xd = x.data
    m = xd.max(axis=-1, keepdims=True)
    e = np.exp(xd - m)
    y = e / e.sum(axis=-1, keepdims=True)
    out = Tensor(y)

    if tape is not None:

        def bwd(g, needs):
            dot = (g * y).sum(axis=-1, keepdims=True)
            return (y * (g - dot),)

        tape.record("softmax", (x,), out, bwd)
    return out


def cross_entropy(probs, labels, tape=None):
    """Mean over the batch of -sum(label * ln(max(prob, 1e-12)))."""
    pd, ld = probs.data, labels.data
    if pd.shape != ld.shape or pd.ndim != 2:
        raise ShapeMismatchError(
            f"probs {pd.shape} and one-hot labels {ld.shape} must both be (B,C)"
        )
    bsz = pd.shape[0]
    clamped = np.maximum(pd, CE_CLAMP)
    loss = -(ld * np.log(clamped)).sum() / bsz
    out = Tensor(np.asarray(loss, dtype=pd.dtype))

    if tape is not None:

        def bwd(g, needs):
            live = pd > CE_CLAMP  # clamp zone has zero slope
            dp = np.where(live, -ld / clamped, 0) * (g / bsz)
            return dp, None

        tape.record("cross_entropy", (probs, labels), out, bwd)
    return out


def reshape(x, shape, tape=None):
    old = x.data.shape
    out = Tensor(x.data.reshape(shape))

    if tape is not None:

        def bwd(g, needs):
            return (g.reshape(old),)

        tape.record("reshape", (x,), out, bwd)
    return out


# ---------------------------------------------------------------------------
# verification


def grad_check(fn, params, step=1e-6):
    """Compare analytic gradients against central finite differences.

    fn(tensors, tape) must build a scalar loss from the named Tensors it is
    given. params maps name -> float array; everything runs in float64.
    Returns the max over all elements of
    |analytic - numeric| / max(|analytic|, |numeric|, 1e-8).
    """
    tensors = {
        k: Tensor(np.asarray(v, dtype=np.float64), name=k, trainable=True)
        for k, v in params.items()
    }
    tape = Tape()
    loss = fn(tensors, tape)
    analytic = backward(tape, loss)

    def eval_loss():
        return float(fn(tensors, None).data)

    worst = 0.0
    for name, t in tensors.items():
        a = analytic.get(name)
        a_data = a.data if a is not None else np.zeros_like(t.data)
        flat = t.data.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            up = eval_loss()
            flat[i] = orig - step
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2 * step)
            an = float(a_data.reshape(-1)[i])
            denom = max(abs(an), abs(numeric), 1e-8)
            worst = max(worst, abs(an - numeric) / denom)
    return worst
