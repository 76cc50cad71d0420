"""Layer primitives for the grading network: forward and backward passes.

Plain numpy arrays are the tensor currency. A single feature map is
``(length, channels)``; a leading batch axis ``(batch, length, channels)``
is accepted everywhere and the output rank mirrors the input rank.
Double precision is used throughout; gradient checks rely on it.

Convolution is implemented as cross-correlation (no filter flip), the
usual neural-network convention. The backward passes are defined
consistently with that orientation, so the finite-difference checker in
this module is the arbiter of correctness.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from numpy.lib.stride_tricks import as_strided, sliding_window_view

PAD_SAME = "same"
PAD_VALID = "valid"

TRAIN = "train"
INFER = "infer"


# ---------------------------------------------------------------------------
# parameter containers
# ---------------------------------------------------------------------------

@dataclass
class ConvFilterBank:
    """A bank of 1D FIR filters with one bias per output channel.

    ``weights`` has shape (taps, in_channels, out_channels); ``bias`` has
    shape (out_channels,).
    """

    weights: np.ndarray
    bias: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.bias = np.asarray(self.bias, dtype=np.float64)
        if self.weights.ndim != 3:
            raise ValueError(
                f"filter weights must be (taps, in_channels, out_channels), "
                f"got shape {self.weights.shape}"
            )
        if self.bias.shape != (self.weights.shape[2],):
            raise ValueError(
                f"bias must have one entry per output channel "
                f"({self.weights.shape[2]}), got shape {self.bias.shape}"
            )

    @property
    def taps(self) -> int:
        return self.weights.shape[0]

    @property
    def in_channels(self) -> int:
        return self.weights.shape[1]

    @property
    def out_channels(self) -> int:
        return self.weights.shape[2]


@dataclass
class BatchNormState:
    """Per-feature-map scale/offset plus running statistics for inference.

    ``momentum`` is the weight of the current batch in the running-stat
    update; ``batches_tracked`` counts train-mode calls so inference can
    refuse to run on never-initialized statistics.
    """

    scale: np.ndarray
    offset: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5
    momentum: float = 0.1
    batches_tracked: int = 0

    def __post_init__(self):
        self.scale = np.asarray(self.scale, dtype=np.float64)
        self.offset = np.asarray(self.offset, dtype=np.float64)
        self.running_mean = np.asarray(self.running_mean, dtype=np.float64)
        self.running_var = np.asarray(self.running_var, dtype=np.float64)
        n = self.scale.shape
        for name in ("offset", "running_mean", "running_var"):
            if getattr(self, name).shape != n:
                raise ValueError(f"batch-norm '{name}' shape {getattr(self, name).shape} "
                                 f"does not match scale shape {n}")
        if np.any(self.running_var < 0):
            raise ValueError("running variance must be nonnegative")
        if not 0 < self.momentum <= 1:
            raise ValueError(f"momentum must be in (0, 1], got {self.momentum}")

    @property
    def num_features(self) -> int:
        return self.scale.shape[0]

    @classmethod
    def identity(cls, num_features: int, epsilon: float = 1e-5,
                 momentum: float = 0.1) -> "BatchNormState":
        return cls(
            scale=np.ones(num_features),
            offset=np.zeros(num_features),
            running_mean=np.zeros(num_features),
            running_var=np.ones(num_features),
            epsilon=epsilon,
            momentum=momentum,
        )


def _as_batched(x: np.ndarray, name: str = "input") -> tuple[np.ndarray, bool]:
    """Promote (L, C) to (1, L, C); report whether a squeeze is owed."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x[None], True
    if x.ndim == 3:
        return x, False
    raise ValueError(f"{name} must be (length, channels) or "
                     f"(batch, length, channels), got shape {x.shape}")


# ---------------------------------------------------------------------------
# shape algebra
# ---------------------------------------------------------------------------

def conv_output_length(length: int, taps: int, padding: str) -> int:
    if padding == PAD_SAME:
        return length
    if padding == PAD_VALID:
        if length < taps:
            raise ValueError(f"input length {length} shorter than filter "
                             f"length {taps} for valid convolution")
        return length - taps + 1
    raise ValueError(f"unknown padding mode {padding!r}")


def pool_output_length(length: int, window: int, stride: int) -> int:
    if window < 1 or stride < 1:
        raise ValueError(f"pool window and stride must be >= 1, "
                         f"got window={window} stride={stride}")
    if length < window:
        raise ValueError(f"segment too short for pooling chain: "
                         f"length {length} < window {window}")
    return (length - window) // stride + 1


def _same_pad(taps: int) -> tuple[int, int]:
    lo = (taps - 1) // 2
    return lo, taps - 1 - lo


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------

# im2col scratch tiles sized to stay cache-resident: the materialized
# window matrix is the dominant memory traffic otherwise
_TILE_BYTES = 1 << 18


def _window_rows(src: np.ndarray, taps: int, start: int,
                 n_rows: int) -> np.ndarray:
    """View of n_rows overlapping windows of a C-contiguous (length, ch)
    array, flattened to (n_rows, taps * ch); window i spans rows
    start + i .. start + i + taps - 1 (contiguous memory runs)."""
    ch = src.shape[1]
    s0, s1 = src.strides
    return as_strided(src[start:], (n_rows, taps * ch), (s0, s1))


def _windows_matmul(src: np.ndarray, taps: int, wmat: np.ndarray,
                    out: np.ndarray) -> None:
    """out[i] = flattened_window_i(src) @ wmat, tiled through a scratch
    buffer so the window copies never leave cache."""
    n_rows, width = out.shape[0], taps * src.shape[1]
    rows = max(32, _TILE_BYTES // (width * 8))
    buf = np.empty((min(rows, n_rows), width))
    for lo in range(0, n_rows, rows):
        hi = min(lo + rows, n_rows)
        np.copyto(buf[:hi - lo], _window_rows(src, taps, lo, hi - lo))
        np.matmul(buf[:hi - lo], wmat, out=out[lo:hi])


def _windows_t_matmul(src: np.ndarray, taps: int, g: np.ndarray,
                      accum: np.ndarray) -> None:
    """accum += flattened_windows(src).T @ g, tiled as above."""
    n_rows, width = g.shape[0], taps * src.shape[1]
    rows = max(32, _TILE_BYTES // (width * 8))
    buf = np.empty((min(rows, n_rows), width))
    for lo in range(0, n_rows, rows):
        hi = min(lo + rows, n_rows)
        np.copyto(buf[:hi - lo], _window_rows(src, taps, lo, hi - lo))
        accum += buf[:hi - lo].T @ g[lo:hi]


def conv1d_forward(x: np.ndarray, bank: ConvFilterBank,
                   padding: str = PAD_SAME) -> np.ndarray:
    """Cross-correlate each output channel's filters with the input.

    y[l, o] = bias[o] + sum_{t, c} x_padded[l + t, c] * weights[t, c, o]
    """
    x3, squeeze = _as_batched(x)
    batch, length, cin = x3.shape
    if cin != bank.in_channels:
        raise ValueError(f"input has {cin} channels but filter bank "
                         f"expects {bank.in_channels}")
    taps = bank.taps
    out_len = conv_output_length(length, taps, padding)
    if padding == PAD_SAME:
        lo, hi = _same_pad(taps)
        xp = np.pad(x3, ((0, 0), (lo, hi), (0, 0)))
    else:
        xp = np.ascontiguousarray(x3)

    # weights are (taps, cin, cout) row-major: the (taps * cin) window
    # axis multiplies them with a plain reshape
    wmat = bank.weights.reshape(taps * cin, bank.out_channels)
    y = np.empty((batch, out_len, bank.out_channels))
    for b in range(batch):
        _windows_matmul(xp[b], taps, wmat, y[b])
    y += bank.bias
    return y[0] if squeeze else y


def conv1d_backward(x: np.ndarray, bank: ConvFilterBank, upstream: np.ndarray,
                    padding: str = PAD_SAME,
                    need_input_grad: bool = True,
                    ) -> tuple[np.ndarray | None, np.ndarray, np.ndarray]:
    """Gradients of a scalar loss through :func:`conv1d_forward`.

    Returns ``(input_grad, weight_grad, bias_grad)`` with the same shapes
    as ``x``, ``bank.weights`` and ``bank.bias``. ``need_input_grad=False``
    skips the input gradient (first-layer optimization) and returns None
    in its place.
    """
    x3, squeeze = _as_batched(x)
    g3, gsq = _as_batched(upstream, "upstream gradient")
    batch, length, cin = x3.shape
    if cin != bank.in_channels:
        raise ValueError(f"input has {cin} channels but filter bank "
                         f"expects {bank.in_channels}")
    taps, cout = bank.taps, bank.out_channels
    out_len = conv_output_length(length, taps, padding)
    if g3.shape != (batch, out_len, cout):
        raise ValueError(f"upstream gradient shape {upstream.shape} does not "
                         f"match forward output ({out_len}, {cout})")
    if squeeze != gsq:
        raise ValueError("input and upstream gradient disagree on batching")

    if padding == PAD_SAME:
        lo, hi = _same_pad(taps)
        xp = np.pad(x3, ((0, 0), (lo, hi), (0, 0)))
    else:
        lo, hi = 0, 0
        xp = np.ascontiguousarray(x3)

    bias_grad = np.einsum("lc->c", g3.reshape(-1, cout))

    # weight grad: correlate input windows with the upstream gradient
    wg_flat = np.zeros((taps * cin, cout))
    for b in range(batch):
        _windows_t_matmul(xp[b], taps, g3[b], wg_flat)
    weight_grad = wg_flat.reshape(taps, cin, cout)

    if not need_input_grad:
        return None, weight_grad, bias_grad

    # input grad: full correlation of the upstream gradient with the
    # tap-reversed filters; starting the window walk at the left padding
    # width crops the same-padding margin without materializing it
    wrev = bank.weights[::-1].transpose(0, 2, 1).reshape(taps * cout, cin)
    wrev = np.ascontiguousarray(wrev)
    gpad = np.pad(g3, ((0, 0), (taps - 1, taps - 1), (0, 0)))
    input_grad = np.empty((batch, length, cin))
    for b in range(batch):
        _windows_matmul(gpad[b][lo:], taps, wrev, input_grad[b])
    return (input_grad[0] if squeeze else input_grad), weight_grad, bias_grad


# ---------------------------------------------------------------------------
# activations
# ---------------------------------------------------------------------------

def relu(x: np.ndarray, inplace: bool = False) -> np.ndarray:
    """max(0, x): negative values become zero, positive pass through.

    ``inplace=True`` overwrites x (callers that own the buffer); the sign
    pattern relu_backward needs survives either way.
    """
    x = np.asarray(x, dtype=np.float64)
    return np.maximum(x, 0.0, out=x if inplace else None)


def relu_backward(x: np.ndarray, upstream: np.ndarray,
                  inplace: bool = False) -> np.ndarray:
    """Pass the gradient where x > 0; zero elsewhere (including x == 0)."""
    x = np.asarray(x, dtype=np.float64)
    if x.shape != np.shape(upstream):
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} "
                         f"does not match input shape {x.shape}")
    if inplace:
        upstream *= x > 0
        return upstream
    return np.where(x > 0, upstream, 0.0)


# ---------------------------------------------------------------------------
# pooling
# ---------------------------------------------------------------------------

def pool1d(x: np.ndarray, window: int, stride: int, mode: str) -> np.ndarray:
    """Windowed max or average over the length axis, per channel."""
    x3, squeeze = _as_batched(x)
    batch, length, ch = x3.shape
    out_len = pool_output_length(length, window, stride)
    if mode == "max":
        reduce_ = np.max
    elif mode == "average":
        reduce_ = np.mean
    else:
        raise ValueError(f"unknown pool mode {mode!r}")

    if window == stride and length == out_len * stride:
        y = reduce_(x3.reshape(batch, out_len, window, ch), axis=2)
    else:
        win = sliding_window_view(x3, window, axis=1)[:, ::stride]
        y = reduce_(win, axis=3)
    return y[0] if squeeze else y


def pool1d_backward(x: np.ndarray, window: int, stride: int, mode: str,
                    upstream: np.ndarray) -> np.ndarray:
    """Route gradients back through :func:`pool1d`.

    Max mode sends each window's gradient to its first maximal element;
    average mode spreads it uniformly.
    """
    x3, squeeze = _as_batched(x)
    g3, _ = _as_batched(upstream, "upstream gradient")
    batch, length, ch = x3.shape
    out_len = pool_output_length(length, window, stride)
    if g3.shape != (batch, out_len, ch):
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} does "
                         f"not match pooled shape ({out_len}, {ch})")

    if mode not in ("max", "average"):
        raise ValueError(f"unknown pool mode {mode!r}")

    exact = window == stride and length == out_len * stride
    if exact:
        # disjoint windows tile the input: scatter without accumulation
        if mode == "average":
            gx = np.repeat(g3 / window, window, axis=1)
        else:
            blocks = x3.reshape(batch, out_len, window, ch)
            arg = blocks.argmax(axis=2)  # first maximal index per window
            gblocks = np.zeros_like(blocks)
            np.put_along_axis(gblocks, arg[:, :, None, :], g3[:, :, None, :],
                              axis=2)
            gx = gblocks.reshape(batch, length, ch)
        return gx[0] if squeeze else gx

    gx = np.zeros_like(x3)
    span = (out_len - 1) * stride
    if mode == "average":
        share = g3 / window
        for j in range(window):
            gx[:, j:j + span + 1:stride] += share
    else:
        win = sliding_window_view(x3, window, axis=1)[:, ::stride]
        arg = win.argmax(axis=3)  # first maximal index per window
        for j in range(window):
            gx[:, j:j + span + 1:stride] += np.where(arg == j, g3, 0.0)
    return gx[0] if squeeze else gx


def global_average(x: np.ndarray) -> np.ndarray:
    """Collapse each feature map to its mean over the length axis."""
    x3, squeeze = _as_batched(x)
    y = x3.mean(axis=1, keepdims=True)
    return y[0] if squeeze else y


def global_average_backward(x: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    x3, squeeze = _as_batched(x)
    g3, _ = _as_batched(upstream, "upstream gradient")
    if g3.shape != (x3.shape[0], 1, x3.shape[2]):
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} does "
                         f"not match (1, {x3.shape[2]})")
    gx = np.broadcast_to(g3 / x3.shape[1], x3.shape).copy()
    return gx[0] if squeeze else gx


# ---------------------------------------------------------------------------
# batch normalization
# ---------------------------------------------------------------------------

def _feature_stats(x3: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per-feature mean and population variance over batch and length
    (einsum reductions; far faster than axis-tuple mean/var here)."""
    flat = x3.reshape(-1, x3.shape[2])
    n = flat.shape[0]
    mean = np.einsum("lc->c", flat) / n
    var = np.einsum("lc,lc->c", flat, flat) / n - mean * mean
    return mean, np.maximum(var, 0.0)


def batchnorm_forward(x: np.ndarray, state: BatchNormState,
                      mode: str = TRAIN) -> np.ndarray:
    """Normalize each feature map, then apply scale and offset.

    Train mode normalizes over all positions and batch items (population
    variance), and folds the batch statistics into the running estimates.
    Infer mode uses the running estimates and requires at least one prior
    train-mode call.
    """
    x3, squeeze = _as_batched(x)
    batch, length, ch = x3.shape
    if ch != state.num_features:
        raise ValueError(f"input has {ch} feature maps but batch-norm state "
                         f"has {state.num_features}")

    if mode == TRAIN:
        if batch * length < 2:
            raise ValueError("train-mode batch norm needs at least 2 values "
                             "per feature map")
        mean, var = _feature_stats(x3)
        m = state.momentum
        state.running_mean = (1 - m) * state.running_mean + m * mean
        state.running_var = (1 - m) * state.running_var + m * var
        state.batches_tracked += 1
    elif mode == INFER:
        if state.batches_tracked == 0:
            raise ValueError("batch-norm inference requested before any "
                             "train-mode call initialized running statistics")
        mean = state.running_mean
        var = state.running_var
    else:
        raise ValueError(f"unknown batch-norm mode {mode!r}")

    # fused: y = x * k + (offset - mean * k), k = scale / sqrt(var + eps)
    k = state.scale / np.sqrt(var + state.epsilon)
    y = x3 * k
    y += state.offset - mean * k
    return y[0] if squeeze else y


def batchnorm_backward(x: np.ndarray, state: BatchNormState,
                       upstream: np.ndarray, mode: str = TRAIN,
                       ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of train-mode batch norm w.r.t. input, scale and offset.

    Batch statistics are recomputed from the input, so no forward cache is
    required. Infer mode reduces to an affine map.
    """
    x3, squeeze = _as_batched(x)
    g3, _ = _as_batched(upstream, "upstream gradient")
    if g3.shape != x3.shape:
        raise ValueError(f"upstream gradient shape {np.shape(upstream)} does "
                         f"not match input shape {np.shape(x)}")
    batch, length, ch = x3.shape

    if mode == INFER:
        inv_std = 1.0 / np.sqrt(state.running_var + state.epsilon)
        xhat = (x3 - state.running_mean) * inv_std
        gx = g3 * state.scale * inv_std
        scale_grad = (g3 * xhat).sum(axis=(0, 1))
        offset_grad = g3.sum(axis=(0, 1))
        return (gx[0] if squeeze else gx), scale_grad, offset_grad

    n = batch * length
    mean, var = _feature_stats(x3)
    inv_std = 1.0 / np.sqrt(var + state.epsilon)

    flat_x = x3.reshape(n, ch)
    flat_g = g3.reshape(n, ch)
    g_sum = np.einsum("lc->c", flat_g)
    # sum of g * (x - mean) without materializing the centered input
    gxc_sum = np.einsum("lc,lc->c", flat_g, flat_x) - mean * g_sum

    scale_grad = gxc_sum * inv_std
    offset_grad = g_sum
    dvar = state.scale * gxc_sum * -0.5 * inv_std ** 3
    dmean = -state.scale * g_sum * inv_std  # the batch-centered sum is zero

    # gx = a*g + b*x + const, per feature map
    a = state.scale * inv_std
    b = dvar * (2.0 / n)
    gx = g3 * a
    gx += x3 * b
    gx += dmean / n - b * mean
    return (gx[0] if squeeze else gx), scale_grad, offset_grad


# ---------------------------------------------------------------------------
# fully connected, softmax, cross-entropy
# ---------------------------------------------------------------------------

def fully_connected(x: np.ndarray, weights: np.ndarray,
                    bias: np.ndarray) -> np.ndarray:
    """Affine map x @ W + b. x is (features,) or (batch, features)."""
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    bias = np.asarray(bias, dtype=np.float64)
    if x.shape[-1] != weights.shape[0]:
        raise ValueError(f"input has {x.shape[-1]} features but weights "
                         f"expect {weights.shape[0]}")
    if bias.shape != (weights.shape[1],):
        raise ValueError(f"bias shape {bias.shape} does not match "
                         f"{weights.shape[1]} outputs")
    return x @ weights + bias


def fully_connected_backward(x: np.ndarray, weights: np.ndarray,
                             upstream: np.ndarray,
                             ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.float64)
    weights = np.asarray(weights, dtype=np.float64)
    g = np.asarray(upstream, dtype=np.float64)
    if g.shape[-1] != weights.shape[1]:
        raise ValueError(f"upstream gradient has {g.shape[-1]} features but "
                         f"weights produce {weights.shape[1]}")
    if x.ndim == 1:
        return g @ weights.T, np.outer(x, g), g.copy()
    return g @ weights.T, x.T @ g, g.sum(axis=0)


def softmax(logits: np.ndarray) -> np.ndarray:
    """Exponentially normalize logits along the last axis (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise ValueError("softmax requires finite logits")
    e = np.exp(z - z.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def cross_entropy(probabilities: np.ndarray, true_grade) -> np.ndarray | float:
    """-log p_true with p clamped at 1e-12. Grades are 1-based."""
    p = np.asarray(probabilities, dtype=np.float64)
    grades = np.asarray(true_grade)
    n_classes = p.shape[-1]
    if np.any(grades < 1) or np.any(grades > n_classes):
        raise ValueError(f"grade out of range 1..{n_classes}: {true_grade}")
    idx = grades - 1
    if p.ndim == 1:
        picked = p[idx]
    else:
        picked = p[np.arange(p.shape[0]), idx]
    loss = -np.log(np.maximum(picked, 1e-12))
    return float(loss) if np.isscalar(true_grade) or grades.ndim == 0 else loss


def softmax_cross_entropy_grad(probabilities: np.ndarray,
                               true_grade) -> np.ndarray:
    """Gradient of cross-entropy w.r.t. the logits: p - onehot(true)."""
    p = np.asarray(probabilities, dtype=np.float64)
    grades = np.asarray(true_grade)
    n_classes = p.shape[-1]
    if np.any(grades < 1) or np.any(grades > n_classes):
        raise ValueError(f"grade out of range 1..{n_classes}: {true_grade}")
    g = p.copy()
    if p.ndim == 1:
        g[grades - 1] -= 1.0
    else:
        g[np.arange(p.shape[0]), grades - 1] -= 1.0
    return g


# ---------------------------------------------------------------------------
# finite-difference gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckReport:
    """Worst relative error between analytic and numeric gradients."""

    max_rel_error: float
    per_array: dict = field(default_factory=dict)
    threshold: float = 1e-4

    @property
    def ok(self) -> bool:
        return self.max_rel_error < self.threshold

    def __str__(self) -> str:
        detail = ", ".join(f"{k}={v:.3e}" for k, v in self.per_array.items())
        verdict = "OK" if self.ok else "FAIL"
        return (f"gradient check {verdict}: max rel error "
                f"{self.max_rel_error:.3e} (threshold {self.threshold:g}; {detail})")


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-8)
    return float(np.max(np.abs(a - n) / denom)) if a.size else 0.0


def numerical_gradient(scalar_fn: Callable[[], float], x: np.ndarray,
                       step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar_fn w.r.t. every coordinate of x.

    ``x`` is perturbed in place and restored; scalar_fn must read the
    live array.
    """
    grad = np.empty_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = scalar_fn()
        flat[i] = orig - step
        fm = scalar_fn()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def gradient_check(scalar_fn: Callable[[], float],
                   arrays: dict[str, np.ndarray],
                   analytic: dict[str, np.ndarray],
                   step: float = 1e-5,
                   threshold: float = 1e-4) -> GradCheckReport:
    """Compare analytic gradients against central finite differences.

    ``arrays`` maps names to the live parameter/input arrays that
    ``scalar_fn`` reads; ``analytic`` maps the same names to the gradients
    under test. Relative error is |a - n| / max(|a|, |n|, 1e-8), reported
    per array and as a global maximum.
    """
    errors = {}
    for name, x in arrays.items():
        numeric = numerical_gradient(scalar_fn, x, step)
        errors[name] = relative_error(analytic[name], numeric)
    worst = max(errors.values()) if errors else 0.0
    return GradCheckReport(worst, errors, threshold)
