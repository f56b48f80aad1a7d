"""Convolutional-LSTM regression network with exact reverse-mode gradients.

Two ConvLSTM layers (kernel widths 20 and 10) over a 1xW spatial strip of
feature frames, each followed by batch normalization, then dropout and a
128/32/3/1 dense head mapping the final hidden state to a gestational-age
estimate in months. Everything is float64 numpy; gradients are derived by
hand and checked against finite differences in the test suite.

Array layouts: the public API uses (B, T, C, 1, W) batches matching the
feature tensor produced by `shape_input`. Internally all math is
channels-last, (B, T, W, C), so convolutions become plain matmuls over
im2col matrices.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np
from scipy.special import expit

from .errors import ShapeError
from .tf_features import FEATURE_DIM, FeatureSequence, NormalizationStats

GATE_ORDER = ("i", "f", "g", "o")


# ---------------------------------------------------------------------------
# Parameter containers


@dataclass
class NetworkConfig:
    timesteps: int
    width: int
    in_channels: int = FEATURE_DIM
    hidden_channels: tuple[int, int] = (8, 4)
    kernel_widths: tuple[int, int] = (20, 10)
    dropout_rate: float = 0.3
    l2_lambda: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.timesteps < 1 or self.width < 1:
            raise ValueError("timesteps and width must be positive")
        if not 0.0 <= self.dropout_rate < 1.0:
            raise ValueError("dropout_rate must be in [0, 1)")

    @property
    def flatten_size(self) -> int:
        return self.hidden_channels[1] * self.width


@dataclass
class ConvLSTMLayerParams:
    """Gate-stacked kernels; axis 0 follows GATE_ORDER (i, f, g, o)."""

    w_x: np.ndarray  # (4, C_h, C_in, K)
    w_h: np.ndarray  # (4, C_h, C_h, K)
    b: np.ndarray  # (4, C_h)

    @property
    def hidden_channels(self) -> int:
        return self.w_x.shape[1]

    @property
    def in_channels(self) -> int:
        return self.w_x.shape[2]

    @property
    def kernel_width(self) -> int:
        return self.w_x.shape[3]


@dataclass
class BatchNormParams:
    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    eps: float = 1e-5
    momentum: float = 0.1


@dataclass
class DenseParams:
    """Chained affine layers; ReLU between, linear output."""

    weights: list[np.ndarray]  # each (fan_in, fan_out)
    biases: list[np.ndarray]

    @property
    def sizes(self) -> list[int]:
        return [w.shape[1] for w in self.weights]


DENSE_SIZES = (128, 32, 3, 1)


@dataclass
class ModelState:
    layer1: ConvLSTMLayerParams
    layer2: ConvLSTMLayerParams
    bn1: BatchNormParams
    bn2: BatchNormParams
    dense: DenseParams
    norm_stats: NormalizationStats | None
    config: NetworkConfig

    def clone(self) -> "ModelState":
        return copy.deepcopy(self)


def _uniform_init(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_model(
    config: NetworkConfig, norm_stats: NormalizationStats | None = None
) -> ModelState:
    """Seeded initialization: uniform(+-sqrt(1/fan_in)), zero biases,
    forget-gate bias +1."""
    rng = np.random.default_rng(config.seed)
    c_in = config.in_channels
    c1, c2 = config.hidden_channels
    k1, k2 = config.kernel_widths

    def conv_layer(ci, ch, k):
        b = np.zeros((4, ch))
        b[GATE_ORDER.index("f")] = 1.0
        return ConvLSTMLayerParams(
            w_x=_uniform_init(rng, (4, ch, ci, k), ci * k),
            w_h=_uniform_init(rng, (4, ch, ch, k), ch * k),
            b=b,
        )

    def bn_layer(ch):
        return BatchNormParams(
            gamma=np.ones(ch),
            beta=np.zeros(ch),
            running_mean=np.zeros(ch),
            running_var=np.ones(ch),
        )

    sizes = [config.flatten_size, *DENSE_SIZES]
    dense = DenseParams(
        weights=[
            _uniform_init(rng, (sizes[i], sizes[i + 1]), sizes[i])
            for i in range(len(sizes) - 1)
        ],
        biases=[np.zeros(sizes[i + 1]) for i in range(len(sizes) - 1)],
    )
    return ModelState(
        layer1=conv_layer(c_in, c1, k1),
        layer2=conv_layer(c1, c2, k2),
        bn1=bn_layer(c1),
        bn2=bn_layer(c2),
        dense=dense,
        norm_stats=norm_stats,
        config=config,
    )


def named_parameters(state: ModelState) -> dict[str, np.ndarray]:
    """Trainable parameters as name -> array views (running stats excluded)."""
    params = {}
    for name, layer in (("layer1", state.layer1), ("layer2", state.layer2)):
        params[f"{name}/w_x"] = layer.w_x
        params[f"{name}/w_h"] = layer.w_h
        params[f"{name}/b"] = layer.b
    for name, bn in (("bn1", state.bn1), ("bn2", state.bn2)):
        params[f"{name}/gamma"] = bn.gamma
        params[f"{name}/beta"] = bn.beta
    for i, (w, b) in enumerate(zip(state.dense.weights, state.dense.biases)):
        params[f"dense/w{i}"] = w
        params[f"dense/b{i}"] = b
    return params


# ---------------------------------------------------------------------------
# Convolution primitives (channels-last, "same" zero padding, stride 1)


def _pad_width(x: np.ndarray, left: int, right: int) -> np.ndarray:
    """Zero-pad the width axis of a (..., W, C) array."""
    *lead, w, c = x.shape
    xp = np.zeros((*lead, w + left + right, c))
    xp[..., left : left + w, :] = x
    return xp


def _sliding_cols(xp: np.ndarray, k: int) -> np.ndarray:
    """Zero-copy patch view of a padded (..., W+K-1, C) array.

    Returns a strided (..., W, K*C) view whose element (w, j*C + c) is
    xp[w + j, c]: a width-K patch is one contiguous run of the flattened
    (width, channel) axis, so no gather is needed.
    """
    c = xp.shape[-1]
    flat = xp.reshape(*xp.shape[:-2], -1)
    win = np.lib.stride_tricks.sliding_window_view(flat, k * c, axis=-1)
    return win[..., ::c, :]


def _im2col(x: np.ndarray, k: int) -> np.ndarray:
    """Materialized "same"-padding patch matrix, (..., W, C) -> (..., W, K*C)."""
    pl = (k - 1) // 2
    return np.ascontiguousarray(_sliding_cols(_pad_width(x, pl, k - 1 - pl), k))


def _conv_same(x: np.ndarray, w_mat: np.ndarray, k: int) -> np.ndarray:
    """Width-K "same" cross-correlation as a single matmul.

    x (..., W, C_i), w_mat (K*C_i, C_o) from `_gate_matrix`. The patch view
    is materialized first so the product runs as one contiguous gemm.
    """
    cols = _im2col(x, k)
    y = cols.reshape(-1, cols.shape[-1]) @ w_mat
    return y.reshape(*x.shape[:-1], w_mat.shape[1])


def _conv_same_transpose(dy: np.ndarray, w_flip: np.ndarray, k: int) -> np.ndarray:
    """Adjoint of `_conv_same` wrt its input, as a single matmul.

    dy (..., W, C_o), w_flip (K*C_o, C_i) from `_flip_matrix`; padding sides
    swap relative to the forward pass.
    """
    pl = (k - 1) // 2
    view = _sliding_cols(_pad_width(dy, k - 1 - pl, pl), k)
    cols = np.ascontiguousarray(view)
    dx = cols.reshape(-1, cols.shape[-1]) @ w_flip
    return dx.reshape(*dy.shape[:-1], w_flip.shape[1])


def _gate_matrix(w: np.ndarray) -> np.ndarray:
    """(4, C_h, C_i, K) kernel stack -> (K*C_i, 4*C_h) matmul operand.

    Row (j*C_i + c) and column (gate*C_h + o) hold w[gate, o, c, j].
    """
    four, ch, ci, k = w.shape
    return np.ascontiguousarray(w.transpose(3, 2, 0, 1)).reshape(k * ci, four * ch)


def _gate_matrix_grad(dmat: np.ndarray, ch: int, ci: int, k: int) -> np.ndarray:
    return dmat.reshape(k, ci, 4, ch).transpose(2, 3, 1, 0)


def _flip_matrix(w_mat: np.ndarray, ci: int, k: int) -> np.ndarray:
    """Tap-reversed, channel-transposed operand for `_conv_same_transpose`."""
    co = w_mat.shape[1]
    flipped = w_mat.reshape(k, ci, co)[::-1].transpose(0, 2, 1)
    return np.ascontiguousarray(flipped).reshape(k * co, ci)


def _sigmoid(x: np.ndarray, out: np.ndarray | None = None) -> np.ndarray:
    return expit(x, out) if out is not None else expit(x)


# ---------------------------------------------------------------------------
# ConvLSTM cell and layer


@dataclass
class _LayerCache:
    gates: np.ndarray  # (B, T, W, 4*C_h) post-activation, gate-major slices
    c_seq: np.ndarray  # (B, T, W, C_h)
    h_seq: np.ndarray  # (B, T, W, C_h)
    tanh_c: np.ndarray  # (B, T, W, C_h)
    cols_x: np.ndarray  # (B*T, W, K*C_in) input patches, reused for dw_x
    cols_h: np.ndarray  # (T, B, W, K*C_h) shifted hidden patches, for dw_h


def _cell_step(ax_t, h_prev, c_prev, wh_mat, k, ch):
    """One recurrence step; ax_t already holds input conv + bias."""
    a = ax_t + _im2col(h_prev, k) @ wh_mat
    i = _sigmoid(a[..., :ch])
    f = _sigmoid(a[..., ch : 2 * ch])
    g = np.tanh(a[..., 2 * ch : 3 * ch])
    o = _sigmoid(a[..., 3 * ch :])
    c_t = f * c_prev + i * g
    h_t = o * np.tanh(c_t)
    gates = np.concatenate([i, f, g, o], axis=-1)
    return h_t, c_t, gates


def _layer_forward(x_seq: np.ndarray, p: ConvLSTMLayerParams, with_cache: bool):
    """x_seq (B, T, W, C_in) -> hidden sequence (B, T, W, C_h).

    The pre-activation buffer doubles as the gate cache: activations are
    applied in place once the recurrent term has been added.
    """
    b, t, w, ci = x_seq.shape
    ch, k = p.hidden_channels, p.kernel_width
    wx_mat = _gate_matrix(p.w_x)
    wh_mat = _gate_matrix(p.w_h)
    bias = p.b.reshape(4 * ch)

    # input-to-state convolution for the whole sequence in one matmul
    cols_x = _im2col(x_seq.reshape(b * t, w, ci), k)
    gates = (cols_x @ wx_mat).reshape(b, t, w, 4 * ch)
    gates += bias

    h_seq = np.empty((b, t, w, ch))
    c_seq = np.empty((b, t, w, ch))
    tanh_c = np.empty((b, t, w, ch))
    pl = (k - 1) // 2
    hp = np.zeros((b, w + k - 1, ch))  # padded previous hidden state
    h_win = hp[:, pl : pl + w, :]
    cols_view = _sliding_cols(hp, k)  # view tracks in-place updates of hp
    # kept for the recurrent-kernel gradient when training; time-major so
    # each step is a contiguous gemm operand
    cols_h_seq = np.empty((t, b, w, k * ch)) if with_cache else None
    cols_h = np.empty((b, w, k * ch))
    rec = np.empty((b, w, 4 * ch))
    rec2d = rec.reshape(b * w, 4 * ch)
    for step in range(t):
        a = gates[:, step]
        if with_cache:
            cols_h = cols_h_seq[step]
        np.copyto(cols_h, cols_view)
        np.matmul(cols_h.reshape(b * w, k * ch), wh_mat, out=rec2d)
        a += rec
        expit(a[..., : 2 * ch], out=a[..., : 2 * ch])  # i, f
        np.tanh(a[..., 2 * ch : 3 * ch], out=a[..., 2 * ch : 3 * ch])  # g
        expit(a[..., 3 * ch :], out=a[..., 3 * ch :])  # o
        c = c_seq[:, step]
        np.multiply(a[..., ch : 2 * ch], c_seq[:, step - 1] if step else 0.0, out=c)
        c += a[..., :ch] * a[..., 2 * ch : 3 * ch]
        tc = tanh_c[:, step]
        np.tanh(c, out=tc)
        np.multiply(a[..., 3 * ch :], tc, out=h_seq[:, step])
        np.copyto(h_win, h_seq[:, step])
    cache = (
        _LayerCache(
            gates=gates,
            c_seq=c_seq,
            h_seq=h_seq,
            tanh_c=tanh_c,
            cols_x=cols_x,
            cols_h=cols_h_seq,
        )
        if with_cache
        else None
    )
    return h_seq, cache


def _layer_backward(
    x_seq: np.ndarray,
    p: ConvLSTMLayerParams,
    cache: _LayerCache,
    dh_seq: np.ndarray,
    need_dx: bool = True,
):
    """Backprop through time; returns (dx_seq, dw_x, dw_h, db).

    dx_seq is None when need_dx is False (first layer: the input is data).
    """
    b, t, w, ci = x_seq.shape
    ch, k = p.hidden_channels, p.kernel_width
    wx_mat = _gate_matrix(p.w_x)
    wh_mat = _gate_matrix(p.w_h)

    # transposed recurrent conv: small gemm, then overlap-add over taps
    pl = (k - 1) // 2
    scatter = np.empty((b, w, k * ch))
    scat4 = scatter.reshape(b, w, k, ch)
    dhp = np.empty((b, w + k - 1, ch))

    da_seq = np.empty((b, t, w, 4 * ch))
    dh = np.empty((b, w, ch))
    dc = np.zeros((b, w, ch))
    zeros = np.zeros((b, w, ch))
    dh_next = np.zeros((b, w, ch))
    for step in reversed(range(t)):
        g = cache.gates[:, step]
        i, f = g[..., :ch], g[..., ch : 2 * ch]
        gg, o = g[..., 2 * ch : 3 * ch], g[..., 3 * ch :]
        c_prev = cache.c_seq[:, step - 1] if step > 0 else zeros
        tc = cache.tanh_c[:, step]

        np.copyto(dh, dh_seq[:, step])
        dh += dh_next
        do = dh * tc
        dc += dh * o * (1.0 - tc * tc)  # dc carries f * dc from the later step

        da = da_seq[:, step]
        np.multiply(dc * gg, i * (1.0 - i), out=da[..., :ch])
        np.multiply(dc * c_prev, f * (1.0 - f), out=da[..., ch : 2 * ch])
        np.multiply(dc * i, 1.0 - gg * gg, out=da[..., 2 * ch : 3 * ch])
        np.multiply(do, o * (1.0 - o), out=da[..., 3 * ch :])

        dc *= f
        np.matmul(
            da.reshape(b * w, 4 * ch), wh_mat.T, out=scatter.reshape(b * w, k * ch)
        )
        dhp[:] = 0.0
        for j in range(k):
            dhp[:, j : j + w, :] += scat4[:, :, j, :]
        np.copyto(dh_next, dhp[:, pl : pl + w, :])

    # weight gradients reuse the patch matrices cached by the forward pass
    da_flat = da_seq.reshape(b * t * w, 4 * ch)
    da_tmajor = np.ascontiguousarray(da_seq.transpose(1, 0, 2, 3))
    dwh_mat = cache.cols_h.reshape(t * b * w, ch * k).T @ da_tmajor.reshape(
        t * b * w, 4 * ch
    )
    dwx_mat = cache.cols_x.reshape(b * t * w, ci * k).T @ da_flat
    dx_seq = None
    if need_dx:
        dx_seq = _conv_same_transpose(
            da_seq.reshape(b * t, w, 4 * ch), _flip_matrix(wx_mat, ci, k), k
        ).reshape(b, t, w, ci)
    db = da_seq.sum(axis=(0, 1, 2)).reshape(4, ch)
    return (
        dx_seq,
        _gate_matrix_grad(dwx_mat, ch, ci, k),
        _gate_matrix_grad(dwh_mat, ch, ch, k),
        db,
    )


def convlstm_cell_forward(x_t, h_prev, c_prev, p: ConvLSTMLayerParams):
    """Single cell step in the public (B, C, 1, W) layout.

    Accepts unbatched (C, 1, W) inputs as well; returns (h_t, c_t) with the
    input's layout.
    """
    unbatched = np.asarray(x_t).ndim == 3
    x = np.asarray(x_t, dtype=np.float64)
    h = np.asarray(h_prev, dtype=np.float64)
    c = np.asarray(c_prev, dtype=np.float64)
    if unbatched:
        x, h, c = x[None], h[None], c[None]
    if x.shape[1] != p.in_channels or h.shape[1] != p.hidden_channels:
        raise ShapeError(
            f"cell input channels {x.shape[1]}/{h.shape[1]} do not match params"
        )
    if x.shape[2] != 1 or x.shape[3] != h.shape[3]:
        raise ShapeError("cell spatial shapes inconsistent")

    x_cl = x[:, :, 0].transpose(0, 2, 1)  # (B, W, C_in)
    h_cl = h[:, :, 0].transpose(0, 2, 1)
    c_cl = c[:, :, 0].transpose(0, 2, 1)
    ch, k = p.hidden_channels, p.kernel_width
    ax = _im2col(x_cl, k) @ _gate_matrix(p.w_x) + p.b.reshape(4 * ch)
    h_t, c_t, _ = _cell_step(ax, h_cl, c_cl, _gate_matrix(p.w_h), k, ch)
    h_out = h_t.transpose(0, 2, 1)[:, :, None, :]
    c_out = c_t.transpose(0, 2, 1)[:, :, None, :]
    if unbatched:
        h_out, c_out = h_out[0], c_out[0]
    return h_out, c_out


def convlstm_layer_forward(x_seq, p: ConvLSTMLayerParams):
    """Layer unroll in the public layout.

    x_seq: (T, C_in, 1, W) or (B, T, C_in, 1, W); zero initial states.
    Returns (hidden_seq, (h_T, c_T)) in the matching layout.
    """
    unbatched = np.asarray(x_seq).ndim == 4
    x = np.asarray(x_seq, dtype=np.float64)
    if unbatched:
        x = x[None]
    if x.shape[2] != p.in_channels or x.shape[3] != 1:
        raise ShapeError(f"layer input shape {x.shape} does not match params")
    x_cl = x[:, :, :, 0].transpose(0, 1, 3, 2)  # (B, T, W, C)
    h_seq, cache = _layer_forward(x_cl, p, with_cache=True)
    h_out = h_seq.transpose(0, 1, 3, 2)[:, :, :, None, :]
    c_last = cache.c_seq[:, -1].transpose(0, 2, 1)[:, :, None, :]
    h_last = h_out[:, -1]
    if unbatched:
        h_out, h_last, c_last = h_out[0], h_last[0], c_last[0]
    return h_out, (h_last, c_last)


# ---------------------------------------------------------------------------
# Batch normalization (channel axis last)


def _bn_forward(x, p: BatchNormParams, mode: str, update_running: bool, cache_out):
    """Normalize per channel over all leading axes. x (..., C)."""
    if mode == "train":
        axes = tuple(range(x.ndim - 1))
        mean = x.mean(axis=axes)
        var = x.var(axis=axes)
        inv_std = 1.0 / np.sqrt(var + p.eps)
        xhat = (x - mean) * inv_std
        if update_running:
            p.running_mean += p.momentum * (mean - p.running_mean)
            p.running_var += p.momentum * (var - p.running_var)
    elif mode == "infer":
        inv_std = 1.0 / np.sqrt(p.running_var + p.eps)
        xhat = (x - p.running_mean) * inv_std
    else:
        raise ValueError(f"unknown mode {mode!r}")
    if cache_out is not None:
        cache_out.extend([xhat, inv_std])
    return p.gamma * xhat + p.beta


def _bn_backward(dy, p: BatchNormParams, mode: str, cache):
    xhat, inv_std = cache
    axes = tuple(range(dy.ndim - 1))
    dgamma = np.sum(dy * xhat, axis=axes)
    dbeta = np.sum(dy, axis=axes)
    dxhat = dy * p.gamma
    if mode == "infer":
        return dxhat * inv_std, dgamma, dbeta
    m = np.prod([dy.shape[a] for a in axes])
    dx = (
        inv_std
        / m
        * (m * dxhat - np.sum(dxhat, axis=axes) - xhat * np.sum(dxhat * xhat, axis=axes))
    )
    return dx, dgamma, dbeta


def batchnorm_forward(
    x, p: BatchNormParams, mode: str, update_running: bool = True
) -> np.ndarray:
    """Public batch norm over a (B, C, 1, W) tensor, per-channel statistics."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4 or x.shape[2] != 1:
        raise ShapeError(f"expected (B, C, 1, W), got {x.shape}")
    if mode == "train" and x.shape[0] < 2:
        raise ShapeError("train-mode batch norm needs a batch of at least 2")
    x_cl = x[:, :, 0].transpose(0, 2, 1)
    y = _bn_forward(x_cl, p, mode, update_running, None)
    return y.transpose(0, 2, 1)[:, :, None, :]


# ---------------------------------------------------------------------------
# Dropout and dense head


def dropout(x, rate: float, rng: np.random.Generator | None, mode: str):
    """Inverted dropout; identity in infer mode or at rate 0."""
    if not 0.0 <= rate < 1.0:
        raise ValueError("rate must be in [0, 1)")
    x = np.asarray(x, dtype=np.float64)
    if mode == "infer" or rate == 0.0:
        return x.copy(), None
    if rng is None:
        raise ValueError("train-mode dropout needs an rng")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return x * mask, mask


def _dense_forward(x, dense: DenseParams, with_cache: bool):
    """ReLU on hidden layers, linear output."""
    acts = [x]
    n = len(dense.weights)
    for i, (w, bias) in enumerate(zip(dense.weights, dense.biases)):
        x = x @ w + bias
        if i < n - 1:
            x = np.maximum(x, 0.0)
        acts.append(x)
    return x, (acts if with_cache else None)


def _dense_backward(dy, dense: DenseParams, acts):
    dw, db = [], []
    n = len(dense.weights)
    for i in reversed(range(n)):
        if i < n - 1:
            dy = dy * (acts[i + 1] > 0)
        dw.append(acts[i].T @ dy)
        db.append(dy.sum(axis=0))
        dy = dy @ dense.weights[i].T
    return dy, dw[::-1], db[::-1]


# ---------------------------------------------------------------------------
# Full network


def shape_input(seq: FeatureSequence, cfg: NetworkConfig) -> np.ndarray:
    """Lay a normalized feature sequence out as a (T, C, 1, W) tensor.

    Timestep t holds frames [t*W, (t+1)*W); trailing frames beyond T*W are
    dropped; shorter sequences are an error.
    """
    need = cfg.timesteps * cfg.width
    if len(seq) < need:
        raise ShapeError(f"sequence has {len(seq)} frames, need {need}")
    frames = seq.features[:need]  # (T*W, C)
    tensor = frames.reshape(cfg.timesteps, cfg.width, cfg.in_channels)
    return np.ascontiguousarray(tensor.transpose(0, 2, 1))[:, :, None, :]


def _check_finite(arr: np.ndarray, stage: str) -> None:
    if not np.all(np.isfinite(arr)):
        raise FloatingPointError(f"non-finite activation in {stage}")


@dataclass
class _ForwardCache:
    x_cl: np.ndarray
    h1: np.ndarray
    cache1: _LayerCache
    bn1_cache: list
    bn1_out: np.ndarray
    h2: np.ndarray
    cache2: _LayerCache
    bn2_cache: list
    flat: np.ndarray
    drop_mask: np.ndarray | None
    dense_acts: list


def _forward(
    batch: np.ndarray,
    state: ModelState,
    mode: str,
    rng: np.random.Generator | None,
    with_cache: bool,
    update_running: bool,
):
    cfg = state.config
    batch = np.asarray(batch, dtype=np.float64)
    expected = (cfg.timesteps, cfg.in_channels, 1, cfg.width)
    if batch.ndim != 5 or batch.shape[1:] != expected:
        raise ShapeError(f"batch shape {batch.shape} != (B, {expected})")
    if mode not in ("train", "infer"):
        raise ValueError(f"unknown mode {mode!r}")
    if mode == "train" and batch.shape[0] < 2:
        raise ShapeError("train mode needs batch size >= 2 (batch norm)")

    x_cl = batch[:, :, :, 0].transpose(0, 1, 3, 2)  # (B, T, W, C)
    h1, cache1 = _layer_forward(x_cl, state.layer1, with_cache)
    _check_finite(h1, "clstm layer 1")
    bn1_cache: list = []
    bn1_out = _bn_forward(h1, state.bn1, mode, update_running, bn1_cache)
    h2, cache2 = _layer_forward(bn1_out, state.layer2, with_cache)
    _check_finite(h2, "clstm layer 2")
    bn2_cache: list = []
    bn2_out = _bn_forward(h2, state.bn2, mode, update_running, bn2_cache)

    last = bn2_out[:, -1]  # (B, W, C2)
    flat = last.reshape(last.shape[0], -1)
    dropped, mask = dropout(flat, cfg.dropout_rate, rng, mode)
    pred, dense_acts = _dense_forward(dropped, state.dense, with_cache)
    pred = pred[:, 0]
    _check_finite(pred, "dense head")

    cache = None
    if with_cache:
        cache = _ForwardCache(
            x_cl=x_cl,
            h1=h1,
            cache1=cache1,
            bn1_cache=bn1_cache,
            bn1_out=bn1_out,
            h2=h2,
            cache2=cache2,
            bn2_cache=bn2_cache,
            flat=dropped,
            drop_mask=mask,
            dense_acts=dense_acts,
        )
    return pred, cache


def network_forward(
    batch,
    state: ModelState,
    mode: str = "infer",
    rng: np.random.Generator | None = None,
) -> np.ndarray:
    """Map a (B, T, C, 1, W) feature batch to per-example GA estimates."""
    pred, _ = _forward(
        batch, state, mode, rng, with_cache=False, update_running=(mode == "train")
    )
    return pred


def loss_and_gradients(
    batch,
    labels,
    state: ModelState,
    rng: np.random.Generator | None = None,
    update_running: bool = True,
):
    """MAE + L2(dense weights) loss and exact gradients for every parameter.

    Returns (loss, predictions, grads) where grads keys match
    `named_parameters`. The subgradient of |r| at r = 0 is taken as 0.
    """
    labels = np.asarray(labels, dtype=np.float64)
    pred, cache = _forward(
        batch, state, "train", rng, with_cache=True, update_running=update_running
    )
    if labels.shape != pred.shape:
        raise ShapeError(f"labels shape {labels.shape} != predictions {pred.shape}")

    cfg = state.config
    nb = len(labels)
    residual = pred - labels
    lam = cfg.l2_lambda
    loss = float(np.mean(np.abs(residual))) + lam * sum(
        float(np.sum(w * w)) for w in state.dense.weights
    )
    if not np.isfinite(loss):
        raise FloatingPointError("non-finite loss")

    grads: dict[str, np.ndarray] = {}

    # dense head
    dpred = (np.sign(residual) / nb)[:, None]
    dflat, dw_dense, db_dense = _dense_backward(dpred, state.dense, cache.dense_acts)
    for i, (dw, db) in enumerate(zip(dw_dense, db_dense)):
        grads[f"dense/w{i}"] = dw + 2.0 * lam * state.dense.weights[i]
        grads[f"dense/b{i}"] = db

    if cache.drop_mask is not None:
        dflat = dflat * cache.drop_mask

    # only the final timestep of bn2's output feeds the head
    b, t, w, c2 = cache.h2.shape
    dbn2_out = np.zeros((b, t, w, c2))
    dbn2_out[:, -1] = dflat.reshape(b, w, c2)
    dh2, dgamma2, dbeta2 = _bn_backward(dbn2_out, state.bn2, "train", cache.bn2_cache)
    grads["bn2/gamma"] = dgamma2
    grads["bn2/beta"] = dbeta2

    dbn1_out, dwx2, dwh2, db2 = _layer_backward(
        cache.bn1_out, state.layer2, cache.cache2, dh2
    )
    grads["layer2/w_x"] = dwx2
    grads["layer2/w_h"] = dwh2
    grads["layer2/b"] = db2

    dh1, dgamma1, dbeta1 = _bn_backward(dbn1_out, state.bn1, "train", cache.bn1_cache)
    grads["bn1/gamma"] = dgamma1
    grads["bn1/beta"] = dbeta1

    _, dwx1, dwh1, db1 = _layer_backward(
        cache.x_cl, state.layer1, cache.cache1, dh1, need_dx=False
    )
    grads["layer1/w_x"] = dwx1
    grads["layer1/w_h"] = dwh1
    grads["layer1/b"] = db1

    return loss, pred, grads
