"""Parameter storage, neural layers, AdamW and checkpoints on top of :mod:`t2p.autograd`."""

from __future__ import annotations

import hashlib
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

try:
    import numba
except ImportError:  # pragma: no cover - numba is an optional accelerator
    numba = None

from . import autograd as ag
from .autograd import NumericalError, Tensor

CHECKPOINT_VERSION = 1
_CHUNK = 1 << 15


@dataclass
class Param:
    value: np.ndarray
    grad: np.ndarray
    m: np.ndarray
    v: np.ndarray


@dataclass
class ParameterStore:
    """Named learnable arrays with gradient and AdamW moment slots."""

    params: dict[str, Param] = field(default_factory=dict)
    step: int = 0
    _flat: tuple | None = field(default=None, repr=False, compare=False)
    _scratch: np.ndarray | None = field(default=None, repr=False, compare=False)
    # set by an optimizer step that already cleared the gradients
    grads_clear: bool = field(default=False, repr=False, compare=False)

    def flat(self) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
        """Contiguous (value, grad, m, v) buffers; parameter arrays become views into them."""
        if self._flat is not None and self._flat[4] == len(self.params):
            return self._flat[:4]
        total = self.num_values()
        bufs = [np.empty(total) for _ in range(4)]
        off = 0
        for p in self.params.values():
            n = p.value.size
            views = []
            for buf, src in zip(bufs, (p.value, p.grad, p.m, p.v)):
                view = buf[off:off + n].reshape(src.shape)
                view[...] = src
                views.append(view)
            p.value, p.grad, p.m, p.v = views
            off += n
        self._flat = (*bufs, len(self.params))
        return self._flat[:4]

    def scratch(self) -> np.ndarray:
        """Two reusable chunk-sized work buffers for the numpy optimizer path."""
        if self._scratch is None:
            self._scratch = np.empty((2, _CHUNK))
        return self._scratch

    def create(self, name: str, shape: tuple, rng: np.random.Generator | None = None,
               init: str = "glorot", fan: tuple[int, int] | None = None) -> np.ndarray:
        if name in self.params:
            raise KeyError(f"parameter {name!r} already exists")
        shape = tuple(shape)
        if init == "zeros":
            value = np.zeros(shape)
        elif init == "ones":
            value = np.ones(shape)
        elif init == "glorot":
            fan_in, fan_out = fan if fan is not None else (shape[-2], shape[-1])
            bound = math.sqrt(6.0 / (fan_in + fan_out))
            value = rng.uniform(-bound, bound, size=shape)
        else:
            raise ValueError(f"unknown init {init!r}")
        self.params[name] = Param(value, np.zeros(shape), np.zeros(shape), np.zeros(shape))
        return value

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __getitem__(self, name: str) -> np.ndarray:
        return self.params[name].value

    def names(self) -> list[str]:
        return list(self.params)

    def leaf(self, name: str) -> Tensor:
        """Fresh graph leaf for ``name`` whose gradient accumulates into the store."""
        # bind to the flat buffers first, so a later flat() cannot orphan the sink
        self.flat()
        p = self.params[name]
        t = Tensor(p.value, requires_grad=True, op=f"param:{name}")
        t.sink = p.grad
        return t

    def zero_grad(self) -> None:
        self.flat()[1][...] = 0.0
        self.grads_clear = True

    def grad(self, name: str) -> np.ndarray:
        return self.params[name].grad

    def copy(self) -> "ParameterStore":
        return ParameterStore(
            {k: Param(p.value.copy(), p.grad.copy(), p.m.copy(), p.v.copy()) for k, p in self.params.items()},
            self.step,
        )

    def state_equal(self, other: "ParameterStore") -> bool:
        """Bit-level equality of values and optimizer state."""
        if self.names() != other.names() or self.step != other.step:
            return False
        return all(np.array_equal(p.value, q.value) and np.array_equal(p.m, q.m) and np.array_equal(p.v, q.v)
                   for p, q in zip(self.params.values(), other.params.values()))

    def num_values(self) -> int:
        return sum(p.value.size for p in self.params.values())


# ----------------------------------------------------------------------------
# layers


def init_linear(store: ParameterStore, name: str, d_in: int, d_out: int, rng, bias: bool = True) -> None:
    store.create(f"{name}.w", (d_in, d_out), rng)
    if bias:
        store.create(f"{name}.b", (d_out,), init="zeros")


def linear(store: ParameterStore, x, name: str) -> Tensor:
    """``x @ W + b`` over the last axis."""
    x = ag.as_tensor(x)
    w = store.leaf(f"{name}.w")
    if x.shape[-1] != w.shape[0]:
        raise ValueError(f"linear {name}: input feature size {x.shape[-1]} != weight rows {w.shape[0]}")
    if f"{name}.b" in store:
        return ag.affine(x, w, store.leaf(f"{name}.b"))
    return ag.matmul(x, w)


def init_layer_norm(store: ParameterStore, name: str, dim: int) -> None:
    store.create(f"{name}.scale", (dim,), init="ones")
    store.create(f"{name}.shift", (dim,), init="zeros")


def layer_norm(store: ParameterStore, x, name: str, epsilon: float = 1e-6) -> Tensor:
    y = ag.standardize(ag.as_tensor(x), epsilon)
    return y * store.leaf(f"{name}.scale") + store.leaf(f"{name}.shift")


def dropout(x, rate: float, training: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout; identity at inference or ``rate == 0``."""
    x = ag.as_tensor(x)
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    # single-precision uniforms are plenty for a keep mask and half the cost
    keep = rng.random(x.shape, dtype=np.float32) >= rate
    return x * (keep / (1.0 - rate))


def attention(q, k, v, mask: np.ndarray | None = None, d_k: int | None = None):
    """Scaled dot-product attention; returns ``(output, weights)``.

    ``mask`` is boolean, True where a key may be attended, broadcastable to
    ``(..., Sq, Sk)``. Rows with no visible key get zero weights and output.
    """
    q, k, v = ag.as_tensor(q), ag.as_tensor(k), ag.as_tensor(v)
    for t in (q, k, v):
        if np.isnan(t.data).any():
            culprit = ag.Tape.record(t).first_nan()
            where = culprit.op if culprit is not None else "unknown operation"
            raise NumericalError(f"NaN in attention input; first NaN produced by {where}")
    d_k = d_k or q.shape[-1]
    scores = ag.matmul(q, ag.swapaxes(k, -1, -2)) * (1.0 / math.sqrt(d_k))
    w = ag.masked_softmax(scores, mask)
    return ag.matmul(w, v), w


def init_mha(store: ParameterStore, name: str, d_model: int, rng, heads: int = 8, d_k: int = 64,
             d_kv_in: int | None = None) -> None:
    d_kv_in = d_kv_in or d_model
    init_linear(store, f"{name}.q", d_model, heads * d_k, rng)
    init_linear(store, f"{name}.k", d_kv_in, heads * d_k, rng)
    init_linear(store, f"{name}.v", d_kv_in, heads * d_k, rng)
    init_linear(store, f"{name}.o", heads * d_k, d_model, rng)


def _split_heads(x: Tensor, heads: int) -> Tensor:
    *lead, s, hd = x.shape
    return ag.swapaxes(x.reshape(*lead, s, heads, hd // heads), -2, -3)


def multi_head_attention(store: ParameterStore, q, k, v, name: str, heads: int = 8, d_k: int = 64,
                         mask: np.ndarray | None = None, return_weights: bool = False):
    """Multi-head attention over ``(..., S, d)`` inputs.

    ``mask`` has shape broadcastable to ``(..., Sq, Sk)`` and is shared by all heads.
    """
    qh = _split_heads(linear(store, q, f"{name}.q"), heads)
    kh = _split_heads(linear(store, k, f"{name}.k"), heads)
    vh = _split_heads(linear(store, v, f"{name}.v"), heads)
    if mask is not None:
        mask = np.expand_dims(mask, -3)
    out, w = attention(qh, kh, vh, mask, d_k)
    out = ag.swapaxes(out, -2, -3)
    *lead, s, h, dk = out.shape
    y = linear(store, out.reshape(*lead, s, h * dk), f"{name}.o")
    return (y, w) if return_weights else y


def init_mlp(store: ParameterStore, name: str, dims: list[int], rng, norm: bool = True) -> None:
    for i, (a, b) in enumerate(zip(dims[:-1], dims[1:])):
        init_linear(store, f"{name}.{i}", a, b, rng)
        if norm and i < len(dims) - 2:
            init_layer_norm(store, f"{name}.ln{i}", b)


def mlp(store: ParameterStore, x, name: str, depth: int) -> Tensor:
    """Linear layers with (layer norm +) ReLU between them; the last layer is plain."""
    for i in range(depth):
        x = linear(store, x, f"{name}.{i}")
        if i < depth - 1:
            if f"{name}.ln{i}.scale" in store:
                x = layer_norm(store, x, f"{name}.ln{i}")
            x = ag.relu(x)
    return x


# ----------------------------------------------------------------------------
# transformer blocks (post-norm)


def init_encoder_layer(store: ParameterStore, name: str, d_model: int, d_ff: int, rng,
                       heads: int = 8, d_k: int = 64) -> None:
    init_mha(store, f"{name}.attn", d_model, rng, heads, d_k)
    init_layer_norm(store, f"{name}.ln1", d_model)
    init_linear(store, f"{name}.ff1", d_model, d_ff, rng)
    init_linear(store, f"{name}.ff2", d_ff, d_model, rng)
    init_layer_norm(store, f"{name}.ln2", d_model)


def encoder_layer(store: ParameterStore, x, name: str, *, memory=None, mask=None, heads: int = 8,
                  d_k: int = 64, dropout_rate: float = 0.0, training: bool = False, rng=None) -> Tensor:
    """Attention + FFN with skip connections and layer norm.

    With ``memory`` given the attention is cross-attention (decoder layer).
    """
    kv = x if memory is None else memory
    a = multi_head_attention(store, x, kv, kv, f"{name}.attn", heads, d_k, mask)
    x = layer_norm(store, x + dropout(a, dropout_rate, training, rng), f"{name}.ln1")
    h = ag.relu(linear(store, x, f"{name}.ff1"))
    h = linear(store, dropout(h, dropout_rate, training, rng), f"{name}.ff2")
    return layer_norm(store, x + dropout(h, dropout_rate, training, rng), f"{name}.ln2")


# ----------------------------------------------------------------------------
# optimizer


def _adamw_chunks(x, g, m, v, tmp, step_size, b1, b2, decay, inv_sqrt_c2, eps, clear) -> None:
    # chunked so the work buffers stay in cache
    for lo in range(0, x.size, _CHUNK):
        hi = lo + _CHUNK
        gc, mc, vc, xc = g[lo:hi], m[lo:hi], v[lo:hi], x[lo:hi]
        t, u = tmp[0, :gc.size], tmp[1, :gc.size]
        mc *= b1
        np.multiply(gc, 1.0 - b1, out=t)
        mc += t
        vc *= b2
        np.multiply(gc, gc, out=t)
        t *= 1.0 - b2
        vc += t
        np.sqrt(vc, out=t)
        t *= inv_sqrt_c2
        t += eps
        np.multiply(mc, step_size, out=u)
        u /= t
        xc *= decay
        xc -= u
        if clear:
            gc[...] = 0.0


def _adamw_loop(x, g, m, v, tmp, step_size, b1, b2, decay, inv_sqrt_c2, eps, clear) -> None:
    # same expression order as the chunked numpy path, so both give identical bits
    for i in range(x.size):
        gi = g[i]
        if clear:
            g[i] = 0.0
        mi = b1 * m[i] + (1.0 - b1) * gi
        vi = b2 * v[i] + (1.0 - b2) * (gi * gi)
        m[i] = mi
        v[i] = vi
        x[i] = x[i] * decay - step_size * mi / (np.sqrt(vi) * inv_sqrt_c2 + eps)


_adamw_fused = numba.njit(error_model="numpy", cache=True)(_adamw_loop) if numba is not None else None


def adamw_step(store: ParameterStore, lr: float = 0.003, betas: tuple[float, float] = (0.9, 0.999),
               weight_decay: float = 0.01, eps: float = 1e-8, fused: bool | None = None,
               clear_grad: bool = False) -> None:
    """Decoupled-weight-decay Adam update, in place.

    ``x <- x (1 - lr wd) - lr m_hat / (sqrt(v_hat) + eps)`` with the bias
    corrections folded into two scalars. ``fused`` selects the compiled
    single-pass kernel (default: whenever numba is installed). ``clear_grad``
    zeroes each gradient as it is consumed, saving a separate pass.
    """
    b1, b2 = betas
    value, g, m, v = store.flat()
    store.step += 1
    c1 = 1.0 - b1 ** store.step
    c2 = 1.0 - b2 ** store.step
    args = (lr / c1, b1, b2, 1.0 - lr * weight_decay, 1.0 / math.sqrt(c2), eps, clear_grad)
    if fused is None:
        fused = _adamw_fused is not None
    if fused:
        if _adamw_fused is None:
            raise RuntimeError("the fused optimizer needs numba")
        _adamw_fused(value, g, m, v, None, *args)
    else:
        _adamw_chunks(value, g, m, v, store.scratch(), *args)
    store.grads_clear = clear_grad


# ----------------------------------------------------------------------------
# checkpoints


def config_hash(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def save_checkpoint(path: str | Path, store: ParameterStore, config: dict | None = None,
                    extra: dict | None = None) -> None:
    """Write values, optimizer moments, step and config hash as little-endian doubles."""
    config = config or {}
    meta = {
        "format_version": CHECKPOINT_VERSION,
        "step": store.step,
        "config_hash": config_hash(config),
        "config": config,
        "names": store.names(),
        "extra": extra or {},
    }
    arrays = {"__meta__": np.frombuffer(json.dumps(meta, default=str).encode(), dtype=np.uint8)}
    for name, p in store.params.items():
        arrays[f"value/{name}"] = p.value.astype("<f8")
        arrays[f"m/{name}"] = p.m.astype("<f8")
        arrays[f"v/{name}"] = p.v.astype("<f8")
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> tuple[ParameterStore, dict]:
    with np.load(Path(path)) as data:
        meta = json.loads(bytes(data["__meta__"]).decode())
        if meta.get("format_version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {meta.get('format_version')}")
        store = ParameterStore(step=int(meta["step"]))
        for name in meta["names"]:
            value = data[f"value/{name}"].astype(np.float64)
            store.params[name] = Param(value, np.zeros_like(value),
                                       data[f"m/{name}"].astype(np.float64),
                                       data[f"v/{name}"].astype(np.float64))
    return store, meta
