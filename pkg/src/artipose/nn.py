"""Parameter storage, MLP forward/backward, Adam, time embedding, checkpoints."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .errors import ShapeMismatch, StaleTape

_CKPT_MAGIC = b"APCK"
_CKPT_VERSION = 1


class ParamStore:
    """Named float32 parameters with paired grad buffers and Adam state.

    Single-writer: one training loop mutates a store. `version` bumps on
    every mutation so stale tapes can be rejected.
    """

    def __init__(self):
        self.params: dict[str, np.ndarray] = {}
        self.grads: dict[str, np.ndarray] = {}
        self._m: dict[str, np.ndarray] = {}
        self._v: dict[str, np.ndarray] = {}
        self.step = 0
        self.version = 0

    def add(self, name: str, value: np.ndarray) -> None:
        if name in self.params:
            raise ValueError(f"duplicate parameter {name!r}")
        arr = np.ascontiguousarray(value, dtype=np.float32)
        self.params[name] = arr
        self.grads[name] = np.zeros_like(arr)
        self._m[name] = np.zeros_like(arr)
        self._v[name] = np.zeros_like(arr)

    def names(self) -> list[str]:
        return list(self.params)

    def zero_grads(self) -> None:
        for g in self.grads.values():
            g[...] = 0.0

    def use(self, name: str, tape: ad.Tape, dtype=None) -> ad.Var:
        """Put a parameter on a tape; backward flushes into the grad buffer."""
        data = self.params[name]
        if dtype is not None and data.dtype != dtype:
            data = data.astype(dtype)
        var = ad.leaf(data, tape)
        tape.param_uses.append((self, name, var, self.version))
        return var

    def flush_tape_grads(self, tape: ad.Tape) -> None:
        """Accumulate tape gradients into the store; rejects stale tapes."""
        for store, name, var, version in tape.param_uses:
            if store is not self:
                continue
            if version != self.version:
                raise StaleTape(f"parameter {name!r} changed since forward")
            if var.grad is not None:
                self.grads[name] += var.grad.astype(np.float32)

    def clone(self) -> "ParamStore":
        out = ParamStore()
        for name, value in self.params.items():
            out.add(name, value.copy())
        return out

    def copy_values_from(self, other: "ParamStore") -> None:
        for name, value in other.params.items():
            self.params[name][...] = value
        self.version += 1


@dataclass(frozen=True)
class MlpSpec:
    """Layer widths (input width first) and activations of a plain MLP."""

    widths: tuple
    activation: str = "relu"
    out_activation: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise ValueError("an MLP needs at least one layer (two widths)")
        if any(w < 1 for w in self.widths):
            raise ValueError("all widths must be >= 1")
        if self.activation != "relu":
            raise ValueError(f"unsupported hidden activation {self.activation!r}")
        if self.out_activation not in (None, "sigmoid"):
            raise ValueError(f"unsupported output activation {self.out_activation!r}")

    @property
    def in_width(self) -> int:
        return self.widths[0]

    @property
    def out_width(self) -> int:
        return self.widths[-1]

    def n_layers(self) -> int:
        return len(self.widths) - 1


def init_mlp(store: ParamStore, prefix: str, spec: MlpSpec, rng: np.random.Generator):
    """He-initialized weights, zero biases, registered as {prefix}.w{i}/.b{i}."""
    for i, (fan_in, fan_out) in enumerate(zip(spec.widths[:-1], spec.widths[1:])):
        w = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=(fan_in, fan_out))
        store.add(f"{prefix}.w{i}", w.astype(np.float32))
        store.add(f"{prefix}.b{i}", np.zeros(fan_out, dtype=np.float32))


def mlp_apply(
    spec: MlpSpec, store: ParamStore, prefix: str, x: ad.Var, dtype=None
) -> ad.Var:
    """Run the MLP on an existing tape (x already a Var)."""
    if x.data.ndim != 2 or x.data.shape[1] != spec.in_width:
        raise ShapeMismatch(
            f"input width {x.data.shape} incompatible with spec {spec.widths}"
        )
    h = x
    last = spec.n_layers() - 1
    for i in range(spec.n_layers()):
        w = store.use(f"{prefix}.w{i}", x.tape, dtype=dtype)
        b = store.use(f"{prefix}.b{i}", x.tape, dtype=dtype)
        h = ad.add(ad.matmul(h, w), b)
        if i < last:
            h = ad.relu(h)
        elif spec.out_activation == "sigmoid":
            h = ad.sigmoid(h)
    return h


def mlp_value(spec: MlpSpec, store: ParamStore, prefix: str, x: np.ndarray) -> np.ndarray:
    """Tape-free forward pass (inference only); matches mlp_forward exactly."""
    if x.ndim != 2 or x.shape[1] != spec.in_width:
        raise ShapeMismatch(
            f"input width {x.shape} incompatible with spec {spec.widths}"
        )
    h = x
    last = spec.n_layers() - 1
    for i in range(spec.n_layers()):
        w = store.params[f"{prefix}.w{i}"]
        b = store.params[f"{prefix}.b{i}"]
        if h.dtype != w.dtype:
            w = w.astype(h.dtype)
            b = b.astype(h.dtype)
        h = h @ w + b
        if i < last:
            h = np.maximum(h, 0)
        elif spec.out_activation == "sigmoid":
            h = 1.0 / (1.0 + np.exp(-h))
    return h


def mlp_forward(spec: MlpSpec, store: ParamStore, x, prefix: str = "mlp"):
    """Fresh-tape forward pass. Returns (output array, tape)."""
    tape = ad.Tape()
    xin = ad.leaf(np.asarray(x), tape)
    out = mlp_apply(spec, store, prefix, xin, dtype=xin.data.dtype)
    tape.output = out
    tape.input = xin
    return out.data, tape


def mlp_backward(tape: ad.Tape, out_grad):
    """Reverse pass for a mlp_forward tape.

    Accumulates parameter grads into the owning store(s) and returns
    (param grads for this tape, input grad).
    """
    tape.backward(tape.output, out_grad)
    stores = {id(s): s for s, *_ in tape.param_uses}
    for store in stores.values():
        store.flush_tape_grads(tape)
    grads = {name: var.grad for _, name, var, _ in tape.param_uses}
    return grads, tape.input.grad


def adam_step(
    store: ParamStore,
    lr: float = 1e-3,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """Standard bias-corrected adaptive-moment update over all parameters."""
    store.step += 1
    store.version += 1
    t = store.step
    c1 = 1.0 - beta1**t
    c2 = 1.0 - beta2**t
    for name, p in store.params.items():
        g = store.grads[name]
        m = store._m[name]
        v = store._v[name]
        m *= beta1
        m += (1.0 - beta1) * g
        v *= beta2
        v += (1.0 - beta2) * g * g
        p -= (lr / c1) * m / (np.sqrt(v / c2) + eps)


def time_embedding(t: int, T: int, dim: int) -> np.ndarray:
    """Sinusoidal embedding of t/T at geometrically spaced frequencies."""
    if not 0 <= t <= T:
        raise ValueError(f"step {t} outside [0, {T}]")
    if dim < 2 or dim % 2 != 0:
        raise ValueError("dim must be even and >= 2")
    half = dim // 2
    if half == 1:
        freqs = np.array([1.0])
    else:
        freqs = np.geomspace(1.0, 1000.0, half)
    phase = freqs * (t / T)
    return np.concatenate([np.sin(phase), np.cos(phase)]).astype(np.float32)


def save_checkpoint(path, stores: dict[str, ParamStore], meta: dict | None = None):
    """Write named float32 tensors for one or more stores.

    Layout: magic 'APCK', u32 version, u32 header length, JSON header
    (tensor table name/shape/offset plus user meta), then raw little-endian
    float32 payloads in table order.
    """
    table = []
    payloads = []
    offset = 0
    for group in sorted(stores):
        store = stores[group]
        for name in sorted(store.params):
            arr = np.ascontiguousarray(store.params[name], dtype="<f4")
            table.append(
                {"name": f"{group}/{name}", "shape": list(arr.shape), "offset": offset}
            )
            payloads.append(arr.tobytes())
            offset += arr.nbytes
    header = json.dumps(
        {"tensors": table, "meta": meta or {}}, sort_keys=True
    ).encode("utf-8")
    with open(path, "wb") as f:
        f.write(_CKPT_MAGIC)
        f.write(struct.pack("<II", _CKPT_VERSION, len(header)))
        f.write(header)
        for blob in payloads:
            f.write(blob)


def load_checkpoint(path):
    """Read a checkpoint; returns ({group: ParamStore}, meta)."""
    with open(path, "rb") as f:
        magic = f.read(4)
        if magic != _CKPT_MAGIC:
            raise ValueError(f"not a checkpoint file: bad magic {magic!r}")
        version, hlen = struct.unpack("<II", f.read(8))
        if version != _CKPT_VERSION:
            raise ValueError(f"unsupported checkpoint version {version}")
        header = json.loads(f.read(hlen).decode("utf-8"))
        blob = f.read()
    stores: dict[str, ParamStore] = {}
    for entry in header["tensors"]:
        group, name = entry["name"].split("/", 1)
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(
            blob, dtype="<f4", count=count, offset=entry["offset"]
        ).reshape(shape)
        stores.setdefault(group, ParamStore()).add(name, arr.copy())
    return stores, header["meta"]
