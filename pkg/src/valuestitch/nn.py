"""Dense networks with hand-written reverse mode, AdamW and checkpoints.

Layers are numbered from 1. Layer ``l`` maps ``h_{l-1}`` to
``h_l = act_l(W_l h_{l-1} + b_l)`` with ``W_l`` of shape ``(out, in)``;
``h_0`` is the input. Batches are row-major ``(n, width)``.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels

ACTIVATIONS = ("silu", "identity")
CHECKPOINT_MAGIC = "valuestitch-ckpt"
CHECKPOINT_VERSION = 1


class ShapeError(ValueError):
    pass


class TapeError(RuntimeError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass
class Tape:
    """Activations recorded by one forward pass over layers ``start..stop``."""

    net_id: int
    version: int
    start: int
    stop: int
    inputs: list = field(default_factory=list)  # h_{l-1} for each layer
    pre: list = field(default_factory=list)  # W h + b
    sig: list = field(default_factory=list)  # sigmoid(pre) for SiLU layers, else None


class Mlp:
    """Feed-forward network of affine layers with per-layer activations."""

    def __init__(self, widths, activations=None, weights=None, biases=None):
        widths = [int(w) for w in widths]
        if len(widths) < 2 or min(widths) < 1:
            raise ShapeError("an Mlp needs at least one layer of positive width")
        depth = len(widths) - 1
        if activations is None:
            activations = ["silu"] * (depth - 1) + ["identity"]
        activations = list(activations)
        if len(activations) != depth or any(a not in ACTIVATIONS for a in activations):
            raise ShapeError(f"need {depth} activations from {ACTIVATIONS}")
        self.widths = widths
        self.activations = activations
        if weights is None:
            weights = [np.zeros((widths[l + 1], widths[l])) for l in range(depth)]
        if biases is None:
            biases = [np.zeros(widths[l + 1]) for l in range(depth)]
        self.weights = [np.array(w, dtype=np.float64) for w in weights]
        self.biases = [np.array(b, dtype=np.float64) for b in biases]
        for l in range(depth):
            if self.weights[l].shape != (widths[l + 1], widths[l]) or self.biases[l].shape != (widths[l + 1],):
                raise ShapeError(f"layer {l + 1} parameters do not chain with widths {widths}")
        self._version = 0

    @classmethod
    def init(cls, widths, rng: np.random.Generator, activations=None, zero_last: bool = False) -> "Mlp":
        """He-style normal initialization; biases start at zero."""
        net = cls(widths, activations)
        for l in range(net.depth):
            fan_in = net.widths[l]
            net.weights[l] = rng.standard_normal(net.weights[l].shape) * np.sqrt(1.0 / fan_in)
        if zero_last:
            net.weights[-1][...] = 0.0
        return net

    @property
    def depth(self) -> int:
        return len(self.widths) - 1

    @property
    def version(self) -> int:
        return self._version

    def mark_updated(self) -> None:
        """Invalidate outstanding tapes after an in-place parameter change."""
        self._version += 1

    def params(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def layer_params(self, start: int, stop: int) -> list[np.ndarray]:
        out = []
        for l in range(start - 1, stop):
            out += [self.weights[l], self.biases[l]]
        return out

    def set_params(self, values) -> None:
        values = list(values)
        if len(values) != 2 * self.depth:
            raise ShapeError("wrong number of parameter arrays")
        for l in range(self.depth):
            w, b = np.asarray(values[2 * l], float), np.asarray(values[2 * l + 1], float)
            if w.shape != self.weights[l].shape or b.shape != self.biases[l].shape:
                raise ShapeError(f"layer {l + 1}: shape mismatch")
            self.weights[l][...] = w
            self.biases[l][...] = b
        self.mark_updated()

    def copy(self) -> "Mlp":
        return Mlp(self.widths, self.activations, [w.copy() for w in self.weights],
                   [b.copy() for b in self.biases])

    def n_params(self) -> int:
        return sum(p.size for p in self.params())

    def flops(self, start: int = 1, stop: int | None = None) -> int:
        """Multiply-adds per sample for layers ``start..stop``."""
        stop = self.depth if stop is None else stop
        return sum(self.widths[l] * self.widths[l + 1] for l in range(start - 1, stop))

    # -------------------------------------------------------------- forward

    def _check_range(self, start: int, stop: int) -> None:
        if not (1 <= start <= stop <= self.depth):
            raise IndexError(f"layer range {start}..{stop} outside 1..{self.depth}")

    def forward(self, x, start: int = 1, stop: int | None = None):
        """Apply layers ``start..stop``; returns ``(y, tape)``."""
        stop = self.depth if stop is None else stop
        self._check_range(start, stop)
        h = np.asarray(x, dtype=np.float64)
        if h.ndim != 2 or h.shape[1] != self.widths[start - 1]:
            raise ShapeError(f"layer {start} expects input (n, {self.widths[start - 1]}), got {h.shape}")
        tape = Tape(id(self), self._version, start, stop)
        for l in range(start - 1, stop):
            tape.inputs.append(h)
            pre = h @ self.weights[l].T + self.biases[l]
            tape.pre.append(pre)
            if self.activations[l] == "silu":
                h, sig = kernels.silu_forward(pre)
            else:
                h, sig = pre, None
            tape.sig.append(sig)
        return h, tape

    def __call__(self, x) -> np.ndarray:
        return self.forward(x)[0]

    def forward_truncated(self, x, i: int) -> np.ndarray:
        """Post-activation output of layer ``i``."""
        return self.forward(x, 1, i)[0]

    def forward_suffix(self, h, j: int) -> np.ndarray:
        """Apply layers ``j..depth`` to a hidden batch entering layer ``j``."""
        return self.forward(h, j, self.depth)[0]

    # -------------------------------------------------------------- backward

    def backward(self, tape: Tape, dy, need_input_grad: bool = True):
        """Reverse-mode pass through the tape's layer range.

        Returns ``(grads, dx)`` where ``grads`` lists ``dW, db`` per layer of
        the range in order, and ``dx`` is the gradient wrt the range's input.
        """
        if tape.net_id != id(self):
            raise TapeError("tape was recorded on a different network")
        if tape.version != self._version:
            raise TapeError("parameters changed since the tape was recorded")
        g = np.asarray(dy, dtype=np.float64)
        if g.shape != tape.pre[-1].shape:
            raise ShapeError(f"output gradient shape {g.shape} != {tape.pre[-1].shape}")
        grads: list[np.ndarray] = []
        dx = None
        layers = list(range(tape.start - 1, tape.stop))
        for pos in range(len(layers) - 1, -1, -1):
            l = layers[pos]
            sig = tape.sig[pos]
            if sig is not None:
                g = kernels.silu_backward(np.ascontiguousarray(g), tape.pre[pos], sig)
            grads.append(g.sum(axis=0))
            grads.append(g.T @ tape.inputs[pos])
            if pos > 0 or need_input_grad:
                g = g @ self.weights[l]
        dx = g if need_input_grad else None
        grads.reverse()  # now dW_1, db_1, ...
        return grads, dx

    # -------------------------------------------------------------- serialization

    def spec(self) -> dict:
        return {"widths": self.widths, "activations": self.activations}

    def to_arrays(self, prefix: str = "") -> dict[str, np.ndarray]:
        out = {}
        for l in range(self.depth):
            out[f"{prefix}W{l + 1}"] = self.weights[l]
            out[f"{prefix}b{l + 1}"] = self.biases[l]
        return out

    @classmethod
    def from_arrays(cls, spec: dict, arrays: dict, prefix: str = "") -> "Mlp":
        depth = len(spec["widths"]) - 1
        try:
            w = [arrays[f"{prefix}W{l + 1}"] for l in range(depth)]
            b = [arrays[f"{prefix}b{l + 1}"] for l in range(depth)]
        except KeyError as exc:
            raise CheckpointFormatError(f"missing array {exc}") from None
        return cls(spec["widths"], spec["activations"], w, b)


# ------------------------------------------------------------------ optimizer


@dataclass
class AdamW:
    """Adam with decoupled weight decay.

    ``lr_mult`` optionally scales the step per parameter (same order as the
    parameter list passed to :meth:`step`).
    """

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    step_count: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)
    lr_mult: list | None = None

    def step(self, params: list[np.ndarray], grads: list[np.ndarray], lr: float | None = None) -> None:
        if len(params) != len(grads):
            raise ShapeError("params and grads differ in length")
        if not self.m:
            self.m = [np.zeros_like(p) for p in params]
            self.v = [np.zeros_like(p) for p in params]
        if len(self.m) != len(params):
            raise ShapeError("optimizer state does not match parameter list")
        lr = self.lr if lr is None else lr
        self.step_count += 1
        bc1 = 1.0 - self.beta1 ** self.step_count
        bc2 = 1.0 - self.beta2 ** self.step_count
        for idx, (p, g) in enumerate(zip(params, grads)):
            if g.shape != p.shape or self.m[idx].shape != p.shape:
                raise ShapeError(f"parameter {idx}: shape mismatch")
            scale = lr * (self.lr_mult[idx] if self.lr_mult else 1.0)
            m, v = self.m[idx], self.v[idx]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            if self.weight_decay:
                p *= 1.0 - scale * self.weight_decay
            p -= scale * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def to_arrays(self) -> dict[str, np.ndarray]:
        out = {}
        for idx, (m, v) in enumerate(zip(self.m, self.v)):
            out[f"opt.m{idx}"] = m
            out[f"opt.v{idx}"] = v
        return out

    def meta(self) -> dict:
        return {"lr": self.lr, "beta1": self.beta1, "beta2": self.beta2, "eps": self.eps,
                "weight_decay": self.weight_decay, "step_count": self.step_count,
                "n_state": len(self.m), "lr_mult": self.lr_mult}

    @classmethod
    def from_checkpoint(cls, meta: dict, arrays: dict) -> "AdamW":
        n = meta.pop("n_state")
        opt = cls(**meta)
        opt.m = [arrays[f"opt.m{i}"] for i in range(n)]
        opt.v = [arrays[f"opt.v{i}"] for i in range(n)]
        return opt


def clip_grad_norm(grads: list[np.ndarray], max_norm: float) -> float:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads)))
    if max_norm and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads:
            g *= scale
    return norm


# ------------------------------------------------------------------ checkpoints


def save_arrays(path, arrays: dict[str, np.ndarray], meta: dict | None = None) -> None:
    """Write a JSON header line followed by raw little-endian float64 arrays.

    Arrays are stored in the insertion order of ``arrays``.
    """
    entries = []
    body = io.BytesIO()
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        body.write(a.tobytes(order="C"))
    payload = body.getvalue()
    header = {
        "format": CHECKPOINT_MAGIC,
        "version": CHECKPOINT_VERSION,
        "dtype": "float64",
        "endianness": "little",
        "nbytes": len(payload),
        "arrays": entries,
        "meta": meta or {},
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True).encode("utf-8") + b"\n")
        fh.write(payload)


def load_arrays(path) -> tuple[dict[str, np.ndarray], dict]:
    raw = Path(path).read_bytes()
    nl = raw.find(b"\n")
    if nl < 0:
        raise CheckpointFormatError("missing header line")
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointFormatError(f"corrupt header: {exc}") from None
    if header.get("format") != CHECKPOINT_MAGIC or header.get("dtype") != "float64" \
            or header.get("endianness") != "little":
        raise CheckpointFormatError("not a valuestitch float64 little-endian checkpoint")
    body = raw[nl + 1:]
    if len(body) != header.get("nbytes"):
        raise CheckpointFormatError(f"array section is {len(body)} bytes, header says {header.get('nbytes')}")
    arrays = {}
    offset = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(body):
            raise CheckpointFormatError(f"array {entry['name']} runs past end of file")
        arrays[entry["name"]] = np.frombuffer(body[offset:end], dtype="<f8").reshape(shape).astype(np.float64)
        offset = end
    if offset != len(body):
        raise CheckpointFormatError("trailing bytes after declared arrays")
    return arrays, header["meta"]


def save_checkpoint(path, net: Mlp, opt: AdamW | None = None, meta: dict | None = None) -> None:
    arrays = net.to_arrays("net.")
    m = {"kind": "mlp", "mlp": net.spec(), **(meta or {})}
    if opt is not None:
        arrays.update(opt.to_arrays())
        m["optim"] = opt.meta()
    save_arrays(path, arrays, m)


def load_checkpoint(path, expect: Mlp | None = None):
    """Load ``(net, opt_or_None, meta)``; ``expect`` enforces matching shapes."""
    arrays, meta = load_arrays(path)
    if "mlp" not in meta:
        raise CheckpointFormatError("checkpoint holds no network")
    net = Mlp.from_arrays(meta["mlp"], arrays, "net.")
    if expect is not None and (net.widths != expect.widths or net.activations != expect.activations):
        raise ShapeError(f"checkpoint widths {net.widths} do not match expected {expect.widths}")
    opt = AdamW.from_checkpoint(dict(meta["optim"]), arrays) if "optim" in meta else None
    return net, opt, meta
