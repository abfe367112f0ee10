"""ReLU networks built from dense/conv layers, Adam, and checkpoint I/O.

Layer indices are 1-based and count only the parametrised (dense/conv)
layers, so layer ``L`` is the logit layer and ``L - 1`` the penultimate one.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import ContractError, Tensor

CHECKPOINT_MAGIC = b"PRSCKPT1"


class CheckpointError(ValueError):
    """Malformed checkpoint or architecture mismatch."""


@dataclass
class LayerSpec:
    kind: str  # "dense" | "conv" | "flatten"
    out: int = 0  # width (dense) or output channels (conv)
    kernel: int = 3
    stride: int = 1
    padding: int = 0
    activation: str = "relu"  # "relu" | "none"

    def __post_init__(self):
        if self.kind not in ("dense", "conv", "flatten"):
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.activation not in ("relu", "none"):
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.kind != "flatten" and self.out <= 0:
            raise ValueError(f"{self.kind} layer needs a positive 'out'")
        if self.kind == "conv" and (self.kernel < 1 or self.stride < 1 or self.padding < 0):
            raise ValueError("invalid conv kernel/stride/padding")

    def to_dict(self) -> dict:
        if self.kind == "flatten":
            return {"kind": "flatten"}
        if self.kind == "dense":
            return {"kind": "dense", "out": self.out, "activation": self.activation}
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "LayerSpec":
        return cls(**d)


def mlp(hidden: list[int], num_classes: int) -> list[LayerSpec]:
    specs = [LayerSpec("flatten")]
    specs += [LayerSpec("dense", out=h) for h in hidden]
    specs.append(LayerSpec("dense", out=num_classes, activation="none"))
    return specs


def mlp2(num_classes: int = 10, width: int = 256) -> list[LayerSpec]:
    """Desk-scale MLP: dense width -> width -> classes."""
    return mlp([width, width], num_classes)


def cnn4(num_classes: int = 10) -> list[LayerSpec]:
    """Two 3x3 conv blocks (16/32 ch, stride-2 downsampling), dense 128, logits."""
    return [
        LayerSpec("conv", out=16, kernel=3, stride=1, padding=1),
        LayerSpec("conv", out=16, kernel=3, stride=2, padding=1),
        LayerSpec("conv", out=32, kernel=3, stride=1, padding=1),
        LayerSpec("conv", out=32, kernel=3, stride=2, padding=1),
        LayerSpec("flatten"),
        LayerSpec("dense", out=128),
        LayerSpec("dense", out=num_classes, activation="none"),
    ]


@dataclass
class _Param:
    spec_index: int
    weight: Tensor
    bias: Tensor


class Model:
    """Ordered stack of linear ops; ReLU follows every layer except the last."""

    def __init__(self, specs: list[LayerSpec], input_shape: tuple, seed: int = 0, dtype=np.float32):
        self.specs = [s if isinstance(s, LayerSpec) else LayerSpec.from_dict(s) for s in specs]
        self.input_shape = tuple(int(v) for v in input_shape)
        self.seed = seed
        self.dtype = np.dtype(dtype)
        linear = [s for s in self.specs if s.kind != "flatten"]
        if not linear:
            raise ValueError("model needs at least one dense/conv layer")
        if linear[-1].activation != "none":
            raise ValueError("final layer must have activation 'none' (logits)")
        if any(s.activation != "relu" for s in linear[:-1]):
            raise ValueError("hidden layers must use relu")
        self.layers: list[_Param] = []
        self.layer_shapes: list[tuple] = []  # per-sample pre-activation shape of each layer
        self._init_params(np.random.default_rng(seed))
        self.frozen_mask = [False] * len(self.layers)

    # -- construction ----------------------------------------------------
    def _init_params(self, rng):
        shape = self.input_shape
        for i, s in enumerate(self.specs):
            if s.kind == "flatten":
                shape = (int(np.prod(shape)),)
                continue
            if s.kind == "dense":
                if len(shape) != 1:
                    raise ValueError(f"dense layer {i} needs flat input, got {shape}; add a flatten layer")
                fan_in = shape[0]
                wshape = (fan_in, s.out)
                shape = (s.out,)
            else:
                if len(shape) != 3:
                    raise ValueError(f"conv layer {i} needs CxHxW input, got {shape}")
                c, h, w = shape
                fan_in = c * s.kernel * s.kernel
                wshape = (s.out, c, s.kernel, s.kernel)
                oh = (h + 2 * s.padding - s.kernel) // s.stride + 1
                ow = (w + 2 * s.padding - s.kernel) // s.stride + 1
                if oh < 1 or ow < 1:
                    raise ValueError(f"conv layer {i}: kernel does not fit input {shape}")
                shape = (s.out, oh, ow)
            # Kaiming-uniform on fan-in
            bound = np.sqrt(6.0 / fan_in)
            w = rng.uniform(-bound, bound, size=wshape).astype(self.dtype)
            b = np.zeros(s.out, dtype=self.dtype)
            self.layers.append(_Param(i, Tensor(w, requires_grad=True), Tensor(b, requires_grad=True)))
            self.layer_shapes.append(shape)

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def penultimate_index(self) -> int:
        return self.num_layers - 1

    @property
    def num_classes(self) -> int:
        return self.layer_shapes[-1][0]

    def layer_width(self, l: int) -> int:
        return int(np.prod(self.layer_shapes[l - 1]))

    def parameters(self) -> list[Tensor]:
        return [t for p in self.layers for t in (p.weight, p.bias)]

    def zero_grad(self):
        for t in self.parameters():
            t.grad = None

    def final_weight(self) -> np.ndarray:
        """Final linear map as [classes, D_{L-1}] rows."""
        last = self.layers[-1]
        if self.specs[last.spec_index].kind != "dense":
            raise ValueError("final layer is not dense")
        return last.weight.data.T

    # -- forward -----------------------------------------------------------
    def _check_layer(self, l: int):
        if not 1 <= l <= self.num_layers:
            raise ValueError(f"layer index {l} outside [1, {self.num_layers}]")

    def forward_all(self, x, upto: int | None = None, track_params: bool = True) -> list[Tensor]:
        """Pre-activation outputs of layers 1..upto (default: all)."""
        upto = self.num_layers if upto is None else upto
        self._check_layer(upto)
        h = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=self.dtype))
        if h.ndim == len(self.input_shape):
            h = ad.reshape(h, (1,) + h.shape)
        outs: list[Tensor] = []
        k = 0
        for s in self.specs:
            if s.kind == "flatten":
                h = ad.flatten(h)
                continue
            p = self.layers[k]
            w, b = (p.weight, p.bias) if track_params else (p.weight.data, p.bias.data)
            if s.kind == "dense":
                z = ad.add_bias(ad.matmul(h, w), b)
            else:
                z = ad.add_bias(ad.conv2d(h, w, stride=s.stride, padding=s.padding), b)
            outs.append(z)
            k += 1
            if k == upto:
                break
            h = ad.relu(z)
        return outs

    def forward_features(self, x, l: int, track_params: bool = True) -> Tensor:
        return self.forward_all(x, upto=l, track_params=track_params)[-1]

    def __call__(self, x, track_params: bool = True) -> Tensor:
        return self.forward_features(x, self.num_layers, track_params=track_params)

    def features_numpy(self, x: np.ndarray, l: int, batch_size: int = 1024) -> np.ndarray:
        """Flattened pre-activations of layer l as an [N, D_l] array (no graph)."""
        self._check_layer(l)
        out = []
        for start in range(0, len(x), batch_size):
            z = self.forward_features(x[start:start + batch_size], l, track_params=False).data
            out.append(z.reshape(len(z), -1))
        if not out:
            return np.zeros((0, self.layer_width(l)), dtype=self.dtype)
        return np.concatenate(out)

    def logits_numpy(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return self.features_numpy(x, self.num_layers, batch_size)

    def predict(self, x: np.ndarray, batch_size: int = 1024) -> np.ndarray:
        return self.logits_numpy(x, batch_size).argmax(axis=1)

    # -- freezing / copying -----------------------------------------------
    def freeze_final_layer(self) -> "Model":
        self.frozen_mask[-1] = True
        return self

    def state_arrays(self) -> list[np.ndarray]:
        return [t.data for t in self.parameters()]

    def load_state_arrays(self, arrays: list[np.ndarray]):
        params = self.parameters()
        if len(arrays) != len(params):
            raise CheckpointError(f"expected {len(params)} tensors, got {len(arrays)}")
        for t, a in zip(params, arrays):
            if a.shape != t.data.shape:
                raise CheckpointError(f"tensor shape {a.shape} does not match model {t.data.shape}")
            t.data = np.array(a, dtype=self.dtype)

    def copy(self) -> "Model":
        m = Model(self.specs, self.input_shape, seed=self.seed, dtype=self.dtype)
        m.load_state_arrays([a.copy() for a in self.state_arrays()])
        m.frozen_mask = list(self.frozen_mask)
        return m


def forward_features(model: Model, x, l: int) -> Tensor:
    return model.forward_features(x, l)


def freeze_final_layer(model: Model) -> Model:
    return model.freeze_final_layer()


@dataclass
class Adam:
    """Adam with bias correction; skips layers whose frozen_mask is set."""

    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, model: Model):
        active = [
            (k, t)
            for i, p in enumerate(model.layers)
            if not model.frozen_mask[i]
            for k, t in ((2 * i, p.weight), (2 * i + 1, p.bias))
        ]
        missing = [k for k, t in active if t.grad is None]
        if missing:
            raise ContractError(f"adam_step: no gradient for parameter slots {missing}")
        self.step_count += 1
        t_ = self.step_count
        c1 = 1.0 - self.beta1 ** t_
        c2 = 1.0 - self.beta2 ** t_
        for k, t in active:
            g = t.grad
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(t.data)
                self.v[k] = np.zeros_like(t.data)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            t.data = (t.data - update).astype(t.data.dtype)
        model.zero_grad()


def adam_step(state: Adam, model: Model):
    state.step(model)


# -- checkpoints --------------------------------------------------------------
#
# Layout (all integers little-endian):
#   8 bytes   magic b"PRSCKPT1"
#   8 bytes   uint64 header length H
#   H bytes   UTF-8 JSON header, keys sorted, no whitespace
#   payload   parameter buffers in layer order (weight, bias per layer),
#             raw little-endian float32 ('<f4') or float64 ('<f8'), C order
# The header lists each tensor's name, shape and byte offset into the payload.


def checkpoint_bytes(model: Model, epoch: int = 0, extra: dict | None = None) -> bytes:
    dt = "<f4" if model.dtype == np.float32 else "<f8"
    tensors, offset = [], 0
    buffers = []
    for i, p in enumerate(model.layers):
        for name, t in (("weight", p.weight), ("bias", p.bias)):
            buf = np.ascontiguousarray(t.data, dtype=dt).tobytes()
            tensors.append({"name": f"layer{i + 1}.{name}", "shape": list(t.data.shape), "offset": offset})
            offset += len(buf)
            buffers.append(buf)
    header = {
        "architecture": [s.to_dict() for s in model.specs],
        "input_shape": list(model.input_shape),
        "precision": dt,
        "seed": model.seed,
        "epoch": epoch,
        "frozen_mask": list(model.frozen_mask),
        "tensors": tensors,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return CHECKPOINT_MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(buffers)


def save_checkpoint(model: Model, path, epoch: int = 0, extra: dict | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(checkpoint_bytes(model, epoch, extra))
    return path


def parse_checkpoint(raw: bytes) -> tuple[Model, dict]:
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    if len(raw) < 16:
        raise CheckpointError("truncated checkpoint header")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    if len(raw) < 16 + hlen:
        raise CheckpointError("truncated checkpoint header")
    try:
        header = json.loads(raw[16:16 + hlen])
    except json.JSONDecodeError as e:
        raise CheckpointError(f"unreadable checkpoint header: {e}") from None
    payload = raw[16 + hlen:]
    dt = np.dtype(header["precision"])
    model = Model(
        [LayerSpec.from_dict(d) for d in header["architecture"]],
        tuple(header["input_shape"]),
        seed=header["seed"],
        dtype=dt.newbyteorder("="),
    )
    arrays = []
    for t in header["tensors"]:
        n = int(np.prod(t["shape"])) * dt.itemsize
        chunk = payload[t["offset"]:t["offset"] + n]
        if len(chunk) != n:
            raise CheckpointError(f"truncated buffer for {t['name']}")
        arrays.append(np.frombuffer(chunk, dtype=dt).reshape(t["shape"]))
    expected = sum(int(np.prod(t["shape"])) for t in header["tensors"]) * dt.itemsize
    if len(payload) != expected:
        raise CheckpointError(f"payload is {len(payload)} bytes, header describes {expected}")
    model.load_state_arrays(arrays)
    model.frozen_mask = [bool(v) for v in header["frozen_mask"]]
    return model, header


def load_checkpoint(path) -> tuple[Model, dict]:
    return parse_checkpoint(Path(path).read_bytes())
