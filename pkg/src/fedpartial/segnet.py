"""Small 2D encoder-decoder segmentation network with manual backprop.

Layout is channels-last: images are (H, W, C) or batched (B, H, W, C).
Per level: two 3x3 convs with ReLU, 2x max-pool on the way down, nearest
2x upsampling plus skip concatenation on the way up, 1x1 head to N logits.
Channel width doubles per level; the bottleneck sits at level ``depth``.

All weights live in one flat vector. Encoder tensors (contracting path and
bottleneck) come first in the layout, decoder tensors (expanding path and
head) after, so the two masks partition the vector.
"""
from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"FPSEGCK1"


@dataclass(frozen=True)
class NetSpec:
    num_classes: int
    in_channels: int = 1
    base_width: int = 8
    depth: int = 2
    seed: int = 0

    def __post_init__(self):
        if self.depth < 1:
            raise ValueError("depth must be >= 1")
        if self.base_width < 1:
            raise ValueError("base_width must be >= 1")
        if self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")
        if self.in_channels < 1:
            raise ValueError("in_channels must be >= 1")

    def width(self, level: int) -> int:
        return self.base_width * 2**level

    def to_dict(self) -> dict:
        return asdict(self)


def conv_layers(spec: NetSpec):
    """(name, kernel, cin, cout, part) for every conv, in layout order."""
    layers = []
    cin = spec.in_channels
    for lvl in range(spec.depth):
        w = spec.width(lvl)
        layers += [(f"enc{lvl}.conv1", 3, cin, w, "encoder"), (f"enc{lvl}.conv2", 3, w, w, "encoder")]
        cin = w
    w = spec.width(spec.depth)
    layers += [("bottleneck.conv1", 3, cin, w, "encoder"), ("bottleneck.conv2", 3, w, w, "encoder")]
    for lvl in reversed(range(spec.depth)):
        w = spec.width(lvl)
        layers += [
            (f"dec{lvl}.conv1", 3, spec.width(lvl + 1) + w, w, "decoder"),
            (f"dec{lvl}.conv2", 3, w, w, "decoder"),
        ]
    layers.append(("head", 1, spec.width(0), spec.num_classes, "decoder"))
    return layers


@dataclass(frozen=True, eq=False)
class ModelParams:
    spec: NetSpec
    flat: np.ndarray
    layout: tuple  # ((name, shape, offset), ...)
    encoder_mask: np.ndarray

    def __post_init__(self):
        offset = 0
        for name, shape, off in self.layout:
            if off != offset:
                raise ValueError(f"layout not contiguous at {name}")
            offset += int(np.prod(shape))
        if offset != self.flat.size:
            raise ValueError("layout does not cover the flat vector")
        if self.encoder_mask.shape != self.flat.shape:
            raise ValueError("encoder mask shape mismatch")

    @property
    def decoder_mask(self) -> np.ndarray:
        return ~self.encoder_mask

    @property
    def size(self) -> int:
        return self.flat.size

    def tensors(self, flat=None) -> dict:
        """Named reshaped views into ``flat`` (defaults to the parameters)."""
        flat = self.flat if flat is None else flat
        return {name: flat[off: off + int(np.prod(shape))].reshape(shape) for name, shape, off in self.layout}

    def with_flat(self, flat) -> "ModelParams":
        flat = np.asarray(flat)
        if flat.shape != self.flat.shape:
            raise ValueError("flat vector size does not match layout")
        return replace(self, flat=flat)

    def copy(self) -> "ModelParams":
        return self.with_flat(self.flat.copy())

    def astype(self, dtype) -> "ModelParams":
        return self.with_flat(self.flat.astype(dtype))

    def same_layout(self, other: "ModelParams") -> bool:
        return self.layout == other.layout

    def mask(self, part: str) -> np.ndarray:
        if part == "encoder":
            return self.encoder_mask
        if part == "decoder":
            return self.decoder_mask
        raise ValueError(f"unknown part {part!r}")


def make_layout(spec: NetSpec):
    layout, parts = [], []
    offset = 0
    for name, k, cin, cout, part in conv_layers(spec):
        for suffix, shape in ((".w", (k, k, cin, cout)), (".b", (cout,))):
            layout.append((name + suffix, shape, offset))
            n = int(np.prod(shape))
            parts.append((part, n))
            offset += n
    encoder_mask = np.concatenate([np.full(n, part == "encoder") for part, n in parts])
    return tuple(layout), encoder_mask


def init_params(spec: NetSpec, dtype=np.float32) -> ModelParams:
    """He-uniform conv weights scaled by fan-in, zero biases."""
    layout, encoder_mask = make_layout(spec)
    rng = np.random.default_rng(spec.seed)
    chunks = []
    for name, shape, _ in layout:
        if name.endswith(".b"):
            chunks.append(np.zeros(shape))
        else:
            fan_in = shape[0] * shape[1] * shape[2]
            bound = np.sqrt(6.0 / fan_in)
            chunks.append(rng.uniform(-bound, bound, size=shape))
    flat = np.concatenate([c.ravel() for c in chunks]).astype(dtype)
    return ModelParams(spec, flat, layout, encoder_mask)


def count_params(spec: NetSpec) -> int:
    return sum(k * k * cin * cout + cout for _, k, cin, cout, _ in conv_layers(spec))


# ---------------------------------------------------------------- primitives

def _conv3_forward(x, w, b):
    B, H, W, C = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.concatenate([xp[:, dy: dy + H, dx: dx + W, :] for dy in range(3) for dx in range(3)], axis=-1)
    cols = cols.reshape(-1, 9 * C)
    out = cols @ w.reshape(9 * C, -1) + b
    return out.reshape(B, H, W, -1), cols


def _conv3_backward(dout, cols, w, x_shape):
    B, H, W, C = x_shape
    d2 = dout.reshape(-1, dout.shape[-1])
    dw = (cols.T @ d2).reshape(w.shape)
    db = d2.sum(0)
    dcols = (d2 @ w.reshape(9 * C, -1).T).reshape(B, H, W, 9, C)
    dxp = np.zeros((B, H + 2, W + 2, C), dtype=dout.dtype)
    k = 0
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy: dy + H, dx: dx + W, :] += dcols[:, :, :, k, :]
            k += 1
    return dxp[:, 1:-1, 1:-1, :], dw, db


def _pool_forward(x):
    B, H, W, C = x.shape
    win = x.reshape(B, H // 2, 2, W // 2, 2, C).transpose(0, 1, 3, 5, 2, 4).reshape(B, H // 2, W // 2, C, 4)
    idx = win.argmax(-1)
    out = np.take_along_axis(win, idx[..., None], -1)[..., 0]
    return out, idx


def _pool_backward(dout, idx, x_shape):
    B, H, W, C = x_shape
    dwin = np.zeros(dout.shape + (4,), dtype=dout.dtype)
    np.put_along_axis(dwin, idx[..., None], dout[..., None], -1)
    return dwin.reshape(B, H // 2, W // 2, C, 2, 2).transpose(0, 1, 4, 2, 5, 3).reshape(B, H, W, C)


def _up_forward(x):
    return x.repeat(2, axis=1).repeat(2, axis=2)


def _up_backward(dout):
    B, H, W, C = dout.shape
    return dout.reshape(B, H // 2, 2, W // 2, 2, C).sum(axis=(2, 4))


# ---------------------------------------------------------------- network

def _as_batch(params: ModelParams, image):
    x = np.asarray(image, dtype=params.flat.dtype)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[-1] != params.spec.in_channels:
        raise ValueError(f"expected (B,)H,W,{params.spec.in_channels} input, got {np.shape(image)}")
    step = 2**params.spec.depth
    if x.shape[1] % step or x.shape[2] % step:
        raise ValueError(f"spatial shape {x.shape[1:3]} not divisible by {step}")
    return x, single


def forward(params: ModelParams, image, keep_cache: bool = False):
    """Logits for one image (H, W, C) or a batch (B, H, W, C).

    With ``keep_cache`` returns ``(logits, cache)`` for :func:`backward`.
    """
    x, single = _as_batch(params, image)
    spec = params.spec
    t = params.tensors()
    cache = {"x_shape": x.shape, "single": single}

    def conv_relu(h, name):
        out, cols = _conv3_forward(h, t[name + ".w"], t[name + ".b"])
        mask = out > 0
        cache[name] = (cols, h.shape, mask)
        return out * mask

    h = x
    skips = []
    for lvl in range(spec.depth):
        h = conv_relu(h, f"enc{lvl}.conv1")
        h = conv_relu(h, f"enc{lvl}.conv2")
        skips.append(h)
        pooled, idx = _pool_forward(h)
        cache[f"pool{lvl}"] = (h.shape, idx)
        h = pooled
    h = conv_relu(h, "bottleneck.conv1")
    h = conv_relu(h, "bottleneck.conv2")
    for lvl in reversed(range(spec.depth)):
        up = _up_forward(h)
        cache[f"cat{lvl}"] = up.shape[-1]
        h = np.concatenate([up, skips[lvl]], axis=-1)
        h = conv_relu(h, f"dec{lvl}.conv1")
        h = conv_relu(h, f"dec{lvl}.conv2")
    B, H, W, C = h.shape
    hw, hb = t["head.w"], t["head.b"]
    logits = (h.reshape(-1, C) @ hw.reshape(C, -1) + hb).reshape(B, H, W, -1)
    cache["head"] = h
    if single:
        logits = logits[0]
    return (logits, cache) if keep_cache else logits


def backward(params: ModelParams, image, upstream_grad, cache=None) -> np.ndarray:
    """Gradient of sum(logits * upstream_grad) w.r.t. the flat parameters."""
    if cache is None:
        _, cache = forward(params, image, keep_cache=True)
    spec = params.spec
    t = params.tensors()
    grad = np.zeros_like(params.flat)
    g = params.tensors(grad)
    d = np.asarray(upstream_grad, dtype=params.flat.dtype)
    if cache["single"]:
        d = d[None]

    def conv_relu_back(dh, name):
        cols, x_shape, mask = cache[name]
        dx, dw, db = _conv3_backward(dh * mask, cols, t[name + ".w"], x_shape)
        g[name + ".w"][...] = dw
        g[name + ".b"][...] = db
        return dx

    h = cache["head"]
    B, H, W, C = h.shape
    d2 = d.reshape(-1, d.shape[-1])
    g["head.w"][...] = (h.reshape(-1, C).T @ d2).reshape(g["head.w"].shape)
    g["head.b"][...] = d2.sum(0)
    dh = (d2 @ t["head.w"].reshape(C, -1).T).reshape(B, H, W, C)

    dskips = {}
    for lvl in range(spec.depth):
        dh = conv_relu_back(dh, f"dec{lvl}.conv2")
        dh = conv_relu_back(dh, f"dec{lvl}.conv1")
        n_up = cache[f"cat{lvl}"]
        dskips[lvl] = dh[..., n_up:]
        dh = _up_backward(dh[..., :n_up])
    dh = conv_relu_back(dh, "bottleneck.conv2")
    dh = conv_relu_back(dh, "bottleneck.conv1")
    for lvl in reversed(range(spec.depth)):
        shape, idx = cache[f"pool{lvl}"]
        dh = _pool_backward(dh, idx, shape) + dskips[lvl]
        dh = conv_relu_back(dh, f"enc{lvl}.conv2")
        dh = conv_relu_back(dh, f"enc{lvl}.conv1")
    return grad


def sgd_step(params: ModelParams, grad, lr: float, freeze_mask=None) -> ModelParams:
    """Plain SGD; entries under ``freeze_mask`` are copied through untouched."""
    grad = np.asarray(grad)
    if grad.shape != params.flat.shape:
        raise ValueError("gradient does not match parameter layout")
    new = params.flat - lr * grad
    if freeze_mask is not None:
        freeze_mask = np.asarray(freeze_mask)
        new[freeze_mask] = params.flat[freeze_mask]
    return params.with_flat(new)


# ---------------------------------------------------------------- checkpoints
#
# Byte layout:
#   8 bytes   magic "FPSEGCK1"
#   4 bytes   header length L, uint32 little-endian
#   L bytes   header, UTF-8 JSON with sorted keys:
#             {"dtype": "<f4", "meta": {...}, "net": NetSpec fields, "num_params": P}
#   4*P bytes parameters, IEEE-754 float32 little-endian, layout order

def save_checkpoint(path, params: ModelParams, meta: dict | None = None) -> None:
    header = {
        "dtype": "<f4",
        "meta": meta or {},
        "net": params.spec.to_dict(),
        "num_params": int(params.size),
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(params.flat.astype("<f4").tobytes())


def load_checkpoint(path):
    """Returns ``(params, meta)``; parameters come back as float32."""
    data = Path(path).read_bytes()
    if data[:8] != CHECKPOINT_MAGIC:
        raise ValueError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack("<I", data[8:12])
    header = json.loads(data[12: 12 + n].decode("utf-8"))
    spec = NetSpec(**header["net"])
    flat = np.frombuffer(data[12 + n:], dtype="<f4").astype(np.float32)
    if flat.size != header["num_params"]:
        raise ValueError(f"{path}: expected {header['num_params']} parameters, found {flat.size}")
    layout, encoder_mask = make_layout(spec)
    return ModelParams(spec, flat, layout, encoder_mask), header.get("meta", {})
