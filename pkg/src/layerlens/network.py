"""Declarative network description with tap points and weight serialization.

A network is an ordered list of layer descriptors validated into a
``NetworkSpec`` (shape chain checked at construction). Tap points are the
post-relu outputs of the conv layers, indexed 1..L; tap 0 denotes the input
image. ``ModelParams`` carries the learned arrays, per-layer frozen flags
and a provenance record (training scheme, split sizes, seed).
"""

from __future__ import annotations

import hashlib
import struct
from dataclasses import dataclass, field

import numpy as np

from . import numerics as nm
from .errors import (
    BadMagic,
    ChecksumMismatch,
    ShapeError,
    SpecError,
    SpecMismatch,
    TruncatedFile,
    VersionMismatch,
)
from .seeding import make_rng


# ---------------------------------------------------------------------------
# layer descriptors


@dataclass(frozen=True)
class Conv:
    out_channels: int
    kernel: int = 3
    stride: int = 1
    pad: int = 1


@dataclass(frozen=True)
class Relu:
    pass


@dataclass(frozen=True)
class Pool:
    window: int = 2
    stride: int = 2


@dataclass(frozen=True)
class Flatten:
    pass


@dataclass(frozen=True)
class Dense:
    units: int


Layer = Conv | Relu | Pool | Flatten | Dense

_KIND = {Conv: "conv", Relu: "relu", Pool: "pool", Flatten: "flatten", Dense: "dense"}


class NetworkSpec:
    """Validated layer graph: shapes chain, taps enumerated, hashable text form."""

    def __init__(self, layers, input_shape, class_count: int):
        self.layers: tuple[Layer, ...] = tuple(layers)
        self.input_shape = tuple(int(v) for v in input_shape)
        self.class_count = int(class_count)
        if len(self.input_shape) != 3:
            raise SpecError(f"input_shape must be (c, h, w), got {input_shape}")
        if self.class_count < 1:
            raise SpecError("class_count must be >= 1")
        self.layer_shapes: list[tuple] = []  # output shape per layer: (c,h,w) or (d,)
        self.tap_layers: list[int] = []      # layer index whose output is tap t (1-based t)
        self._validate()

    def _validate(self) -> None:
        shape = self.input_shape
        flat = False
        last_conv_at = -1
        for i, layer in enumerate(self.layers):
            if isinstance(layer, Conv):
                if flat:
                    raise SpecError(f"layer {i}: conv after flatten")
                c, h, w = shape
                oh = nm._out_len(h, layer.kernel, layer.stride, layer.pad)
                ow = nm._out_len(w, layer.kernel, layer.stride, layer.pad)
                if oh < 1 or ow < 1:
                    raise SpecError(
                        f"layer {i}: spatial collapse, conv on {shape} gives ({oh}, {ow})"
                    )
                shape = (layer.out_channels, oh, ow)
                self.tap_layers.append(i)  # provisional: capture at conv output
                last_conv_at = i
            elif isinstance(layer, Relu):
                if i == last_conv_at + 1 and self.tap_layers:
                    self.tap_layers[-1] = i  # capture post-relu instead
            elif isinstance(layer, Pool):
                if flat:
                    raise SpecError(f"layer {i}: pool after flatten")
                c, h, w = shape
                if layer.window > h or layer.window > w:
                    raise SpecError(
                        f"layer {i}: spatial collapse, pool window {layer.window} "
                        f"exceeds {shape}"
                    )
                shape = (
                    c,
                    nm._out_len(h, layer.window, layer.stride, 0),
                    nm._out_len(w, layer.window, layer.stride, 0),
                )
            elif isinstance(layer, Flatten):
                if flat:
                    raise SpecError(f"layer {i}: flatten twice")
                shape = (int(np.prod(shape)),)
                flat = True
            elif isinstance(layer, Dense):
                if not flat:
                    raise SpecError(f"layer {i}: dense before flatten")
                shape = (layer.units,)
            else:
                raise SpecError(f"layer {i}: unknown descriptor {layer!r}")
            self.layer_shapes.append(shape)
        if not self.layers or not isinstance(self.layers[-1], Dense):
            raise SpecError("network must end in a dense classifier layer")
        if self.layer_shapes[-1] != (self.class_count,):
            raise SpecError(
                f"final dense units {self.layer_shapes[-1]} != class_count {self.class_count}"
            )

    @property
    def tap_count(self) -> int:
        return len(self.tap_layers)

    def tap_shape(self, tap: int) -> tuple:
        """Activation shape (c, h, w) at a tap; tap 0 is the input image."""
        if tap == 0:
            return self.input_shape
        return self.layer_shapes[self.tap_layers[tap - 1]]

    def shape_before(self, layer_idx: int) -> tuple:
        return self.input_shape if layer_idx == 0 else self.layer_shapes[layer_idx - 1]

    def canonical_text(self) -> str:
        lines = ["layerlens-netspec 1"]
        lines.append("input " + " ".join(str(v) for v in self.input_shape))
        lines.append(f"classes {self.class_count}")
        for layer in self.layers:
            kind = _KIND[type(layer)]
            if isinstance(layer, Conv):
                lines.append(
                    f"layer conv out={layer.out_channels} kernel={layer.kernel} "
                    f"stride={layer.stride} pad={layer.pad}"
                )
            elif isinstance(layer, Pool):
                lines.append(f"layer pool window={layer.window} stride={layer.stride}")
            elif isinstance(layer, Dense):
                lines.append(f"layer dense units={layer.units}")
            else:
                lines.append(f"layer {kind}")
        return "\n".join(lines) + "\n"

    def spec_hash(self) -> bytes:
        return hashlib.sha256(self.canonical_text().encode("utf-8")).digest()

    def param_shapes(self, layer_idx: int) -> tuple[tuple, ...]:
        layer = self.layers[layer_idx]
        if isinstance(layer, Conv):
            c = self.shape_before(layer_idx)[0]
            return ((layer.out_channels, c, layer.kernel, layer.kernel), (layer.out_channels,))
        if isinstance(layer, Dense):
            d = self.shape_before(layer_idx)[0]
            return ((layer.units, d), (layer.units,))
        return ()


def build_six_layer_net(input_shape, class_count: int, channel_widths, kernel: int = 3) -> NetworkSpec:
    """Six conv(+relu) blocks, 2x2 max-pooling after blocks 2, 4 and 6, then
    flatten + dense classifier. One tap per conv layer."""
    widths = tuple(int(w) for w in channel_widths)
    if len(widths) != 6:
        raise SpecError(f"expected 6 channel widths, got {len(widths)}")
    layers: list[Layer] = []
    for i, w in enumerate(widths):
        layers.append(Conv(w, kernel=kernel, stride=1, pad=kernel // 2))
        layers.append(Relu())
        if i % 2 == 1:
            layers.append(Pool(2, 2))
    layers.append(Flatten())
    layers.append(Dense(class_count))
    return NetworkSpec(layers, input_shape, class_count)


# ---------------------------------------------------------------------------
# parameters


@dataclass(frozen=True)
class Provenance:
    scheme: str            # "INIT" | "E2E" | "CL"
    splits: tuple[int, ...]  # part sizes of the cascade plan; empty otherwise
    seed: int


@dataclass
class ModelParams:
    blocks: list  # per layer: tuple of ndarrays, or None for parameterless layers
    frozen: list[bool]
    provenance: Provenance

    def copy(self) -> "ModelParams":
        blocks = [None if b is None else tuple(a.copy() for a in b) for b in self.blocks]
        return ModelParams(blocks, list(self.frozen), self.provenance)

    def param_count(self) -> int:
        return sum(a.size for b in self.blocks if b for a in b)


def init_params(spec: NetworkSpec, seed: int) -> ModelParams:
    """Fan-in-scaled uniform init (limit sqrt(6/fan_in)), zero biases, seeded."""
    rng = make_rng(seed)
    blocks = []
    for i, layer in enumerate(spec.layers):
        shapes = spec.param_shapes(i)
        if not shapes:
            blocks.append(None)
            continue
        w_shape, b_shape = shapes
        fan_in = int(np.prod(w_shape[1:]))
        limit = np.sqrt(6.0 / fan_in)
        w = rng.uniform(-limit, limit, size=w_shape)
        blocks.append((w, np.zeros(b_shape)))
    return ModelParams(blocks, [False] * len(spec.layers), Provenance("INIT", (), seed))


# ---------------------------------------------------------------------------
# forward / backward engine


def _layer_forward(layer: Layer, block, x):
    if isinstance(layer, Conv):
        return nm.conv2d(x, block[0], block[1], layer.stride, layer.pad)
    if isinstance(layer, Relu):
        return nm.relu(x)
    if isinstance(layer, Pool):
        return nm.maxpool2d(x, layer.window, layer.stride)
    if isinstance(layer, Flatten):
        return x.reshape(x.shape[0], -1)
    if isinstance(layer, Dense):
        return nm.dense(x, block[0], block[1])
    raise SpecError(f"unknown layer {layer!r}")


def _layer_backward(layer: Layer, block, x_in, d_out):
    """Returns (d_input, param_grads_or_None)."""
    if isinstance(layer, Conv):
        d_x, d_k, d_b = nm.conv2d_backward(x_in, block[0], d_out, layer.stride, layer.pad)
        return d_x, (d_k, d_b)
    if isinstance(layer, Relu):
        return nm.relu_backward(x_in, d_out), None
    if isinstance(layer, Pool):
        return nm.maxpool2d_backward(x_in, d_out, layer.window, layer.stride), None
    if isinstance(layer, Flatten):
        return d_out.reshape(x_in.shape), None
    if isinstance(layer, Dense):
        d_x, d_w, d_b = nm.dense_backward(x_in, block[0], d_out)
        return d_x, (d_w, d_b)
    raise SpecError(f"unknown layer {layer!r}")


def layer_grad(layer: Layer, block, x_in, d_out) -> nm.LayerGrad:
    """Backward pass packed into the uniform carrier type."""
    d_input, grads = _layer_backward(layer, block, x_in, d_out)
    return nm.LayerGrad.pack(d_input, *(grads or ()))


def run_span(spec: NetworkSpec, params: ModelParams, x, lo: int, hi: int, want_caches: bool = False):
    """Run layers lo..hi inclusive on x; optionally keep per-layer inputs."""
    caches = [] if want_caches else None
    for i in range(lo, hi + 1):
        if want_caches:
            caches.append(x)
        x = _layer_forward(spec.layers[i], params.blocks[i], x)
    return (x, caches) if want_caches else x


def _check_batch(spec: NetworkSpec, batch) -> np.ndarray:
    x = nm.check_tensor4(batch, "batch")
    if x.shape[1:] != spec.input_shape:
        raise ShapeError(
            f"batch shape {x.shape} does not match network input {spec.input_shape}"
        )
    return x


def forward_with_taps(spec: NetworkSpec, params: ModelParams, batch, depth: int | None = None):
    """Forward pass capturing tap activations.

    ``depth`` limits how many taps are computed; activations are captured for
    every tap <= depth. Class scores are returned only for a full-depth run
    (depth None or equal to the tap count); otherwise execution stops right
    after the deepest requested tap and the first element is None.
    """
    x = _check_batch(spec, batch)
    if depth is None:
        depth = spec.tap_count
    if not 0 <= depth <= spec.tap_count:
        raise SpecError(f"depth {depth} out of range 0..{spec.tap_count}")
    full = depth == spec.tap_count
    taps: dict[int, np.ndarray] = {}
    if depth == 0 and not full:
        return None, taps
    last_layer = len(spec.layers) - 1 if full else spec.tap_layers[depth - 1]
    tap_of_layer = {li: t + 1 for t, li in enumerate(spec.tap_layers)}
    for i in range(last_layer + 1):
        x = _layer_forward(spec.layers[i], params.blocks[i], x)
        t = tap_of_layer.get(i)
        if t is not None and t <= depth:
            taps[t] = x
    return (x if full else None), taps


def backward_to_tap(spec: NetworkSpec, params: ModelParams, batch, class_index: int, tap: int):
    """Gradient of the selected class score w.r.t. the tap's activations.

    The score is summed over the batch; since samples are independent the
    result rows are per-sample gradients. Tap 0 yields the input gradient.
    """
    x = _check_batch(spec, batch)
    if not 0 <= tap <= spec.tap_count:
        raise SpecError(f"tap {tap} out of range 0..{spec.tap_count}")
    if not 0 <= class_index < spec.class_count:
        raise SpecError(f"class index {class_index} out of range 0..{spec.class_count}")
    last = len(spec.layers) - 1
    scores, caches = run_span(spec, params, x, 0, last, want_caches=True)
    g = np.zeros_like(scores)
    g[:, class_index] = 1.0
    boundary = -1 if tap == 0 else spec.tap_layers[tap - 1]
    for i in range(last, boundary, -1):
        g, _ = _layer_backward(spec.layers[i], params.blocks[i], caches[i], g)
    return g


# ---------------------------------------------------------------------------
# auxiliary classifier heads (global average pool -> dense)


@dataclass
class AuxHead:
    """Probe classifier attached at a tap: global average pool then dense."""

    tap: int
    weights: np.ndarray  # (class_count, channels)
    bias: np.ndarray     # (class_count,)


def init_aux_head(spec: NetworkSpec, tap: int, seed: int) -> AuxHead:
    channels = spec.tap_shape(tap)[0]
    rng = make_rng(seed)
    limit = np.sqrt(6.0 / channels)
    w = rng.uniform(-limit, limit, size=(spec.class_count, channels))
    return AuxHead(tap, w, np.zeros(spec.class_count))


def aux_head_forward(head: AuxHead, acts) -> np.ndarray:
    pooled = nm.check_tensor4(acts, "aux head input").mean(axis=(2, 3))
    return nm.dense(pooled, head.weights, head.bias)


def aux_head_backward(head: AuxHead, acts, d_scores):
    """Returns (d_acts, d_weights, d_bias)."""
    acts = nm.check_tensor4(acts, "aux head input")
    pooled = acts.mean(axis=(2, 3))
    d_pooled, d_w, d_b = nm.dense_backward(pooled, head.weights, d_scores)
    n, c, h, w = acts.shape
    d_acts = np.broadcast_to(d_pooled[:, :, None, None] / (h * w), acts.shape).copy()
    return d_acts, d_w, d_b


# ---------------------------------------------------------------------------
# weight serialization

_MAGIC = b"LLW1"
_VERSION = 1


def _write_array(parts: list[bytes], a: np.ndarray) -> None:
    a = np.ascontiguousarray(a, dtype="<f8")
    parts.append(struct.pack("<B", a.ndim))
    parts.append(struct.pack(f"<{a.ndim}I", *a.shape))
    parts.append(a.tobytes())


def save_weights(spec: NetworkSpec, params: ModelParams, path) -> None:
    """Binary weight file: fixed header, little-endian float64 blocks, trailing
    SHA-256 checksum. A human-readable spec document is written alongside."""
    prov = params.provenance
    scheme = prov.scheme.encode("utf-8")
    parts: list[bytes] = [_MAGIC, struct.pack("<I", _VERSION)]
    parts.append(struct.pack("<Q", prov.seed % 2**64))
    parts.append(struct.pack("<B", len(scheme)))
    parts.append(scheme)
    parts.append(struct.pack("<B", len(prov.splits)))
    parts.append(struct.pack(f"<{len(prov.splits)}H", *prov.splits))
    parts.append(spec.spec_hash())
    parts.append(struct.pack("<H", len(params.frozen)))
    parts.append(bytes(1 if f else 0 for f in params.frozen))
    parts.append(struct.pack("<H", len(params.blocks)))
    for block in params.blocks:
        arrays = block or ()
        parts.append(struct.pack("<B", len(arrays)))
        for a in arrays:
            _write_array(parts, a)
    payload = b"".join(parts)
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload + digest)
    with open(str(path) + ".spec", "w", encoding="utf-8") as fh:
        fh.write(spec.canonical_text())
        fh.write(f"scheme {prov.scheme}\n")
        if prov.splits:
            fh.write("splits " + " ".join(str(s) for s in prov.splits) + "\n")
        fh.write(f"seed {prov.seed}\n")


class _Reader:
    def __init__(self, buf: bytes):
        self.buf = buf
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise TruncatedFile(
                f"weight file truncated: needed {n} bytes at offset {self.pos}, "
                f"have {len(self.buf) - self.pos}"
            )
        out = self.buf[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def _read_array(r: _Reader) -> np.ndarray:
    (ndim,) = r.unpack("<B")
    shape = r.unpack(f"<{ndim}I")
    count = int(np.prod(shape)) if ndim else 1
    data = np.frombuffer(r.take(8 * count), dtype="<f8").reshape(shape)
    return data.astype(np.float64)


def load_weights(path, spec: NetworkSpec) -> ModelParams:
    """Load and validate a weight file against ``spec``.

    Failure modes are reported distinctly: bad magic, version mismatch,
    truncation, checksum failure, and spec mismatch (naming the first layer
    whose stored shapes disagree).
    """
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < len(_MAGIC) + 4 + 32:
        raise TruncatedFile(f"weight file too short ({len(raw)} bytes)")
    if raw[:4] != _MAGIC:
        raise BadMagic(f"not a weight file: magic {raw[:4]!r} != {_MAGIC!r}")
    (version,) = struct.unpack("<I", raw[4:8])
    if version != _VERSION:
        raise VersionMismatch(f"weight file version {version}, expected {_VERSION}")
    payload, digest = raw[:-32], raw[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise ChecksumMismatch("weight file checksum does not match contents")

    r = _Reader(payload)
    r.take(8)  # magic + version already validated
    (seed,) = r.unpack("<Q")
    (scheme_len,) = r.unpack("<B")
    scheme = r.take(scheme_len).decode("utf-8")
    (n_splits,) = r.unpack("<B")
    splits = r.unpack(f"<{n_splits}H") if n_splits else ()
    stored_hash = r.take(32)
    (n_frozen,) = r.unpack("<H")
    frozen = [b == 1 for b in r.take(n_frozen)]
    (n_blocks,) = r.unpack("<H")
    blocks = []
    for _ in range(n_blocks):
        (n_arrays,) = r.unpack("<B")
        blocks.append(tuple(_read_array(r) for _ in range(n_arrays)) or None)

    if stored_hash != spec.spec_hash():
        if n_blocks != len(spec.layers):
            raise SpecMismatch(
                f"weight file has {n_blocks} layers, spec has {len(spec.layers)}"
            )
        for i in range(n_blocks):
            expect = spec.param_shapes(i)
            got = tuple(a.shape for a in (blocks[i] or ()))
            if got != expect:
                kind = _KIND[type(spec.layers[i])]
                raise SpecMismatch(
                    f"layer {i} ({kind}): file shapes {got} vs spec shapes {expect}"
                )
        raise SpecMismatch("spec hash differs (layer shapes compatible)")
    return ModelParams(blocks, frozen, Provenance(scheme, tuple(splits), seed))
