"""FireSRnet: a small fully-convolutional super-resolution network.

The network maps a 3-channel low-resolution stack (fire, temp_dev, burnable)
to a single high-resolution fire-exposure map. Four convolution stages with
kernel sizes 9, 5, 3, 1 are interleaved with 2x bilinear upsampling stages;
the number of upsampling stages is log2 of the scale factor, so all three
scale variants share the layer stack and the exact trainable parameter count.

Layout per scale (up = 2x bilinear upsample, convK = KxK same-padded conv):

    2x: up, conv9, conv5, conv3, conv1
    4x: up, conv9, up, conv5, conv3, conv1
    8x: up, conv9, up, conv5, up, conv3, conv1

The first three convolutions use ReLU; the final 1x1 convolution is linear
and inference clamps its output at 0 (fire exposure is nonnegative).
Upsampling reuses the clamped half-pixel-center bilinear weights from
:mod:`firesr.raster`, so the network and the standalone resampler agree.

Implementation notes: samples are processed one at a time in channels-last
layout. Each convolution lowers its input to a row-panel column matrix (one
contiguous k*channels run per output pixel per kernel row) and runs a single
GEMM; per-sample working sets then stay cache-resident, which matters far
more than batching on the narrow machines this targets. A :class:`Workspace`
recycles the large scratch buffers; callers that do not pass one get private
call-local scratch, so shared weights remain safe to use from many threads.
Arrays are float64 internally; weights files store float32 by default.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import as_strided

from .errors import DataError, FormatError
from .raster import INPUT_ROLES, ChannelStack, Raster, bilinear_matrix

FSW_MAGIC = b"FSW1"

KERNEL_SIZES = (9, 5, 3, 1)
DEFAULT_CHANNELS = (16, 8, 8)
SUPPORTED_SCALES = (2, 4, 8)
# layer indices before which a 2x upsample is applied
UPSAMPLE_LAYOUT = {2: (0,), 4: (0, 1), 8: (0, 1, 2)}

_DTYPES = {"f32": "<f4", "f64": "<f8"}


@dataclass
class ConvLayer:
    """Same-padded stride-1 convolution parameters."""

    kernels: np.ndarray  # (out_channels, in_channels, k, k)
    biases: np.ndarray  # (out_channels,)
    activation: str  # "relu" or "linear"

    def __post_init__(self):
        self.kernels = np.asarray(self.kernels, dtype=np.float64)
        self.biases = np.asarray(self.biases, dtype=np.float64)
        if self.kernels.ndim != 4 or self.kernels.shape[2] != self.kernels.shape[3]:
            raise DataError(f"kernels must be (out, in, k, k), got {self.kernels.shape}")
        if self.kernel_size % 2 != 1:
            raise DataError(f"kernel size must be odd, got {self.kernel_size}")
        if self.biases.shape != (self.out_channels,):
            raise DataError(
                f"biases shape {self.biases.shape} != ({self.out_channels},)"
            )
        if self.activation not in ("relu", "linear"):
            raise DataError(f"unknown activation {self.activation!r}")

    @property
    def out_channels(self) -> int:
        return self.kernels.shape[0]

    @property
    def in_channels(self) -> int:
        return self.kernels.shape[1]

    @property
    def kernel_size(self) -> int:
        return self.kernels.shape[2]

    @property
    def parameter_count(self) -> int:
        return self.kernels.size + self.biases.size


@dataclass
class NetworkWeights:
    """Ordered convolution stack plus the upsample schedule for one scale."""

    scale: int
    layers: list[ConvLayer]
    upsample_before: tuple[int, ...] = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        if self.scale not in SUPPORTED_SCALES:
            raise DataError(f"scale must be one of {SUPPORTED_SCALES}, got {self.scale}")
        if self.upsample_before is None:
            self.upsample_before = UPSAMPLE_LAYOUT[self.scale]
        self.upsample_before = tuple(self.upsample_before)
        sizes = tuple(layer.kernel_size for layer in self.layers)
        if sizes != KERNEL_SIZES:
            raise DataError(f"kernel sizes must be {KERNEL_SIZES} in order, got {sizes}")
        if len(self.upsample_before) != int(np.log2(self.scale)):
            raise DataError(
                f"{len(self.upsample_before)} upsample stages cannot realize scale {self.scale}"
            )
        if self.layers[0].in_channels != len(INPUT_ROLES):
            raise DataError(
                f"first layer expects {self.layers[0].in_channels} channels, "
                f"need {len(INPUT_ROLES)}"
            )
        if self.layers[-1].out_channels != 1:
            raise DataError("last layer must produce a single output map")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if nxt.in_channels != prev.out_channels:
                raise DataError(
                    f"channel chain broken: {prev.out_channels} -> {nxt.in_channels}"
                )

    @property
    def channel_config(self) -> tuple[int, ...]:
        return tuple(layer.out_channels for layer in self.layers[:-1])

    @property
    def parameter_count(self) -> int:
        return sum(layer.parameter_count for layer in self.layers)


def build_network(
    scale: int,
    channel_config: tuple[int, int, int] = DEFAULT_CHANNELS,
    seed: int = 0,
) -> NetworkWeights:
    """Build a freshly initialized network for the given scale variant.

    Kernels are drawn from a zero-mean normal with std sqrt(2 / (k*k*in)),
    biases start at zero. The default (16, 8, 8) channel configuration has
    exactly 7705 trainable parameters at every scale.
    """
    if scale not in SUPPORTED_SCALES:
        raise DataError(f"scale must be one of {SUPPORTED_SCALES}, got {scale}")
    c1, c2, c3 = channel_config
    if min(c1, c2, c3) < 1:
        raise DataError(f"channel counts must be >= 1, got {channel_config}")
    chain = (len(INPUT_ROLES), c1, c2, c3, 1)
    rng = np.random.default_rng([seed, scale])
    layers = []
    for i, k in enumerate(KERNEL_SIZES):
        cin, cout = chain[i], chain[i + 1]
        std = np.sqrt(2.0 / (k * k * cin))
        kernels = rng.normal(0.0, std, size=(cout, cin, k, k))
        layers.append(
            ConvLayer(
                kernels=kernels,
                biases=np.zeros(cout),
                activation="linear" if i == len(KERNEL_SIZES) - 1 else "relu",
            )
        )
    return NetworkWeights(scale=scale, layers=layers)


# ---------------------------------------------------------------------------
# Compute engine: single-sample channels-last ops over a reusable workspace

class Workspace(dict):
    """Named scratch buffers, reused across calls of matching shape.

    Buffers come back zero-initialized on (re)allocation, so padded arrays
    keep their zero borders for free as long as callers only write interiors.
    """

    def buffer(self, name: str, shape: tuple[int, ...]) -> np.ndarray:
        buf = super().get(name)
        if buf is None or buf.shape != shape:
            buf = np.zeros(shape)
            self[name] = buf
        return buf


def _fill_columns(xp: np.ndarray, h: int, w: int, k: int, ci: int, cols: np.ndarray) -> None:
    """Lower a padded (Hp, Wp, Ci) image into (h*w, k*k*ci) rows.

    For each kernel row the k*ci values under a sliding window are one
    contiguous run in channels-last memory, so the fill is k strided block
    copies rather than a gather.
    """
    view = cols.reshape(h, w, k, k * ci)
    for ky in range(k):
        block = xp[ky : ky + h]
        src = as_strided(
            block,
            shape=(h, w, k * ci),
            strides=(block.strides[0], block.strides[1], xp.itemsize),
        )
        view[:, :, ky, :] = src


def _conv_single(
    x: np.ndarray, kernels: np.ndarray, biases: np.ndarray, ws: Workspace, tag: str
) -> tuple[np.ndarray, np.ndarray]:
    """Same-padded correlation of one (H, W, Ci) image; returns (out, columns)."""
    h, w, ci = x.shape
    co, _, k, _ = kernels.shape
    p = k // 2
    if p:
        xp = ws.buffer(f"{tag}.pad", (h + 2 * p, w + 2 * p, ci))
        xp[p : p + h, p : p + w, :] = x
        cols = ws.buffer(f"{tag}.cols", (h * w, k * k * ci))
        _fill_columns(xp, h, w, k, ci, cols)
    else:
        cols = x.reshape(h * w, ci)
    kmat = kernels.transpose(2, 3, 1, 0).reshape(k * k * ci, co)
    out = ws.buffer(f"{tag}.out", (h * w, co))
    np.dot(cols, kmat, out=out)
    out += biases
    return out.reshape(h, w, co), cols


def _conv_param_grads(
    cols: np.ndarray, grad: np.ndarray, kernel_shape: tuple[int, ...]
) -> tuple[np.ndarray, np.ndarray]:
    """Kernel/bias gradients from cached columns and an (H, W, Co) gradient."""
    co, ci, k, _ = kernel_shape
    g2 = grad.reshape(-1, co)
    dkmat = cols.T @ g2  # (k*k*ci, co)
    dk = dkmat.reshape(k, k, ci, co).transpose(3, 2, 0, 1)
    return dk, g2.sum(axis=0)


def _conv_input_grad(
    grad: np.ndarray, kernels: np.ndarray, ws: Workspace, tag: str
) -> np.ndarray:
    """Adjoint of _conv_single w.r.t. its input: correlate the gradient with
    the 180-degree-rotated, channel-transposed kernels."""
    adj = kernels[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
    out, _ = _conv_single(grad, adj, np.zeros(adj.shape[0]), ws, tag)
    return out


def _upsample_single(x: np.ndarray) -> np.ndarray:
    """2x bilinear upsample of one (H, W, C) image (raster semantics)."""
    h, w, c = x.shape
    rows = bilinear_matrix(h, 2 * h)
    cols = bilinear_matrix(w, 2 * w)
    z = np.matmul(rows, x.reshape(h, w * c)).reshape(2 * h, w, c)
    return np.matmul(cols, z)


def _upsample_adjoint_single(grad: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`_upsample_single` (transposed weight matrices)."""
    h2, w2, c = grad.shape
    rows = bilinear_matrix(h2 // 2, h2)
    cols = bilinear_matrix(w2 // 2, w2)
    z = np.matmul(cols.T, grad)  # (h2, w, c)
    return np.matmul(rows.T, z.reshape(h2, (w2 // 2) * c)).reshape(h2 // 2, w2 // 2, c)


def forward_single(
    net: NetworkWeights, x_cl: np.ndarray, ws: Workspace | None = None, keep_cache: bool = False
) -> tuple[np.ndarray, list | None]:
    """Run the network on one channels-last (h, w, 3) image.

    Returns the (h*s, w*s, 1) pre-clamp output plus, with ``keep_cache``, the
    per-layer records backpropagation needs: (columns, pre-activation). Cached
    arrays alias workspace buffers, so consume them before the next forward
    that shares the workspace.
    """
    if ws is None:
        ws = Workspace()
    cache = [] if keep_cache else None
    cur = x_cl
    for i, layer in enumerate(net.layers):
        if i in net.upsample_before:
            cur = _upsample_single(cur)
        pre, cols = _conv_single(cur, layer.kernels, layer.biases, ws, f"conv{i}")
        if keep_cache:
            cache.append((cols, pre))
        cur = np.maximum(pre, 0.0) if layer.activation == "relu" else pre
    return cur, cache


def backward_single(
    net: NetworkWeights,
    cache: list,
    upstream_cl: np.ndarray,
    kernel_grads: list[np.ndarray],
    bias_grads: list[np.ndarray],
    ws: Workspace | None = None,
    need_input_grad: bool = True,
) -> np.ndarray | None:
    """Backpropagate one sample's output gradient, accumulating into the
    given per-layer gradient arrays; returns the input gradient (h, w, 3)
    unless ``need_input_grad`` is off (training does not use it)."""
    if ws is None:
        ws = Workspace()
    g = upstream_cl
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        cols, pre = cache[i]
        if layer.activation == "relu":
            g = g * (pre > 0)
        dk, db = _conv_param_grads(cols, g, layer.kernels.shape)
        kernel_grads[i] += dk
        bias_grads[i] += db
        if i == 0 and not need_input_grad:
            return None
        g = _conv_input_grad(g, layer.kernels, ws, f"bwd{i}")
        if i in net.upsample_before:
            g = _upsample_adjoint_single(g)
    return g


# ---------------------------------------------------------------------------
# Batched (channels-first) wrappers: the public array API

def conv2d_forward(x: np.ndarray, kernels: np.ndarray, biases: np.ndarray) -> np.ndarray:
    """Same-padded stride-1 correlation of a (B, Cin, H, W) batch."""
    b, ci, h, w = x.shape
    co = kernels.shape[0]
    out = np.empty((b, co, h, w))
    ws = Workspace()
    for i in range(b):
        x_cl = np.ascontiguousarray(x[i].transpose(1, 2, 0))
        out_cl, _ = _conv_single(x_cl, kernels, biases, ws, "conv")
        out[i] = out_cl.transpose(2, 0, 1)
    return out


def upsample2x(x: np.ndarray) -> np.ndarray:
    """2x bilinear upsample of a (B, C, H, W) batch (raster semantics)."""
    h, w = x.shape[2], x.shape[3]
    rows = bilinear_matrix(h, 2 * h)
    cols = bilinear_matrix(w, 2 * w)
    return np.matmul(rows, np.matmul(x, cols.T))


def upsample2x_backward(grad: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`upsample2x` (transposed weight matrices)."""
    h2, w2 = grad.shape[2], grad.shape[3]
    rows = bilinear_matrix(h2 // 2, h2)
    cols = bilinear_matrix(w2 // 2, w2)
    return np.matmul(rows.T, np.matmul(grad, cols))


def forward_batch(
    net: NetworkWeights, x: np.ndarray, keep_cache: bool = False, ws: Workspace | None = None
) -> tuple[np.ndarray, list | None]:
    """Run the network on a (B, 3, h, w) batch; output is (B, 1, h*s, w*s).

    With ``keep_cache`` each sample gets private scratch so the returned
    per-sample caches stay valid for :func:`firesr.training.backward_from_cache`.
    """
    if x.ndim != 4 or x.shape[1] != len(INPUT_ROLES):
        raise DataError(f"expected (batch, 3, h, w) input, got {x.shape}")
    b, _, h, w = x.shape
    out = np.empty((b, 1, h * net.scale, w * net.scale))
    caches = [] if keep_cache else None
    shared = ws if ws is not None else (None if keep_cache else Workspace())
    for i in range(b):
        ws_i = Workspace() if keep_cache else shared
        x_cl = np.ascontiguousarray(x[i].transpose(1, 2, 0))
        out_cl, cache = forward_single(net, x_cl, ws_i, keep_cache)
        out[i, 0] = out_cl[:, :, 0]
        if keep_cache:
            caches.append((cache, x_cl.shape))
    return out, caches


def forward(net: NetworkWeights, stack: ChannelStack, clamp: bool = True) -> Raster:
    """Super-resolve one 3-channel LR stack into a fire-exposure raster.

    Channels must carry the roles (fire, temp_dev, burnable) in that order.
    At inference the output is clamped at 0.
    """
    if stack.roles != INPUT_ROLES:
        raise DataError(f"channel roles must be {INPUT_ROLES} in order, got {stack.roles}")
    x_cl = np.ascontiguousarray(stack.array().transpose(1, 2, 0))
    out_cl, _ = forward_single(net, x_cl)
    values = out_cl[:, :, 0].copy()
    if clamp:
        np.maximum(values, 0.0, out=values)
    ref = stack.channels[0]
    return Raster(
        values=values,
        origin_lon=ref.origin_lon,
        origin_lat=ref.origin_lat,
        pixel_size=ref.pixel_size / net.scale,
    )


# ---------------------------------------------------------------------------
# Weights container (FSW): JSON header + raw little-endian float payload

def _weights_header(net: NetworkWeights, dtype: str, metadata: dict | None) -> dict:
    return {
        "format_version": 1,
        "scale": net.scale,
        "channel_config": list(net.channel_config),
        "upsample_before": list(net.upsample_before),
        "dtype": dtype,
        "layers": [
            {
                "kernel_shape": list(layer.kernels.shape),
                "activation": layer.activation,
            }
            for layer in net.layers
        ],
        "metadata": metadata or {},
    }


def save_weights(
    net: NetworkWeights,
    path: str | Path,
    dtype: str = "f32",
    metadata: dict | None = None,
) -> None:
    """Write the versioned weights container (kernels then biases per layer)."""
    if dtype not in _DTYPES:
        raise DataError(f"unsupported weights dtype {dtype!r}")
    header_bytes = json.dumps(
        _weights_header(net, dtype, metadata), sort_keys=True, separators=(",", ":")
    ).encode("utf-8")
    np_dtype = _DTYPES[dtype]
    with open(path, "wb") as f:
        f.write(FSW_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for layer in net.layers:
            f.write(layer.kernels.astype(np_dtype).tobytes(order="C"))
            f.write(layer.biases.astype(np_dtype).tobytes(order="C"))


def load_weights(path: str | Path) -> NetworkWeights:
    """Read a weights container, validating header/payload consistency."""
    net, _ = load_weights_with_metadata(path)
    return net


def load_weights_with_metadata(path: str | Path) -> tuple[NetworkWeights, dict]:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != FSW_MAGIC:
        raise FormatError(f"{path}: not a weights container (magic {blob[:4]!r})")
    (header_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: undecodable header: {exc}") from exc
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported version {header.get('format_version')!r}")
    if header.get("dtype") not in _DTYPES:
        raise FormatError(f"{path}: unsupported dtype {header.get('dtype')!r}")
    np_dtype = np.dtype(_DTYPES[header["dtype"]])
    payload = blob[8 + header_len :]
    expected = sum(
        int(np.prod(spec["kernel_shape"])) + spec["kernel_shape"][0]
        for spec in header["layers"]
    )
    if len(payload) != expected * np_dtype.itemsize:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares "
            f"{expected} values of {header['dtype']}"
        )
    layers = []
    offset = 0
    for spec in header["layers"]:
        shape = tuple(spec["kernel_shape"])
        n_k = int(np.prod(shape))
        n_b = shape[0]
        kernels = np.frombuffer(
            payload, dtype=np_dtype, count=n_k, offset=offset
        ).reshape(shape)
        offset += n_k * np_dtype.itemsize
        biases = np.frombuffer(payload, dtype=np_dtype, count=n_b, offset=offset)
        offset += n_b * np_dtype.itemsize
        layers.append(
            ConvLayer(
                kernels=kernels.astype(np.float64),
                biases=biases.astype(np.float64),
                activation=spec["activation"],
            )
        )
    net = NetworkWeights(
        scale=int(header["scale"]),
        layers=layers,
        upsample_before=tuple(header["upsample_before"]),
    )
    declared = tuple(header["channel_config"])
    if net.channel_config != declared:
        raise FormatError(
            f"{path}: header channel config {declared} does not match payload "
            f"layer shapes {net.channel_config}"
        )
    return net, header.get("metadata", {})


def export_layer1_filters(
    net: NetworkWeights, out_dir: str | Path, per_channel: bool = False
) -> list[Path]:
    """Export first-layer filters as min-max scaled PGM images.

    Default writes one image per filter (mean over input channels); with
    ``per_channel`` one image per filter and input role. Flat filters render
    as uniform mid-gray.
    """
    from .raster import write_pgm  # local import to keep module deps one-way

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    kernels = net.layers[0].kernels  # (c1, 3, 9, 9)
    paths = []
    for i in range(kernels.shape[0]):
        if per_channel:
            for c, role in enumerate(INPUT_ROLES):
                path = out_dir / f"layer1_filter_{i:02d}_{role}.pgm"
                write_pgm(kernels[i, c], path)
                paths.append(path)
        else:
            path = out_dir / f"layer1_filter_{i:02d}.pgm"
            write_pgm(kernels[i].mean(axis=0), path)
            paths.append(path)
    return paths
