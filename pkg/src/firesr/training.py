"""Training: MSE loss, reverse-mode gradients, Adam, and checkpointing.

Backpropagation is hand-written and mirrors the forward pass exactly: conv
backward is the adjoint of the same-padded correlation, upsample backward is
the transposed bilinear weight matrix, ReLU backward masks by forward-pass
positivity. Everything runs at float64 so finite-difference checks are
meaningful; serialized weights drop to float32, checkpoints keep float64 so a
resumed run is bit-identical to an uninterrupted one.

Determinism contract: the shuffle and crop sequence of epoch ``e`` is drawn
from a generator seeded with (seed, stream, e), never from a generator whose
state depends on earlier epochs, and per-sample gradient contributions are
summed in index order. Resuming from a checkpoint therefore replays exactly
what the uninterrupted run would have done.
"""

from __future__ import annotations

import json
import struct
import time
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .dataset import DatasetManifest
from .errors import DataError, DivergenceError, FormatError
from .model import (
    ConvLayer,
    NetworkWeights,
    Workspace,
    backward_single,
    build_network,
    forward_single,
)
from .raster import Raster

FSC_MAGIC = b"FSC1"

# seed-stream tag for per-epoch shuffle/crop generators
_EPOCH_STREAM = 1


@dataclass
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 8
    max_epochs: int = 500
    patience: int = 20  # 0 disables early stopping
    crop_size: int | None = None  # HR pixels, square, divisible by scale
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    channel_config: tuple[int, int, int] = (16, 8, 8)
    checkpoint_every: int | None = None

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise DataError(f"learning_rate must be > 0, got {self.learning_rate}")
        if self.batch_size < 1 or self.max_epochs < 1 or self.patience < 0:
            raise DataError("batch_size/max_epochs must be >= 1 and patience >= 0")
        self.channel_config = tuple(self.channel_config)

    def to_json(self) -> dict:
        d = asdict(self)
        d["channel_config"] = list(self.channel_config)
        return d

    @classmethod
    def from_json(cls, d: dict) -> "TrainConfig":
        return cls(**{**d, "channel_config": tuple(d["channel_config"])})


@dataclass
class GradientSet:
    """Loss gradients mirroring a network's layer parameters."""

    kernel_grads: list[np.ndarray]
    bias_grads: list[np.ndarray]

    @classmethod
    def zeros_like(cls, net: NetworkWeights) -> "GradientSet":
        return cls(
            kernel_grads=[np.zeros_like(layer.kernels) for layer in net.layers],
            bias_grads=[np.zeros_like(layer.biases) for layer in net.layers],
        )

    def reset(self) -> None:
        for arr in self.kernel_grads + self.bias_grads:
            arr[:] = 0.0

    def check_matches(self, net: NetworkWeights) -> None:
        for layer, dk, db in zip(net.layers, self.kernel_grads, self.bias_grads):
            if dk.shape != layer.kernels.shape or db.shape != layer.biases.shape:
                raise DataError("gradient shapes do not match network shapes")


@dataclass
class LogRow:
    epoch: int
    train_loss: float | None  # None for the pre-training validation row
    val_loss: float
    seconds: float
    best: bool


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Raster) else np.asarray(x, dtype=np.float64)


def mse_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared error over all pixels and its gradient w.r.t. pred."""
    p, t = _values(pred), _values(target)
    if p.shape != t.shape:
        raise DataError(f"mse_loss: shape mismatch {p.shape} vs {t.shape}")
    diff = p - t
    n = diff.size
    return float(np.mean(diff * diff)), (2.0 / n) * diff


def conv2d_backward(
    x: np.ndarray, kernels: np.ndarray, grad: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of the same-padded correlation: (d_kernels, d_biases, d_input).

    ``x`` is the layer input (B, Cin, H, W) and ``grad`` the output gradient
    (B, Cout, H, W); kernel and bias gradients are summed over the batch.
    d_input is the full correlation of the gradient with the 180-degree-rotated
    kernels, the exact adjoint of the forward correlation.
    """
    from .model import _conv_input_grad, _conv_param_grads, _conv_single

    if grad.shape[0] != x.shape[0] or grad.shape[2:] != x.shape[2:]:
        raise DataError(f"gradient shape {grad.shape} does not match input {x.shape}")
    d_kernels = np.zeros_like(kernels)
    d_biases = np.zeros(kernels.shape[0])
    d_input = np.empty_like(x)
    ws = Workspace()
    for i in range(x.shape[0]):
        x_cl = np.ascontiguousarray(x[i].transpose(1, 2, 0))
        g_cl = np.ascontiguousarray(grad[i].transpose(1, 2, 0))
        _, cols = _conv_single(x_cl, kernels, np.zeros(kernels.shape[0]), ws, "fwd")
        dk, db = _conv_param_grads(cols, g_cl, kernels.shape)
        d_kernels += dk
        d_biases += db
        d_input[i] = _conv_input_grad(g_cl, kernels, ws, "bwd").transpose(2, 0, 1)
    return d_kernels, d_biases, d_input


def backward_from_cache(
    net: NetworkWeights, caches: list, upstream: np.ndarray
) -> tuple[GradientSet, np.ndarray]:
    """Backpropagate an output gradient through cached forward activations.

    ``caches`` is what :func:`firesr.model.forward_batch` returns with
    ``keep_cache=True``; gradient contributions are summed over the batch in
    index order.
    """
    grads = GradientSet.zeros_like(net)
    input_shape = caches[0][1]
    d_input = np.empty((len(caches), input_shape[2], input_shape[0], input_shape[1]))
    ws = Workspace()
    for i, (cache, _) in enumerate(caches):
        g_cl = np.ascontiguousarray(upstream[i].transpose(1, 2, 0))
        dx_cl = backward_single(
            net, cache, g_cl, grads.kernel_grads, grads.bias_grads, ws
        )
        d_input[i] = dx_cl.transpose(2, 0, 1)
    return grads, d_input


def backward(
    net: NetworkWeights, x: np.ndarray, upstream: np.ndarray
) -> tuple[GradientSet, np.ndarray]:
    """Gradients of every kernel and bias plus the input gradient.

    ``x`` is a (B, 3, h, w) input batch, ``upstream`` the loss gradient at the
    network output, shape (B, 1, h*scale, w*scale).
    """
    from .model import forward_batch

    out, caches = forward_batch(net, x, keep_cache=True)
    if upstream.shape != out.shape:
        raise DataError(
            f"upstream gradient shape {upstream.shape} != output shape {out.shape}"
        )
    return backward_from_cache(net, caches, upstream)


class AdamState:
    """Adaptive-moment optimizer state for one network."""

    def __init__(self, net: NetworkWeights):
        self.t = 0
        self.m = [np.zeros_like(p) for p in _params(net)]
        self.v = [np.zeros_like(p) for p in _params(net)]

    def step(self, net: NetworkWeights, grads: GradientSet, cfg: TrainConfig) -> None:
        self.t += 1
        b1, b2 = cfg.beta1, cfg.beta2
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        for i, (p, g) in enumerate(zip(_params(net), _grads(grads))):
            self.m[i] = b1 * self.m[i] + (1.0 - b1) * g
            self.v[i] = b2 * self.v[i] + (1.0 - b2) * g * g
            p -= cfg.learning_rate * (self.m[i] / bc1) / (np.sqrt(self.v[i] / bc2) + cfg.epsilon)


def _params(net: NetworkWeights) -> list[np.ndarray]:
    out = []
    for layer in net.layers:
        out.append(layer.kernels)
        out.append(layer.biases)
    return out


def _grads(grads: GradientSet) -> list[np.ndarray]:
    out = []
    for dk, db in zip(grads.kernel_grads, grads.bias_grads):
        out.append(dk)
        out.append(db)
    return out


def _load_split(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray]:
    """Load a split as channels-last arrays: x (N, h, w, 3), y (N, H, W)."""
    entries = manifest.entries_for(split)
    if not entries:
        raise DataError(f"manifest has no {split!r} samples")
    xs, ys = [], []
    for entry in entries:
        sample = manifest.load_sample(entry)
        xs.append(np.ascontiguousarray(sample.lr_input.array().transpose(1, 2, 0)))
        ys.append(sample.hr_target.values)
    return np.stack(xs), np.stack(ys)


def _pooled_mse(net: NetworkWeights, x: np.ndarray, y: np.ndarray, ws: Workspace) -> float:
    sse = 0.0
    for i in range(len(x)):
        out_cl, _ = forward_single(net, x[i], ws)
        diff = out_cl[:, :, 0] - y[i]
        sse += float(np.dot(diff.ravel(), diff.ravel()))
    return sse / y.size


def train(
    manifest: DatasetManifest,
    scale: int,
    config: TrainConfig | None = None,
    out_dir: str | Path | None = None,
    resume_from: str | Path | None = None,
) -> tuple[NetworkWeights, list[LogRow]]:
    """Minibatch MSE training with best-validation model selection.

    Trains on the manifest's train split, evaluates the val split after every
    epoch, keeps the weights with the lowest validation MSE, and stops after
    ``patience`` epochs without improvement or at ``max_epochs``. Deterministic
    for a fixed seed. Returns the best weights and the training log; when
    ``out_dir`` is given, ``training_log.csv`` (and checkpoints, if enabled)
    are written there.
    """
    config = config or TrainConfig()
    if manifest.scale != scale:
        raise DataError(f"manifest is for scale {manifest.scale}, requested {scale}")
    x_train, y_train = _load_split(manifest, "train")
    x_val, y_val = _load_split(manifest, "val")

    if config.crop_size is not None:
        if config.crop_size % scale:
            raise DataError(
                f"crop_size {config.crop_size} not divisible by scale {scale}"
            )
        if config.crop_size > y_train.shape[1] or config.crop_size > y_train.shape[2]:
            raise DataError(
                f"crop_size {config.crop_size} exceeds HR dims "
                f"{y_train.shape[2]}x{y_train.shape[1]}"
            )

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)

    ws = Workspace()
    if resume_from is not None:
        state = load_checkpoint(resume_from)
        if state.scale != scale:
            raise DataError(f"checkpoint is for scale {state.scale}, requested {scale}")
        if state.config != config:
            raise DataError("checkpoint training config differs from the requested one")
        net, adam = state.net, state.adam
        best_params, best_val = state.best_params, state.best_val
        epochs_since_improve, start_epoch = state.epochs_since_improve, state.epoch_next
        log = state.log
    else:
        net = build_network(scale, config.channel_config, seed=config.seed)
        adam = AdamState(net)
        t0 = time.perf_counter()
        val0 = _pooled_mse(net, x_val, y_val, ws)
        best_params = [p.copy() for p in _params(net)]
        best_val = val0
        epochs_since_improve = 0
        start_epoch = 1
        log = [LogRow(0, None, val0, time.perf_counter() - t0, True)]

    n_train = len(x_train)
    grads = GradientSet.zeros_like(net)
    crop_lr = config.crop_size // scale if config.crop_size is not None else None
    h_lr, w_lr = x_train.shape[1], x_train.shape[2]

    for epoch in range(start_epoch, config.max_epochs + 1):
        t0 = time.perf_counter()
        rng = np.random.default_rng([config.seed, _EPOCH_STREAM, epoch])
        order = rng.permutation(n_train)
        sse = 0.0
        n_px = 0
        for b0 in range(0, n_train, config.batch_size):
            idx = order[b0 : b0 + config.batch_size]
            grads.reset()
            if crop_lr is not None:
                oys = rng.integers(0, h_lr - crop_lr + 1, size=len(idx))
                oxs = rng.integers(0, w_lr - crop_lr + 1, size=len(idx))
                batch_px = len(idx) * (crop_lr * scale) ** 2
            else:
                batch_px = len(idx) * y_train.shape[1] * y_train.shape[2]
            batch_sse = 0.0
            for j, i in enumerate(idx):
                if crop_lr is not None:
                    oy, ox = int(oys[j]), int(oxs[j])
                    x_i = np.ascontiguousarray(
                        x_train[i, oy : oy + crop_lr, ox : ox + crop_lr]
                    )
                    y_i = y_train[
                        i,
                        oy * scale : (oy + crop_lr) * scale,
                        ox * scale : (ox + crop_lr) * scale,
                    ]
                else:
                    x_i, y_i = x_train[i], y_train[i]
                out_cl, cache = forward_single(net, x_i, ws, keep_cache=True)
                diff = out_cl[:, :, 0] - y_i
                batch_sse += float(np.dot(diff.ravel(), diff.ravel()))
                upstream = ((2.0 / batch_px) * diff)[:, :, None]
                backward_single(
                    net,
                    cache,
                    upstream,
                    grads.kernel_grads,
                    grads.bias_grads,
                    ws,
                    need_input_grad=False,
                )
            loss = batch_sse / batch_px
            if not np.isfinite(loss):
                raise DivergenceError(
                    f"nonfinite loss at epoch {epoch}, batch {b0 // config.batch_size}"
                )
            adam.step(net, grads, config)
            sse += batch_sse
            n_px += batch_px
        train_loss = sse / n_px
        val_loss = _pooled_mse(net, x_val, y_val, ws)
        improved = best_val is None or val_loss < best_val
        if improved:
            best_val = val_loss
            best_params = [p.copy() for p in _params(net)]
            epochs_since_improve = 0
        else:
            epochs_since_improve += 1
        log.append(LogRow(epoch, train_loss, val_loss, time.perf_counter() - t0, improved))
        if config.checkpoint_every and out_dir is not None and epoch % config.checkpoint_every == 0:
            save_checkpoint(
                out_dir / f"checkpoint_ep{epoch:04d}.fsc",
                net,
                adam,
                best_params,
                best_val,
                epochs_since_improve,
                epoch + 1,
                log,
                config,
            )
        if config.patience and epochs_since_improve >= config.patience:
            break

    best_net = _net_with_params(net, best_params)
    if out_dir is not None:
        write_training_log(log, out_dir / "training_log.csv")
    return best_net, log


def _net_with_params(net: NetworkWeights, params: list[np.ndarray]) -> NetworkWeights:
    layers = []
    for i, layer in enumerate(net.layers):
        layers.append(
            ConvLayer(
                kernels=params[2 * i].copy(),
                biases=params[2 * i + 1].copy(),
                activation=layer.activation,
            )
        )
    return NetworkWeights(scale=net.scale, layers=layers, upsample_before=net.upsample_before)


def write_training_log(log: list[LogRow], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        f.write("epoch,train_loss,val_loss,seconds,best_flag\n")
        for row in log:
            train_loss = "" if row.train_loss is None else repr(row.train_loss)
            f.write(
                f"{row.epoch},{train_loss},{row.val_loss!r},{row.seconds:.3f},{int(row.best)}\n"
            )


def read_training_log(path: str | Path) -> list[LogRow]:
    rows = []
    with open(path) as f:
        next(f)
        for line in f:
            epoch, train_loss, val, seconds, best = line.rstrip("\n").split(",")
            rows.append(
                LogRow(
                    int(epoch),
                    float(train_loss) if train_loss else None,
                    float(val),
                    float(seconds),
                    bool(int(best)),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Checkpoints: float64 container so resume is bit-exact

def save_checkpoint(
    path: str | Path,
    net: NetworkWeights,
    adam: AdamState,
    best_params: list[np.ndarray],
    best_val: float | None,
    epochs_since_improve: int,
    epoch_next: int,
    log: list[LogRow],
    config: TrainConfig,
) -> None:
    header = {
        "format_version": 1,
        "scale": net.scale,
        "channel_config": list(net.channel_config),
        "upsample_before": list(net.upsample_before),
        "activations": [layer.activation for layer in net.layers],
        "kernel_shapes": [list(layer.kernels.shape) for layer in net.layers],
        "dtype": "f64",
        "adam_t": adam.t,
        "best_val": best_val,
        "epochs_since_improve": epochs_since_improve,
        "epoch_next": epoch_next,
        "config": config.to_json(),
        "log": [
            [row.epoch, row.train_loss, row.val_loss, row.seconds, int(row.best)]
            for row in log
        ],
    }
    header_bytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    params = _params(net)
    with open(path, "wb") as f:
        f.write(FSC_MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for group in (params, adam.m, adam.v, best_params):
            for arr in group:
                f.write(arr.astype("<f8").tobytes(order="C"))


@dataclass
class _ResumeState:
    net: NetworkWeights
    adam: AdamState
    best_params: list[np.ndarray]
    best_val: float | None
    epochs_since_improve: int
    epoch_next: int
    log: list[LogRow]
    config: TrainConfig
    scale: int


def load_checkpoint(path: str | Path) -> _ResumeState:
    with open(path, "rb") as f:
        blob = f.read()
    if len(blob) < 8 or blob[:4] != FSC_MAGIC:
        raise FormatError(f"{path}: not a checkpoint (magic {blob[:4]!r})")
    (header_len,) = struct.unpack("<I", blob[4:8])
    try:
        header = json.loads(blob[8 : 8 + header_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: undecodable header: {exc}") from exc
    if header.get("format_version") != 1:
        raise FormatError(f"{path}: unsupported version {header.get('format_version')!r}")
    shapes = [tuple(s) for s in header["kernel_shapes"]]
    param_shapes: list[tuple[int, ...]] = []
    for s in shapes:
        param_shapes.append(s)
        param_shapes.append((s[0],))
    n_values = sum(int(np.prod(s)) for s in param_shapes)
    payload = blob[8 + header_len :]
    if len(payload) != 4 * n_values * 8:
        raise FormatError(
            f"{path}: payload is {len(payload)} bytes, header declares "
            f"{4 * n_values} float64 values"
        )

    offset = 0

    def take_group() -> list[np.ndarray]:
        nonlocal offset
        group = []
        for s in param_shapes:
            n = int(np.prod(s))
            group.append(
                np.frombuffer(payload, dtype="<f8", count=n, offset=offset)
                .reshape(s)
                .copy()
            )
            offset += n * 8
        return group

    params = take_group()
    adam_m = take_group()
    adam_v = take_group()
    best_params = take_group()

    layers = [
        ConvLayer(kernels=params[2 * i], biases=params[2 * i + 1], activation=act)
        for i, act in enumerate(header["activations"])
    ]
    net = NetworkWeights(
        scale=int(header["scale"]),
        layers=layers,
        upsample_before=tuple(header["upsample_before"]),
    )
    adam = AdamState(net)
    adam.t = int(header["adam_t"])
    adam.m = adam_m
    adam.v = adam_v
    log = [
        LogRow(int(e), t, float(v), float(s), bool(b))
        for e, t, v, s, b in header["log"]
    ]
    return _ResumeState(
        net=net,
        adam=adam,
        best_params=best_params,
        best_val=header["best_val"],
        epochs_since_improve=int(header["epochs_since_improve"]),
        epoch_next=int(header["epoch_next"]),
        log=log,
        config=TrainConfig.from_json(header["config"]),
        scale=int(header["scale"]),
    )
