"""Metric suite, bicubic benchmark, and inference on coarse climate inputs.

Continuous skill is measured by RMSE and R² pooled over every test pixel;
detection skill by precision, F1, and threat score after binarizing both the
target and the prediction at the same threshold. The default threshold is
half of one fire count in normalized units, so any pixel carrying at least
one count binarizes to "fire". Precision is the key upsampling indicator:
interpolation diffuses exposure into neighboring pixels and pays for it in
false positives.

Zero-denominator convention (pooled reporting must survive empty-positive
months): when a metric's denominator is zero it reports 1 if there are also
no missed fires, else 0.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dataset import DatasetManifest, NormalizationSpec
from .errors import DataError
from .model import NetworkWeights, forward
from .raster import INPUT_ROLES, ChannelStack, Raster, bicubic_resample, bilinear_resample

DEFAULT_THRESHOLD = 0.5 / 254.0


@dataclass
class BinaryFireMap:
    """Thresholded fire/no-fire mask plus the threshold that produced it."""

    bits: np.ndarray  # (height, width) bool
    threshold_used: float

    def __post_init__(self):
        self.bits = np.asarray(self.bits, dtype=bool)
        if self.bits.ndim != 2:
            raise DataError(f"binary map must be 2D, got shape {self.bits.shape}")

    @property
    def width(self) -> int:
        return self.bits.shape[1]

    @property
    def height(self) -> int:
        return self.bits.shape[0]


@dataclass
class EvalReport:
    """One row of the benchmark table."""

    model: str
    scale: int
    rmse: float
    r2: float | None  # None when the pooled target has zero variance
    precision: float
    f1: float
    threat_score: float
    n_pixels: int
    threshold: float


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, Raster) else np.asarray(x, dtype=np.float64)


def binarize(r, threshold: float) -> BinaryFireMap:
    """Mark pixels strictly above the threshold as fire."""
    if threshold < 0:
        raise DataError(f"threshold must be >= 0, got {threshold}")
    return BinaryFireMap(bits=_values(r) > threshold, threshold_used=threshold)


def confusion_counts(pred_bits: np.ndarray, target_bits: np.ndarray) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) over two boolean arrays of identical shape."""
    p = np.asarray(pred_bits, dtype=bool)
    t = np.asarray(target_bits, dtype=bool)
    if p.shape != t.shape:
        raise DataError(f"shape mismatch {p.shape} vs {t.shape}")
    tp = int(np.sum(p & t))
    fp = int(np.sum(p & ~t))
    fn = int(np.sum(~p & t))
    tn = p.size - tp - fp - fn
    return tp, fp, fn, tn


def _metrics_from_confusion(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    empty_default = 1.0 if fn == 0 else 0.0
    precision = tp / (tp + fp) if (tp + fp) > 0 else empty_default
    f1 = 2 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else empty_default
    threat = tp / (tp + fp + fn) if (tp + fp + fn) > 0 else empty_default
    return precision, f1, threat


def classification_metrics(
    pred: BinaryFireMap, target: BinaryFireMap
) -> tuple[float, float, float]:
    """(precision, F1, threat score) of a prediction against a target mask."""
    tp, fp, fn, _ = confusion_counts(pred.bits, target.bits)
    return _metrics_from_confusion(tp, fp, fn)


def continuous_metrics(pred_set, target_set) -> tuple[float, float | None]:
    """Pooled (RMSE, R²) over a set of prediction/target pairs.

    Accepts single rasters/arrays or sequences of them; all pixels are pooled
    before computing either metric. R² is None (flagged undefined) when the
    pooled target variance is zero.
    """
    if isinstance(pred_set, (Raster, np.ndarray)):
        pred_set, target_set = [pred_set], [target_set]
    if len(pred_set) != len(target_set):
        raise DataError("pred_set and target_set lengths differ")
    acc = _PooledAccumulator()
    for p, t in zip(pred_set, target_set):
        pv, tv = _values(p), _values(t)
        if pv.shape != tv.shape:
            raise DataError(f"shape mismatch {pv.shape} vs {tv.shape}")
        acc.add(pv, tv)
    return acc.rmse(), acc.r2()


class _PooledAccumulator:
    """Order-independent sums for pooled RMSE/R² and the confusion matrix."""

    def __init__(self):
        self.n = 0
        self.sse = 0.0
        self.sum_t = 0.0
        self.sum_t2 = 0.0
        self.tp = self.fp = self.fn = 0

    def add(self, pred: np.ndarray, target: np.ndarray, threshold: float | None = None):
        diff = pred - target
        self.n += diff.size
        self.sse += float(np.sum(diff * diff))
        self.sum_t += float(np.sum(target))
        self.sum_t2 += float(np.sum(target * target))
        if threshold is not None:
            tp, fp, fn, _ = confusion_counts(pred > threshold, target > threshold)
            self.tp += tp
            self.fp += fp
            self.fn += fn

    def rmse(self) -> float:
        return math.sqrt(self.sse / self.n)

    def r2(self) -> float | None:
        sst = self.sum_t2 - self.sum_t * self.sum_t / self.n
        if sst <= 1e-12 * max(self.sum_t2, 1.0):
            return None
        return 1.0 - self.sse / sst

    def classification(self) -> tuple[float, float, float]:
        return _metrics_from_confusion(self.tp, self.fp, self.fn)


def evaluate_models(
    manifest: DatasetManifest,
    nets: list[NetworkWeights],
    threshold: float = DEFAULT_THRESHOLD,
    names: list[str] | None = None,
    region: str | None = None,
) -> list[EvalReport]:
    """Benchmark trained networks against bicubic interpolation on the test split.

    Each network is scored on the full 3-channel LR input; the baseline
    receives only the LR fire channel, bicubically upsampled. Metrics are
    pooled over every test pixel. Returns one report per network followed by
    one for the baseline, named like the benchmark table rows
    (``FireSRnet-4x`` / ``Bicubic-4x``).
    """
    if threshold < 0:
        raise DataError(f"threshold must be >= 0, got {threshold}")
    for net in nets:
        if net.scale != manifest.scale:
            raise DataError(
                f"network scale {net.scale} does not match manifest scale {manifest.scale}"
            )
    entries = manifest.entries_for("test", region)
    if not entries:
        where = f" in region {region}" if region else ""
        raise DataError(f"manifest has no test samples{where}")
    if names is None:
        names = [f"FireSRnet-{net.scale}x" for net in nets]
    if len(names) != len(nets):
        raise DataError("names must match nets one-to-one")

    scale = manifest.scale
    accs = [_PooledAccumulator() for _ in nets]
    baseline_acc = _PooledAccumulator()
    for entry in entries:
        sample = manifest.load_sample(entry)
        target = sample.hr_target.values
        hr_w, hr_h = sample.hr_target.width, sample.hr_target.height
        for net, acc in zip(nets, accs):
            pred = forward(net, sample.lr_input).values
            acc.add(pred, target, threshold)
        fire_lr = sample.lr_input.channels[0]
        baseline = bicubic_resample(fire_lr, hr_w, hr_h).values
        baseline_acc.add(baseline, target, threshold)

    reports = []
    for name, acc in zip(names, accs):
        reports.append(_report_from_accumulator(name, scale, acc, threshold))
    reports.append(
        _report_from_accumulator(f"Bicubic-{scale}x", scale, baseline_acc, threshold)
    )
    return reports


def _report_from_accumulator(
    name: str, scale: int, acc: _PooledAccumulator, threshold: float
) -> EvalReport:
    precision, f1, threat = acc.classification()
    return EvalReport(
        model=name,
        scale=scale,
        rmse=acc.rmse(),
        r2=acc.r2(),
        precision=precision,
        f1=f1,
        threat_score=threat,
        n_pixels=acc.n,
        threshold=threshold,
    )


def evaluate_predictions(
    preds,
    targets,
    threshold: float = DEFAULT_THRESHOLD,
    model: str = "external",
    scale: int = 4,
) -> EvalReport:
    """Score precomputed SR maps against targets (same pooling as above)."""
    if len(preds) != len(targets):
        raise DataError("preds and targets lengths differ")
    acc = _PooledAccumulator()
    for p, t in zip(preds, targets):
        pv, tv = _values(p), _values(t)
        if pv.shape != tv.shape:
            raise DataError(f"shape mismatch {pv.shape} vs {tv.shape}")
        acc.add(pv, tv, threshold)
    return _report_from_accumulator(model, scale, acc, threshold)


def infer_coarse(
    net: NetworkWeights,
    coarse_fire: Raster,
    coarse_temp_dev: Raster,
    burnable_hr_derived: Raster,
    lr_dims: tuple[int, int],
    fire_divisor: float | None = None,
    norm: NormalizationSpec | None = None,
) -> Raster:
    """Super-resolve coarse climate-model-style inputs.

    Each channel is bilinearly regridded to ``lr_dims`` (width, height). The
    fire-like channel (e.g. burned-area percent) must be rescaled into [0, 1]
    by ``fire_divisor`` when its values exceed 1; temperature deviations are
    normalized with ``norm``. The regridded channels are assumed to cover the
    same footprint and adopt the fire channel's grid. Output is the clamped
    SR exposure map at lr_dims x scale.
    """
    norm = norm or NormalizationSpec()
    w, h = lr_dims
    fire_lr = bilinear_resample(coarse_fire, w, h)
    temp_lr = bilinear_resample(coarse_temp_dev, w, h)
    burn_lr = bilinear_resample(burnable_hr_derived, w, h)

    fire_vals = fire_lr.values
    if fire_vals.max() > 1.0 and fire_divisor is None:
        raise DataError(
            f"fire-like channel max {fire_vals.max():.4g} exceeds 1; supply a rescale "
            "divisor (100 for burned-area percent)"
        )
    if fire_divisor is not None:
        if fire_divisor <= 0:
            raise DataError(f"fire_divisor must be > 0, got {fire_divisor}")
        fire_vals = fire_vals / fire_divisor
    fire_vals = np.clip(fire_vals, 0.0, 1.0)

    geo = {
        "origin_lon": fire_lr.origin_lon,
        "origin_lat": fire_lr.origin_lat,
        "pixel_size": fire_lr.pixel_size,
    }
    stack = ChannelStack(
        [
            Raster(values=fire_vals, **geo),
            Raster(values=norm.normalize_temp(temp_lr.values), **geo),
            Raster(values=np.clip(burn_lr.values, 0.0, 1.0), **geo),
        ],
        INPUT_ROLES,
    )
    return forward(net, stack, clamp=True)
