"""Loss terms of the reconstruction objective and their weighted composition."""

from __future__ import annotations

import csv
import math
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from .fanbeam import Projector, project_volume
from .networks import FeatureExtractor, SegNet, axial_slices, feature_extract, segnet_forward
from .tensor import Tensor, absolute, add, mean, mul, no_grad, reshape, square, sub, tsum, transpose

DICE_EPS = 1e-6
TERMS = ("gen", "r", "proj", "s", "p")


class NonFiniteLossError(FloatingPointError):
    def __init__(self, term: str, value: float):
        super().__init__(f"loss term {term!r} is not finite ({value})")
        self.term = term


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


def _same_shape(a: Tensor, b: Tensor, what: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{what}: shapes differ, {a.shape} vs {b.shape}")


def _detached(y) -> Tensor:
    return Tensor(y.data if isinstance(y, Tensor) else np.asarray(y, dtype=np.float64))


def lsgan_d_loss(d_real, d_fake) -> Tensor:
    """0.5 * (mean((D(y) - 1)^2) + mean(D(G(x))^2))."""
    d_real, d_fake = _as_tensor(d_real), _as_tensor(d_fake)
    _same_shape(d_real, d_fake, "lsgan_d_loss")
    return mul(add(mean(square(sub(d_real, 1.0))), mean(square(d_fake))), 0.5)


def lsgan_g_loss(d_fake) -> Tensor:
    return mean(square(sub(_as_tensor(d_fake), 1.0)))


def recon_loss(y_hat, y) -> Tensor:
    y_hat = _as_tensor(y_hat)
    y = _detached(y)
    _same_shape(y_hat, y, "recon_loss")
    return mean(square(sub(y_hat, y)))


def projection_loss(y_hat, y, proj: Projector) -> Tensor:
    """Mean of the a.p. and lat. mean-squared projection differences."""
    y_hat = _as_tensor(y_hat)
    y = _detached(y)
    _same_shape(y_hat, y, "projection_loss")
    terms = []
    for view in ("ap", "lat"):
        with no_grad():
            target = project_volume(proj, y, view)
        terms.append(mean(square(sub(project_volume(proj, y_hat, view), Tensor(target.data)))))
    return mul(add(terms[0], terms[1]), 0.5)


def dice_per_channel(pred, target, eps: float = DICE_EPS) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p^2 + sum t^2 + eps)`` for each channel.

    Inputs are ``(B, C, ...)`` probability maps; sums run over batch and space.
    On hard masks the squares change nothing; on soft maps they make the score
    of a map against itself exactly 0.  Both-empty channels score 0,
    one-empty channels score ~1.
    """
    pred = _as_tensor(pred)
    target = _as_tensor(target)
    _same_shape(pred, target, "dice")
    if pred.ndim < 3:
        raise ValueError(f"dice expects (B, C, ...) maps, got shape {pred.shape}")
    c = pred.shape[1]
    perm = (1, 0) + tuple(range(2, pred.ndim))
    p = reshape(transpose(pred, perm), (c, -1))
    t = reshape(transpose(target, perm), (c, -1))
    inter = tsum(mul(p, t), axis=1)
    denom = add(tsum(square(p), axis=1), tsum(square(t), axis=1))
    return sub(1.0, (inter * 2.0 + eps) / (denom + eps))


def soft_dice_loss(pred, target, channels=(1, 2, 3), eps: float = DICE_EPS) -> Tensor:
    """Per-channel dice loss averaged over ``channels`` (the foreground organs)."""
    return mean(dice_per_channel(pred, target, eps)[list(channels)])


def one_hot(labels: np.ndarray, n_classes: int = 4, channel_axis: int = 1) -> np.ndarray:
    """Integer labels -> float one-hot with the class axis inserted at ``channel_axis``."""
    eye = np.eye(n_classes)[np.asarray(labels)]
    return np.ascontiguousarray(np.moveaxis(eye, -1, channel_axis))


def dice_seg_loss(y_hat, y, seg: SegNet) -> Tensor:
    """Soft dice between the segmentations of the reconstruction and the target,
    averaged over lung, liver and bone."""
    y_hat = _as_tensor(y_hat)
    y = _detached(y)
    _same_shape(y_hat, y, "dice_seg_loss")
    with no_grad():
        target = segnet_forward(seg, y)
    pred = segnet_forward(seg, y_hat)
    batched = y_hat.ndim == 4
    if not batched:
        pred = reshape(pred, (1,) + pred.shape)
        target = Tensor(target.data[None])
    return soft_dice_loss(pred, Tensor(target.data))


def _slices(v: Tensor, axis: str) -> Tensor:
    if axis == "axial":
        return axial_slices(v)
    if axis == "coronal":
        # (B, N, N, Z): fix the anterior-posterior index j
        if v.ndim == 3:
            v = reshape(v, (1,) + v.shape)
        b, n1, n2, z = v.shape
        s = transpose(v, (0, 2, 1, 3))
        return reshape(s, (b * n2, 1, n1, z))
    raise ValueError(f"slice axis must be 'axial' or 'coronal', got {axis!r}")


def perceptual_loss(y_hat, y, fx: FeatureExtractor, norm: str = "l2", slice_axis: str = "axial") -> Tensor:
    """Multi-level feature distance, averaged over slices and summed over levels.

    ``norm`` selects squared differences ("l2") or absolute differences ("l1").
    """
    y_hat = _as_tensor(y_hat)
    y = _detached(y)
    _same_shape(y_hat, y, "perceptual_loss")
    if norm not in ("l1", "l2"):
        raise ValueError(f"norm must be 'l1' or 'l2', got {norm!r}")
    with no_grad():
        ref = feature_extract(fx, _slices(y, slice_axis))
    out = feature_extract(fx, _slices(y_hat, slice_axis))
    total = None
    for a, b in zip(out, ref):
        d = sub(a, Tensor(b.data))
        term = mean(square(d) if norm == "l2" else absolute(d))
        total = term if total is None else add(total, term)
    return total


# ---------------------------------------------------------------------------
# composition
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class LossWeights:
    lambda_gen: float = 0.1
    lambda_r: float = 10.0
    lambda_proj: float = 10.0
    lambda_s: float = 2.0
    lambda_p: float = 0.5

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not (math.isfinite(v) and v >= 0):
                raise ValueError(f"{f.name} must be finite and >= 0, got {v}")

    @classmethod
    def from_dict(cls, d: dict | None) -> "LossWeights":
        d = dict(d or {})
        unknown = set(d) - {f.name for f in fields(cls)}
        if unknown:
            raise ValueError(f"unknown loss weights: {sorted(unknown)}")
        return cls(**{k: float(v) for k, v in d.items()})

    def weight(self, term: str) -> float:
        return getattr(self, f"lambda_{term}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LossBreakdown:
    step: int
    dis: float
    gen: float
    r: float
    proj: float
    s: float
    p: float
    total: float
    tensor: Tensor | None = None

    CSV_COLUMNS = ("step", "dis", "gen", "r", "proj", "s", "p", "total")

    def row(self) -> list:
        return [self.step] + [repr(float(getattr(self, k))) for k in self.CSV_COLUMNS[1:]]


def total_generator_loss(terms: dict, w: LossWeights, step: int = 0, dis: float = 0.0) -> LossBreakdown:
    """Weighted sum over gen, r, proj, s, p in that fixed order.

    Terms with zero weight are skipped entirely and may be absent or None;
    their breakdown value is recorded as 0.
    """
    unknown = set(terms) - set(TERMS)
    if unknown:
        raise ValueError(f"unknown loss terms: {sorted(unknown)}")
    total = None
    values = {}
    for name in TERMS:
        lam = w.weight(name)
        t = terms.get(name)
        if lam == 0:
            values[name] = 0.0 if t is None else float(_as_tensor(t).item())
            continue
        if t is None:
            raise ValueError(f"loss term {name!r} has weight {lam} but was not computed")
        t = _as_tensor(t)
        v = t.item()
        if not math.isfinite(v):
            raise NonFiniteLossError(name, v)
        values[name] = v
        part = mul(t, lam)
        total = part if total is None else add(total, part)
    if total is None:
        total = Tensor(np.array(0.0))
    if not math.isfinite(total.item()):
        raise NonFiniteLossError("total", total.item())
    return LossBreakdown(step=step, dis=float(dis), total=total.item(), tensor=total, **values)


class LossLog:
    """Append-only CSV of loss breakdowns; the header is written once."""

    def __init__(self, path: Path):
        self.path = Path(path)

    def append(self, b: LossBreakdown) -> None:
        new = not self.path.exists() or self.path.stat().st_size == 0
        with open(self.path, "a", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            if new:
                w.writerow(LossBreakdown.CSV_COLUMNS)
            w.writerow(b.row())

    def truncate(self, n_rows: int) -> None:
        """Keep the header and the first ``n_rows`` data rows (used on resume)."""
        if not self.path.exists():
            return
        lines = self.path.read_bytes().splitlines(keepends=True)
        self.path.write_bytes(b"".join(lines[: 1 + n_rows]))

    def rows(self) -> list[dict]:
        if not self.path.exists():
            return []
        with open(self.path, newline="") as fh:
            return list(csv.DictReader(fh))
