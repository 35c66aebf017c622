"""Fan-beam scanner geometry and its sparse projection operators.

Conventions
-----------
A transverse slice is an ``N x N`` array indexed ``[i, j]`` with voxel centers
at ``x = (i - (N-1)/2) * pitch`` and ``y = (j - (N-1)/2) * pitch``; flat voxel
index is ``i * N + j``.  Volumes are ``(N, N, Z)`` with ``z`` last.

The source sits at ``R(angle) @ (0, -SID)``: 0 deg is the a.p. view (source on
the -y axis looking toward +y), 90 deg is the lateral view.  The detector is
flat, perpendicular to the central ray, at distance SDD from the source; bin
``k`` is centered at ``u = (k - (U-1)/2) * detector_pitch + detector_offset`` along
``R(angle) @ (1, 0)``; the offset is nonzero only for asymmetrically padded detectors.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .sparse import MatrixCacheError, SystemMatrix, load_matrix, save_matrix, sparse_apply
from .tensor import Tensor, add, mul, reshape, transpose

FULL_SCALE = {"sid_mm": 595.0, "sdd_mm": 1085.6, "n_detector_bins": 920, "grid_n": 128, "voxel_pitch_mm": 2.5}
COVERAGE_MARGIN = 1.1
AP_ANGLE = 0.0
LAT_ANGLE = 90.0


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class FanBeamGeometry:
    sid_mm: float
    sdd_mm: float
    n_detector_bins: int
    detector_pitch_mm: float
    grid_n: int
    voxel_pitch_mm: float
    source_angle_deg: float = AP_ANGLE
    detector_offset_mm: float = 0.0

    def __post_init__(self):
        if not (self.sdd_mm > self.sid_mm > 0):
            raise GeometryError(f"need SDD > SID > 0, got SID={self.sid_mm}, SDD={self.sdd_mm}")
        if self.n_detector_bins < 1 or self.grid_n < 1:
            raise GeometryError("detector bins and grid size must be positive")
        if self.detector_pitch_mm <= 0 or self.voxel_pitch_mm <= 0:
            raise GeometryError("pitches must be positive")
        needed = required_detector_span(self.sid_mm, self.sdd_mm, self.grid_n, self.voxel_pitch_mm)
        span = self.n_detector_bins * self.detector_pitch_mm - 2 * abs(self.detector_offset_mm)
        if span < needed * (1 - 1e-12):
            raise GeometryError(
                f"detector span {span:.3f} mm does not cover the field of view with the "
                f"{COVERAGE_MARGIN:.0%} margin: need >= {needed:.3f} mm"
            )

    @property
    def fov_mm(self) -> float:
        return self.grid_n * self.voxel_pitch_mm

    def fingerprint(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True)
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def at_angle(self, angle_deg: float) -> "FanBeamGeometry":
        return replace(self, source_angle_deg=float(angle_deg))

    # frame vectors
    def _frame(self):
        a = math.radians(self.source_angle_deg)
        c, s = math.cos(a), math.sin(a)
        source = np.array([s * self.sid_mm, -c * self.sid_mm])
        central = np.array([-s, c])  # source -> isocenter
        u_axis = np.array([c, s])
        return source, central, u_axis

    def source_position(self) -> np.ndarray:
        return self._frame()[0]

    def bin_centers_mm(self) -> np.ndarray:
        centered = np.arange(self.n_detector_bins) - (self.n_detector_bins - 1) / 2
        return centered * self.detector_pitch_mm + self.detector_offset_mm

    def voxel_centers_mm(self) -> np.ndarray:
        return (np.arange(self.grid_n) - (self.grid_n - 1) / 2) * self.voxel_pitch_mm

    def detector_coordinate(self, points: np.ndarray) -> np.ndarray:
        """Perspective projection of (..., 2) points onto the detector, in mm."""
        source, central, u_axis = self._frame()
        d = np.asarray(points, dtype=float) - source
        return (d @ u_axis) * self.sdd_mm / (d @ central)

    def fractional_bin(self, points: np.ndarray) -> np.ndarray:
        u = self.detector_coordinate(points) - self.detector_offset_mm
        return u / self.detector_pitch_mm + (self.n_detector_bins - 1) / 2


def required_detector_span(sid_mm: float, sdd_mm: float, grid_n: int, voxel_pitch_mm: float) -> float:
    fov = grid_n * voxel_pitch_mm
    disc = 4 * sid_mm ** 2 - fov ** 2
    if disc <= 0:
        raise GeometryError(f"field of view {fov} mm does not fit inside the source circle (SID={sid_mm})")
    return COVERAGE_MARGIN * 2 * sdd_mm * fov / math.sqrt(disc)


def desk_bins(grid_n: int, full_bins: int = FULL_SCALE["n_detector_bins"], full_grid: int = FULL_SCALE["grid_n"]) -> int:
    return math.ceil(full_bins * grid_n / full_grid)


def build_geometry(config: dict | None = None) -> FanBeamGeometry:
    """Geometry from a config mapping; missing keys use the desk-scale defaults.

    ``n_detector_bins`` defaults to 920 scaled by ``grid_n / 128``, and
    ``detector_pitch_mm`` to the narrowest pitch that covers the field of view.
    """
    cfg = dict(config or {})
    unknown = set(cfg) - {
        "sid_mm", "sdd_mm", "n_detector_bins", "detector_pitch_mm", "grid_n", "voxel_pitch_mm", "source_angle_deg",
        "detector_offset_mm",
    }
    if unknown:
        raise GeometryError(f"unknown geometry keys: {sorted(unknown)}")
    sid = float(cfg.get("sid_mm", FULL_SCALE["sid_mm"]))
    sdd = float(cfg.get("sdd_mm", FULL_SCALE["sdd_mm"]))
    n = int(cfg.get("grid_n", 64))
    pitch = float(cfg.get("voxel_pitch_mm", 2.5))
    for key, val in (("sid_mm", sid), ("sdd_mm", sdd), ("grid_n", n), ("voxel_pitch_mm", pitch)):
        if val <= 0:
            raise GeometryError(f"{key} must be positive, got {val}")
    bins = int(cfg.get("n_detector_bins") or desk_bins(n))
    det_pitch = cfg.get("detector_pitch_mm")
    if det_pitch is None:
        det_pitch = required_detector_span(sid, sdd, n, pitch) / bins
    return FanBeamGeometry(
        sid_mm=sid, sdd_mm=sdd, n_detector_bins=bins, detector_pitch_mm=float(det_pitch),
        grid_n=n, voxel_pitch_mm=pitch, source_angle_deg=float(cfg.get("source_angle_deg", AP_ANGLE)),
        detector_offset_mm=float(cfg.get("detector_offset_mm", 0.0)),
    )


def full_scale_geometry() -> FanBeamGeometry:
    return build_geometry(FULL_SCALE)


def scale_geometry(g: FanBeamGeometry, level: int) -> FanBeamGeometry:
    """Coarsen grid and detector by ``2**level``; physical extents are preserved."""
    if level < 0:
        raise GeometryError(f"level must be >= 0, got {level}")
    f = 2 ** level
    if g.grid_n % f or g.n_detector_bins % f:
        raise GeometryError(
            f"grid {g.grid_n} and detector {g.n_detector_bins} must both be divisible by 2^{level}"
        )
    return replace(
        g,
        grid_n=g.grid_n // f,
        n_detector_bins=g.n_detector_bins // f,
        voxel_pitch_mm=g.voxel_pitch_mm * f,
        detector_pitch_mm=g.detector_pitch_mm * f,
    )


def pad_detector(g: FanBeamGeometry, multiple: int) -> tuple[FanBeamGeometry, int]:
    """Widen the detector to a multiple of ``multiple`` bins, splitting the
    added bins as evenly as possible between both ends.

    Returns the padded geometry and the number of bins added on the low side.
    Existing bins keep their physical positions; an odd split moves the
    detector center by half a bin, which is carried in ``detector_offset_mm``.
    """
    target = -(-g.n_detector_bins // multiple) * multiple
    extra = target - g.n_detector_bins
    lo = extra // 2
    hi = extra - lo
    offset = g.detector_offset_mm + (hi - lo) / 2 * g.detector_pitch_mm
    return replace(g, n_detector_bins=target, detector_offset_mm=offset), lo


# ---------------------------------------------------------------------------
# system matrices
# ---------------------------------------------------------------------------


def build_backprojection_matrix(g: FanBeamGeometry) -> SystemMatrix:
    """Pixel-driven backprojector: one row per voxel, linear interpolation
    between the two detector bins its center projects between."""
    n, u = g.grid_n, g.n_detector_bins
    c = g.voxel_centers_mm()
    pts = np.stack(np.meshgrid(c, c, indexing="ij"), axis=-1).reshape(-1, 2)
    f = g.fractional_bin(pts)
    inside = (f >= 0) & (f <= u - 1)
    rows = np.nonzero(inside)[0]
    fi = f[inside]
    lo = np.minimum(np.floor(fi).astype(np.int64), u - 1)
    frac = fi - lo
    r = np.concatenate([rows, rows])
    cols = np.concatenate([lo, np.minimum(lo + 1, u - 1)])
    w = np.concatenate([1.0 - frac, frac])
    keep = w > 0
    m = sp.csr_matrix((w[keep], (r[keep], cols[keep])), shape=(n * n, u))
    m.sum_duplicates()
    return SystemMatrix.from_scipy(m, fingerprint=g.fingerprint() + ":bp")


def build_forward_matrix(g: FanBeamGeometry, step_fraction: float = 0.5) -> SystemMatrix:
    """Ray-driven line-integral projector with bilinear sampling.

    Each source-to-bin ray is sampled every ``step_fraction * voxel_pitch`` mm
    through the bilinear support of the grid; weights carry the step length so
    rows integrate in mm.
    """
    n, nb, p = g.grid_n, g.n_detector_bins, g.voxel_pitch_mm
    source, central, u_axis = g._frame()
    targets = source + g.sdd_mm * central + g.bin_centers_mm()[:, None] * u_axis
    dirs = targets - source
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    half = (n + 1) / 2 * p  # support of bilinear interpolation with zero outside
    t_in, t_out = _slab_intersection(source, dirs, half)
    step = step_fraction * p
    length = np.maximum(t_out - t_in, 0.0)
    n_steps = np.ceil(length / step).astype(np.int64)
    rows, cols, vals = [], [], []
    for k in np.nonzero(n_steps > 0)[0]:
        m = n_steps[k]
        h = length[k] / m
        t = t_in[k] + (np.arange(m) + 0.5) * h
        xy = source + t[:, None] * dirs[k]
        fi = xy[:, 0] / p + (n - 1) / 2
        fj = xy[:, 1] / p + (n - 1) / 2
        i0, j0 = np.floor(fi).astype(np.int64), np.floor(fj).astype(np.int64)
        di, dj = fi - i0, fj - j0
        for oi, oj, wt in (
            (0, 0, (1 - di) * (1 - dj)),
            (1, 0, di * (1 - dj)),
            (0, 1, (1 - di) * dj),
            (1, 1, di * dj),
        ):
            ii, jj = i0 + oi, j0 + oj
            ok = (ii >= 0) & (ii < n) & (jj >= 0) & (jj < n) & (wt > 0)
            rows.append(np.full(ok.sum(), k))
            cols.append(ii[ok] * n + jj[ok])
            vals.append(wt[ok] * h)
    if rows:
        m = sp.coo_matrix(
            (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))), shape=(nb, n * n)
        ).tocsr()
    else:
        m = sp.csr_matrix((nb, n * n))
    m.sum_duplicates()
    return SystemMatrix.from_scipy(m, fingerprint=g.fingerprint() + ":fp")


def _slab_intersection(origin: np.ndarray, dirs: np.ndarray, half: float):
    with np.errstate(divide="ignore", invalid="ignore"):
        t0 = (-half - origin) / dirs
        t1 = (half - origin) / dirs
    lo = np.where(np.isfinite(t0), np.minimum(t0, t1), -np.inf)
    hi = np.where(np.isfinite(t0), np.maximum(t0, t1), np.inf)
    # rays parallel to an axis: inside the slab iff the origin coordinate is
    parallel = dirs == 0
    inside = np.abs(origin) <= half
    lo = np.where(parallel, np.where(inside, -np.inf, np.inf), lo)
    hi = np.where(parallel, np.where(inside, np.inf, -np.inf), hi)
    return np.maximum(lo.max(axis=1), 0.0), hi.min(axis=1)


def cached_matrix(g: FanBeamGeometry, kind: str, cache_dir: Path | None = None) -> SystemMatrix:
    """Build (or load from ``cache_dir``) the ``"bp"`` or ``"fp"`` matrix for ``g``."""
    builders = {"bp": build_backprojection_matrix, "fp": build_forward_matrix}
    if kind not in builders:
        raise ValueError(f"matrix kind must be 'bp' or 'fp', got {kind!r}")
    fp = g.fingerprint() + ":" + kind
    if cache_dir is None:
        return builders[kind](g)
    path = Path(cache_dir) / f"{kind}_{g.fingerprint()}"
    try:
        return load_matrix(path, fingerprint=fp)
    except (MatrixCacheError, OSError):
        m = builders[kind](g)
        Path(cache_dir).mkdir(parents=True, exist_ok=True)
        save_matrix(m, path)
        return m


# ---------------------------------------------------------------------------
# projector and differentiable application
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class Projector:
    geometry: FanBeamGeometry
    ap: SystemMatrix
    lat: SystemMatrix

    @property
    def normalization(self) -> float:
        return self.geometry.grid_n * self.geometry.voxel_pitch_mm

    def matrix(self, view: str) -> SystemMatrix:
        if view in ("ap", "a.p."):
            return self.ap
        if view in ("lat", "lat."):
            return self.lat
        raise ValueError(f"view must be 'ap' or 'lat', got {view!r}")


def build_projector(g: FanBeamGeometry, cache_dir: Path | None = None) -> Projector:
    return Projector(
        geometry=g.at_angle(AP_ANGLE),
        ap=cached_matrix(g.at_angle(AP_ANGLE), "fp", cache_dir),
        lat=cached_matrix(g.at_angle(LAT_ANGLE), "fp", cache_dir),
    )


def project_volume(p: Projector, vol: Tensor, view: str = "ap") -> Tensor:
    """Slice-wise fan-beam projection of ``(..., N, N, Z)`` volumes to ``(..., U, Z)``,
    divided by the projector normalization."""
    n = p.geometry.grid_n
    if vol.ndim < 3 or vol.shape[-3:-1] != (n, n):
        raise ValueError(f"volume shape {vol.shape} does not match the {n}x{n} projector grid")
    m = p.matrix(view)
    lead = vol.shape[:-3]
    z = vol.shape[-1]
    nlead = int(np.prod(lead)) if lead else 1
    # (lead, N*N, Z) -> (N*N, lead*Z)
    x = reshape(vol, (nlead, n * n, z))
    x = reshape(transpose(x, (1, 0, 2)), (n * n, nlead * z))
    y = sparse_apply(m, x)
    y = transpose(reshape(y, (m.n_rows, nlead, z)), (1, 0, 2))
    return mul(reshape(y, lead + (m.n_rows, z)), 1.0 / p.normalization)


def _backproject_rows(t: SystemMatrix, feat: Tensor, n_f: int) -> Tensor:
    b, c, u_f, z_f = feat.shape
    x = reshape(transpose(feat, (2, 0, 1, 3)), (u_f, b * c * z_f))
    y = sparse_apply(t, x)  # (N_f*N_f, B*C*Z_f)
    y = reshape(y, (n_f, n_f, b, c, z_f))
    return transpose(y, (2, 3, 0, 1, 4))


def lift_2d_to_3d(t_ap: SystemMatrix, t_lat: SystemMatrix, feat_ap: Tensor, feat_lat: Tensor) -> Tensor:
    """Backproject ``(B, C, U_f, Z_f)`` view features into ``(B, C, N_f, N_f, Z_f)``
    and fuse the two views by element-wise mean."""
    if feat_ap.shape != feat_lat.shape:
        raise ValueError(f"view feature shapes differ: {feat_ap.shape} vs {feat_lat.shape}")
    if feat_ap.ndim == 3:
        feat_ap = reshape(feat_ap, (1,) + feat_ap.shape)
        feat_lat = reshape(feat_lat, (1,) + feat_lat.shape)
        squeeze = True
    else:
        squeeze = False
    u_f = feat_ap.shape[2]
    for name, t in (("a.p.", t_ap), ("lat.", t_lat)):
        if t.n_cols != u_f:
            raise ValueError(f"{name} lifting matrix has {t.n_cols} detector columns, features have {u_f}")
    n_f = int(round(math.sqrt(t_ap.n_rows)))
    if n_f * n_f != t_ap.n_rows or t_lat.n_rows != t_ap.n_rows:
        raise ValueError("lifting matrices must share a square grid")
    fused = mul(add(_backproject_rows(t_ap, feat_ap, n_f), _backproject_rows(t_lat, feat_lat, n_f)), 0.5)
    if squeeze:
        fused = reshape(fused, fused.shape[1:])
    return fused


@dataclass(eq=False)
class LiftingPyramid:
    """Backprojection matrix pairs for each encoder scale."""

    geometries: list[FanBeamGeometry]
    ap: list[SystemMatrix]
    lat: list[SystemMatrix]


def build_lifting_pyramid(g: FanBeamGeometry, levels: int, cache_dir: Path | None = None) -> LiftingPyramid:
    geoms, ap, lat = [], [], []
    for k in range(levels + 1):
        gk = scale_geometry(g, k)
        geoms.append(gk)
        ap.append(cached_matrix(gk.at_angle(AP_ANGLE), "bp", cache_dir))
        lat.append(cached_matrix(gk.at_angle(LAT_ANGLE), "bp", cache_dir))
    return LiftingPyramid(geoms, ap, lat)
