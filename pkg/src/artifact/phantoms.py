"""Synthetic labeled chest phantoms, HU normalization, projection simulation
and corpus files.

Labels: 0 background, 1 lung, 2 liver, 3 bone.  A phantom is a pure function of
its seed; the label mask marks exactly the voxels where each organ's HU value
was written.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

from .fanbeam import FanBeamGeometry, Projector, build_projector, project_volume
from .tensor import Tensor, no_grad

log = logging.getLogger(__name__)

HU_MIN = -1024.0
HU_MAX = 3071.0
HU_OFFSET = 1024.0
HU_SPAN = 4095.0

AIR_HU = -1000.0
TISSUE_HU = 40.0
LUNG_HU = -800.0
LIVER_HU = 60.0
BONE_HU = 700.0
NOISE_HU = 20.0

LABELS = {"background": 0, "lung": 1, "liver": 2, "bone": 3}
ORGANS = ("lung", "liver", "bone")
ORGAN_HU = {"lung": LUNG_HU, "liver": LIVER_HU, "bone": BONE_HU}

MIN_GRID = 16
MIN_SLICES = 8


@dataclass
class Volume:
    data: np.ndarray
    voxel_pitch_mm: float = 2.5
    units: str = "HU"

    @property
    def grid(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class LabelMask:
    data: np.ndarray

    @property
    def grid(self) -> tuple[int, ...]:
        return self.data.shape


@dataclass
class TrainingSample:
    sample_id: str
    seed: int
    x_ap: np.ndarray
    x_lat: np.ndarray
    y: np.ndarray
    mask: np.ndarray


# ---------------------------------------------------------------------------
# phantom generation
# ---------------------------------------------------------------------------


def _ellipse(x, y, cx, cy, ax, ay):
    return ((x - cx) / ax) ** 2 + ((y - cy) / ay) ** 2 <= 1.0


def generate_phantom(seed: int, grid_n: int = 64, n_slices: int | None = None,
                     voxel_pitch_mm: float = 2.5) -> tuple[Volume, LabelMask]:
    """Chest phantom on an ``(N, N, Z)`` grid with per-seed anatomical jitter.

    Coordinates are fractions of the grid: in-plane ``x`` (lateral) and ``y``
    (anterior at negative ``y``) span [-0.5, 0.5], ``z`` spans [0, 1].
    """
    n = int(grid_n)
    z_n = int(n_slices or n)
    if n < MIN_GRID or z_n < MIN_SLICES:
        raise ValueError(f"grid {n}x{n}x{z_n} too small for structure placement (need N>={MIN_GRID}, Z>={MIN_SLICES})")
    rng = np.random.default_rng(seed)

    def axis(a):
        return a * rng.uniform(0.9, 1.1)

    def shift():
        return rng.uniform(-0.05, 0.05)

    angle = math.radians(rng.uniform(-5.0, 5.0))
    c = (np.arange(n) - (n - 1) / 2) / n
    xx, yy = np.meshgrid(c, c, indexing="ij")
    ca, sa = math.cos(angle), math.sin(angle)
    x = ca * xx + sa * yy
    y = -sa * xx + ca * yy
    x3, y3 = x[..., None], y[..., None]
    z = ((np.arange(z_n) + 0.5) / z_n)[None, None, :]

    hu = np.full((n, n, z_n), AIR_HU)
    labels = np.zeros((n, n, z_n), dtype=np.uint8)

    body_c = (shift(), shift())
    body2d = _ellipse(x, y, body_c[0], body_c[1], axis(0.38), axis(0.28))
    body = np.broadcast_to(body2d[..., None], hu.shape)
    hu[body] = TISSUE_HU

    def ellipsoid(cx, cy, cz, ax, ay, az):
        return ((x3 - cx) / ax) ** 2 + ((y3 - cy) / ay) ** 2 + ((z - cz) / az) ** 2 <= 1.0

    def write(region, value, label):
        region = region & body
        hu[region] = value
        labels[region] = label

    bx, by = body_c
    write(ellipsoid(bx + 0.12 + shift(), by - 0.02 + shift(), 0.24 + shift(), axis(0.17), axis(0.15), axis(0.20)),
          LIVER_HU, LABELS["liver"])
    for side in (-1.0, 1.0):
        write(ellipsoid(bx + side * 0.17 + shift(), by - 0.01 + shift(), 0.64 + shift(),
                        axis(0.14), axis(0.18), axis(0.34)), LUNG_HU, LABELS["lung"])

    # spine: stacked vertebral cylinders, bone over the first 80% of each period
    sx, sy = bx + shift() * 0.5, by + 0.19
    radius = max(axis(0.055), 1.0 / n)
    period = 0.125
    in_bone = ((z + rng.uniform(0, period)) % period) < 0.8 * period
    write(((x3 - sx) ** 2 + (y3 - sy) ** 2 <= radius ** 2) & in_bone, BONE_HU, LABELS["bone"])

    # ribs: elliptical arcs around the thorax, open anteriorly
    rib_ax, rib_ay = axis(0.33), axis(0.23)
    thick = max(0.025, 1.2 / n)
    half_h = max(0.02, 0.6 / z_n)
    r_outer = ((x - bx) / (rib_ax + thick)) ** 2 + ((y - by) / (rib_ay + thick)) ** 2 <= 1.0
    r_inner = ((x - bx) / rib_ax) ** 2 + ((y - by) / rib_ay) ** 2 <= 1.0
    theta = np.degrees(np.arctan2(y - by, x - bx))
    arc = r_outer & ~r_inner & (np.abs(theta + 90.0) > 35.0)
    rib_z = np.zeros_like(z, dtype=bool)
    for zc in np.arange(0.32, 0.92, 0.1) + shift() * 0.5:
        rib_z |= np.abs(z - zc) <= half_h
    write(arc[..., None] & rib_z, BONE_HU, LABELS["bone"])

    noise = ndimage.gaussian_filter(rng.standard_normal(hu.shape), sigma=2.0, mode="wrap")
    peak = np.abs(noise).max()
    if peak > 0:
        hu = np.where(body, hu + noise * (NOISE_HU / peak), hu)
    hu = np.clip(hu, HU_MIN, HU_MAX)
    return Volume(hu, voxel_pitch_mm), LabelMask(labels)


# ---------------------------------------------------------------------------
# normalization
# ---------------------------------------------------------------------------


def hu_normalize(hu, report: bool = False):
    """Map HU to [0, 1] via ``(HU + 1024) / 4095``; out-of-range values are clamped.

    With ``report=True`` returns ``(normalized, n_clamped)``.
    """
    arr = hu.data if isinstance(hu, Volume) else np.asarray(hu, dtype=np.float64)
    clamped = int(np.count_nonzero((arr < HU_MIN) | (arr > HU_MAX)))
    if clamped:
        log.warning("hu_normalize: clamped %d voxels outside [%g, %g] HU", clamped, HU_MIN, HU_MAX)
    out = (np.clip(arr, HU_MIN, HU_MAX) + HU_OFFSET) / HU_SPAN
    return (out, clamped) if report else out


def hu_denormalize(t, voxel_pitch_mm: float = 2.5) -> Volume:
    arr = t.data if isinstance(t, (Tensor, Volume)) else np.asarray(t, dtype=np.float64)
    return Volume(arr * HU_SPAN - HU_OFFSET, voxel_pitch_mm)


# ---------------------------------------------------------------------------
# projection simulation
# ---------------------------------------------------------------------------


def simulate_projection_pair(v, projector) -> tuple[np.ndarray, np.ndarray]:
    """a.p. and lateral projections of a volume, normalized and clamped to [0, 1].

    ``v`` may be a HU :class:`Volume` or an already-normalized array; ``projector``
    a :class:`Projector` or a geometry to build one from.
    """
    if isinstance(projector, FanBeamGeometry):
        projector = build_projector(projector)
    norm = hu_normalize(v) if isinstance(v, Volume) and v.units == "HU" else np.asarray(
        v.data if isinstance(v, Volume) else v, dtype=np.float64)
    n = projector.geometry.grid_n
    if norm.ndim != 3 or norm.shape[:2] != (n, n):
        raise ValueError(f"volume grid {norm.shape} does not match projector grid {n}x{n}")
    with no_grad():
        t = Tensor(norm)
        x_ap = np.clip(project_volume(projector, t, "ap").data, 0.0, 1.0)
        x_lat = np.clip(project_volume(projector, t, "lat").data, 0.0, 1.0)
    return x_ap, x_lat


# ---------------------------------------------------------------------------
# array files
# ---------------------------------------------------------------------------


class VolumeIOError(ValueError):
    pass


class CorruptHeaderError(VolumeIOError):
    pass


class TruncatedBlobError(VolumeIOError):
    pass


class FingerprintMismatchError(VolumeIOError):
    pass


_DTYPES = {"f8": "<f8", "u1": "u1"}


def write_array(path: Path, arr: np.ndarray, role: str, voxel_pitch_mm: float | None = None,
                units: str | None = None) -> None:
    """Raw little-endian blob ``<path>.bin`` with a JSON sidecar ``<path>.json``."""
    path = Path(path)
    tag = "u1" if arr.dtype == np.uint8 else "f8"
    raw = np.ascontiguousarray(arr, dtype=_DTYPES[tag]).tobytes()
    header = {
        "shape": list(arr.shape),
        "dtype": tag,
        "byte_order": "LE",
        "role": role,
        "sha256": hashlib.sha256(raw).hexdigest(),
    }
    if voxel_pitch_mm is not None:
        header["voxel_pitch_mm"] = float(voxel_pitch_mm)
    if units is not None:
        header["units"] = units
    path.parent.mkdir(parents=True, exist_ok=True)
    path.with_suffix(".bin").write_bytes(raw)
    path.with_suffix(".json").write_text(json.dumps(header, indent=2, sort_keys=True), encoding="utf-8")


def read_array(path: Path) -> tuple[np.ndarray, dict]:
    path = Path(path)
    try:
        header = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
        shape = tuple(int(s) for s in header["shape"])
        tag = header["dtype"]
        if tag not in _DTYPES or header.get("byte_order") != "LE":
            raise ValueError(f"unsupported dtype/byte order {tag!r}/{header.get('byte_order')!r}")
    except FileNotFoundError:
        raise
    except (ValueError, KeyError, TypeError) as exc:
        raise CorruptHeaderError(f"corrupt header for {path}: {exc}") from exc
    raw = path.with_suffix(".bin").read_bytes()
    dtype = np.dtype(_DTYPES[tag])
    expected = int(np.prod(shape)) * dtype.itemsize
    if len(raw) < expected:
        raise TruncatedBlobError(f"{path}.bin holds {len(raw)} bytes, header promises {expected}")
    if len(raw) > expected:
        raise CorruptHeaderError(f"{path}.bin holds {len(raw)} bytes, more than the {expected} in its header")
    if "sha256" in header and hashlib.sha256(raw).hexdigest() != header["sha256"]:
        raise FingerprintMismatchError(f"{path}.bin does not match the checksum in its header")
    arr = np.frombuffer(raw, dtype=dtype).reshape(shape)
    return (arr.astype(np.float64) if tag == "f8" else arr.copy()), header


def write_volume(v: Volume, path: Path) -> None:
    write_array(path, np.asarray(v.data, dtype=np.float64), "volume", v.voxel_pitch_mm, v.units)


def read_volume(path: Path) -> Volume:
    arr, header = read_array(path)
    if header.get("role") not in ("volume", None):
        raise CorruptHeaderError(f"{path} holds a {header.get('role')!r}, not a volume")
    return Volume(arr, float(header.get("voxel_pitch_mm", 2.5)), header.get("units", "HU"))


def write_mask(m: LabelMask, path: Path) -> None:
    write_array(path, np.asarray(m.data, dtype=np.uint8), "mask")


def read_mask(path: Path) -> LabelMask:
    arr, _ = read_array(path)
    return LabelMask(arr.astype(np.uint8))


def write_pgm(path: Path, image: np.ndarray, window: tuple[float, float] = (0.0, 1.0)) -> None:
    """Binary 8-bit PGM (P5) of a 2D array after linear windowing to [lo, hi]."""
    lo, hi = window
    img = np.clip((np.asarray(image, dtype=np.float64) - lo) / max(hi - lo, 1e-12), 0.0, 1.0)
    pix = np.round(img.T[::-1] * 255).astype(np.uint8)  # y up, x right
    h, w = pix.shape
    head = f"P5\n# window={hi - lo:.6g} level={(hi + lo) / 2:.6g}\n{w} {h}\n255\n".encode("ascii")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Path(path).write_bytes(head + pix.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens = []
    pos = 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        tokens.append(raw[pos:end].decode("ascii"))
        pos = end
    if tokens[0] != "P5":
        raise ValueError(f"{path} is not a binary PGM")
    w, h = int(tokens[1]), int(tokens[2])
    return np.frombuffer(raw[pos + 1:pos + 1 + w * h], dtype=np.uint8).reshape(h, w)


# ---------------------------------------------------------------------------
# corpus
# ---------------------------------------------------------------------------


@dataclass
class CorpusConfig:
    seed: int = 0
    grid_n: int = 64
    n_slices: int | None = None
    voxel_pitch_mm: float = 2.5
    recon_train: int = 200
    recon_test: int = 40
    seg_train: int = 112
    seg_test: int = 28
    seed_offsets: dict = field(default_factory=lambda: {
        "recon_train": 0, "recon_test": 100_000, "seg_train": 200_000, "seg_test": 300_000,
    })

    @property
    def counts(self) -> dict[str, int]:
        return {"recon_train": self.recon_train, "recon_test": self.recon_test,
                "seg_train": self.seg_train, "seg_test": self.seg_test}


@dataclass
class CorpusManifest:
    root: Path
    seed: int
    geometry: dict
    counts: dict
    normalization: dict
    splits: dict  # split name -> list of {"id", "seed", "files"}

    def split(self, name: str) -> list[dict]:
        return self.splits[name]

    @classmethod
    def load(cls, path: Path) -> "CorpusManifest":
        path = Path(path)
        if path.is_dir():
            path = path / "manifest.json"
        try:
            doc = json.loads(path.read_text(encoding="utf-8"))
            return cls(root=path.parent, seed=doc["seed"], geometry=doc["geometry"], counts=doc["counts"],
                       normalization=doc["normalization"], splits=doc["splits"])
        except (OSError, ValueError, KeyError) as exc:
            raise VolumeIOError(f"cannot read corpus manifest {path}: {exc}") from exc

    def to_json(self) -> str:
        doc = {"seed": self.seed, "geometry": self.geometry, "counts": self.counts,
               "normalization": self.normalization, "splits": self.splits}
        return json.dumps(doc, indent=2, sort_keys=True)


def _seed_ranges(cfg: CorpusConfig) -> dict[str, range]:
    ranges = {}
    for name, count in cfg.counts.items():
        if count < 1:
            raise ValueError(f"corpus count {name} must be >= 1, got {count}")
        start = cfg.seed + int(cfg.seed_offsets[name])
        ranges[name] = range(start, start + count)
    names = list(ranges)
    for a in range(len(names)):
        for b in range(a + 1, len(names)):
            ra, rb = ranges[names[a]], ranges[names[b]]
            if ra.start < rb.stop and rb.start < ra.stop:
                raise ValueError(f"seed ranges of {names[a]} and {names[b]} overlap")
    return ranges


def make_corpus(cfg: CorpusConfig, geometry: FanBeamGeometry, out_dir: Path,
                cache_dir: Path | None = None) -> CorpusManifest:
    """Write the reconstruction corpus (projections, volumes, masks) and the
    segmentation corpus (volumes, masks) under ``out_dir``."""
    out_dir = Path(out_dir)
    if geometry.grid_n != cfg.grid_n:
        raise ValueError(f"geometry grid {geometry.grid_n} differs from corpus grid {cfg.grid_n}")
    ranges = _seed_ranges(cfg)
    try:
        out_dir.mkdir(parents=True, exist_ok=True)
        probe = out_dir / ".write_probe"
        probe.write_bytes(b"")
        probe.unlink()
    except OSError as exc:
        raise OSError(f"corpus destination {out_dir} is not writable: {exc}") from exc
    projector = build_projector(geometry, cache_dir)
    splits: dict[str, list[dict]] = {}
    for name, seeds in ranges.items():
        corpus, part = name.split("_")
        entries = []
        for s in seeds:
            sid = f"{corpus}-{part}-{s:07d}"
            base = Path(corpus) / part / sid
            vol, mask = generate_phantom(s, cfg.grid_n, cfg.n_slices, cfg.voxel_pitch_mm)
            y = hu_normalize(vol)
            files = {"volume": str(base) + "_volume", "mask": str(base) + "_mask"}
            write_array(out_dir / files["volume"], y, "volume", cfg.voxel_pitch_mm, "normalized")
            write_mask(mask, out_dir / files["mask"])
            if corpus == "recon":
                x_ap, x_lat = simulate_projection_pair(y, projector)
                files["x_ap"] = str(base) + "_xap"
                files["x_lat"] = str(base) + "_xlat"
                write_array(out_dir / files["x_ap"], x_ap, "projection", units="normalized")
                write_array(out_dir / files["x_lat"], x_lat, "projection", units="normalized")
            entries.append({"id": sid, "seed": s, "files": files})
        splits[name] = entries
    manifest = CorpusManifest(
        root=out_dir,
        seed=cfg.seed,
        geometry={k: v for k, v in geometry.__dict__.items()},
        counts=cfg.counts,
        normalization={"offset": HU_OFFSET, "span": HU_SPAN},
        splits=splits,
    )
    (out_dir / "manifest.json").write_text(manifest.to_json(), encoding="utf-8")
    return manifest


def load_sample(manifest: CorpusManifest, entry: dict) -> TrainingSample:
    files = entry["files"]
    root = manifest.root
    y, _ = read_array(root / files["volume"])
    mask, _ = read_array(root / files["mask"])
    if "x_ap" in files:
        x_ap, _ = read_array(root / files["x_ap"])
        x_lat, _ = read_array(root / files["x_lat"])
    else:
        x_ap = x_lat = np.zeros((0, 0))
    return TrainingSample(entry["id"], int(entry["seed"]), x_ap, x_lat, y, mask.astype(np.uint8))


def load_split(manifest: CorpusManifest, split: str) -> list[TrainingSample]:
    return [load_sample(manifest, e) for e in manifest.split(split)]
