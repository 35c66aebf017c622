"""Run configuration, segmentation pretraining, adversarial training and inference."""

from __future__ import annotations

import copy
import hashlib
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .fanbeam import FanBeamGeometry, build_geometry, build_projector
from .losses import (
    LossBreakdown, LossLog, LossWeights, dice_seg_loss, lsgan_d_loss, lsgan_g_loss, one_hot,
    perceptual_loss, projection_loss, recon_loss, soft_dice_loss, total_generator_loss,
)
from .networks import (
    DiscriminatorConfig, DiscriminatorNet, FeatureExtractor, FeatureExtractorConfig, GeneratorConfig,
    GeneratorNet, SegNet, SegNetConfig, predict_labels,
)
from .optim import Adam
from .phantoms import (
    CorpusManifest, LabelMask, TrainingSample, Volume, VolumeIOError, hu_denormalize, load_split,
)
from .tensor import Tensor, backward, mul, no_grad, set_deterministic

log = logging.getLogger(__name__)

# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

DEFAULT_CONFIG = {
    "corpus": None,
    "out_dir": "runs/default",
    "cache_dir": None,
    "seed": 0,
    "deterministic": False,
    "epochs": 30,
    "batch_size": 4,
    "lr_gan": 2e-4,
    "betas_gan": [0.5, 0.999],
    "seg_epochs": 200,
    "seg_batch_size": 2,
    "lr_seg": 5e-4,
    "betas_seg": [0.9, 0.999],
    "seg_patch": 32,
    "seg_eval_every": 1,
    "seg_time_budget_min": None,
    "seg_checkpoint": None,
    "weights": LossWeights().to_dict(),
    "perceptual": {"norm": "l2", "slice_axis": "axial"},
    "geometry": {"grid_n": 64, "voxel_pitch_mm": 2.5, "sid_mm": 595.0, "sdd_mm": 1085.6,
                 "n_detector_bins": None, "detector_pitch_mm": None},
    "data": {"n_slices": None, "recon_train": 200, "recon_test": 40, "seg_train": 112, "seg_test": 28},
    "generator": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(GeneratorConfig()).items()},
    "discriminator": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(DiscriminatorConfig()).items()},
    "segnet": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(SegNetConfig()).items()},
    "features": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(FeatureExtractorConfig()).items()},
}

# keys that may change between a run and its resumption
RESUMABLE_KEYS = {"epochs", "out_dir", "seg_epochs", "seg_time_budget_min", "cache_dir", "deterministic"}


class ConfigError(ValueError):
    pass


def _merge(base: dict, update: dict, where: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        path = f"{where}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {path!r}")
        if isinstance(base[k], dict):
            if not isinstance(v, dict):
                raise ConfigError(f"config key {path!r} must be a mapping")
            out[k] = _merge(base[k], v, path + ".")
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], object]:
    """``a.b=value``; the value is parsed as JSON when possible, else kept as text."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except ValueError:
        value = raw
    return key.strip().split("."), value


def apply_overrides(doc: dict, overrides) -> dict:
    out = copy.deepcopy(doc)
    for item in overrides or []:
        keys, value = parse_override(item)
        node = out
        ref = DEFAULT_CONFIG
        for i, k in enumerate(keys):
            if not isinstance(ref, dict) or k not in ref:
                raise ConfigError(f"unknown override key {'.'.join(keys[:i + 1])!r}")
            if i == len(keys) - 1:
                node[k] = value
            else:
                node = node.setdefault(k, {})
                ref = ref[k]
    return out


@dataclass
class RunConfig:
    """Validated run configuration; ``raw`` holds the full resolved mapping."""

    raw: dict = field(default_factory=lambda: copy.deepcopy(DEFAULT_CONFIG))

    def __post_init__(self):
        self.raw = _merge(DEFAULT_CONFIG, self.raw)
        r = self.raw
        for key in ("lr_gan", "lr_seg"):
            if not (isinstance(r[key], (int, float)) and r[key] > 0):
                raise ConfigError(f"{key} must be > 0, got {r[key]!r}")
        for key in ("epochs", "seg_epochs", "batch_size", "seg_batch_size", "seg_eval_every"):
            if not (isinstance(r[key], int) and r[key] >= 1):
                raise ConfigError(f"{key} must be an integer >= 1, got {r[key]!r}")
        if r["perceptual"]["norm"] not in ("l1", "l2"):
            raise ConfigError(f"perceptual.norm must be 'l1' or 'l2', got {r['perceptual']['norm']!r}")
        if r["perceptual"]["slice_axis"] not in ("axial", "coronal"):
            raise ConfigError(f"perceptual.slice_axis must be 'axial' or 'coronal'")
        try:
            self.weights
            self.geometry
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def load(cls, path: Path | None = None, overrides=None) -> "RunConfig":
        doc = {}
        if path is not None:
            try:
                doc = json.loads(Path(path).read_text(encoding="utf-8"))
            except (OSError, ValueError) as exc:
                raise ConfigError(f"cannot read config {path}: {exc}") from exc
            if not isinstance(doc, dict):
                raise ConfigError(f"config {path} must hold a JSON object")
        return cls(apply_overrides(_merge(DEFAULT_CONFIG, doc), overrides))

    def __getattr__(self, name):
        raw = self.__dict__.get("raw")
        if raw is not None and name in raw:
            return raw[name]
        raise AttributeError(name)

    @property
    def weights(self) -> LossWeights:
        return LossWeights.from_dict(self.raw["weights"])

    @property
    def geometry(self) -> FanBeamGeometry:
        return build_geometry({k: v for k, v in self.raw["geometry"].items() if v is not None})

    def net_config(self, kind: str):
        cls = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig,
               "segnet": SegNetConfig, "features": FeatureExtractorConfig}[kind]
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in self.raw[kind].items()}
        return cls(**vals)

    def to_json(self) -> str:
        return json.dumps(self.raw, indent=2, sort_keys=True)

    def fingerprint(self) -> str:
        doc = {k: v for k, v in self.raw.items() if k not in RESUMABLE_KEYS}
        return hashlib.sha256(json.dumps(doc, sort_keys=True).encode()).hexdigest()[:16]

    def with_overrides(self, overrides) -> "RunConfig":
        return RunConfig(apply_overrides(self.raw, overrides))


def write_config_snapshot(cfg: RunConfig, out_dir: Path, name: str = "resolved_config.json") -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    path = out_dir / name
    path.write_text(cfg.to_json() + "\n", encoding="utf-8")
    return path


def open_corpus(cfg: RunConfig) -> CorpusManifest:
    if not cfg.corpus:
        raise ConfigError("config key 'corpus' (path to the corpus manifest) is not set")
    return CorpusManifest.load(Path(cfg.corpus))


def manifest_geometry(manifest: CorpusManifest) -> FanBeamGeometry:
    return FanBeamGeometry(**manifest.geometry)


def _load_split_checked(manifest: CorpusManifest, split: str) -> list[TrainingSample]:
    if split not in manifest.splits or not manifest.splits[split]:
        raise VolumeIOError(f"corpus {manifest.root} has no {split!r} samples")
    try:
        return load_split(manifest, split)
    except (OSError, ValueError) as exc:
        raise VolumeIOError(f"corpus {manifest.root}: split {split!r} unreadable: {exc}") from exc


# ---------------------------------------------------------------------------
# segmentation pretraining
# ---------------------------------------------------------------------------


@dataclass
class SegPretrainResult:
    checkpoint: Path
    best_dsc: float
    best_epoch: int
    epochs_run: int
    history: list[dict]
    seconds: float


def mean_foreground_dsc(net: SegNet, samples: list[TrainingSample]) -> float:
    """Hard-mask DSC averaged over lung, liver, bone and over samples."""
    from .evaluation import ORGAN_LABELS, dsc

    scores = []
    with no_grad():
        for s in samples:
            pred = predict_labels(net(Tensor(s.y)))
            scores.append(np.mean([dsc(pred, s.mask, organ) for organ in ORGAN_LABELS]))
    return float(np.mean(scores))


def _crop(rng: np.random.Generator, shape: tuple[int, ...], patch: int | None, multiple: int):
    if not patch or patch >= min(shape):
        return tuple(slice(None) for _ in shape)
    p = max(multiple, patch // multiple * multiple)
    return tuple(slice(o, o + p) for o in (int(rng.integers(0, n - p + 1)) for n in shape))


def pretrain_segnet(cfg: RunConfig, out_dir: Path | None = None,
                    train: list[TrainingSample] | None = None,
                    test: list[TrainingSample] | None = None) -> SegPretrainResult:
    """Dice-loss training of the segmentation U-Net on random patches; the
    checkpoint with the best held-out DSC is kept and marked frozen."""
    if train is None or test is None:
        manifest = open_corpus(cfg)
        train = _load_split_checked(manifest, "seg_train")
        test = _load_split_checked(manifest, "seg_test")
    if cfg.deterministic:
        set_deterministic(True)
    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    net = SegNet(cfg.net_config("segnet"))
    opt = Adam(net.parameters(), lr=cfg.lr_seg, betas=tuple(cfg.betas_seg))
    multiple = 2 ** (net.levels - 1)
    budget = cfg.seg_time_budget_min
    best, best_epoch, history = -1.0, 0, []
    path = out_dir / "segnet"
    t0 = time.perf_counter()
    epoch = 0
    train_secs, eval_secs = [], []

    def evaluate(row):
        nonlocal best, best_epoch
        t = time.perf_counter()
        score = mean_foreground_dsc(net, test)
        eval_secs.append(time.perf_counter() - t)
        row["dsc"] = score
        if score > best:
            best, best_epoch = score, row["epoch"]
            net.save(path, {"epoch": row["epoch"], "dsc": score, "seed": cfg.seed,
                            "segnet": cfg.raw["segnet"], "frozen": True})

    for epoch in range(1, cfg.seg_epochs + 1):
        t_epoch = time.perf_counter()
        rng = np.random.default_rng([cfg.seed, epoch, 7])
        order = rng.permutation(len(train))
        losses = []
        for start in range(0, len(order), cfg.seg_batch_size):
            idx = order[start:start + cfg.seg_batch_size]
            window = _crop(rng, train[idx[0]].y.shape, cfg.seg_patch, multiple)
            v = np.stack([train[i].y[window] for i in idx])
            target = one_hot(np.stack([train[i].mask[window] for i in idx]))
            opt.zero_grad()
            loss = soft_dice_loss(net(Tensor(v)), Tensor(target))
            backward(loss)
            opt.step()
            losses.append(loss.item())
        train_secs.append(time.perf_counter() - t_epoch)
        row = {"epoch": epoch, "loss": float(np.mean(losses))}
        history.append(row)
        if epoch % cfg.seg_eval_every == 0 or epoch == cfg.seg_epochs:
            evaluate(row)
        log.info("segnet epoch %d loss %.4f dsc %s", epoch, row["loss"], row.get("dsc"))
        if budget is not None and epoch < cfg.seg_epochs:
            # stop early when one more epoch plus an evaluation would overrun the budget
            eval_cost = max(eval_secs) if eval_secs else max(train_secs)
            projected = time.perf_counter() - t0 + max(train_secs) + eval_cost
            if projected > budget * 60.0:
                if "dsc" not in row:
                    evaluate(row)
                    log.info("segnet epoch %d dsc %s", epoch, row["dsc"])
                log.info("segnet pretraining stopped to stay within the %.1f min budget", budget)
                break
    (out_dir / "segnet_history.json").write_text(json.dumps(history, indent=2), encoding="utf-8")
    return SegPretrainResult(path, best, best_epoch, epoch, history, time.perf_counter() - t0)


def load_segnet(path: Path) -> SegNet:
    """Load a pretrained segmentation net, frozen; the stored checksum must match."""
    arrays, meta = load_checkpoint(Path(path))
    vals = {k: tuple(v) if isinstance(v, list) else v for k, v in meta.get("segnet", {}).items()}
    net = SegNet(SegNetConfig(**vals))
    net.load_state_dict(arrays)
    net.freeze()
    if meta.get("checksum") and meta["checksum"] != net.checksum():
        raise CheckpointError(f"segnet checkpoint {path}: parameter checksum mismatch")
    return net


# ---------------------------------------------------------------------------
# adversarial training
# ---------------------------------------------------------------------------


@dataclass
class GanRun:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    checkpoints: list[Path]
    log_path: Path
    steps: int


def _checkpoint_path(out_dir: Path, epoch: int) -> Path:
    return out_dir / "checkpoints" / f"epoch_{epoch:04d}"


def latest_checkpoint(out_dir: Path) -> Path | None:
    found = sorted((Path(out_dir) / "checkpoints").glob("epoch_*.json"))
    return found[-1].with_suffix("") if found else None


def _gan_state(g: GeneratorNet, d: DiscriminatorNet, opt_g: Adam, opt_d: Adam) -> dict:
    tensors = {}
    for prefix, net in (("G.", g), ("D.", d)):
        for k, v in net.state_dict().items():
            tensors[prefix + k] = v
    for prefix, opt in (("optG.", opt_g), ("optD.", opt_d)):
        for k, v in opt.state_arrays().items():
            tensors[prefix + k] = v
    return tensors


def _split_state(arrays: dict, prefix: str) -> dict:
    n = len(prefix)
    return {k[n:]: v for k, v in arrays.items() if k.startswith(prefix)}


def _mean_breakdown(parts: list[LossBreakdown], step: int, dis: float) -> LossBreakdown:
    vals = {k: float(np.mean([getattr(b, k) for b in parts])) for k in ("gen", "r", "proj", "s", "p", "total")}
    return LossBreakdown(step=step, dis=dis, **vals)


def generator_terms(g: GeneratorNet, d: DiscriminatorNet, sample: TrainingSample, w: LossWeights,
                    projector=None, seg: SegNet | None = None, fx: FeatureExtractor | None = None,
                    perceptual: dict | None = None) -> dict:
    """All generator loss terms for one sample; zero-weight terms are not computed."""
    perceptual = perceptual or {}
    y_hat = g(Tensor(sample.x_ap[None]), Tensor(sample.x_lat[None]))
    y = sample.y[None]
    terms = {}
    if w.lambda_gen:
        terms["gen"] = lsgan_g_loss(d(y_hat))
    if w.lambda_r:
        terms["r"] = recon_loss(y_hat, y)
    if w.lambda_proj:
        terms["proj"] = projection_loss(y_hat, y, projector)
    if w.lambda_s:
        terms["s"] = dice_seg_loss(y_hat, y, seg)
    if w.lambda_p:
        terms["p"] = perceptual_loss(y_hat, y, fx, perceptual.get("norm", "l2"), perceptual.get("slice_axis", "axial"))
    return terms


def train_gan(cfg: RunConfig, seg: SegNet | None = None, fx: FeatureExtractor | None = None,
              out_dir: Path | None = None, samples: list[TrainingSample] | None = None,
              geometry: FanBeamGeometry | None = None, resume: bool = True,
              max_steps: int | None = None) -> GanRun:
    """Alternating least-squares GAN training with per-epoch checkpoints.

    Each batch runs a discriminator step on real volumes against detached
    reconstructions, then a generator step on the weighted objective with the
    discriminator held fixed.  Batch members are processed one at a time and
    their gradients accumulated, each scaled by 1/batch.
    """
    if samples is None:
        manifest = open_corpus(cfg)
        samples = _load_split_checked(manifest, "recon_train")
        geometry = geometry or manifest_geometry(manifest)
    geometry = geometry or cfg.geometry
    if cfg.deterministic:
        set_deterministic(True)
    w = cfg.weights
    if w.lambda_s > 0:
        if seg is None and cfg.seg_checkpoint:
            seg = load_segnet(Path(cfg.seg_checkpoint))
        if seg is None:
            raise ConfigError("lambda_s > 0 needs a pretrained segmentation network (seg_checkpoint)")
        if not seg.frozen:
            raise ConfigError("the segmentation network must be frozen during GAN training")
    if w.lambda_p > 0 and fx is None:
        fx = FeatureExtractor(cfg.net_config("features"))
    seg = seg if w.lambda_s > 0 else None
    fx = fx if w.lambda_p > 0 else None
    projector = build_projector(geometry, cfg.cache_dir) if w.lambda_proj > 0 else None

    out_dir = Path(out_dir or cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    g = GeneratorNet(geometry, cfg.net_config("generator"), cfg.cache_dir)
    n = geometry.grid_n
    d = DiscriminatorNet(cfg.net_config("discriminator"), grid=(n, n, samples[0].y.shape[-1]))
    opt_g = Adam(g.parameters(), lr=cfg.lr_gan, betas=tuple(cfg.betas_gan))
    opt_d = Adam(d.parameters(), lr=cfg.lr_gan, betas=tuple(cfg.betas_gan))
    loss_log = LossLog(out_dir / "loss_log.csv")
    fingerprint = cfg.fingerprint()

    start_epoch, step = 0, 0
    last = latest_checkpoint(out_dir) if resume else None
    if last is not None:
        arrays, meta = load_checkpoint(last)
        if meta.get("fingerprint") != fingerprint:
            raise CheckpointError(
                f"checkpoint {last} was written by a different configuration "
                f"({meta.get('fingerprint')} != {fingerprint})"
            )
        g.load_state_dict(_split_state(arrays, "G."))
        d.load_state_dict(_split_state(arrays, "D."))
        opt_g.load_state_arrays(_split_state(arrays, "optG."))
        opt_d.load_state_arrays(_split_state(arrays, "optD."))
        start_epoch, step = int(meta["epoch"]), int(meta["step"])
        loss_log.truncate(int(meta["log_rows"]))
    elif loss_log.path.exists():
        loss_log.path.unlink()

    written = []
    bsz = cfg.batch_size
    for epoch in range(start_epoch + 1, cfg.epochs + 1):
        order = np.random.default_rng([cfg.seed, epoch]).permutation(len(samples))
        for start in range(0, len(order), bsz):
            batch = [samples[i] for i in order[start:start + bsz]]
            scale = 1.0 / len(batch)
            step += 1
            # discriminator step on detached reconstructions
            opt_d.zero_grad()
            dis = 0.0
            for s in batch:
                with no_grad():
                    fake = g(Tensor(s.x_ap[None]), Tensor(s.x_lat[None]))
                l_dis = lsgan_d_loss(d(Tensor(s.y[None])), d(Tensor(fake.data)))
                if not math.isfinite(l_dis.item()):
                    raise FloatingPointError(f"loss term 'dis' is not finite at step {step}")
                backward(mul(l_dis, scale))
                dis += l_dis.item() * scale
            opt_d.step()
            # generator step with the discriminator held fixed
            d.set_trainable(False)
            opt_g.zero_grad()
            parts = []
            try:
                for s in batch:
                    terms = generator_terms(g, d, s, w, projector, seg, fx, cfg.perceptual)
                    b = total_generator_loss(terms, w, step=step, dis=dis)
                    backward(mul(b.tensor, scale))
                    parts.append(b)
            finally:
                d.set_trainable(True)
            opt_g.step()
            loss_log.append(_mean_breakdown(parts, step, dis))
            if max_steps is not None and step >= max_steps:
                return GanRun(g, d, written, loss_log.path, step)
        path = _checkpoint_path(out_dir, epoch)
        save_checkpoint(path, _gan_state(g, d, opt_g, opt_d), {
            "epoch": epoch, "step": step, "fingerprint": fingerprint, "log_rows": step,
            "seed": cfg.seed, "weights": w.to_dict(), "geometry": asdict(geometry),
            "generator": cfg.raw["generator"], "discriminator": cfg.raw["discriminator"],
            "seg_checkpoint": cfg.seg_checkpoint,
        })
        written.append(path)
        log.info("epoch %d done (step %d)", epoch, step)
    return GanRun(g, d, written, loss_log.path, step)


# ---------------------------------------------------------------------------
# inference
# ---------------------------------------------------------------------------


def load_generator(checkpoint: Path, cache_dir: Path | None = None) -> tuple[GeneratorNet, dict]:
    arrays, meta = load_checkpoint(Path(checkpoint))
    try:
        geometry = FanBeamGeometry(**meta["geometry"])
        vals = {k: tuple(v) if isinstance(v, list) else v for k, v in meta["generator"].items()}
    except KeyError as exc:
        raise CheckpointError(f"checkpoint {checkpoint} lacks {exc} metadata") from exc
    g = GeneratorNet(geometry, GeneratorConfig(**vals), cache_dir)
    g.load_state_dict(_split_state(arrays, "G."))
    g.freeze()
    return g, meta


def reconstruct(checkpoint, x_ap: np.ndarray, x_lat: np.ndarray, seg: SegNet | None = None,
                cache_dir: Path | None = None) -> tuple[Volume, LabelMask]:
    """HU volume and argmax organ mask from one projection pair.

    ``checkpoint`` is a checkpoint path or an already loaded generator.
    """
    g = checkpoint if isinstance(checkpoint, GeneratorNet) else load_generator(checkpoint, cache_dir)[0]
    x_ap = np.asarray(x_ap, dtype=np.float64)
    x_lat = np.asarray(x_lat, dtype=np.float64)
    with no_grad():
        y = g(Tensor(x_ap), Tensor(x_lat)).data
        mask = predict_labels(seg(Tensor(y))) if seg is not None else np.zeros(y.shape, dtype=np.uint8)
    return hu_denormalize(y, g.geometry.voxel_pitch_mm), LabelMask(mask)
