"""Teacher training with the margin-gated intra-class term, and student distillation."""
import csv
import logging
import time
from dataclasses import asdict, dataclass, field, fields
from enum import Enum
from pathlib import Path
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, field_validator
from scipy.stats import entropy
from tqdm import tqdm

from . import ndgrad as nd
from .config import config_hash
from .errors import ConfigError, DivergenceError
from .losses import (cross_entropy, gated_intra_loss, intra_tuplet_loss, kd_student_loss, margins, one_hot,
                     teacher_total_loss)
from .ndgrad import Tensor
from .negcache import CacheConfig, CacheMode, PipelineCache, mean_staleness, negatives_for
from .nets import (MLPModel, embed_normalized, forward_all, forward_logits, init_mlp, soft_labels,
                   standardize_inputs)
from .synthdata import Dataset, augment, batch_iter, derive_seed

logger = logging.getLogger(__name__)

# A frozen teacher is either a model or any function X -> probability rows.
TeacherLike = Union[MLPModel, Callable[[np.ndarray], np.ndarray]]


class IntraSource(str, Enum):
    CACHE = "cache"
    INLINE = "inline"


class TrainConfig(BaseModel):
    model_config = ConfigDict(populate_by_name=True)

    epochs: int = Field(90, ge=1)
    batch_size: int = Field(64, ge=1)
    lr: float = Field(0.1, gt=0)
    lr_decay_epochs: List[int] = [30, 60]
    lr_decay_factor: float = Field(0.1, gt=0)
    lam: float = Field(0.02, ge=0, alias="lambda")
    delta: float = Field(0.1, gt=0)
    capacity_m: int = Field(8, ge=1)
    alpha: float = Field(0.1, ge=0, le=1)
    aug_strength: float = Field(0.1, ge=0)
    seed: int = 0
    cache_mode: CacheMode = CacheMode.DRAIN_AND_CLEAR
    intra_source: IntraSource = IntraSource.CACHE
    use_margin_gate: bool = True
    # the gate stays shut for this many leading epochs
    gate_warmup_epochs: int = Field(1, ge=0)
    hidden_dims: List[int] = [64]
    embed_dim: int = Field(16, ge=1)
    student_hidden_dims: List[int] = [32]

    @field_validator("lr_decay_epochs", mode="before")
    @classmethod
    def _parse_epochs(cls, v):
        return _int_list(v)

    @field_validator("hidden_dims", "student_hidden_dims", mode="before")
    @classmethod
    def _parse_dims(cls, v):
        v = _int_list(v)
        if any(d < 1 for d in v):
            raise ValueError(f"hidden widths must be positive, got {v}")
        return v

    @field_validator("lr_decay_epochs")
    @classmethod
    def _sorted_epochs(cls, v):
        if any(e < 0 for e in v):
            raise ValueError(f"decay epochs must be >= 0, got {v}")
        return sorted(v)

    def cache_config(self) -> CacheConfig:
        return CacheConfig(capacity_m=self.capacity_m, delta=self.delta, mode=self.cache_mode)

    def teacher_dims(self, d_in: int, c: int) -> List[int]:
        return [d_in, *self.hidden_dims, self.embed_dim, c]

    def student_dims(self, d_in: int, c: int) -> List[int]:
        return [d_in, *self.student_hidden_dims, self.embed_dim, c]


def _int_list(v):
    # flat config files carry lists as "30,60"
    if isinstance(v, str):
        return [int(p) for p in v.replace(" ", "").split(",") if p]
    return v


def lr_at(cfg: TrainConfig, epoch: int) -> float:
    """Multi-step decay: lr * factor ** (number of decay epochs <= epoch)."""
    passed = sum(1 for e in cfg.lr_decay_epochs if e <= epoch)
    return cfg.lr * cfg.lr_decay_factor ** passed


@dataclass
class EpochRow:
    epoch: int
    lr: float
    ce: float
    intra: float
    gate_frac: float
    drains: int
    ms_per_batch: float
    total: float
    train_acc: float
    staleness: float


@dataclass
class BatchRecord:
    epoch: int
    batch: int
    ce: float
    intra: float
    total: float
    anchors: int


EPOCH_COLUMNS = [f.name for f in fields(EpochRow)]


@dataclass
class TrainLog:
    rows: List[EpochRow] = field(default_factory=list)
    batches: List[BatchRecord] = field(default_factory=list)
    cache_stats: Dict[int, dict] = field(default_factory=dict)
    # one PipelineCache.stats_json() snapshot per epoch
    epoch_cache_stats: List[str] = field(default_factory=list)

    def column(self, name: str) -> np.ndarray:
        return np.array([getattr(r, name) for r in self.rows])

    def to_csv(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", newline="", encoding="utf-8") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(EPOCH_COLUMNS)
            for row in self.rows:
                writer.writerow([getattr(row, name) for name in EPOCH_COLUMNS])
        logger.info(f"Wrote {len(self.rows)} epoch rows to {path}")

    def cache_stats_to_jsonl(self, path: Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w", encoding="utf-8") as f:
            for line in self.epoch_cache_stats:
                f.write(line + "\n")
        logger.info(f"Wrote {len(self.epoch_cache_stats)} cache stat snapshots to {path}")

    @classmethod
    def from_csv(cls, path: Path) -> "TrainLog":
        path = Path(path)
        if not path.exists():
            raise FileNotFoundError(f"Train log not found at: {path}")
        types = {f.name: f.type for f in fields(EpochRow)}
        with open(path, newline="", encoding="utf-8") as f:
            rows = [EpochRow(**{k: (int(v) if types[k] in (int, "int") else float(v)) for k, v in rec.items()})
                    for rec in csv.DictReader(f)]
        return cls(rows=rows)


class _EpochMeter:
    """Running per-epoch sums, flushed into one EpochRow."""

    def __init__(self):
        self.ce, self.intra, self.total = [], [], []
        self.open = self.seen = self.correct = self.drains = 0
        self.seconds = 0.0
        self.staleness: List[float] = []

    def row(self, epoch: int, lr: float) -> EpochRow:
        n_batches = max(len(self.ce), 1)
        return EpochRow(epoch=epoch, lr=lr, ce=float(np.mean(self.ce)), intra=float(np.mean(self.intra)),
                        gate_frac=self.open / max(self.seen, 1), drains=self.drains,
                        ms_per_batch=1000.0 * self.seconds / n_batches, total=float(np.mean(self.total)),
                        train_acc=self.correct / max(self.seen, 1),
                        staleness=float(np.mean(self.staleness)) if self.staleness else 0.0)


@dataclass
class _IntraStep:
    loss: Tensor
    anchors: int = 0
    drains: int = 0
    staleness: List[float] = field(default_factory=list)


def _same_class_negatives(emb: np.ndarray, labels: np.ndarray, j: int, limit: int) -> np.ndarray:
    others = [k for k in range(len(labels)) if k != j and labels[k] == labels[j]][:limit]
    return emb[others]


def _intra_step(model: MLPModel, cfg: TrainConfig, cache: PipelineCache, ds: Dataset, idx: np.ndarray,
                raw: Tensor, rho: np.ndarray, step: int) -> _IntraStep:
    """Intra-class term for one batch: mean gated tuplet loss over anchors with negatives."""
    labels = ds.y[idx]
    emb = nd.l2_normalize_rows(raw)
    admitted = rho > cfg.delta if cfg.use_margin_gate else np.ones(len(idx), dtype=bool)
    result = _IntraStep(Tensor(0.0))

    negatives: Dict[int, np.ndarray] = {}
    if cfg.intra_source is IntraSource.CACHE:
        latest: Dict[int, list] = {}
        for j in range(len(idx)):
            k, sample_id = int(labels[j]), int(idx[j])
            if cfg.use_margin_gate:
                if not cache.enqueue_if_margin(k, emb.data[j], rho[j], step, sample_id):
                    continue
            else:
                cache.push(k, emb.data[j], step, sample_id)
            drained = cache.drain_ready(k)
            if drained is not None:
                latest[k] = drained
                result.drains += 1
                result.staleness.append(mean_staleness(drained, step))
        for j in np.flatnonzero(admitted):
            entries = latest.get(int(labels[j]))
            if entries:
                negs = negatives_for(entries, int(idx[j]))
                if len(negs):
                    negatives[int(j)] = negs
    else:
        open_rows = np.flatnonzero(admitted)
        for pos, j in enumerate(open_rows):
            negs = _same_class_negatives(emb.data[open_rows], labels[open_rows], pos, cfg.capacity_m)
            if len(negs):
                negatives[int(j)] = negs

    if not negatives:
        return result
    anchor_rows = sorted(negatives)
    x_pos = np.stack([augment(ds.X[idx[j]], cfg.aug_strength, derive_seed(cfg.seed, "aug", step, int(idx[j])))
                      for j in anchor_rows])
    positives = embed_normalized(model, x_pos)
    losses = []
    for r, j in enumerate(anchor_rows):
        anchor, positive = nd.take_rows(emb, j), nd.take_rows(positives, r)
        if cfg.use_margin_gate:
            losses.append(gated_intra_loss(anchor, positive, negatives[j], rho[j], cfg.delta))
        else:
            losses.append(intra_tuplet_loss(anchor, positive, negatives[j]))
    result.loss = nd.mean(nd.stack(losses))
    result.anchors = len(anchor_rows)
    return result


def _check_model(model: MLPModel, ds: Dataset, role: str) -> None:
    if model.num_classes != ds.c or model.input_dim != ds.d_in:
        raise ConfigError(f"{role} expects {model.input_dim} features and {model.num_classes} classes; "
                          f"dataset has {ds.d_in} features and {ds.c} classes")


def _diverged(epoch: int, batch: int, components: Dict[str, float]) -> DivergenceError:
    err = DivergenceError(epoch, batch, components)
    logger.error(str(err))
    return err


def train_teacher(ds: Dataset, cfg: TrainConfig, model: Optional[MLPModel] = None,
                  progress: bool = False) -> Tuple[MLPModel, TrainLog]:
    """SGD on CE + lambda * gated intra-class loss.

    With lambda == 0 no embeddings are computed and the run is plain
    cross-entropy training. The gate is held shut for the first
    `gate_warmup_epochs` epochs, so those epochs are plain CE as well.
    A fresh model has its inputs standardized on `ds`.
    """
    if model is None:
        model = standardize_inputs(init_mlp(cfg.teacher_dims(ds.d_in, ds.c), derive_seed(cfg.seed, "init")), ds.X)
    _check_model(model, ds, "teacher")
    params = model.parameters()
    cache = PipelineCache(ds.c, cfg.cache_config())
    targets = one_hot(ds.y, ds.c)
    log = TrainLog()
    step = 0

    for epoch in tqdm(range(cfg.epochs), desc="teacher", disable=not progress):
        lr = lr_at(cfg, epoch)
        gate_ready = epoch >= cfg.gate_warmup_epochs
        intra_on = cfg.lam > 0 and (gate_ready or not cfg.use_margin_gate)
        meter = _EpochMeter()
        for b, idx in enumerate(batch_iter(len(ds), cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch))):
            start = time.perf_counter()
            logits, raw = forward_all(model, ds.X[idx])
            probs = nd.softmax_rows(logits)
            ce = cross_entropy(targets[idx], probs)
            rho = margins(probs.data, ds.y[idx])

            if intra_on:
                intra = _intra_step(model, cfg, cache, ds, idx, raw, rho, step)
            else:
                intra = _IntraStep(Tensor(0.0))
            total = teacher_total_loss(ce, intra.loss, cfg.lam)
            if not np.isfinite(total.item()):
                raise _diverged(epoch, b, {"ce": ce.item(), "intra": intra.loss.item(), "lambda": cfg.lam})

            nd.zero_grad(params)
            nd.backward(total)
            nd.sgd_step(params, lr)
            meter.seconds += time.perf_counter() - start

            meter.ce.append(ce.item())
            meter.intra.append(intra.loss.item())
            meter.total.append(total.item())
            if gate_ready:
                meter.open += int(np.sum(rho > cfg.delta))
            meter.seen += len(idx)
            meter.correct += int(np.sum(probs.data.argmax(axis=1) == ds.y[idx]))
            meter.drains += intra.drains
            meter.staleness.extend(intra.staleness)
            log.batches.append(BatchRecord(epoch, b, ce.item(), intra.loss.item(), total.item(), intra.anchors))
            logger.debug(f"epoch {epoch} batch {b}: ce={ce.item():.4f} intra={intra.loss.item():.4f} "
                         f"anchors={intra.anchors}")
            step += 1

        log.epoch_cache_stats.append(cache.stats_json())
        row = meter.row(epoch, lr)
        log.rows.append(row)
        logger.info(f"teacher epoch {epoch}: lr={lr:.4g} ce={row.ce:.4f} intra={row.intra:.4f} "
                    f"gate={row.gate_frac:.2f} drains={row.drains} acc={row.train_acc:.3f}")

    log.cache_stats = {k: asdict(v) for k, v in cache.stats().items()}
    return model, log


def _teacher_probs(teacher: TeacherLike, X: np.ndarray) -> np.ndarray:
    if isinstance(teacher, MLPModel):
        return soft_labels(teacher, X)
    return np.asarray(teacher(X), dtype=np.float64)


def distill_student(teacher: TeacherLike, ds: Dataset, cfg: TrainConfig, model: Optional[MLPModel] = None,
                    progress: bool = False) -> Tuple[MLPModel, TrainLog]:
    """Fit a student to q = alpha * y + (1 - alpha) * p_t with the teacher frozen."""
    if isinstance(teacher, MLPModel):
        _check_model(teacher, ds, "teacher")
    if model is None:
        model = standardize_inputs(init_mlp(cfg.student_dims(ds.d_in, ds.c), derive_seed(cfg.seed, "init")), ds.X)
    _check_model(model, ds, "student")
    params = model.parameters()
    targets = one_hot(ds.y, ds.c)
    log = TrainLog()

    for epoch in tqdm(range(cfg.epochs), desc="student", disable=not progress):
        lr = lr_at(cfg, epoch)
        meter = _EpochMeter()
        for b, idx in enumerate(batch_iter(len(ds), cfg.batch_size, derive_seed(cfg.seed, "epoch", epoch))):
            start = time.perf_counter()
            p_t = _teacher_probs(teacher, ds.X[idx])
            probs = nd.softmax_rows(forward_logits(model, ds.X[idx]))
            loss = kd_student_loss(targets[idx], p_t, probs, cfg.alpha)
            if not np.isfinite(loss.item()):
                raise _diverged(epoch, b, {"kd": loss.item(), "alpha": cfg.alpha})

            nd.zero_grad(params)
            nd.backward(loss)
            nd.sgd_step(params, lr)
            meter.seconds += time.perf_counter() - start

            meter.ce.append(loss.item())
            meter.intra.append(0.0)
            meter.total.append(loss.item())
            meter.seen += len(idx)
            meter.correct += int(np.sum(probs.data.argmax(axis=1) == ds.y[idx]))
            log.batches.append(BatchRecord(epoch, b, loss.item(), 0.0, loss.item(), 0))

        row = meter.row(epoch, lr)
        log.rows.append(row)
        logger.info(f"student epoch {epoch}: lr={lr:.4g} kd={row.ce:.4f} acc={row.train_acc:.3f}")
    return model, log


def accuracy(model: MLPModel, ds: Dataset) -> float:
    return float(np.mean(soft_labels(model, ds.X).argmax(axis=1) == ds.y))


def soft_label_entropy(model: MLPModel, ds: Dataset) -> float:
    """Mean Shannon entropy (nats) of the model's probability rows."""
    return float(np.mean(entropy(soft_labels(model, ds.X), axis=1)))


def mean_max_probability(model: MLPModel, ds: Dataset) -> float:
    return float(np.mean(soft_labels(model, ds.X).max(axis=1)))


def run_manifest(cfg: TrainConfig, ds: Dataset, role: str, extra: Optional[Dict] = None) -> Dict:
    """Everything needed to replay a run: resolved config, its hash and the derived seeds."""
    config = cfg.model_dump(mode="json", by_alias=True)
    manifest = {
        "role": role,
        "config": config,
        "config_hash": config_hash(config),
        "seeds": {"init": derive_seed(cfg.seed, "init"),
                  "epochs": [derive_seed(cfg.seed, "epoch", e) for e in range(min(cfg.epochs, 3))]},
        "dataset": {"samples": len(ds), "classes": ds.c, "d_in": ds.d_in, "seed": ds.seed,
                    "sha256": ds.source_sha256},
    }
    if extra:
        manifest.update(extra)
    return manifest


def params_bytes(model: MLPModel) -> Sequence[bytes]:
    return [p.data.tobytes() for p in model.parameters()]
