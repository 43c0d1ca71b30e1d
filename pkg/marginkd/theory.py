"""Numerical checks of the distance/loss relations and the lambda trade-off bounds.

The distance-ratio identity is checked per anchor on sampled sets; the
loss-ratio bounds are checked at a free-embedding minimizer of
L_inter + lambda * L_intra; the diversity claim is measured by a seeded
lambda sweep over real training runs.
"""
import logging
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd
from joblib import Parallel, delayed
from scipy.spatial.distance import cdist, pdist
from scipy.stats import ttest_rel

from . import ndgrad as nd
from .errors import ContractError, NumericError
from .losses import tuplet_loss, tuplet_loss_rows
from .ndgrad import Tensor
from .nets import MLPModel, embeddings
from .synthdata import Dataset, augment, derive_seed
from .train import TrainConfig, accuracy, distill_student, soft_label_entropy, train_teacher

logger = logging.getLogger(__name__)

E2 = np.exp(2.0)
EM2 = np.exp(-2.0)

Embedder = Union[MLPModel, Callable[[np.ndarray], np.ndarray]]

SWEEP_METRICS = ["intra_dist", "inter_dist", "entropy", "teacher_acc", "student_acc", "ms_per_batch"]
ABLATION_METRICS = ["intra_dist_no_gate", "inter_dist_no_gate", "entropy_no_gate", "student_acc_no_gate"]


@dataclass
class DistanceReport:
    d_intra: float
    d_inter: float
    l_intra: float
    l_inter: float
    m: int
    n: int
    K: float
    per_anchor: List["DistanceReport"] = field(default_factory=list, repr=False)
    # (anchor index, same-class indices, other-class indices) when sampled from a dataset
    indices: Optional[Tuple[int, np.ndarray, np.ndarray]] = field(default=None, repr=False)

    def to_dict(self) -> Dict:
        return {"d_intra": self.d_intra, "d_inter": self.d_inter, "l_intra": self.l_intra,
                "l_inter": self.l_inter, "m": self.m, "n": self.n, "K": self.K, "anchors": len(self.per_anchor) or 1}


@dataclass
class BoundReport:
    lam: float
    ratio: float
    lower: float
    upper: float
    c0: float
    c1: float
    c2: float
    c3: float
    satisfied: bool
    converged: bool = True
    m: int = 0
    n: int = 0

    def to_dict(self) -> Dict:
        out = asdict(self)
        out["lambda"] = out.pop("lam")
        return out


def report_from_similarities(pos_sim: float, intra_sims: Sequence[float], inter_sims: Sequence[float]) -> DistanceReport:
    """Distances and tuplet losses for one anchor from its raw dot products."""
    intra = np.asarray(intra_sims, dtype=np.float64).ravel()
    inter = np.asarray(inter_sims, dtype=np.float64).ravel()
    if intra.size == 0 or inter.size == 0:
        raise ContractError("need at least one same-class and one other-class similarity")
    pos = float(pos_sim)
    return DistanceReport(
        d_intra=float(np.mean(np.exp(intra))),
        d_inter=float(np.mean(np.exp(inter))),
        l_intra=float(np.log1p(np.sum(np.exp(intra - pos)))),
        l_inter=float(np.log1p(np.sum(np.exp(inter - pos)))),
        m=int(intra.size), n=int(inter.size), K=inter.size / intra.size,
    )


def _embed(embedder: Embedder, X: np.ndarray) -> np.ndarray:
    if isinstance(embedder, MLPModel):
        return embeddings(embedder, X)
    return np.asarray(embedder(X), dtype=np.float64)


def empirical_distances(embedder: Embedder, ds: Dataset, anchors: int, m: int, n: int, seed: int,
                        aug_strength: float = 0.1) -> DistanceReport:
    """Sample `anchors` anchors, each with m same-class and n other-class negatives.

    Negatives are drawn uniformly without replacement from the dataset. The
    returned report averages the per-anchor values and keeps every
    per-anchor report with its sampled indices.
    """
    if anchors < 1 or m < 1 or n < 1:
        raise ContractError(f"anchors, m and n must be >= 1, got {anchors}, {m}, {n}")
    counts = np.bincount(ds.y, minlength=ds.c)
    if counts.min() <= m:
        raise ContractError(f"every class needs more than m={m} samples; smallest class has {counts.min()}")
    if (len(ds) - counts).min() < n:
        raise ContractError(f"need at least n={n} other-class samples per class; have {(len(ds) - counts).min()}")

    rng = np.random.default_rng(seed)
    labels = ds.y
    reports = []
    for a in range(anchors):
        i = int(rng.integers(len(ds)))
        same = np.flatnonzero(labels == labels[i])
        same = same[same != i]
        other = np.flatnonzero(labels != labels[i])
        intra_idx = rng.choice(same, size=m, replace=False)
        inter_idx = rng.choice(other, size=n, replace=False)
        x_pos = augment(ds.X[i], aug_strength, derive_seed(seed, "positive", a))
        emb = _embed(embedder, np.vstack([ds.X[i], x_pos, ds.X[intra_idx], ds.X[inter_idx]]))
        anchor, positive = emb[0], emb[1]
        rep = report_from_similarities(anchor @ positive, emb[2:2 + m] @ anchor, emb[2 + m:] @ anchor)
        rep.indices = (i, intra_idx, inter_idx)
        reports.append(rep)

    return DistanceReport(
        d_intra=float(np.mean([r.d_intra for r in reports])),
        d_inter=float(np.mean([r.d_inter for r in reports])),
        l_intra=float(np.mean([r.l_intra for r in reports])),
        l_inter=float(np.mean([r.l_inter for r in reports])),
        m=m, n=n, K=n / m, per_anchor=reports,
    )


def theorem1_check(report: DistanceReport) -> Tuple[float, float]:
    """(exact_residual, asymptotic_residual), worst case over anchors.

    exact: d_intra/d_inter against K * (e^l_intra - 1) / (e^l_inter - 1),
    which holds for any finite sample. asymptotic: the same with both
    "- 1" terms dropped, which only holds as m and n grow.
    """
    exact, asymptotic = 0.0, 0.0
    for r in report.per_anchor or [report]:
        lhs = r.d_intra / r.d_inter
        exact = max(exact, abs(lhs - r.K * np.expm1(r.l_intra) / np.expm1(r.l_inter)) / abs(lhs))
        asymptotic = max(asymptotic, abs(lhs - r.K * np.exp(r.l_intra - r.l_inter)) / abs(lhs))
    logger.debug(f"distance identity residuals: exact={exact:.3e} asymptotic={asymptotic:.3e} (m={report.m}, n={report.n})")
    return float(exact), float(asymptotic)


def theorem2_constants(m: int, n: int) -> Tuple[float, float, float, float]:
    if m < 1 or n < 1:
        raise ContractError(f"m and n must be >= 1, got m={m}, n={n}")
    lo_m, hi_m = np.log1p(m * EM2), np.log1p(m * E2)
    lo_n, hi_n = np.log1p(n * EM2), np.log1p(n * E2)
    c0 = hi_m / lo_m - 1.0
    c1 = lo_n / lo_m
    c2 = hi_n / lo_n - 1.0
    c3 = lo_m / lo_n
    return float(c0), float(c1), float(c2), float(c3)


def theorem2_bound_check(l_intra: float, l_inter: float, lam: float, m: int, n: int,
                         converged: bool = True) -> BoundReport:
    """1/(c0*lam + c1) <= l_intra/l_inter <= c2/lam + c3, meaningful at a minimizer."""
    if l_inter <= 0:
        raise ContractError(f"l_inter must be positive, got {l_inter}")
    if lam <= 0:
        raise ContractError(f"lambda must be positive for the bound, got {lam}")
    c0, c1, c2, c3 = theorem2_constants(m, n)
    ratio = l_intra / l_inter
    lower = 1.0 / (c0 * lam + c1)
    upper = c2 / lam + c3
    if not converged:
        logger.warning(f"bound check at lambda={lam} uses losses from a run that did not converge")
    return BoundReport(lam=lam, ratio=ratio, lower=lower, upper=upper, c0=c0, c1=c1, c2=c2, c3=c3,
                       satisfied=bool(lower <= ratio <= upper), converged=converged, m=m, n=n)


def loss_lower_bounds(m: int, n: int) -> Tuple[float, float]:
    """(inter_lb, intra_lb) = (log(1 + n e^-2), log(1 + m e^-2))."""
    if m < 1 or n < 1:
        raise ContractError(f"m and n must be >= 1, got m={m}, n={n}")
    return float(np.log1p(n * EM2)), float(np.log1p(m * EM2))


def _project_rows(t: Tensor) -> None:
    t.data = t.data / np.linalg.norm(t.data, axis=1, keepdims=True)


def minimize_tuplet(n: int, dim: int = 8, seed: int = 0, steps: int = 2000, lr: float = 1.0) -> Tuple[float, float]:
    """Projected gradient descent on one tuplet loss over free unit vectors.

    Returns (final loss, log(1 + n e^-2)). The minimum puts the positive on
    the anchor and every negative at its antipode.
    """
    if n < 1 or dim < 2:
        raise ContractError(f"need n >= 1 and dim >= 2, got n={n}, dim={dim}")
    rng = np.random.default_rng(seed)
    U = Tensor(rng.standard_normal((n + 2, dim)), requires_grad=True)
    _project_rows(U)
    neg_rows = np.arange(2, n + 2)
    loss = None
    for _ in range(steps):
        E = nd.l2_normalize_rows(U)
        loss = tuplet_loss(nd.take_rows(E, 0), nd.take_rows(E, 1), nd.take_rows(E, neg_rows))
        nd.zero_grad([U])
        nd.backward(loss)
        nd.sgd_step([U], lr)
        _project_rows(U)
    E = nd.l2_normalize_rows(Tensor(U.data))
    final = tuplet_loss(nd.take_rows(E, 0), nd.take_rows(E, 1), nd.take_rows(E, neg_rows)).item()
    return final, loss_lower_bounds(1, n)[0]


@dataclass
class FreeEmbeddingResult:
    l_intra: float
    l_inter: float
    total: float
    lam: float
    steps: int
    converged: bool
    embeddings: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)


def _negative_sets(labels: np.ndarray, m: int, n: int, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    intra, inter = [], []
    for i, y in enumerate(labels):
        same = np.flatnonzero(labels == y)
        same = same[same != i]
        other = np.flatnonzero(labels != y)
        if len(other) < n:
            raise ContractError(f"only {len(other)} other-class samples for n={n}")
        intra.append(rng.choice(same, size=m, replace=len(same) < m))
        inter.append(rng.choice(other, size=n, replace=False))
    return np.array(intra), np.array(inter)


def minimize_free_embeddings(c: int = 4, per_class: int = 8, dim: int = 16, m: int = 8, n: int = 8,
                             lam: float = 1.0, seed: int = 0, steps: int = 1500, lr: float = 0.5,
                             tol: float = 1e-9) -> FreeEmbeddingResult:
    """Minimize mean L_inter + lam * mean L_intra over free unit anchors and positives.

    Each sample owns an anchor vector and a positive vector. Negative index
    sets are drawn once: same-class sets with replacement when the class has
    fewer than m other members, other-class sets without replacement.
    """
    if c < 2 or per_class < 2:
        raise ContractError(f"need c >= 2 and per_class >= 2, got {c}, {per_class}")
    if lam < 0:
        raise ContractError(f"lambda must be >= 0, got {lam}")
    rng = np.random.default_rng(seed)
    labels = np.repeat(np.arange(c), per_class)
    intra_idx, inter_idx = _negative_sets(labels, m, n, rng)
    N = len(labels)
    rows_m = np.repeat(np.arange(N)[:, None], m, axis=1)
    rows_n = np.repeat(np.arange(N)[:, None], n, axis=1)
    U = Tensor(rng.standard_normal((N, dim)), requires_grad=True)
    V = Tensor(rng.standard_normal((N, dim)), requires_grad=True)
    _project_rows(U)
    _project_rows(V)

    def objective():
        E, P = nd.l2_normalize_rows(U), nd.l2_normalize_rows(V)
        S = nd.matmul(E, nd.transpose(E))
        pos = nd.sum_rows(nd.mul(E, P))
        l_intra = nd.mean(tuplet_loss_rows(pos, nd.gather(S, rows_m, intra_idx)))
        l_inter = nd.mean(tuplet_loss_rows(pos, nd.gather(S, rows_n, inter_idx)))
        return nd.add(l_inter, nd.scale(l_intra, lam)), l_intra, l_inter

    previous, converged, done = np.inf, False, 0
    for done in range(1, steps + 1):
        total, _, _ = objective()
        value = total.item()
        if not np.isfinite(value):
            raise NumericError(f"free-embedding objective became non-finite at step {done}")
        if abs(previous - value) < tol:
            converged = True
            break
        previous = value
        nd.zero_grad([U, V])
        nd.backward(total)
        nd.sgd_step([U, V], lr)
        _project_rows(U)
        _project_rows(V)

    total, l_intra, l_inter = objective()
    if not converged:
        logger.warning(f"free-embedding minimizer stopped after {steps} steps without converging (lambda={lam})")
    return FreeEmbeddingResult(l_intra=l_intra.item(), l_inter=l_inter.item(), total=total.item(), lam=lam,
                               steps=done, converged=converged, embeddings=U.data.copy(), labels=labels)


# ---- lambda sweep ----

def pairwise_distances(emb: np.ndarray, labels: np.ndarray) -> Tuple[float, float]:
    """Mean Euclidean distance over same-class pairs and over different-class pairs."""
    classes = np.unique(labels)
    if len(classes) < 2 or all(np.sum(labels == k) < 2 for k in classes):
        raise ContractError(f"pairwise distances need >= 2 classes and a class with >= 2 samples; "
                            f"got class sizes {[int(np.sum(labels == k)) for k in classes]}")
    intra = np.concatenate([pdist(emb[labels == k]) for k in classes if np.sum(labels == k) > 1])
    inter = np.concatenate([cdist(emb[labels == a], emb[labels == b]).ravel()
                            for i, a in enumerate(classes) for b in classes[i + 1:]])
    return float(intra.mean()), float(inter.mean())


def _sweep_cell(ds: Dataset, lam: float, cfg: TrainConfig, seed: int, holdout_frac: float,
                gate_ablation: bool) -> Dict:
    row: Dict = {"lambda": lam, "seed": seed, "diverged": False}
    row.update({k: np.nan for k in SWEEP_METRICS})
    if gate_ablation:
        row.update({k: np.nan for k in ABLATION_METRICS})
    train_ds, held = ds.split(holdout_frac, derive_seed(seed, "split"))
    cell_cfg = cfg.model_copy(update={"lam": lam, "seed": seed})
    try:
        teacher, log = train_teacher(train_ds, cell_cfg)
        row["intra_dist"], row["inter_dist"] = pairwise_distances(embeddings(teacher, held.X), held.y)
        row["entropy"] = soft_label_entropy(teacher, held)
        row["teacher_acc"] = accuracy(teacher, held)
        row["ms_per_batch"] = float(np.mean(log.column("ms_per_batch")))
        student, _ = distill_student(teacher, train_ds, cell_cfg)
        row["student_acc"] = accuracy(student, held)
        if gate_ablation and lam > 0:
            ungated, _ = train_teacher(train_ds, cell_cfg.model_copy(update={"use_margin_gate": False}))
            row["intra_dist_no_gate"], row["inter_dist_no_gate"] = pairwise_distances(
                embeddings(ungated, held.X), held.y)
            row["entropy_no_gate"] = soft_label_entropy(ungated, held)
            ungated_student, _ = distill_student(ungated, train_ds, cell_cfg)
            row["student_acc_no_gate"] = accuracy(ungated_student, held)
    except NumericError as e:
        logger.warning(f"sweep cell lambda={lam} seed={seed} diverged: {e}")
        row["diverged"] = True
    return row


@dataclass
class SweepResult:
    cells: pd.DataFrame
    summary: pd.DataFrame

    def overhead(self) -> Dict[float, float]:
        return dict(zip(self.summary["lambda"], self.summary["overhead_ratio"]))


def lambda_sweep(ds: Dataset, lambdas: Sequence[float], cfg: TrainConfig, seeds: Sequence[int], workers: int = 1,
                 holdout_frac: float = 0.3, gate_ablation: bool = False, progress: bool = False) -> SweepResult:
    """Train, measure and distill once per (lambda, seed); aggregate mean and std per lambda.

    Diverged cells stay in `cells` with diverged=True and NaN metrics; they
    are excluded from the means and counted in the summary.
    """
    lambdas = [float(v) for v in lambdas]
    if len(lambdas) < 2 or 0.0 not in lambdas:
        raise ContractError(f"sweep needs >= 2 lambdas including the 0 control, got {lambdas}")
    if len(seeds) < 3:
        raise ContractError(f"sweep needs >= 3 seeds, got {len(seeds)}")

    jobs = [(lam, int(s)) for lam in lambdas for s in seeds]
    logger.info(f"Running {len(jobs)} sweep cells on {workers} worker(s)")
    rows = Parallel(n_jobs=workers, verbose=10 if progress else 0)(
        delayed(_sweep_cell)(ds, lam, cfg, s, holdout_frac, gate_ablation) for lam, s in jobs)
    cells = pd.DataFrame(rows)

    metrics = [c for c in cells.columns if c not in ("lambda", "seed", "diverged")]
    grouped = cells[~cells["diverged"]].groupby("lambda")[metrics].agg(["mean", "std"])
    grouped.columns = [f"{metric}_{stat}" for metric, stat in grouped.columns]
    summary = grouped.reindex(lambdas).reset_index()
    summary["diverged"] = cells.groupby("lambda")["diverged"].sum().reindex(lambdas).to_numpy()
    control_ms = summary.loc[summary["lambda"] == 0.0, "ms_per_batch_mean"].iloc[0]
    summary["overhead_ratio"] = summary["ms_per_batch_mean"] / control_ms
    for lam, ratio in zip(summary["lambda"], summary["overhead_ratio"]):
        logger.info(f"lambda={lam}: ms/batch ratio vs control {ratio:.3f}")
    return SweepResult(cells=cells, summary=summary)


def sensitivity_view(result: SweepResult) -> pd.DataFrame:
    """Student accuracy per lambda, with its change against the lambda=0 control.

    Sweeps run with the gate ablation also get the accuracy of students
    distilled from ungated teachers and the gain the gate brings over them.
    """
    view = result.summary[["lambda", "student_acc_mean", "student_acc_std"]].copy()
    control = view.loc[view["lambda"] == 0.0, "student_acc_mean"].iloc[0]
    view["delta_vs_control"] = view["student_acc_mean"] - control
    if "student_acc_no_gate_mean" in result.summary.columns:
        view["student_acc_no_gate_mean"] = result.summary["student_acc_no_gate_mean"]
        view["student_acc_no_gate_std"] = result.summary["student_acc_no_gate_std"]
        view["gate_gain"] = view["student_acc_mean"] - view["student_acc_no_gate_mean"]
    return view


@dataclass
class PairedResult:
    mean_diff: float
    statistic: float
    p_value: float
    n: int

    def significant(self, level: float = 0.05) -> bool:
        return self.p_value < level


def paired_comparison(treated: Sequence[float], control: Sequence[float], alternative: str = "greater") -> PairedResult:
    """One-sided paired t-test of treated vs control over matched seeds."""
    a, b = np.asarray(treated, dtype=np.float64), np.asarray(control, dtype=np.float64)
    if a.shape != b.shape or a.size < 2:
        raise ContractError(f"paired comparison needs two equal-length samples of size >= 2, got {a.shape}, {b.shape}")
    diff = a - b
    if np.allclose(diff, diff[0]):
        # constant differences: t is infinite or undefined
        better = {"greater": diff[0] > 0, "less": diff[0] < 0}.get(alternative, diff[0] != 0)
        return PairedResult(float(diff.mean()), np.inf if better else 0.0, 0.0 if better else 1.0, int(a.size))
    res = ttest_rel(a, b, alternative=alternative)
    return PairedResult(float(diff.mean()), float(res.statistic), float(res.pvalue), int(a.size))
