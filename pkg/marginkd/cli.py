#!/usr/bin/env python3
"""
marginkd CLI - generate data, train teachers, distill students and check the theory
"""
import csv
import functools
import hashlib
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Annotated, Any, Dict, Iterable, List, Optional

import numpy as np
import typer
from pydantic import BaseModel
from rich import box
from rich.console import Console
from rich.table import Table

from .config import canonical_json, config_hash, read_kv_file, resolve, settings, setup_logging
from .errors import ConfigError, ContractError, MarginKDError
from .negcache import CacheMode
from .nets import load_checkpoint, save_checkpoint
from .synthdata import Dataset, GeneratorConfig, class_counts, generate_from_config
from .theory import (empirical_distances, lambda_sweep, loss_lower_bounds, minimize_free_embeddings,
                     report_from_similarities, sensitivity_view, theorem1_check, theorem2_bound_check,
                     theorem2_constants)
from .train import IntraSource, TrainConfig, distill_student, run_manifest, train_teacher

logger = logging.getLogger(__name__)

app = typer.Typer(
    name="marginkd",
    help="Margin-gated intra-class contrastive distillation experiments",
    add_completion=False,
    rich_markup_mode="rich",
)

console = Console()

EXACT_TOL = 1e-9

EXIT_VERIFY_FAILED = 1
EXIT_CONFIG = 2
EXIT_IO = 3


class VerificationFailed(MarginKDError):
    """At least one checked invariant did not hold."""


def exit_codes(fn):
    """Map library exceptions onto the documented process exit codes."""

    @functools.wraps(fn)
    def wrapper(*args, **kwargs):
        try:
            return fn(*args, **kwargs)
        except VerificationFailed as e:
            console.print(f"[bold red]Verification failed:[/bold red] {e}")
            raise typer.Exit(EXIT_VERIFY_FAILED)
        except (ConfigError, ContractError) as e:
            console.print(f"[bold red]Config error:[/bold red] {e}")
            raise typer.Exit(EXIT_CONFIG)
        except OSError as e:
            console.print(f"[bold red]I/O error:[/bold red] {e}")
            raise typer.Exit(EXIT_IO)

    return wrapper


# ---- shared options ----

ConfigOpt = Annotated[Optional[Path], typer.Option("--config", help="Flat key=value config file")]
SeedOpt = Annotated[Optional[int], typer.Option("--seed", help="Master seed (default: MARGINKD_SEED)")]
OutOpt = Annotated[Optional[Path], typer.Option("--out", help="Output directory")]
DataOpt = Annotated[Path, typer.Option("--data", help="Dataset CSV from gen-data")]
EpochsOpt = Annotated[Optional[int], typer.Option("--epochs")]
BatchOpt = Annotated[Optional[int], typer.Option("--batch-size")]
LrOpt = Annotated[Optional[float], typer.Option("--lr")]
DecayOpt = Annotated[Optional[str], typer.Option("--lr-decay-epochs", help="Comma separated, e.g. 30,60")]
FactorOpt = Annotated[Optional[float], typer.Option("--lr-decay-factor")]
LambdaOpt = Annotated[Optional[float], typer.Option("--lambda", help="Weight of the intra-class term")]
DeltaOpt = Annotated[Optional[float], typer.Option("--delta", help="Margin threshold")]
CapacityOpt = Annotated[Optional[int], typer.Option("--capacity-m", help="Per-class queue capacity")]
AlphaOpt = Annotated[Optional[float], typer.Option("--alpha", help="Hard-label weight of the student loss")]
AugOpt = Annotated[Optional[float], typer.Option("--aug-strength")]
CacheModeOpt = Annotated[Optional[CacheMode], typer.Option("--cache-mode")]
SourceOpt = Annotated[Optional[IntraSource], typer.Option("--intra-source")]
GateOpt = Annotated[Optional[bool], typer.Option("--margin-gate/--no-margin-gate")]
WarmupOpt = Annotated[Optional[int], typer.Option("--gate-warmup-epochs", help="Leading epochs with the gate shut")]
HiddenOpt = Annotated[Optional[str], typer.Option("--hidden-dims", help="Comma separated widths")]
StudentHiddenOpt = Annotated[Optional[str], typer.Option("--student-hidden-dims")]
EmbedOpt = Annotated[Optional[int], typer.Option("--embed-dim")]
ProgressOpt = Annotated[bool, typer.Option("--progress", help="Show progress bars")]


@dataclass(frozen=True)
class MetricsRow:
    experiment_id: str
    metric: str
    value: float
    seed: int
    config_hash: str


METRICS_COLUMNS = ["experiment_id", "metric", "value", "seed", "config_hash"]


def write_metrics(rows: Iterable[MetricsRow], path: Path) -> None:
    """CSV of metric rows; (experiment_id, metric, seed) must be unique."""
    rows = list(rows)
    seen = set()
    for r in rows:
        key = (r.experiment_id, r.metric, r.seed)
        if key in seen:
            raise ContractError(f"duplicate metrics row {key}")
        seen.add(key)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(METRICS_COLUMNS)
        for r in rows:
            writer.writerow([getattr(r, c) for c in METRICS_COLUMNS])
    logger.info(f"Wrote {len(rows)} metric rows to {path}")


def _file_values(config: Optional[Path]) -> Dict[str, str]:
    return read_kv_file(config) if config else {}


def _resolve(model, config: Optional[Path], overrides: Dict[str, Any]) -> BaseModel:
    base = {"seed": settings.seed}
    base.update(_file_values(config))
    return resolve(model, base, overrides)


def _out_dir(out: Optional[Path], command: str) -> Path:
    path = out if out is not None else settings.output_dir / command
    path.mkdir(parents=True, exist_ok=True)
    return path


def _write_config(out: Path, command: str, sections: Dict[str, BaseModel], extra: Optional[Dict] = None) -> str:
    """Serialize the resolved configuration before any work starts; returns its hash."""
    config = {name: model.model_dump(mode="json", by_alias=True) for name, model in sections.items()}
    if extra:
        config.update(extra)
    digest = config_hash(config)
    payload = {"command": command, "config": config, "config_hash": digest}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return digest


def _write_json(path: Path, payload: Dict) -> None:
    path.write_text(json.dumps(payload, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")


def _file_sha256(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _load_dataset(path: Path) -> Dataset:
    """Read a dataset CSV, taking its seed from the gen-data manifest beside it when the hashes agree."""
    ds = Dataset.from_csv(path)
    manifest = Path(path).parent / "manifest.json"
    if manifest.exists():
        meta = json.loads(manifest.read_text(encoding="utf-8"))
        if meta.get("sha256") == ds.source_sha256 and meta.get("seed") is not None:
            ds.seed = int(meta["seed"])
    if ds.seed is None:
        logger.warning(f"No matching gen-data manifest for {path}; dataset seed recorded as unknown")
    return ds


def _floats(text: str) -> List[float]:
    try:
        return [float(p) for p in text.split(",") if p.strip()]
    except ValueError as e:
        raise ConfigError(f"expected comma separated numbers, got {text!r}") from e


def _ints(text: str) -> List[int]:
    return [int(v) for v in _floats(text)]


def _train_overrides(**flags) -> Dict[str, Any]:
    renamed = {"lam": "lambda"}
    return {renamed.get(k, k): v for k, v in flags.items() if v is not None}


@app.callback()
def main(log_level: Annotated[Optional[str], typer.Option("--log-level", help="DEBUG, INFO, WARNING")] = None):
    setup_logging(log_level)


@app.command("gen-data")
@exit_codes
def gen_data(
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    c: Annotated[Optional[int], typer.Option("--c", help="Number of classes")] = None,
    views_per_class: Annotated[Optional[int], typer.Option("--views-per-class")] = None,
    per_view: Annotated[Optional[int], typer.Option("--per-view")] = None,
    d_in: Annotated[Optional[int], typer.Option("--d-in")] = None,
    class_sep: Annotated[Optional[float], typer.Option("--class-sep")] = None,
    view_sep: Annotated[Optional[float], typer.Option("--view-sep")] = None,
    noise: Annotated[Optional[float], typer.Option("--noise")] = None,
):
    """Generate a seeded multi-view Gaussian dataset as data.csv."""
    gen = _resolve(GeneratorConfig, config, dict(seed=seed, c=c, views_per_class=views_per_class,
                                                 per_view=per_view, d_in=d_in, class_sep=class_sep,
                                                 view_sep=view_sep, noise=noise))
    out = _out_dir(out, "gen-data")
    digest = _write_config(out, "gen-data", {"generator": gen})
    ds = generate_from_config(gen)
    ds.to_csv(out / "data.csv")
    _write_json(out / "manifest.json", {"config_hash": digest, "samples": len(ds), "seed": ds.seed,
                                        "sha256": _file_sha256(out / "data.csv"),
                                        "class_counts": {str(k): v for k, v in class_counts(ds).items()}})
    console.print(f"[green]Wrote {len(ds)} samples ({ds.c} classes) to {out / 'data.csv'}[/green]")


@app.command("train-teacher")
@exit_codes
def train_teacher_cmd(
    data: DataOpt,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    epochs: EpochsOpt = None,
    batch_size: BatchOpt = None,
    lr: LrOpt = None,
    lr_decay_epochs: DecayOpt = None,
    lr_decay_factor: FactorOpt = None,
    lam: LambdaOpt = None,
    delta: DeltaOpt = None,
    capacity_m: CapacityOpt = None,
    aug_strength: AugOpt = None,
    cache_mode: CacheModeOpt = None,
    intra_source: SourceOpt = None,
    use_margin_gate: GateOpt = None,
    gate_warmup_epochs: WarmupOpt = None,
    hidden_dims: HiddenOpt = None,
    embed_dim: EmbedOpt = None,
    progress: ProgressOpt = False,
):
    """Train a teacher with CE + lambda * margin-gated intra-class loss."""
    cfg = _resolve(TrainConfig, config, _train_overrides(
        seed=seed, epochs=epochs, batch_size=batch_size, lr=lr, lr_decay_epochs=lr_decay_epochs,
        lr_decay_factor=lr_decay_factor, lam=lam, delta=delta, capacity_m=capacity_m, aug_strength=aug_strength,
        cache_mode=cache_mode, intra_source=intra_source, use_margin_gate=use_margin_gate,
        gate_warmup_epochs=gate_warmup_epochs, hidden_dims=hidden_dims, embed_dim=embed_dim))
    out = _out_dir(out, "train-teacher")
    digest = _write_config(out, "train-teacher", {"train": cfg}, {"data": str(data)})
    ds = _load_dataset(data)
    model, log = train_teacher(ds, cfg, progress=progress)
    save_checkpoint(model, out / "teacher.ckpt")
    log.to_csv(out / "train_log.csv")
    log.cache_stats_to_jsonl(out / "cache_stats.jsonl")
    _write_json(out / "manifest.json", run_manifest(cfg, ds, "teacher", {"config_hash": digest,
                                                                        "cache_stats": log.cache_stats}))
    _print_log_tail("Teacher", log)


@app.command("distill")
@exit_codes
def distill_cmd(
    teacher: Annotated[Path, typer.Option("--teacher", help="Teacher checkpoint")],
    data: DataOpt,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    epochs: EpochsOpt = None,
    batch_size: BatchOpt = None,
    lr: LrOpt = None,
    lr_decay_epochs: DecayOpt = None,
    lr_decay_factor: FactorOpt = None,
    alpha: AlphaOpt = None,
    student_hidden_dims: StudentHiddenOpt = None,
    embed_dim: EmbedOpt = None,
    progress: ProgressOpt = False,
):
    """Distill a student from a frozen teacher checkpoint."""
    cfg = _resolve(TrainConfig, config, _train_overrides(
        seed=seed, epochs=epochs, batch_size=batch_size, lr=lr, lr_decay_epochs=lr_decay_epochs,
        lr_decay_factor=lr_decay_factor, alpha=alpha, student_hidden_dims=student_hidden_dims,
        embed_dim=embed_dim))
    out = _out_dir(out, "distill")
    digest = _write_config(out, "distill", {"train": cfg}, {"data": str(data), "teacher": str(teacher)})
    teacher_model = load_checkpoint(teacher)
    ds = _load_dataset(data)
    student, log = distill_student(teacher_model, ds, cfg, progress=progress)
    save_checkpoint(student, out / "student.ckpt")
    log.to_csv(out / "distill_log.csv")
    _write_json(out / "manifest.json", run_manifest(cfg, ds, "student", {"config_hash": digest}))
    _print_log_tail("Student", log)


def _print_log_tail(title: str, log, rows: int = 5) -> None:
    table = Table(title=f"{title} training (last {rows} epochs)", box=box.SIMPLE)
    for col in ("epoch", "lr", "ce", "intra", "gate_frac", "drains", "train_acc"):
        table.add_column(col, justify="right")
    for r in log.rows[-rows:]:
        table.add_row(str(r.epoch), f"{r.lr:.4g}", f"{r.ce:.4f}", f"{r.intra:.4f}", f"{r.gate_frac:.2f}",
                      str(r.drains), f"{r.train_acc:.3f}")
    console.print(table)


def _free_distance_reports(emb: np.ndarray, labels: np.ndarray) -> List:
    """One report per anchor over all its same-class and other-class neighbours, positive = itself."""
    reports = []
    for i in range(len(labels)):
        same = (labels == labels[i]) & (np.arange(len(labels)) != i)
        sims = emb @ emb[i]
        reports.append(report_from_similarities(1.0, sims[same], sims[labels != labels[i]]))
    return reports


@app.command("verify")
@exit_codes
def verify(
    checkpoint: Annotated[Optional[Path], typer.Option("--checkpoint", help="Teacher checkpoint; omit for free embeddings")] = None,
    data: Annotated[Optional[Path], typer.Option("--data", help="Dataset CSV (with --checkpoint)")] = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    m: Annotated[int, typer.Option("--m", help="Same-class negatives")] = 8,
    n: Annotated[int, typer.Option("--n", help="Other-class negatives")] = 8,
    lambdas: Annotated[str, typer.Option("--lambdas")] = "0.1,1,10",
    seeds: Annotated[str, typer.Option("--seeds", help="Seeds for free-embedding runs")] = "0,1,2",
    anchors: Annotated[int, typer.Option("--anchors")] = 32,
    steps: Annotated[int, typer.Option("--steps", help="Free-embedding descent steps")] = 1500,
    inject_ratio: Annotated[Optional[float], typer.Option("--inject-ratio", hidden=True)] = None,
):
    """Check the distance identity, the loss floors and the lambda bounds; exit 1 on any failure."""
    seed = settings.seed if seed is None else seed
    lam_list, seed_list = _floats(lambdas), _ints(seeds)
    out = _out_dir(out, "verify")
    digest = config_hash({"checkpoint": str(checkpoint) if checkpoint else None, "data": str(data) if data else None,
                          "seed": seed, "m": m, "n": n, "lambdas": lam_list, "seeds": seed_list,
                          "anchors": anchors, "steps": steps})
    _write_json(out / "config.json", {"command": "verify", "config_hash": digest, "config": {
        "checkpoint": str(checkpoint) if checkpoint else None, "data": str(data) if data else None, "seed": seed,
        "m": m, "n": n, "lambdas": lam_list, "seeds": seed_list, "anchors": anchors, "steps": steps}})

    failures: List[str] = []
    c0, c1, c2, c3 = theorem2_constants(m, n)
    if abs(c1 * c3 - 1.0) > 1e-12:
        failures.append(f"c1*c3 = {c1 * c3!r}")
    inter_lb, intra_lb = loss_lower_bounds(m, n)

    distance_rows, bound_rows = [], []
    if checkpoint is not None:
        if data is None:
            raise ConfigError("--checkpoint needs --data")
        model, ds = load_checkpoint(checkpoint), _load_dataset(data)
        report = empirical_distances(model, ds, anchors, m, n, seed)
        exact, asymptotic = theorem1_check(report)
        distance_rows.append({"source": "checkpoint", **report.to_dict(), "exact_residual": exact,
                              "asymptotic_residual": asymptotic})
        if exact >= EXACT_TOL:
            failures.append(f"distance identity residual {exact:.3e}")
        for r in report.per_anchor:
            if r.l_inter < inter_lb - EXACT_TOL or r.l_intra < intra_lb - EXACT_TOL:
                failures.append(f"loss below floor: l_inter={r.l_inter}, l_intra={r.l_intra}")
        for lam in lam_list:
            # a trained network is not a minimizer of the trade-off objective
            bound = theorem2_bound_check(report.l_intra, report.l_inter, lam, m, n, converged=False)
            bound_rows.append({"seed": seed, **bound.to_dict()})
    else:
        for lam in lam_list:
            for s in seed_list:
                res = minimize_free_embeddings(m=m, n=n, lam=lam, seed=s, steps=steps)
                l_intra = res.l_intra if inject_ratio is None else inject_ratio * res.l_inter
                bound = theorem2_bound_check(l_intra, res.l_inter, lam, m, n, converged=res.converged)
                bound_rows.append({"seed": s, **bound.to_dict()})
                if not bound.satisfied:
                    failures.append(f"ratio {bound.ratio:.4f} outside [{bound.lower:.4f}, {bound.upper:.4f}] "
                                    f"at lambda={lam}, seed={s}")
                if res.l_inter < inter_lb - EXACT_TOL or res.l_intra < intra_lb - EXACT_TOL:
                    failures.append(f"loss below floor at lambda={lam}, seed={s}")
                worst = max(theorem1_check(r)[0] for r in _free_distance_reports(res.embeddings, res.labels))
                distance_rows.append({"source": f"free lambda={lam} seed={s}", "exact_residual": worst})
                if worst >= EXACT_TOL:
                    failures.append(f"distance identity residual {worst:.3e} at lambda={lam}, seed={s}")

    summary = {"passed": not failures, "failures": failures, "config_hash": digest,
               "constants": {"c0": c0, "c1": c1, "c2": c2, "c3": c3},
               "lower_bounds": {"inter": inter_lb, "intra": intra_lb}}
    _write_json(out / "verify.json", {"summary": summary, "distances": distance_rows, "bounds": bound_rows})

    table = Table(title=f"Loss-ratio bounds (m={m}, n={n})", box=box.SIMPLE)
    for col in ("lambda", "seed", "lower", "ratio", "upper", "satisfied", "converged"):
        table.add_column(col, justify="right")
    for row in bound_rows:
        table.add_row(f"{row['lambda']:g}", str(row["seed"]), f"{row['lower']:.4f}", f"{row['ratio']:.4f}",
                      f"{row['upper']:.4f}", "yes" if row["satisfied"] else "[red]no[/red]",
                      "yes" if row["converged"] else "no")
    console.print(table)
    console.print(f"c0={c0:.6f} c1={c1:.6f} c2={c2:.6f} c3={c3:.6f}")
    if failures:
        raise VerificationFailed(f"{len(failures)} check(s) failed; see {out / 'verify.json'}")
    console.print("[bold green]All checks passed[/bold green]")


@app.command("sweep")
@exit_codes
def sweep(
    data: Annotated[Optional[Path], typer.Option("--data", help="Dataset CSV; default synthetic set if omitted")] = None,
    config: ConfigOpt = None,
    seed: SeedOpt = None,
    out: OutOpt = None,
    lambdas: Annotated[str, typer.Option("--lambdas")] = "0,0.01,0.02,0.03",
    seeds: Annotated[str, typer.Option("--seeds")] = "0,1,2,3,4",
    workers: Annotated[Optional[int], typer.Option("--workers", help="Parallel sweep cells")] = None,
    gate_ablation: Annotated[bool, typer.Option("--gate-ablation", help="Also train ungated teachers")] = False,
    epochs: EpochsOpt = None,
    batch_size: BatchOpt = None,
    lr: LrOpt = None,
    lr_decay_epochs: DecayOpt = None,
    delta: DeltaOpt = None,
    capacity_m: CapacityOpt = None,
    alpha: AlphaOpt = None,
    progress: ProgressOpt = False,
):
    """Train, measure and distill across lambdas and seeds."""
    cfg = _resolve(TrainConfig, config, _train_overrides(
        seed=seed, epochs=epochs, batch_size=batch_size, lr=lr, lr_decay_epochs=lr_decay_epochs, delta=delta,
        capacity_m=capacity_m, alpha=alpha))
    lam_list, seed_list = _floats(lambdas), _ints(seeds)
    out = _out_dir(out, "sweep")
    if data is not None:
        ds, gen_section = _load_dataset(data), {}
    else:
        gen = _resolve(GeneratorConfig, config, {"seed": seed})
        ds, gen_section = generate_from_config(gen), {"generator": gen}
    digest = _write_config(out, "sweep", {"train": cfg, **gen_section},
                           {"data": str(data) if data else None, "lambdas": lam_list, "seeds": seed_list,
                            "gate_ablation": gate_ablation})
    result = lambda_sweep(ds, lam_list, cfg, seed_list, workers=workers or settings.workers,
                          gate_ablation=gate_ablation, progress=progress)
    result.cells.to_csv(out / "sweep_cells.csv", index=False)
    result.summary.to_csv(out / "sweep_summary.csv", index=False)

    rows = []
    for rec in result.cells.to_dict(orient="records"):
        for metric, value in rec.items():
            if metric in ("lambda", "seed"):
                continue
            rows.append(MetricsRow(f"lambda={rec['lambda']:g}", metric, float(value), int(rec["seed"]), digest))
    write_metrics(rows, out / "metrics.csv")

    table = Table(title="Lambda sweep (mean ± std over seeds)", box=box.SIMPLE)
    columns = ["lambda", "intra dist", "inter dist", "entropy", "student acc", "ms/batch ratio", "diverged"]
    if gate_ablation:
        columns[-2:-2] = ["student acc (no gate)"]
    for col in columns:
        table.add_column(col, justify="right")
    for rec in result.summary.to_dict(orient="records"):
        cells = [f"{rec['lambda']:g}",
                 f"{rec['intra_dist_mean']:.4f} ± {rec['intra_dist_std']:.4f}",
                 f"{rec['inter_dist_mean']:.4f} ± {rec['inter_dist_std']:.4f}",
                 f"{rec['entropy_mean']:.4f} ± {rec['entropy_std']:.4f}",
                 f"{rec['student_acc_mean']:.4f} ± {rec['student_acc_std']:.4f}"]
        if gate_ablation:
            cells.append(f"{rec['student_acc_no_gate_mean']:.4f}")
        table.add_row(*cells, f"{rec['overhead_ratio']:.3f}", str(int(rec["diverged"])))
    console.print(table)
    sensitivity_view(result).to_csv(out / "sensitivity.csv", index=False)


REPORT_SOURCES = ("config.json", "train_log.csv", "distill_log.csv", "verify.json", "sweep_summary.csv")


@app.command("report")
@exit_codes
def report(run_dir: Annotated[Path, typer.Argument(help="Output directory of any command")]):
    """Summarize the artifacts of a run directory as tables and report.json."""
    if not run_dir.is_dir():
        raise FileNotFoundError(f"Run directory not found at: {run_dir}")
    found = [name for name in REPORT_SOURCES if (run_dir / name).exists()]
    if not found:
        raise FileNotFoundError(f"No marginkd artifacts found in: {run_dir}")

    summary: Dict[str, Any] = {"run_dir": str(run_dir), "artifacts": found}
    if "config.json" in found:
        cfg = json.loads((run_dir / "config.json").read_text(encoding="utf-8"))
        summary["command"] = cfg.get("command")
        summary["config_hash"] = cfg.get("config_hash")
    for name in ("train_log.csv", "distill_log.csv"):
        if name in found:
            with open(run_dir / name, newline="", encoding="utf-8") as f:
                rows = list(csv.DictReader(f))
            if rows:
                last = rows[-1]
                summary[name] = {"epochs": len(rows), "final": last}
                table = Table(title=f"{name}: final epoch of {len(rows)}", box=box.SIMPLE)
                table.add_column("column")
                table.add_column("value", justify="right")
                for k, v in last.items():
                    table.add_row(k, v)
                console.print(table)
    if "verify.json" in found:
        verify_payload = json.loads((run_dir / "verify.json").read_text(encoding="utf-8"))
        summary["verify"] = verify_payload["summary"]
        status = "[green]passed[/green]" if verify_payload["summary"]["passed"] else "[red]failed[/red]"
        console.print(f"verify: {status} ({len(verify_payload['bounds'])} bound rows)")
    if "sweep_summary.csv" in found:
        with open(run_dir / "sweep_summary.csv", newline="", encoding="utf-8") as f:
            rows = list(csv.DictReader(f))
        summary["sweep"] = rows
        table = Table(title="sweep summary", box=box.SIMPLE)
        cols = [c for c in ("lambda", "intra_dist_mean", "entropy_mean", "student_acc_mean", "overhead_ratio")
                if rows and c in rows[0]]
        for c in cols:
            table.add_column(c, justify="right")
        for r in rows:
            table.add_row(*[r[c] for c in cols])
        console.print(table)

    (run_dir / "report.json").write_text(canonical_json(summary) + "\n", encoding="utf-8")
    console.print(f"[dim]Wrote {run_dir / 'report.json'}[/dim]")
