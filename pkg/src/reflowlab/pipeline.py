"""Three-stage orchestration, persistence and the budgeted method comparison."""

from __future__ import annotations

import hashlib
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
import yaml

from .budget import BudgetLedger, flops_estimate
from .config import RunConfig, stream_int, stream_rng
from .dist2d import ToyTask
from .errors import ConfigError
from .meanflow import MeanFlowModel, one_step_sample, train_meanflow
from .metrics import (
    EvalReport,
    angular_errors,
    default_outlier_threshold,
    distance_error_histogram,
    energy_distance,
    loss_heatmap,
    outlier_rate,
    write_csv,
)
from .nncore import load_checkpoint, save_checkpoint
from .rectflow import (
    CouplingSet,
    FlowModel,
    empirical_lipschitz,
    generate_couplings,
    integrate_ode,
    load_couplings,
    path_deviation,
    save_couplings,
    straightness_deviation,
    train_rectified_flow,
    truncate_by_distance,
)

log = logging.getLogger(__name__)

MANIFEST = "manifest.json"
SUBDIRS = ("checkpoints", "couplings", "reports", "figures")
# reference solve used for angular errors and the Fig.-style "teacher" coupling
REFERENCE_STEPS = 100


def prepare_out(out: str | Path) -> Path:
    out = Path(out)
    for sub in SUBDIRS:
        (out / sub).mkdir(parents=True, exist_ok=True)
    return out


def _smoothed(trace: np.ndarray, window: int = 100) -> tuple[float, float]:
    """Loss of the untrained model, and the trailing-window mean at the end."""
    w = max(1, min(window, len(trace) // 4 or 1))
    return float(trace[0]), float(np.mean(trace[-w:]))


def _write_loss_csv(path: Path, trace: np.ndarray, every: int = 50) -> Path:
    rows = [{"step": i + 1, "loss": float(trace[i])} for i in range(0, len(trace), every)]
    if len(trace) and (len(trace) - 1) % every:
        rows.append({"step": len(trace), "loss": float(trace[-1])})
    return write_csv(path, rows)


def save_model(path: Path, model: FlowModel | MeanFlowModel, cfg: RunConfig, **extra: Any) -> Path:
    meta = {**model.metadata(), "config_hash": cfg.config_hash(), **extra}
    return save_checkpoint(path, model.net, meta)


def load_model(path: str | Path) -> FlowModel | MeanFlowModel:
    net, meta = load_checkpoint(path)
    kind = meta.get("model_kind")
    n_classes = int(meta.get("n_classes", 0))
    dropout = float(meta.get("class_dropout", 0.0))
    if kind == "flow":
        return FlowModel(net, int(meta["d"]), n_classes, dropout)
    if kind == "meanflow":
        return MeanFlowModel(net, int(meta["d"]), n_classes, dropout)
    raise ConfigError(f"checkpoint {path} has unknown model_kind {kind!r}")


def net_flops(cfg: RunConfig) -> float:
    """Forward FLOPs per sample of the configured mean-flow net (the larger of the two inputs)."""
    task = cfg.task.build()
    sizes = cfg.net.spec().layer_sizes(task.dim + 2 + task.n_classes, task.dim)
    return float(sum(2 * a * b for a, b in zip(sizes[:-1], sizes[1:])))


def planned_ledgers(cfg: RunConfig) -> dict[str, BudgetLedger]:
    """Evaluation counts each comparison method will be charged, from the config alone."""
    b = cfg.batch
    fpf = net_flops(cfg)
    shared = BudgetLedger(fpf)
    shared.charge("stage1_train", cfg.stage1.iters * b, cfg.stage1.iters * b, cfg.stage1.iters, cfg.stage1.iters * b)
    per_step = 2 if cfg.reflow.solver == "heun" else 1
    shared.charge("reflow_sampling", cfg.reflow.n_pairs * cfg.reflow.steps * per_step)
    out = {}
    for m in cfg.comparison.methods:
        if m == "re_meanflow":
            it = cfg.stage3.iters
            guided = 0 if not cfg.guidance.enabled else it - int(round(cfg.guidance.stage_split * it))
            fwd = it * b * (2 if cfg.stage3.velocity_source == "flow" else 1) + 2 * guided * b
            led = shared.copy()
            led.charge("stage3_train", fwd, 2 * it * b, it, it * b)
        elif m == "two_rectified":
            it = cfg.comparison.second_flow_iters
            led = shared.copy()
            led.charge("stage3_train", it * b, it * b, it, it * b)
        else:
            it = cfg.comparison.scratch_iters
            led = BudgetLedger(fpf)
            led.charge("stage3_train", it * b, 2 * it * b, it, it * b)
        out[m] = led
    return out


# -- stages ------------------------------------------------------------------


def run_stage1(cfg: RunConfig, out: str | Path | None = None, ledger: BudgetLedger | None = None,
               callback: Callable | None = None, callback_every: int = 0) -> Path:
    """Train the 1-rectified flow on independent pairs and write ``checkpoints/flow1.json``."""
    if cfg.stage1.iters <= 0:
        raise ValueError(f"stage1.iters must be positive, got {cfg.stage1.iters}")
    out = prepare_out(out or cfg.out)
    task = cfg.task.build()
    res = train_rectified_flow(
        task, cfg.net.spec(), cfg.stage1.iters, cfg.batch, cfg.optimizer.adam(), stream_rng(cfg.seed, "stage1"),
        class_dropout=cfg.stage1.class_dropout, ledger=ledger, phase="stage1_train",
        callback=callback, callback_every=callback_every,
    )
    first, last = _smoothed(res.loss_trace)
    _write_loss_csv(out / "reports" / "stage1_loss.csv", res.loss_trace)
    log.info("stage 1: %d steps, smoothed loss %.4g -> %.4g", res.steps, first, last)
    return save_model(out / "checkpoints" / "flow1.json", res.model, cfg, stage="stage1", steps=res.steps,
                      initial_loss=first, final_loss=last)


def run_stage2(cfg: RunConfig, flow_checkpoint: str | Path, out: str | Path | None = None,
               ledger: BudgetLedger | None = None) -> Path:
    """Integrate the frozen flow from data to noise, truncate, write both coupling files.

    Returns the truncated set's path; the full set sits next to it as ``reflow_full.rmfc``.
    """
    out = prepare_out(out or cfg.out)
    model = load_model(flow_checkpoint)
    if not isinstance(model, FlowModel):
        raise ConfigError(f"{flow_checkpoint} is not a flow checkpoint")
    rc = cfg.reflow
    cs = generate_couplings(model, cfg.task.build(), rc.n_pairs, rc.steps, rc.solver,
                            stream_int(cfg.seed, "reflow"), workers=rc.workers, ledger=ledger,
                            chunk_size=rc.chunk_size)
    cs.provenance["config_hash"] = cfg.config_hash()
    save_couplings(out / "couplings" / "reflow_full.rmfc", cs)
    kept = truncate_by_distance(cs, rc.truncate_k)
    log.info("stage 2: %d pairs, %d kept after k=%g truncation", len(cs), len(kept), rc.truncate_k)
    return save_couplings(out / "couplings" / "reflow.rmfc", kept)


def run_stage3(cfg: RunConfig, coupling_path: str | Path, out: str | Path | None = None,
               ledger: BudgetLedger | None = None, flow_checkpoint: str | Path | None = None,
               callback: Callable | None = None, callback_every: int = 0) -> Path:
    """Train the mean-flow model on stored couplings and write ``checkpoints/meanflow.json``."""
    if cfg.stage3.iters <= 0:
        raise ValueError(f"stage3.iters must be positive, got {cfg.stage3.iters}")
    out = prepare_out(out or cfg.out)
    cs = load_couplings(coupling_path)
    flow = None
    if cfg.stage3.velocity_source == "flow" or cfg.guidance.enabled:
        if flow_checkpoint is None:
            flow_checkpoint = out / "checkpoints" / "flow1.json"
        flow = load_model(flow_checkpoint)
    res = train_meanflow(
        cs, cfg.net.spec(), cfg.stage3.iters, cfg.batch, cfg.time_sampler.sampler(), cfg.loss.loss(),
        stream_rng(cfg.seed, "stage3"), cfg_cfg=cfg.guidance.cfg(), optimizer_cfg=cfg.optimizer.adam(),
        velocity_source=cfg.stage3.velocity_source, flow=flow, class_dropout=cfg.stage3.class_dropout,
        ledger=ledger, phase="stage3_train", callback=callback, callback_every=callback_every,
    )
    first, last = _smoothed(res.loss_trace)
    _write_loss_csv(out / "reports" / "stage3_loss.csv", res.loss_trace)
    log.info("stage 3: %d steps, smoothed loss %.4g -> %.4g", res.steps, first, last)
    return save_model(out / "checkpoints" / "meanflow.json", res.model, cfg, stage="stage3", steps=res.steps,
                      initial_loss=first, final_loss=last, couplings=cs.digest())


def run_second_flow(cfg: RunConfig, full_coupling_path: str | Path, out: str | Path | None = None,
                    ledger: BudgetLedger | None = None, callback: Callable | None = None,
                    callback_every: int = 0) -> Path:
    """2-rectified baseline: a fresh flow regressed on the untruncated reflow couplings."""
    iters = cfg.comparison.second_flow_iters
    if iters <= 0:
        raise ValueError(f"comparison.second_flow_iters must be positive, got {iters}")
    out = prepare_out(out or cfg.out)
    cs = load_couplings(full_coupling_path)
    res = train_rectified_flow(
        cfg.task.build(), cfg.net.spec(), iters, cfg.batch, cfg.optimizer.adam(), stream_rng(cfg.seed, "flow2"),
        couplings=cs, class_dropout=cfg.stage1.class_dropout, ledger=ledger, phase="stage3_train",
        callback=callback, callback_every=callback_every,
    )
    first, last = _smoothed(res.loss_trace)
    _write_loss_csv(out / "reports" / "flow2_loss.csv", res.loss_trace)
    return save_model(out / "checkpoints" / "flow2.json", res.model, cfg, stage="two_rectified",
                      steps=res.steps, initial_loss=first, final_loss=last, couplings=cs.digest())


def run_scratch(cfg: RunConfig, out: str | Path | None = None, ledger: BudgetLedger | None = None,
                callback: Callable | None = None, callback_every: int = 0) -> Path:
    """Mean-flow model trained on independent pairs for the whole budget."""
    iters = cfg.comparison.scratch_iters
    if iters <= 0:
        raise ValueError(f"comparison.scratch_iters must be positive, got {iters}")
    out = prepare_out(out or cfg.out)
    task = cfg.task.build()
    res = train_meanflow(
        None, cfg.net.spec(), iters, cfg.batch, cfg.time_sampler.sampler(), cfg.loss.loss(),
        stream_rng(cfg.seed, "scratch"), task=task, optimizer_cfg=cfg.optimizer.adam(),
        class_dropout=cfg.stage3.class_dropout, ledger=ledger, phase="stage3_train",
        callback=callback, callback_every=callback_every,
    )
    first, last = _smoothed(res.loss_trace)
    _write_loss_csv(out / "reports" / "scratch_loss.csv", res.loss_trace)
    return save_model(out / "checkpoints" / "meanflow_scratch.json", res.model, cfg, stage="meanflow_scratch",
                      steps=res.steps, initial_loss=first, final_loss=last)


# -- sampling and evaluation -------------------------------------------------


def one_step_generate(model: FlowModel | MeanFlowModel, z: np.ndarray, cls=None,
                      ledger: BudgetLedger | None = None) -> np.ndarray:
    """x = z - u(z, 0, 1) for a mean-flow model; a single Euler step for a velocity model."""
    if isinstance(model, MeanFlowModel):
        return one_step_sample(model, z, cls, ledger=ledger)
    return integrate_ode(model, z, 1, cls=cls, ledger=ledger)


def meanflow_path(model: MeanFlowModel, z: np.ndarray, steps: int, cls=None) -> np.ndarray:
    """States of the few-step mean-flow sampler z <- z - (t - s) u(z, s, t) on a uniform grid."""
    grid = np.linspace(1.0, 0.0, steps + 1)
    states = [np.array(z, dtype=np.float64)]
    cur = states[0]
    for t, s in zip(grid[:-1], grid[1:]):
        cur = cur - (t - s) * model.mean_velocity(cur, s, t, cls)
        states.append(cur)
    return np.stack(states)


@dataclass
class EvalSet:
    """Fixed evaluation draws shared by every method in a run."""

    z: np.ndarray
    cls: np.ndarray | None
    reference: np.ndarray
    teacher: np.ndarray | None = None  # multi-step stage-1 solution for each z

    @classmethod
    def build(cls_, cfg: RunConfig, task: ToyTask) -> "EvalSet":
        rng = stream_rng(cfg.seed, "eval")
        n = cfg.eval.n_samples
        labels = None
        if task.conditional:
            _, labels = task.sample_data(n, rng)
        z = task.sample_prior(n, rng)
        ref, _ = task.sample_data(n, rng)
        return cls_(z, labels, ref)


def evaluate(method: str, model: FlowModel | MeanFlowModel, task: ToyTask, cfg: RunConfig, evs: EvalSet,
             ledger: BudgetLedger | None = None) -> EvalReport:
    ledger = ledger.copy() if ledger is not None else BudgetLedger()
    x_hat = one_step_generate(model, evs.z, evs.cls, ledger=ledger)
    threshold = default_outlier_threshold(task.target, cfg.eval.outlier_sigma)
    orate = outlier_rate(x_hat, task.target, threshold)
    finite = np.isfinite(x_hat).all(axis=1)
    ed = energy_distance(x_hat[finite], evs.reference, cfg.eval.ed_max_points, seed=cfg.seed) if finite.any() \
        else float("inf")
    if evs.teacher is not None:
        ang = angular_errors(evs.z - x_hat, evs.z - evs.teacher)
        mae = float(np.nanmean(ang)) if np.any(~np.isnan(ang)) else 0.0
    else:
        mae = float("nan")
    k = min(cfg.eval.straightness_samples, len(evs.z))
    zs = evs.z[:k]
    cs_sub = None if evs.cls is None else evs.cls[:k]
    if isinstance(model, MeanFlowModel):
        straight = path_deviation(meanflow_path(model, zs, cfg.eval.straightness_steps, cs_sub))
    else:
        straight = straightness_deviation(model, zs, cfg.eval.straightness_steps, cs_sub)
    lip = empirical_lipschitz(CouplingSet(x_hat[finite], evs.z[finite]), cfg.eval.lipschitz_pairs,
                              stream_rng(cfg.seed, "diagnostics"))
    status = "ok" if np.all(finite) and np.isfinite(ed) else "non_finite"
    return EvalReport(method, orate, ed, mae, straight, lip, threshold, len(evs.z), status, ledger.to_dict())


def failed_report(method: str, reason: str, ledger: BudgetLedger | None = None) -> EvalReport:
    nan = float("nan")
    return EvalReport(method, nan, nan, nan, nan, nan, nan, 0, f"failed: {reason}",
                      (ledger or BudgetLedger()).to_dict())


# -- comparison --------------------------------------------------------------


@dataclass
class CurvePoint:
    method: str
    stage: str
    step: int
    forward_evals: int
    flops: float
    energy_distance: float


@dataclass
class ComparisonResult:
    out: Path
    reports: dict[str, EvalReport]
    curve: list[CurvePoint] = field(default_factory=list)
    manifest: Path | None = None


class _CurveProbe:
    """Training callback: energy distance of one-step samples against the ledger's forward count."""

    def __init__(self, cfg: RunConfig, evs: EvalSet, ledger: BudgetLedger, method: str, stage: str,
                 sink: list[CurvePoint]):
        n = min(cfg.comparison.curve_samples, len(evs.z))
        self.z, self.ref = evs.z[:n], evs.reference[:n]
        self.cls = None if evs.cls is None else evs.cls[:n]
        self.cfg, self.ledger, self.method, self.stage, self.sink = cfg, ledger, method, stage, sink

    def __call__(self, step: int, model) -> None:
        x = one_step_generate(model, self.z, self.cls)
        ok = np.isfinite(x).all(axis=1)
        ed = energy_distance(x[ok], self.ref, self.cfg.eval.ed_max_points, seed=self.cfg.seed) if ok.any() \
            else float("inf")
        self.sink.append(CurvePoint(self.method, self.stage, step, self.ledger.forward_evals,
                                    flops_estimate(self.ledger)["total"], ed))


def _every(iters: int, points: int) -> int:
    return max(1, iters // max(points, 1)) if points > 0 else 0


def run_comparison(cfg: RunConfig, out: str | Path | None = None) -> ComparisonResult:
    """Re-MeanFlow vs. 2-rectified flow vs. MeanFlow from scratch under the stated step budgets.

    Stage 1 and the reflow couplings are shared by the two reflow-based methods; each
    method's ledger is charged for everything it used. A failing method is reported as
    failed and the others still run.
    """
    from . import figures

    out = prepare_out(out or cfg.out)
    task = cfg.task.build()
    methods = list(dict.fromkeys(cfg.comparison.methods))
    evs = EvalSet.build(cfg, task)
    reports: dict[str, EvalReport] = {}
    curve: list[CurvePoint] = []
    ledgers: dict[str, BudgetLedger] = {}
    models: dict[str, Any] = {}
    cpts = cfg.comparison.curve_points

    shared = BudgetLedger(net_flops(cfg))
    flow1 = full_path = trunc_path = None
    stage1_error = None
    try:
        probe = _CurveProbe(cfg, evs, shared, "shared_stage1", "stage1_train", curve)
        flow1_path = run_stage1(cfg, out, shared, probe, _every(cfg.stage1.iters, cpts))
        flow1 = load_model(flow1_path)
        evs.teacher = integrate_ode(flow1, evs.z, REFERENCE_STEPS, cls=evs.cls)
    except (ValueError, FloatingPointError) as exc:
        stage1_error = f"stage1: {exc}"
        log.warning("stage 1 failed: %s", exc)

    reflow_methods = [m for m in methods if m in ("re_meanflow", "two_rectified")]
    if flow1 is not None and reflow_methods:
        try:
            trunc_path = run_stage2(cfg, out / "checkpoints" / "flow1.json", out, shared)
            full_path = out / "couplings" / "reflow_full.rmfc"
        except (ValueError, FloatingPointError) as exc:
            stage1_error = f"reflow: {exc}"

    for method in methods:
        led = shared.copy() if method in reflow_methods else BudgetLedger(shared.flops_per_forward)
        ledgers[method] = led
        try:
            if method in reflow_methods and stage1_error:
                raise ValueError(stage1_error)
            probe = _CurveProbe(cfg, evs, led, method, "stage3_train", curve)
            if method == "re_meanflow":
                path = run_stage3(cfg, trunc_path, out, led, out / "checkpoints" / "flow1.json",
                                  probe, _every(cfg.stage3.iters, cpts))
            elif method == "two_rectified":
                path = run_second_flow(cfg, full_path, out, led, probe, _every(cfg.comparison.second_flow_iters, cpts))
            else:
                path = run_scratch(cfg, out, led, probe, _every(cfg.comparison.scratch_iters, cpts))
            models[method] = load_model(path)
            reports[method] = evaluate(method, models[method], task, cfg, evs, led)
        except (ValueError, FloatingPointError) as exc:
            log.warning("%s failed: %s", method, exc)
            reports[method] = failed_report(method, str(exc).replace("\n", " "), led)

    for method, rep in reports.items():
        rep.save(out / "reports" / f"{method}.txt")
    write_csv(out / "reports" / "summary.csv", [
        {"method": m, "status": r.status, "outlier_rate": r.outlier_rate, "energy_distance": r.energy_distance,
         "mean_angular_error": r.mean_angular_error, "straightness": r.straightness,
         "lipschitz_estimate": r.lipschitz_estimate, "forward_evals": r.budget.get("forward_evals", 0),
         "train_steps": r.budget.get("train_steps", 0)}
        for m, r in reports.items()
    ])
    curve = _expand_curve(curve, methods, shared)
    write_csv(out / "reports" / "budget_curve.csv", [vars(p) for p in curve])

    figures.budget_curve_svg(out / "figures" / "budget_curve.svg", curve)
    for method, model in models.items():
        x_hat = one_step_generate(model, evs.z[:2000], None if evs.cls is None else evs.cls[:2000])
        figures.scatter_svg(out / "figures" / f"samples_{method}.svg", x_hat, evs.reference[:2000],
                            title=f"{method}: one-step samples")
    if "re_meanflow" in models and trunc_path is not None:
        full = load_couplings(full_path)
        hist = distance_error_histogram(models["re_meanflow"], full, cfg.eval.hist_bins)
        write_csv(out / "reports" / "distance_error.csv", hist.rows())
        figures.histogram_svg(out / "figures" / "distance_error.svg", hist)

    manifest = write_manifest(out, cfg, {m: ledgers[m] for m in methods},
                              {m: r.status for m, r in reports.items()})
    return ComparisonResult(out, reports, curve, manifest)


def _expand_curve(points: list[CurvePoint], methods: list[str], shared: BudgetLedger) -> list[CurvePoint]:
    """Attach the shared stage-1 prefix to each reflow method's curve."""
    prefix = [p for p in points if p.method == "shared_stage1"]
    out: list[CurvePoint] = []
    for m in methods:
        if m in ("re_meanflow", "two_rectified"):
            out += [CurvePoint(m, p.stage, p.step, p.forward_evals, p.flops, p.energy_distance) for p in prefix]
        out += [p for p in points if p.method == m]
    return out


def run_heatmap(cfg: RunConfig, meanflow_checkpoint: str | Path, coupling_path: str | Path,
                out: str | Path | None = None) -> Path:
    from . import figures

    out = prepare_out(out or cfg.out)
    model = load_model(meanflow_checkpoint)
    if not isinstance(model, MeanFlowModel):
        raise ConfigError(f"{meanflow_checkpoint} is not a mean-flow checkpoint")
    hm = loss_heatmap(model, load_couplings(coupling_path), cfg.eval.heatmap_grid, cfg.eval.heatmap_draws,
                      stream_rng(cfg.seed, "diagnostics"))
    path = write_csv(out / "reports" / "heatmap.csv", hm.rows())
    figures.heatmap_svg(out / "figures" / "heatmap_mean.svg", hm, "mean")
    figures.heatmap_svg(out / "figures" / "heatmap_std.svg", hm, "std")
    return path


# -- manifest ----------------------------------------------------------------


def file_digest(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, ledgers: dict[str, BudgetLedger] | None = None,
                   status: dict[str, str] | None = None) -> Path:
    """List every file under ``out`` with its sha256; timestamps are informational only."""
    out = Path(out)
    cfg_doc = cfg.to_dict()
    cfg_doc.pop("out")
    cfg_doc["reflow"].pop("workers")
    (out / "config.yaml").write_text(
        "# resolved run config (output path and worker count omitted)\n" + yaml.safe_dump(cfg_doc, sort_keys=False)
    )
    files = []
    for p in sorted(out.rglob("*")):
        if p.is_file() and p.name != MANIFEST:
            files.append({"path": p.relative_to(out).as_posix(), "sha256": file_digest(p), "bytes": p.stat().st_size})
    doc = {
        "schema_version": 1,
        "config_hash": cfg.config_hash(),
        "files": files,
        "ledgers": {m: led.to_dict() for m, led in (ledgers or {}).items()},
        "status": status or {},
        "timestamps": {"written": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())},
    }
    path = out / MANIFEST
    path.write_text(json.dumps(doc, indent=1, sort_keys=True) + "\n")
    return path


def manifest_digests(path: str | Path) -> dict[str, str]:
    doc = json.loads(Path(path).read_text())
    return {f["path"]: f["sha256"] for f in doc["files"]}
