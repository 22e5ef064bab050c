"""Orchestration of the four-regime loss-curve experiment."""

from __future__ import annotations

import logging
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

from . import io
from .svg import PlotSeries, emit_svg
from .task import build_instance, build_tree, ground_truth_labels, sample_augmented, sample_inputs
from .training import DIRECT_ETA_FACTOR, DataSpec, Regime, Trace, TrainConfig, train

log = logging.getLogger(__name__)

REGIME_LABELS = {
    Regime.DIRECT: "Direct",
    Regime.COT: "CoT",
    Regime.COT_TF: "CoT + teacher forcing",
    Regime.COT_SC: "CoT + consistency",
}


@dataclass
class ExperimentSpec:
    name: str
    data: DataSpec
    configs: list[TrainConfig]
    out_dir: Path | None = None
    log_y: bool = False
    seed: int = 0
    target: list[int] | None = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        regimes = [c.regime for c in self.configs]
        if len(set(regimes)) != len(regimes):
            raise ValueError("regimes within one experiment must be distinct")
        if any(c.data != self.data for c in self.configs):
            raise ValueError("all regimes must share the experiment's data spec")

    @classmethod
    def figure4(cls, d: int = 64, k: int = 32, n: int = 10_000, epochs: int = 350, seed: int = 7, n_prime: int = 0,
                out_dir=None, regimes=tuple(Regime), eta: float | None = None, **kw) -> "ExperimentSpec":
        """``eta`` overrides the CoT learning rate; the direct model keeps its 1% scaling."""
        data = DataSpec(d, k, n, n_prime)
        configs = [
            TrainConfig.for_regime(r, data, epochs=epochs, seed=seed,
                                   eta=None if eta is None else eta * (DIRECT_ETA_FACTOR if Regime(r) is Regime.DIRECT else 1.0))
            for r in regimes
        ]
        return cls(f"figure4_k{k}", data, configs, Path(out_dir) if out_dir else None, seed=seed, **kw)


def worker_count() -> int:
    try:
        return max(1, int(os.environ.get("COTLAB_THREADS", "1")))
    except ValueError:
        return 1


def _run_one(args) -> Trace:
    cfg, spec_seed, target = args
    data_spec = cfg.data
    inst = build_instance(data_spec.d, data_spec.k, target=target, seed=None if target else spec_seed)
    tree = build_tree(inst)
    labeled = ground_truth_labels(tree, sample_inputs(data_spec.d, data_spec.n, spec_seed, width=tree.size))
    aug = sample_augmented(data_spec.d, data_spec.n_prime, spec_seed, width=tree.size) if data_spec.n_prime else None
    return train(cfg, labeled, aug, tree)


def run_experiment(spec: ExperimentSpec) -> dict[Regime, Trace]:
    """Train every configured regime on the identical dataset."""
    jobs = [(c, spec.seed, spec.target) for c in spec.configs]
    workers = min(worker_count(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(workers) as pool:
            traces = list(pool.map(_run_one, jobs))
    else:
        traces = [_run_one(j) for j in jobs]
    return {c.regime: t for c, t in zip(spec.configs, traces)}


def run_figure4(spec: ExperimentSpec) -> dict[Regime, Trace]:
    """Train, then write per-regime traces, loss CSVs, checkpoints, metadata and two SVG plots."""
    traces = run_experiment(spec)
    if spec.out_dir is not None:
        write_figure4(spec, traces)
    return traces


def write_figure4(spec: ExperimentSpec, traces: dict[Regime, Trace]) -> list[Path]:
    out = Path(spec.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    inst = build_instance(spec.data.d, spec.data.k, target=spec.target, seed=None if spec.target else spec.seed)
    io.write_instance(out / "instance.json", inst)
    cot_series, pred_series = [], []
    for regime, trace in traces.items():
        rdir = out / regime.value
        epochs = trace.column("epoch")
        for name in ("cot_loss", "pred_loss"):
            path = out / f"{regime.value}_{name.split('_')[0]}.csv"
            io.write_series(path, epochs, trace.column(name), name)
            written.append(path)
        io.write_trace(rdir / "trace.csv", trace)
        io.write_checkpoint(rdir / "weights.json", trace.weights, spec.data.d, spec.data.k)
        io.write_metadata(rdir / "metadata.json", trace.config.to_json(), instance=inst.to_json(),
                          deactivation_epochs=trace.deactivation_epochs())
        markers = [e for e in trace.deactivation_epochs() if e] if regime is Regime.COT_SC else []
        label = REGIME_LABELS[regime]
        cot_series.append(PlotSeries(label, epochs.tolist(), trace.column("cot_loss").tolist(), markers))
        pred_series.append(PlotSeries(label, epochs.tolist(), trace.column("pred_loss").tolist(), markers))
    title = f"d={spec.data.d}, k={spec.data.k}"
    for name, series in (("cot_loss", cot_series), ("pred_loss", pred_series)):
        path = out / f"{name}.svg"
        path.write_text(emit_svg(series, "epoch", name.replace("_", " "), title, spec.log_y), encoding="utf-8")
        written.append(path)
    log.info("wrote %d files to %s", len(written), out)
    return written
