"""Layer-wise sensitivity analysis and its reports.

The measurement primitive runs the network twice per sample batch, once at
full precision and once with a single layer fake-quantized, and records

  noise        mean over the dataset of ||y - y_hat||^2 at the network output
  degradation  fp_score - quantized_score for the task metric
  mean_shift   mean over the dataset of the output-mean of (y - y_hat)

Sweeps cover every compute layer at each requested weight bit width (the
full-precision pass is computed once and shared). The additivity checker
compares summed single-layer contributions against whole-network
measurements for random low/high bit mixes, and flags trials whose
accumulated mean shift is large enough to make the sum untrustworthy.
"""

from __future__ import annotations

import csv
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import graph as G
from . import quant as Q
from .errors import ConfigError, FormatError
from .rng import SplitMix64

# A trial is suspect when (sum of |mean shifts|)^2 exceeds this fraction of
# the expected per-element noise: biased noise this large breaks the
# independent-zero-mean assumption and the summed estimate will undershoot.
BIAS_SHIFT_SUSPECT_RATIO = 0.25


@dataclass(frozen=True)
class LayerSensitivity:
    layer_id: str
    weight_bits: int | None
    act_bits: int | None
    noise: float
    noise_per_element: float
    degradation: float
    mean_shift: float


@dataclass
class SensitivityReport:
    network: str
    dataset: str
    samples: int
    act_bits: int | None
    weight_bits: list
    layers: list  # compute layer ids, topological order
    fp_score: float
    entries: list  # LayerSensitivity, ordered by (layer topo index, bits)
    weight_clip: str = "minmax"
    granularity: str = "per_tensor"
    metric: str = "top1_accuracy"

    def entry(self, layer_id: str, weight_bits: int) -> LayerSensitivity:
        for e in self.entries:
            if e.layer_id == layer_id and e.weight_bits == weight_bits:
                return e
        raise ConfigError(f"report has no entry for layer '{layer_id}' at {weight_bits} bits")


def _pearson(xs, ys) -> float | None:
    if len(xs) < 2:
        return None
    x = np.asarray(xs, dtype=np.float64)
    y = np.asarray(ys, dtype=np.float64)
    if np.ptp(x) == 0.0 or np.ptp(y) == 0.0:
        return None
    return float(np.corrcoef(x, y)[0, 1])


@dataclass(frozen=True)
class AdditivityTrial:
    trial: int
    low_layers: list
    expected_degradation: float
    measured_degradation: float
    expected_noise: float
    measured_noise: float
    expected_mean_shift_sum: float
    bias_shift_suspect: bool


@dataclass
class AdditivityResult:
    network: str
    dataset: str
    act_bits: int | None
    low_bits: int
    high_bits: int
    seed: int
    trials: list  # AdditivityTrial
    all_high: AdditivityTrial
    summary: dict = field(default_factory=dict)


@dataclass
class OutlierSummary:
    layer_id: str
    weight_count: int
    mean: float
    std: float
    k_sigma: float
    outlier_count: int
    max_abs_ratio: float  # max|w| / (k_sigma * std); inf for constant weights
    hist_counts: list
    hist_edges: list


@dataclass
class FixComparison:
    """Whole-network accuracy under the three clip placements plus FP."""

    network: str
    dataset: str
    target_layer: str
    method: str
    weight_bits: int
    act_bits: int
    metric: str
    fp_score: float
    naive: float
    global_clip: float
    local_clip: float

    @property
    def recovered_fraction(self) -> float | None:
        gap = self.fp_score - self.naive
        if gap <= 0:
            return None
        return (self.local_clip - self.naive) / gap


# ---------------------------------------------------------------------------
# measurement core
# ---------------------------------------------------------------------------


def _measure(fp_out, q_out, fp_score, eval_set, metric) -> tuple[float, float, float, float]:
    diff = fp_out.astype(np.float64) - q_out.astype(np.float64)
    n = fp_out.shape[0]
    noise = float(np.sum(diff * diff) / n)
    per_element = noise / (diff.size // n)
    degradation = fp_score - D.evaluate_stacked(q_out, eval_set, metric)
    mean_shift = float(diff.mean())
    return noise, per_element, degradation, mean_shift


def _sensitivity_for(graph, interceptor, x, fp_out, fp_score, eval_set, metric, config):
    q_out = G.forward(graph, x, tap=interceptor)
    noise, per_element, degradation, mean_shift = _measure(
        fp_out, q_out, fp_score, eval_set, metric
    )
    return LayerSensitivity(
        layer_id=config.layer_id,
        weight_bits=config.weight_bits,
        act_bits=config.act_bits,
        noise=noise,
        noise_per_element=per_element,
        degradation=degradation,
        mean_shift=mean_shift,
    )


def analyze_layer(
    graph: G.NetworkGraph,
    layer_id: str,
    config: Q.LayerQuantConfig,
    calib: Q.CalibrationRecord,
    eval_set: D.Dataset,
    metric: D.Metric,
    allow_unfolded: bool = False,
) -> LayerSensitivity:
    """Noise, degradation, and mean shift from quantizing exactly this layer."""
    Q._require_folded(graph, allow_unfolded)
    x = D.stack_samples(eval_set)
    fp_out = G.forward(graph, x)
    fp_score = D.evaluate_stacked(fp_out, eval_set, metric)
    interceptor = Q.make_layer_quantizer(graph, layer_id, config, calib)
    return _sensitivity_for(graph, interceptor, x, fp_out, fp_score, eval_set, metric, config)


def sweep(
    graph: G.NetworkGraph,
    weight_bits_list,
    act_bits: int | None,
    calib: Q.CalibrationRecord,
    eval_set: D.Dataset,
    metric: D.Metric,
    weight_clip: str = "minmax",
    granularity: str = "per_tensor",
    threads: int = 1,
    allow_unfolded: bool = False,
) -> SensitivityReport:
    """Per-layer sensitivities over the full layers x weight-bits grid."""
    Q._require_folded(graph, allow_unfolded)
    bits_list = [int(b) for b in weight_bits_list]
    if not bits_list:
        raise ConfigError("weight_bits_list must not be empty")
    layers = G.compute_layers(graph)
    x = D.stack_samples(eval_set)
    fp_out = G.forward(graph, x)
    fp_score = D.evaluate_stacked(fp_out, eval_set, metric)

    tasks = [(lid, bits) for lid in layers for bits in bits_list]

    def run(task):
        lid, bits = task
        cfg = Q.LayerQuantConfig(
            layer_id=lid,
            weight_bits=bits,
            act_bits=act_bits,
            weight_clip=weight_clip,
            granularity=granularity,
        )
        interceptor = Q.make_layer_quantizer(graph, lid, cfg, calib)
        return _sensitivity_for(graph, interceptor, x, fp_out, fp_score, eval_set, metric, cfg)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = dict(zip(tasks, pool.map(run, tasks)))
    else:
        results = {task: run(task) for task in tasks}
    entries = [results[(lid, bits)] for lid in layers for bits in bits_list]
    return SensitivityReport(
        network=G.network_id(graph),
        dataset=eval_set.id,
        samples=len(eval_set.samples),
        act_bits=act_bits,
        weight_bits=bits_list,
        layers=layers,
        fp_score=fp_score,
        entries=entries,
        weight_clip=weight_clip,
        granularity=granularity,
        metric=metric.kind,
    )


# ---------------------------------------------------------------------------
# additivity
# ---------------------------------------------------------------------------


def draw_low_subsets(seed: int, trials: int, layers: list) -> list[list]:
    """Deterministic random layer subsets: size uniform in [0, n // 3], then
    a partial Fisher-Yates shuffle picks the members. Small subsets keep the
    mixed-precision trials inside the moderate-degradation regime where the
    additivity approximation is meaningful."""
    rng = SplitMix64(seed)
    n = len(layers)
    subsets = []
    for _ in range(trials):
        k = rng.next_below(max(1, n // 3) + 1)
        idx = list(range(n))
        for i in range(k):
            j = i + rng.next_below(n - i)
            idx[i], idx[j] = idx[j], idx[i]
        subsets.append(sorted(layers[i] for i in idx[:k]))
    return subsets


def check_additivity(
    graph: G.NetworkGraph,
    report: SensitivityReport,
    trials: int,
    seed: int,
    low_bits: int = 4,
    high_bits: int = 8,
    *,
    calib: Q.CalibrationRecord,
    eval_set: D.Dataset,
    metric: D.Metric,
    allow_unfolded: bool = False,
) -> AdditivityResult:
    """Summed single-layer contributions vs whole-network measurements.

    Each trial quantizes a random subset of layers' weights at low_bits and
    the rest at high_bits (activations at the report's act_bits throughout).
    Expected values are pure sums of the report's single-layer entries and
    are never re-measured. The all-high configuration is always evaluated as
    a baseline record.
    """
    Q._require_folded(graph, allow_unfolded)
    layers = report.layers
    for lid in layers:
        report.entry(lid, low_bits)
        report.entry(lid, high_bits)
    x = D.stack_samples(eval_set)
    fp_out = G.forward(graph, x)
    fp_score = D.evaluate_stacked(fp_out, eval_set, metric)

    def run_trial(index: int, low: list) -> AdditivityTrial:
        low_set = set(low)
        assigned = {lid: (low_bits if lid in low_set else high_bits) for lid in layers}
        expected_deg = sum(report.entry(lid, assigned[lid]).degradation for lid in layers)
        expected_noise = sum(report.entry(lid, assigned[lid]).noise for lid in layers)
        expected_npe = sum(report.entry(lid, assigned[lid]).noise_per_element for lid in layers)
        shift_sum = sum(abs(report.entry(lid, assigned[lid]).mean_shift) for lid in layers)
        configs = [
            Q.LayerQuantConfig(
                layer_id=lid,
                weight_bits=assigned[lid],
                act_bits=report.act_bits,
                weight_clip=report.weight_clip,
                granularity=report.granularity,
            )
            for lid in layers
        ]
        nq = Q.quantize_network(graph, configs, calib)
        q_out = G.forward(graph, x, tap=nq)
        noise, _, degradation, _ = _measure(fp_out, q_out, fp_score, eval_set, metric)
        suspect = shift_sum**2 > BIAS_SHIFT_SUSPECT_RATIO * max(expected_npe, 1e-300)
        return AdditivityTrial(
            trial=index,
            low_layers=list(low),
            expected_degradation=expected_deg,
            measured_degradation=degradation,
            expected_noise=expected_noise,
            measured_noise=noise,
            expected_mean_shift_sum=shift_sum,
            bias_shift_suspect=bool(suspect),
        )

    all_high = run_trial(-1, [])
    subsets = draw_low_subsets(seed, trials, layers)
    trial_records = [run_trial(i, subset) for i, subset in enumerate(subsets)]

    summary: dict = {
        "trials": trials,
        "pearson_degradation": _pearson(
            [t.expected_degradation for t in trial_records],
            [t.measured_degradation for t in trial_records],
        ),
        "pearson_noise": _pearson(
            [t.expected_noise for t in trial_records],
            [t.measured_noise for t in trial_records],
        ),
        "suspect_trials": sum(1 for t in trial_records if t.bias_shift_suspect),
    }
    for name, expected, measured in (
        ("noise", "expected_noise", "measured_noise"),
        ("degradation", "expected_degradation", "measured_degradation"),
    ):
        errs = [
            abs(getattr(t, expected) - getattr(t, measured)) / abs(getattr(t, measured))
            for t in trial_records
            if getattr(t, measured) != 0.0
        ]
        summary[f"max_rel_err_{name}"] = max(errs) if errs else None
    summary["all_high_noise_rel_err"] = (
        abs(all_high.expected_noise - all_high.measured_noise) / all_high.measured_noise
        if all_high.measured_noise > 0
        else None
    )
    return AdditivityResult(
        network=report.network,
        dataset=report.dataset,
        act_bits=report.act_bits,
        low_bits=low_bits,
        high_bits=high_bits,
        seed=seed,
        trials=trial_records,
        all_high=all_high,
        summary=summary,
    )


# ---------------------------------------------------------------------------
# ranking and diagnostics
# ---------------------------------------------------------------------------


def rank_layers(report: SensitivityReport, weight_bits: int) -> list:
    """Layers by descending degradation; ties by noise, then topological order."""
    order = {lid: i for i, lid in enumerate(report.layers)}
    entries = [report.entry(lid, weight_bits) for lid in report.layers]
    entries.sort(key=lambda e: (-e.degradation, -e.noise, order[e.layer_id]))
    return [(e.layer_id, e.degradation) for e in entries]


def diagnose_outliers(graph: G.NetworkGraph, layer_id: str, k_sigma: float = 6.0) -> OutlierSummary:
    """Weight outlier census plus a plot-ready 64-bin histogram."""
    node = graph.node(layer_id)
    if node.kind not in G.WEIGHTED_KINDS:
        raise ConfigError(f"layer '{layer_id}': no weights to diagnose (kind '{node.kind}')")
    w = graph.params[node.params["weight"]].ravel().astype(np.float64)
    mean = float(w.mean())
    std = float(w.std())
    threshold = k_sigma * std
    if threshold > 0:
        outliers = int(np.sum(np.abs(w - mean) > threshold))
        ratio = float(np.max(np.abs(w)) / threshold)
    else:
        outliers = 0
        ratio = math.inf
    counts, edges = np.histogram(w, bins=64, range=(float(w.min()), float(w.max())))
    return OutlierSummary(
        layer_id=layer_id,
        weight_count=w.size,
        mean=mean,
        std=std,
        k_sigma=float(k_sigma),
        outlier_count=outliers,
        max_abs_ratio=ratio,
        hist_counts=[int(c) for c in counts],
        hist_edges=[float(e) for e in edges],
    )


def compare_fixes(
    graph: G.NetworkGraph,
    target_layer: str,
    calib: Q.CalibrationRecord,
    eval_set: D.Dataset,
    metric: D.Metric,
    method: str = "mse_grid",
    weight_bits: int = 8,
    act_bits: int = 8,
    allow_unfolded: bool = False,
) -> FixComparison:
    """Whole-network quantization under naive, globally clipped, and
    locally clipped (target layer only) range selection."""
    Q._require_folded(graph, allow_unfolded)
    node = graph.node(target_layer)  # raises GraphError for unknown layers
    if node.kind not in G.WEIGHTED_KINDS:
        raise ConfigError(f"layer '{target_layer}': local clipping needs a weighted layer")
    x = D.stack_samples(eval_set)
    fp_out = G.forward(graph, x)
    fp_score = D.evaluate_stacked(fp_out, eval_set, metric)

    def score(configs) -> float:
        nq = Q.quantize_network(graph, configs, calib)
        return D.evaluate_stacked(G.forward(graph, x, tap=nq), eval_set, metric)

    naive = score(Q.uniform_configs(graph, weight_bits, act_bits, "minmax"))
    global_clip = score(Q.uniform_configs(graph, weight_bits, act_bits, method))
    local_clip = score(
        Q.uniform_configs(
            graph,
            weight_bits,
            act_bits,
            "minmax",
            overrides={target_layer: {"weight_clip": method}},
        )
    )
    return FixComparison(
        network=G.network_id(graph),
        dataset=eval_set.id,
        target_layer=target_layer,
        method=method,
        weight_bits=weight_bits,
        act_bits=act_bits,
        metric=metric.kind,
        fp_score=fp_score,
        naive=naive,
        global_clip=global_clip,
        local_clip=local_clip,
    )


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------


def _finite_or_str(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else ("inf" if v > 0 else "-inf")


def report_to_json(report: SensitivityReport) -> str:
    doc = {
        "network": report.network,
        "dataset": report.dataset,
        "samples": report.samples,
        "act_bits": report.act_bits,
        "weight_bits": report.weight_bits,
        "layers": report.layers,
        "fp_score": report.fp_score,
        "metric": report.metric,
        "weight_clip": report.weight_clip,
        "granularity": report.granularity,
        "entries": [
            {
                "layer_id": e.layer_id,
                "weight_bits": e.weight_bits,
                "noise": e.noise,
                "noise_per_element": e.noise_per_element,
                "degradation": e.degradation,
                "mean_shift": e.mean_shift,
            }
            for e in report.entries
        ],
        "rank": {
            str(bits): [[lid, deg] for lid, deg in rank_layers(report, bits)]
            for bits in report.weight_bits
        },
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def report_from_json(text: str) -> SensitivityReport:
    try:
        doc = json.loads(text)
        entries = [
            LayerSensitivity(
                layer_id=e["layer_id"],
                weight_bits=e["weight_bits"],
                act_bits=doc["act_bits"],
                noise=float(e["noise"]),
                noise_per_element=float(e["noise_per_element"]),
                degradation=float(e["degradation"]),
                mean_shift=float(e["mean_shift"]),
            )
            for e in doc["entries"]
        ]
        return SensitivityReport(
            network=doc["network"],
            dataset=doc["dataset"],
            samples=int(doc["samples"]),
            act_bits=doc["act_bits"],
            weight_bits=[int(b) for b in doc["weight_bits"]],
            layers=list(doc["layers"]),
            fp_score=float(doc["fp_score"]),
            entries=entries,
            weight_clip=doc.get("weight_clip", "minmax"),
            granularity=doc.get("granularity", "per_tensor"),
            metric=doc.get("metric", "top1_accuracy"),
        )
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"invalid sensitivity report JSON: {exc}") from exc


def heatmap_csv(report: SensitivityReport) -> str:
    """Rows are weight bit widths, columns layer ids, cells degradation."""
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["weight_bits"] + list(report.layers))
    for bits in report.weight_bits:
        writer.writerow([bits] + [repr(report.entry(lid, bits).degradation) for lid in report.layers])
    return buf.getvalue()


def additivity_to_json(result: AdditivityResult) -> str:
    def trial_doc(t: AdditivityTrial) -> dict:
        return {
            "trial": t.trial,
            "low_layers": t.low_layers,
            "expected_degradation": t.expected_degradation,
            "measured_degradation": t.measured_degradation,
            "expected_noise": t.expected_noise,
            "measured_noise": t.measured_noise,
            "expected_mean_shift_sum": t.expected_mean_shift_sum,
            "bias_shift_suspect": t.bias_shift_suspect,
        }

    doc = {
        "network": result.network,
        "dataset": result.dataset,
        "act_bits": result.act_bits,
        "low_bits": result.low_bits,
        "high_bits": result.high_bits,
        "seed": result.seed,
        "trials": [trial_doc(t) for t in result.trials],
        "all_high": trial_doc(result.all_high),
        "summary": {k: _finite_or_str(v) if isinstance(v, float) else v
                    for k, v in result.summary.items()},
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def scatter_csv(result: AdditivityResult) -> str:
    """Per-trial expected/measured pairs for scatter plotting."""
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(
        [
            "trial",
            "n_low_layers",
            "expected_degradation",
            "measured_degradation",
            "expected_noise",
            "measured_noise",
            "bias_shift_suspect",
        ]
    )
    for t in result.trials:
        writer.writerow(
            [
                t.trial,
                len(t.low_layers),
                repr(t.expected_degradation),
                repr(t.measured_degradation),
                repr(t.expected_noise),
                repr(t.measured_noise),
                int(t.bias_shift_suspect),
            ]
        )
    return buf.getvalue()


def fix_comparison_to_json(fix: FixComparison) -> str:
    doc = {
        "network": fix.network,
        "dataset": fix.dataset,
        "target_layer": fix.target_layer,
        "method": fix.method,
        "weight_bits": fix.weight_bits,
        "act_bits": fix.act_bits,
        "metric": fix.metric,
        "rows": {
            "full_precision": fix.fp_score,
            "naive": fix.naive,
            "global_clip": fix.global_clip,
            "local_clip": fix.local_clip,
        },
        "recovered_fraction": fix.recovered_fraction,
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def outliers_to_json(summary: OutlierSummary) -> str:
    doc = {
        "layer_id": summary.layer_id,
        "weight_count": summary.weight_count,
        "mean": summary.mean,
        "std": summary.std,
        "k_sigma": summary.k_sigma,
        "outlier_count": summary.outlier_count,
        "max_abs_ratio": _finite_or_str(summary.max_abs_ratio),
    }
    return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def histogram_csv(summary: OutlierSummary) -> str:
    import io

    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(["bin_lo", "bin_hi", "count"])
    for i, count in enumerate(summary.hist_counts):
        writer.writerow([repr(summary.hist_edges[i]), repr(summary.hist_edges[i + 1]), count])
    return buf.getvalue()
