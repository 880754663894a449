"""Affine fake quantization: parameters, calibration, clipping, fixes.

Quantization is asymmetric affine with an integer zero point, per tensor by
default and optionally per output channel for weights. Fake quantization
maps a float32 tensor onto its integer grid and back, so downstream float
computation sees exactly the quantization error an integer pipeline would
introduce. Zero is always exactly representable: ranges are nudged so the
zero point lands on an integer code, which keeps ReLU zeros and zero
padding lossless.

Interceptors returned by make_layer_quantizer / quantize_network are
immutable and safe to share across concurrent forward passes.
"""

from __future__ import annotations

import json
import math
from collections import ChainMap
from dataclasses import dataclass, field, replace

import numpy as np

from . import graph as G
from .errors import ConfigError, FormatError
from .tensor import as_tensor

MIN_BITS, MAX_BITS = 2, 16
CLIP_METHODS = ("minmax", "mse_grid")
GRANULARITIES = ("per_tensor", "per_channel")


@dataclass(frozen=True)
class QuantParams:
    """Affine grid: value = range_lo + code * scale, code in [0, 2^bits - 1]."""

    bits: int
    scale: float
    zero_point: int
    range_lo: float
    range_hi: float

    @classmethod
    def from_range(cls, lo: float, hi: float, bits: int) -> "QuantParams":
        if not MIN_BITS <= int(bits) <= MAX_BITS:
            raise ConfigError(f"bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}")
        bits = int(bits)
        lo = min(float(lo), 0.0)
        hi = max(float(hi), 0.0)
        if hi <= lo:  # only possible when lo == hi == 0
            return cls(bits=bits, scale=1.0, zero_point=0, range_lo=0.0, range_hi=0.0)
        levels = (1 << bits) - 1
        scale = (hi - lo) / levels
        zero_point = int(math.floor(-lo / scale + 0.5))  # ties away from zero; arg >= 0
        zero_point = min(max(zero_point, 0), levels)
        range_lo = -zero_point * scale
        return cls(
            bits=bits,
            scale=scale,
            zero_point=zero_point,
            range_lo=range_lo,
            range_hi=range_lo + levels * scale,
        )


def quantize_dequantize(x, qp: QuantParams) -> np.ndarray:
    """Map each element to its nearest grid code (ties away from zero) and back.

    Saturating by construction; idempotent bit for bit. Internal arithmetic
    runs in float64 so re-quantizing a reconstructed value always lands on
    the same code.
    """
    x = as_tensor(x, "input")
    levels = (1 << qp.bits) - 1
    v = (x.astype(np.float64) - qp.range_lo) / qp.scale
    code = np.floor(np.abs(v) + 0.5) * np.sign(v)
    np.clip(code, 0.0, float(levels), out=code)
    return (qp.range_lo + code * qp.scale).astype(np.float32)


def _fake_quant_channelwise(w: np.ndarray, params: list[QuantParams]) -> np.ndarray:
    out = np.empty_like(w)
    for c, qp in enumerate(params):
        out[c] = quantize_dequantize(w[c], qp)
    return out


# ---------------------------------------------------------------------------
# weight range selection
# ---------------------------------------------------------------------------


def weight_range_minmax(w) -> tuple[float, float]:
    """Exact (min, max) of the tensor."""
    w = as_tensor(w, "weights")
    return float(w.min()), float(w.max())


def weight_range_mse_grid(w, bits: int, grid_size: int = 128) -> tuple[float, float]:
    """Grid search over symmetric range fractions minimizing reconstruction MSE.

    Candidates are t_k * (min, max) for t_k = k / grid_size, k = 1..grid_size.
    The full range is always a candidate, so the selected range never
    quantizes worse than plain min/max.
    """
    w = as_tensor(w, "weights")
    if grid_size < 1:
        raise ConfigError(f"grid_size must be >= 1, got {grid_size}")
    lo0, hi0 = weight_range_minmax(w)
    flat = w.ravel().astype(np.float64)
    best: tuple[float, float] | None = None
    best_mse = math.inf
    for k in range(1, grid_size + 1):
        t = k / grid_size
        qp = QuantParams.from_range(t * lo0, t * hi0, bits)
        err = flat - quantize_dequantize(w, qp).ravel().astype(np.float64)
        mse = float(err @ err)
        if mse <= best_mse:  # ties prefer the wider range
            best_mse = mse
            best = (t * lo0, t * hi0)
    return best


def _resolve_weight_ranges(w, bits, clip, granularity, grid_size=128):
    """Returns (per-tensor (lo, hi) or per-channel list, QuantParams or list)."""
    if clip not in CLIP_METHODS:
        raise ConfigError(f"unknown clip method '{clip}'")
    if granularity not in GRANULARITIES:
        raise ConfigError(f"unknown granularity '{granularity}'")
    chooser = weight_range_minmax if clip == "minmax" else (
        lambda t: weight_range_mse_grid(t, bits, grid_size)
    )
    if granularity == "per_tensor":
        lo, hi = chooser(w)
        return (lo, hi), QuantParams.from_range(lo, hi, bits)
    ranges = [chooser(w[c]) for c in range(w.shape[0])]
    return ranges, [QuantParams.from_range(lo, hi, bits) for lo, hi in ranges]


# ---------------------------------------------------------------------------
# configuration and calibration
# ---------------------------------------------------------------------------


@dataclass
class LayerQuantConfig:
    """Per-layer bit/clip choices. act_bits covers the layer's input and output."""

    layer_id: str
    weight_bits: int | None = None
    act_bits: int | None = None
    weight_clip: str = "minmax"
    granularity: str = "per_tensor"
    # Filled in by make_layer_quantizer: the clip bounds actually used.
    weight_range: tuple | list | None = None

    def validated(self) -> "LayerQuantConfig":
        for bits in (self.weight_bits, self.act_bits):
            if bits is not None and not MIN_BITS <= int(bits) <= MAX_BITS:
                raise ConfigError(
                    f"layer '{self.layer_id}': bits must be in [{MIN_BITS}, {MAX_BITS}], got {bits}"
                )
        if self.weight_clip not in CLIP_METHODS:
            raise ConfigError(f"layer '{self.layer_id}': unknown clip method '{self.weight_clip}'")
        if self.granularity not in GRANULARITIES:
            raise ConfigError(f"layer '{self.layer_id}': unknown granularity '{self.granularity}'")
        return self


def configs_to_json(configs: list[LayerQuantConfig]) -> str:
    docs = [
        {
            "layer_id": c.layer_id,
            "weight_bits": c.weight_bits,
            "act_bits": c.act_bits,
            "weight_clip": c.weight_clip,
            "granularity": c.granularity,
        }
        for c in configs
    ]
    return json.dumps(docs, indent=2, sort_keys=True) + "\n"


def configs_from_json(text: str) -> list[LayerQuantConfig]:
    try:
        docs = json.loads(text)
        return [
            LayerQuantConfig(
                layer_id=d["layer_id"],
                weight_bits=d.get("weight_bits"),
                act_bits=d.get("act_bits"),
                weight_clip=d.get("weight_clip", "minmax"),
                granularity=d.get("granularity", "per_tensor"),
            ).validated()
            for d in docs
        ]
    except (json.JSONDecodeError, KeyError, TypeError) as exc:
        raise FormatError(f"invalid quant config JSON: {exc}") from exc


@dataclass
class CalibrationRecord:
    """Observed (min, max) of every node's output over the calibration samples."""

    ranges: dict  # node id -> (min, max)
    samples: int

    def range_of(self, node_id: str) -> tuple[float, float]:
        if node_id not in self.ranges:
            raise ConfigError(f"no calibration entry for layer '{node_id}'")
        return self.ranges[node_id]

    def to_json(self) -> str:
        doc = {
            "samples": self.samples,
            "ranges": {
                k: {"min": float(lo), "max": float(hi)} for k, (lo, hi) in self.ranges.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "CalibrationRecord":
        try:
            doc = json.loads(text)
            ranges = {k: (float(v["min"]), float(v["max"])) for k, v in doc["ranges"].items()}
            return cls(ranges=ranges, samples=int(doc["samples"]))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise FormatError(f"invalid calibration JSON: {exc}") from exc


def calibrate(graph: G.NetworkGraph, calib_set, n_samples: int) -> CalibrationRecord:
    """Exact min/max of every node output over the first n_samples samples."""
    size = len(calib_set.samples)
    if size == 0:
        raise ConfigError("calibration dataset is empty")
    if not 1 <= n_samples <= size:
        raise ConfigError(f"n_samples must be in [1, {size}], got {n_samples}")
    x = np.concatenate([as_tensor(s) for s in calib_set.samples[:n_samples]], axis=0)
    ranges: dict[str, tuple[float, float]] = {}

    def record(node, ins, out):
        ranges[node.id] = (float(out.min()), float(out.max()))
        return None

    G.forward(graph, x, tap=record)
    return CalibrationRecord(ranges=ranges, samples=n_samples)


# ---------------------------------------------------------------------------
# interceptors
# ---------------------------------------------------------------------------


def _quantized_weight_overlay(graph, node, config):
    """Fake-quantized weight arrays for one layer, keyed by parameter ref."""
    w = graph.params[node.params["weight"]]
    ranges, params = _resolve_weight_ranges(
        w, config.weight_bits, config.weight_clip, config.granularity
    )
    if config.weight_range is not None:  # caller pinned the clip bounds
        ranges = config.weight_range
        if config.granularity == "per_tensor":
            params = QuantParams.from_range(*ranges, config.weight_bits)
        else:
            params = [QuantParams.from_range(lo, hi, config.weight_bits) for lo, hi in ranges]
    if isinstance(params, list):
        wq = _fake_quant_channelwise(w, params)
    else:
        wq = quantize_dequantize(w, params)
    return {node.params["weight"]: wq}, ranges


@dataclass
class LayerQuantizer:
    """Forward interceptor quantizing exactly one layer (Fig-style building block:
    the layer's weights plus its input and output activations; everything else
    stays full precision)."""

    layer_id: str
    config: LayerQuantConfig
    input_params: dict  # producer id -> QuantParams, empty when act_bits is None
    output_params: QuantParams | None
    _node: G.LayerNode = field(repr=False)
    _params: ChainMap = field(repr=False)

    def __call__(self, node, inputs, output):
        if node.id != self.layer_id:
            return None
        ins = [
            quantize_dequantize(t, self.input_params[pid]) if pid in self.input_params else t
            for pid, t in zip(node.inputs, inputs)
        ]
        out = G.apply_node(self._node, ins, self._params)
        if self.output_params is not None:
            out = quantize_dequantize(out, self.output_params)
        return out


def make_layer_quantizer(
    graph: G.NetworkGraph,
    layer_id: str,
    config: LayerQuantConfig,
    calib: CalibrationRecord,
) -> LayerQuantizer:
    """Build the single-layer fake-quantization interceptor.

    Weights use the configured clip method and granularity; the input
    tensor(s) are quantized with the producers' calibrated ranges and the
    output with the layer's own calibrated (post-activation) range, both at
    act_bits. Weightless layers quantize activations only.
    """
    config.validated()
    node = graph.node(layer_id)
    if node.kind in G.NON_COMPUTE_KINDS:
        raise ConfigError(f"layer '{layer_id}': kind '{node.kind}' is not analyzable")
    overlay: dict = {}
    resolved = None
    if config.weight_bits is not None and node.kind in G.WEIGHTED_KINDS:
        overlay, resolved = _quantized_weight_overlay(graph, node, config)
    input_params: dict[str, QuantParams] = {}
    output_params = None
    if config.act_bits is not None:
        for pid in node.inputs:
            lo, hi = calib.range_of(pid)
            input_params[pid] = QuantParams.from_range(lo, hi, config.act_bits)
        lo, hi = calib.range_of(layer_id)
        output_params = QuantParams.from_range(lo, hi, config.act_bits)
    return LayerQuantizer(
        layer_id=layer_id,
        config=replace(config, weight_range=resolved),
        input_params=input_params,
        output_params=output_params,
        _node=node,
        _params=ChainMap(overlay, graph.params),
    )


@dataclass
class _LayerPiece:
    node: G.LayerNode
    output_params: QuantParams | None
    has_weight_overlay: bool


@dataclass
class NetworkQuantizer:
    """Composite interceptor quantizing every compute layer simultaneously.

    Tensors shared between adjacent layers are quantized once, at the
    producer's output, and consumed as-is downstream; the network input is
    quantized once at the input node. (A per-layer analysis sums the shared
    tensors' noise twice; whole-network measurements with this interceptor
    count them once, and the additivity report surfaces the gap.)
    """

    pieces: dict  # layer id -> _LayerPiece
    input_node_params: QuantParams | None
    configs: dict  # layer id -> LayerQuantConfig with resolved weight_range
    _params: ChainMap = field(repr=False)

    def __call__(self, node, inputs, output):
        if node.kind == "input":
            if self.input_node_params is None:
                return None
            return quantize_dequantize(output, self.input_node_params)
        piece = self.pieces.get(node.id)
        if piece is None:
            return None
        out = output
        if piece.has_weight_overlay:
            out = G.apply_node(piece.node, inputs, self._params)
        if piece.output_params is not None:
            out = quantize_dequantize(out, piece.output_params)
        return out


def quantize_network(
    graph: G.NetworkGraph,
    configs: list[LayerQuantConfig],
    calib: CalibrationRecord,
) -> NetworkQuantizer:
    """Build the whole-network interceptor; expects one config per compute layer."""
    wanted = G.compute_layers(graph)
    by_id: dict[str, LayerQuantConfig] = {}
    for c in configs:
        c.validated()
        if c.layer_id in by_id:
            raise ConfigError(f"duplicate config for layer '{c.layer_id}'")
        by_id[c.layer_id] = c
    missing = [lid for lid in wanted if lid not in by_id]
    unknown = [lid for lid in by_id if lid not in wanted]
    if missing:
        raise ConfigError(f"missing configs for layers: {', '.join(missing)}")
    if unknown:
        raise ConfigError(f"configs for unknown/non-compute layers: {', '.join(unknown)}")

    overlay: dict = {}
    pieces: dict[str, _LayerPiece] = {}
    resolved_configs: dict[str, LayerQuantConfig] = {}
    for lid in wanted:
        node = graph.node(lid)
        cfg = by_id[lid]
        resolved = None
        has_overlay = False
        if cfg.weight_bits is not None and node.kind in G.WEIGHTED_KINDS:
            piece_overlay, resolved = _quantized_weight_overlay(graph, node, cfg)
            overlay.update(piece_overlay)
            has_overlay = True
        out_params = None
        if cfg.act_bits is not None:
            lo, hi = calib.range_of(lid)
            out_params = QuantParams.from_range(lo, hi, cfg.act_bits)
        pieces[lid] = _LayerPiece(node=node, output_params=out_params, has_weight_overlay=has_overlay)
        resolved_configs[lid] = replace(cfg, weight_range=resolved)

    # The raw input tensor is the input node's "output": quantize it once,
    # using its first compute consumer's act_bits and the calibrated range.
    input_id = graph.input_id
    input_params = None
    for lid in wanted:
        cfg = by_id[lid]
        if input_id in graph.node(lid).inputs and cfg.act_bits is not None:
            lo, hi = calib.range_of(input_id)
            input_params = QuantParams.from_range(lo, hi, cfg.act_bits)
            break
    return NetworkQuantizer(
        pieces=pieces,
        input_node_params=input_params,
        configs=resolved_configs,
        _params=ChainMap(overlay, graph.params),
    )


def uniform_configs(
    graph: G.NetworkGraph,
    weight_bits: int | None,
    act_bits: int | None,
    weight_clip: str = "minmax",
    granularity: str = "per_tensor",
    overrides: dict | None = None,
) -> list[LayerQuantConfig]:
    """One identical config per compute layer, with optional per-layer overrides."""
    overrides = overrides or {}
    configs = []
    for lid in G.compute_layers(graph):
        kwargs = dict(
            weight_bits=weight_bits,
            act_bits=act_bits,
            weight_clip=weight_clip,
            granularity=granularity,
        )
        kwargs.update(overrides.get(lid, {}))
        configs.append(LayerQuantConfig(layer_id=lid, **kwargs).validated())
    return configs


# ---------------------------------------------------------------------------
# bias correction
# ---------------------------------------------------------------------------


def _require_folded(graph: G.NetworkGraph, allow_unfolded: bool = False) -> None:
    if not allow_unfolded and G.has_batch_norm(graph):
        raise ConfigError(
            "graph still carries batch-norm parameters; call fold_batch_norms first "
            "(or pass allow_unfolded=True)"
        )


def _capture_inputs(graph, x, tap=None) -> dict:
    """Run forward and record the input tensors each node actually consumed."""
    seen: dict[str, list] = {}

    def rec(node, ins, out):
        seen[node.id] = ins
        return tap(node, ins, out) if tap is not None else None

    G.forward(graph, x, tap=rec)
    return seen


def _channel_mean(delta: np.ndarray) -> np.ndarray:
    """Mean over batch (and spatial dims) per output channel, in float64."""
    if delta.ndim == 4:
        return delta.mean(axis=(0, 2, 3), dtype=np.float64)
    return delta.mean(axis=0, dtype=np.float64)


def preactivation_mean_shift(
    graph: G.NetworkGraph,
    configs: list[LayerQuantConfig],
    calib: CalibrationRecord,
    calib_set,
    n_samples: int,
) -> dict:
    """Per-channel mean of (FP pre-activation - quantized pre-activation).

    Measured over the first n_samples of calib_set for every conv/dense
    compute layer, under the whole-network quantizer. This is the quantity
    bias correction drives to zero.
    """
    x = np.concatenate([as_tensor(s) for s in calib_set.samples[:n_samples]], axis=0)
    nq = quantize_network(graph, configs, calib)
    fp_inputs = _capture_inputs(graph, x)
    q_inputs = _capture_inputs(graph, x, tap=nq)
    shifts = {}
    for node in graph.layers:
        if node.kind not in G.WEIGHTED_KINDS:
            continue
        pre_fp = G.linear_output(node, fp_inputs[node.id], graph.params)
        pre_q = G.linear_output(node, q_inputs[node.id], nq._params)
        shifts[node.id] = _channel_mean(pre_fp.astype(np.float64) - pre_q.astype(np.float64))
    return shifts


def bias_correct(
    graph: G.NetworkGraph,
    configs: list[LayerQuantConfig],
    calib_set,
    n_samples: int,
) -> G.NetworkGraph:
    """Compensate the mean activation shift introduced by quantization noise.

    For each conv/dense layer, in topological order, adds to the bias the
    per-output-channel mean of (FP pre-activation - quantized pre-activation)
    measured over the first n_samples calibration samples, holding the
    quantization parameters fixed. Layers whose configs quantize nothing get
    a (numerically) zero delta.
    """
    _require_folded(graph)
    calib = calibrate(graph, calib_set, n_samples)
    x = np.concatenate([as_tensor(s) for s in calib_set.samples[:n_samples]], axis=0)
    corrected = G.NetworkGraph(list(graph.layers), list(graph.input_shape), dict(graph.params))
    nq = quantize_network(corrected, configs, calib)  # ChainMap sees live bias updates
    fp_inputs = _capture_inputs(graph, x)
    for node in corrected.layers:
        if node.kind not in G.WEIGHTED_KINDS:
            continue
        q_inputs = _capture_inputs(corrected, x, tap=nq)
        pre_fp = G.linear_output(node, fp_inputs[node.id], graph.params)
        pre_q = G.linear_output(node, q_inputs[node.id], nq._params)
        delta = _channel_mean(pre_fp.astype(np.float64) - pre_q.astype(np.float64))
        bias_ref = node.params["bias"]
        corrected.params[bias_ref] = (
            corrected.params[bias_ref].astype(np.float64) + delta
        ).astype(np.float32)
    return corrected


# ---------------------------------------------------------------------------
# channel equalization
# ---------------------------------------------------------------------------


def equalize_pair(
    graph: G.NetworkGraph,
    producer_id: str,
    consumer_id: str,
    scale_vector,
) -> G.NetworkGraph:
    """Rescale a producer's output channels and inversely rescale the consumer.

    Producer channel c weights and bias are multiplied by s_c, the consumer's
    input channel c weights divided by s_c. Because ReLU (and identity) are
    positive homogeneous, the full-precision network function is unchanged up
    to float32 rounding while the per-channel weight ranges move.
    """
    producer = graph.node(producer_id)
    consumer = graph.node(consumer_id)
    for node in (producer, consumer):
        if node.kind not in G.WEIGHTED_KINDS:
            raise ConfigError(f"layer '{node.id}': equalization needs conv2d/dense layers")
        if node.bn is not None:
            raise ConfigError(f"layer '{node.id}': fold batch norms before equalizing")
    if producer_id not in consumer.inputs:
        raise ConfigError(f"'{consumer_id}' does not consume '{producer_id}' directly")
    if producer.activation not in ("none", "relu"):
        raise ConfigError(
            f"layer '{producer_id}': activation '{producer.activation}' is not positive "
            "homogeneous; equalization would change the network output"
        )
    s = np.asarray(scale_vector, dtype=np.float64).ravel()
    if np.any(s <= 0) or not np.all(np.isfinite(s)):
        raise ConfigError("scale_vector entries must be strictly positive and finite")
    wp = graph.params[producer.params["weight"]]
    bp = graph.params[producer.params["bias"]]
    wc = graph.params[consumer.params["weight"]]
    if s.shape != (wp.shape[0],):
        raise ConfigError(
            f"scale_vector length {s.shape[0]} != producer output channels {wp.shape[0]}"
        )
    if wc.shape[1] != wp.shape[0]:
        raise ConfigError(
            f"consumer input dimension ({wc.shape[1]}) != producer output channels "
            f"({wp.shape[0]}); the pair is not connected channelwise"
        )
    new_params = dict(graph.params)
    up = (-1,) + (1,) * (wp.ndim - 1)
    down = (1, -1) + (1,) * (wc.ndim - 2)
    new_params[producer.params["weight"]] = (wp.astype(np.float64) * s.reshape(up)).astype(np.float32)
    new_params[producer.params["bias"]] = (bp.astype(np.float64) * s).astype(np.float32)
    new_params[consumer.params["weight"]] = (wc.astype(np.float64) / s.reshape(down)).astype(np.float32)
    return G.NetworkGraph(list(graph.layers), list(graph.input_shape), new_params)


def equalization_scales(
    graph: G.NetworkGraph,
    producer_id: str,
    consumer_id: str,
    floor: float = 1e-12,
) -> np.ndarray:
    """Scales sqrt(consumer_range_c / producer_range_c) that equalize the two
    layers' per-channel weight ranges geometrically."""
    producer = graph.node(producer_id)
    consumer = graph.node(consumer_id)
    wp = graph.params[producer.params["weight"]]
    wc = graph.params[consumer.params["weight"]]
    axes_p = tuple(range(1, wp.ndim))
    r_p = np.maximum(np.abs(wp.astype(np.float64)).max(axis=axes_p), floor)
    axes_c = (0,) + tuple(range(2, wc.ndim))
    r_c = np.maximum(np.abs(wc.astype(np.float64)).max(axis=axes_c), floor)
    if r_c.shape != r_p.shape:
        raise ConfigError(
            f"consumer input dimension ({r_c.shape[0]}) != producer output channels ({r_p.shape[0]})"
        )
    return np.sqrt(r_c / r_p)
