"""Layer graphs: construction, validation, execution, BN folding, disk format.

A NetworkGraph is a topologically ordered list of LayerNodes plus a
parameter store mapping tensor references (e.g. "conv1.weight") to float32
arrays. Graphs should be treated as immutable after construction: every
transform here returns a new graph, and concurrent forward passes over the
same graph are safe.

On disk a model is a `model.json` document next to a `weights/` directory
of QTENSOR1 files named `<ref>.qt`.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .errors import FormatError, GraphError, ShapeError

MODEL_VERSION = 1

KINDS = (
    "conv2d",
    "dense",
    "maxpool",
    "avgpool",
    "global_avg_pool",
    "add",
    "flatten",
    "input",
    "output",
)
WEIGHTED_KINDS = ("conv2d", "dense")
# Pure plumbing: excluded from analysis because they add no arithmetic noise.
NON_COMPUTE_KINDS = ("input", "output", "flatten")
ACTIVATIONS = ("none", "relu")


@dataclass
class BatchNorm:
    """Inference-time batch norm attached to a conv2d/dense node."""

    gamma: np.ndarray
    beta: np.ndarray
    running_mean: np.ndarray
    running_var: np.ndarray
    epsilon: float = 1e-5


@dataclass
class LayerNode:
    id: str
    kind: str
    activation: str = "none"
    attrs: dict = field(default_factory=dict)
    params: dict | None = None  # {"weight": ref, "bias": ref} for conv2d/dense
    bn: BatchNorm | None = None
    inputs: list = field(default_factory=list)


@dataclass
class NetworkGraph:
    layers: list
    input_shape: list
    params: dict = field(default_factory=dict)  # ref -> float32 ndarray

    def node(self, layer_id: str) -> LayerNode:
        for n in self.layers:
            if n.id == layer_id:
                return n
        raise GraphError(f"no layer named '{layer_id}'")

    @property
    def input_id(self) -> str:
        return next(n.id for n in self.layers if n.kind == "input")

    @property
    def output_id(self) -> str:
        return next(n.id for n in self.layers if n.kind == "output")


def compute_layers(graph: NetworkGraph) -> list[str]:
    """Ids of the layers subject to analysis, in topological order."""
    return [n.id for n in graph.layers if n.kind not in NON_COMPUTE_KINDS]


def producers(graph: NetworkGraph, layer_id: str) -> list[str]:
    return list(graph.node(layer_id).inputs)


def has_batch_norm(graph: NetworkGraph) -> bool:
    return any(n.bn is not None for n in graph.layers)


# ---------------------------------------------------------------------------
# validation and shape inference
# ---------------------------------------------------------------------------


def _pair_attr(node: LayerNode, name: str, default=None) -> tuple[int, int]:
    value = node.attrs.get(name, default)
    if value is None:
        raise GraphError(f"layer '{node.id}': missing required attribute '{name}'")
    if isinstance(value, (int, np.integer)):
        return int(value), int(value)
    return int(value[0]), int(value[1])


def validate(graph: NetworkGraph) -> dict:
    """Check structural invariants; returns inferred output shapes per layer."""
    seen: set[str] = set()
    n_inputs = sum(1 for n in graph.layers if n.kind == "input")
    n_outputs = sum(1 for n in graph.layers if n.kind == "output")
    if n_inputs != 1 or n_outputs != 1:
        raise GraphError(
            f"graph must have exactly one input and one output node, got {n_inputs} and {n_outputs}"
        )
    if not compute_layers(graph):
        raise GraphError("graph has no compute layers")
    if len(graph.input_shape) < 2 or any(d < 1 for d in graph.input_shape):
        raise GraphError(f"invalid input_shape {graph.input_shape}")

    shapes: dict[str, tuple] = {}
    for node in graph.layers:
        if node.id in seen:
            raise GraphError(f"duplicate layer id '{node.id}'")
        if node.kind not in KINDS:
            raise FormatError(f"layer '{node.id}': unknown kind '{node.kind}'")
        if node.activation not in ACTIVATIONS:
            raise FormatError(f"layer '{node.id}': unknown activation '{node.activation}'")
        for ref in node.inputs:
            if ref not in seen:
                raise GraphError(
                    f"layer '{node.id}': input '{ref}' not declared earlier (graph must be a DAG "
                    "in topological order)"
                )
        arity = len(node.inputs)
        if node.kind == "input" and arity != 0:
            raise GraphError(f"layer '{node.id}': input node takes no inputs")
        if node.kind == "add" and arity < 2:
            raise GraphError(f"layer '{node.id}': add needs at least two inputs, got {arity}")
        if node.kind not in ("input", "add") and arity != 1:
            raise GraphError(f"layer '{node.id}': expected exactly one input, got {arity}")

        if node.kind in WEIGHTED_KINDS:
            if not node.params or "weight" not in node.params or "bias" not in node.params:
                raise GraphError(f"layer '{node.id}': {node.kind} requires weight and bias params")
            for key in ("weight", "bias"):
                ref = node.params[key]
                if ref not in graph.params:
                    raise FormatError(f"layer '{node.id}': missing parameter '{ref}'")
        elif node.params:
            raise GraphError(f"layer '{node.id}': kind '{node.kind}' takes no parameters")
        if node.bn is not None and node.kind not in WEIGHTED_KINDS:
            raise GraphError(f"layer '{node.id}': batch norm only allowed on conv2d/dense")

        shapes[node.id] = _infer_shape(graph, node, shapes)
        seen.add(node.id)
    return shapes


def _infer_shape(graph: NetworkGraph, node: LayerNode, shapes: dict) -> tuple:
    ins = [shapes[i] for i in node.inputs]
    if node.kind == "input":
        return tuple(graph.input_shape)
    if node.kind == "output":
        return ins[0]
    if node.kind == "flatten":
        if len(ins[0]) < 2:
            raise ShapeError(f"layer '{node.id}': flatten needs rank >= 2, got {ins[0]}")
        return (ins[0][0], int(np.prod(ins[0][1:])))
    if node.kind == "add":
        if any(s != ins[0] for s in ins[1:]):
            raise ShapeError(f"layer '{node.id}': add inputs differ in shape: {ins}")
        return ins[0]
    if node.kind == "global_avg_pool":
        if len(ins[0]) != 4:
            raise ShapeError(f"layer '{node.id}': expected NCHW input, got {ins[0]}")
        return (ins[0][0], ins[0][1], 1, 1)
    if node.kind in ("maxpool", "avgpool"):
        if len(ins[0]) != 4:
            raise ShapeError(f"layer '{node.id}': expected NCHW input, got {ins[0]}")
        n, c, h, w = ins[0]
        wh, ww = _pair_attr(node, "window")
        sh, sw = _pair_attr(node, "stride", default=node.attrs.get("window"))
        if wh > h or ww > w:
            raise ShapeError(
                f"layer '{node.id}': window ({wh}x{ww}) larger than input ({h}x{w})"
            )
        return (n, c, (h - wh) // sh + 1, (w - ww) // sw + 1)
    if node.kind == "conv2d":
        if len(ins[0]) != 4:
            raise ShapeError(f"layer '{node.id}': expected NCHW input, got {ins[0]}")
        n, c, h, w = ins[0]
        wt = graph.params[node.params["weight"]]
        bias = graph.params[node.params["bias"]]
        if wt.ndim != 4:
            raise ShapeError(f"layer '{node.id}': conv2d weight must be OIHW, got {wt.shape}")
        o, i, kh, kw = wt.shape
        if i != c:
            raise ShapeError(
                f"layer '{node.id}': input channels ({c}) != weight input channels ({i})"
            )
        if bias.shape != (o,):
            raise ShapeError(f"layer '{node.id}': bias shape {bias.shape} != ({o},)")
        _check_bn_width(node, o)
        sh, sw = _pair_attr(node, "stride", default=(1, 1))
        ph, pw = _pair_attr(node, "padding", default=(0, 0))
        if kh > h + 2 * ph or kw > w + 2 * pw:
            raise ShapeError(
                f"layer '{node.id}': kernel ({kh}x{kw}) larger than padded input "
                f"({h + 2 * ph}x{w + 2 * pw})"
            )
        return (n, o, (h + 2 * ph - kh) // sh + 1, (w + 2 * pw - kw) // sw + 1)
    if node.kind == "dense":
        if len(ins[0]) != 2:
            raise ShapeError(f"layer '{node.id}': dense expects rank-2 input, got {ins[0]}")
        wt = graph.params[node.params["weight"]]
        bias = graph.params[node.params["bias"]]
        if wt.ndim != 2:
            raise ShapeError(f"layer '{node.id}': dense weight must be rank 2, got {wt.shape}")
        o, f = wt.shape
        if f != ins[0][1]:
            raise ShapeError(
                f"layer '{node.id}': input features ({ins[0][1]}) != weight features ({f})"
            )
        if bias.shape != (o,):
            raise ShapeError(f"layer '{node.id}': bias shape {bias.shape} != ({o},)")
        _check_bn_width(node, o)
        return (ins[0][0], o)
    raise FormatError(f"layer '{node.id}': unknown kind '{node.kind}'")


def _check_bn_width(node: LayerNode, out_channels: int) -> None:
    if node.bn is None:
        return
    for name in ("gamma", "beta", "running_mean", "running_var"):
        arr = getattr(node.bn, name)
        if np.asarray(arr).shape != (out_channels,):
            raise ShapeError(
                f"layer '{node.id}': bn {name} shape {np.asarray(arr).shape} != ({out_channels},)"
            )


# ---------------------------------------------------------------------------
# execution
# ---------------------------------------------------------------------------


def linear_output(node: LayerNode, inputs: list, params: dict) -> np.ndarray:
    """Pre-activation output of a conv2d/dense node (op + bias + bn, no activation)."""
    if node.kind == "conv2d":
        out = T.conv2d(
            inputs[0],
            params[node.params["weight"]],
            params[node.params["bias"]],
            stride=_pair_attr(node, "stride", default=(1, 1)),
            padding=_pair_attr(node, "padding", default=(0, 0)),
        )
    elif node.kind == "dense":
        out = T.dense(inputs[0], params[node.params["weight"]], params[node.params["bias"]])
    else:
        raise GraphError(f"layer '{node.id}': kind '{node.kind}' has no linear output")
    if node.bn is not None:
        out = _apply_bn(out, node.bn)
    return out


def _apply_bn(x: np.ndarray, bn: BatchNorm) -> np.ndarray:
    scale = bn.gamma / np.sqrt(bn.running_var + np.float32(bn.epsilon))
    shift = bn.beta - bn.running_mean * scale
    shape = (1, -1) + (1,) * (x.ndim - 2)
    return x * scale.reshape(shape).astype(np.float32) + shift.reshape(shape).astype(np.float32)


def apply_node(node: LayerNode, inputs: list, params: dict) -> np.ndarray:
    """Compute one node's output (post-activation) from its input tensors."""
    k = node.kind
    if k in WEIGHTED_KINDS:
        out = linear_output(node, inputs, params)
    elif k == "maxpool":
        out = T.maxpool2d(
            inputs[0],
            _pair_attr(node, "window"),
            _pair_attr(node, "stride", default=node.attrs.get("window")),
        )
    elif k == "avgpool":
        out = T.avgpool2d(
            inputs[0],
            _pair_attr(node, "window"),
            _pair_attr(node, "stride", default=node.attrs.get("window")),
        )
    elif k == "global_avg_pool":
        out = T.global_avg_pool(inputs[0])
    elif k == "add":
        out = inputs[0]
        for other in inputs[1:]:
            out = T.add(out, other)
    elif k == "flatten":
        out = np.ascontiguousarray(inputs[0]).reshape(inputs[0].shape[0], -1)
    elif k == "output":
        out = inputs[0]
    else:
        raise GraphError(f"layer '{node.id}': cannot execute kind '{k}'")
    if node.activation == "relu":
        out = T.relu(out)
    return out


def forward(graph: NetworkGraph, x, tap=None) -> np.ndarray:
    """Execute the graph on input x (leading dim is the batch).

    `tap`, when given, is called as tap(node, inputs, output) after every
    node and may return a replacement output tensor (or None to keep the
    computed one). Replacements propagate to downstream layers; this is the
    hook used for single-layer and whole-network fake quantization.
    """
    x = T.as_tensor(x, "input")
    expected = tuple(graph.input_shape)
    if x.ndim != len(expected) or x.shape[1:] != expected[1:]:
        raise ShapeError(
            f"input shape {tuple(x.shape)} incompatible with graph input {expected} "
            "(batch dimension is free)"
        )
    values: dict[str, np.ndarray] = {}
    for node in graph.layers:
        ins = [values[i] for i in node.inputs]
        if node.kind == "input":
            out = x
        else:
            try:
                out = apply_node(node, ins, graph.params)
            except ShapeError as exc:
                raise ShapeError(f"layer '{node.id}': {exc}") from exc
        if tap is not None:
            sub = tap(node, ins, out)
            if sub is not None:
                out = np.asarray(sub, dtype=np.float32)
        values[node.id] = out
    return values[graph.output_id]


# ---------------------------------------------------------------------------
# batch norm folding
# ---------------------------------------------------------------------------


def fold_batch_norms(graph: NetworkGraph) -> NetworkGraph:
    """Absorb bn scale/shift into the preceding conv/dense weights and bias.

    W' = W * gamma / sqrt(var + eps) per output channel and
    b' = (b - mean) * gamma / sqrt(var + eps) + beta. Idempotent; forward
    outputs match the unfolded graph up to float32 rounding.
    """
    new_params = dict(graph.params)
    new_layers = []
    for node in graph.layers:
        if node.bn is None:
            new_layers.append(node)
            continue
        bn = node.bn
        var = bn.running_var.astype(np.float64) + float(bn.epsilon)
        if np.any(var <= 0):
            raise GraphError(f"layer '{node.id}': non-positive batch-norm variance")
        scale = bn.gamma.astype(np.float64) / np.sqrt(var)
        w = new_params[node.params["weight"]].astype(np.float64)
        b = new_params[node.params["bias"]].astype(np.float64)
        bshape = (-1,) + (1,) * (w.ndim - 1)
        new_params[node.params["weight"]] = (w * scale.reshape(bshape)).astype(np.float32)
        new_params[node.params["bias"]] = (
            (b - bn.running_mean.astype(np.float64)) * scale + bn.beta.astype(np.float64)
        ).astype(np.float32)
        new_layers.append(replace(node, bn=None))
    folded = NetworkGraph(new_layers, list(graph.input_shape), new_params)
    validate(folded)
    return folded


# ---------------------------------------------------------------------------
# disk format
# ---------------------------------------------------------------------------


def _model_paths(model_path) -> tuple[Path, Path]:
    p = Path(model_path)
    if p.is_dir() or p.suffix != ".json":
        return p / "model.json", p / "weights"
    return p, p.parent / "weights"


def _layer_to_doc(node: LayerNode) -> dict:
    doc = {
        "id": node.id,
        "kind": node.kind,
        "activation": node.activation,
        "attrs": {k: list(v) if isinstance(v, (tuple, list)) else v for k, v in node.attrs.items()},
        "inputs": list(node.inputs),
    }
    if node.params:
        doc["params"] = {k: f"{ref}.qt" for k, ref in node.params.items()}
    if node.bn is not None:
        doc["bn"] = {
            "gamma": [float(v) for v in node.bn.gamma],
            "beta": [float(v) for v in node.bn.beta],
            "running_mean": [float(v) for v in node.bn.running_mean],
            "running_var": [float(v) for v in node.bn.running_var],
            "epsilon": float(node.bn.epsilon),
        }
    return doc


def _model_doc(graph: NetworkGraph) -> dict:
    return {
        "version": MODEL_VERSION,
        "input_shape": [int(d) for d in graph.input_shape],
        "layers": [_layer_to_doc(n) for n in graph.layers],
    }


def network_id(graph: NetworkGraph) -> str:
    """Content-derived identifier covering structure and parameter bytes."""
    h = hashlib.sha256()
    h.update(json.dumps(_model_doc(graph), sort_keys=True).encode())
    for ref in sorted(graph.params):
        h.update(ref.encode())
        h.update(T.tensor_bytes(graph.params[ref]))
    return "net-" + h.hexdigest()[:12]


def save_model(graph: NetworkGraph, model_path) -> None:
    """Write model.json plus a weights/ directory of QTENSOR1 files."""
    validate(graph)
    json_path, weights_dir = _model_paths(model_path)
    json_path.parent.mkdir(parents=True, exist_ok=True)
    weights_dir.mkdir(parents=True, exist_ok=True)
    for ref, arr in graph.params.items():
        T.save_tensor(weights_dir / f"{ref}.qt", arr)
    json_path.write_text(json.dumps(_model_doc(graph), indent=2, sort_keys=True) + "\n")


def load_model(model_path) -> NetworkGraph:
    json_path, weights_dir = _model_paths(model_path)
    if not json_path.exists():
        raise FormatError(f"{json_path}: model file not found")
    try:
        doc = json.loads(json_path.read_text())
    except json.JSONDecodeError as exc:
        raise FormatError(f"{json_path}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict) or doc.get("version") != MODEL_VERSION:
        raise FormatError(f"{json_path}: unsupported model version {doc.get('version')!r}")
    try:
        input_shape = [int(d) for d in doc["input_shape"]]
        layer_docs = doc["layers"]
    except (KeyError, TypeError, ValueError) as exc:
        raise FormatError(f"{json_path}: malformed model document ({exc})") from exc

    layers = []
    params: dict[str, np.ndarray] = {}
    for ld in layer_docs:
        layer_id = ld.get("id")
        if not isinstance(layer_id, str) or not layer_id:
            raise FormatError(f"{json_path}: layer with missing or empty id")
        node_params = None
        if "params" in ld:
            node_params = {}
            for key, fname in ld["params"].items():
                ref = fname[:-3] if fname.endswith(".qt") else fname
                path = weights_dir / f"{ref}.qt"
                if not path.exists():
                    raise FormatError(f"layer '{layer_id}': missing parameter '{ref}'")
                params[ref] = T.load_tensor(path)
                node_params[key] = ref
        bn = None
        if "bn" in ld:
            bd = ld["bn"]
            try:
                bn = BatchNorm(
                    gamma=np.asarray(bd["gamma"], dtype=np.float32),
                    beta=np.asarray(bd["beta"], dtype=np.float32),
                    running_mean=np.asarray(bd["running_mean"], dtype=np.float32),
                    running_var=np.asarray(bd["running_var"], dtype=np.float32),
                    epsilon=float(bd["epsilon"]),
                )
            except (KeyError, TypeError, ValueError) as exc:
                raise FormatError(f"layer '{layer_id}': malformed bn block ({exc})") from exc
        layers.append(
            LayerNode(
                id=layer_id,
                kind=ld.get("kind", ""),
                activation=ld.get("activation", "none"),
                attrs=dict(ld.get("attrs", {})),
                params=node_params,
                bn=bn,
                inputs=list(ld.get("inputs", [])),
            )
        )
    graph = NetworkGraph(layers, input_shape, params)
    validate(graph)
    return graph
