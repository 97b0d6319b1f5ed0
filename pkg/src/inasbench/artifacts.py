"""Persistence: schema-checked JSON, per-layer CSV weights and a C weight header."""

from __future__ import annotations

import json
import re
from pathlib import Path

import jsonschema
import numpy as np

from .errors import ParameterError, ParseError, SchemaError
from .explorer import ArchConfig, SearchResult, SearchSpace, StageConfig
from .executor import LOOP_DIMS, LOOP_ORDERS, ExecutionDesign, TileConfig
from .intermittent import CostParams, FaultTrace, PowerParams, SimResult
from .model import (
    Conv2D,
    FullyConnected,
    LayerParams,
    MaxPool2D,
    NetworkSpec,
    QTensor,
    check_network,
    weight_shape,
)
from .perfmodel import PerfEstimate
from .scheduler import TaskSpec

# ---------------------------------------------------------------------------
# schemas

_NAT = {"type": "integer", "minimum": 0}
_POS = {"type": "integer", "minimum": 1}
_FRAC = {"type": "integer", "minimum": 0, "maximum": 15}


def _obj(props: dict, required=None) -> dict:
    return {
        "type": "object",
        "properties": props,
        "required": sorted(props) if required is None else required,
        "additionalProperties": False,
    }


QTENSOR_SCHEMA = _obj({
    "shape": {"type": "array", "items": _NAT},
    "frac_bits": _FRAC,
    "data": {"type": "array", "items": {"type": "integer", "minimum": -32768, "maximum": 32767}},
})

_WEIGHTED = {"weight": {"$ref": "#/$defs/qtensor"}, "bias": {"oneOf": [{"type": "null"}, {"$ref": "#/$defs/qtensor"}]}}

LAYER_SCHEMAS = {
    "conv2d": _obj({"kind": {"const": "conv2d"}, "c_in": _POS, "c_out": _POS, "kernel": _POS, "stride": _POS,
                    "padding": _NAT, **_WEIGHTED}, ["kind", "c_in", "c_out", "kernel", "weight"]),
    "maxpool2d": _obj({"kind": {"const": "maxpool2d"}, "window": _POS, "stride": _POS}),
    "fc": _obj({"kind": {"const": "fc"}, "n_in": _POS, "n_out": _POS, **_WEIGHTED}, ["kind", "n_in", "n_out", "weight"]),
}

NETWORK_SCHEMA = {
    **_obj({
        "input_shape": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
        "layers": {"type": "array", "items": {"$ref": "#/$defs/layer"}},
        "output_classes": _POS,
        "act_frac_bits": _FRAC,
    }, ["input_shape", "layers", "output_classes"]),
    "$defs": {
        "qtensor": QTENSOR_SCHEMA,
        # dispatch on "kind" so validation errors point inside the matching layer schema
        "layer": {
            "type": "object",
            "required": ["kind"],
            "properties": {"kind": {"enum": sorted(LAYER_SCHEMAS)}},
            "allOf": [
                {"if": {"properties": {"kind": {"const": k}}}, "then": s} for k, s in sorted(LAYER_SCHEMAS.items())
            ],
        },
    },
}

DESIGN_SCHEMA = _obj({
    "tiles": {"type": "array", "items": _obj({
        "t_cout": _POS, "t_h": _POS, "t_w": _POS,
        "loop_order": {"type": "array", "items": {"enum": list(LOOP_DIMS)}, "minItems": 3, "maxItems": 3,
                       "uniqueItems": True},
    })},
    "batch_size": _POS,
})

POWER_SCHEMA = _obj({"e_budget": _POS, "t_recharge": _NAT, "t_boot": _NAT}, ["e_budget"])

COSTS_SCHEMA = _obj({name: _NAT for name in ("e_mac", "t_mac", "e_nvm_rd", "t_nvm_rd", "e_nvm_wr", "t_nvm_wr")}
                    | {"vm_capacity": _POS}, [])

FAULTS_SCHEMA = _obj({"ticks": {"type": "array", "items": _NAT}})

TASKSET_SCHEMA = {
    **_obj({"tasks": {"type": "array", "items": _obj({
        "id": _NAT, "period": _POS, "deadline": _POS, "offset": _NAT,
        "net": {"$ref": "#/$defs/network"}, "design": {"$ref": "#/$defs/design"},
    }, ["id", "period", "deadline", "net", "design"])}}),
    "$defs": {"network": {k: v for k, v in NETWORK_SCHEMA.items() if k != "$defs"},
              "design": DESIGN_SCHEMA, **NETWORK_SCHEMA["$defs"]},
}

_COUNT = _NAT
ESTIMATE_SCHEMA = _obj({name: _COUNT for name in PerfEstimate.__dataclass_fields__})

SIM_RESULT_SCHEMA = {
    **_obj({
        "output": {"$ref": "#/$defs/qtensor"},
        "latency_ticks": _NAT, "cycles": _NAT,
        "per_cycle_energy": {"type": "array", "items": _NAT},
        "preservations": _NAT, "recoveries": _NAT, "lost_units": _NAT, "abrupt_faults": _NAT,
        "units_executed": _NAT,
        "resumes": {"type": "array", "items": {"type": "array", "items": _NAT, "minItems": 2, "maxItems": 2}},
        "nvm_image": {"type": "string", "pattern": "^([0-9a-f]{2})*$"},
    }),
    "$defs": {"qtensor": QTENSOR_SCHEMA},
}

SPACE_SCHEMA = _obj({
    "input_shape": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3},
    "output_classes": _POS,
    "stage_counts": {"type": "array", "items": _POS, "minItems": 1, "uniqueItems": True},
    "depths": {"type": "array", "items": {"enum": [1, 2]}, "minItems": 1, "uniqueItems": True},
    "channels": {"type": "array", "items": {"type": "integer", "minimum": 1, "maximum": 16}, "minItems": 1,
                 "uniqueItems": True},
    "kernels": {"type": "array", "items": {"enum": [1, 3, 5]}, "minItems": 1, "uniqueItems": True},
    "act_frac_bits": _FRAC,
    "weight_frac_bits": _FRAC,
    "weight_seed": _NAT,
}, ["input_shape", "output_classes"])

SOLUTION_SCHEMA = {
    **_obj({
        "arch": {"type": "array", "items": {"type": "array", "items": _POS, "minItems": 3, "maxItems": 3}},
        "accuracy": {"type": "number"},
        "reward": {"type": "number"},
        "net": {"$ref": "#/$defs/network"},
        "design": {"$ref": "#/$defs/design"},
        "estimate": ESTIMATE_SCHEMA,
        "history": {"type": "array", "items": {"type": "object"}},
    }, ["net", "design"]),
    "$defs": TASKSET_SCHEMA["$defs"],
}

SCHEMAS = {
    "tensor": {**QTENSOR_SCHEMA, "required": ["shape", "frac_bits", "data"]},
    "space": SPACE_SCHEMA,
    "solution": SOLUTION_SCHEMA,
    "network": NETWORK_SCHEMA,
    "design": DESIGN_SCHEMA,
    "power": POWER_SCHEMA,
    "costs": COSTS_SCHEMA,
    "faults": FAULTS_SCHEMA,
    "taskset": TASKSET_SCHEMA,
    "estimate": ESTIMATE_SCHEMA,
    "sim_result": SIM_RESULT_SCHEMA,
}


def _json_path(error) -> str:
    path = "$"
    for part in error.absolute_path:
        path += f"[{part}]" if isinstance(part, int) else f".{part}"
    return path


def validate(kind: str, doc) -> None:
    """Raise SchemaError naming the JSON path of the first violation."""
    if kind not in SCHEMAS:
        raise SchemaError("$", f"unknown document kind {kind!r}")
    validator = jsonschema.Draft202012Validator(SCHEMAS[kind])
    errors = sorted(validator.iter_errors(doc), key=lambda e: (len(list(e.absolute_path)), list(map(str, e.absolute_path))))
    if errors:
        best = jsonschema.exceptions.best_match(errors)
        raise SchemaError(_json_path(best), best.message)


# ---------------------------------------------------------------------------
# object <-> document


def _qt_doc(t: QTensor) -> dict:
    return {"shape": list(t.shape), "frac_bits": t.frac_bits, "data": [int(v) for v in t.data]}


def _qt(doc, path) -> QTensor:
    try:
        return QTensor(tuple(doc["shape"]), np.asarray(doc["data"], dtype=np.int64), doc["frac_bits"])
    except ValueError as exc:
        raise SchemaError(path, str(exc)) from exc


def _layer_doc(layer, params) -> dict:
    if isinstance(layer, Conv2D):
        doc = {"kind": "conv2d", "c_in": layer.c_in, "c_out": layer.c_out, "kernel": layer.kernel,
               "stride": layer.stride, "padding": layer.padding}
    elif isinstance(layer, MaxPool2D):
        return {"kind": "maxpool2d", "window": layer.window, "stride": layer.stride}
    else:
        doc = {"kind": "fc", "n_in": layer.n_in, "n_out": layer.n_out}
    doc["weight"] = _qt_doc(params.weight)
    doc["bias"] = None if params.bias is None else _qt_doc(params.bias)
    return doc


def network_to_doc(net: NetworkSpec) -> dict:
    return {
        "input_shape": list(net.input_shape),
        "act_frac_bits": net.act_frac_bits,
        "output_classes": net.output_classes,
        "layers": [_layer_doc(l, p) for l, p in zip(net.layers, net.params)],
    }


def network_from_doc(doc, path="$") -> NetworkSpec:
    layers, params = [], []
    for i, ld in enumerate(doc["layers"]):
        lp = f"{path}.layers[{i}]"
        if ld["kind"] == "maxpool2d":
            layers.append(MaxPool2D(ld["window"], ld["stride"]))
            params.append(None)
            continue
        if ld["kind"] == "conv2d":
            layers.append(Conv2D(ld["c_in"], ld["c_out"], ld["kernel"], ld.get("stride", 1), ld.get("padding", 0)))
        else:
            layers.append(FullyConnected(ld["n_in"], ld["n_out"]))
        bias = ld.get("bias")
        params.append(LayerParams(_qt(ld["weight"], lp + ".weight"),
                                  None if bias is None else _qt(bias, lp + ".bias")))
    return NetworkSpec(tuple(doc["input_shape"]), tuple(layers), tuple(params), doc["output_classes"],
                       doc.get("act_frac_bits", 8))


def design_to_doc(design: ExecutionDesign) -> dict:
    return {"tiles": [{"t_cout": t.t_cout, "t_h": t.t_h, "t_w": t.t_w, "loop_order": list(t.loop_order)}
                      for t in design.tiles],
            "batch_size": design.batch_size}


def design_from_doc(doc, path="$") -> ExecutionDesign:
    return ExecutionDesign(tuple(TileConfig(t["t_cout"], t["t_h"], t["t_w"], tuple(t["loop_order"]))
                                 for t in doc["tiles"]), doc["batch_size"])


def _dataclass_doc(obj) -> dict:
    return {name: getattr(obj, name) for name in type(obj).__dataclass_fields__}


def task_to_doc(task: TaskSpec) -> dict:
    return {"id": task.id, "period": task.period, "deadline": task.deadline, "offset": task.offset,
            "net": network_to_doc(task.net), "design": design_to_doc(task.design)}


def sim_result_to_doc(r: SimResult) -> dict:
    doc = {name: getattr(r, name) for name in type(r).__dataclass_fields__}
    doc["output"] = _qt_doc(r.output)
    doc["per_cycle_energy"] = list(r.per_cycle_energy)
    doc["nvm_image"] = bytes(r.nvm_image).hex()
    return doc


def sim_result_from_doc(doc, path="$") -> SimResult:
    fields = dict(doc)
    fields["output"] = _qt(doc["output"], path + ".output")
    fields["nvm_image"] = bytes.fromhex(doc["nvm_image"])
    return SimResult(**fields)


def space_to_doc(space: SearchSpace) -> dict:
    return {name: list(v) if isinstance(v, tuple) else v for name, v in _dataclass_doc(space).items()}


def solution_to_doc(result: SearchResult) -> dict:
    """The feasible outcome of a search: architecture, child net, design and scores."""
    return {
        "arch": [[s.depth, s.channels, s.kernel] for s in result.arch.stages],
        "accuracy": result.accuracy,
        "reward": result.reward,
        "net": network_to_doc(result.net),
        "design": design_to_doc(result.design),
        "estimate": _dataclass_doc(result.estimate),
        "history": result.history,
    }


def solution_from_doc(doc, path="$") -> dict:
    """{"net", "design", ...}: a dict since the search history stays plain JSON."""
    out = dict(doc)
    out["net"] = network_from_doc(doc["net"], path + ".net")
    out["design"] = design_from_doc(doc["design"])
    if "estimate" in doc:
        out["estimate"] = PerfEstimate(**doc["estimate"])
    if "arch" in doc:
        out["arch"] = ArchConfig(tuple(StageConfig(*s) for s in doc["arch"]))
    return out


_WRITERS = {
    QTensor: ("tensor", _qt_doc),
    SearchSpace: ("space", space_to_doc),
    SearchResult: ("solution", solution_to_doc),
    NetworkSpec: ("network", network_to_doc),
    ExecutionDesign: ("design", design_to_doc),
    PowerParams: ("power", _dataclass_doc),
    CostParams: ("costs", _dataclass_doc),
    FaultTrace: ("faults", lambda f: {"ticks": list(f.ticks)}),
    PerfEstimate: ("estimate", _dataclass_doc),
    SimResult: ("sim_result", sim_result_to_doc),
}

_READERS = {
    "tensor": _qt,
    "space": lambda d, p: SearchSpace(**d),
    "solution": solution_from_doc,
    "network": network_from_doc,
    "design": design_from_doc,
    "power": lambda d, p: PowerParams(**d),
    "costs": lambda d, p: CostParams(**d),
    "faults": lambda d, p: FaultTrace(tuple(d["ticks"])),
    "taskset": lambda d, p: [TaskSpec(t["id"], network_from_doc(t["net"], f"{p}.tasks[{i}].net"),
                                      design_from_doc(t["design"]), t["period"], t["deadline"], t.get("offset", 0))
                             for i, t in enumerate(d["tasks"])],
    "estimate": lambda d, p: PerfEstimate(**d),
    "sim_result": sim_result_from_doc,
}


def to_doc(obj):
    """(kind, JSON-ready document) for any persistable object; a list of tasks is a taskset."""
    if isinstance(obj, SearchResult) and not obj.feasible:
        raise ParameterError("an infeasible search result has no solution to save")
    if isinstance(obj, (list, tuple)) and all(isinstance(t, TaskSpec) for t in obj):
        return "taskset", {"tasks": [task_to_doc(t) for t in obj]}
    if type(obj) not in _WRITERS:
        raise TypeError(f"cannot serialise {type(obj).__name__}")
    kind, fn = _WRITERS[type(obj)]
    return kind, fn(obj)


def from_doc(kind: str, doc):
    validate(kind, doc)
    try:
        return _READERS[kind](doc, "$")
    except SchemaError:
        raise
    except (ValueError, TypeError) as exc:
        raise SchemaError("$", str(exc)) from exc


def dumps(obj) -> str:
    return json.dumps(to_doc(obj)[1], indent=2, sort_keys=True) + "\n"


def save_json(obj, path) -> None:
    Path(path).write_text(dumps(obj), encoding="utf-8")


def load_json(path, kind: str):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SchemaError("$", f"{path}: invalid JSON at line {exc.lineno}: {exc.msg}") from exc
    return from_doc(kind, doc)


# ---------------------------------------------------------------------------
# CSV weights

_SHAPE_RE = re.compile(r"^# shape: (\d+),(\d+),(\d+),(\d+),(\d+)$")
_BIAS_SHAPE_RE = re.compile(r"^# shape: (\d+),(\d+)$")
_LAYER_FILE = re.compile(r"^layer_(\d+)\.csv$")


def _write_rows(path: Path, header: str, rows) -> None:
    lines = [header] + [",".join(str(int(v)) for v in row) for row in rows]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8")


def dump_csv(net: NetworkSpec, directory) -> list:
    """One ``layer_<i>.csv`` per weighted layer (plus ``layer_<i>_bias.csv``); returns the paths written."""
    check_network(net)
    out = Path(directory)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for i, p in enumerate(net.params):
        if p is None:
            continue
        w = p.weight.array()
        w4 = w.reshape(w.shape[0], w.shape[1], 1, 1) if w.ndim == 2 else w
        c_out, c_in, kh, kw = w4.shape
        path = out / f"layer_{i}.csv"
        _write_rows(path, f"# shape: {c_out},{c_in},{kh},{kw},{p.weight.frac_bits}", w4.reshape(c_out, -1))
        written.append(path)
        if p.bias is not None:
            bpath = out / f"layer_{i}_bias.csv"
            _write_rows(bpath, f"# shape: {c_out},{p.bias.frac_bits}", p.bias.data.reshape(-1, 1))
            written.append(bpath)
    return written


def _read_matrix(path: Path, pattern, width_of):
    lines = path.read_text(encoding="utf-8").splitlines()
    if not lines:
        raise ParseError(path, 1, "empty file")
    m = pattern.match(lines[0].strip())
    if not m:
        raise ParseError(path, 1, f"malformed shape line {lines[0]!r}")
    dims = tuple(int(g) for g in m.groups())
    rows_expected, width = dims[0], width_of(dims)
    rows = []
    for n, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cells = line.split(",")
        if len(cells) != width:
            raise ParseError(path, n, f"row has {len(cells)} values, expected {width}")
        row = []
        for cell in cells:
            try:
                v = int(cell.strip(), 10)
            except ValueError:
                raise ParseError(path, n, f"non-integer cell {cell.strip()!r}") from None
            if not -32768 <= v <= 32767:
                raise ParseError(path, n, f"value {v} outside int16")
            row.append(v)
        rows.append(row)
    if len(rows) != rows_expected:
        raise ParseError(path, len(lines), f"shape line declares {rows_expected} rows, found {len(rows)}")
    return dims, np.array(rows, dtype=np.int64).reshape(rows_expected, width)


def load_csv(directory) -> dict:
    """{layer index: LayerParams}; conv and FC weights both come back as (c_out, c_in, kh, kw)."""
    d = Path(directory)
    files = sorted((int(m.group(1)), p) for p in d.iterdir() if (m := _LAYER_FILE.match(p.name))) if d.is_dir() else []
    if not files:
        raise ParseError(d, 0, "no layer files")
    out = {}
    for i, path in files:
        (c_out, c_in, kh, kw, frac), mat = _read_matrix(path, _SHAPE_RE, lambda s: s[1] * s[2] * s[3])
        if frac > 15:
            raise ParseError(path, 1, f"frac_bits {frac} outside [0, 15]")
        weight = QTensor.from_array(mat.reshape(c_out, c_in, kh, kw), frac)
        bias = None
        bpath = d / f"layer_{i}_bias.csv"
        if bpath.exists():
            (n, bfrac), bmat = _read_matrix(bpath, _BIAS_SHAPE_RE, lambda s: 1)
            if n != c_out:
                raise ParseError(bpath, 1, f"bias length {n} != c_out {c_out}")
            if bfrac > 15:
                raise ParseError(bpath, 1, f"frac_bits {bfrac} outside [0, 15]")
            bias = QTensor.from_array(bmat.reshape(-1), bfrac)
        out[i] = LayerParams(weight, bias)
    return out


def with_weights(net: NetworkSpec, weights: dict) -> NetworkSpec:
    """``net`` with its parameters replaced by loaded CSV weights (reshaped to each layer's layout)."""
    params = []
    for i, layer in enumerate(net.layers):
        shape = weight_shape(layer)
        if shape is None:
            if i in weights:
                raise ParseError(f"layer_{i}.csv", 1, "pooling layer cannot carry weights")
            params.append(None)
            continue
        if i not in weights:
            raise ParseError(f"layer_{i}.csv", 0, "missing weight file")
        w = weights[i].weight
        if int(np.prod(w.shape)) != int(np.prod(shape)):
            raise ParseError(f"layer_{i}.csv", 1, f"shape {w.shape} does not fit layer weights {shape}")
        params.append(LayerParams(QTensor(shape, w.data, w.frac_bits), weights[i].bias))
    out = NetworkSpec(net.input_shape, net.layers, tuple(params), net.output_classes, net.act_frac_bits)
    check_network(out)
    return out


# ---------------------------------------------------------------------------
# C header

HEADER_GUARD = "INASBENCH_WEIGHTS_H"
_KIND_MACRO = {Conv2D: "LAYER_CONV2D", MaxPool2D: "LAYER_MAXPOOL2D", FullyConnected: "LAYER_FC"}
_PER_LINE = 12


def _loop_macro(order) -> str:
    return "LOOP_" + "_".join(order)


def _array(name: str, values, ctype="int16_t") -> list:
    vals = [str(int(v)) for v in values]
    lines = [f"static const {ctype} {name}[{len(vals)}] = {{"]
    for k in range(0, len(vals), _PER_LINE):
        lines.append("    " + ", ".join(vals[k:k + _PER_LINE]) + ",")
    lines.append("};")
    return lines


def dump_header(net: NetworkSpec, design: ExecutionDesign) -> str:
    """Weights, per-layer structure macros and the execution design as one C header."""
    from .executor import validate_design

    check_network(net)
    validate_design(net, design)
    shapes = net.shapes()
    c, h, w = net.input_shape
    lines = [
        "/* Generated weight header. Do not edit. */",
        f"#ifndef {HEADER_GUARD}",
        f"#define {HEADER_GUARD}",
        "",
        "#include <stdint.h>",
        "",
        "#define LAYER_CONV2D 0",
        "#define LAYER_MAXPOOL2D 1",
        "#define LAYER_FC 2",
    ]
    lines += [f"#define {_loop_macro(o)} {k}" for k, o in enumerate(LOOP_ORDERS)]
    lines += [
        "",
        f"#define NET_INPUT_C {c}",
        f"#define NET_INPUT_H {h}",
        f"#define NET_INPUT_W {w}",
        f"#define NET_ACT_FRAC_BITS {net.act_frac_bits}",
        f"#define NET_OUTPUT_CLASSES {net.output_classes}",
        f"#define NET_NUM_LAYERS {len(net.layers)}",
    ]
    for i, (layer, params, (ins, outs)) in enumerate(zip(net.layers, net.params, shapes)):
        p = f"L{i}_"
        if isinstance(layer, Conv2D):
            k, s, pad = layer.kernel, layer.stride, layer.padding
        elif isinstance(layer, MaxPool2D):
            k, s, pad = layer.window, layer.stride, 0
        else:
            k, s, pad = 1, 1, 0
        lines += ["", f"/* layer {i}: {layer.kind} */", f"#define {p}KIND {_KIND_MACRO[type(layer)]}"]
        lines += [f"#define {p}IN_{d} {v}" for d, v in zip("CHW", ins)]
        lines += [f"#define {p}OUT_{d} {v}" for d, v in zip("CHW", outs)]
        lines += [f"#define {p}K {k}", f"#define {p}S {s}", f"#define {p}P {pad}"]
        if params is None:
            lines.append(f"#define {p}FRAC_BITS {net.act_frac_bits}")
            lines.append(f"#define {p}N_WEIGHTS 0")
            continue
        lines.append(f"#define {p}FRAC_BITS {params.weight.frac_bits}")
        lines.append(f"#define {p}N_WEIGHTS {params.weight.data.size}")
        lines += _array(f"l{i}_w", params.weight.data)
        if params.bias is not None:
            lines.append(f"#define {p}BIAS_FRAC_BITS {params.bias.frac_bits}")
            lines += _array(f"l{i}_b", params.bias.data)
    lines += [
        "",
        "/* execution design: t_cout, t_h, t_w, loop order per layer */",
        f"#define DESIGN_BATCH_SIZE {design.batch_size}",
        "static const uint16_t design_tiles[NET_NUM_LAYERS][4] = {",
    ]
    lines += [f"    {{{t.t_cout}, {t.t_h}, {t.t_w}, {_loop_macro(t.loop_order)}}}," for t in design.tiles]
    lines += ["};", "", f"#endif /* {HEADER_GUARD} */"]
    return "\n".join(lines) + "\n"
