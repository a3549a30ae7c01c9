"""Export a Keras application backbone to the mpox-screen graph format.

Writes ``<out>/graph.json`` (topology + parameter shapes, Keras layouts) and,
unless ``--topology-only`` is given, ``<out>/weights.bin`` holding every
parameter as little-endian f32 in node order.

    python export_backbone.py MobileNetV3Small out/mnv3s --weights imagenet
    python export_backbone.py VGG16 out/vgg --topology-only

``--weights pattern`` fills parameters with the deterministic sine pattern the
Rust test-suite regenerates, and ``--reference`` additionally records the
backbone output for the pattern input so the two engines can be compared.
"""

import argparse
import json
import math
import os
import sys

os.environ.setdefault("TF_CPP_MIN_LOG_LEVEL", "3")

import numpy as np  # noqa: E402
import keras  # noqa: E402

FORMAT = "mpox-screen-graph/1"

BACKBONES = {
    "VGG16": (keras.applications.VGG16, 224),
    "InceptionResNetV2": (keras.applications.InceptionResNetV2, 299),
    "NASNetMobile": (keras.applications.NASNetMobile, 224),
    "MobileNetV3Small": (keras.applications.MobileNetV3Small, 224),
    "MobileNetV3Large": (keras.applications.MobileNetV3Large, 224),
}

ACTIVATIONS = {
    "linear": "linear",
    "relu": "relu",
    "hard_silu": "hard_swish",
    "hard_swish": "hard_swish",
    "hard_sigmoid": "hard_sigmoid",
    "sigmoid": "sigmoid",
    "silu": "swish",
    "swish": "swish",
    "tanh": "tanh",
}


def _activation(name):
    if name not in ACTIVATIONS:
        raise SystemExit(f"unsupported activation {name!r}")
    return ACTIVATIONS[name]


def _inputs(op):
    node = op._inbound_nodes[0]
    return [t._keras_history.operation.name for t in node.input_tensors]


def _pair(v):
    return [int(v[0]), int(v[1])]


def _pads(p):
    (t, b), (l, r) = p
    return {"top": int(t), "bottom": int(b), "left": int(l), "right": int(r)}


def convert(model):
    """Returns (nodes, weights) with weights aligned to the params lists."""
    nodes, weights = [], []
    for op in model.operations:
        kind = type(op).__name__
        module = type(op).__module__
        name = op.name
        ins = _inputs(op)
        is_layer = isinstance(op, keras.layers.Layer)
        cfg = op.get_config() if is_layer else {}
        w = op.get_weights() if is_layer else []

        def emit(node, params=()):
            node["params"] = [[pname, list(arr.shape)] for pname, arr in params]
            nodes.append(node)
            weights.extend(arr for _, arr in params)

        if kind == "InputLayer":
            shape = cfg["batch_shape"][1:]
            emit({"name": name, "op": "input", "inputs": [], "height": shape[0],
                  "width": shape[1], "channels": shape[2]})
        elif kind == "Rescaling":
            emit({"name": name, "op": "rescaling", "inputs": ins,
                  "scale": float(cfg["scale"]), "offset": float(cfg["offset"])})
        elif kind == "Conv2D":
            assert cfg["groups"] == 1
            params = [("kernel", w[0])] + ([("bias", w[1])] if cfg["use_bias"] else [])
            emit({"name": name, "op": "conv2d", "inputs": ins,
                  "kernel": _pair(cfg["kernel_size"]), "strides": _pair(cfg["strides"]),
                  "padding": cfg["padding"], "dilation": _pair(cfg["dilation_rate"]),
                  "filters": int(cfg["filters"]), "use_bias": bool(cfg["use_bias"]),
                  "activation": _activation(cfg["activation"])}, params)
        elif kind == "DepthwiseConv2D":
            params = [("depthwise_kernel", w[0])] + ([("bias", w[1])] if cfg["use_bias"] else [])
            emit({"name": name, "op": "depthwise_conv2d", "inputs": ins,
                  "kernel": _pair(cfg["kernel_size"]), "strides": _pair(cfg["strides"]),
                  "padding": cfg["padding"], "dilation": _pair(cfg["dilation_rate"]),
                  "multiplier": int(cfg["depth_multiplier"]), "use_bias": bool(cfg["use_bias"]),
                  "activation": _activation(cfg["activation"])}, params)
        elif kind == "SeparableConv2D":
            dw = name + "/depthwise"
            emit({"name": dw, "op": "depthwise_conv2d", "inputs": ins,
                  "kernel": _pair(cfg["kernel_size"]), "strides": _pair(cfg["strides"]),
                  "padding": cfg["padding"], "dilation": _pair(cfg["dilation_rate"]),
                  "multiplier": int(cfg["depth_multiplier"]), "use_bias": False,
                  "activation": "linear"}, [("depthwise_kernel", w[0])])
            params = [("kernel", w[1])] + ([("bias", w[2])] if cfg["use_bias"] else [])
            emit({"name": name, "op": "conv2d", "inputs": [dw], "kernel": [1, 1],
                  "strides": [1, 1], "padding": "valid", "dilation": [1, 1],
                  "filters": int(cfg["filters"]), "use_bias": bool(cfg["use_bias"]),
                  "activation": _activation(cfg["activation"])}, params)
        elif kind == "BatchNormalization":
            assert cfg["axis"] in (-1, 3, [3], [-1]), cfg["axis"]
            names = (["gamma"] if cfg["scale"] else []) + (["beta"] if cfg["center"] else [])
            names += ["moving_mean", "moving_variance"]
            emit({"name": name, "op": "batch_norm", "inputs": ins,
                  "epsilon": float(cfg["epsilon"]), "center": bool(cfg["center"]),
                  "scale": bool(cfg["scale"])}, list(zip(names, w)))
        elif kind == "Activation":
            emit({"name": name, "op": "activation", "inputs": ins,
                  "kind": _activation(cfg["activation"])})
        elif kind == "ReLU":
            mv = cfg["max_value"]
            emit({"name": name, "op": "relu", "inputs": ins,
                  "max_value": None if mv is None else float(mv),
                  "negative_slope": float(cfg["negative_slope"]),
                  "threshold": float(cfg["threshold"])})
        elif kind == "ZeroPadding2D":
            emit({"name": name, "op": "zero_pad", "inputs": ins, **_pads(cfg["padding"])})
        elif kind == "Cropping2D":
            emit({"name": name, "op": "crop", "inputs": ins, **_pads(cfg["cropping"])})
        elif kind in ("MaxPooling2D", "AveragePooling2D"):
            emit({"name": name, "op": "max_pool" if kind.startswith("Max") else "avg_pool",
                  "inputs": ins, "pool": _pair(cfg["pool_size"]),
                  "strides": _pair(cfg["strides"]), "padding": cfg["padding"]})
        elif kind == "GlobalAveragePooling2D":
            emit({"name": name, "op": "global_avg_pool", "inputs": ins,
                  "keepdims": bool(cfg.get("keepdims", False))})
        elif kind == "Add" and is_layer:
            emit({"name": name, "op": "add", "inputs": ins})
        elif kind == "Multiply" and is_layer:
            emit({"name": name, "op": "multiply", "inputs": ins})
        elif kind in ("Add", "Multiply"):
            args = op._inbound_nodes[0].arguments.args
            consts = [a for a in args if isinstance(a, (int, float))]
            assert len(ins) == 1 and len(consts) == 1, (name, args)
            emit({"name": name, "op": "add_scalar" if kind == "Add" else "mul_scalar",
                  "inputs": ins, "value": float(consts[0])})
        elif kind == "Concatenate":
            assert cfg["axis"] in (-1, 3), cfg["axis"]
            emit({"name": name, "op": "concat", "inputs": ins})
        elif kind == "CustomScaleLayer":
            emit({"name": name, "op": "scale_sum", "inputs": ins, "scale": float(cfg["scale"])})
        else:
            raise SystemExit(f"unsupported operation {kind} ({module}) at {name}")
    return nodes, weights


def pattern_param(tensor_index, pname, shape):
    """Deterministic parameter values shared with the Rust test-suite."""
    n = int(np.prod(shape))
    j = np.arange(n, dtype=np.float64)
    s = np.sin(0.7 * j + 0.3 * tensor_index + 0.1)
    if pname in ("kernel", "depthwise_kernel"):
        fan_in = int(np.prod(shape[:-1])) if pname == "kernel" else int(shape[0] * shape[1])
        v = s * (2.0 / math.sqrt(fan_in))
    elif pname == "gamma":
        v = 1.0 + 0.1 * s
    elif pname == "moving_variance":
        v = 1.0 + 0.1 * (s + 1.0)
    else:
        v = 0.05 * s
    return v.astype(np.float32).reshape(shape)


def pattern_input(h, w, c):
    idx = np.arange(h * w * c, dtype=np.float64)
    return (np.sin(0.013 * idx) * np.cos(0.0071 * idx + 0.5)).astype(np.float32).reshape(h, w, c)


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("backbone", choices=sorted(BACKBONES))
    ap.add_argument("out")
    ap.add_argument("--size", type=int, default=None, help="square input size")
    ap.add_argument("--weights", choices=["imagenet", "random", "pattern"], default="imagenet")
    ap.add_argument("--topology-only", action="store_true")
    ap.add_argument("--reference", action="store_true",
                    help="with --weights pattern: also write reference.json")
    args = ap.parse_args(argv)

    ctor, default_size = BACKBONES[args.backbone]
    size = args.size or default_size
    kw = {"weights": None} if args.weights != "imagenet" else {"weights": "imagenet"}
    model = ctor(include_top=False, input_shape=(size, size, 3), **kw)
    nodes, weights = convert(model)

    if args.weights == "pattern":
        t = 0
        for node in nodes:
            for pname, shape in node["params"]:
                weights[t] = pattern_param(t, pname, shape)
                t += 1
        assign = iter(weights)
        for op in model.operations:
            if not isinstance(op, keras.layers.Layer) or not op.get_weights():
                continue
            op.set_weights([next(assign) for _ in op.get_weights()])

    os.makedirs(args.out, exist_ok=True)
    graph = {
        "format": FORMAT,
        "name": args.backbone,
        "output": nodes[-1]["name"],
        "nodes": nodes,
    }
    with open(os.path.join(args.out, "graph.json"), "w") as f:
        json.dump(graph, f, separators=(",", ":"))
    if not args.topology_only:
        with open(os.path.join(args.out, "weights.bin"), "wb") as f:
            for arr in weights:
                f.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    if args.reference:
        x = pattern_input(size, size, 3)
        y = model.predict(x[None], verbose=0)[0]
        with open(os.path.join(args.out, "reference.json"), "w") as f:
            json.dump({"backbone": args.backbone, "input": [size, size, 3],
                       "output_shape": list(y.shape),
                       "output": [float(v) for v in y.reshape(-1)]}, f)
    print(f"{args.backbone}: {len(nodes)} nodes, {sum(a.size for a in weights)} parameters",
          file=sys.stderr)


if __name__ == "__main__":
    main()
