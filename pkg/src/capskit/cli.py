"""Command-line entry point: prune, infer, latency, compare-pruners.

Reports are line-oriented `key=value` pairs on stdout. Exit codes: 0 on
success, 1 for compute-contract violations, 2 for input/format problems.
"""

from __future__ import annotations

import argparse
import math
import sys

import numpy as np

from .accel import CostTable, PEArraySpec, inference_cycles, routing_cycle_report, throughput_estimate
from .capsnet import CapsNetModel, CapsNetSpec, random_model
from .errors import CapskitError, InputError, ShapeError
from .fxp import FxFormat, FxTensor
from .io import (
    MaskEntry,
    RunConfig,
    load_idx,
    load_mask,
    load_weights,
    parse_config,
    save_mask,
    save_weights,
)
from .pruning import (
    LayerStack,
    NetTopology,
    compact_capsnet_weights,
    compression_report,
    kp_prune,
    lakp_prune,
    propagate_dead_structures,
)
from .tensor import ConvLayerWeights, count_mac_ops

CONV_LAYERS = ("conv1", "primary_caps")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="capskit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    pr = sub.add_parser("prune", help="prune a weight container and write mask/index tables")
    pr.add_argument("weights", help="input weight container")
    pr.add_argument("--out", required=True, help="pruned weight container to write")
    pr.add_argument("--mask-out", required=True, help="mask/index file to write")
    pr.add_argument("--config", help="run configuration file")
    pr.add_argument("--pruner", choices=("lakp", "kp"), default="lakp")

    inf = sub.add_parser("infer", help="classify images, printing one line per image")
    inf.add_argument("--weights", help="weight container")
    inf.add_argument("--random-weights", action="store_true",
                     help="use seeded uniform [-0.1, 0.1] weights instead of a container")
    inf.add_argument("--seed", type=int, default=0)
    inf.add_argument("--mask", help="mask file from `prune`")
    inf.add_argument("--images", help="IDX image file")
    inf.add_argument("--random-images", type=int, metavar="N",
                     help="use N seeded random images instead of a file")
    inf.add_argument("--labels", help="IDX label file; adds an accuracy line")
    inf.add_argument("--mode", choices=("reference", "optimized", "both"), default=None)
    inf.add_argument("--arith", choices=("real", "fx16"), default="real")
    inf.add_argument("--config", help="run configuration file")
    inf.add_argument("--fact", type=int, default=None, help="agreement PE batch size")
    inf.add_argument("--limit", type=int, default=None, help="classify only the first N images")

    lat = sub.add_parser("latency", help="print the routing cycle report and FPS estimate")
    lat.add_argument("--weights", help="weight container (defaults to the unpruned spec)")
    lat.add_argument("--mask", help="mask file from `prune`")
    lat.add_argument("--config", help="run configuration file")
    lat.add_argument("--image-hw", type=int, default=28)

    cmp_ = sub.add_parser("compare-pruners", help="LAKP vs KP structural sweep")
    cmp_.add_argument("weights", help="weight container")
    cmp_.add_argument("--sparsities", default="0.25,0.5,0.75",
                      help="comma-separated sparsity points")
    cmp_.add_argument("--config", help="run configuration file")
    return p


def _load_config(path) -> RunConfig:
    return parse_config(path) if path else RunConfig()


def _conv_layer(tensors, name, stride) -> ConvLayerWeights:
    try:
        kern = tensors[f"{name}.weight"]
    except KeyError:
        raise InputError(f"container is missing tensor {name}.weight")
    bias = tensors.get(f"{name}.bias")
    try:
        return ConvLayerWeights(kern, bias, stride)
    except ShapeError as exc:
        # malformed shapes inside a parseable container are an input problem
        raise InputError(f"tensor {name}: {exc}") from None


def _as_real(t):
    return t.to_real() if isinstance(t, FxTensor) else np.asarray(t, dtype=np.float64)


def _spec_from_shapes(primary_out: int, routing_shape, routing_iters: int) -> CapsNetSpec:
    if len(routing_shape) != 4:
        raise InputError(f"digit_caps.weight must be 4-D, got shape {tuple(routing_shape)}")
    in_caps, out_caps, out_dim, caps_dim = routing_shape
    types = primary_out // caps_dim
    if types == 0 or in_caps % types != 0:
        raise InputError(
            f"routing rows {in_caps} inconsistent with {types} capsule types"
        )
    grid_size = in_caps // types
    g = math.isqrt(grid_size)
    grid = (g, g) if g * g == grid_size else (grid_size, 1)
    return CapsNetSpec(
        capsule_types=types,
        caps_dim=caps_dim,
        grid=grid,
        digit_caps=out_caps,
        digit_dim=out_dim,
        routing_iters=routing_iters,
    )


def _masks_by_name(path):
    if not path:
        return {}
    return {e.name: e for e in load_mask(path)}


def _model_from_args(args, cfg) -> CapsNetModel:
    if args.random_weights:
        return random_model(args.seed, routing_iters=cfg.routing_iters)
    if not args.weights:
        raise InputError("provide --weights or --random-weights")
    tensors = load_weights(args.weights)
    conv1 = _conv_layer(tensors, "conv1", stride=1)
    primary = _conv_layer(tensors, "primary_caps", stride=2)
    if "digit_caps.weight" not in tensors:
        raise InputError("container is missing tensor digit_caps.weight")
    routing = tensors["digit_caps.weight"]
    spec = _spec_from_shapes(primary.out_channels, routing.shape, cfg.routing_iters)

    masks = _masks_by_name(args.mask)
    conv1_mask = primary_mask = None
    if "conv1" in masks:
        conv1_mask = masks["conv1"].bits.reshape(conv1.out_channels, conv1.in_channels)
    if "primary_caps" in masks:
        primary_mask = masks["primary_caps"].bits.reshape(
            primary.out_channels, primary.in_channels
        )
    capsule_ids = masks["capsules"].indices if "capsules" in masks else None

    model = CapsNetModel(
        conv1=ConvLayerWeights(_as_real(conv1.kernels),
                               None if conv1.bias is None else _as_real(conv1.bias), 1),
        primary_conv=ConvLayerWeights(_as_real(primary.kernels),
                                      None if primary.bias is None else _as_real(primary.bias), 2),
        routing_w=_as_real(routing),
        spec=spec,
        conv1_mask=conv1_mask,
        primary_mask=primary_mask,
        capsule_ids=capsule_ids,
    )
    return model


def _images_from_args(args, model, act_fmt):
    if args.random_images is not None:
        rng = np.random.default_rng(args.seed)
        k = model.conv1.kernel_size
        hw = 28 if k == 9 else 2 * k + 4
        imgs = rng.uniform(0.0, 1.0, (args.random_images, 1, hw, hw))
    else:
        if not args.images:
            raise InputError("provide --images or --random-images")
        imgs = load_idx(args.images, expect="images")[:, None, :, :].astype(np.float64)
    if args.limit is not None:
        imgs = imgs[: args.limit]
    if act_fmt is not None:
        return [FxTensor.from_real(im, act_fmt) for im in imgs]
    return list(imgs)


# ---------------------------------------------------------------------------
# subcommands


def cmd_prune(args) -> int:
    cfg = _load_config(args.config)
    tensors = load_weights(args.weights)
    conv1 = _conv_layer(tensors, "conv1", stride=1)
    primary = _conv_layer(tensors, "primary_caps", stride=2)
    if "digit_caps.weight" not in tensors:
        raise InputError("container is missing tensor digit_caps.weight")
    routing = _as_real(tensors["digit_caps.weight"])
    spec = _spec_from_shapes(primary.out_channels, routing.shape, cfg.routing_iters)

    layers = [_as_real(conv1.kernels), _as_real(primary.kernels)]
    stack = LayerStack(
        layers,
        [cfg.sparsity.get(name, 0.0) for name in CONV_LAYERS],
        [cfg.granularity.get(name, "kernel") for name in CONV_LAYERS],
    )
    prune = lakp_prune if args.pruner == "lakp" else kp_prune
    masks, _ = prune(stack)

    topo = NetTopology(
        group_size=spec.caps_dim,
        grid=spec.grid,
        digit_caps=spec.digit_caps,
        digit_dim=spec.digit_dim,
        caps_dim=spec.caps_dim,
    )
    result = propagate_dead_structures(masks, topo)
    report = compression_report(result, stack, topo)

    compacted, compact_masks = compact_capsnet_weights(
        layers[0],
        None if conv1.bias is None else _as_real(conv1.bias),
        layers[1],
        None if primary.bias is None else _as_real(primary.bias),
        routing,
        result,
        topo,
    )
    out_tensors = {
        name: arr.astype(np.float32) for name, arr in compacted.items() if arr is not None
    }
    save_weights(args.out, out_tensors)

    capsule_bits = np.zeros(spec.in_caps, dtype=bool)
    capsule_bits[result.surviving_capsules] = True
    save_mask(
        args.mask_out,
        [
            MaskEntry("conv1", compact_masks[0].granularity, compact_masks[0].mask.ravel()),
            MaskEntry("primary_caps", compact_masks[1].granularity, compact_masks[1].mask.ravel()),
            MaskEntry("capsules", "capsule_group", capsule_bits),
        ],
    )

    print(f"capsules: {report['total_capsules']} -> {report['survived_capsules']}")
    print(f"pruner={args.pruner}")
    for key in (
        "survived_weight_pct",
        "surviving_weight_count",
        "total_weight_count",
        "routing_weight_count",
        "index_entries",
        "index_overhead_pct",
    ):
        value = report[key]
        print(f"{key}={value:.4f}" if isinstance(value, float) else f"{key}={value}")
    return 0


def cmd_infer(args) -> int:
    cfg = _load_config(args.config)
    mode = args.mode or cfg.mode
    fact = args.fact if args.fact is not None else cfg.fact
    model = _model_from_args(args, cfg)

    act_fmt = None
    if args.arith == "fx16":
        act_fmt = FxFormat(cfg.frac_bits)
        model = model.quantized(act_fmt)
    images = _images_from_args(args, model, act_fmt)

    in_caps = model.spec.in_caps
    if fact < 1 or in_caps % fact != 0:
        # fall back to the largest divisor below the requested batch size
        fact = max(d for d in range(1, min(fact, in_caps) + 1) if in_caps % d == 0)
    print(f"fact={fact}")

    labels = load_idx(args.labels, expect="labels") if args.labels else None
    modes = ("reference", "optimized") if mode == "both" else (mode,)
    predictions = {m: [] for m in modes}
    for i, img in enumerate(images):
        fields = [f"image={i}"]
        for m in modes:
            res = model.infer_one(img, mode=m, fact=fact)
            predictions[m].append(res.label)
            fields.append(f"class={res.label}" if len(modes) == 1 else f"{m}={res.label}")
        print(" ".join(fields))
    if mode == "both":
        a = np.array(predictions["reference"])
        b = np.array(predictions["optimized"])
        print(f"agreement={np.mean(a == b):.4f}")
    if labels is not None:
        for m in modes:
            got = np.array(predictions[m])
            acc = float(np.mean(got == labels[: len(got)]))
            prefix = "accuracy" if len(modes) == 1 else f"accuracy_{m}"
            print(f"{prefix}={acc:.4f}")
    return 0


def cmd_latency(args) -> int:
    cfg = _load_config(args.config)
    pe = PEArraySpec(pe_count=cfg.pe_count)
    costs = CostTable()
    if args.weights:
        tensors = load_weights(args.weights)
        conv1 = _conv_layer(tensors, "conv1", stride=1)
        primary = _conv_layer(tensors, "primary_caps", stride=2)
        if "digit_caps.weight" not in tensors:
            raise InputError("container is missing tensor digit_caps.weight")
        routing_shape = tensors["digit_caps.weight"].shape
        spec = _spec_from_shapes(primary.out_channels, routing_shape, cfg.routing_iters)
        masks = _masks_by_name(args.mask)
        conv1_mask = (
            masks["conv1"].bits.reshape(conv1.out_channels, conv1.in_channels)
            if "conv1" in masks
            else None
        )
        primary_mask = (
            masks["primary_caps"].bits.reshape(primary.out_channels, primary.in_channels)
            if "primary_caps" in masks
            else None
        )
        hw = args.image_hw
        k = conv1.kernel_size
        h1 = hw - k + 1
        conv_macs = [
            count_mac_ops(conv1, conv1_mask, in_shape=(conv1.in_channels, hw, hw)),
            count_mac_ops(primary, primary_mask, in_shape=(primary.in_channels, h1, h1)),
        ]
    else:
        spec = CapsNetSpec(routing_iters=cfg.routing_iters)
        conv_macs = [256 * 1 * 81 * 400, 256 * 256 * 81 * 36]

    report = routing_cycle_report(spec, costs, pe)
    print(report.format_table())
    for line in report.records():
        print(line)
    print(f"softmax_reduction_pct={report.softmax_reduction_pct:.2f}")
    cycles_base = inference_cycles(conv_macs, report, pe, optimized=False)
    cycles_opt = inference_cycles(conv_macs, report, pe, optimized=True)
    fps_base = throughput_estimate(conv_macs, report, pe, cfg.clock_hz, optimized=False)
    fps_opt = throughput_estimate(conv_macs, report, pe, cfg.clock_hz, optimized=True)
    print(f"cycles_baseline={cycles_base}")
    print(f"cycles_optimized={cycles_opt}")
    print(f"fps_baseline={fps_base:.2f}")
    print(f"fps_optimized={fps_opt:.2f}")
    print(f"speedup={fps_opt / fps_base:.2f}")
    return 0


def cmd_compare_pruners(args) -> int:
    cfg = _load_config(args.config)
    tensors = load_weights(args.weights)
    conv1 = _conv_layer(tensors, "conv1", stride=1)
    primary = _conv_layer(tensors, "primary_caps", stride=2)
    if "digit_caps.weight" not in tensors:
        raise InputError("container is missing tensor digit_caps.weight")
    routing_shape = tensors["digit_caps.weight"].shape
    spec = _spec_from_shapes(primary.out_channels, routing_shape, cfg.routing_iters)
    layers = [_as_real(conv1.kernels), _as_real(primary.kernels)]
    grans = [cfg.granularity.get(name, "kernel") for name in CONV_LAYERS]
    topo = NetTopology(
        group_size=spec.caps_dim,
        grid=spec.grid,
        digit_caps=spec.digit_caps,
        digit_dim=spec.digit_dim,
        caps_dim=spec.caps_dim,
    )
    try:
        points = [float(s) for s in args.sparsities.split(",") if s.strip()]
    except ValueError:
        raise InputError(f"bad --sparsities value: {args.sparsities!r}")
    for s in points:
        row = [f"sparsity={s:g}"]
        for label, prune in (("lakp", lakp_prune), ("kp", kp_prune)):
            stack = LayerStack(layers, [s] * len(layers), grans)
            masks, _ = prune(stack)
            survived = sum(int(np.count_nonzero(m.mask)) for m in masks)
            result = propagate_dead_structures(masks, topo)
            row.append(f"{label}_survived_kernels={survived}")
            row.append(f"{label}_survived_capsules={len(result.surviving_capsules)}")
        print(" ".join(row))
    return 0


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    handlers = {
        "prune": cmd_prune,
        "infer": cmd_infer,
        "latency": cmd_latency,
        "compare-pruners": cmd_compare_pruners,
    }
    try:
        return handlers[args.command](args)
    except (InputError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except CapskitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


def entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    entry()
