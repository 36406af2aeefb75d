"""Command-line interface.

Subcommands: segment (semantic marginals + score recalibration), instances
(full pipeline to an instance map), eval (region-level AP), bench (filter
backend timing), gradcheck (analytic vs finite-difference gradients).

Exit codes: 0 success, 1 usage error, 2 malformed or inconsistent input,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import sys
import time

import numpy as np

from . import fileio, filters, instances, meanfield, metrics
from .autodiff import GradCheckInstance, gradcheck
from .core import (
    DegenerateDetectionError,
    Detection,
    DetectionParams,
    DistributionField,
    KernelSpec,
    LabelSpace,
    PairwiseConfig,
    PixelGrid,
    UnaryField,
    softmax_rows,
)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_INTERNAL = 3


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this tool reserves 2 for bad
    input files, so usage errors map to 1 instead."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print("%s: error: %s" % (self.prog, message), file=sys.stderr)
        sys.exit(EXIT_USAGE)


def _add_model_args(sub):
    sub.add_argument("--unary", required=True,
                     help="unary energy tensor, shape (H, W, L)")
    sub.add_argument("--image", help="PPM image for the bilateral kernel")
    sub.add_argument("--detections", help="detection JSON file")
    sub.add_argument("--iterations", type=int, default=5)
    sub.add_argument("--backend", choices=("lattice", "brute"), default="lattice")
    sub.add_argument("--spatial-weight", type=float, default=1.0)
    sub.add_argument("--theta-gamma", type=float, default=3.0)
    sub.add_argument("--bilateral-weight", type=float, default=0.0)
    sub.add_argument("--theta-alpha", type=float, default=60.0)
    sub.add_argument("--theta-beta", type=float, default=10.0)
    sub.add_argument("--potts", type=float, default=1.0,
                     help="Potts compatibility scale")
    sub.add_argument("--detection-weight", type=float, default=1.0,
                     help="per-class clique weight w_l (uniform)")
    sub.add_argument("--tau", type=float, default=instances.DEFAULT_FOREGROUND_TAU,
                     help="foreground threshold for mask-free detections")
    sub.add_argument("--epsilon", type=float, default=0.0,
                     help="early-stop threshold on max |dQ|")
    sub.add_argument("--seed", type=int, default=filters.FilterPlan.DEFAULT_SEED,
                     help="rotation seed for the lattice backend")


def build_parser() -> _Parser:
    parser = _Parser(prog="hocrf",
                     description="dense CRF inference with detection cliques")
    subs = parser.add_subparsers(dest="command", required=True)

    seg = subs.add_parser("segment", help="semantic segmentation")
    _add_model_args(seg)
    seg.add_argument("--output", required=True, help="semantic label map (PGM)")
    seg.add_argument("--color", help="optional color rendering (PPM)")
    seg.add_argument("--q-out", help="optional marginal tensor (H, W, L)")
    seg.add_argument("--detections-out",
                     help="detections with recalibrated y marginals (JSON)")

    inst = subs.add_parser("instances", help="instance segmentation")
    _add_model_args(inst)
    inst.add_argument("--output", required=True, help="instance map (PGM)")
    inst.add_argument("--sidecar", required=True,
                      help="instance metadata sidecar (JSON)")
    inst.add_argument("--color", help="optional color rendering (PPM)")
    inst.add_argument("--naive", action="store_true",
                      help="box-matching baseline instead of the instance CRF")
    inst.add_argument("--nms-iou", type=float, default=instances.DEFAULT_NMS_IOU)
    inst.add_argument("--instance-iterations", type=int, default=5)
    inst.add_argument("--instance-potts", type=float, default=1.0)

    ev = subs.add_parser("eval", help="region-level average precision")
    ev.add_argument("--predictions", required=True,
                    help="manifest of predicted instance maps")
    ev.add_argument("--ground-truth", required=True,
                    help="manifest of ground-truth instance maps")
    ev.add_argument("--threshold", type=float, action="append",
                    help="mask IoU threshold (repeatable; default 0.5)")
    ev.add_argument("--json", help="write the summary as JSON")

    bench = subs.add_parser("bench", help="filter backend timing")
    bench.add_argument("--size", type=int, action="append",
                       help="square side length (repeatable; default 128)")
    bench.add_argument("--labels", type=int, default=4)
    bench.add_argument("--kernel", choices=("spatial", "bilateral"),
                       default="spatial")
    bench.add_argument("--theta-gamma", type=float, default=3.0)
    bench.add_argument("--theta-alpha", type=float, default=60.0)
    bench.add_argument("--theta-beta", type=float, default=10.0)
    bench.add_argument("--repeat", type=int, default=3)
    bench.add_argument("--seed", type=int, default=0)
    bench.add_argument("--skip-brute", action="store_true",
                       help="time only the lattice backend")

    gc = subs.add_parser("gradcheck", help="finite-difference gradient check")
    gc.add_argument("--tolerance", type=float, default=1e-3)
    gc.add_argument("--iterations", type=int, default=3)
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--composed", action="store_true",
                    help="differentiate through the instance stage as well")
    return parser


def _load_problem(args):
    """Shared input handling for segment/instances."""
    arr = fileio.read_tensor(args.unary)
    if arr.ndim != 3:
        raise fileio.FileFormatError("unary tensor must have shape (H, W, L)")
    height, width, num_labels = arr.shape
    if num_labels < 2:
        raise fileio.FileFormatError("unary tensor needs at least 2 labels")
    grid = PixelGrid(width, height)
    labels = LabelSpace(num_labels - 1)
    unary = UnaryField(grid, labels, arr.reshape(grid.num_pixels, num_labels)
                       .astype(np.float64))

    image = fileio.read_ppm(args.image) if args.image else None
    kernels = []
    if args.spatial_weight > 0:
        kernels.append(KernelSpec("spatial", args.spatial_weight,
                                  theta_gamma=args.theta_gamma))
    if args.bilateral_weight > 0:
        if image is None:
            raise fileio.FileFormatError(
                "bilateral kernel requested but no --image given")
        kernels.append(KernelSpec("bilateral", args.bilateral_weight,
                                  theta_alpha=args.theta_alpha,
                                  theta_beta=args.theta_beta))
    config = PairwiseConfig.potts(num_labels, kernels, args.potts)
    plans = filters.build_plans(kernels, grid, image, backend=args.backend,
                                seed=args.seed)

    dets: list[Detection] = []
    if args.detections:
        q0 = DistributionField(grid, softmax_rows(-unary.energies))

        def heuristic_fg(row, box_px):
            probe = Detection(int(row["label"]), float(row["score"]),
                              tuple(int(v) for v in row["box"]), box_px)
            return instances.foreground_heuristic(probe, q0, args.tau)

        dets = fileio.read_detections(args.detections, grid, num_labels,
                                      foreground_fn=heuristic_fg)
        for det in dets:
            det.validate_against(grid)
    params = DetectionParams.uniform(labels, args.detection_weight)
    return grid, labels, unary, config, plans, dets, params


def _run_semantic(args, unary, config, plans, dets, params):
    settings = meanfield.InferenceSettings(
        iterations=args.iterations, epsilon=args.epsilon)
    return meanfield.run(unary, dets, config, params,
                         settings=settings, plans=plans)


def cmd_segment(args) -> int:
    grid, labels, unary, config, plans, dets, params = _load_problem(args)
    result = _run_semantic(args, unary, config, plans, dets, params)
    labeling = meanfield.decode(result.q)
    fileio.write_pgm(args.output,
                     labeling.x.reshape(grid.height, grid.width))
    if args.color:
        fileio.write_ppm(args.color,
                         labeling.x.reshape(grid.height, grid.width))
    if args.q_out:
        fileio.write_tensor(
            args.q_out,
            result.q.q.reshape(grid.height, grid.width, labels.total))
    if args.detections_out:
        fileio.write_detections(args.detections_out, result.detections,
                                include_y=True)
    return EXIT_OK


def cmd_instances(args) -> int:
    grid, labels, unary, config, plans, dets, params = _load_problem(args)
    dets = instances.nms(dets, args.nms_iou)
    result = _run_semantic(args, unary, config, plans, dets, params)
    if args.naive:
        imap = instances.naive_baseline(result.q, result.detections, labels)
        space = imap.labels
    else:
        imap, _, space = instances.segment_instances(
            result.q, result.detections, labels, plans,
            config.kernel_weights,
            iterations=args.instance_iterations,
            potts_scale=args.instance_potts,
        )
    fileio.write_pgm(args.output,
                     imap.assignment.reshape(grid.height, grid.width))
    fileio.write_instance_sidecar(args.sidecar, space)
    if args.color:
        fileio.write_ppm(args.color,
                         imap.assignment.reshape(grid.height, grid.width))
    return EXIT_OK


def cmd_eval(args) -> int:
    thresholds = args.threshold or [0.5]
    pred_rows = fileio.read_manifest(args.predictions)
    gt_rows = fileio.read_manifest(args.ground_truth)
    if len(pred_rows) != len(gt_rows):
        raise fileio.FileFormatError(
            "prediction and ground-truth manifests list %d vs %d images"
            % (len(pred_rows), len(gt_rows)))
    preds, gts = [], []
    for prow, grow in zip(pred_rows, gt_rows):
        preds.append([
            metrics.PredictedInstance(c, m, s)
            for c, m, s in fileio.load_instances_from_files(
                prow["map"], prow["sidecar"], with_scores=True)
        ])
        gts.append([
            metrics.GroundTruthInstance(c, m)
            for c, m in fileio.load_instances_from_files(
                grow["map"], grow["sidecar"], with_scores=False)
        ])
    summary = metrics.apr_summary(preds, gts, thresholds)
    print(summary.format_table())
    if args.json:
        with open(args.json, "w") as fh:
            json.dump(summary.to_json_dict(), fh, indent=2)
            fh.write("\n")
    return EXIT_OK


def cmd_bench(args) -> int:
    sizes = args.size or [128]
    rng = np.random.default_rng(args.seed)
    print("%8s %8s %10s %10s %10s" % ("size", "backend", "seconds",
                                      "speedup", "rel L2"))
    for side in sizes:
        grid = PixelGrid(side, side)
        values = rng.random((grid.num_pixels, args.labels)).astype(np.float32)
        if args.kernel == "spatial":
            spec = KernelSpec("spatial", 1.0, theta_gamma=args.theta_gamma)
            image = None
        else:
            image = rng.random((side, side, 3)) * 255.0
            spec = KernelSpec("bilateral", 1.0, theta_alpha=args.theta_alpha,
                              theta_beta=args.theta_beta)
        field = filters.features_for_kernel(spec, grid, image)

        def timed(backend):
            plan = filters.build_plan(field, backend)
            out, best = None, np.inf
            for _ in range(max(args.repeat, 1)):
                t0 = time.perf_counter()
                out = plan.apply(values)
                best = min(best, time.perf_counter() - t0)
            return out, best

        lat_out, lat_t = timed("lattice")
        if args.skip_brute:
            print("%8d %8s %10.4f %10s %10s" % (side, "lattice", lat_t, "-", "-"))
            continue
        brute_out, brute_t = timed("brute")
        rel = float(np.linalg.norm(lat_out - brute_out)
                    / max(np.linalg.norm(brute_out), 1e-30))
        print("%8d %8s %10.4f %10s %10s" % (side, "brute", brute_t, "-", "-"))
        print("%8d %8s %10.4f %9.1fx %10.4f"
              % (side, "lattice", lat_t, brute_t / max(lat_t, 1e-12), rel))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    spec = GradCheckInstance(iterations=args.iterations, seed=args.seed,
                             composed=args.composed)
    report = gradcheck(spec, tolerance=args.tolerance)
    print(report.format_table())
    return EXIT_OK if report.passed else EXIT_INTERNAL


_COMMANDS = {
    "segment": cmd_segment,
    "instances": cmd_instances,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (fileio.FileFormatError, DegenerateDetectionError, OSError,
            ValueError) as exc:
        print("hocrf: input error: %s" % exc, file=sys.stderr)
        return EXIT_INPUT
    except Exception as exc:  # noqa: BLE001 - invariant violations
        print("hocrf: internal error: %s" % exc, file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
