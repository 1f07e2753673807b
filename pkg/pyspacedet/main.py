import argparse
import glob
import logging
import os
import sys

import pyspacedet
from pyspacedet import (bench, config as configmod, datasetio, distillkernel,
                        metrics, plots, raster, scenegen, trackfilter)

logger = logging.getLogger("pyspacedet")

EXIT_OK, EXIT_FAIL, EXIT_USAGE, EXIT_IO, EXIT_DIVERGED = 0, 1, 2, 3, 4
DEMO_CHANNELS = 8

# -----------------------------------------------------------------------------


class VAction(argparse.Action):
    def __call__(self, parser, args, values, option_string=None):
        curval = getattr(args, self.dest, 0) or 0
        values = values.count('v') + 1
        setattr(args, self.dest, values + curval)

# -----------------------------------------------------------------------------


def _setup_logging(verbose):
    level = {0: logging.WARNING, 1: logging.INFO}.get(verbose or 0, logging.DEBUG)
    if not logger.handlers:
        handler = logging.StreamHandler(sys.stderr)
        handler.setFormatter(logging.Formatter("%(message)s"))
        logger.addHandler(handler)
    logger.setLevel(level)


def _read_manifest(path, class_names=None):
    if str(path).endswith(".jsonl"):
        return datasetio.read_manifest_jsonl(path, class_names or ("spacecraft",))
    return datasetio.read_coco(path)


def _class_map_files(path):
    if os.path.isdir(path):
        files = sorted(glob.glob(os.path.join(path, "*.npy")) +
                       glob.glob(os.path.join(path, "*.png")))
        return {os.path.splitext(os.path.basename(f))[0]: f for f in files}
    return {os.path.splitext(os.path.basename(path))[0]: path}


def _run_record(cmd, args):
    keep = {k: v for k, v in vars(args).items()
            if k not in ("cmd", "verbose", "hide_plot") and v is not None}
    keep["command"] = cmd
    return keep

# -----------------------------------------------------------------------------
# commands


def cmd_synth(args, config):
    n = args.n if args.n is not None else 1
    manifest = scenegen.generate_dataset(config, n, config["seed"], args.out, args.jobs)
    print(f"[pyspacedet] wrote {len(manifest.entries)} images to {args.out}")


def cmd_eval(args, config):
    if args.task == "det":
        if not (args.dets and args.gt):
            raise ValueError("det evaluation needs --dets and --gt")
        gts = _read_manifest(args.gt).annotations()
        dets = datasetio.read_detections_jsonl(args.dets)
        if args.zero_shot:
            dets = metrics.zero_shot_filter(dets, gts, 0.5, args.match_rule)
        report = metrics.evaluate_detections(dets, gts, args.iou, args.interpolation,
                                             args.class_agnostic)
        for key, entry in report["thresholds"].items():
            print(f"[pyspacedet] {key} = {entry['mean']:.5f}")
        if args.plot:
            curve = metrics.pr_curve(dets, gts, args.iou[0])
            plots.plot_pr_curve(curve, show=not args.hide_plot,
                                output_fn=os.path.join(args.out, "pr_curve.png"),
                                title=f"IoU {args.iou[0]}")
    elif args.task == "seg":
        if not (args.preds and args.gt):
            raise ValueError("seg evaluation needs --preds and --gt")
        preds, gts = _class_map_files(args.preds), _class_map_files(args.gt)
        if len(preds) == 1 and len(gts) == 1:
            pairs = [(next(iter(preds.values())), next(iter(gts.values())))]
        else:
            missing = sorted(set(gts) - set(preds))
            if missing:
                raise datasetio.DatasetFormatError(f"no prediction for {missing[:5]}")
            pairs = [(preds[k], gts[k]) for k in sorted(gts)]
        acc = metrics.SegAccumulator(args.class_names or ["background", "spacecraft"])
        for pred_path, gt_path in pairs:
            acc.update(datasetio.read_class_map(pred_path), datasetio.read_class_map(gt_path))
        report = acc.result(ignore_absent=not args.count_absent)
        for name, iou in report["per_class"].items():
            print(f"[pyspacedet] IoU {name} = {'absent' if iou is None else f'{iou:.5f}'}")
        print(f"[pyspacedet] mIoU = {report['mean']:.5f}")
    else:
        raise ValueError(f"unknown --task {args.task}, expected det or seg")
    metrics.write_report_json(report, os.path.join(args.out, "report.json"))
    metrics.write_report_csv(report, os.path.join(args.out, "report.csv"))


def cmd_filter(args, config):
    if not args.dets:
        raise ValueError("filter needs --dets")
    tf = config["trackfilter"]
    dets = datasetio.read_detections_jsonl(args.dets)
    out = os.path.join(args.out, "tracks.json")
    if not dets:
        os.makedirs(args.out, exist_ok=True)
        trackfilter.write_tracks_json([], {}, trackfilter.FlowEstimate((0.0, 0.0), "ephemeris_config"), out)
        print("[pyspacedet] 0 tracks")
        return
    flow = None
    config_flow = tf["background_flow"]
    mode = args.flow_mode
    if mode is None:
        mode = "ephemeris" if config_flow is not None else "median"
    if mode == "phase":
        if not args.frames:
            raise ValueError("--flow-mode phase needs --frames")
        flow = trackfilter.flow_from_frames([raster.read_frame(p, band="LWIR") for p in args.frames])
    tracks, flow, labels = trackfilter.filter_sequence(
        dets, gate_px=tf["gate_px"], residual_thresh_px=tf["residual_thresh_px"],
        mode="ephemeris_config" if mode == "ephemeris" else "median_of_tracks",
        config_flow=config_flow, estimator=args.estimator,
        max_missed=tf["max_missed"], flow=flow)
    trackfilter.write_tracks_json(tracks, labels, flow, out)
    counts = {k: sum(1 for v in labels.values() if v == k)
              for k in (trackfilter.TARGET, trackfilter.BACKGROUND, trackfilter.UNKNOWN)}
    print(f"[pyspacedet] {len(tracks)} tracks: {counts['target']} target, "
          f"{counts['background']} background, {counts['unknown']} unknown "
          f"(flow {flow.background_velocity_px_per_frame} from {flow.source})")


def cmd_split(args, config):
    if not args.manifest:
        raise ValueError("split needs --manifest")
    manifest = _read_manifest(args.manifest)
    split = datasetio.split_dataset(manifest, tuple(args.ratios), config["seed"])
    datasetio.write_split(split, args.out)
    print("[pyspacedet] train {} / val {} / test {}".format(*split.sizes()))


def cmd_subsample(args, config):
    if not (args.split and args.fraction):
        raise ValueError("subsample needs --split and --fraction")
    split = datasetio.subsample_train(datasetio.read_split(args.split), args.fraction,
                                      config["seed"])
    datasetio.write_split(split, args.out)
    print("[pyspacedet] train {} / val {} / test {} (fraction {:g})".format(
        *split.sizes(), split.fraction_used))


def cmd_convert(args, config):
    if not args.manifest:
        raise ValueError("convert needs --manifest")
    manifest = _read_manifest(args.manifest, config["class_names"])
    if args.to == "yolo":
        paths = datasetio.write_yolo(manifest, args.out)
        print(f"[pyspacedet] wrote {len(paths)} YOLO label files to {args.out}")
    elif args.to == "coco":
        if args.labels:
            manifest = datasetio.read_yolo(args.labels, manifest)
        path = datasetio.write_coco(manifest, os.path.join(args.out, "annotations.json"))
        print(f"[pyspacedet] wrote {path}")
    else:
        raise ValueError(f"unknown --to {args.to}, expected coco or yolo")


def cmd_distill_demo(args, config):
    dc = config["distill"]
    seeds = dc["seeds"]
    n = args.n if args.n is not None else 16
    images = distillkernel.synthetic_images(n, args.image_size, args.image_size,
                                            seed=config["seed"], mode=args.image_mode)
    teacher = distillkernel.MockTeacher(dc["c"], seeds["teacher"])
    student = distillkernel.ToyStudent.init(dc["c"], seed=seeds["init"])
    _, trace = distillkernel.distill(
        teacher, student, images, epochs=dc["epochs"], eta=dc["eta"], batch=dc["batch"],
        reduction=dc["reduction"], upsample_kernel=dc["upsample_kernel"],
        order_seed=seeds["order"], track_full_batch=True)
    distillkernel.write_loss_trace(trace, os.path.join(args.out, "loss_trace.csv"))
    ratio = trace.final_loss / trace.initial_loss if trace.initial_loss > 0 else 0.0
    print(f"[pyspacedet] loss {trace.initial_loss:.6g} -> {trace.final_loss:.6g} "
          f"({100 * ratio:.3f}% of initial) after {dc['epochs']} epochs")
    if args.plot:
        plots.plot_loss_trace(trace, show=not args.hide_plot,
                              output_fn=os.path.join(args.out, "loss_trace.png"))


def cmd_bench(args, config):
    bc = config["bench"]
    predictor = bench.make_predictor(args.predictor, bc["input_spec"], config["seed"])
    report = bench.benchmark(predictor, bc["input_spec"], bc["n_passes"], bc["warmup"],
                             config["seed"], name=args.predictor)
    bench.write_report_json(report, os.path.join(args.out, "bench_report.json"))
    print(f"[pyspacedet] {args.predictor}: mean {report.mean_ms:.3f} ms, "
          f"p50 {report.p50_ms:.3f}, p95 {report.p95_ms:.3f}, "
          f"min {report.min_ms:.3f}, max {report.max_ms:.3f} over {report.n_passes} passes")


commands = {"synth": cmd_synth,
            "eval": cmd_eval,
            "filter": cmd_filter,
            "split": cmd_split,
            "subsample": cmd_subsample,
            "convert": cmd_convert,
            "distill-demo": cmd_distill_demo,
            "bench": cmd_bench}

# -----------------------------------------------------------------------------


def CommandLine(args=None, arglist=None):
    '''
    Main command line.  Accepts args, to allow for simple unit testing.
    Returns the process exit code.
    '''
    help_text = """usage: pyspacedet [options] cmd

Version: {}
Commands:

    synth        - render a synthetic detection dataset from the assets in --config (use --n, --seed, --out, --jobs)
    eval         - score detections (--task det --dets --gt --iou) or segmentation maps (--task seg --preds --gt)
    filter       - link sequence detections into tracks and label them target/background by relative velocity
    split        - seeded train/val/test split of a manifest (--manifest, --ratios)
    subsample    - keep a nested fraction of a split's training ids (--split, --fraction)
    convert      - convert annotations between COCO json and YOLO txt (--manifest, --to, --labels)
    distill-demo - distill a mock teacher into the toy strided-convolution student on synthetic images
    bench        - time a built-in predictor ({}) over --passes passes after --warmup passes

Exit codes: 0 ok, 1 predictor failure during bench, 2 usage/config/data errors, 3 file I/O errors,
4 numeric divergence.

Examples:

    pyspacedet -c scene.toml --n 1804 --seed 1 --out data/ --jobs 8 synth
    pyspacedet --task det --dets dets.jsonl --gt data/annotations.json --iou 0.5 0.75 --out eval/ eval
    pyspacedet --task det --zero-shot --dets dets.jsonl --gt data/annotations.json --out eval/ eval
    pyspacedet --task seg --preds pred/ --gt gt/ --out seg/ eval
    pyspacedet --dets seq.jsonl --flow 5 0 --gate 10 --thresh 1.0 --out tracks/ filter
    pyspacedet --dets seq.jsonl --flow-mode median --out tracks/ filter
    pyspacedet --manifest data/annotations.json --ratios 0.75 0.20 0.05 --seed 7 --out split/ split
    pyspacedet --split split/ --fraction 0.125 --seed 7 --out split_12/ subsample
    pyspacedet --manifest data/annotations.json --to yolo --out yolo/ convert
    pyspacedet --epochs 200 --eta 1e-3 --out distill/ --plot --hide-plot distill-demo
    pyspacedet --predictor render --passes 500 --out bench/ bench

""".format(pyspacedet.__version__, ", ".join(sorted(bench.bench_predictors)))

    parser = argparse.ArgumentParser(
        description=help_text,
        formatter_class=argparse.RawTextHelpFormatter)

    parser.add_argument("cmd", help="command", choices=sorted(commands))
    parser.add_argument(
        '-v',
        "--verbose",
        nargs=0,
        help="increase output verbosity (add more -v to increase versbosity)",
        action=VAction,
        dest='verbose')
    parser.add_argument("-c", "--config", help="JSON or TOML config file", default=None)
    parser.add_argument("--out", help="output directory", default="out")
    parser.add_argument("--seed", help="master seed (overrides config seed)", type=int)
    parser.add_argument("--jobs", help="worker processes for synth", type=int, default=1)
    parser.add_argument("--n", help="number of scenes (synth) or images (distill-demo)", type=int)
    parser.add_argument("--plot", help="generate a plot (pr curve or loss trace)", action="store_true")
    parser.add_argument(
        "--hide-plot",
        help="do not show plot (but it is saved to the output directory)",
        action="store_true")

    # eval
    parser.add_argument("--task", help="eval task: det or seg", default="det")
    parser.add_argument("--dets", help="detections JSON lines file")
    parser.add_argument("--preds", help="predicted class map file or directory (seg)")
    parser.add_argument("--gt", help="ground truth: COCO json / manifest (det), class map file or directory (seg)")
    parser.add_argument("--iou", help="IoU thresholds for AP", type=float, nargs="+", default=[0.5, 0.75])
    parser.add_argument("--interpolation", help="AP interpolation",
                        choices=metrics.INTERPOLATIONS, default="points_101")
    parser.add_argument("--zero-shot", help="keep only the detection matched to each ground truth (IoU > 0.5)",
                        action="store_true")
    parser.add_argument("--match-rule", help="zero-shot matching rule",
                        choices=metrics.MATCH_RULES, default="closest_center")
    parser.add_argument("--class-agnostic", help="ignore class ids when matching", action="store_true")
    parser.add_argument("--class-names", help="comma separated class names for seg eval",
                        type=lambda s: s.split(","))
    parser.add_argument("--count-absent", help="count classes absent from both maps as IoU 0",
                        action="store_true")

    # filter
    parser.add_argument("--flow", help="background flow vx vy in px/frame", type=float, nargs=2)
    parser.add_argument("--flow-mode", help="background flow source", choices=["ephemeris", "median", "phase"])
    parser.add_argument("--estimator", help="median_of_tracks estimator",
                        choices=trackfilter.ESTIMATORS, default="median")
    parser.add_argument("--frames", help="raw frames for --flow-mode phase", nargs="+")
    parser.add_argument("--gate", help="association gate in px", type=float)
    parser.add_argument("--thresh", help="velocity residual threshold in px/frame", type=float)
    parser.add_argument("--max-missed", help="frames a track may skip", type=int)

    # split / subsample / convert
    parser.add_argument("--manifest", help="COCO json or manifest.jsonl")
    parser.add_argument("--ratios", help="train val test ratios", type=float, nargs=3,
                        default=[0.75, 0.20, 0.05])
    parser.add_argument("--split", help="split.json or split directory")
    parser.add_argument("--fraction", help="fraction of training ids to keep", type=float)
    parser.add_argument("--to", help="convert target: coco or yolo", default="yolo")
    parser.add_argument("--labels", help="YOLO labels directory to read (convert --to coco)")

    # distill-demo
    parser.add_argument("--epochs", type=int)
    parser.add_argument("--eta", type=float)
    parser.add_argument("--batch", type=int)
    parser.add_argument("--channels", help=f"feature channels (default {DEMO_CHANNELS} without a config file)",
                        type=int)
    parser.add_argument("--reduction", choices=distillkernel.REDUCTIONS)
    parser.add_argument("--upsample-kernel", choices=distillkernel.UPSAMPLE_KERNELS)
    parser.add_argument("--image-size", type=int, default=32)
    parser.add_argument("--image-mode", choices=["flat", "noise"], default="flat")

    # bench
    parser.add_argument("--predictor", choices=sorted(bench.bench_predictors), default="render")
    parser.add_argument("--passes", type=int)
    parser.add_argument("--warmup", type=int)
    parser.add_argument("--input-spec", help="H W C", type=int, nargs=3)

    if not args:
        args = parser.parse_args(arglist)

    _setup_logging(args.verbose)
    try:
        config = configmod.load_config(args.config)
        channels = args.channels
        if channels is None and args.config is None and args.cmd == "distill-demo":
            channels = DEMO_CHANNELS
        config = configmod.resolve_config(
            config,
            seed=args.seed,
            **{"trackfilter.gate_px": args.gate,
               "trackfilter.residual_thresh_px": args.thresh,
               "trackfilter.max_missed": args.max_missed,
               "trackfilter.background_flow": args.flow,
               "distill.c": channels,
               "distill.eta": args.eta,
               "distill.epochs": args.epochs,
               "distill.batch": args.batch,
               "distill.reduction": args.reduction,
               "distill.upsample_kernel": args.upsample_kernel,
               "bench.n_passes": args.passes,
               "bench.warmup": args.warmup,
               "bench.input_spec": args.input_spec})
        configmod.validate_config(config)
        config["run"] = _run_record(args.cmd, args)
        os.makedirs(args.out, exist_ok=True)
        commands[args.cmd](args, config)
        configmod.write_resolved_config(config, args.out)
    except distillkernel.DivergenceError as err:
        print(f"[pyspacedet] error: {err}", file=sys.stderr)
        return EXIT_DIVERGED
    except (OSError, raster.RasterError) as err:
        print(f"[pyspacedet] error: {err}", file=sys.stderr)
        return EXIT_IO
    except (ValueError, raster.PlacementError) as err:
        print(f"[pyspacedet] error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except bench.BenchError as err:
        print(f"[pyspacedet] error: {err}", file=sys.stderr)
        return EXIT_FAIL
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(CommandLine())
