"""Command line driver.

Subcommands
-----------
refine     joint flow + mask refinement of an image pair
flow-init  Horn-Schunck flow and its weighted-median filtered version
regional   candidate flow maps from a (filtered) initial flow
eval       AEPE / AAE / IoU of a result against ground truth
synth      render a synthetic two-layer pair with ground truth

Exit status is 0 on success, 2 on usage errors (bad flags, bad or unknown
config keys, missing or dimension-inconsistent inputs) and 1 when
processing fails.
"""

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import evalmetrics, imagecore, pipeline, plotting, regional
from .config import ConfigError, PipelineConfig, config_to_text, load_config, parse_label_space, \
    apply_overrides

log = logging.getLogger("jointcrf")


class UsageError(Exception):
    """Invocation problem; reported with exit status 2."""


# -- argument parsing ------------------------------------------------------------------

def _common(p):
    p.add_argument("--config", metavar="PATH", help="key=value configuration file")
    p.add_argument("--out", metavar="DIR", help="output directory")
    p.add_argument("--seed", type=int, metavar="N", help="random seed")
    p.add_argument("--mode", choices=("exact", "fast"), help="CRF message computation")
    p.add_argument("--label-space", metavar="SPACE",
                   help="'regional' (default) or 'uniform:K'")
    p.add_argument("--max-flow", type=float, metavar="F",
                   help="flow magnitude shown at full saturation (default: 99th percentile)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _pair_inputs(p):
    p.add_argument("--i1", metavar="PATH", help="reference image")
    p.add_argument("--i2", metavar="PATH", help="second image")


def build_parser():
    parser = argparse.ArgumentParser(prog="jointcrf", description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")

    p = sub.add_parser("refine", help="jointly refine flow and segmentation")
    _common(p)
    _pair_inputs(p)
    p.add_argument("--score", metavar="PATH", help="foreground score map (PFM or raster)")
    p.add_argument("--mask", metavar="PATH", help="rough mask used when no score map is given")
    p.add_argument("--dump-candidates", action="store_true",
                   help="also write every candidate map and its support")

    p = sub.add_parser("flow-init", help="initial Horn-Schunck flow")
    _common(p)
    _pair_inputs(p)

    p = sub.add_parser("regional", help="build the candidate flow maps")
    _common(p)
    _pair_inputs(p)
    p.add_argument("--flow", metavar="PATH",
                   help="filtered initial flow (.flo, or a flow-init output directory)")

    p = sub.add_parser("eval", help="score a result against ground truth")
    _common(p)
    p.add_argument("--result", metavar="DIR", help="directory holding flow.flo and mask.png")
    p.add_argument("--gt", metavar="DIR",
                   help="directory holding gt_flow.flo, gt_mask.png and optionally valid.png")
    p.add_argument("--flow", metavar="PATH", help="estimated flow (.flo)")
    p.add_argument("--mask-file", dest="mask_file", metavar="PATH", help="estimated mask")
    p.add_argument("--gt-flow", metavar="PATH")
    p.add_argument("--gt-mask", metavar="PATH")
    p.add_argument("--valid", metavar="PATH", help="mask of pixels to score")

    p = sub.add_parser("synth", help="render a synthetic pair with ground truth")
    _common(p)
    p.add_argument("--spec", metavar="PATH", help="SyntheticSpec key=value file")
    return parser


# -- helpers -------------------------------------------------------------------------------

def _config_from_args(args):
    cfg = PipelineConfig()
    if args.config:
        if not Path(args.config).is_file():
            raise UsageError(f"config file not found: {args.config}")
        cfg = load_config(args.config)
    entries = {}
    if args.seed is not None:
        entries["seed"] = str(args.seed)
    if args.mode is not None:
        entries["mode"] = args.mode
    if args.label_space is not None:
        parse_label_space(args.label_space)
        entries["label_space"] = args.label_space
    if args.max_flow is not None:
        if args.max_flow <= 0:
            raise UsageError("--max-flow must be positive")
        entries["max_flow"] = repr(args.max_flow)
    for key in ("i1", "i2", "score", "mask"):
        value = getattr(args, key, None)
        if value is not None:
            entries[key] = value
    if getattr(args, "dump_candidates", False):
        entries["dump_candidates"] = "true"
    cfg = apply_overrides(cfg, entries)
    if cfg.crf.mode == "fast" and cfg.crf.schedule == "sequential":
        raise UsageError("schedule=sequential requires mode exact")
    return cfg


def _require(path, what):
    if not path:
        raise UsageError(f"missing {what}")
    if not Path(path).is_file():
        raise UsageError(f"{what} not found: {path}")
    return Path(path)


def _read_image(path, what):
    path = _require(path, what)
    if path.suffix.lower() == ".pfm":
        return np.clip(imagecore.read_pfm(path), 0.0, 1.0)
    return imagecore.load_image(path)


def _read_pair(cfg):
    i1 = _read_image(cfg.i1, "reference image (--i1)")
    i2 = _read_image(cfg.i2, "second image (--i2)")
    if i1.shape[:2] != i2.shape[:2]:
        raise UsageError(f"image sizes differ: {i1.shape[:2]} vs {i2.shape[:2]}")
    return i1, i2


def _out_dir(args):
    if not args.out:
        raise UsageError("missing output directory (--out)")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _flow_input(path):
    p = Path(path)
    if p.is_dir():
        p = p / "flow.flo"
    return imagecore.read_flo(_require(str(p), "initial flow"))


def _write_report(path, lines):
    text = "\n".join(lines) + "\n"
    Path(path).write_text(text, encoding="utf-8")
    return text


# -- subcommands ---------------------------------------------------------------------------

def cmd_refine(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    i1, i2 = _read_pair(cfg)
    if cfg.score:
        score = imagecore.read_score_map(_require(cfg.score, "score map"))
    elif cfg.mask:
        rough = imagecore.load_mask(_require(cfg.mask, "rough mask"))
        score = pipeline.score_from_mask(rough, cfg.mask_blur_sigma)
    else:
        raise UsageError("need a score map (--score) or a rough mask (--mask)")
    if score.shape != i1.shape[:2]:
        raise UsageError(f"score map size {score.shape} differs from image size {i1.shape[:2]}")

    t0 = time.perf_counter()
    res = pipeline.refine(i1, i2, score, cfg)
    total = time.perf_counter() - t0

    imagecore.write_flo(out / "flow.flo", res.flow)
    imagecore.save_mask(out / "mask.png", res.mask)
    imagecore.save_image(out / "flow.png", plotting.flow_to_color(res.flow, cfg.max_flow))
    imagecore.save_image(out / "mask_overlay.png", plotting.mask_overlay(i1, res.mask))
    plotting.save_summary_figure(out / "summary.png", i1, res.filtered_flow, res.flow,
                                 res.init_mask, res.mask, cfg.max_flow)
    (out / "config.txt").write_text(config_to_text(cfg), encoding="utf-8")
    if cfg.dump_candidates:
        _dump_candidates(out / "candidates", res.candidates)

    lines = [f"label_space {cfg.label_space}", f"mode {cfg.crf.mode}",
             f"regions {res.n_labels}"]
    lines += [f"energy alternation {k + 1} {e:.9g}" for k, e in enumerate(res.energies)]
    lines += [f"time {name} {sec:.3f} s" for name, sec in res.timings.items()]
    lines.append(f"time total {total:.3f} s")
    print(_write_report(out / "report.txt", lines), end="")
    return 0


def _dump_candidates(directory, cands):
    directory.mkdir(parents=True, exist_ok=True)
    for i, (w, s) in enumerate(zip(cands.maps, cands.supports), start=1):
        imagecore.write_flo(directory / f"w_{i:02d}.flo", w)
        imagecore.save_mask(directory / f"support_{i:02d}.png", s)


def cmd_flow_init(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    i1, i2 = _read_pair(cfg)
    t0 = time.perf_counter()
    raw, filtered = pipeline.initial_estimates(i1, i2, cfg)
    dt = time.perf_counter() - t0
    imagecore.write_flo(out / "raw_flow.flo", raw)
    imagecore.write_flo(out / "flow.flo", filtered)
    imagecore.save_image(out / "flow.png", plotting.flow_to_color(filtered, cfg.max_flow))
    print(_write_report(out / "report.txt", [f"time flow_init {dt:.3f} s"]), end="")
    return 0


def cmd_regional(args):
    cfg = _config_from_args(args)
    out = _out_dir(args)
    i1, i2 = _read_pair(cfg)
    filtered = _flow_input(args.flow) if args.flow else None
    if filtered is not None and filtered.shape[:2] != i1.shape[:2]:
        raise UsageError(f"flow size {filtered.shape[:2]} differs from image size {i1.shape[:2]}")
    t0 = time.perf_counter()
    if filtered is None:
        _, filtered = pipeline.initial_estimates(i1, i2, cfg)
    cands = regional.build_regional_set(i1, i2, cfg.regional, cfg.hs, cfg.wmf,
                                        filtered_flow=filtered)
    dt = time.perf_counter() - t0
    _dump_candidates(out / "candidates", cands)
    labels = cands.regions.labels
    imagecore.save_image(out / "regions.png", labels / max(1, labels.max()))
    lines = [f"regions {cands.n}"]
    for i, w in enumerate(cands.maps, start=1):
        lines.append(f"candidate {i} median_u {np.median(w[..., 0]):.4f} "
                     f"median_v {np.median(w[..., 1]):.4f} support {int(cands.supports[i - 1].sum())}")
    lines.append(f"time regional {dt:.3f} s")
    print(_write_report(out / "report.txt", lines), end="")
    return 0


def cmd_eval(args):
    flow_path = args.flow or (str(Path(args.result) / "flow.flo") if args.result else None)
    mask_path = args.mask_file or (str(Path(args.result) / "mask.png") if args.result else None)
    gt_flow_path = args.gt_flow or (str(Path(args.gt) / "gt_flow.flo") if args.gt else None)
    gt_mask_path = args.gt_mask or (str(Path(args.gt) / "gt_mask.png") if args.gt else None)
    valid_path = args.valid
    if valid_path is None and args.gt and (Path(args.gt) / "valid.png").is_file():
        valid_path = str(Path(args.gt) / "valid.png")
    if not (flow_path and gt_flow_path) and not (mask_path and gt_mask_path):
        raise UsageError("need a flow and ground-truth flow, or a mask and ground-truth mask")

    lines = []
    if flow_path and gt_flow_path:
        flow = imagecore.read_flo(_require(flow_path, "flow"))
        gt = imagecore.read_flo(_require(gt_flow_path, "ground-truth flow"))
        if flow.shape != gt.shape:
            raise UsageError(f"flow size {flow.shape[:2]} differs from ground truth {gt.shape[:2]}")
        valid = None
        if valid_path:
            valid = imagecore.load_mask(_require(valid_path, "valid mask")).astype(bool)
            if valid.shape != flow.shape[:2]:
                raise UsageError("valid mask size differs from flow size")
        lines.append(f"AEPE {evalmetrics.aepe(flow, gt, valid):.6f}")
        lines.append(f"AAE {evalmetrics.aae(flow, gt, valid):.6f}")
    if mask_path and gt_mask_path:
        mask = imagecore.load_mask(_require(mask_path, "mask"))
        gt_mask = imagecore.load_mask(_require(gt_mask_path, "ground-truth mask"))
        if mask.shape != gt_mask.shape:
            raise UsageError(f"mask size {mask.shape} differs from ground truth {gt_mask.shape}")
        lines.append(f"IoU {evalmetrics.iou(mask, gt_mask):.6f}")
    text = "\n".join(lines) + "\n"
    if args.out:
        _write_report(_out_dir(args) / "eval.txt", lines)
    print(text, end="")
    return 0


def cmd_synth(args):
    out = _out_dir(args)
    spec = evalmetrics.SyntheticSpec()
    if args.spec:
        try:
            spec = evalmetrics.SyntheticSpec.from_text(_require(args.spec, "spec file").read_text())
        except (ValueError, TypeError) as exc:
            raise UsageError(f"bad spec file: {exc}") from exc
    if args.seed is not None:
        spec = replace(spec, texture_seed=args.seed)
    pair = evalmetrics.synthetic_pair(spec)
    score = evalmetrics.perturbed_score_map(pair.mask, seed=spec.texture_seed)

    imagecore.save_image(out / "i1.png", pair.i1)
    imagecore.save_image(out / "i2.png", pair.i2, bits=16 if pair.i2.ndim == 2 else 8)
    imagecore.write_flo(out / "gt_flow.flo", pair.flow)
    imagecore.save_mask(out / "gt_mask.png", pair.mask)
    imagecore.save_mask(out / "valid.png", pair.valid.astype(np.uint8))
    imagecore.write_score_map(out / "score.pfm", score)
    imagecore.save_image(out / "gt_flow.png", plotting.flow_to_color(pair.flow, args.max_flow))
    (out / "spec.txt").write_text(spec.to_text(), encoding="utf-8")
    (out / "pipeline.cfg").write_text(
        f"i1={(out / 'i1.png').resolve()}\ni2={(out / 'i2.png').resolve()}\n"
        f"score={(out / 'score.pfm').resolve()}\n", encoding="utf-8")
    print(_write_report(out / "report.txt", [f"size {spec.width}x{spec.height}",
                                             f"foreground_shift {spec.foreground_shift}",
                                             f"background_shift {spec.background_shift}"]), end="")
    return 0


_COMMANDS = {"refine": cmd_refine, "flow-init": cmd_flow_init, "regional": cmd_regional,
             "eval": cmd_eval, "synth": cmd_synth}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)  # exits with status 2 on bad flags
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (UsageError, ConfigError) as exc:
        print(f"jointcrf {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 -- any processing failure maps to status 1
        log.debug("failure", exc_info=True)
        print(f"jointcrf {args.command}: failed: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
