"""Command-line entry point: ``harvestkit <subcommand> [options]``.

Exit status is 0 on success, 1 for bad input or usage and 2 for anything
unexpected.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from collections import defaultdict
from pathlib import Path
from typing import Optional, Sequence

from .. import __version__
from ..errors import HarvestError, InputError, StateError
from ..harvester import Split, calibrate_threshold, split_true_false, with_scores
from ..metrics import MODES, match_all
from ..report import build_report, q9
from ..supervision import gaussian_heatmap, master_heatmap, write_grid
from ..tracker3d import stack_detections
from . import pipeline
from .config import RunConfig, load_config
from .records import dump_record, encode_line, read_jsonl, write_json, write_jsonl

__all__ = ["build_parser", "main"]

log = logging.getLogger("harvestkit")

EXIT_OK, EXIT_INPUT, EXIT_INTERNAL = 0, 1, 2


class UsageError(InputError):
    pass


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad usage; route it through our status codes
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


def _fraction(text: str) -> float:
    v = float(text)
    if not 0.0 <= v <= 1.0:
        raise argparse.ArgumentTypeError(f"{text} is not in [0, 1]")
    return v


def _nonneg(text: str) -> int:
    v = int(text)
    if v < 0:
        raise argparse.ArgumentTypeError(f"{text} is negative")
    return v


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="YAML or JSON run configuration")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    p = _Parser(prog="harvestkit", description="3D lesion proposal harvesting from incomplete RECIST marks.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    s = sub.add_parser("stack", parents=[common], help="stack 2D detections into 3D proposals")
    s.add_argument("detections", nargs="?", help="detection JSONL (default: paths.detections)")
    s.add_argument("--tg", type=_fraction, help="detection score floor t_G")
    s.add_argument("--round", type=_nonneg, default=0, help="round tag used in proposal ids")
    s.add_argument("--out", metavar="PATH", help="proposal JSONL (default: stdout)")

    c = sub.add_parser("calibrate", parents=[common], help="pick the lesion-score threshold on the M split")
    c.add_argument("--proposals", required=True, help="scored proposal JSONL (s_c or s set)")
    c.add_argument("--marks", required=True, help="complete mark JSONL")
    c.add_argument("--volumes", help="volume JSONL; when given only M volumes are used")
    c.add_argument("--precision-target", type=_fraction)
    c.add_argument("--out", metavar="PATH", help="write the result JSON here as well")

    h = sub.add_parser("harvest", parents=[common], help="run harvesting rounds from files")
    h.add_argument("--rounds", type=_nonneg, help="last round to run (default: max_rounds)")
    h.add_argument("--precision-target", type=_fraction)
    h.add_argument("--tg", type=_fraction)
    h.add_argument("--seed", type=int)
    h.add_argument("--out", metavar="DIR", help="output directory (default: paths.output)")
    h.add_argument("--resume", action="store_true", help="continue after the last completed round")

    e = sub.add_parser("evaluate", parents=[common], help="score proposals against complete ground truth")
    e.add_argument("--proposals", required=True)
    e.add_argument("--marks", help="mark JSONL (p3d, recist2d)")
    e.add_argument("--gt3d", help="3D lesion JSONL (iou3d)")
    e.add_argument("--mode", choices=MODES, default="p3d")
    e.add_argument("--n-volumes", type=int, help="volume count for FP rates (default: volumes seen)")
    e.add_argument("--run-id", default="eval")
    e.add_argument("--out", metavar="PATH", help="report JSON (default: stdout)")

    m = sub.add_parser("simulate", parents=[common], help="seeded end-to-end simulation")
    m.add_argument("--seed", type=int)
    m.add_argument("--rounds", type=_nonneg)
    m.add_argument("--precision-target", type=_fraction)
    m.add_argument("--tg", type=_fraction)
    m.add_argument("--out", metavar="DIR", help="output directory (default: paths.output or ./sim)")
    m.add_argument("--resume", action="store_true")

    g = sub.add_parser("heatmaps", parents=[common], help="render training labels to binary grids")
    g.add_argument("labels", help="label JSONL as written by harvest")
    g.add_argument("--width", type=int, default=512)
    g.add_argument("--height", type=int, default=512)
    g.add_argument("--stride", type=int, help="output stride (default: config stride)")
    g.add_argument("--out", metavar="DIR", required=True)
    return p


def _config(args) -> RunConfig:
    over = {}
    for flag, key in (("seed", "seed"), ("tg", "t_G"), ("precision_target", "target_precision")):
        v = getattr(args, flag, None)
        if v is not None:
            over[key] = v
    return load_config(args.config, over)


def _emit_jsonl(records, out: Optional[str]) -> None:
    if out:
        write_jsonl(out, records)
    else:
        for r in records:
            sys.stdout.write(encode_line(dump_record(r)) + "\n")


def _emit_json(obj, out: Optional[str]) -> None:
    if out:
        write_json(out, obj)
    else:
        sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def cmd_stack(args) -> int:
    cfg = _config(args)
    src = args.detections or cfg.paths.detections
    if src is None:
        raise InputError("stack needs a detection file")
    src = src.replace("{round}", str(args.round))
    dets = list(read_jsonl(src, "detection"))
    props = stack_detections(dets, t_G=cfg.t_G, stack_iou=cfg.stack_iou, kalman=cfg.kalman, round=args.round)
    _emit_jsonl(props, args.out)
    log.info("%d detections -> %d proposals", len(dets), len(props))
    return EXIT_OK


def cmd_calibrate(args) -> int:
    cfg = _config(args)
    props = list(read_jsonl(args.proposals, "proposal"))
    marks = list(read_jsonl(args.marks, "mark"))
    if args.volumes:
        m_ids = {v.volume_id for v in read_jsonl(args.volumes, "volume") if v.split is Split.M}
        props = [p for p in props if p.volume_id in m_ids]
        marks = [k for k in marks if k.volume_id in m_ids]
    scored = []
    for p in props:
        if p.s is not None:
            scored.append(p)
        elif p.s_c is not None:
            scored.append(with_scores(p, p.s_c))
        else:
            raise InputError(f"proposal {p.id} carries no classifier score")
    split = split_true_false(scored, marks, cfg.p3d_iou)
    hit = {p.id for p in split.matched}
    tau = calibrate_threshold([(p.s, p.id in hit) for p in scored], cfg.target_precision)
    _emit_json(
        {
            "tau": "inf" if tau == float("inf") else q9(tau),
            "target_precision": cfg.target_precision,
            "n_proposals": len(scored),
            "n_true": len(hit),
        },
        args.out,
    )
    return EXIT_OK


def _out_dir(args, cfg: RunConfig, fallback: Optional[str]) -> Path:
    out = args.out or cfg.paths.output or fallback
    if out is None:
        raise InputError("no output directory: pass --out or set paths.output")
    return Path(out)


def _print_rounds(reports) -> None:
    for r in reports:
        tau = "-" if r.tau is None else f"{r.tau:.4g}"
        mr = "-" if r.mean_recall is None else f"{r.mean_recall:.4f}"
        print(f"round {r.k}: tau={tau} pool={r.counts.get('P_H_pool', 0)} mean_recall={mr}")


def cmd_harvest(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, None)
    _print_rounds(pipeline.harvest(cfg, out, rounds=args.rounds, resume=args.resume))
    return EXIT_OK


def cmd_simulate(args) -> int:
    cfg = _config(args)
    out = _out_dir(args, cfg, "sim")
    _print_rounds(pipeline.simulate(cfg, out, rounds=args.rounds, resume=args.resume))
    return EXIT_OK


def cmd_evaluate(args) -> int:
    props = list(read_jsonl(args.proposals, "proposal"))
    if args.mode == "iou3d":
        if not args.gt3d:
            raise InputError("--mode iou3d needs --gt3d")
        result = match_all(props, (), "iou3d", gt3d=list(read_jsonl(args.gt3d, "lesion3d")), n_volumes=args.n_volumes)
    else:
        if not args.marks:
            raise InputError(f"--mode {args.mode} needs --marks")
        result = match_all(props, list(read_jsonl(args.marks, "mark")), args.mode, n_volumes=args.n_volumes)
    if result.n_marks == 0:
        raise InputError("ground truth is empty")
    report = build_report(args.run_id, 0, None, result, extra={"mode": args.mode})
    _emit_json(report.to_dict(), args.out)
    return EXIT_OK


def cmd_heatmaps(args) -> int:
    cfg = _config(args)
    stride = args.stride or cfg.stride
    if stride < 1:
        raise InputError("--stride must be >= 1")
    slices: dict[tuple[str, int], tuple[list, list]] = defaultdict(lambda: ([], []))
    for lab in read_jsonl(args.labels, "label"):
        slices[(lab.volume_id, lab.z)][0 if lab.positive else 1].append(lab.box)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for (vid, z), (pos, neg) in sorted(slices.items()):
        yp = gaussian_heatmap(pos, args.width, args.height, stride)
        yn = gaussian_heatmap(neg, args.width, args.height, stride)
        desc = {"volume_id": vid, "z": z, "stride": stride, "width": args.width, "height": args.height,
                "n_positive": len(pos), "n_negative": len(neg)}
        write_grid(out / f"{vid}_z{z:04d}.f32", master_heatmap(yp, yn).values, desc)
    print(f"wrote {len(slices)} grids to {out}")
    return EXIT_OK


_COMMANDS = {
    "stack": cmd_stack,
    "calibrate": cmd_calibrate,
    "harvest": cmd_harvest,
    "evaluate": cmd_evaluate,
    "simulate": cmd_simulate,
    "heatmaps": cmd_heatmaps,
}


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_INPUT
    except SystemExit as exc:  # --help / --version
        return EXIT_OK if not exc.code else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return _COMMANDS[args.command](args)
    except (InputError, StateError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except HarvestError as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL
    except Exception as exc:  # noqa: BLE001
        log.debug("unhandled", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
