"""Command line entry point: ``actprompt <command> ...``.

Exit codes: 0 success, 2 validation/usage error, 3 numeric failure (NaN).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import TrainConfig, load_config, parse_config_text
from .exceptions import ActPromptError, ValidationError

log = logging.getLogger("actprompt")


def _tsv(rows, header=None, out=None):
    out = out or sys.stdout
    if header:
        print("\t".join(header), file=out)
    for row in rows:
        print("\t".join(f"{v:.4f}" if isinstance(v, float) else str(v) for v in row), file=out)


def _write_tsv(path, rows, header):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", encoding="utf-8") as fh:
        _tsv(rows, header, fh)
    return path


def _config(args) -> TrainConfig:
    config = load_config(args.config) if args.config else TrainConfig()
    if args.set:
        config = parse_config_text("\n".join(args.set), base=config)
    return config


def cmd_finetune(args):
    from .data import load_dataset
    from .model import ActPromptModel
    from .train import count_parameters, finetune

    config = _config(args)
    dataset = load_dataset(args.data)
    model = ActPromptModel(config.encoder, config.temporal, config.prompt, config.seed)
    print(count_parameters(model).banner())
    out = Path(args.out)
    log_path = Path(args.log) if args.log else out.with_suffix(".log.jsonl")
    result = finetune(config, dataset, model=model, log_path=log_path)
    result.checkpoint.save(out)
    rows = [(e, m) for e, m in enumerate(result.epoch_means())]
    _tsv(rows, ["epoch", "mean_l_total"])
    print(f"# checkpoint {out}  log {log_path}  backbone {result.backbone_hash_after[:16]}")
    if args.report:
        from .plotting import loss_curve

        report = Path(args.report)
        _write_tsv(report / "epochs.tsv", rows, ["epoch", "mean_l_total"])
        print(f"# figure {loss_curve(result.history, report / 'loss.png')}")
    return 0


def cmd_extract(args):
    from .data import load_dataset
    from .extract import extract_to_dir
    from .train import Checkpoint

    ckpt = Checkpoint.load(args.ckpt)
    dataset = load_dataset(args.data)
    ids = dataset.video_ids if args.video == "all" else [args.video]
    for vid in ids:
        if vid not in dataset.video_ids:
            raise ValidationError(f"unknown video {vid!r}")
    paths = extract_to_dir(ckpt, dataset, ids, args.out, args.mode, args.query)
    _tsv([(p.stem, p.stat().st_size) for p in paths], ["video", "bytes"])
    return 0


def cmd_eval(args):
    from .data import load_annotations
    from .metrics import evaluate_highlight, evaluate_retrieval, load_predictions

    preds = load_predictions(args.preds)
    gts = load_annotations(args.gts)
    if args.task == "mr":
        thresholds = tuple(float(t) for t in args.thresholds.split(",")) if args.thresholds else None
        metrics = evaluate_retrieval(preds, gts, thresholds) if thresholds else evaluate_retrieval(preds, gts)
    else:
        metrics = evaluate_highlight(preds, gts)
    rows = [(k, float(v)) for k, v in metrics.items()]
    _tsv(rows, ["metric", "value"])
    if args.report:
        from .plotting import metric_bars

        report = Path(args.report)
        _write_tsv(report / f"metrics_{args.task}.tsv", rows, ["metric", "value"])
        print(f"# figure {metric_bars(metrics, report / f'metrics_{args.task}.png', args.task)}")
    return 0


def cmd_inspect(args):
    from .data import load_dataset
    from .extract import inspect_attention
    from .train import Checkpoint

    ckpt = Checkpoint.load(args.ckpt)
    dataset = load_dataset(args.data)
    if args.video not in dataset.video_ids:
        raise ValidationError(f"unknown video {args.video!r}")
    img, tsv = inspect_attention(ckpt, dataset, args.video, args.frame, args.out, args.query)
    sys.stdout.write(tsv.read_text(encoding="utf-8"))
    print(f"# figure {img}")
    return 0


def cmd_synth(args):
    from .data import SyntheticSpec, generate_synthetic, parse_synthetic_spec, write_dataset

    spec = parse_synthetic_spec(args.spec) if args.spec else SyntheticSpec()
    videos, records = generate_synthetic(spec, seed=args.seed)
    write_dataset(args.out, videos, records)
    _tsv([(len(videos), len(records), spec.clips_per_video)], ["videos", "queries", "clips_per_video"])
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="actprompt", description="Action-cue prompt tuning for a frozen image encoder.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    f = sub.add_parser("finetune", help="train the prompt modules on a dataset directory")
    f.add_argument("--config", help="flat key=value config file")
    f.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
    f.add_argument("--data", required=True)
    f.add_argument("--out", required=True, help="checkpoint path")
    f.add_argument("--log", help="JSON-lines step log (default: next to the checkpoint)")
    f.add_argument("--report", help="directory for epochs.tsv and loss.png")
    f.set_defaults(fn=cmd_finetune)

    e = sub.add_parser("extract", help="write per-clip feature bundles")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--video", required=True, help="video id or 'all'")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--mode", default="vid", choices=["vid", "vid+veb"])
    e.add_argument("--query")
    e.set_defaults(fn=cmd_extract)

    v = sub.add_parser("eval", help="score predictions against annotations")
    v.add_argument("--preds", required=True)
    v.add_argument("--gts", required=True)
    v.add_argument("--task", default="mr", choices=["mr", "hl"])
    v.add_argument("--thresholds", help="comma-separated IoU thresholds for the averaged mAP")
    v.add_argument("--report", help="directory for the metrics TSV and bar chart")
    v.set_defaults(fn=cmd_eval)

    i = sub.add_parser("inspect", help="render prompt attention heatmaps for one clip")
    i.add_argument("--ckpt", required=True)
    i.add_argument("--data", required=True)
    i.add_argument("--video", required=True)
    i.add_argument("--frame", type=int, required=True, help="clip index")
    i.add_argument("--out", required=True, help="image path; a .tsv grid is written alongside")
    i.add_argument("--query")
    i.set_defaults(fn=cmd_inspect)

    s = sub.add_parser("synth", help="generate the synthetic motion dataset")
    s.add_argument("--spec", help="flat key=value synthetic spec file")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(fn=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.fn(args)
    except ActPromptError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    except (FileNotFoundError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
