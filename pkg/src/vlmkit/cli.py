"""Command-line entry point: ``vlmkit <subcommand> ...``.

Exit status: 0 success, 1 usage error, 2 data error, 3 evaluation-hook failure.
Outputs are written to a temp file and renamed, so failures leave nothing behind.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import corpus, geometry, ppl, soup, tensorio, tensorops

log = logging.getLogger("vlmkit")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_HOOK = 0, 1, 2, 3
WORKERS_ENV = "VLMKIT_WORKERS"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _fraction(lo_open: bool):
    def parse(text):
        value = float(text)
        ok = (0 < value <= 1) if lo_open else (0 <= value <= 1)
        if not ok:
            raise argparse.ArgumentTypeError(f"{text} is outside {'(0, 1]' if lo_open else '[0, 1]'}")
        return value
    return parse


def _positive_int(text):
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"{text} must be >= 1")
    return value


def _write_json(path, obj) -> None:
    corpus.atomic_write(path, lambda fh: fh.write(json.dumps(obj, indent=2) + "\n"))


def _require_file(path) -> None:
    if not Path(path).is_file():
        raise FileNotFoundError(f"no such file: {path}")


# -- tile ------------------------------------------------------------------

def cmd_tile(args) -> int:
    image = None
    if args.image:
        _require_file(args.image)
        from PIL import Image  # decoding stays in the CLI layer

        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"))
        h, w = image.shape[:2]
    else:
        if args.width is None or args.height is None:
            raise UsageError("tile: give --image or both --width and --height")
        h, w = args.height, args.width

    config = geometry.TileConfig(
        max_tiles=args.max_tiles,
        tile_h=args.tile_h or args.tile_size,
        tile_w=args.tile_w or args.tile_size,
        include_thumbnail=not args.no_thumbnail,
        max_aspect_ratio=args.max_aspect,
    )
    plan = geometry.plan_tiles(h, w, config, args.mode)
    body = plan.to_dict()

    if args.tiles_dir:
        if image is None:
            raise UsageError("tile: --tiles-dir needs --image")
        from PIL import Image

        tiles, thumb = geometry.extract_tiles(image, plan, config)
        out = Path(args.tiles_dir)
        out.mkdir(parents=True, exist_ok=True)
        names = [f"tile_{i:03d}.png" for i in range(len(tiles))]
        for name, tile in zip(names, tiles):
            Image.fromarray(tile).save(out / name)
        if thumb is not None:
            Image.fromarray(thumb).save(out / "thumbnail.png")
            names.append("thumbnail.png")
        body["files"] = names

    if args.plan_out:
        _write_json(args.plan_out, body)
    else:
        print(json.dumps(body))
    return EXIT_OK


# -- filter ----------------------------------------------------------------

def cmd_filter(args) -> int:
    _require_file(args.inp)
    summary = corpus.ReadSummary()
    records = list(corpus.read_manifest(args.inp, strict=args.strict, summary=summary))
    if not records:
        raise ValueError(f"{args.inp}: no usable records")

    scorer = None
    if args.scorer == "ngram":
        if args.ngram_train:
            _require_file(args.ngram_train)
            texts = [r.caption for r in corpus.read_manifest(args.ngram_train) if r.caption is not None]
        else:
            texts = [r.caption for r in records if r.caption is not None]
        if texts:
            scorer = ppl.NGramScorer.fit(texts, order=args.order, alpha=args.alpha, chars=args.chars)

    errors: list[ppl.RecordError] = []
    scored = list(ppl.score_corpus(records, scorer, workers=args.workers, errors=errors))
    if errors and args.strict:
        first = errors[0]
        raise ValueError(f"record {first.source_index} ({first.record_id}): {first.message}")
    if not scored:
        raise ValueError("no record could be scored")

    by_index = {s.source_index: s for s in scored}
    kept = set(ppl.filter_corpus(scored, args.keep))

    def with_ppl(i):
        rec = records[i].to_dict()
        rec["perplexity"] = by_index[i].perplexity
        return rec

    if args.scored_out:
        corpus.write_manifest((with_ppl(i) for i in sorted(by_index)), args.scored_out)
    n = corpus.write_manifest(
        (with_ppl(i) for i in sorted(by_index) if records[i].id in kept), args.out)
    log.info("kept %d of %d scored records (%d unscorable, %d malformed lines)",
             n, len(scored), len(errors), len(summary.skipped))
    return EXIT_OK


# -- soup ------------------------------------------------------------------

def cmd_soup(args) -> int:
    for p in args.checkpoints:
        _require_file(p)
    cks = soup.load_checkpoints(args.checkpoints)
    evaluate = soup.CommandEvaluator(args.eval_cmd, timeout=args.eval_timeout) if args.eval_cmd else None

    trace = None
    if args.strategy == "average":
        result = soup.average_soup(cks)
    elif args.strategy == "maximum":
        if args.p is None:
            raise UsageError("soup: --strategy maximum needs --p")
        if args.scores is not None:
            if len(args.scores) != len(cks):
                raise UsageError(f"soup: {len(args.scores)} scores for {len(cks)} checkpoints")
            scores = args.scores
        elif evaluate is not None:
            scores = [soup.evaluate_checkpoint(evaluate, ck, ck.name) for ck in cks]
        else:
            raise UsageError("soup: --strategy maximum needs --scores or --eval-cmd")
        if not 1 <= args.p <= len(cks):
            raise UsageError(f"soup: --p must be in [1, {len(cks)}]")
        result = soup.maximum_soup(cks, scores, args.p)
    else:
        if evaluate is None:
            raise UsageError("soup: --strategy greedy needs --eval-cmd")
        result, trace = soup.greedy_soup(cks, evaluate, workers=args.workers)

    result.save(args.out)
    if args.trace:
        body = trace.to_dict() if trace else {"strategy": args.strategy}
        body["contributors"] = result.meta["contributors"]
        body["weights"] = result.meta["weights"]
        _write_json(args.trace, body)
    return EXIT_OK


# -- fuse / shuffle --------------------------------------------------------

def cmd_fuse(args) -> int:
    _require_file(args.inp)
    tensors = tensorio.read_container(args.inp)
    for name in (args.general, args.ocr):
        if name not in tensors:
            raise ValueError(f"{args.inp}: no tensor named {name!r}")
    tensors = dict(tensors)
    tensors[args.name] = tensorops.fuse_features(tensors[args.general], tensors[args.ocr], args.alpha)
    tensorio.write_container(tensors, args.out)
    return EXIT_OK


def cmd_shuffle(args) -> int:
    _require_file(args.inp)
    tensors = dict(tensorio.read_container(args.inp))
    names = args.names or sorted(tensors)
    op = tensorops.pixel_unshuffle if args.inverse else tensorops.pixel_shuffle
    for name in names:
        if name not in tensors:
            raise ValueError(f"{args.inp}: no tensor named {name!r}")
        tensors[name] = op(tensors[name], args.factor)
    tensorio.write_container(tensors, args.out)
    return EXIT_OK


# -- balance ---------------------------------------------------------------

def cmd_balance(args) -> int:
    _require_file(args.inp)
    records = list(corpus.read_manifest(args.inp, strict=args.strict))
    balanced = corpus.balance_manifest(records, top_k=args.top_k, down_to=args.down_to, seed=args.seed)
    corpus.write_manifest(balanced, args.out)
    summary = corpus.balance_summary(records, balanced)
    if args.summary:
        _write_json(args.summary, summary)
    else:
        print(json.dumps(summary))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = _Parser(add_help=False)
    shared.add_argument("--workers", type=_positive_int, default=None,
                        help=f"worker threads (default: ${WORKERS_ENV} or 1)")
    shared.add_argument("--strict", action="store_true", help="abort on the first malformed record")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument("-v", "--verbose", action="store_true")

    parser = _Parser(prog="vlmkit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("tile", parents=[shared], help="plan (and optionally cut) image tiles")
    p.add_argument("--image")
    p.add_argument("--width", type=_positive_int)
    p.add_argument("--height", type=_positive_int)
    p.add_argument("--max-tiles", type=_positive_int, default=8)
    p.add_argument("--tile-size", type=_positive_int, default=336)
    p.add_argument("--tile-h", type=_positive_int)
    p.add_argument("--tile-w", type=_positive_int)
    p.add_argument("--max-aspect", type=_positive_int, default=8)
    p.add_argument("--mode", choices=[m.value for m in geometry.TileMode], default="catty")
    p.add_argument("--no-thumbnail", action="store_true")
    p.add_argument("--plan-out")
    p.add_argument("--tiles-dir")
    p.set_defaults(func=cmd_tile)

    p = sub.add_parser("filter", parents=[shared], help="keep the lowest-perplexity records")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep", type=_fraction(True), default=0.2)
    p.add_argument("--scorer", choices=["ngram", "logprobs"], default="ngram")
    p.add_argument("--order", type=_positive_int, default=2)
    p.add_argument("--alpha", type=float, default=1.0)
    p.add_argument("--chars", action="store_true", help="character tokens instead of whitespace words")
    p.add_argument("--ngram-train", help="manifest whose captions train the n-gram scorer (default: --in)")
    p.add_argument("--scored-out", help="also write every scored record here")
    p.set_defaults(func=cmd_filter)

    p = sub.add_parser("soup", parents=[shared], help="merge checkpoints")
    p.add_argument("--strategy", choices=["average", "maximum", "greedy"], required=True)
    p.add_argument("--checkpoints", nargs="+", required=True)
    p.add_argument("--scores", nargs="+", type=float)
    p.add_argument("--p", type=_positive_int)
    p.add_argument("--eval-cmd")
    p.add_argument("--eval-timeout", type=float)
    p.add_argument("--out", required=True)
    p.add_argument("--trace")
    p.set_defaults(func=cmd_soup)

    p = sub.add_parser("fuse", parents=[shared], help="blend general and OCR feature maps")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--alpha", type=_fraction(False), default=0.5, help="weight of the general features")
    p.add_argument("--general", default="general")
    p.add_argument("--ocr", default="ocr")
    p.add_argument("--name", default="fused")
    p.set_defaults(func=cmd_fuse)

    p = sub.add_parser("shuffle", parents=[shared], help="pixel-shuffle feature maps")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--factor", type=_fraction(True), default=0.25)
    p.add_argument("--names", nargs="+")
    p.add_argument("--inverse", action="store_true")
    p.set_defaults(func=cmd_shuffle)

    p = sub.add_parser("balance", parents=[shared], help="down-sample dominant labels")
    p.add_argument("--in", dest="inp", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--top-k", type=_positive_int, default=6)
    p.add_argument("--down-to", type=_fraction(True), default=0.6)
    p.add_argument("--summary")
    p.set_defaults(func=cmd_balance)
    return parser


def _resolve_workers(args) -> None:
    if args.workers is None:
        env = os.environ.get(WORKERS_ENV)
        try:
            args.workers = int(env) if env else 1
        except ValueError:
            raise UsageError(f"${WORKERS_ENV} must be an integer, got {env!r}") from None
        if args.workers < 1:
            raise UsageError(f"${WORKERS_ENV} must be >= 1, got {env!r}")


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
        _resolve_workers(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE

    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except soup.HookError as exc:
        print(f"hook failure: {exc}", file=sys.stderr)
        return EXIT_HOOK
    except (ValueError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


def main() -> None:
    sys.exit(dispatch())


if __name__ == "__main__":
    main()
