"""Command-line interface: ``coattn {synth,train,eval,benchmark,attend,gradcheck}``.

Exit codes: 0 success, 1 invalid input, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .coattention import AttentionTrace
from .dataset import SynthSpec, SplitPlan, generate_synthetic, load_dataset, make_splits, save_dataset
from .errors import CoAttnError, ValidationError
from .evaluator import VARIANT_ORDER, Ranker, evaluate, format_table, ranking_report, run_benchmark
from .gradcheck import GradCheckDims, run_gradcheck
from .model import ImageBatch, as_tensors, fuse_images
from .trainer import DEFAULT_LR, TrainConfig, check_compatible, load_checkpoint, save_checkpoint, train

log = logging.getLogger("coattn")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(ValidationError):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


class HelpFormatter(argparse.HelpFormatter):
    """Appends ``(default: ...)`` or ``(required)`` to every option that does not state its own default."""

    def _get_help_string(self, action):
        text = action.help or ""
        if not action.option_strings or action.default is argparse.SUPPRESS or "(default:" in text:
            return text
        if action.required:
            return f"{text} (required)"
        if action.default is None:
            return f"{text} (default: none)"
        if action.metavar == "{on,off}":
            return f"{text} (default: {'on' if action.default else 'off'})"
        return f"{text} (default: %(default)s)"


def _formatter(prog):
    return HelpFormatter(prog, width=100)


class JsonFormatter(logging.Formatter):
    def format(self, record):
        return json.dumps({"level": record.levelname.lower(), "logger": record.name, "message": record.getMessage()})


def _setup_logging(json_logs: bool) -> None:
    handler = logging.StreamHandler(sys.stderr)
    handler.setFormatter(JsonFormatter() if json_logs else logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root = logging.getLogger("coattn")
    root.handlers[:] = [handler]
    root.setLevel(logging.WARNING)


def _resolve_seed(value: int | None) -> int:
    if value is not None:
        return value
    env = os.environ.get("COATTN_SEED")
    if env is None:
        return 0
    try:
        return int(env)
    except ValueError:
        raise UsageError(f"COATTN_SEED must be an integer, got {env!r}") from None


def _emit(args, event: str, **fields_):
    """One stdout line: ``event k v ...`` or a JSON object under --json-logs."""
    if args.json_logs:
        print(json.dumps({"event": event, **fields_}), flush=True)
    else:
        print(" ".join([event, *(f"{k} {v}" for k, v in fields_.items())]), flush=True)


def _write_json(path: str | None, doc) -> None:
    text = json.dumps(doc, indent=1) + "\n"
    if path:
        Path(path).write_text(text)


def _on_off(value: str) -> bool:
    if value not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return value == "on"


# ---------------------------------------------------------------------------
# parsers


def _add_train_flags(p: argparse.ArgumentParser, variant_default: str | None = "VSE-CoAtt-2") -> None:
    if variant_default is not None:
        p.add_argument("--variant", default=variant_default, choices=VARIANT_ORDER, help="model variant")
    p.add_argument("--hops", type=int, default=None, help="co-attention hops (default: implied by the variant)")
    p.add_argument("--margin", type=float, default=0.2, help="ranking loss margin")
    p.add_argument("--lr", type=float, default=DEFAULT_LR, help="Adam learning rate")
    p.add_argument("--epochs", type=int, default=40, help="training epochs")
    p.add_argument("--batch", type=int, default=16, help="images per Adam step")
    p.add_argument("--neg", type=int, default=8, help="negatives sampled per positive")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $COATTN_SEED, else 0)")
    p.add_argument("--suppress", type=_on_off, default=True, metavar="{on,off}",
                   help="suppress regions that dominated the previous hop")
    p.add_argument("--d-w", type=int, default=32, help="word embedding size")
    p.add_argument("--d-e", type=int, default=32, help="statement encoding size")
    p.add_argument("--pooling", choices=("last", "mean"), default="last", help="statement pooling over LSTM states")
    p.add_argument("--clip", action="store_true", default=False, help="clip the global gradient norm at 5.0")


def _train_config(args, variant: str | None = None) -> TrainConfig:
    cfg = TrainConfig(
        variant=variant or args.variant, epochs=args.epochs, batch_size=args.batch,
        negatives_per_positive=args.neg, margin=args.margin, learning_rate=args.lr,
        seed=_resolve_seed(args.seed), hops=args.hops, suppression=args.suppress,
        d_w=args.d_w, d_e=args.d_e, statement_pooling=args.pooling,
        checkpoint_interval=getattr(args, "checkpoint_interval", 0), clip_gradients=args.clip,
    )
    cfg.validate()
    return cfg


def build_parser() -> argparse.ArgumentParser:
    parser = Parser(prog="coattn", description="Multihop co-attention embeddings for ranking ad statements.",
                    formatter_class=_formatter)
    parser.add_argument("--json-logs", action="store_true", default=False, help="structured JSON log lines")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", help="generate a synthetic corpus", formatter_class=_formatter)
    p.add_argument("--spec", default=None, help="JSON file of generator settings (flags override it)")
    p.add_argument("--out", required=True, help="output corpus path")
    defaults = SynthSpec()
    for f in fields(SynthSpec):
        if f.name == "seed":
            continue
        p.add_argument(f"--{f.name.replace('_', '-')}", type=type(getattr(defaults, f.name)), default=None,
                       help=f"generator setting (default: {getattr(defaults, f.name)})")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $COATTN_SEED, else 0)")

    p = sub.add_parser("train", help="train a model", formatter_class=_formatter)
    p.add_argument("--data", required=True, help="corpus path")
    p.add_argument("--out", required=True, help="checkpoint path")
    _add_train_flags(p)
    p.add_argument("--folds", default=None, help="split plan JSON or integer split seed; trains without --fold")
    p.add_argument("--fold", type=int, default=None, help="held-out fold index (requires --folds)")
    p.add_argument("--checkpoint-interval", type=int, default=0, help="also save every N epochs (0: final only)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.add_argument("--array-encoding", choices=("base64", "hex"), default="base64", help="checkpoint array encoding")

    p = sub.add_parser("eval", help="evaluate a checkpoint, or run the variant grid", formatter_class=_formatter)
    p.add_argument("--data", required=True, help="corpus path")
    p.add_argument("--checkpoint", default=None, help="checkpoint to evaluate")
    p.add_argument("--folds", default=None, help="split plan JSON or integer split seed")
    p.add_argument("--fold", type=int, default=None, help="evaluate only this held-out fold")
    p.add_argument("--eval-seed", type=int, default=None, help="candidate pool seed (default: checkpoint seed)")
    p.add_argument("--out", default=None, help="report JSON path")
    p.add_argument("--all-variants", action="store_true", default=False,
                   help="train and evaluate all seven variants over the folds")
    p.add_argument("--variants", default=None, help="comma-separated variants for the grid")
    p.add_argument("--workers", type=int, default=1, help="parallel processes for the grid")
    _add_train_flags(p, variant_default=None)

    p = sub.add_parser("benchmark", help="cross-validated variant grid", formatter_class=_formatter)
    p.add_argument("--data", required=True, help="corpus path")
    p.add_argument("--variants", default=None, help="comma-separated variants")
    p.add_argument("--all", action="store_true", default=False, help="all seven variants")
    p.add_argument("--folds", default=None, help="split plan JSON or integer split seed (default: --seed)")
    p.add_argument("--workers", type=int, default=1, help="parallel processes")
    p.add_argument("--out", default=None, help="report JSON path")
    _add_train_flags(p, variant_default=None)

    p = sub.add_parser("attend", help="dump the attention trace of one image", formatter_class=_formatter)
    p.add_argument("--data", required=True, help="corpus path")
    p.add_argument("--checkpoint", required=True, help="checkpoint path")
    p.add_argument("--image", required=True, help="image id")
    p.add_argument("--out", required=True, help="output JSON path")

    p = sub.add_parser("gradcheck", help="finite-difference check of every parameter", formatter_class=_formatter)
    p.add_argument("--dims", default="",
                   help="comma-separated overrides of d1=8,d2=12,d_e=8,d_w=8,n=5,k=4,hops=2 (default: none)")
    p.add_argument("--seed", type=int, default=None, help="random seed (default: $COATTN_SEED, else 0)")
    p.add_argument("--variant", default="VSE-CoAtt-2", choices=VARIANT_ORDER, help="model variant")
    p.add_argument("--step", type=float, default=1e-5, help="central-difference step")
    p.add_argument("--tol", type=float, default=1e-4, help="maximum relative error")
    return parser


# ---------------------------------------------------------------------------
# commands


def _split_plan(value: str | None, manifest, default_seed: int) -> SplitPlan:
    if value is None:
        return make_splits(manifest, default_seed)
    if value.lstrip("-").isdigit():
        return make_splits(manifest, int(value))
    try:
        return SplitPlan.from_dict(json.loads(Path(value).read_text()))
    except (OSError, ValueError, KeyError) as exc:
        raise UsageError(f"--folds: cannot read split plan {value!r}: {exc}") from exc


def cmd_synth(args) -> int:
    settings = {}
    if args.spec:
        try:
            settings = json.loads(Path(args.spec).read_text())
        except (OSError, ValueError) as exc:
            raise UsageError(f"--spec: {exc}") from exc
        unknown = set(settings) - {f.name for f in fields(SynthSpec)}
        if unknown:
            raise UsageError(f"--spec: unknown settings {sorted(unknown)}")
    for f in fields(SynthSpec):
        value = getattr(args, f.name, None)
        if value is not None and f.name != "seed":
            settings[f.name] = value
    settings["seed"] = _resolve_seed(args.seed) if args.seed is not None or "seed" not in settings else settings["seed"]
    spec = SynthSpec(**settings)
    manifest = generate_synthetic(spec)
    save_dataset(manifest, args.out)
    _emit(args, "synth", images=len(manifest.samples), statements=len(manifest.statements),
          topics=len(manifest.topics), seed=spec.seed, out=args.out)
    return EXIT_OK


def cmd_train(args) -> int:
    manifest = load_dataset(args.data)
    resume = load_checkpoint(args.resume) if args.resume else None
    config = resume.train if resume else _train_config(args)
    train_ids = None
    if args.fold is not None:
        plan = _split_plan(args.folds, manifest, config.seed)
        if not 0 <= args.fold < len(plan.folds):
            raise UsageError(f"--fold must lie in [0, {len(plan.folds)})")
        train_ids = plan.train_ids(args.fold)
    elif args.folds is not None:
        raise UsageError("--folds needs --fold")

    def on_epoch(epoch, loss):
        if args.json_logs:
            print(json.dumps({"event": "epoch", "epoch": epoch, "loss": loss}), flush=True)
        else:
            print(f"epoch {epoch} loss {loss:.6f}", flush=True)

    ckpt = train(manifest, config, train_ids=train_ids, resume=resume, checkpoint_path=args.out, on_epoch=on_epoch)
    save_checkpoint(ckpt, args.out, encoding=args.array_encoding)
    _emit(args, "checkpoint", path=args.out, seed=config.seed, variant=config.variant, step=ckpt.adam.step)
    return EXIT_OK


def cmd_eval(args) -> int:
    if args.all_variants or args.variants:
        args.all = args.all_variants
        return cmd_benchmark(args)
    if not args.checkpoint:
        raise UsageError("eval needs --checkpoint, or --all-variants/--variants for the grid")
    manifest = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    check_compatible(ckpt, manifest)
    eval_seed = ckpt.seed if args.eval_seed is None else args.eval_seed
    if args.fold is not None:
        plan = _split_plan(args.folds, manifest, ckpt.seed)
        if not 0 <= args.fold < len(plan.folds):
            raise UsageError(f"--fold must lie in [0, {len(plan.folds)})")
        image_ids = plan.folds[args.fold]
        scope = f"fold {args.fold}"
    else:
        trained = set(ckpt.train_image_ids)
        image_ids = [s.image_id for s in manifest.samples if s.image_id not in trained] or None
        scope = "held-out images" if image_ids else "all images"
    results = evaluate(Ranker(ckpt, manifest), manifest, image_ids, eval_seed=eval_seed)
    report = ranking_report(results, variant=ckpt.model.variant, seed=ckpt.seed, eval_seed=eval_seed,
                            config_hash=ckpt.train.digest(), scope=scope)
    _write_json(args.out, report)
    print(f"{'METHOD':<16}{'images':>8}  Mean Rank")
    print(f"{ckpt.model.variant:<16}{report['n_images']:>8}  {report['mean_rank']:.4f}")
    return EXIT_OK


def cmd_benchmark(args) -> int:
    if args.all:
        variants = list(VARIANT_ORDER)
    elif args.variants:
        variants = [v.strip() for v in args.variants.split(",") if v.strip()]
    else:
        raise UsageError("choose variants with --variants or all of them with --all/--all-variants")
    manifest = load_dataset(args.data)
    config = _train_config(args, variant=variants[0])
    plan = _split_plan(args.folds, manifest, config.seed)

    def on_fold(variant, outcome):
        if "error" in outcome:
            _emit(args, "fold", variant=variant, fold=outcome["fold"], error=json.dumps(outcome["error"]))
        else:
            _emit(args, "fold", variant=variant, fold=outcome["fold"], mean_rank=f"{outcome['mean_rank']:.4f}")

    report = run_benchmark(manifest, plan, variants, config, workers=args.workers, on_fold=on_fold)
    _write_json(args.out, report)
    print(format_table(report))
    failed = [v for v, e in report["variants"].items() if e["aggregate"] is None]
    return EXIT_RUNTIME if failed else EXIT_OK


def attention_dump(manifest, ckpt, image_id: str) -> dict:
    """The JSON payload written by ``coattn attend``."""
    index = manifest.sample_index()
    if image_id not in index:
        raise UsageError(f"unknown image id {image_id!r}")
    spec = ckpt.model.spec
    if not spec.uses_attention:
        raise UsageError(f"variant {spec.id} has no attention to dump")
    sample = manifest.samples[index[image_id]]
    params = as_tensors(ckpt.params)
    fused, trace = fuse_images(params, ckpt.model, ImageBatch.from_samples([sample]), manifest.symbol_embeddings)
    doc = {
        "image_id": image_id,
        "variant": spec.id,
        "seed": ckpt.seed,
        "boxes": sample.boxes.tolist(),
        "symbol_names": list(manifest.symbol_names),
        "symbol_probs": sample.symbol_probs.tolist(),
    }
    if isinstance(trace, AttentionTrace):
        tr = trace.select(0)
        doc["n_hops"] = len(tr.hops)
        doc["initial_symbol_summary"] = tr.initial_symbol_summary.tolist()
        doc["hops"] = [
            {
                "hop": t + 1,
                "raw_image": h.raw_image.tolist(),
                "alpha": h.alpha.tolist(),
                "raw_symbol": h.raw_symbol.tolist(),
                "beta": h.beta.tolist(),
                "suppressed": np.flatnonzero(h.suppressed).tolist(),
            }
            for t, h in enumerate(tr.hops)
        ]
    else:
        doc["n_hops"] = 1
        doc["hops"] = [{"hop": 1, "raw_image": trace["raw_image"][0].tolist(), "alpha": trace["alpha"][0].tolist()}]
    doc["f_iz"] = fused.data[0].tolist()
    return doc


def cmd_attend(args) -> int:
    manifest = load_dataset(args.data)
    ckpt = load_checkpoint(args.checkpoint)
    check_compatible(ckpt, manifest)
    doc = attention_dump(manifest, ckpt, args.image)
    _write_json(args.out, doc)
    _emit(args, "attend", image=args.image, hops=doc["n_hops"], out=args.out)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    dims = GradCheckDims.parse(args.dims)
    seed = _resolve_seed(args.seed)
    reports = run_gradcheck(seed, dims, args.variant, step=args.step)
    width = max(len(r.name) for r in reports)
    print(f"{'parameter':<{width}}  {'coords':>6}  {'max_rel_error':>13}  status")
    for r in reports:
        print(f"{r.name:<{width}}  {len(r.coords):>6}  {r.max_rel_error:>13.3e}  {'ok' if r.passed(args.tol) else 'FAIL'}")
    failed = [r.name for r in reports if not r.passed(args.tol)]
    if failed:
        print(f"gradcheck failed for: {', '.join(failed)}", file=sys.stderr)
        return EXIT_RUNTIME
    _emit(args, "gradcheck", status="pass", parameters=len(reports), seed=seed)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "benchmark": cmd_benchmark,
    "attend": cmd_attend,
    "gradcheck": cmd_gradcheck,
}


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    _setup_logging(args.json_logs)
    try:
        return COMMANDS[args.command](args)
    except ValidationError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except CoAttnError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
