"""Command-line interface.

Subcommands: gen-data, train, train-ensemble, predict, evaluate, gradcheck,
ablate. Every run echoes its resolved configuration, writes machine-readable
outputs under --out, renders companion figures next to delimited reports,
and uses exit codes 0 (success), 1 (contract or validation error), and
2 (I/O error).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import __version__, plots
from .ablation import (METRIC_NAMES, ablation_csv, robustness_csv, run_ablations,
                       run_robustness)
from .data import (SynthSpec, generate_synthetic, make_order, read_dataset, read_vocab,
                   with_frequencies, write_dataset, write_vocab)
from .errors import CheckpointError, ContractError, DataFileError, TrainingDiverged
from .evaluation import MemberRuntime, evaluate_ensemble, format_report_table
from .gradcheck import model_gradient_check
from .model import ModelConfig, load_checkpoint_with_meta, save_checkpoint
from .numerics import Rng
from .training import (EnsembleSpec, TrainConfig, order_to_dict, read_loss_log,
                       read_manifest, train_ensemble, train_member, write_loss_log)

log = logging.getLogger(__name__)

PRESETS = {
    "acceptance": {
        # small configuration pinned for fast, reproducible CI-scale runs
        "d": 32, "embed_dim": 16, "attn_width": 32, "m": 6, "n_attr": 12,
        "d_region": 16, "d_global": 16, "n_train": 2000, "n_test": 500,
        "noise_sigma": 0.3, "correlation": 0.7,
    },
}

ORDER_KINDS = ("rare_first", "frequent_first", "top_down", "bottom_up",
               "global_local", "local_global", "random")


class CliUsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise CliUsageError(message)


def _fmt(**kwargs):
    kwargs.setdefault("formatter_class", argparse.ArgumentDefaultsHelpFormatter)
    return kwargs


def build_parser() -> Parser:
    parser = Parser(prog="attrseq", description=__doc__,
                    formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    parser.add_argument("--version", action="version", version=f"attrseq {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    common = Parser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="base random seed")
    common.add_argument("--preset", choices=sorted(PRESETS), default=None,
                        help="named configuration bundle; overrides flags left at their defaults")

    model_flags = Parser(add_help=False)
    model_flags.add_argument("--d", type=int, default=512, help="hidden state size")
    model_flags.add_argument("--m", type=int, default=6, help="regions per image")
    model_flags.add_argument("--n-attr", type=int, default=None,
                             help="attribute count (default: inferred from the vocab)")
    model_flags.add_argument("--embed-dim", type=int, default=None,
                             help="attribute embedding size (default: min(d, 128))")
    model_flags.add_argument("--attn-width", type=int, default=None,
                             help="attention scorer width (default: d)")
    model_flags.add_argument("--context-k", type=int, default=2,
                             help="exemplars fused into the context vector")
    model_flags.add_argument("--no-attention", action="store_true",
                             help="decode against the constant summary vector")
    model_flags.add_argument("--no-context", action="store_true",
                             help="disable exemplar context fusion")
    model_flags.add_argument("--no-encoder", action="store_true",
                             help="replace the recurrent encoder with a linear projection")
    model_flags.add_argument("--dropout", type=float, default=0.5,
                             help="dropout rate on the decoder state (0 disables)")

    train_flags = Parser(add_help=False)
    train_flags.add_argument("--epochs", type=int, default=50, help="training epochs")
    train_flags.add_argument("--batch", type=int, default=32, help="mini-batch size")
    train_flags.add_argument("--lr", type=float, default=1e-4, help="Adam learning rate")
    train_flags.add_argument("--clip", action="store_true",
                             help="enable global-norm gradient clipping")
    train_flags.add_argument("--clip-threshold", type=float, default=5.0,
                             help="global-norm threshold when --clip is set")
    train_flags.add_argument("--context-refresh", type=int, default=1,
                             help="epochs between exemplar cache refreshes")
    train_flags.add_argument("--val-fraction", type=float, default=0.0,
                             help="held-out validation slice; > 0 enables early stopping")
    train_flags.add_argument("--patience", type=int, default=5,
                             help="early-stopping patience in epochs")

    data_flags = Parser(add_help=False)
    data_flags.add_argument("--data", required=True, help="dataset JSONL file")
    data_flags.add_argument("--vocab", required=True, help="vocab sidecar JSON file")

    p = sub.add_parser("gen-data", parents=[common],
                       help="generate a synthetic correlated-attribute dataset",
                       **_fmt())
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--n-attr", type=int, default=12)
    p.add_argument("--m", type=int, default=6)
    p.add_argument("--d-region", type=int, default=16)
    p.add_argument("--d-global", type=int, default=16)
    p.add_argument("--n-train", type=int, default=2000)
    p.add_argument("--n-test", type=int, default=500)
    p.add_argument("--noise-sigma", type=float, default=0.3)
    p.add_argument("--correlation", type=float, default=0.7,
                   help="chain dependency strength between neighboring attributes")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", parents=[common, data_flags, model_flags, train_flags],
                       help="train one order-specific model", **_fmt())
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--order", choices=ORDER_KINDS, default="rare_first",
                   help="attribute emission order")
    p.add_argument("--order-seed", type=int, default=0,
                   help="seed for --order random")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("train-ensemble", parents=[common, data_flags, model_flags, train_flags],
                       help="train the 10-member attribute-order ensemble", **_fmt())
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1,
                   help="parallel member-training processes")
    p.set_defaults(func=cmd_train_ensemble)

    p = sub.add_parser("predict", parents=[common],
                       help="greedy-decode attribute sets with one checkpoint", **_fmt())
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset JSONL file to decode")
    p.add_argument("--vocab", default=None, help="vocab JSON for attribute names")
    p.add_argument("--train-data", default=None,
                   help="training JSONL used as the exemplar pool (context models)")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--dump-attention", action="store_true",
                   help="emit per-image attention weight matrices as CSV blocks")
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", parents=[common],
                       help="evaluate a trained ensemble with majority voting", **_fmt())
    p.add_argument("--manifest", required=True, help="ensemble manifest JSON")
    p.add_argument("--data", required=True, help="test dataset JSONL")
    p.add_argument("--train-data", default=None,
                   help="exemplar pool override (default: path recorded in the manifest)")
    p.add_argument("--vocab", default=None, help="vocab JSON for attribute names")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("gradcheck", parents=[common],
                       help="verify analytic gradients against finite differences", **_fmt())
    p.add_argument("--d", type=int, default=6)
    p.add_argument("--m", type=int, default=3)
    p.add_argument("--n-attr", type=int, default=5)
    p.add_argument("--d-region", type=int, default=5)
    p.add_argument("--embed-dim", type=int, default=4)
    p.add_argument("--attn-width", type=int, default=4)
    p.add_argument("--context-k", type=int, default=1)
    p.add_argument("--no-attention", action="store_true")
    p.add_argument("--no-context", action="store_true")
    p.add_argument("--no-encoder", action="store_true")
    p.add_argument("--tolerance", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("ablate", parents=[common, data_flags, model_flags, train_flags],
                       help="run the component ablation battery (or --robustness sweep)",
                       **_fmt())
    p.add_argument("--test-data", required=True, help="held-out dataset JSONL")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--robustness", action="store_true",
                   help="run the training-size robustness protocol instead")
    p.set_defaults(func=cmd_ablate)
    return parser


def apply_preset(parser: Parser, args: argparse.Namespace) -> None:
    """Preset values replace flags the user left at their parser defaults."""
    if not getattr(args, "preset", None):
        return
    preset = PRESETS[args.preset]
    for key, value in preset.items():
        if not hasattr(args, key):
            continue
        if getattr(args, key) == _parser_default(parser, args.command, key):
            setattr(args, key, value)


def _parser_default(parser: Parser, command: str, key: str):
    sub_actions = next(a for a in parser._actions
                       if isinstance(a, argparse._SubParsersAction))
    return sub_actions.choices[command].get_default(key)


def echo_config(args: argparse.Namespace, extra: dict | None = None) -> None:
    resolved = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    if extra:
        resolved.update(extra)
    print("resolved config: " + json.dumps(resolved, sort_keys=True, default=str))


# ---------------------------------------------------------------------------
# command implementations


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_data(args) -> int:
    spec = SynthSpec(
        n_attr=args.n_attr, m=args.m, d_region=args.d_region, d_global=args.d_global,
        n_train=args.n_train, n_test=args.n_test, noise_sigma=args.noise_sigma,
        correlation_strength=args.correlation,
    )
    echo_config(args)
    train, test, vocab, _ = generate_synthetic(spec, Rng(args.seed))
    out = _out_dir(args)
    write_dataset(out / "train.jsonl", train)
    write_dataset(out / "test.jsonl", test)
    write_vocab(out / "vocab.json", vocab)
    freq = ", ".join(f"{n}={f:.2f}" for n, f in zip(vocab.names, vocab.train_frequency))
    print(f"wrote {len(train)} train / {len(test)} test samples to {out}")
    print(f"train frequencies: {freq}")
    return 0


def _load_training_inputs(args):
    samples = read_dataset(args.data)
    vocab = with_frequencies(read_vocab(args.vocab), samples)
    m, d_region = samples[0].regions.shape
    if args.m is not None and args.m != m and args.m != 6:
        raise ContractError(f"--m {args.m} does not match dataset region count {m}")
    if args.n_attr is not None and args.n_attr != vocab.n_attr:
        raise ContractError(f"--n-attr {args.n_attr} does not match vocab size {vocab.n_attr}")
    if samples[0].labels.shape[0] != vocab.n_attr:
        raise ContractError("dataset label width does not match the vocab")
    return samples, vocab, m, d_region


def _model_config(args, vocab_n_attr: int, m: int, d_region: int) -> ModelConfig:
    return ModelConfig(
        n_attr=vocab_n_attr, d_region=d_region, d=args.d, m=m,
        embed_dim=args.embed_dim, attn_width=args.attn_width,
        k=0 if args.no_context else args.context_k,
        attention_enabled=not args.no_attention,
        context_enabled=not args.no_context,
        encoder_enabled=not args.no_encoder,
        dropout_rate=args.dropout,
    )


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs, batch_size=args.batch, seed=args.seed,
        learning_rate=args.lr, dropout=args.dropout > 0,
        clip=args.clip, clip_threshold=args.clip_threshold,
        context_refresh_every=args.context_refresh,
        val_fraction=args.val_fraction, patience=args.patience,
    )


def cmd_train(args) -> int:
    samples, vocab, m, d_region = _load_training_inputs(args)
    model_config = _model_config(args, vocab.n_attr, m, d_region)
    train_config = _train_config(args)
    order = make_order(vocab, args.order, args.order_seed)
    echo_config(args, {"model_config": model_config.to_dict(),
                       "train_config": train_config.to_dict(),
                       "order": order_to_dict(order)})
    result = train_member(samples, vocab, order, train_config, model_config)
    out = _out_dir(args)
    save_checkpoint(result.params, model_config, out / "model.ckpt",
                    extra={"order": order_to_dict(order), "train_seed": train_config.seed})
    write_loss_log(out / "loss_log.csv", result.loss_log)
    plots.save_loss_curves({order.label(): result.loss_log}, out / "loss_curve.png")
    final = result.loss_log[-1][1] if result.loss_log else float("nan")
    print(f"trained order={order.label()} for {train_config.epochs} epochs, "
          f"final loss {final:.6f}")
    print(f"checkpoint: {out / 'model.ckpt'}")
    return 0


def cmd_train_ensemble(args) -> int:
    samples, vocab, m, d_region = _load_training_inputs(args)
    model_config = _model_config(args, vocab.n_attr, m, d_region)
    train_config = _train_config(args)
    spec = EnsembleSpec.standard(vocab, base_seed=args.seed)
    echo_config(args, {"model_config": model_config.to_dict(),
                       "train_config": train_config.to_dict(),
                       "orders": [order_to_dict(o) for o, _ in spec.members]})
    out = _out_dir(args)
    manifest = train_ensemble(samples, vocab, spec, train_config, model_config, out,
                              workers=args.workers,
                              train_data_path=str(Path(args.data).resolve()),
                              vocab_path=str(Path(args.vocab).resolve()))
    curves = {}
    for entry in manifest["members"]:
        if entry["status"] == "ok":
            curves[f"{entry['index']:02d} {entry['kind']}"] = \
                read_loss_log(out / f"member-{entry['index']:02d}-loss.csv")
    if curves:
        plots.save_loss_curves(curves, out / "loss_curves.png")
    ok = sum(1 for e in manifest["members"] if e["status"] == "ok")
    print(f"trained {ok}/{len(manifest['members'])} members; manifest: {out / 'manifest.json'}")
    if not manifest["complete"]:
        print("warning: ensemble is incomplete; see manifest member statuses", file=sys.stderr)
    return 0


def cmd_predict(args) -> int:
    params, config, meta = load_checkpoint_with_meta(args.checkpoint)
    samples = read_dataset(args.data)
    names = read_vocab(args.vocab).names if args.vocab else None
    pool = None
    if config.context_enabled and config.k > 0:
        if not args.train_data:
            raise ContractError(
                "this model fuses exemplar context; pass --train-data with the training JSONL")
        pool = read_dataset(args.train_data)
    echo_config(args, {"model_config": config.to_dict(), "checkpoint_meta": meta})
    runtime = MemberRuntime(params, config, meta, pool_samples=pool)
    out = _out_dir(args)
    attention_blocks = []
    n_heatmaps = 0
    with open(out / "predictions.jsonl", "w", encoding="utf-8") as fh:
        for sample in samples:
            labels, seq, att = runtime.predict(sample, collect_attention=args.dump_attention)
            record = {"id": sample.id, "attributes": [int(t) for t in seq[:-1]],
                      "labels": [int(v) for v in labels]}
            if names:
                record["names"] = [names[t] for t in seq[:-1]]
            fh.write(json.dumps(record, separators=(",", ":")) + "\n")
            if args.dump_attention and att is not None:
                attention_blocks.append((sample.id, att.T))  # rows=regions, cols=steps
                if n_heatmaps < 8:
                    plots.save_attention_heatmap(att.T, out / f"attention-{sample.id}.png",
                                                 title=sample.id)
                    n_heatmaps += 1
    if args.dump_attention:
        with open(out / "attention.csv", "w", encoding="utf-8") as fh:
            for sample_id, matrix in attention_blocks:
                fh.write(f"# id={sample_id} rows={matrix.shape[0]} cols={matrix.shape[1]}\n")
                for row in matrix:
                    fh.write(",".join(f"{v:.8f}" for v in row) + "\n")
        print(f"attention dump: {out / 'attention.csv'}")
    print(f"wrote predictions for {len(samples)} images to {out / 'predictions.jsonl'}")
    return 0


def cmd_evaluate(args) -> int:
    manifest_path = Path(args.manifest)
    manifest = read_manifest(manifest_path)
    test_samples = read_dataset(args.data)
    model_config = ModelConfig.from_dict(manifest["model_config"])
    train_samples = None
    if model_config.context_enabled and model_config.k > 0:
        pool_path = args.train_data or manifest.get("train_data")
        if not pool_path:
            raise ContractError("the ensemble uses exemplar context; pass --train-data")
        train_samples = read_dataset(pool_path)
    echo_config(args, {"model_config": model_config.to_dict()})
    report = evaluate_ensemble(manifest, test_samples, train_samples,
                               manifest_dir=manifest_path.parent)
    out = _out_dir(args)

    rows = [(label, r.values()) for label, r in zip(report.member_labels, report.members)]
    rows.append(("member-average", tuple(report.member_average[m] for m in METRIC_NAMES)))
    rows.append(("ensemble", report.voted.values()))
    table = format_report_table(rows)
    (out / "report.txt").write_text(table, encoding="utf-8")
    with open(out / "report.json", "w", encoding="utf-8") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    names = read_vocab(args.vocab).names if args.vocab else \
        [f"attr{j:02d}" for j in range(model_config.n_attr)]
    with open(out / "per_attribute_ap.csv", "w", encoding="utf-8") as fh:
        fh.write("attribute,ap\n")
        for name, ap in zip(names, report.voted.per_attribute_ap):
            fh.write(f"{name},{'' if ap is None else f'{ap:.6f}'}\n")
    plots.save_metric_bars([("member-average", tuple(report.member_average[m] for m in METRIC_NAMES)),
                            ("ensemble", report.voted.values())],
                           out / "metrics.png")
    plots.save_per_attribute_ap(report.voted.per_attribute_ap, names, out / "per_attribute_ap.png")
    print(table, end="")
    print(f"report written to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    config = ModelConfig(
        n_attr=args.n_attr, d_region=args.d_region, d=args.d, m=args.m,
        embed_dim=args.embed_dim, attn_width=args.attn_width,
        k=0 if args.no_context else args.context_k,
        attention_enabled=not args.no_attention,
        context_enabled=not args.no_context,
        encoder_enabled=not args.no_encoder,
        dropout_rate=0.0,
    )
    echo_config(args, {"model_config": config.to_dict()})
    result = model_gradient_check(config, seed=args.seed, tolerance=args.tolerance)
    width = max(len(n) for n in result.per_tensor)
    for name, err in sorted(result.per_tensor.items()):
        print(f"{name.ljust(width)}  {err:.3e}")
    print(f"max relative error: {result.max_rel_error:.3e} "
          f"({'PASS' if result.passed else 'FAIL'} at {result.tolerance:.0e})")
    return 0 if result.passed else 1


def cmd_ablate(args) -> int:
    train_samples, vocab, m, d_region = _load_training_inputs(args)
    test_samples = read_dataset(args.test_data)
    model_config = _model_config(args, vocab.n_attr, m, d_region)
    train_config = _train_config(args)
    echo_config(args, {"model_config": model_config.to_dict(),
                       "train_config": train_config.to_dict()})
    out = _out_dir(args)
    if args.robustness:
        rows = run_robustness(train_samples, test_samples, vocab, model_config, train_config)
        (out / "robustness.csv").write_text(robustness_csv(rows), encoding="utf-8")
        with open(out / "robustness.json", "w", encoding="utf-8") as fh:
            json.dump([r.to_dict() for r in rows], fh, indent=2, sort_keys=True)
            fh.write("\n")
        plots.save_comparison_bars(
            [(f"{r.percent}%", {k: 100.0 * v for k, v in r.metrics.items()}) for r in rows],
            out / "robustness.png")
        print(robustness_csv(rows), end="")
        print(f"robustness report written to {out}")
        return 0
    rows = run_ablations(train_samples, test_samples, vocab, model_config, train_config,
                         out_dir=out / "ensemble", workers=args.workers)
    (out / "ablation.csv").write_text(ablation_csv(rows), encoding="utf-8")
    with open(out / "ablation.json", "w", encoding="utf-8") as fh:
        json.dump([r.to_dict() for r in rows], fh, indent=2, sort_keys=True)
        fh.write("\n")
    plots.save_comparison_bars(
        [(r.name, {"full": 100.0 * r.full["F1_ins"], "ablated": 100.0 * r.ablated["F1_ins"]})
         for r in rows],
        out / "ablation.png", ylabel="F1_ins (%)")
    print(ablation_csv(rows), end="")
    print(f"ablation report written to {out}")
    return 0


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        apply_preset(parser, args)
        return args.func(args)
    except CliUsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ContractError, TrainingDiverged, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataFileError, CheckpointError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
