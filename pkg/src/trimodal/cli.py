"""Operator surface: gen / pretrain / finetune / eval / gradcheck.

Every subcommand is deterministic given its config and seed, and writes
only inside its ``--out`` directory.  Exit codes: 0 ok, 1 usage error,
2 data error, 3 verification failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from .config import (
    CONFIG_SCHEMA,
    ConfigError,
    build_config,
    resolve_out_dir,
)
from .data import Cohort, CohortError, CohortSpec, generate_cohort, \
    load_cohort, save_cohort, split
from .finetune import (
    TASKS,
    FinetuneConfig,
    attach_task_heads,
    evaluate_task,
    finetune_loop,
    param_bytes_hash,
)
from .metrics import write_metrics
from .model import ModelConfig, TriModalModel
from .numerics import AdamState, load_arrays, save_arrays, CheckpointError
from .pretrain import PretrainConfig, pretrain_loop
from .utils import get_logger

log = get_logger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_VERIFY = 3


class _Parser(argparse.ArgumentParser):
    """argparse that exits with the documented usage code."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _add_config_flags(parser):
    parser.add_argument("--config", default=None,
                        help="key = value config file")
    parser.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="KEY=VALUE",
                        help="override one config key (repeatable)")


def _parse_overrides(pairs):
    out = {}
    for pair in pairs:
        if "=" not in pair:
            raise ConfigError(f"override must look like key=value: {pair!r}")
        key, value = pair.split("=", 1)
        out[key.strip()] = value.strip()
    return out


def _model_config_from_run(cfg, cohort):
    spec = cohort.spec
    return ModelConfig(
        hidden_dim=cfg.hidden_dim, heads=cfg.heads, n_blocks=cfg.n_blocks,
        encoder_depth=cfg.encoder_depth, feat_dim=spec.feat_dim,
        n_genes=spec.n_genes, n_bins=spec.bins, vocab_size=spec.vocab_size,
        max_text_len=spec.n_text, region_a=cfg.region_a,
        region_b=cfg.region_b, use_type_embeddings=cfg.use_type_embeddings)


# -- checkpoint plumbing ----------------------------------------------------


def save_model_checkpoint(path, model, meta, adam=None, param_names=None):
    arrays = model.state_arrays()
    if adam is not None:
        names = param_names or [n for n, _ in model.named_parameters()]
        arrays.append(("optim.step", np.array(float(adam.step))))
        for name, m, v in zip(names, adam.m or [], adam.v or []):
            arrays.append((f"optim.m.{name}", m))
            arrays.append((f"optim.v.{name}", v))
    save_arrays(path, arrays, meta=meta)


def load_model_checkpoint(path):
    meta, arrays = load_arrays(path)
    cfg = ModelConfig.from_dict(meta["model_config"])
    model = TriModalModel(cfg, seed=meta.get("init_seed", 0))
    if meta.get("task"):
        attach_task_heads(model, meta["task"],
                          meta.get("n_classes", 2),
                          rng=np.random.default_rng(meta.get("head_seed", 0)))
    model.load_state(arrays)
    adam = None
    if "optim.step" in arrays:
        adam = AdamState(lr=meta.get("lr", 1e-3))
        adam.step = int(arrays["optim.step"])
        names = [n for n, _ in model.named_parameters()]
        adam.m = [arrays[f"optim.m.{n}"].copy() for n in names]
        adam.v = [arrays[f"optim.v.{n}"].copy() for n in names]
    return model, meta, adam


# -- subcommands ---------------------------------------------------------------


def cmd_gen(args):
    try:
        spec = CohortSpec(
            n=args.n, classes=args.classes, latent_dim=args.latent_dim,
            n_patches=args.n_patches, n_genes=args.n_genes,
            n_text=args.n_text, feat_dim=args.feat_dim,
            pathway_size=args.pathway_size, missing_h=args.missing_h,
            missing_g=args.missing_g, missing_t=args.missing_t,
            noise=args.noise, censor_rate=args.censor_rate, seed=args.seed)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = resolve_out_dir(args.out)
    cohort = generate_cohort(spec)
    save_cohort(out / "cohort.bin", cohort)
    with open(out / "manifest.txt", "w") as fh:
        for key, value in sorted(asdict(spec).items()):
            fh.write(f"{key} = {value}\n")
    log.info("wrote %s (%d records)", out / "cohort.bin", len(cohort))
    return EXIT_OK


def cmd_pretrain(args):
    try:
        cfg = build_config(args.config, _parse_overrides(args.overrides))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cohort = load_cohort(args.cohort)
    except (OSError, CohortError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = resolve_out_dir(args.out)

    start_epoch = 0
    adam = None
    if args.resume:
        try:
            model, meta, adam = load_model_checkpoint(args.resume)
        except (OSError, CheckpointError, KeyError, ValueError) as exc:
            print(f"error: cannot resume: {exc}", file=sys.stderr)
            return EXIT_DATA
        start_epoch = int(meta["epochs_done"])
        if adam is not None:
            adam.lr = cfg.lr
    else:
        model = TriModalModel(_model_config_from_run(cfg, cohort),
                              seed=cfg.seed)
        model.pretrain_heads.log_tau.data = np.array(np.log(cfg.tau_init))

    pcfg = PretrainConfig(
        epochs=cfg.epochs, batch_size=cfg.batch_size, lr=cfg.lr,
        alpha=cfg.alpha, beta=cfg.beta, mask_ratio=cfg.mask_ratio,
        margin=cfg.margin, triplet_cap=cfg.triplet_cap,
        mlm_switch_period=cfg.mlm_switch_period, seed=cfg.seed,
        clip_grad_norm=cfg.clip_grad_norm or None)

    adam, history = pretrain_loop(cohort.records, cohort.partition,
                                  cohort.bin_edges, model, pcfg,
                                  start_epoch=start_epoch, adam=adam)
    meta = {
        "kind": "pretrain",
        "model_config": model.config.to_dict(),
        "init_seed": cfg.seed,
        "epochs_done": cfg.epochs,
        "lr": cfg.lr,
        "run_config": cfg.as_dict(),
    }
    save_model_checkpoint(out / "checkpoint.bin", model, meta, adam=adam)
    mode = "a" if args.resume and (out / "losses.csv").exists() else "w"
    with open(out / "losses.csv", mode, newline="") as fh:
        writer = csv.writer(fh)
        if mode == "w":
            writer.writerow(["epoch", "batch", "mlm_modality", "mlm", "clip",
                             "triplet", "total"])
        for row in history:
            writer.writerow([row["epoch"], row["batch"], row["mlm_modality"],
                             f"{row['mlm']:.10g}", f"{row['clip']:.10g}",
                             f"{row['triplet']:.10g}", f"{row['total']:.10g}"])
    log.info("pretrained %d epochs; checkpoint at %s", cfg.epochs,
             out / "checkpoint.bin")
    return EXIT_OK


def cmd_finetune(args):
    if args.task not in TASKS:
        print(f"error: task must be one of {', '.join(TASKS)}",
              file=sys.stderr)
        return EXIT_USAGE
    try:
        cfg = build_config(args.config, _parse_overrides(args.overrides))
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        cohort = load_cohort(args.cohort)
        model, meta, _ = load_model_checkpoint(args.checkpoint)
    except (OSError, CohortError, CheckpointError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    out = resolve_out_dir(args.out)

    if args.task == "subtype":
        n_classes = cohort.spec.classes
    elif args.task == "mutation":
        n_classes = 2
    elif args.task == "survival-nll":
        n_classes = cfg.n_time_bins
    else:
        n_classes = 2
    attach_task_heads(model, args.task, n_classes,
                      rng=np.random.default_rng([cfg.seed, 0xF1]))

    freeze = bool(args.freeze_fusion or cfg.freeze_fusion)
    trunk_before = param_bytes_hash(model)
    tr, va, te = split(cohort, seed=cfg.seed)
    fcfg = FinetuneConfig(epochs=cfg.epochs, batch_size=cfg.batch_size,
                          lr=cfg.lr, seed=cfg.seed,
                          n_time_bins=cfg.n_time_bins, freeze_fusion=freeze)
    try:
        _, history, time_edges = finetune_loop(
            model, cohort.records, tr, cohort.partition, cohort.bin_edges,
            args.task, fcfg)
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    trunk_after = param_bytes_hash(model)
    if freeze and trunk_before != trunk_after:
        print("error: frozen encoder/fusion parameters changed",
              file=sys.stderr)
        return EXIT_VERIFY

    ckpt_meta = {
        "kind": "finetune",
        "task": args.task,
        "n_classes": n_classes,
        "model_config": model.config.to_dict(),
        "init_seed": meta.get("init_seed", 0),
        "head_seed": cfg.seed,
        "freeze_fusion": freeze,
        "trunk_hash": trunk_after,
        "time_bin_edges": None if time_edges is None else
            np.asarray(time_edges).tolist(),
        "splits": {"train": tr.tolist(), "val": va.tolist(),
                   "test": te.tolist()},
        "run_config": cfg.as_dict(),
    }
    save_model_checkpoint(out / "task_checkpoint.bin", model, ckpt_meta)
    metrics = evaluate_task(model, cohort.records, te, cohort.partition,
                            cohort.bin_edges, args.task,
                            time_edges=time_edges)
    metrics["final_train_loss"] = history[-1]["loss"] if history else None
    write_metrics(out / "metrics", metrics)
    log.info("finetuned %s; metrics: %s", args.task, metrics)
    return EXIT_OK


def cmd_eval(args):
    try:
        cohort = load_cohort(args.cohort)
        model, meta, _ = load_model_checkpoint(args.checkpoint)
    except (OSError, CohortError, CheckpointError, KeyError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    if meta.get("kind") != "finetune":
        print("error: eval needs a fine-tuned task checkpoint",
              file=sys.stderr)
        return EXIT_DATA
    if model.config.feat_dim != cohort.spec.feat_dim \
            or model.config.n_genes != cohort.spec.n_genes \
            or model.config.vocab_size != cohort.spec.vocab_size:
        print("error: checkpoint dimensions do not match the cohort",
              file=sys.stderr)
        return EXIT_DATA
    splits = meta["splits"]
    if args.split not in splits:
        print(f"error: split must be one of {sorted(splits)}", file=sys.stderr)
        return EXIT_USAGE
    idx = np.array(splits[args.split], dtype=int)
    if args.split == "test":
        overlap = set(idx) & set(splits["train"])
        if overlap:
            print("error: stored test split overlaps train", file=sys.stderr)
            return EXIT_VERIFY
    out = resolve_out_dir(args.out)
    edges = meta.get("time_bin_edges")
    try:
        metrics = evaluate_task(
            model, cohort.records, idx, cohort.partition, cohort.bin_edges,
            meta["task"],
            time_edges=None if edges is None else np.array(edges))
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    write_metrics(out / "metrics", metrics)
    log.info("evaluated %s on %s: %s", meta["task"], args.split, metrics)
    return EXIT_OK


def cmd_gradcheck(args):
    from .verify import COX_TOLERANCE, GRADCHECK_TOLERANCE, run_gradcheck

    def progress(name, err):
        status = "PASS" if err < GRADCHECK_TOLERANCE else "FAIL"
        print(f"{name:24s} max_rel_err={err:.3e}  {status}")

    results, cox_dev = run_gradcheck(
        seed=args.seed, coords_per_param=args.coords,
        corrupt_component=args.inject_wrong_sign, progress=progress)
    cox_status = "PASS" if cox_dev < COX_TOLERANCE else "FAIL"
    print(f"{'cox_closed_form':24s} max_abs_dev={cox_dev:.3e}  {cox_status}")
    failed = [k for k, v in results.items() if v >= GRADCHECK_TOLERANCE]
    if cox_dev >= COX_TOLERANCE:
        failed.append("cox_closed_form")
    if failed:
        print(f"gradcheck FAILED: {', '.join(failed)}", file=sys.stderr)
        return EXIT_VERIFY
    print("gradcheck passed")
    return EXIT_OK


def build_parser():
    parser = _Parser(prog="trimodal",
                     description="Tri-modal pretraining engine")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic cohort",
                       parents=[], add_help=True)
    g.add_argument("--n", type=int, required=True)
    g.add_argument("--classes", type=int, default=4)
    g.add_argument("--latent-dim", type=int, default=8)
    g.add_argument("--n-patches", type=int, default=25)
    g.add_argument("--n-genes", type=int, default=32)
    g.add_argument("--n-text", type=int, default=16)
    g.add_argument("--feat-dim", type=int, default=24)
    g.add_argument("--pathway-size", type=int, default=4)
    g.add_argument("--missing-h", type=float, default=0.0)
    g.add_argument("--missing-g", type=float, default=0.0)
    g.add_argument("--missing-t", type=float, default=0.0)
    g.add_argument("--noise", type=float, default=0.1)
    g.add_argument("--censor-rate", type=float, default=0.3)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    p = sub.add_parser("pretrain", help="run the pretraining schedule")
    p.add_argument("--cohort", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--resume", default=None,
                   help="checkpoint to continue from (epoch boundary)")
    _add_config_flags(p)
    p.set_defaults(func=cmd_pretrain)

    f = sub.add_parser("finetune", help="train a task head")
    f.add_argument("--task", required=True, choices=TASKS)
    f.add_argument("--checkpoint", required=True)
    f.add_argument("--cohort", required=True)
    f.add_argument("--out", required=True)
    f.add_argument("--freeze-fusion", action="store_true",
                   help="train only the task head; trunk bytes asserted fixed")
    _add_config_flags(f)
    f.set_defaults(func=cmd_finetune)

    e = sub.add_parser("eval", help="evaluate a fine-tuned checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--cohort", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck",
                       help="verify gradients against central differences")
    c.add_argument("--seed", type=int, default=0)
    c.add_argument("--coords", type=int, default=8,
                   help="probed coordinates per parameter tensor")
    c.add_argument("--inject-wrong-sign", default=None, metavar="COMPONENT",
                   help="test hook: corrupt one component's gradient")
    c.set_defaults(func=cmd_gradcheck)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return exc.code if exc.code is not None else EXIT_USAGE
    try:
        return args.func(args)
    except (CohortError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
