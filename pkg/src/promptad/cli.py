"""Command-line entry point: train / infer / eval / cnf.

Configuration comes from one flat JSON file (``--config`` or the
``PROMPTAD_CONFIG`` environment variable); command-line flags override file
values.  Every command writes a ``resolved_config.json`` beside its outputs,
and re-running from that snapshot reproduces the outputs bit-exactly with the
synthetic encoder.  Exit codes: 0 ok, 1 usage, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

from .cnf import apply_cnf, majority_filter, strip_numeric
from .config import RunConfig
from .data import DatasetManifest, load_sample, scan_dataset
from .encoder import load_encoder
from .export import export_result, has_prediction, load_prediction
from .metrics import EvalSample, evaluate
from .plots import save_loss_curve, save_metric_bars
from .scoring import Pipeline
from .train import load_checkpoint, spec_from_header, train, write_checkpoint

CONFIG_ENV_VAR = "PROMPTAD_CONFIG"


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # usage problems exit 1, not argparse's 2
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _load_config(args) -> RunConfig:
    path = getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR)
    return RunConfig.from_file(path) if path else RunConfig()


def _build_encoder(cfg: RunConfig):
    return load_encoder(cfg.encoder, cfg.encoder_spec(), cfg.encoder_weights)


def _out_dir(cfg: RunConfig, fallback: str) -> Path:
    out = Path(cfg.output_dir or fallback)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _run_header(cfg: RunConfig) -> str:
    return (
        f"alpha={cfg.alpha} sigma={cfg.sigma} n1={cfg.n1} n2={cfg.n2} "
        f"temperature={cfg.temperature} lr={cfg.learning_rate} epochs={cfg.epochs} "
        f"batch_size={cfg.batch_size} seed={cfg.seed}"
    )


# -- train -----------------------------------------------------------------


def cmd_train(args) -> int:
    cfg = _load_config(args).override(
        data_root=args.data, output_dir=args.out, seed=args.seed,
        epochs=args.epochs, learning_rate=args.learning_rate,
        batch_size=args.batch_size,
    )
    if not cfg.data_root:
        raise ValueError("training needs a dataset root (--data or config data_root)")
    out = _out_dir(cfg, "runs/train")
    cfg = cfg.override(output_dir=str(out))
    cfg.save_snapshot(out)

    manifest = scan_dataset(cfg.data_root)
    encoder = _build_encoder(cfg)
    dataset_id = cfg.dataset_id or Path(cfg.data_root).name

    header = _run_header(cfg)
    print(f"train: {header}")
    result = train(
        manifest,
        encoder,
        train_cfg=cfg.train_config(),
        loss_cfg=cfg.loss_config(),
        scoring_cfg=cfg.scoring_config(),
        dataset_id=dataset_id,
    )

    ckpt_path = out / "checkpoint.ckpt"
    write_checkpoint(result.checkpoint, ckpt_path)
    log_path = out / "train_log.txt"
    log_path.write_text(f"# {header}\n" + "\n".join(result.log_lines()) + "\n")
    save_loss_curve(result.log_records, out / "loss_curve.png")

    first, last = result.log_records[0]["loss"], result.log_records[-1]["loss"]
    print(f"trained {len(result.log_records)} steps; loss {first:.6f} -> {last:.6f}")
    print(f"checkpoint: {ckpt_path}")
    print(f"log: {log_path}")
    return 0


# -- infer -------------------------------------------------------------------


def _config_from_header(header: dict) -> RunConfig:
    es, sc = header["encoder_spec"], header["scoring_config"]
    lc, tc = header["loss_config"], header["train_config"]
    return RunConfig(
        dataset_id=header.get("dataset_id", ""),
        encoder_seed=es["seed"],
        image_size=es["image_size"],
        patch_size=es["patch_size"],
        num_vision_layers=es["num_vision_layers"],
        selected_layers=tuple(es["selected_layers"]),
        vision_dims=tuple(es["vision_dims"]),
        text_dim=es["text_dim"],
        text_seq_len=es["text_seq_len"],
        num_text_layers=es["num_text_layers"],
        alpha=sc["alpha"], sigma=sc["sigma"], n1=sc["n1"], n2=sc["n2"],
        temperature=sc["temperature"],
        dice_epsilon=lc["dice_epsilon"], focal_alpha=lc["focal_alpha"],
        focal_gamma=lc["focal_gamma"],
        learning_rate=tc["learning_rate"], epochs=tc["epochs"],
        batch_size=tc["batch_size"], train_split=tc["train_split"],
        seed=tc["seed"],
    )


def cmd_infer(args) -> int:
    bank, header = load_checkpoint(args.checkpoint)
    spec = spec_from_header(header)

    if getattr(args, "config", None) or os.environ.get(CONFIG_ENV_VAR):
        cfg = _load_config(args)
        if cfg.encoder_spec() != spec:
            raise ValueError(
                "checkpoint and config disagree on the encoder spec; "
                "refusing to run with mismatched features"
            )
    else:
        cfg = _config_from_header(header)

    cfg = cfg.override(
        data_root=args.data, output_dir=args.out, alpha=args.alpha,
        sigma=args.sigma, n1=args.n1, n2=args.n2,
        generic_term=args.generic_term, workers=args.workers,
        cnf_per_class=True if args.per_class_cnf else None,
    )
    if args.no_cnf:
        cfg = cfg.override(cnf_enabled=False)

    if args.manifest:
        manifest = DatasetManifest.load(args.manifest)
    elif cfg.data_root:
        manifest = scan_dataset(cfg.data_root)
    else:
        raise ValueError("inference needs --data, --manifest, or config data_root")
    entries = manifest.select(split=args.split)
    if not entries:
        raise ValueError(f"no '{args.split}' entries to run inference on")

    out = _out_dir(cfg, "runs/infer")
    cfg = cfg.override(output_dir=str(out))
    cfg.save_snapshot(out)

    encoder = _build_encoder(cfg)
    cnf_cfg = cfg.cnf_config()
    pipeline = Pipeline(bank, encoder, scoring=cfg.scoring_config(), cnf=cnf_cfg)
    _ = pipeline.query_pair  # build the query-only cache before any workers start

    overrides: dict[str, str] = {}
    if cnf_cfg.per_class:
        for cls in manifest.classes:
            cls_entries = [e for e in entries if e.class_name == cls]
            images = (load_sample(e, spec.image_size).image for e in cls_entries)
            overrides[cls] = majority_filter(images, cls, cnf_cfg, encoder)

    def run_one(entry):
        sample = load_sample(entry, spec.image_size)
        result = pipeline.infer(
            sample.image,
            entry.class_name,
            class_name_override=overrides.get(entry.class_name),
        )
        export_result(result, entry, out, dump_raw=args.dump_raw)

    if cfg.workers > 1:
        with ThreadPoolExecutor(max_workers=cfg.workers) as pool:
            list(pool.map(run_one, entries))
    else:
        for entry in entries:
            run_one(entry)

    print(f"wrote {len(entries)} score maps to {out}")
    return 0


# -- eval --------------------------------------------------------------------


def cmd_eval(args) -> int:
    cfg = _load_config(args).override(
        data_root=args.data, output_dir=args.out,
        aupro_fpr_limit=args.fpr_limit, aupro_thresholds=args.num_thresholds,
        metric_pooling=args.pooling, workers=args.workers,
    )
    if not cfg.data_root:
        raise ValueError("evaluation needs a dataset root (--data or config data_root)")
    pred_dir = Path(args.pred)
    if not pred_dir.is_dir():
        raise ValueError(f"prediction directory does not exist: {pred_dir}")

    manifest = scan_dataset(cfg.data_root)
    entries = manifest.select(split="test")
    missing = [e.image_path for e in entries if not has_prediction(pred_dir, e)]
    if missing:
        listing = "\n  ".join(missing)
        raise ValueError(f"missing predictions for {len(missing)} test images:\n  {listing}")

    samples = []
    for entry in entries:
        s_seg, sidecar = load_prediction(pred_dir, entry)
        gt = load_sample(entry, sidecar["height"]).gt_map
        samples.append(
            EvalSample(
                class_name=entry.class_name,
                s_seg=s_seg,
                gt_map=gt,
                s_det=float(sidecar["s_det"]),
                image_label=int(gt.max() > 0),
            )
        )

    report = evaluate(
        samples,
        fpr_limit=cfg.aupro_fpr_limit,
        num_thresholds=cfg.aupro_thresholds,
        pooling=cfg.metric_pooling,
        workers=cfg.workers,
    )

    out = _out_dir(cfg, str(pred_dir))
    cfg = cfg.override(output_dir=str(out))
    cfg.save_snapshot(out)
    csv_path = out / "metrics.csv"
    report.save_csv(csv_path)
    save_metric_bars(report, out / "metrics.png")
    sys.stdout.write(report.to_csv())
    print(f"report: {csv_path}")
    return 0


# -- cnf ---------------------------------------------------------------------


def cmd_cnf(args) -> int:
    cfg = _load_config(args).override(
        data_root=args.data, output_dir=args.out, generic_term=args.generic_term,
        cnf_per_class=True if args.per_class else None,
    )
    if args.no_cnf:
        cfg = cfg.override(cnf_enabled=False)
    if not cfg.data_root:
        raise ValueError("cnf needs a dataset root (--data or config data_root)")

    out = _out_dir(cfg, "runs/cnf")
    cfg = cfg.override(output_dir=str(out))
    cfg.save_snapshot(out)

    manifest = scan_dataset(cfg.data_root)
    entries = manifest.select(split="test")
    encoder = _build_encoder(cfg)
    cnf_cfg = cfg.cnf_config()

    rows = []
    if cnf_cfg.per_class:
        finals = {}
        for cls in manifest.classes:
            cls_entries = [e for e in entries if e.class_name == cls]
            images = (load_sample(e, cfg.image_size).image for e in cls_entries)
            finals[cls] = majority_filter(images, cls, cnf_cfg, encoder)
        for e in entries:
            rows.append((e.image_path, e.class_name, strip_numeric(e.class_name),
                         finals[e.class_name]))
    else:
        for e in entries:
            sample = load_sample(e, cfg.image_size)
            decision = apply_cnf(sample.image, e.class_name, cnf_cfg, encoder)
            rows.append((e.image_path, decision.original, decision.stripped, decision.final))

    csv_path = Path(out) / "cnf_decisions.csv"
    with open(csv_path, "w", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(["image", "original", "stripped", "final"])
        writer.writerows(rows)

    replaced = sum(1 for r in rows if r[3] != r[2])
    print(f"{len(rows)} images, {replaced} class names replaced by "
          f"'{cnf_cfg.generic_term}'")
    print(f"decisions: {csv_path}")
    return 0


# -- wiring --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="promptad",
        description="Zero-shot anomaly detection via multi-layer prompt learning",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="optimize prompt parameters on a dataset")
    p_train.add_argument("--config", "-c", help=f"run config JSON (or ${CONFIG_ENV_VAR})")
    p_train.add_argument("--data", help="dataset root (MVTec layout)")
    p_train.add_argument("--out", help="output directory")
    p_train.add_argument("--seed", type=int)
    p_train.add_argument("--epochs", type=int)
    p_train.add_argument("--learning-rate", type=float, dest="learning_rate")
    p_train.add_argument("--batch-size", type=int, dest="batch_size")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="score images with a trained checkpoint")
    p_infer.add_argument("checkpoint", help="checkpoint file from train")
    p_infer.add_argument("--config", "-c")
    p_infer.add_argument("--data", help="dataset root to scan")
    p_infer.add_argument("--manifest", help="manifest JSON instead of a dataset root")
    p_infer.add_argument("--out", help="output directory")
    p_infer.add_argument("--split", default="test")
    p_infer.add_argument("--alpha", type=float)
    p_infer.add_argument("--sigma", type=float)
    p_infer.add_argument("--n1", type=int)
    p_infer.add_argument("--n2", type=int)
    p_infer.add_argument("--no-cnf", action="store_true")
    p_infer.add_argument("--generic-term", dest="generic_term")
    p_infer.add_argument("--per-class-cnf", action="store_true")
    p_infer.add_argument("--workers", type=int)
    p_infer.add_argument("--dump-raw", action="store_true",
                         help="also write exact float32 .npy maps")
    p_infer.set_defaults(func=cmd_infer)

    p_eval = sub.add_parser("eval", help="score predictions against ground truth")
    p_eval.add_argument("--pred", required=True, help="directory of exported score maps")
    p_eval.add_argument("--data", help="dataset root (MVTec layout)")
    p_eval.add_argument("--config", "-c")
    p_eval.add_argument("--out", help="output directory (default: prediction dir)")
    p_eval.add_argument("--fpr-limit", type=float, dest="fpr_limit")
    p_eval.add_argument("--num-thresholds", type=int, dest="num_thresholds")
    p_eval.add_argument("--pooling", choices=["per_class", "global"])
    p_eval.add_argument("--workers", type=int)
    p_eval.set_defaults(func=cmd_eval)

    p_cnf = sub.add_parser("cnf", help="report class-name-filter decisions per image")
    p_cnf.add_argument("--data", help="dataset root (MVTec layout)")
    p_cnf.add_argument("--config", "-c")
    p_cnf.add_argument("--out", help="output directory")
    p_cnf.add_argument("--generic-term", dest="generic_term")
    p_cnf.add_argument("--no-cnf", action="store_true")
    p_cnf.add_argument("--per-class", action="store_true")
    p_cnf.set_defaults(func=cmd_cnf)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # runtime failures exit 2 with a message
        print(f"promptad: error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
