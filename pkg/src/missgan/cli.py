"""Command-line entry point: synth, train, segment, score, eval.

Configuration is a flat key=value file; every key has a matching --key
flag and flags win. All randomness flows from a single --seed.
"""

from __future__ import annotations

import argparse
import os
import sys

import numpy as np

from .data import (
    ChannelSchema,
    SyntheticSpec,
    load_csv,
    normalize_apply,
    read_kv_file,
    save_csv,
    synth_generate,
    synth_schema,
)
from .detector import anomaly_scores, evaluate
from .hmmseg import segment_series
from .numerics import pca_transform
from .trainer import Checkpoint, TrainConfig, extract_hidden_representation, missgan_fit

# key -> (type, default); schema keys hold comma-separated channel names
CONFIG_KEYS: dict[str, tuple] = {
    "lambda": (float, 0.1),
    "lr": (float, 0.001),
    "alpha": (float, 0.1),
    "l_init": (int, 512),
    "d_r": (int, 6),
    "d_h": (int, 100),
    "max_scales": (int, 5),
    "epochs": (int, 16),
    "batch_size": (int, 32),
    "seed": (int, 0),
    "decoder_feedback": (bool, True),
    "hmm_states": (int, 4),
    "norm_mode": (str, "minmax"),
    "segmentation": (bool, True),
    "seg_max_regimes": (int, 2),
    "seg_refine_rounds": (int, 2),
    "seg_em_iters": (int, 30),
    "threads": (int, 1),
    "data_channels": (str, ""),
    "cond_channels": (str, ""),
    "label_channel": (str, ""),
    "categorical_cond": (str, ""),
}


class ConfigError(ValueError):
    pass


def _coerce(key: str, value, typ):
    if typ is bool:
        if isinstance(value, bool):
            return value
        if str(value).lower() in ("1", "true", "on", "yes"):
            return True
        if str(value).lower() in ("0", "false", "off", "no"):
            return False
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as bool")
    try:
        return typ(value)
    except (TypeError, ValueError):
        raise ConfigError(f"key {key!r}: cannot parse {value!r} as {typ.__name__}") from None


def parse_config(path: str | None, overrides: dict | None = None) -> dict:
    """defaults <- file <- flags, later wins; unknown keys are errors."""
    merged = {k: d for k, (_, d) in CONFIG_KEYS.items()}
    if path:
        for key, val in read_kv_file(path).items():
            if key not in CONFIG_KEYS:
                raise ConfigError(f"unknown config key {key!r}")
            merged[key] = _coerce(key, val, CONFIG_KEYS[key][0])
    for key, val in (overrides or {}).items():
        if val is None:
            continue
        if key not in CONFIG_KEYS:
            raise ConfigError(f"unknown config key {key!r}")
        merged[key] = _coerce(key, val, CONFIG_KEYS[key][0])
    return merged


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        lam=cfg["lambda"], lr=cfg["lr"], alpha=cfg["alpha"], l_init=cfg["l_init"],
        d_r=cfg["d_r"], d_h=cfg["d_h"], max_scales=cfg["max_scales"],
        epochs=cfg["epochs"], batch_size=cfg["batch_size"], seed=cfg["seed"],
        decoder_feedback=cfg["decoder_feedback"], hmm_states=cfg["hmm_states"],
        norm_mode=cfg["norm_mode"], segmentation=cfg["segmentation"],
        seg_max_regimes=cfg["seg_max_regimes"],
        seg_refine_rounds=cfg["seg_refine_rounds"],
        seg_em_iters=cfg["seg_em_iters"],
    )


def _split_names(text: str) -> tuple[str, ...]:
    return tuple(v.strip() for v in text.split(",") if v.strip())


def _schema_from_config(cfg: dict, csv_path: str) -> ChannelSchema:
    data = _split_names(cfg["data_channels"])
    cond = _split_names(cfg["cond_channels"])
    label = cfg["label_channel"] or None
    cat = _split_names(cfg["categorical_cond"])
    if not data:
        # infer from the header: mode* columns are conditionals, a column
        # named 'label' holds labels, everything else is data
        with open(csv_path, "r", encoding="utf-8") as fh:
            header = [h.strip() for h in fh.readline().split(",")]
        cond = tuple(h for h in header if h.startswith("mode"))
        label = "label" if "label" in header else None
        data = tuple(h for h in header if h not in cond and h != label)
        cat = cond
    return ChannelSchema(data_channels=data, cond_channels=cond,
                         label_channel=label, categorical_cond=cat)


def _add_config_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", metavar="F", help="key=value config file")
    for key, (typ, _) in CONFIG_KEYS.items():
        flag = "--" + key
        if typ is bool:
            parser.add_argument(flag, dest=f"cfg_{key}", default=None,
                                metavar="BOOL", help=f"config key {key}")
        else:
            parser.add_argument(flag, dest=f"cfg_{key}", default=None,
                                type=str, metavar=key.upper(),
                                help=f"config key {key}")


def _collect_overrides(args) -> dict:
    return {key: getattr(args, f"cfg_{key}") for key in CONFIG_KEYS
            if getattr(args, f"cfg_{key}", None) is not None}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="missgan",
                                     description=__doc__.split("\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit the model and write a checkpoint")
    p_train.add_argument("--data", metavar="F", required=True)
    p_train.add_argument("--out", metavar="F", default="missgan.ckpt")
    _add_config_flags(p_train)

    p_seg = sub.add_parser("segment", help="segment a series with a checkpoint's encoder")
    p_seg.add_argument("--checkpoint", metavar="F", required=True)
    p_seg.add_argument("--data", metavar="F", required=True)
    p_seg.add_argument("--out", metavar="F", required=True)
    _add_config_flags(p_seg)

    p_score = sub.add_parser("score", help="per-tick anomaly scores as CSV")
    p_score.add_argument("--checkpoint", metavar="F", required=True)
    p_score.add_argument("--data", metavar="F", required=True)
    p_score.add_argument("--out", metavar="F", required=True)
    p_score.add_argument("--heatmap", metavar="F", default=None,
                         help="also export per-channel absolute errors")
    _add_config_flags(p_score)

    p_eval = sub.add_parser("eval", help="AUC / ideal F1 from a labeled scores CSV")
    p_eval.add_argument("--scores", metavar="F", required=True)
    p_eval.add_argument("--out", metavar="F", default=None)
    _add_config_flags(p_eval)

    p_synth = sub.add_parser("synth", help="generate a labeled synthetic series")
    p_synth.add_argument("--spec", metavar="F", required=True)
    p_synth.add_argument("--out", metavar="F", required=True)
    _add_config_flags(p_synth)
    return parser


def cmd_train(args, cfg: dict) -> int:
    schema = _schema_from_config(cfg, args.data)
    series = load_csv(args.data, schema)
    ck = missgan_fit(series, _train_config(cfg), schema=schema,
                     progress=lambda msg: print(msg, file=sys.stderr))
    ck.save(args.out)
    print(f"checkpoint written to {args.out}")
    return 0


def cmd_segment(args, cfg: dict) -> int:
    ck = Checkpoint.load(args.checkpoint)
    series = load_csv(args.data, ck.schema)
    norm = normalize_apply(series, ck.norm_stats)
    if ck.projection is None:
        print("checkpoint has no PCA projection (trained without segmentation)",
              file=sys.stderr)
        return 1
    from .data import coarse_segment
    bounds = coarse_segment(norm.t, ck.config.l_init)
    hidden = extract_hidden_representation(ck.model, norm, bounds)
    reduced = pca_transform(ck.projection, hidden)
    seg, regimes = segment_series(reduced, ck.config.alpha, k=ck.config.hmm_states,
                                  seed=ck.config.seed,
                                  em_iters=ck.config.seg_em_iters,
                                  refine_rounds=ck.config.seg_refine_rounds,
                                  max_regimes=ck.config.seg_max_regimes)
    seg.export(args.out, ck.config.alpha, regimes.r)
    print(f"segmentation written to {args.out}")
    return 0


def cmd_score(args, cfg: dict) -> int:
    ck = Checkpoint.load(args.checkpoint)
    series = load_csv(args.data, ck.schema)
    norm = normalize_apply(series, ck.norm_stats)
    report = anomaly_scores(ck, norm)
    report.write_scores_csv(args.out, labels=series.labels)
    if args.heatmap:
        report.write_heatmap_csv(args.heatmap, ck.schema.data_channels)
    print(f"scores written to {args.out}")
    return 0


def cmd_eval(args, cfg: dict) -> int:
    import csv as csvmod
    with open(args.scores, "r", encoding="utf-8") as fh:
        reader = csvmod.DictReader(fh)
        if reader.fieldnames is None or "label" not in reader.fieldnames:
            print("scores file has no label column; cannot evaluate", file=sys.stderr)
            return 1
        scores, labels = [], []
        for row in reader:
            scores.append(float(row["scaled_score"]))
            labels.append(int(row["label"]))
    res = evaluate(np.asarray(scores), np.asarray(labels))
    lines = [f"auc={res.auc!r}", f"ideal_f1={res.ideal_f1!r}",
             f"threshold={res.threshold!r}", f"precision={res.precision!r}",
             f"recall={res.recall!r}", f"tp={res.tp}", f"fp={res.fp}",
             f"fn={res.fn}", f"tn={res.tn}"]
    text = "\n".join(lines) + "\n"
    if args.out:
        with open(args.out, "w", encoding="utf-8") as fh:
            fh.write(text)
    print(text, end="")
    return 0


def cmd_synth(args, cfg: dict) -> int:
    spec = SyntheticSpec.from_file(args.spec)
    series = synth_generate(spec)
    save_csv(args.out, series, synth_schema(spec))
    print(f"synthetic series ({series.t} ticks) written to {args.out}")
    return 0


COMMANDS = {
    "train": cmd_train,
    "segment": cmd_segment,
    "score": cmd_score,
    "eval": cmd_eval,
    "synth": cmd_synth,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = _collect_overrides(args)
        if "MISSGAN_THREADS" in os.environ and "threads" not in overrides:
            overrides["threads"] = os.environ["MISSGAN_THREADS"]
        cfg = parse_config(getattr(args, "config", None), overrides)
        return COMMANDS[args.command](args, cfg)
    except (ConfigError, ValueError, OSError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
