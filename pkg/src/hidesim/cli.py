"""``hidesim`` command line: corpus generation, federated training, attacks, reports.

Output layout under ``--out`` (default: the config's ``out_dir``)::

    corpus/   train.tsv test.tsv public.tsv stats.json
    train/    checkpoint.thmc optimizer.thmo checkpoint.json rounds.jsonl train_summary.json
    attacks/<name>/   trials.jsonl, CSV tables, meta.json
    report/   summary.csv summary.json

Every output directory carries a ``meta.json`` sidecar with the config hash
and seed. Nothing time- or host-dependent is written, so equal configs give
equal bytes whatever ``--workers`` is.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import model as M
from .attacks.gradmatch import AttackConfig, VictimDims
from .attacks.reprecon import ReconConfig
from .attacks.rss import DegenerateQueryError
from .config import ExperimentConfig, config_hash, load_config
from .corpus import CorpusError, build_vocab, gen_synthetic, load_tsv, write_tsv
from .experiments import (
    grad_match_grid,
    grad_match_scenarios,
    reprecon_experiment,
    rss_experiment,
    split_stratified,
    subset_sum_experiment,
)
from .fedsim import TrainSettings, TrainingError, evaluate, run_training
from .metrics import MetricsError, metrics_csv_rows
from .numerics import RNG_VERSION, ConfigurationError, RngStream

log = logging.getLogger("hidesim")


class CommandError(RuntimeError):
    """Reported to the user as a one-line error with exit status 1."""


# -- small file helpers -------------------------------------------------------


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(text)


def _write_json(path: Path, obj) -> None:
    _write_text(path, json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _write_jsonl(path: Path, records) -> None:
    _write_text(path, "".join(json.dumps(r, sort_keys=True) + "\n" for r in records))


def _write_csv(path: Path, rows) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerows(rows)


def _meta(cfg: ExperimentConfig, command: str, **extra) -> dict:
    return {"command": command, "config_hash": config_hash(cfg), "seed": cfg.seed, "rng": RNG_VERSION, **extra}


# -- data loading -------------------------------------------------------------


def _corpus_paths(cfg: ExperimentConfig, out: Path) -> dict:
    c = cfg.corpus
    gen = out / "corpus"
    return {
        "train": Path(c.train_path) if c.train_path else gen / "train.tsv",
        "test": Path(c.test_path) if c.test_path else gen / "test.tsv",
        "public": Path(c.public_path) if c.public_path else gen / "public.tsv",
    }


def load_corpus(cfg: ExperimentConfig, out: Path) -> tuple:
    paths = _corpus_paths(cfg, out)
    for role in ("train", "test"):
        if not paths[role].exists():
            raise CommandError(f"corpus file {paths[role]} not found; run `hidesim gen-corpus` first")
    n_cls = cfg.corpus.synthetic.num_classes if not cfg.corpus.train_path else None
    train = load_tsv(paths["train"], n_cls)
    test = load_tsv(paths["test"], train.num_classes)
    public = load_tsv(paths["public"], train.num_classes, role="public") if paths["public"].exists() else None
    return train, test, public


def model_config(cfg: ExperimentConfig, vocab_size: int, num_classes: int) -> M.ModelConfig:
    ms = cfg.model
    if ms.vocab_size is not None and ms.vocab_size != vocab_size:
        raise ConfigurationError(f"model.vocab_size={ms.vocab_size} but the training corpus yields {vocab_size} types")
    return M.ModelConfig(vocab_size, ms.embed_dim, ms.rep_dim, tuple(ms.hidden), num_classes)


def train_settings(cfg: ExperimentConfig, workers: int) -> TrainSettings:
    th, fed = cfg.texthide, cfg.federated
    return TrainSettings(
        seed=cfg.seed,
        clients=fed.clients,
        rounds=fed.rounds,
        batch_size=fed.batch_size,
        lr=fed.lr,
        optimizer=fed.optimizer,
        weight_decay=fed.weight_decay,
        m=th.m if th.enabled else 0,
        k=th.k if th.enabled else 1,
        variant=th.variant,
        mask_schedule=th.mask_schedule,
        bypass_texthide=not th.enabled,
        eval_every=fed.eval_every,
        checkpoint_every=fed.checkpoint_every,
        workers=workers,
    )


def load_trained(cfg: ExperimentConfig, out: Path) -> tuple:
    ckpt = out / "train" / "checkpoint.thmc"
    if not ckpt.exists():
        raise CommandError(f"no trained checkpoint at {ckpt}; run `hidesim train` first")
    params, _ = M.read_checkpoint(ckpt)
    train, test, _ = load_corpus(cfg, out)
    vocab = build_vocab(train, with_unk=True)
    return params, vocab, train, test


# -- commands -----------------------------------------------------------------


def cmd_gen_corpus(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    syn = cfg.corpus.synthetic
    root = RngStream(cfg.seed, ["corpus"])
    full = gen_synthetic(
        syn.num_classes,
        syn.per_class + syn.test_per_class,
        syn.vocab_size,
        syn.signal_tokens_per_class,
        (syn.min_length, syn.max_length),
        signal_prob=syn.signal_prob,
        stream=root.child("private"),
    )
    train, test = split_stratified(full, syn.per_class)
    dest = out / "corpus"
    dest.mkdir(parents=True, exist_ok=True)
    write_tsv(train, dest / "train.tsv")
    write_tsv(test, dest / "test.tsv")
    stats = {
        "train": {
            "sentences": len(train),
            "class_counts": np.bincount(train.labels, minlength=syn.num_classes).tolist(),
        },
        "test": {"sentences": len(test), "class_counts": np.bincount(test.labels, minlength=syn.num_classes).tolist()},
        "vocab_size": len(build_vocab(train)),
        "num_classes": syn.num_classes,
    }
    if syn.public_size > 0:
        # Public sentences come from the same generator on an independent stream, labels dropped.
        per = -(-syn.public_size // syn.num_classes)
        pub = gen_synthetic(
            syn.num_classes,
            per,
            syn.vocab_size,
            syn.signal_tokens_per_class,
            (syn.min_length, syn.max_length),
            signal_prob=syn.signal_prob,
            stream=root.child("public"),
        )
        public = pub.subset(range(syn.public_size)).as_public()
        write_tsv(public, dest / "public.tsv")
        stats["public"] = {"sentences": len(public)}
    _write_json(dest / "stats.json", stats)
    _write_json(dest / "meta.json", _meta(cfg, "gen-corpus"))
    print(f"wrote {len(train)} train / {len(test)} test sentences to {dest}")
    return 0


def cmd_train(cfg: ExperimentConfig, out: Path, workers: int, resume: bool = False) -> int:
    train, test, public = load_corpus(cfg, out)
    vocab = build_vocab(train, with_unk=True)
    mcfg = model_config(cfg, len(vocab), train.num_classes)
    settings = train_settings(cfg, workers)
    dest = out / "train"
    chash = config_hash(cfg)
    params, logs = run_training(
        settings, mcfg, train, test, vocab, public=public, out_dir=dest, config_hash=chash, resume=resume
    )
    acc = evaluate(params, test, vocab)
    summary = {
        "scheme": cfg.scheme,
        "m": settings.m,
        "k": settings.k,
        "variant": settings.variant,
        "rounds": settings.rounds,
        "final_loss": logs[-1].loss if logs else None,
        "test_accuracy": acc,
        "config_hash": chash,
        "seed": cfg.seed,
    }
    _write_json(dest / "train_summary.json", summary)
    _write_json(dest / "meta.json", _meta(cfg, "train"))
    print(f"{cfg.scheme} (m={settings.m}, k={settings.k}): test accuracy {acc:.4f} after {settings.rounds} rounds")
    return 0


def _attack_grad_match(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    gm = cfg.attacks.grad_match
    acfg = AttackConfig(
        iterations=gm.iterations,
        lr=gm.lr,
        threshold=gm.threshold,
        trials=gm.trials,
        seed=cfg.seed,
        log_every=gm.log_every,
    )
    dims = VictimDims(d_in=gm.d_in, num_classes=gm.num_classes)
    scenarios = grad_match_scenarios(gm.ks, gm.ds, gm.include_nomask)
    rows = grad_match_grid(scenarios, acfg, dims, workers)
    dest = out / "attacks" / "grad_match"
    trials, curves, failed = (
        [],
        [["scenario", "k", "d", "masked", "trial", "iteration", "grad_dist", "input_mse", "mask_mse"]],
        [],
    )
    for row in rows:
        sc = row["scenario"]
        for t, o in enumerate(row["outcomes"]):
            trials.append(
                {
                    "scenario": sc.name,
                    "k": sc.k,
                    "d": sc.d,
                    "masked": sc.masked,
                    "trial": t,
                    "success": bool(o.success),
                    "final_input_mse": o.final_input_mse,
                    "final_mask_mse": o.final_mask_mse if sc.masked else None,
                    "error": o.error,
                }
            )
            if o.error is not None:
                failed.append(f"{sc.name} trial {t}: {o.error}")
            for it, gd, im, mm in zip(o.iterations_logged, o.grad_dist, o.input_mse, o.mask_mse):
                curves.append([sc.name, sc.k, sc.d, int(sc.masked), t, it, f"{gd:.6e}", f"{im:.6e}", f"{mm:.6e}"])
    _write_jsonl(dest / "trials.jsonl", trials)
    _write_csv(dest / "curves.csv", curves)
    # success-rate table: one row per k (plus the undefended row), one column per d
    ds = list(gm.ds)
    table = [["k"] + [f"d={d}" for d in ds]]
    rates = {(r["scenario"].k, r["scenario"].masked, r["scenario"].d): r["success_rate"] for r in rows}
    if gm.include_nomask:
        table.append(["1 (no mask)"] + [f"{rates[(1, False, d)]:.2f}" for d in ds])
    for k in gm.ks:
        table.append([str(k)] + [f"{rates[(k, True, d)]:.2f}" for d in ds])
    _write_csv(dest / "success_rates.csv", table)
    _write_json(dest / "meta.json", _meta(cfg, "attack grad-match", failed_trials=failed))
    for line in table:
        print("  ".join(f"{c:>12}" for c in line))
    if failed:
        print(f"{len(failed)} trial(s) failed:\n  " + "\n  ".join(failed), file=sys.stderr)
        return 1
    return 0


def _dump_answers(path: Path, answers: dict, limit: int = 20) -> None:
    lines = []
    for scheme, pairs in answers.items():
        lines.append(f"[{scheme}]")
        for q, a in pairs[:limit]:
            lines.append(f"query:  {q.raw_text}")
            lines.append(f"answer: {a.raw_text}")
        lines.append("")
    _write_text(path, "\n".join(lines))


def _attack_rss(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    params, vocab, train, test = load_trained(cfg, out)
    res = rss_experiment(
        params, vocab, train, cfg.attacks.rss.schemes, cfg.seed, reference=test, batch_size=cfg.attacks.rss.batch_size
    )
    dest = out / "attacks" / "rss"
    _write_csv(dest / "metrics.csv", metrics_csv_rows(res.rows))
    _dump_answers(dest / "examples.txt", res.answers)
    _write_json(
        dest / "meta.json",
        _meta(
            cfg,
            "attack rss",
            index_size=res.extra["index_size"],
            semantic_sim="tfidf cosine over the test split (stand-in scorer)",
        ),
    )
    _print_metrics(res.rows)
    return 0


def _attack_reprecon(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    params, vocab, train, test = load_trained(cfg, out)
    rc = cfg.attacks.reprecon
    recon = ReconConfig(rc.hidden, rc.epochs, rc.batch_size, rc.lr, rc.final_lr_fraction, cfg.seed)
    res = reprecon_experiment(params, vocab, train, test, rc.schemes, cfg.seed, recon, rc.n_queries)
    dest = out / "attacks" / "reprecon"
    _write_csv(dest / "metrics.csv", metrics_csv_rows(res.rows))
    _write_jsonl(dest / "trials.jsonl", [{"scheme": s, "epoch_losses": ls} for s, ls in res.extra["losses"].items()])
    _dump_answers(dest / "examples.txt", res.answers)
    _write_json(dest / "meta.json", _meta(cfg, "attack reprecon", index_size=res.extra["index_size"]))
    _print_metrics(res.rows)
    return 0


def _attack_subset_sum(cfg: ExperimentConfig, out: Path, workers: int) -> int:
    ss = cfg.attacks.subset_sum
    records = subset_sum_experiment(ss.ns, ss.ks, ss.d, ss.instances, cfg.seed)
    dest = out / "attacks" / "subset_sum"
    _write_jsonl(dest / "trials.jsonl", records)
    table = [["n", "k", "instances", "recovered", "candidates", "c_n_k"]]
    groups = {}
    for r in records:
        groups.setdefault((r["n"], r["k"]), []).append(r)
    for (n, k), rs in groups.items():
        table.append([n, k, len(rs), sum(r["recovered"] for r in rs), rs[0]["candidates"], rs[0]["total"]])
    _write_csv(dest / "table.csv", table)
    _write_json(dest / "meta.json", _meta(cfg, "attack subset-sum"))
    for line in table:
        print("  ".join(f"{str(c):>10}" for c in line))
    return 0 if all(r["recovered"] for r in records) else 1


ATTACKS = {
    "grad-match": _attack_grad_match,
    "rss": _attack_rss,
    "reprecon": _attack_reprecon,
    "subset-sum": _attack_subset_sum,
}


def _print_metrics(rows: dict) -> None:
    print(f"{'scheme':<22}{'identity':>10}{'jc':>8}{'tfidf':>8}{'label':>8}{'n':>6}")
    for name, (row, n) in rows.items():
        print(f"{name:<22}{row.identity:>10.3f}{row.jaccard:>8.3f}{row.tfidf_sim:>8.3f}{row.label_agree:>8.3f}{n:>6}")


def cmd_report(out: Path) -> int:
    """Merge every CSV that has a ``meta.json`` sidecar into ``report/summary.csv``.

    The merged table is in long form (one row per cell) because the inputs
    have different columns.
    """
    if not out.is_dir():
        raise CommandError(f"output directory {out} does not exist")
    sources = []
    for meta_path in sorted(out.rglob("meta.json")):
        if meta_path.parent == out / "report":
            continue
        meta = json.loads(meta_path.read_text())
        sources.append((meta_path.parent, meta))
    if not sources:
        raise CommandError(f"nothing to report in {out}; run training or an attack first")
    merged = [["source", "config_hash", "seed", "row", "column", "value"]]
    for folder, meta in sources:
        for csv_path in sorted(folder.glob("*.csv")):
            if csv_path.name == "curves.csv":
                continue  # per-iteration traces are too long for a summary
            with open(csv_path, newline="", encoding="utf-8") as fh:
                table = list(csv.reader(fh))
            header, body = table[0], table[1:]
            rel = csv_path.relative_to(out).as_posix()
            for row in body:
                for col, val in zip(header[1:], row[1:]):
                    merged.append([rel, meta["config_hash"], meta["seed"], row[0], col, val])
        summary_json = folder / "train_summary.json"
        if summary_json.exists():
            rel = summary_json.relative_to(out).as_posix()
            for key, val in sorted(json.loads(summary_json.read_text()).items()):
                if key not in ("config_hash", "seed"):
                    merged.append([rel, meta["config_hash"], meta["seed"], "summary", key, json.dumps(val)])
    hashes = sorted({m["config_hash"] for _, m in sources})
    warnings = []
    if len(hashes) > 1:
        warnings.append(f"inputs come from {len(hashes)} different configurations: {', '.join(h[:12] for h in hashes)}")
        for w in warnings:
            log.warning(w)
    dest = out / "report"
    _write_csv(dest / "summary.csv", merged)
    _write_json(
        dest / "summary.json",
        {
            "sources": [{"path": f.relative_to(out).as_posix(), **m} for f, m in sources],
            "config_hashes": hashes,
            "warnings": warnings,
        },
    )
    print(f"merged {len(sources)} output folder(s) into {dest / 'summary.csv'}")
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)
    return 0


# -- entry point --------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="experiment config (JSON); defaults are used when omitted")
    common.add_argument("--seed", type=int, help="override the config seed (unsigned 64-bit)")
    common.add_argument("--out", type=Path, help="output directory (default: config out_dir)")
    common.add_argument("--workers", type=int, default=1, help="worker threads; never changes outputs")

    parser = argparse.ArgumentParser(prog="hidesim", description="TextHide federated training and attack simulator")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-corpus", parents=[common], help="write the synthetic corpus")
    tr = sub.add_parser("train", parents=[common], help="run federated training")
    tr.add_argument("--resume", action="store_true", help="continue from the checkpoint in the output directory")
    at = sub.add_parser("attack", parents=[common], help="run one attack experiment")
    at.add_argument("which", choices=sorted(ATTACKS))
    sub.add_parser("report", parents=[common], help="merge all outputs into a summary")
    return parser


def _setup_logging() -> None:
    level = os.environ.get("HIDESIM_LOG", "WARNING").upper()
    if not isinstance(logging.getLevelName(level), int):
        level = "WARNING"
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


def main(argv=None) -> int:
    _setup_logging()
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else ExperimentConfig().validate()
        if args.seed is not None:
            cfg.seed = args.seed
            cfg.validate()
        if args.workers < 1:
            raise ConfigurationError("--workers must be >= 1")
        out = args.out if args.out is not None else Path(cfg.out_dir)
        if args.command == "gen-corpus":
            return cmd_gen_corpus(cfg, out, args.workers)
        if args.command == "train":
            return cmd_train(cfg, out, args.workers, resume=args.resume)
        if args.command == "attack":
            return ATTACKS[args.which](cfg, out, args.workers)
        return cmd_report(out)
    except (
        CommandError,
        ConfigurationError,
        CorpusError,
        DegenerateQueryError,
        MetricsError,
        TrainingError,
        FileNotFoundError,
    ) as exc:
        print(f"hidesim: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
