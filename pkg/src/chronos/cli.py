"""Command-line surface: validate, synth, train, score, vote, eval, flops.

Configuration precedence is flags > config file > built-in defaults. Exit
codes: 0 success, 1 domain/validation failure, 2 I/O or configuration failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from chronos.evaluator import build_pools, compare_report, export_distribution
from chronos.scorer_net import (
    CheckpointError,
    ChronosConfig,
    ScoredTrajectory,
    count_flops,
    default_grid,
    load_ensemble,
    save_checkpoint,
    score_trajectories,
)
from chronos.signal import DEFAULT_K_STAT
from chronos.synthgen import SynthSpec, generate
from chronos.trainer import TrainConfig, grid_search, train_ensemble
from chronos.trajectory_store import (
    Trajectory,
    TrajectoryValidationError,
    _parse_record,
    load_jsonl,
    read_header,
    save_jsonl,
    split_dataset,
    validate_jsonl,
)
from chronos.voter import canonicalize_answer, vote

EXIT_OK = 0
EXIT_DOMAIN = 1
EXIT_CONFIG = 2


class ConfigError(Exception):
    """Bad run configuration (unknown key, missing path, malformed config file)."""


# every config-file key, with its built-in default
DEFAULTS: dict = {
    # architecture
    "l_tail": 2048,
    "n_proj": 8,
    "n_conv": 8,
    "kernel_lengths": [20, 40, 80],
    "n_blk": 3,
    "mlp_hidden": None,
    "seed": 0,
    # training
    "learning_rate": 1e-3,
    "max_epochs": 50,
    "batch_size": 32,
    "patience": 10,
    "ensemble_size": 5,
    "grid": "none",
    "selection": "test",
    "group_by_question": False,
    # signal / evaluation
    "k_stat": DEFAULT_K_STAT,
    "k": 128,
    "repeats": 16,
    "eta": 0.1,
    "bins": 20,
    # synthetic data
    "synth": SynthSpec().to_dict(),
}


def _load_run_config(path: str | None) -> dict:
    cfg = json.loads(json.dumps(DEFAULTS))  # deep copy
    if path is None:
        return cfg
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        user = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from None
    if not isinstance(user, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    unknown = set(user) - set(DEFAULTS)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    if "synth" in user:
        bad = set(user["synth"]) - set(DEFAULTS["synth"])
        if bad:
            raise ConfigError(f"unknown synth config keys: {sorted(bad)}")
        cfg["synth"].update(user.pop("synth"))
    cfg.update(user)
    return cfg


def _overlay_flags(cfg: dict, args: argparse.Namespace, mapping: dict[str, str]) -> dict:
    for flag_dest, key in mapping.items():
        value = getattr(args, flag_dest, None)
        if value is not None:
            cfg[key] = value
    return cfg


def _require_input(path: str | None, what: str = "input") -> Path:
    if path is None:
        raise ConfigError(f"--{what} is required")
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"{what} file not found: {path}")
    return p


def _require_output(path: str | None) -> Path:
    if path is None:
        raise ConfigError("--output is required")
    p = Path(path)
    if p.parent != Path("") and not p.parent.is_dir():
        raise ConfigError(f"output directory does not exist: {p.parent}")
    return p


def _chronos_config(cfg: dict) -> ChronosConfig:
    return ChronosConfig(
        l_tail=int(cfg["l_tail"]),
        n_proj=int(cfg["n_proj"]),
        n_conv=int(cfg["n_conv"]),
        kernel_lengths=tuple(int(k) for k in cfg["kernel_lengths"]),
        n_blk=int(cfg["n_blk"]),
        mlp_hidden=None if cfg["mlp_hidden"] is None else int(cfg["mlp_hidden"]),
        seed=int(cfg["seed"]),
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=float(cfg["learning_rate"]),
        max_epochs=int(cfg["max_epochs"]),
        batch_size=int(cfg["batch_size"]),
        patience=int(cfg["patience"]),
        ensemble_size=int(cfg["ensemble_size"]),
        seed=int(cfg["seed"]),
    )


def n_threads() -> int:
    """Internal parallelism cap from CHRONOS_THREADS (>= 1)."""
    try:
        return max(1, int(os.environ.get("CHRONOS_THREADS", "1")))
    except ValueError:
        return 1


# ---------------------------------------------------------------------------
# subcommands

def cmd_validate(args: argparse.Namespace) -> int:
    path = _require_input(args.input)
    errors = validate_jsonl(path)
    if errors:
        for err in errors:
            print(err, file=sys.stderr)
        print(f"{path}: INVALID ({len(errors)} errors)")
        return EXIT_DOMAIN
    n = sum(1 for _ in open(path, encoding="utf-8")) - 1
    print(f"{path}: OK ({n} records)")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    synth_cfg = dict(cfg["synth"])
    for dest, key in (
        ("seed", "seed"),
        ("questions", "n_questions"),
        ("pool_size", "pool_size"),
        ("correct_fraction", "correct_fraction"),
        ("amplitude", "amplitude"),
        ("kstat", "k_stat"),
    ):
        value = getattr(args, dest, None)
        if value is not None:
            synth_cfg[key] = value
    spec = SynthSpec.from_dict(synth_cfg)
    out = _require_output(args.output)
    trajs = generate(spec)
    save_jsonl(trajs, out, k_stat=spec.k_stat)
    sidecar = out.with_suffix(out.suffix + ".spec.json")
    sidecar.write_text(json.dumps(spec.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    print(f"wrote {len(trajs)} trajectories to {out} (spec sidecar: {sidecar})")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    _overlay_flags(
        cfg,
        args,
        {
            "seed": "seed",
            "ltail": "l_tail",
            "kstat": "k_stat",
            "ensemble_size": "ensemble_size",
            "grid": "grid",
            "selection": "selection",
            "max_epochs": "max_epochs",
            "patience": "patience",
            "batch_size": "batch_size",
            "learning_rate": "learning_rate",
        },
    )
    in_path = _require_input(args.input)
    out_path = _require_output(args.output)
    trajs = load_jsonl(in_path)
    split = split_dataset(trajs, seed=int(cfg["seed"]), group_by_question=bool(cfg["group_by_question"]))
    tconf = _train_config(cfg)
    k_stat = min(int(cfg["k_stat"]), trajs[0].k)

    metrics_path = Path(args.metrics_log) if args.metrics_log else out_path.with_suffix(out_path.suffix + ".metrics.jsonl")
    metrics_rows: list[dict] = []

    if cfg["grid"] == "default":
        grid = [
            ChronosConfig(
                l_tail=int(cfg["l_tail"]),
                n_proj=g.n_proj,
                n_conv=g.n_conv,
                kernel_lengths=g.kernel_lengths,
                n_blk=g.n_blk,
                mlp_hidden=g.mlp_hidden,
                seed=int(cfg["seed"]),
            )
            for g in default_grid()
        ]

        def record(c: ChronosConfig, report) -> None:
            for epoch, (loss, va) in enumerate(zip(report.train_losses, report.val_aucs), start=1):
                metrics_rows.append(
                    {"config": c.to_dict(), "epoch": epoch, "train_loss": loss, "val_auc": va}
                )

        _, best_cfg = grid_search(
            split, grid, tconf, selection=str(cfg["selection"]), on_result=record,
            k_stat=k_stat, n_jobs=n_threads(),
        )
        cconf = best_cfg
    elif cfg["grid"] == "none":
        cconf = _chronos_config(cfg)
    else:
        raise ConfigError(f"unknown grid mode {cfg['grid']!r} (expected 'default' or 'none')")

    models, reports = train_ensemble(split, cconf, tconf, k_stat=k_stat)
    for member, report in enumerate(reports):
        for epoch, (loss, va) in enumerate(zip(report.train_losses, report.val_aucs), start=1):
            metrics_rows.append({"member": member, "epoch": epoch, "train_loss": loss, "val_auc": va})
        metrics_rows.append(
            {
                "member": member,
                "best_epoch": report.best_epoch,
                "best_val_auc": report.best_val_auc,
                "test_auc": report.test_auc,
            }
        )
    save_checkpoint(models, out_path)
    with open(metrics_path, "w", encoding="utf-8", newline="\n") as f:
        for row in metrics_rows:
            f.write(json.dumps(row, sort_keys=True) + "\n")
    test_aucs = [r.test_auc for r in reports if r.test_auc is not None]
    summary = f"mean test AUC {sum(test_aucs) / len(test_aucs):.4f}" if test_aucs else "no test AUC"
    print(f"wrote checkpoint {out_path} ({len(models)} member(s), {summary}); metrics: {metrics_path}")
    return EXIT_OK


def _iter_records(path: Path):
    header = read_header(path)
    with open(path, encoding="utf-8") as f:
        f.readline()
        for line_no, line in enumerate(f, start=2):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise TrajectoryValidationError(f"malformed JSON: {exc.msg}", line_no) from None
            yield line_no, obj, header["k_stat"]


def cmd_score(args: argparse.Namespace) -> int:
    in_path = _require_input(args.input)
    ckpt_path = _require_input(args.checkpoint, "checkpoint")
    out_path = _require_output(args.output)
    models = load_ensemble(ckpt_path)
    file_k = read_header(in_path)["k_stat"]
    if models[0].k_stat > file_k:
        raise TrajectoryValidationError(
            f"checkpoint expects k_stat={models[0].k_stat} but file stores only k={file_k}"
        )
    batch_size = 256
    pending: list[tuple[dict, Trajectory]] = []
    n = 0
    with open(out_path, "w", encoding="utf-8", newline="\n") as out:
        out.write(json.dumps({"format_version": 1, "k_stat": file_k}) + "\n")

        def flush() -> None:
            nonlocal n
            if not pending:
                return
            scored = score_trajectories(models, [t for _, t in pending])
            for (rec, _), st in zip(pending, scored):
                rec["score"] = st.score
                out.write(json.dumps(rec) + "\n")
                n += 1
            pending.clear()

        for line_no, rec, k_stat in _iter_records(in_path):
            traj = _parse_record(rec, line_no, k_stat)
            pending.append((rec, traj))
            if len(pending) >= batch_size:
                flush()
        flush()
    print(f"scored {n} trajectories -> {out_path}")
    return EXIT_OK


def _load_scored(path: Path) -> list[ScoredTrajectory]:
    scored = []
    for line_no, rec, k_stat in _iter_records(path):
        traj = _parse_record(rec, line_no, k_stat)
        if "score" not in rec:
            raise TrajectoryValidationError("record has no score field (run `chronos score` first)", line_no)
        scored.append(
            ScoredTrajectory(answer=canonicalize_answer(traj.answer), score=float(rec["score"]), trajectory=traj)
        )
    return scored


def cmd_vote(args: argparse.Namespace) -> int:
    in_path = _require_input(args.input)
    out_path = _require_output(args.output)
    eta = args.eta if args.eta is not None else DEFAULTS["eta"]
    scored = _load_scored(in_path)
    groups: dict[str, list[ScoredTrajectory]] = {}
    order: list[str] = []
    for st in scored:
        qid = st.trajectory.question_id
        if qid not in groups:
            groups[qid] = []
            order.append(qid)
        groups[qid].append(st)
    with open(out_path, "w", encoding="utf-8", newline="\n") as out:
        for qid in order:
            items = groups[qid]
            outcome = vote(items, eta)
            out.write(
                json.dumps(
                    {
                        "question_id": qid,
                        "winner": outcome.winner,
                        "eta": outcome.eta,
                        "retained_ids": [items[i].trajectory.trajectory_id for i in outcome.retained],
                        "weights": outcome.weights,
                    },
                    sort_keys=True,
                )
                + "\n"
            )
    print(f"voted over {len(order)} questions -> {out_path}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    _overlay_flags(cfg, args, {"k": "k", "repeats": "repeats", "eta": "eta", "seed": "seed", "bins": "bins"})
    in_path = _require_input(args.input)
    out_path = _require_output(args.output)
    if args.checkpoint is not None:
        models = load_ensemble(_require_input(args.checkpoint, "checkpoint"))
        trajs = load_jsonl(in_path)
        scored = score_trajectories(models, trajs)
    else:
        scored = _load_scored(in_path)
    gold = None
    if args.gold is not None:
        gold_path = _require_input(args.gold, "gold")
        gold = json.loads(gold_path.read_text(encoding="utf-8"))
        if not isinstance(gold, dict):
            raise ConfigError("gold file must map question_id -> answer")
    pools = build_pools(scored, gold)
    report = compare_report(pools, k=int(cfg["k"]), repeats=int(cfg["repeats"]), eta=float(cfg["eta"]), seed=int(cfg["seed"]))
    out_path.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")
    if args.per_question_csv:
        with open(args.per_question_csv, "w", encoding="utf-8", newline="") as f:
            writer = csv.DictWriter(f, fieldnames=list(report.per_question[0].keys()))
            writer.writeheader()
            writer.writerows(report.per_question)
    if args.histogram_csv:
        hist = export_distribution(pools, bins=int(cfg["bins"]))
        with open(args.histogram_csv, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(["bin_lo", "bin_hi", "class", "count"])
            writer.writerows(hist.rows())
    maj = report.methods["maj"]
    chron = report.methods["chronos"]
    print(
        f"pass@1 {report.pass_at_1:.4f} | maj@{report.k} {maj.mean:.4f}±{maj.std:.4f} | "
        f"chronos@{report.k} {chron.mean:.4f}±{chron.std:.4f} (eta={report.eta}) -> {out_path}"
    )
    return EXIT_OK


def cmd_flops(args: argparse.Namespace) -> int:
    cfg = _load_run_config(args.config)
    _overlay_flags(cfg, args, {"ltail": "l_tail", "seed": "seed"})
    config = _chronos_config(cfg)
    batch = args.batch if args.batch is not None else 30
    print(count_flops(config, batch))
    return EXIT_OK


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="chronos", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p: argparse.ArgumentParser, *names: str) -> None:
        if "input" in names:
            p.add_argument("--input", help="trajectory JSONL file")
        if "output" in names:
            p.add_argument("--output", help="output path")
        if "checkpoint" in names:
            p.add_argument("--checkpoint", help="model checkpoint path")
        if "config" in names:
            p.add_argument("--config", help="JSON run-config file")
        if "seed" in names:
            p.add_argument("--seed", type=int)

    p = sub.add_parser("validate", help="check a trajectory file against the schema")
    common(p, "input")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("synth", help="generate a synthetic labeled dataset")
    common(p, "output", "config", "seed")
    p.add_argument("--questions", type=int)
    p.add_argument("--pool-size", dest="pool_size", type=int)
    p.add_argument("--correct-fraction", dest="correct_fraction", type=float)
    p.add_argument("--amplitude", type=float)
    p.add_argument("--kstat", type=int)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="train scorer(s) on a labeled trajectory file")
    common(p, "input", "output", "config", "seed")
    p.add_argument("--grid", choices=["default", "none"])
    p.add_argument("--selection", choices=["test", "validation"])
    p.add_argument("--ensemble-size", dest="ensemble_size", type=int)
    p.add_argument("--ltail", type=int)
    p.add_argument("--kstat", type=int)
    p.add_argument("--max-epochs", dest="max_epochs", type=int)
    p.add_argument("--patience", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--learning-rate", dest="learning_rate", type=float)
    p.add_argument("--metrics-log", dest="metrics_log")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("score", help="append model scores to a trajectory file")
    common(p, "input", "output", "checkpoint")
    p.set_defaults(func=cmd_score)

    p = sub.add_parser("vote", help="weighted vote per question over a scored file")
    common(p, "input", "output")
    p.add_argument("--eta", type=float)
    p.set_defaults(func=cmd_vote)

    p = sub.add_parser("eval", help="full comparison report over candidate pools")
    common(p, "input", "output", "checkpoint", "config", "seed")
    p.add_argument("--k", type=int)
    p.add_argument("--repeats", type=int)
    p.add_argument("--eta", type=float)
    p.add_argument("--bins", type=int)
    p.add_argument("--gold", help="JSON file mapping question_id to gold answer")
    p.add_argument("--per-question-csv", dest="per_question_csv")
    p.add_argument("--histogram-csv", dest="histogram_csv")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("flops", help="closed-form forward-pass FLOPs for a config")
    common(p, "config")
    p.add_argument("--batch", type=int)
    p.add_argument("--ltail", type=int)
    p.set_defaults(func=cmd_flops)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (TrajectoryValidationError, CheckpointError) as exc:
        print(f"validation error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN
    except (ValueError, FloatingPointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DOMAIN


if __name__ == "__main__":
    sys.exit(main())
