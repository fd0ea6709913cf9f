"""Config-driven command line front end.

Subcommands:
    run          train the configured strategy plus baselines, evaluate,
                 write results.csv / transcript.json / comm.csv
    scale-study  shard the pooled data into k sites for each k in a list
    uneven       like run, for sites whose declared task sets differ
    compare      per-key rank-sum significance between two results files
    comm-report  headline communication table for a parameter-count preset

All outputs are written atomically (temp file + rename) and are
byte-deterministic given (config, seeds).
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
import tempfile
from dataclasses import replace

from .comm import PRESETS, entries_from_transcripts, preset_summary
from .config import ConfigError, ExperimentConfig, load_config
from .datasim import generate_site, make_validation_set, shard
from .evaluate import MetricRow, evaluate_result, make_test_split
from .federation import (
    FederationResult,
    Strategy,
    run_federation,
    uneven_task_run,
)
from .metrics import wilcoxon_rank_sum
from .model import Backbone
from .seeding import derive_seed

RESULT_FIELDS = [
    "strategy", "testset", "task", "scheme",
    "precision", "recall", "f1", "ci_lo", "ci_hi", "seed",
]
COMM_FIELDS = ["seed", "strategy", "round", "client", "direction", "params", "bytes"]
SCALE_FIELDS = ["k"] + RESULT_FIELDS
COMPARE_FIELDS = ["strategy", "testset", "task", "scheme", "n_a", "n_b", "p_value"]


def _atomic_write(path: str, text: str) -> None:
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp_", text=True)
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as handle:
            handle.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.6f}"
    return str(value)


def _write_csv(path: str, fields: list[str], rows: list[dict]) -> None:
    import io

    buffer = io.StringIO()
    writer = csv.writer(buffer, lineterminator="\n")
    writer.writerow(fields)
    for row in rows:
        writer.writerow([_fmt(row.get(f)) for f in fields])
    _atomic_write(path, buffer.getvalue())


def _metric_row_dict(row: MetricRow, seed: int, extra: dict | None = None) -> dict:
    out = {
        "strategy": row.strategy,
        "testset": row.testset,
        "task": row.task,
        "scheme": row.scheme,
        "precision": row.precision,
        "recall": row.recall,
        "f1": row.f1,
        "ci_lo": row.ci_lo,
        "ci_hi": row.ci_hi,
        "seed": seed,
    }
    if extra:
        out.update(extra)
    return out


def _transcript_json(result: FederationResult) -> list[dict]:
    rounds = []
    for t in result.transcripts:
        entry = {
            "round": t.round_index,
            "sampled": list(t.sampled),
            "weights": {k: t.weights[k] for k in sorted(t.weights)},
            "uploads": {
                k: {"params": v.params, "bytes": v.payload_bytes}
                for k, v in sorted(t.uploads.items())
            },
            "downloads": {
                k: {"params": v.params, "bytes": v.payload_bytes}
                for k, v in sorted(t.downloads.items())
            },
            "checksum": t.global_checksum,
        }
        if t.val_losses is not None:
            entry["val_losses"] = {k: t.val_losses[k] for k in sorted(t.val_losses)}
        if t.influence is not None:
            entry["influence"] = {
                "client_ids": list(t.influence.client_ids),
                "val_losses": list(t.influence.val_losses),
                "influences": list(t.influence.influences),
                "weights": list(t.influence.weights),
                "stability_shift": t.influence.stability_shift,
            }
        rounds.append(entry)
    return rounds


def _run_one_seed(config: ExperimentConfig, seed: int, threads: int | None, uneven: bool):
    cfg = config.with_seed(seed)
    rule = cfg.rule()
    backbone = Backbone.build(cfg.model)
    sites = [generate_site(spec, rule) for spec in cfg.sites]
    tests = [make_test_split(spec, cfg.eval.test_size, rule) for spec in cfg.sites]
    tests += [make_test_split(spec, cfg.eval.test_size, rule) for spec in cfg.external_sites]
    val = make_validation_set(
        rule, cfg.validation_examples, derive_seed(cfg.seed, "validation")
    ).examples

    rows = []
    run_records = []
    comm_rows = []
    runner = uneven_task_run if uneven else run_federation
    for strategy in cfg.strategies():
        fed_cfg = replace(cfg.federation, strategy=strategy)
        result = runner(fed_cfg, sites, val, backbone, max_workers=threads)
        metric_rows = evaluate_result(
            result, backbone, rule, tests, cfg.eval.bootstrap, seed=cfg.seed
        )
        rows.extend(_metric_row_dict(r, seed) for r in metric_rows)
        run_records.append(
            {
                "seed": seed,
                "strategy": strategy.value,
                "rounds": _transcript_json(result),
                "final_checksum": result.adapters.checksum() if result.adapters else None,
            }
        )
        for entry in entries_from_transcripts(result.transcripts, cfg.comm.bytes_per_param):
            comm_rows.append(
                {
                    "seed": seed,
                    "strategy": strategy.value,
                    "round": entry.round_index,
                    "client": entry.client_id,
                    "direction": entry.direction,
                    "params": entry.params,
                    "bytes": entry.nbytes,
                }
            )
    return rows, run_records, comm_rows


def cmd_run(config: ExperimentConfig, out_dir: str, seeds: list[int],
            threads: int | None, uneven: bool = False) -> int:
    all_rows = []
    all_runs = []
    all_comm = []
    for seed in seeds:
        rows, runs, comm_rows = _run_one_seed(config, seed, threads, uneven)
        all_rows.extend(rows)
        all_runs.extend(runs)
        all_comm.extend(comm_rows)
    _write_csv(os.path.join(out_dir, "results.csv"), RESULT_FIELDS, all_rows)
    _atomic_write(
        os.path.join(out_dir, "transcript.json"),
        json.dumps({"runs": all_runs}, sort_keys=True, indent=2) + "\n",
    )
    _write_csv(os.path.join(out_dir, "comm.csv"), COMM_FIELDS, all_comm)
    if config.comm.preset:
        preset = PRESETS[config.comm.preset]
        summary = preset_summary(
            preset, rounds=config.federation.rounds,
            site_counts=(len(config.sites),),
        )
        _write_csv(
            os.path.join(out_dir, "comm_preset.csv"), sorted(summary[0]), summary
        )
    print(f"wrote {len(all_rows)} result rows to {os.path.join(out_dir, 'results.csv')}")
    return 0


SCALE_STRATEGIES = (Strategy.INFLUENCE, Strategy.SINGLE_SITE, Strategy.CENTRALIZED)


def cmd_scale_study(config: ExperimentConfig, out_dir: str, seeds: list[int],
                    k_list: list[int], threads: int | None) -> int:
    from .federation import pool_sites

    rows = []
    for seed in seeds:
        cfg = config.with_seed(seed)
        rule = cfg.rule()
        backbone = Backbone.build(cfg.model)
        sites = [generate_site(spec, rule) for spec in cfg.sites]
        pool = pool_sites(sites) if len(sites) > 1 else sites[0]
        tests = [make_test_split(spec, cfg.eval.test_size, rule) for spec in cfg.sites]
        val = make_validation_set(
            rule, cfg.validation_examples, derive_seed(cfg.seed, "validation")
        ).examples
        for k in k_list:
            shards = shard(pool, k, derive_seed(cfg.seed, "shard", k))
            for strategy in SCALE_STRATEGIES:
                # shards always run full participation
                fed_cfg = replace(
                    cfg.federation, strategy=strategy, total_clients=k, clients_per_round=k
                )
                result = run_federation(fed_cfg, shards, val, backbone, max_workers=threads)
                metric_rows = evaluate_result(
                    result, backbone, rule, tests, cfg.eval.bootstrap, seed=cfg.seed
                )
                rows.extend(_metric_row_dict(r, seed, {"k": k}) for r in metric_rows)
    _write_csv(os.path.join(out_dir, "scale.csv"), SCALE_FIELDS, rows)
    print(f"wrote {len(rows)} scale rows to {os.path.join(out_dir, 'scale.csv')}")
    return 0


def cmd_compare(path_a: str, path_b: str, out_dir: str) -> int:
    def read_rows(path):
        with open(path, newline="", encoding="utf-8") as handle:
            return list(csv.DictReader(handle))

    def group(rows):
        grouped: dict[tuple, list[float]] = {}
        for row in rows:
            key = (row["strategy"], row["testset"], row["task"], row["scheme"])
            grouped.setdefault(key, []).append(float(row["f1"]))
        return grouped

    a = group(read_rows(path_a))
    b = group(read_rows(path_b))
    if a.keys() != b.keys():
        missing_in_b = sorted(a.keys() - b.keys())
        missing_in_a = sorted(b.keys() - a.keys())
        raise RuntimeError(
            f"result keys differ; missing in {path_b}: {missing_in_b}; "
            f"missing in {path_a}: {missing_in_a}"
        )
    rows = []
    for key in sorted(a):
        samples_a, samples_b = a[key], b[key]
        rows.append(
            {
                "strategy": key[0],
                "testset": key[1],
                "task": key[2],
                "scheme": key[3],
                "n_a": len(samples_a),
                "n_b": len(samples_b),
                "p_value": wilcoxon_rank_sum(samples_a, samples_b),
            }
        )
    _write_csv(os.path.join(out_dir, "compare.csv"), COMPARE_FIELDS, rows)
    for row in rows:
        print(
            f"{row['strategy']}/{row['testset']}/{row['task']}/{row['scheme']}: "
            f"p={row['p_value']:.6f}"
        )
    return 0


def cmd_comm_report(preset_name: str, rounds: int, site_counts: list[int], out_dir: str | None) -> int:
    if preset_name not in PRESETS:
        raise ConfigError("--preset", f"unknown preset, expected one of {sorted(PRESETS)}")
    preset = PRESETS[preset_name]
    rows = preset_summary(preset, rounds=rounds, site_counts=tuple(site_counts))
    print(
        f"preset {preset.name}: full {preset.full_params:,} params, "
        f"adapters {preset.lora_params:,} params, "
        f"{preset.bytes_per_param} bytes/param"
    )
    print(
        f"full-model per site per round: {rows[0]['full_per_site_round_gb']} GB; "
        f"reduction {rows[0]['reduction_pct']:.2f}%"
    )
    for row in rows:
        print(
            f"  {row['sites']} sites x {row['rounds']} rounds: "
            f"adapters {row['lora_total_gb']} GB, full model {row['full_total_gb']} GB"
        )
    if out_dir:
        _write_csv(os.path.join(out_dir, "comm_report.csv"), sorted(rows[0]), rows)
    return 0


def _parse_int_list(text: str) -> list[int]:
    return [int(part) for part in text.split(",") if part.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fedlora", description="Federated low-rank adapter training simulator"
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, config_required=True):
        p.add_argument("--config", required=config_required, help="YAML experiment config")
        p.add_argument("--out-dir", default="out", help="output directory")
        p.add_argument("--seeds", default=None, help="comma-separated master seeds")
        p.add_argument("--threads", type=int, default=None, help="parallel local updates")

    add_common(sub.add_parser("run", help="train + evaluate the configured strategies"))
    add_common(sub.add_parser("uneven", help="run with per-site task subsets"))
    scale = sub.add_parser("scale-study", help="metric-vs-k shard curves")
    add_common(scale)
    scale.add_argument("--k", default="1,2,3,4,6,8,10", help="comma-separated shard counts")

    compare = sub.add_parser("compare", help="rank-sum significance between results files")
    compare.add_argument("results_a")
    compare.add_argument("results_b")
    compare.add_argument("--out-dir", default="out")

    comm = sub.add_parser("comm-report", help="communication table for a preset")
    comm.add_argument("--preset", default="llama3_8b")
    comm.add_argument("--rounds", type=int, default=2)
    comm.add_argument("--sites", default="2,3", help="comma-separated site counts")
    comm.add_argument("--out-dir", default=None)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        if args.command == "comm-report":
            return cmd_comm_report(
                args.preset, args.rounds, _parse_int_list(args.sites), args.out_dir
            )
        if args.command == "compare":
            return cmd_compare(args.results_a, args.results_b, args.out_dir)

        config = load_config(args.config)
        seeds = _parse_int_list(args.seeds) if args.seeds else [config.seed]
        if args.command == "run":
            return cmd_run(config, args.out_dir, seeds, args.threads)
        if args.command == "uneven":
            return cmd_run(config, args.out_dir, seeds, args.threads, uneven=True)
        if args.command == "scale-study":
            return cmd_scale_study(
                config, args.out_dir, seeds, _parse_int_list(args.k), args.threads
            )
        parser.error(f"unknown command {args.command}")
    except ConfigError as err:
        print(f"config error: {err}", file=sys.stderr)
        return 2
    except Exception as err:  # noqa: BLE001 - CLI boundary
        print(f"error: {err}", file=sys.stderr)
        return 3
    return 0


if __name__ == "__main__":
    sys.exit(main())
