"""Single command-line entry point wiring all modules.

Subcommands are thin argument-parsing shells over the library operations;
their outputs are bit-identical to direct module calls. Every data file is
JSONL, written with sorted keys so fixed inputs and a fixed seed give
byte-identical outputs regardless of parallelism. Exit status is 0 iff no
error records were produced.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

from . import attention_core, mask_engine, pem_pipeline, rl_core, tag_grammar
from .config import ConfigError, load_config


def _dump(obj) -> str:
    return json.dumps(obj, ensure_ascii=False, sort_keys=True)


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return 1


# --- annotate ---------------------------------------------------------------

def cmd_annotate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    pipeline_cfg = cfg.pipeline
    if args.parallelism is not None:
        pipeline_cfg = pem_pipeline.PipelineConfig(
            n=pipeline_cfg.n,
            tau_acc=pipeline_cfg.tau_acc,
            tau_cons=pipeline_cfg.tau_cons,
            parallelism=args.parallelism,
            endpoint=pipeline_cfg.endpoint,
            embedder_endpoint=pipeline_cfg.embedder_endpoint,
        )

    if not Path(args.input).exists():
        return _fail(f"input file not found: {args.input}")
    try:
        dataset = pem_pipeline.read_instances(args.input)
    except (ValueError, json.JSONDecodeError) as exc:
        return _fail(f"cannot parse dataset: {exc}")

    if args.mock:
        sampler = pem_pipeline.MockCotSampler()
        embedder = pem_pipeline.HashEmbedder()
    else:
        token = os.environ.get(pipeline_cfg.endpoint.auth_env)
        try:
            sampler = pem_pipeline.HttpSampler(pipeline_cfg.endpoint, token=token)
            embedder = pem_pipeline.HttpEmbedder(
                pipeline_cfg.embedder_endpoint,
                token=os.environ.get(pipeline_cfg.embedder_endpoint.auth_env))
        except ValueError as exc:
            return _fail(f"{exc} (use --mock for offline runs)")

    try:
        result = pem_pipeline.annotate(dataset, sampler, embedder, pipeline_cfg)
    except pem_pipeline.EmptyDatasetError as exc:
        return _fail(str(exc))

    pem_pipeline.write_jsonl(args.out, result.labeled)
    report_path = args.report or f"{args.out}.stats.json"
    with open(report_path, "w", encoding="utf-8") as fh:
        fh.write(_dump(result.stats.to_dict()))
        fh.write("\n")
    if args.records:
        pem_pipeline.write_jsonl(args.records, (r.to_dict() for r in result.records))

    summary = {
        "labeled": result.stats.labeled,
        "discarded": result.stats.discarded,
        "failed": result.stats.failed,
        "out": str(args.out),
        "report": str(report_path),
    }
    print(_dump(summary) if args.json else
          f"labeled {result.stats.labeled} / {result.stats.total} instances "
          f"({result.stats.discarded} discarded, {result.stats.failed} failed) -> {args.out}")
    if result.stats.failed or result.stats.labeled == 0:
        return 1
    return 0


# --- validate ----------------------------------------------------------------

def cmd_validate(args: argparse.Namespace) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        return _fail(str(exc))
    try:
        traces = tag_grammar.read_trace_records(args.traces)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(f"cannot read traces: {exc}")
    labels = {}
    try:
        with open(args.labels, encoding="utf-8") as fh:
            for line in fh:
                if not line.strip():
                    continue
                obj = json.loads(line)
                labels[str(obj["id"])] = (str(obj["pem"]), str(obj["answer"]))
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        return _fail(f"cannot read labels: {exc}")

    trace_ids = {record_id for record_id, _ in traces}
    if trace_ids != set(labels):
        missing = sorted(trace_ids ^ set(labels))
        return _fail(f"id mismatch between traces and labels: {missing}")

    rows = []
    for record_id, text in sorted(traces):
        pem_text, answer = labels[record_id]
        gold_pem = tag_grammar.PemLabel.from_text(pem_text)
        if gold_pem is None:
            return _fail(f"label {record_id}: unknown PEM value {pem_text!r}")
        ok, diags = tag_grammar.validate_structure(text)
        r_mps = rl_core.reward_mps(text, gold_pem)
        r_acc = rl_core.reward_acc(text, answer)
        r_stage2 = cfg.rewards.lambda_acc * r_acc + cfg.rewards.lambda_mps * r_mps
        rows.append({
            "id": record_id,
            "r_mps": r_mps,
            "r_acc": r_acc,
            "r_stage2": r_stage2,
            "diagnostics": [d.to_dict() for d in diags] if not ok else [],
        })

    if args.out:
        pem_pipeline.write_jsonl(args.out, rows)
    count = len(rows)
    summary = {
        "count": count,
        "mean_mps": sum(r["r_mps"] for r in rows) / count,
        "mean_acc": sum(r["r_acc"] for r in rows) / count,
        "mean_stage2": sum(r["r_stage2"] for r in rows) / count,
    }
    print(_dump(summary) if args.json else
          f"{count} traces: mean_mps={summary['mean_mps']:.4f} "
          f"mean_acc={summary['mean_acc']:.4f} mean_stage2={summary['mean_stage2']:.4f}")
    return 0


# --- mask ---------------------------------------------------------------------

def cmd_mask(args: argparse.Namespace) -> int:
    try:
        layout = mask_engine.load_layout_spec(args.spec)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(f"cannot load layout spec: {exc}")
    if args.row is not None:
        if not 0 <= args.row < layout.length:
            return _fail(f"row {args.row} out of range [0, {layout.length})")
        row = mask_engine.incremental_row(layout, args.row)
        print("".join("1" if cell else "0" for cell in row))
    if args.out or args.rle or args.row is None:
        mask = mask_engine.build_composite(layout)
        if args.out:
            Path(args.out).write_text(mask_engine.mask_to_text(mask), encoding="utf-8")
        if args.rle:
            Path(args.rle).write_bytes(mask_engine.mask_to_rle(mask))
        if args.row is None and not args.out and not args.rle:
            sys.stdout.write(mask_engine.mask_to_text(mask))
    return 0


# --- grpo-step ------------------------------------------------------------------

def cmd_grpo_step(args: argparse.Namespace) -> int:
    try:
        cfg = rl_core.GrpoConfig(
            clip_alpha=args.alpha, kl_beta=args.beta, eps_stab=args.eps)
    except ValueError as exc:
        return _fail(str(exc))
    try:
        groups = rl_core.read_rollout_groups(args.rollouts)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(f"cannot read rollouts: {exc}")
    if not groups:
        return _fail("rollout file contains no groups")

    results = []
    for group_id, group in groups:
        try:
            outcome = rl_core.grpo_objective(group, cfg)
        except ValueError as exc:
            return _fail(f"group {group_id}: {exc}")
        results.append({
            "group_id": group_id,
            "objective": outcome.objective,
            "advantages": list(outcome.advantages),
            "ratios": list(outcome.ratios),
            "surrogate_terms": list(outcome.surrogate_terms),
            "kl": outcome.kl,
        })
    if args.json:
        print(_dump({"groups": results}))
    else:
        for row in results:
            print(f"group {row['group_id']}: objective={row['objective']:.6f} "
                  f"kl={row['kl']:.6f}")
            print(f"  advantages      = {row['advantages']}")
            print(f"  ratios          = {row['ratios']}")
            print(f"  surrogate_terms = {row['surrogate_terms']}")
    return 0


# --- attn-report -----------------------------------------------------------------

def cmd_attn_report(args: argparse.Namespace) -> int:
    try:
        layout = mask_engine.load_layout_spec(args.spec)
        layers = attention_core.read_weights_jsonl(args.weights)
    except (OSError, ValueError, json.JSONDecodeError) as exc:
        return _fail(str(exc))
    if not layers:
        return _fail("weights file contains no layers")
    try:
        report = attention_core.attention_allocation(
            layers, layout, last_k=min(args.last_k, len(layers)))
    except ValueError as exc:
        return _fail(str(exc))
    payload = {
        "window": report.window,
        "audio_fraction": report.audio_fraction,
        "visual_fraction": report.visual_fraction,
        "per_layer": [list(p) if p is not None else None for p in report.per_layer],
    }
    if args.json:
        print(_dump(payload))
    else:
        print(f"last {report.window} layers: audio={report.audio_fraction:.4f} "
              f"visual={report.visual_fraction:.4f}")
        for idx, pair in enumerate(report.per_layer):
            if pair is None:
                print(f"  layer[-{report.window - idx}]: no span mass")
            else:
                print(f"  layer[-{report.window - idx}]: audio={pair[0]:.4f} "
                      f"visual={pair[1]:.4f}")
    return 0


# --- leakage ---------------------------------------------------------------------

def cmd_leakage(args: argparse.Namespace) -> int:
    report = attention_core.leakage_probe(args.seed, use_maam=not args.no_maam)
    payload = {
        "seed": report.seed,
        "use_maam": report.use_maam,
        "length": report.length,
        "layers": report.layers,
        "blocked_pair_mass": report.blocked_pair_mass,
        "direct_leakage": report.direct_leakage,
    }
    if args.json:
        print(_dump(payload))
    else:
        mode = "with asymmetric mask" if report.use_maam else "causal only"
        print(f"seed {report.seed} ({mode}): direct_leakage={report.direct_leakage} "
              f"blocked_pair_mass={report.blocked_pair_mass}")
    return 0


# --- parser ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sffuse",
        description="Separate-then-fuse reasoning toolkit: annotation, trace "
                    "scoring, attention masks, GRPO, and leakage probes.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("annotate", help="run the PEM annotation pipeline")
    p.add_argument("--in", dest="input", required=True, help="instances JSONL")
    p.add_argument("--out", required=True, help="labeled output JSONL")
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--mock", action="store_true",
                   help="use the deterministic offline sampler/embedder")
    p.add_argument("--report", help="stats report path (default: OUT.stats.json)")
    p.add_argument("--records", help="also write every solvability record here")
    p.add_argument("--parallelism", type=int, help="override the parallelism bound")
    p.add_argument("--json", action="store_true", help="machine-readable summary")
    p.set_defaults(func=cmd_annotate)

    p = sub.add_parser("validate", help="score traces with the verifiable rewards")
    p.add_argument("--traces", required=True, help="JSONL of {id, text}")
    p.add_argument("--labels", required=True, help="JSONL of {id, pem, answer}")
    p.add_argument("--out", help="scored output JSONL")
    p.add_argument("--config", help="JSON config file (reward weights)")
    p.add_argument("--json", action="store_true", help="machine-readable summary")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("mask", help="build the composed causal+asymmetric mask")
    p.add_argument("--spec", required=True, help="layout spec JSON")
    p.add_argument("--out", help="write dense 0/1 text grid here")
    p.add_argument("--rle", help="write compact run-length binary record here")
    p.add_argument("--row", type=int, help="print one incrementally-decoded row")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("grpo-step", help="advantages and clipped objective per group")
    p.add_argument("--rollouts", required=True, help="rollout groups JSONL")
    p.add_argument("--alpha", type=float, default=0.2, help="clip range")
    p.add_argument("--beta", type=float, default=0.01, help="KL coefficient")
    p.add_argument("--eps", type=float, default=1e-8, help="stability constant")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_grpo_step)

    p = sub.add_parser("attn-report", help="audio/visual attention allocation")
    p.add_argument("--weights", required=True, help="per-layer weights JSONL")
    p.add_argument("--spec", required=True, help="layout spec JSON")
    p.add_argument("--last-k", type=int, default=16, dest="last_k",
                   help="layer window (default 16, clamped to the layer count)")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_attn_report)

    p = sub.add_parser("leakage", help="synthetic direct-leakage probe")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--no-maam", action="store_true", dest="no_maam",
                   help="measure the causal-only stack")
    p.add_argument("--json", action="store_true", help="machine-readable output")
    p.set_defaults(func=cmd_leakage)

    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
