"""Command-line entry points.

Exit codes are fixed for scripting: 0 success, 1 usage or input-schema
errors, 2 runtime failures (unreachable backends, bind failures). Every
command that writes artifacts also writes a run manifest next to them.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .backends import BackendError
from .config import AppConfig, ConfigError, load_config
from .export import (
    EmptyInput,
    export_sft,
    quality_report,
    render_funnel_table,
    render_quality_table,
    render_round_table,
    round_distribution,
)
from .loop import Termination, persist_trajectory, run_trajectory
from .pipeline import (
    ChainBuildError,
    ConversionRejected,
    DialogueRecord,
    DialogueTurn,
    JsonlSchemaError,
    ReflectiveChain,
    SampleKind,
    SimulationIncomplete,
    adapt_trajectories,
    filter_dialogue,
    filter_funnel,
    ground_record,
    map_ordered,
    read_chains,
    read_dataset,
    read_dialogues,
    read_grounded,
    read_source_samples,
    reflect_chain,
    simulate_dialogue,
    verify_chain,
    write_chains,
    write_dataset,
    write_dialogues,
    write_grounded,
)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):  # exit 1 on usage errors, not argparse's 2
        raise UsageError(message)


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


def _write_manifest(
    path: Path,
    command: str,
    config: AppConfig,
    seed: int | None,
    inputs: list,
    outputs: list,
    started: str,
    extra: dict | None = None,
) -> None:
    doc = {
        "command": command,
        "config": config.raw,
        "seed": seed,
        "inputs": [str(p) for p in inputs],
        "outputs": [str(p) for p in outputs],
        "started": started,
        "finished": _now(),
        "version": __version__,
    }
    if extra:
        doc.update(extra)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")


def _input_file(value: str, flag: str) -> Path:
    path = Path(value)
    if not path.is_file():
        raise UsageError(f"{flag}: file not found: {value}")
    return path


def _synthetic_failure(source, final_answer: str) -> DialogueRecord:
    """Stand-in record for a chain dropped mid-pipeline; collapses to QA later."""
    return DialogueRecord(
        source=source,
        turns=(DialogueTurn(final_answer, "", 10),),
        gt_aligned=True,
    )


# --- run ----------------------------------------------------------------------

def cmd_run(args) -> int:
    started = _now()
    image_path = _input_file(args.image, "--image")
    config = load_config(args.config)
    loop_cfg = config.loop
    overrides = {}
    if args.max_rounds is not None:
        overrides["max_rounds"] = args.max_rounds
    if args.overlay is not None:
        overrides["overlay_mode"] = args.overlay
    if overrides:
        loop_cfg = dataclasses.replace(loop_cfg, **overrides)
    backends = config.make_backends()

    out_dir = Path(args.out)
    trajectory = run_trajectory(
        image_path.read_bytes(), args.question, backends, loop_cfg
    )
    doc_path = persist_trajectory(trajectory, out_dir)
    outputs = [doc_path] + [
        out_dir / f"round_{i}.png" for i in range(len(trajectory.contexts))
    ]
    _write_manifest(
        out_dir / "run_manifest.json",
        "run",
        config,
        None,
        [image_path],
        outputs,
        started,
    )
    print(
        f"termination={trajectory.termination.value} "
        f"rounds={trajectory.rounds} final_answer={trajectory.final_answer!r}"
    )
    if trajectory.termination is Termination.BACKEND_ERROR:
        print(f"backend error: {trajectory.error}", file=sys.stderr)
        return 2
    return 0


# --- pipeline stages -------------------------------------------------------------

def _stage_paths(args, need_failed: bool = False):
    in_path = _input_file(args.infile, "--in")
    out_path = Path(args.out)
    failed_path = None
    if need_failed:
        failed_path = (
            Path(args.failed)
            if args.failed
            else out_path.with_name(out_path.stem + "_failed.jsonl")
        )
    return in_path, out_path, failed_path


def cmd_pipeline_simulate(args) -> int:
    started = _now()
    in_path, out_path, _ = _stage_paths(args)
    config = load_config(args.config)
    backends = config.make_backends()
    rounds = args.max_teacher_rounds or config.pipeline.max_teacher_rounds
    samples = read_source_samples(in_path)

    def one(sample):
        try:
            return simulate_dialogue(
                sample, backends, rounds, config.pipeline.templates
            )
        except SimulationIncomplete as exc:
            return exc.record

    records = map_ordered(one, samples, args.jobs or config.pipeline.workers)
    write_dialogues(out_path, records)
    incomplete = sum(1 for r in records if r.incomplete)
    _write_manifest(
        out_path.with_name(out_path.name + ".manifest.json"),
        "pipeline simulate",
        config,
        config.pipeline.seed,
        [in_path],
        [out_path],
        started,
        {"records": len(records), "incomplete": incomplete},
    )
    print(f"simulated {len(records)} dialogues ({incomplete} incomplete)")
    return 0


def cmd_pipeline_filter(args) -> int:
    started = _now()
    in_path, out_path, _ = _stage_paths(args)
    config = load_config(args.config)
    records = read_dialogues(in_path)
    kept = [r for r in records if filter_dialogue(r).keep]
    rejected = [r for r in records if not filter_dialogue(r).keep]
    rejected_path = (
        Path(args.rejected)
        if args.rejected
        else out_path.with_name(out_path.stem + "_rejected.jsonl")
    )
    write_dialogues(out_path, kept)
    write_dialogues(rejected_path, rejected)
    funnel = filter_funnel(records)
    _write_manifest(
        out_path.with_name(out_path.name + ".manifest.json"),
        "pipeline filter",
        config,
        None,
        [in_path],
        [out_path, rejected_path],
        started,
        {
            "funnel": {
                "original": funnel.original,
                "response_filtered": funnel.response_filtered,
                "gt_filtered": funnel.gt_filtered,
            }
        },
    )
    print(render_funnel_table(funnel))
    return 0


def cmd_pipeline_ground(args) -> int:
    started = _now()
    in_path, out_path, failed_path = _stage_paths(args, need_failed=True)
    config = load_config(args.config)
    backends = config.make_backends()
    records = read_dialogues(in_path)

    def one(record):
        try:
            return ground_record(record, config.pipeline, backends), None
        except ChainBuildError:
            return None, record

    results = map_ordered(one, records, args.jobs or config.pipeline.workers)
    grounded = [g for g, _ in results if g is not None]
    failed = [f for _, f in results if f is not None]
    write_grounded(out_path, grounded)
    write_dialogues(failed_path, failed)
    _write_manifest(
        out_path.with_name(out_path.name + ".manifest.json"),
        "pipeline ground",
        config,
        config.pipeline.seed,
        [in_path],
        [out_path, failed_path],
        started,
        {"grounded": len(grounded), "routed_to_qa": len(failed)},
    )
    print(f"grounded {len(grounded)}, routed {len(failed)} to the QA pool")
    return 0


def cmd_pipeline_convert(args) -> int:
    started = _now()
    in_path, out_path, failed_path = _stage_paths(args, need_failed=True)
    config = load_config(args.config)
    backends = config.make_backends()
    records = read_grounded(in_path)

    def one(grounded):
        try:
            return reflect_chain(grounded, config.pipeline, backends), None
        except ConversionRejected:
            return None, _synthetic_failure(grounded.source, grounded.final_answer)

    results = map_ordered(one, records, args.jobs or config.pipeline.workers)
    chains = [c for c, _ in results if c is not None]
    failed = [f for _, f in results if f is not None]
    write_chains(out_path, chains)
    write_dialogues(failed_path, failed)
    _write_manifest(
        out_path.with_name(out_path.name + ".manifest.json"),
        "pipeline convert",
        config,
        None,
        [in_path],
        [out_path, failed_path],
        started,
        {"converted": len(chains), "routed_to_qa": len(failed)},
    )
    print(f"converted {len(chains)}, routed {len(failed)} to the QA pool")
    return 0


def cmd_pipeline_verify(args) -> int:
    started = _now()
    in_path, out_path, failed_path = _stage_paths(args, need_failed=True)
    config = load_config(args.config)
    backends = config.make_backends()
    chains = read_chains(in_path)

    def one(chain: ReflectiveChain):
        if verify_chain(chain, backends):
            return chain, None
        return None, _synthetic_failure(chain.source, chain.final_answer)

    results = map_ordered(one, chains, args.jobs or config.pipeline.workers)
    passing = [c for c, _ in results if c is not None]
    failed = [f for _, f in results if f is not None]
    write_chains(out_path, passing)
    write_dialogues(failed_path, failed)
    _write_manifest(
        out_path.with_name(out_path.name + ".manifest.json"),
        "pipeline verify",
        config,
        None,
        [in_path],
        [out_path, failed_path],
        started,
        {"verified": len(passing), "routed_to_qa": len(failed)},
    )
    print(f"verified {len(passing)}, routed {len(failed)} to the QA pool")
    return 0


def cmd_pipeline_adapt(args) -> int:
    started = _now()
    in_path, out_path, _ = _stage_paths(args)
    config = load_config(args.config)
    pipeline_cfg = config.pipeline
    overrides = {}
    if args.rho is not None:
        overrides["rho"] = args.rho
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        pipeline_cfg = dataclasses.replace(pipeline_cfg, **overrides)

    chains = read_chains(in_path)
    failed: list[DialogueRecord] = []
    failed_paths = [_input_file(p, "--failed") for p in (args.failed or [])]
    for p in failed_paths:
        failed.extend(read_dialogues(p))

    samples = adapt_trajectories(chains, failed, pipeline_cfg)
    write_dataset(out_path, samples)
    chain_count = sum(1 for s in samples if s.kind is SampleKind.REFLECTIVE_CHAIN)
    _write_manifest(
        out_path.with_name(out_path.name + ".manifest.json"),
        "pipeline adapt",
        config,
        pipeline_cfg.seed,
        [in_path, *failed_paths],
        [out_path],
        started,
        {
            "samples": len(samples),
            "reflective_chain": chain_count,
            "truncated_qa": len(samples) - chain_count,
            "rho": pipeline_cfg.rho,
        },
    )
    print(
        f"emitted {len(samples)} samples: {chain_count} chains, "
        f"{len(samples) - chain_count} qa"
    )
    return 0


def cmd_pipeline_export(args) -> int:
    started = _now()
    in_path = _input_file(args.infile, "--in")
    out_dir = Path(args.out)
    config = load_config(args.config)
    samples = read_dataset(in_path)
    manifest = export_sft(samples, out_dir)
    _write_manifest(
        out_dir / "run_manifest.json",
        "pipeline export",
        config,
        None,
        [in_path],
        [out_dir / "sft.jsonl", out_dir / "manifest.json"],
        started,
        {"export": manifest},
    )
    print(f"exported {manifest['total']} records ({manifest['content_hash']})")
    return 0


# --- stats and serve -----------------------------------------------------------

def _trajectory_paths(values: list[str]) -> list[Path]:
    paths = []
    for value in values:
        p = Path(value)
        if p.is_dir():
            found = sorted(p.glob("**/trajectory.json"))
            if not found:
                raise UsageError(f"--in: no trajectory.json under {value}")
            paths.extend(found)
        elif p.is_file():
            paths.append(p)
        else:
            raise UsageError(f"--in: not found: {value}")
    return paths


def cmd_stats_rounds(args) -> int:
    counts = []
    for path in _trajectory_paths(args.infile):
        doc = json.loads(path.read_text(encoding="utf-8"))
        counts.append(len(doc["rounds"]))
    print(render_round_table(round_distribution(counts)))
    return 0


def cmd_stats_quality(args) -> int:
    config = load_config(args.config)
    subsets = {}
    if args.subset:
        for spec in args.subset:
            if "=" not in spec:
                raise UsageError(f"--subset must be name=path, got {spec!r}")
            name, _, path = spec.partition("=")
            subsets[name] = read_dataset(_input_file(path, "--subset"))
    elif args.infile:
        subsets["all"] = read_dataset(_input_file(args.infile, "--in"))
    else:
        raise UsageError("stats quality needs --in or --subset")
    backends = config.make_backends()  # after arg checks, clearer errors
    rows = quality_report(
        subsets,
        backends,
        sample_size=args.sample,
        seed=args.seed,
        templates=config.pipeline.templates,
    )
    print(render_quality_table(rows))
    return 0


def cmd_stats_funnel(args) -> int:
    records = read_dialogues(_input_file(args.infile, "--in"))
    print(render_funnel_table(filter_funnel(records)))
    return 0


def cmd_serve(args) -> int:
    from .service import serve

    host, _, port_text = args.bind.rpartition(":")
    if not host or not port_text.isdigit():
        raise UsageError(f"--bind must be HOST:PORT, got {args.bind!r}")
    config = load_config(args.config)
    config.make_backends()  # fail fast before binding
    try:
        serve(config, host, int(port_text))
    except OSError as exc:
        print(f"bind failed: {exc}", file=sys.stderr)
        return 2
    return 0


# --- parser ---------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="reflectloop")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run one reflection loop over an image")
    run.add_argument("--image", required=True)
    run.add_argument("--question", required=True)
    run.add_argument("--config")
    run.add_argument("--out", required=True)
    run.add_argument("--max-rounds", type=int, dest="max_rounds")
    run.add_argument("--overlay", choices=["fresh", "cumulative"])
    run.set_defaults(func=cmd_run)

    pipe = sub.add_parser("pipeline", help="dataset construction stages")
    stages = pipe.add_subparsers(dest="stage", required=True)

    def stage(name, func, help_, failed=False, jobs=False):
        p = stages.add_parser(name, help=help_)
        p.add_argument("--in", dest="infile", required=True)
        p.add_argument("--out", required=True)
        p.add_argument("--config")
        if failed:
            p.add_argument("--failed")
        if jobs:
            p.add_argument("--jobs", type=int)
        p.set_defaults(func=func)
        return p

    simulate = stage(
        "simulate", cmd_pipeline_simulate, "student-teacher dialogues", jobs=True
    )
    simulate.add_argument("--max-teacher-rounds", type=int, dest="max_teacher_rounds")

    flt = stage("filter", cmd_pipeline_filter, "score and GT criteria")
    flt.add_argument("--rejected")

    stage("ground", cmd_pipeline_ground, "anchors, points, marker images",
          failed=True, jobs=True)
    stage("convert", cmd_pipeline_convert, "feedback to first-person reflections",
          failed=True, jobs=True)
    stage("verify", cmd_pipeline_verify, "reflection/image consistency",
          failed=True, jobs=True)

    adapt = stages.add_parser("adapt", help="blend chains and QA at the ratio")
    adapt.add_argument("--in", dest="infile", required=True)
    adapt.add_argument("--out", required=True)
    adapt.add_argument("--config")
    adapt.add_argument("--failed", action="append")
    adapt.add_argument("--rho", type=float)
    adapt.add_argument("--seed", type=int)
    adapt.set_defaults(func=cmd_pipeline_adapt)

    export = stages.add_parser("export", help="emit the SFT training format")
    export.add_argument("--in", dest="infile", required=True)
    export.add_argument("--out", required=True)
    export.add_argument("--config")
    export.set_defaults(func=cmd_pipeline_export)

    stats = sub.add_parser("stats", help="descriptive reports")
    stat_sub = stats.add_subparsers(dest="report", required=True)

    rounds = stat_sub.add_parser("rounds", help="turn-count histogram")
    rounds.add_argument("--in", dest="infile", nargs="+", required=True)
    rounds.set_defaults(func=cmd_stats_rounds)

    quality = stat_sub.add_parser("quality", help="judge-scored sample quality")
    quality.add_argument("--in", dest="infile")
    quality.add_argument("--subset", action="append")
    quality.add_argument("--config")
    quality.add_argument("--sample", type=int)
    quality.add_argument("--seed", type=int, default=0)
    quality.set_defaults(func=cmd_stats_quality)

    funnel = stat_sub.add_parser("funnel", help="filter survival counts")
    funnel.add_argument("--in", dest="infile", required=True)
    funnel.set_defaults(func=cmd_stats_funnel)

    serve = sub.add_parser("serve", help="HTTP reflect service")
    serve.add_argument("--bind", default="127.0.0.1:8080")
    serve.add_argument("--config")
    serve.set_defaults(func=cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (ConfigError, JsonlSchemaError, EmptyInput) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except FileNotFoundError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except BackendError as exc:
        print(f"backend error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
