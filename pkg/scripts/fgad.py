"""
Command line for the few-shot anomaly detection engine.

Examples:
  python scripts/fgad.py captions generate --config fixtures/configs/pcb.json
  python scripts/fgad.py captions validate fixtures/mfsc/pcb_fixture.json
  python scripts/fgad.py prompts build --dump prompts.json
  python scripts/fgad.py aggregate --dump-map reports/regions
  python scripts/fgad.py train --grad-check
  python scripts/fgad.py train
  python scripts/fgad.py qf-train
  python scripts/fgad.py infer --scene-index 0 --out reports/infer
  python scripts/fgad.py eval --seed 7
  python scripts/fgad.py bundle inspect bundles/pcb_fixture-v1

Exit codes: 0 success, 1 validation or library error, 2 usage error.
"""

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from captioner.caption_client import (
    CaptionClient,
    CaptionRequest,
    CaptionSchemaError,
    EndpointError,
    ImagePayload,
)
from captioner.config import EndpointConfig
from captioner.mfsc import MFSCDocument, MFSCError, load_document, serialize
from captioner.templates import TemplateError
from detector.alignment import AlignmentObjective, TrainingError, write_trace_csv
from detector.bundle import BundleError, inspect_bundle, latest_bundle, load_bundle, save_bundle
from detector.config import ConfigError, RunConfig, load_run_config
from detector.constants import ErrorCode
from detector.core import NumericDomainError
from detector.encoder import EncoderError, FeatureFormatError, encode_scene, get_encoder, load_feature_file
from detector.evaluation import BenchmarkReport, MetricError
from detector.exports import save_score_map, write_region_pgm, write_score_pgm
from detector.gradcheck import run_grad_check
from detector.pipeline import (
    PipelineError,
    aggregate_regions,
    aggregate_scene,
    evaluate_features,
    fit_alignment,
    fit_from_config,
    fit_query_former,
    initial_prompt_set,
    load_feature_shots,
    make_suite,
    run_benchmark,
)
from detector.prompt_bank import PromptBankError, init_parameters
from detector.query_former import QueryFormerError
from detector.region_aggregation import AggregationError
from detector.scoring import ScoringError

logger = logging.getLogger("fgad")

DEFAULT_CONFIG = "fixtures/configs/pcb.json"

# Exception type -> diagnostic code; checked in order
ERROR_CODES = (
    (MFSCError, ErrorCode.VALIDATION),
    (FeatureFormatError, ErrorCode.FEATURE_FILE),
    (TemplateError, ErrorCode.FORMAT_ERROR),
    (AggregationError, ErrorCode.DEGENERATE_FOREGROUND),
    (NumericDomainError, ErrorCode.NUMERIC_ERROR),
    (MetricError, ErrorCode.NUMERIC_ERROR),
    (ScoringError, ErrorCode.NUMERIC_ERROR),
    (TrainingError, ErrorCode.TRAINING_ERROR),
    (QueryFormerError, ErrorCode.TRAINING_ERROR),
    (EndpointError, ErrorCode.ENDPOINT_ERROR),
    (CaptionSchemaError, ErrorCode.CAPTION_SCHEMA),
    (BundleError, ErrorCode.BUNDLE_ERROR),
    (ConfigError, ErrorCode.CONFIG_ERROR),
    (PromptBankError, ErrorCode.FORMAT_ERROR),
    (EncoderError, ErrorCode.FORMAT_ERROR),
    (PipelineError, ErrorCode.CONFIG_ERROR),
)


class UsageError(Exception):
    """Exception for argument combinations argparse cannot express."""
    pass


class _Parser(argparse.ArgumentParser):
    """ArgumentParser that raises instead of exiting."""

    def error(self, message: str):
        raise UsageError(f"{self.prog}: error: {message}\n{self.format_usage()}")


def build_parser() -> argparse.ArgumentParser:
    # Global flags are also accepted after the subcommand
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--seed", type=int, default=argparse.SUPPRESS, help=argparse.SUPPRESS)
    common.add_argument("--verbose", action="store_true", default=argparse.SUPPRESS, help=argparse.SUPPRESS)

    parser = _Parser(
        prog="fgad",
        description="Few-shot anomaly detection with multi-level semantic captions",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("--config", default=DEFAULT_CONFIG, help=f"Run config JSON (default: {DEFAULT_CONFIG})")
    parser.add_argument("--seed", type=int, default=None, help="Overrides every seed of the run config")
    parser.add_argument("--verbose", action="store_true", help="DEBUG logging")
    sub = parser.add_subparsers(dest="command", parser_class=_Parser)

    captions = sub.add_parser("captions", parents=[common], help="Generate or validate MFSC documents")
    csub = captions.add_subparsers(dest="action", parser_class=_Parser)
    gen = csub.add_parser("generate", parents=[common], help="Caption one normal image of the category")
    gen.add_argument("--live", action="store_true", help="Call the configured endpoint (needs FGAD_API_KEY)")
    gen.add_argument("--base-url", default="", help="Endpoint base URL for --live")
    gen.add_argument("--model", default="gpt-4o", help="Endpoint model name for --live")
    gen.add_argument("--image", help="Image file for --live")
    gen.add_argument("--out", help="Write the canonical document here instead of stdout")
    val = csub.add_parser("validate", parents=[common], help="Validate an MFSC file")
    val.add_argument("path")

    prompts = sub.add_parser("prompts", parents=[common], help="Prompt templates")
    psub = prompts.add_subparsers(dest="action", parser_class=_Parser)
    build = psub.add_parser("build", parents=[common], help="Build the prompt set of the configured document")
    build.add_argument("--dump", help="Write the templates as JSON ('-' for stdout)")

    agg = sub.add_parser("aggregate", parents=[common], help="Cluster the training shots into regions")
    agg.add_argument("--dump-map", help="Directory for one region PGM per shot")

    train = sub.add_parser("train", parents=[common], help="Alignment training; writes a new bundle")
    train.add_argument("--grad-check", action="store_true", help="Only run the gradient checks and print the report")
    train.add_argument("--points", type=int, default=100, help="Random points per gradient check")
    train.add_argument("--trace", help="Also write the loss trace CSV here")

    qf = sub.add_parser("qf-train", parents=[common], help="Train the Query Former of the latest bundle; writes a new bundle")
    qf.add_argument("--bundle", help="Bundle directory (default: latest for the category)")

    infer = sub.add_parser("infer", parents=[common], help="Score one query")
    infer.add_argument("--bundle", help="Bundle directory (default: latest for the category)")
    group = infer.add_mutually_exclusive_group()
    group.add_argument("--query", help="FGADFEAT query file")
    group.add_argument("--scene-index", type=int, default=None, help="Test scene of the synthetic suite")
    infer.add_argument("--out", help="Directory for the FGADSMAP and PGM exports")

    ev = sub.add_parser("eval", parents=[common], help="Fit and evaluate; prints the JSON report and a table")
    ev.add_argument("--seeds", help="Comma-separated seeds (default: the run seed)")
    ev.add_argument("--out", help="Also write the JSON report here")

    bundle = sub.add_parser("bundle", parents=[common], help="Model bundles")
    bsub = bundle.add_subparsers(dest="action", parser_class=_Parser)
    insp = bsub.add_parser("inspect", parents=[common], help="Verify hashes and summarize a bundle")
    insp.add_argument("path", nargs="?", help="Bundle directory (default: latest for the category)")
    return parser


def _load_config(args) -> RunConfig:
    cfg = load_run_config(RunConfig().resolve(args.config))
    return cfg.with_seed(args.seed) if args.seed is not None else cfg


def _load_document(cfg: RunConfig) -> MFSCDocument:
    return load_document(cfg.resolve(cfg.document))


def _bundle_path(cfg: RunConfig, explicit: Optional[str]) -> Path:
    if explicit:
        return Path(explicit)
    return latest_bundle(cfg.resolve(cfg.bundles_dir), cfg.category)


def _print_json(obj) -> None:
    print(json.dumps(obj, sort_keys=True, indent=2))


# Subcommands -----------------------------------------------------------------

def cmd_captions(args, cfg: RunConfig) -> int:
    if args.action == "validate":
        try:
            doc = load_document(args.path)
        except MFSCError as e:
            print(f"[INVALID] {args.path}", file=sys.stderr)
            print(e.report.to_text(), file=sys.stderr)
            _print_json(e.report.to_dict())
            return 1
        print(f"[OK] {args.path}: {doc.category}, {doc.num_components} components")
        return 0

    if args.live:
        endpoint = EndpointConfig(mode="live", base_url=args.base_url, model_name=args.model)
        if not args.image:
            raise UsageError("captions generate --live needs --image")
        image = Path(args.image)
        media = "image/jpeg" if image.suffix.lower() in (".jpg", ".jpeg") else "image/png"
        req = CaptionRequest(cfg.category, image_payload=ImagePayload(image.read_bytes(), media))
    else:
        endpoint = EndpointConfig(mode="fixture")
        req = CaptionRequest(cfg.category, scene_ref=cfg.category)
    client = CaptionClient(endpoint, cache_dir=cfg.resolve(cfg.cache_dir))
    text = serialize(client.generate(req))
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
        print(f"[OK] wrote {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_prompts(args, cfg: RunConfig) -> int:
    pset = initial_prompt_set(cfg, _load_document(cfg))
    if args.dump:
        text = json.dumps(pset.to_dict(), sort_keys=True, indent=2) + "\n"
        if args.dump == "-":
            sys.stdout.write(text)
            return 0
        Path(args.dump).write_text(text, encoding="utf-8")
    print(f"[OK] {len(pset.templates)} templates, {len(pset.parameter_slots())} placeholders, "
          f"{len(pset.gate_slots())} gates")
    return 0


def _shot_region_maps(cfg: RunConfig, doc: MFSCDocument):
    """(region maps, ground-truth id maps or None) for the configured shots."""
    pset = initial_prompt_set(cfg, doc)
    if cfg.mode == "feature-import":
        shots, highres = load_feature_shots(cfg)
        if highres:
            maps = [aggregate_regions(cfg, pset, big.normalized(), big.h // s.h) for s, big in zip(shots, highres)]
        else:
            maps = [aggregate_regions(cfg, pset, s.normalized(), 1) for s in shots]
        return maps, None
    shots = make_suite(cfg).shots
    return [aggregate_scene(cfg, pset, s) for s in shots], [s.component_ids for s in shots]


def cmd_aggregate(args, cfg: RunConfig) -> int:
    doc = _load_document(cfg)
    maps, truths = _shot_region_maps(cfg, doc)
    for i, rmap in enumerate(maps):
        line = f"[OK] shot {i}: {rmap.h}x{rmap.w}"
        if truths is not None:
            line += f" accuracy={rmap.accuracy(truths[i]):.4f}"
        print(line)
        if args.dump_map:
            write_region_pgm(rmap.labels, rmap.num_components, Path(args.dump_map) / f"shot_{i}.pgm")
    return 0


def cmd_train(args, cfg: RunConfig) -> int:
    doc = _load_document(cfg)
    if args.grad_check:
        enc = get_encoder(cfg.encoder)
        pset = initial_prompt_set(cfg, doc)
        table, gates = init_parameters(pset, enc.embedding_dim, cfg.seed)
        maps, _ = _shot_region_maps(cfg, doc)
        if cfg.mode == "feature-import":
            grid = load_feature_shots(cfg)[0][0].normalized()
        else:
            grid = encode_scene(make_suite(cfg).shots[0], cfg.encoder)
        objective = AlignmentObjective(pset, enc, cfg.train)
        report = run_grad_check(cfg.seed, args.points, cfg.workers, (objective, grid, maps[0].labels, table, gates))
        print(report.to_json())
        return 0 if report.passed else 1

    if cfg.mode == "feature-import":
        model = fit_from_config(cfg, doc)
    else:
        shots = make_suite(cfg).shots
        pset = initial_prompt_set(cfg, doc)
        maps = [aggregate_scene(cfg, pset, s) for s in shots]
        model = fit_alignment(cfg, doc, [encode_scene(s, cfg.encoder) for s in shots], maps)
    path = save_bundle(model, cfg.resolve(cfg.bundles_dir))
    if args.trace:
        write_trace_csv(model.trace, args.trace)
    last = model.trace[-1] if model.trace else None
    summary = f" final total={last.total:.6f}" if last else ""
    print(f"[OK] {path}{summary}")
    return 0


def cmd_qf_train(args, cfg: RunConfig) -> int:
    model = load_bundle(_bundle_path(cfg, args.bundle))
    model = fit_query_former(model)
    path = save_bundle(model, cfg.resolve(cfg.bundles_dir))
    final = f" final loss={model.qf_trace[-1]:.6f}" if model.qf_trace else ""
    print(f"[OK] {path}{final}")
    return 0


def cmd_infer(args, cfg: RunConfig) -> int:
    model = load_bundle(_bundle_path(cfg, args.bundle))
    if args.query:
        grid = load_feature_file(args.query).normalized()
        name = Path(args.query).stem
    else:
        suite = make_suite(model.config)
        index = args.scene_index or 0
        if not 0 <= index < len(suite.tests):
            raise UsageError(f"--scene-index must lie in [0, {len(suite.tests)})")
        grid = encode_scene(suite.tests[index], model.config.encoder)
        name = f"scene_{index}"
    result = model.score(grid)
    if args.out:
        out = Path(args.out)
        save_score_map(result.m_pix, out / f"{name}.fgadsmap")
        write_score_pgm(result.m_pix, out / f"{name}.pgm")
        write_region_pgm(result.assignment, model.prompt_set.num_components + 1, out / f"{name}_assignment.pgm")
    _print_json({"query": name, "image_score": result.image_score, "max_pixel_score": result.m_pix.max()})
    return 0


def cmd_eval(args, cfg: RunConfig) -> int:
    doc = _load_document(cfg)
    seeds = [int(s) for s in args.seeds.split(",")] if args.seeds else [cfg.seed]
    if cfg.mode == "feature-import":
        results = []
        for seed in seeds:
            part = evaluate_features(fit_from_config(cfg.with_seed(seed), doc), seed)
            results.extend(part.categories[cfg.category].per_seed)
        report = BenchmarkReport()
        report.add(cfg.category, results)
    else:
        report = run_benchmark(cfg, doc, seeds)
    text = report.to_json(cfg.eval.include_timing)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    sys.stdout.write(report.to_table())
    return 0


def cmd_bundle(args, cfg: RunConfig) -> int:
    summary = inspect_bundle(_bundle_path(cfg, args.path))
    _print_json(summary)
    return 0 if summary["reference_reproduces"] else 1


COMMANDS = {
    "captions": cmd_captions,
    "prompts": cmd_prompts,
    "aggregate": cmd_aggregate,
    "train": cmd_train,
    "qf-train": cmd_qf_train,
    "infer": cmd_infer,
    "eval": cmd_eval,
    "bundle": cmd_bundle,
}

# Subcommands that need an action
ACTIONS = {"captions", "prompts", "bundle"}


def _error_code(exc: Exception) -> str:
    for exc_type, code in ERROR_CODES:
        if isinstance(exc, exc_type):
            return code
    return ErrorCode.INTERNAL_ERROR


def run_command(argv: Optional[List[str]] = None) -> int:
    """
    Runs one CLI command.

    Returns:
        Exit code: 0 success, 1 validation or library error, 2 usage error
    """
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            raise UsageError(parser.format_usage())
        if args.command in ACTIONS and args.action is None:
            raise UsageError(f"fgad {args.command}: missing action\n{parser.format_usage()}")
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except SystemExit as e:
        # --help
        return int(e.code or 0)

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s',
        force=True,
    )
    try:
        cfg = _load_config(args)
        return COMMANDS[args.command](args, cfg)
    except UsageError as e:
        print(str(e), file=sys.stderr)
        return 2
    except Exception as e:
        code = _error_code(e)
        if code == ErrorCode.INTERNAL_ERROR:
            logger.exception("[ERROR] unexpected failure")
        print(f"[ERROR] {code} {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(run_command())
