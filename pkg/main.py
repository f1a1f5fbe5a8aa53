import argparse
import heapq
import io
import logging
import os
import random
import sys
from typing import Any, Dict, List, Optional

import yaml
from dotenv import load_dotenv
from pydantic import ValidationError

from core.channel_grammar import build_flow_graph, export_sankey
from core.event_log import EventLogReader, load_filter
from core.pipeline import (
    StreamScorer, load_bundle, load_state, read_scores_csv, save_bundle, save_state,
    train_pipeline, write_latents_csv, write_scores_csv,
)
from core.synth_oracle import default_corpus_spec, evaluate, generate_corpus, read_labels_csv, write_labels_csv
from core.token_embeddings import export_embeddings_csv, most_similar
from data_models.config import CorpusSpec, RunConfig
from data_models.schemas import FilterList
from utils.canonical import CanonicalWire
from utils.errors import DegenerateLabels, EventLogError, SpecInvalid

load_dotenv()

ROOT = os.path.dirname(os.path.abspath(__file__))
DEFAULT_SETTINGS = os.path.join(ROOT, "config", "app_settings.yaml")

EXIT_OK, EXIT_RUNTIME, EXIT_USAGE = 0, 1, 2

# (flag, dotted RunConfig key, type, help). Defaults are read from RunConfig so help never drifts.
HYPERPARAMETER_FLAGS = [
    ("--dim", "embedding.dim", int, "token embedding dimension D"),
    ("--window", "embedding.window", int, "skip-gram context window"),
    ("--negatives", "embedding.negatives", int, "negative samples per pair"),
    ("--w2v-epochs", "embedding.epochs", int, "skip-gram epochs"),
    ("--w2v-lr", "embedding.learning_rate", float, "initial skip-gram learning rate (decays to 10%%)"),
    ("--min-count", "embedding.min_count", int, "minimum token count kept in the vocabulary"),
    ("--hidden", "detector.hidden_dim", int, "GRU hidden size H"),
    ("--latent", "detector.latent_dim", int, "latent dimension Z"),
    ("--segment-len", "detector.segment_len", int, "truncated BPTT segment length L"),
    ("--epochs", "detector.epochs", int, "detector training epochs"),
    ("--lr", "detector.learning_rate", float, "detector gradient-descent learning rate"),
    ("--weight-decay", "detector.weight_decay", float, "L2 weight penalty lambda"),
    ("--center-floor", "detector.center_floor", float, "minimum |c_k| of the hypersphere center"),
    ("--tokenizer", "preprocessing.tokenizer", str, "embedding tokenizer: event, grammar or grammar_stripped"),
    ("--start", "time_range.start", str, "train only on events at or after this timestamp"),
    ("--end", "time_range.end", str, "train only on events before this timestamp"),
    ("--seed", "seed", int, "seed for all randomness; chosen and printed when omitted"),
]

_installed_handlers: List[logging.Handler] = []


def setup_logging(debug_mode: bool, log_file: Optional[str] = None):
    """Console channel on stderr, plus a persistent file channel only when one is named."""
    log_level = logging.DEBUG if debug_mode else logging.INFO
    log_format = logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s')

    root_logger = logging.getLogger()
    root_logger.setLevel(log_level)
    while _installed_handlers:
        handler = _installed_handlers.pop()
        root_logger.removeHandler(handler)
        handler.close()

    console_handler = logging.StreamHandler(sys.stderr)
    console_handler.setFormatter(log_format)
    root_logger.addHandler(console_handler)
    _installed_handlers.append(console_handler)

    if log_file:
        file_handler = logging.FileHandler(log_file, mode='w', encoding='utf-8')
        file_handler.setFormatter(log_format)
        root_logger.addHandler(file_handler)
        _installed_handlers.append(file_handler)


def _config_default(dotted: str) -> Any:
    value: Any = RunConfig()
    for part in dotted.split("."):
        value = getattr(value, part)
    return value


def _dest(dotted: str) -> str:
    return "hp__" + dotted.replace(".", "__")


def _add_hyperparameters(parser: argparse.ArgumentParser):
    group = parser.add_argument_group("hyperparameters (override the settings file)")
    for flag, dotted, kind, text in HYPERPARAMETER_FLAGS:
        extra = {"choices": ["event", "grammar", "grammar_stripped"]} if dotted == "preprocessing.tokenizer" else {}
        group.add_argument(flag, dest=_dest(dotted), type=kind, default=None,
                           help=f"{text} (default: {_config_default(dotted)})", **extra)
    group.add_argument("--config", help="YAML settings file (default: $EPICSLOG_CONFIG, else config/app_settings.yaml)")


def resolve_config(args: argparse.Namespace) -> RunConfig:
    path = args.config or os.getenv("EPICSLOG_CONFIG") or (DEFAULT_SETTINGS if os.path.exists(DEFAULT_SETTINGS) else None)
    file_values: Dict[str, Any] = {}
    if path:
        with open(path, 'r', encoding='utf-8') as f:
            file_values = yaml.safe_load(f) or {}
    overrides = {dotted: getattr(args, _dest(dotted)) for _, dotted, _, _ in HYPERPARAMETER_FLAGS}
    config = RunConfig.from_sources(file_values, overrides)
    if config.seed is None:
        config = config.model_copy(update={"seed": random.SystemRandom().randrange(2**31)})
        print(f"seed={config.seed}")
    return config


def _open_lines(path: str):
    # Undecodable bytes survive as surrogate escapes and are reported per line by the reader.
    if path == "-":
        if hasattr(sys.stdin, "buffer"):
            return io.TextIOWrapper(sys.stdin.buffer, encoding='utf-8', errors='surrogateescape', newline='')
        return sys.stdin
    return open(path, 'r', encoding='utf-8', errors='surrogateescape', newline='')


def _read_filter(path: Optional[str]) -> FilterList:
    if not path:
        return FilterList()
    with open(path, 'r', encoding='utf-8') as f:
        return load_filter(f.read())


class UsageError(Exception):
    pass


def _require_inputs(*paths: Optional[str]):
    for path in paths:
        if path and path != "-" and not os.path.isfile(path):
            raise UsageError(f"input path not found: {path}")


# --- subcommands ---

def cmd_parse(args: argparse.Namespace) -> int:
    _require_inputs(args.input, args.filter)
    filter_list = _read_filter(args.filter)
    diag_fh = open(args.diagnostics, 'w', encoding='utf-8') if args.diagnostics else sys.stderr
    reader = EventLogReader(filter_list, strict=args.strict,
                            on_diagnostic=lambda d: print(d.to_line(), file=diag_fh))
    try:
        with _open_lines(args.input) as src, open(args.output, 'w', encoding='utf-8', newline='') as out:
            for event in reader.read(src):
                out.write(CanonicalWire.format_event_line(event) + "\n")
    finally:
        if diag_fh is not sys.stderr:
            diag_fh.close()
    print(f"events={reader.events_emitted} filtered={reader.filtered} malformed={len(reader.diagnostics)}")
    return EXIT_OK


def cmd_sankey(args: argparse.Namespace) -> int:
    _require_inputs(args.input, args.filter)
    reader = EventLogReader(_read_filter(args.filter))
    with _open_lines(args.input) as src:
        pvs = [event.pv for event in reader.read(src)]
    if args.distinct:
        pvs = sorted(set(pvs))
    graph = build_flow_graph(pvs, strip_numbers=args.strip_numbers)
    with open(args.output, 'w', encoding='utf-8', newline='') as f:
        f.write(export_sankey(graph))
    print(f"nodes={len(graph.nodes)} links={len(graph.edges)} skipped={graph.skipped}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    _require_inputs(args.input, args.filter, args.config)
    config = resolve_config(args)
    logging.getLogger("Main").info("RESOLVED_CONFIG: %s", config.snapshot())
    with _open_lines(args.input) as src:
        bundle = train_pipeline(src, _read_filter(args.filter), config, show_progress=args.progress)
    for stage in ("embedding", "detector"):
        for epoch, loss in enumerate(bundle.loss_trace.get(stage, []), start=1):
            print(f"{stage}_epoch={epoch} loss={CanonicalWire.format_float(loss)}")
    checksum = save_bundle(bundle, args.out)
    print(f"bundle={args.out} sha256={checksum}")
    return EXIT_OK


def cmd_score(args: argparse.Namespace) -> int:
    _require_inputs(args.model, args.input)
    bundle = load_bundle(args.model)
    checksum = bundle.checksum
    logging.getLogger("Main").info("BUNDLE_CONFIG: %s", bundle.training_config)
    state = None
    if args.state and os.path.exists(args.state):
        state = load_state(args.state, checksum, bundle.detector.hidden_dim)

    scorer = StreamScorer(bundle, state, keep_latents=bool(args.latents))
    mode = 'a' if args.append else 'w'
    write_header = not (args.append and os.path.exists(args.out) and os.path.getsize(args.out) > 0)
    latent_header = bool(args.latents) and not (args.append and os.path.exists(args.latents)
                                                and os.path.getsize(args.latents) > 0)
    top: List[tuple] = []
    n = 0
    with _open_lines(args.input) as src, open(args.out, mode, encoding='utf-8', newline='') as out:
        lat_fh = open(args.latents, mode, encoding='utf-8', newline='') if args.latents else None
        try:
            write_scores_csv([], out, header=write_header)
            if lat_fh is not None:
                write_latents_csv([], lat_fh, bundle.detector.latent_dim, header=latent_header)
            for record in scorer.score_lines(src):
                write_scores_csv([record], out, header=False)
                if lat_fh is not None:
                    write_latents_csv([record], lat_fh, bundle.detector.latent_dim, header=False)
                if args.input == "-":
                    out.flush()
                if args.top:
                    heapq.heappush(top, (record.score, -n, record))
                    if len(top) > args.top:
                        heapq.heappop(top)
                n += 1
        finally:
            if lat_fh is not None:
                lat_fh.close()

    if args.state:
        save_state(scorer.state, checksum, args.state)
    print(f"scored={n} malformed={len(scorer.reader.diagnostics)}")
    for score, _, rec in sorted(top, key=lambda item: (-item[0], -item[1])):
        print(f"{CanonicalWire.format_timestamp(rec.timestamp)}\t{rec.pv}\t{rec.prev_state}:{rec.new_state}"
              f"\t{CanonicalWire.format_float(score)}")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    _require_inputs(args.spec)
    spec = default_corpus_spec()
    values = spec.model_dump()
    if args.spec:
        with open(args.spec, 'r', encoding='utf-8') as f:
            values = yaml.safe_load(f) or {}
    for key in ("seed", "n_events", "anomaly_rate"):
        if getattr(args, key) is not None:
            values[key] = getattr(args, key)
    try:
        spec = CorpusSpec.model_validate(values)
    except ValidationError as e:
        raise SpecInvalid(str(e).replace("\n", " "))
    logging.getLogger("Main").info("RESOLVED_SPEC: seed=%d n_events=%d anomaly_rate=%g families=%d patterns=%d",
                                  spec.seed, spec.n_events, spec.anomaly_rate, len(spec.pv_families),
                                  len(spec.anomaly_patterns))

    corpus = generate_corpus(spec)
    with open(args.out, 'w', encoding='utf-8', newline='') as f:
        f.writelines(line + "\n" for line in corpus.lines)
    with open(args.labels, 'w', encoding='utf-8', newline='') as f:
        write_labels_csv(corpus.labels, f)
    print(f"events={len(corpus.lines)} anomalous={sum(corpus.labels)}")
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    _require_inputs(args.scores, args.labels)
    with open(args.scores, 'r', encoding='utf-8', newline='') as f:
        scores = read_scores_csv(f)
    with open(args.labels, 'r', encoding='utf-8', newline='') as f:
        labels = read_labels_csv(f)
    try:
        report = evaluate(scores, labels)
    except DegenerateLabels as e:
        for line in e.partial.to_lines():
            print(line)
        raise
    for line in report.to_lines():
        print(line)
    return EXIT_OK


def cmd_embeddings(args: argparse.Namespace) -> int:
    _require_inputs(args.model)
    bundle = load_bundle(args.model)
    if args.out:
        with open(args.out, 'w', encoding='utf-8', newline='') as f:
            f.write(export_embeddings_csv(bundle.embedding))
    if args.similar:
        neighbours = most_similar(bundle.embedding, args.similar, args.top)
        if not neighbours:
            logging.getLogger("Main").warning("OOV_TOKEN: '%s' is not in the vocabulary.", args.similar)
        for token, sim in neighbours:
            print(f"{token}\t{CanonicalWire.format_float(sim)}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--debug", action="store_true", help="verbose diagnostic logging of stage artifacts")
    common.add_argument("--log-file", help="also write the log to this file (default: console only)")
    common.add_argument("--progress", action="store_true", help="show training progress bars on stderr")

    parser = argparse.ArgumentParser(
        prog="epicslog",
        description="Anomaly scoring for EPICS event-logger streams",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("parse", parents=[common], help="validate and filter a log into canonical events")
    p.add_argument("--input", required=True, help="event log path, or - for stdin")
    p.add_argument("--filter", help="noisy-PV filter file (default: none)")
    p.add_argument("--output", required=True, help="canonical event lines are written here")
    p.add_argument("--diagnostics", help="line_no<TAB>kind<TAB>message file (default: stderr)")
    p.add_argument("--strict", action="store_true", help="fail on the first malformed line")
    p.set_defaults(handler=cmd_parse)

    p = sub.add_parser("sankey", parents=[common], help="export channel-name token flows as JSON")
    p.add_argument("--input", required=True, help="event log path, or - for stdin")
    p.add_argument("--filter", help="noisy-PV filter file (default: none)")
    p.add_argument("--strip-numbers", action="store_true", help="drop purely numeric tokens")
    p.add_argument("--distinct", action="store_true", help="count each PV once instead of per event")
    p.add_argument("--output", required=True, help="Sankey JSON path")
    p.set_defaults(handler=cmd_sankey)

    p = sub.add_parser("train", parents=[common], help="train a model bundle on nominal operation")
    p.add_argument("--input", required=True, help="event log path, or - for stdin")
    p.add_argument("--filter", help="noisy-PV filter file (default: none)")
    p.add_argument("--out", required=True, help="model bundle path")
    _add_hyperparameters(p)
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("score", parents=[common], help="score events against a model bundle")
    p.add_argument("--model", required=True, help="model bundle path")
    p.add_argument("--input", required=True, help="event log path, or - to score standard input live")
    p.add_argument("--out", required=True, help="score CSV path")
    p.add_argument("--latents", help="also write per-event latent vectors to this CSV")
    p.add_argument("--state", help="resume from and persist the stream state in this file")
    p.add_argument("--append", action="store_true", help="append to existing CSVs instead of overwriting")
    p.add_argument("--top", type=int, default=0, help="print the K highest-scoring events (default: 0)")
    p.set_defaults(handler=cmd_score)

    p = sub.add_parser("synth", parents=[common], help="generate a labeled synthetic corpus")
    p.add_argument("--spec", help="YAML corpus spec (default: built-in spec)")
    p.add_argument("--out", required=True, help="event log path")
    p.add_argument("--labels", required=True, help="labels CSV path")
    p.add_argument("--seed", type=int, help="override the spec seed (default: 42)")
    p.add_argument("--n-events", type=int, help="override the event count (default: 20000)")
    p.add_argument("--anomaly-rate", type=float, help="override the anomaly fraction (default: 0.01)")
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("eval", parents=[common], help="separation metrics for scores against labels")
    p.add_argument("--scores", required=True, help="score CSV path")
    p.add_argument("--labels", required=True, help="labels CSV path")
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("embeddings", parents=[common], help="export token vectors or query neighbours")
    p.add_argument("--model", required=True, help="model bundle path")
    p.add_argument("--out", help="token,dim_0.. CSV path")
    p.add_argument("--similar", help="print the nearest tokens to this one")
    p.add_argument("--top", type=int, default=10, help="neighbours to print (default: 10)")
    p.set_defaults(handler=cmd_embeddings)

    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    setup_logging(args.debug, args.log_file)
    logger = logging.getLogger("Main")
    try:
        return args.handler(args)
    except UsageError as e:
        print(parser.format_usage().rstrip(), file=sys.stderr)
        logger.error("USAGE_FAULT: %s", e)
        return EXIT_USAGE
    except ValidationError as e:
        logger.error("CONFIG_FAULT: %s", str(e).replace("\n", " "))
        return EXIT_USAGE
    except EventLogError as e:
        logger.error("COMMAND_FAULT: %s", e)
        return EXIT_RUNTIME
    except OSError as e:
        logger.error("IO_FAULT: %s", e)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
