"""
End-to-end orchestration: train a model bundle from a log stream, score streams against it,
and own every persisted format (bundle file, stream state, score and latent CSVs).

Bundle file layout (format_version 1):
    line 1 : 'EPICSLOG-BUNDLE <format_version> sha256=<hex digest of body>'
    rest   : UTF-8 JSON body, keys sorted, no whitespace, floats as shortest round-trip decimals
"""
import csv
import hashlib
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Dict, Iterable, Iterator, List, Optional, TextIO, Tuple

import numpy as np

from core.channel_grammar import tokenize
from core.event_log import EventLogReader
from core.sequence_detector import (
    MATRIX_NAMES, DetectorParams, Hypersphere, SvddTrainer, init_params, score_step,
)
from core.token_embeddings import EmbeddingModel, SkipGramTrainer, Vocab, embed_event
from data_models.config import RunConfig
from data_models.schemas import FilterList, LogEvent, ScoreRecord, StreamState
from utils.canonical import CanonicalWire
from utils.errors import CorruptBundle, EmptyCorpus, EmptyResult, StateMismatch, VersionMismatch

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
BUNDLE_MAGIC = "EPICSLOG-BUNDLE"
STATE_MAGIC = "EPICSLOG-STATE"

SCORE_HEADER = ("timestamp", "pv", "prev", "new", "score", "n_known")


@dataclass
class ModelBundle:
    """Everything scoring needs, shipped as one artifact. Preprocessing is a snapshot, not a reference."""
    embedding: EmbeddingModel
    detector: DetectorParams
    sphere: Hypersphere
    filter_list: FilterList
    tokenizer: str
    training_config: Dict[str, Any]
    seed: int
    loss_trace: Dict[str, List[float]] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    @property
    def checksum(self) -> str:
        return hashlib.sha256(_document_body(bundle_to_document(self))).hexdigest()


def derive_seeds(seed: int) -> Tuple[int, int]:
    """Independent child seeds for the embedding and detector stages."""
    children = np.random.SeedSequence(seed).spawn(2)
    return int(children[0].generate_state(1)[0]), int(children[1].generate_state(1)[0])


def event_sentence(event: LogEvent, mode: str) -> Tuple[str, ...]:
    """Tokens of one event. A PV with no alphanumeric content yields an empty (all-OOV) sentence."""
    try:
        return tokenize(mode, event.pv, event.description).tokens
    except EmptyResult:
        logger.debug("EMPTY_SENTENCE: line %d '%s' has no tokens.", event.line_no, event.pv)
        return ()


def train_pipeline(lines: Iterable[str], filter_list: FilterList, config: RunConfig,
                   show_progress: bool = False) -> ModelBundle:
    """read_events -> tokenize -> skip-gram -> embed -> center + TBPTT. Deterministic given config.seed."""
    if config.seed is None:
        raise ValueError("CRITICAL_CONFIG: train_pipeline requires a resolved seed.")
    mode = config.preprocessing.tokenizer

    reader = EventLogReader(filter_list, config.time_range)
    events = list(reader.read(lines))
    if not events:
        raise EmptyCorpus(f"no events left after filtering ({reader.lines_read} lines read, "
                          f"{reader.filtered} filtered, {reader.out_of_range} out of range)")

    sentences = [event_sentence(ev, mode) for ev in events]
    w2v_seed, detector_seed = derive_seeds(config.seed)

    logger.info("PHASE_EMBEDDING: training on %d event sentences.", len(sentences))
    w2v = SkipGramTrainer(config.embedding, w2v_seed, show_progress)
    embedding = w2v.train(sentences)

    stream = np.stack([embed_event(s, embedding).values for s in sentences])

    logger.info("PHASE_DETECTOR: training on %d event vectors.", len(stream))
    cfg = config.detector
    params = init_params(embedding.dim, cfg.hidden_dim, cfg.latent_dim, detector_seed)
    svdd = SvddTrainer(cfg, show_progress)
    result = svdd.train(params, stream)

    return ModelBundle(
        embedding=embedding,
        detector=result.params,
        sphere=result.sphere,
        filter_list=filter_list,
        tokenizer=mode,
        training_config=config.snapshot(),
        seed=config.seed,
        loss_trace={"embedding": list(w2v.loss_trace), "detector": list(result.loss_trace)},
    )


class StreamScorer:
    """
    Scores a line stream with the bundle's own filter and tokenizer snapshot, carrying one
    StreamState across everything it is fed. Resumable from a persisted state.
    """

    def __init__(self, bundle: ModelBundle, state: Optional[StreamState] = None, keep_latents: bool = False):
        self.bundle = bundle
        self.state = state if state is not None else StreamState.initial(bundle.detector.hidden_dim)
        self.keep_latents = keep_latents
        self.reader = EventLogReader(bundle.filter_list)

    def score_lines(self, lines: Iterable[str]) -> Iterator[ScoreRecord]:
        bundle = self.bundle
        for event in self.reader.read(lines):
            vector = embed_event(event_sentence(event, bundle.tokenizer), bundle.embedding)
            scored, self.state = score_step(bundle.detector, bundle.sphere, self.state, vector, event)
            yield ScoreRecord(
                timestamp=event.timestamp,
                pv=event.pv,
                prev_state=event.prev_state,
                new_state=event.new_state,
                score=scored.score,
                n_known=vector.n_known,
                latent=tuple(float(v) for v in scored.latent) if self.keep_latents else None,
            )


def score_events(bundle: ModelBundle, lines: Iterable[str], state: Optional[StreamState] = None,
                 keep_latents: bool = False) -> List[ScoreRecord]:
    return list(StreamScorer(bundle, state, keep_latents).score_lines(lines))


def top_events(records: Iterable[ScoreRecord], k: int) -> List[ScoreRecord]:
    """The k highest scores; ties keep input order."""
    indexed = sorted(enumerate(records), key=lambda pair: (-pair[1].score, pair[0]))
    return [rec for _, rec in indexed[:k]]


# --- bundle persistence ---

def bundle_to_document(bundle: ModelBundle) -> Dict[str, Any]:
    vocab = bundle.embedding.vocab
    return {
        "format_version": bundle.format_version,
        "seed": bundle.seed,
        "preprocessing": {
            "tokenizer": bundle.tokenizer,
            "filter_exact": sorted(bundle.filter_list.exact),
            "filter_globs": list(bundle.filter_list.globs),
        },
        "training_config": bundle.training_config,
        "loss_trace": bundle.loss_trace,
        "embedding": {
            "tokens": list(vocab.index_to_token),
            "counts": list(vocab.counts),
            "min_count": vocab.min_count,
            "input_vectors": bundle.embedding.input_vectors.tolist(),
            "output_vectors": bundle.embedding.output_vectors.tolist(),
        },
        "detector": {name: m.tolist() for name, m in bundle.detector.matrices().items()},
        "sphere": {"center": bundle.sphere.center.tolist(), "floor": bundle.sphere.floor},
    }


def _document_body(document: Dict[str, Any]) -> bytes:
    return json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False).encode("utf-8")


def encode_bundle(document: Dict[str, Any]) -> bytes:
    body = _document_body(document)
    header = f"{BUNDLE_MAGIC} {document['format_version']} sha256={hashlib.sha256(body).hexdigest()}\n"
    return header.encode("ascii") + body


def _matrix(rows, dim: int) -> np.ndarray:
    return np.asarray(rows, dtype=np.float64).reshape(-1, dim)


def document_to_bundle(document: Dict[str, Any]) -> ModelBundle:
    emb = document["embedding"]
    vocab = Vocab(index_to_token=list(emb["tokens"]), counts=list(emb["counts"]), min_count=emb["min_count"])
    dim = len(emb["input_vectors"][0])
    embedding = EmbeddingModel(
        vocab=vocab,
        input_vectors=_matrix(emb["input_vectors"], dim),
        output_vectors=_matrix(emb["output_vectors"], dim),
    )
    detector = DetectorParams(**{name: np.asarray(document["detector"][name], dtype=np.float64)
                                 for name in MATRIX_NAMES})
    sphere = Hypersphere(center=np.asarray(document["sphere"]["center"], dtype=np.float64),
                         floor=document["sphere"]["floor"])
    pre = document["preprocessing"]
    return ModelBundle(
        embedding=embedding,
        detector=detector,
        sphere=sphere,
        filter_list=FilterList(exact=frozenset(pre["filter_exact"]), globs=tuple(pre["filter_globs"])),
        tokenizer=pre["tokenizer"],
        training_config=document["training_config"],
        seed=document["seed"],
        loss_trace=document.get("loss_trace", {}),
        format_version=document["format_version"],
    )


def decode_bundle(data: bytes) -> ModelBundle:
    header, sep, body = data.partition(b"\n")
    parts = header.decode("ascii", errors="replace").split(" ")
    if not sep or len(parts) != 3 or parts[0] != BUNDLE_MAGIC or not parts[2].startswith("sha256="):
        raise CorruptBundle("missing or malformed bundle header")

    # INVARIANT PROTECTED: Checksum first, so truncation is reported as corruption, never as a parse error.
    if hashlib.sha256(body).hexdigest() != parts[2][len("sha256="):]:
        raise CorruptBundle("checksum mismatch (file truncated or modified)")

    try:
        version = int(parts[1])
        document = json.loads(body.decode("utf-8"))
    except (ValueError, UnicodeDecodeError) as e:
        raise CorruptBundle(f"unreadable body: {e}")

    # INVARIANT PROTECTED: Never migrate silently.
    if version != FORMAT_VERSION or document.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"bundle format_version {document.get('format_version', version)}, "
                              f"this build reads {FORMAT_VERSION}")
    try:
        return document_to_bundle(document)
    except (KeyError, IndexError, TypeError, ValueError) as e:
        raise CorruptBundle(f"incomplete bundle document: {e}")


def save_bundle(bundle: ModelBundle, path: str) -> str:
    data = encode_bundle(bundle_to_document(bundle))
    with open(path, "wb") as f:
        f.write(data)
    checksum = data.partition(b"\n")[0].decode("ascii").split("sha256=")[1]
    logger.info("BUNDLE_SAVED: %s (sha256=%s)", path, checksum)
    return checksum


def load_bundle(path: str) -> ModelBundle:
    with open(path, "rb") as f:
        bundle = decode_bundle(f.read())
    logger.info("BUNDLE_LOADED: %s (vocab=%d, D=%d, H=%d, Z=%d)", path, len(bundle.embedding.vocab),
                bundle.detector.input_dim, bundle.detector.hidden_dim, bundle.detector.latent_dim)
    return bundle


# --- stream state persistence ---

def save_state(state: StreamState, bundle_checksum: str, path: str):
    document = {
        "magic": STATE_MAGIC,
        "format_version": FORMAT_VERSION,
        "bundle_sha256": bundle_checksum,
        "events_seen": state.events_seen,
        "hidden": state.hidden.tolist(),
    }
    with open(path, "w", encoding="utf-8") as f:
        f.write(json.dumps(document, sort_keys=True, separators=(",", ":"), allow_nan=False))
    logger.info("STATE_SAVED: %s after %d events.", path, state.events_seen)


def load_state(path: str, bundle_checksum: str, hidden_dim: int) -> StreamState:
    with open(path, "r", encoding="utf-8") as f:
        try:
            document = json.load(f)
        except ValueError as e:
            raise CorruptBundle(f"unreadable state file {path}: {e}")

    if not isinstance(document, dict) or document.get("magic") != STATE_MAGIC:
        raise CorruptBundle(f"{path} is not a stream state file")
    if document.get("format_version") != FORMAT_VERSION:
        raise VersionMismatch(f"state format_version {document.get('format_version')}")
    if document.get("bundle_sha256") != bundle_checksum:
        raise StateMismatch(f"{path} was written against another model bundle")

    try:
        hidden = np.asarray(document["hidden"], dtype=np.float64)
        events_seen = int(document["events_seen"])
    except (KeyError, TypeError, ValueError) as e:
        raise CorruptBundle(f"incomplete state file {path}: {e!r}")
    if hidden.shape != (hidden_dim,):
        raise StateMismatch(f"hidden state shape {hidden.shape} != ({hidden_dim},)")
    logger.info("STATE_RESUMED: %s at %d events.", path, events_seen)
    return StreamState(hidden=hidden, events_seen=events_seen)


# --- CSV formats ---

def write_scores_csv(records: Iterable[ScoreRecord], fh: TextIO, header: bool = True) -> int:
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(SCORE_HEADER)
    n = 0
    for rec in records:
        writer.writerow([
            CanonicalWire.format_timestamp(rec.timestamp), rec.pv, rec.prev_state, rec.new_state,
            CanonicalWire.format_float(rec.score), rec.n_known,
        ])
        n += 1
    return n


def write_latents_csv(records: Iterable[ScoreRecord], fh: TextIO, latent_dim: int, header: bool = True) -> int:
    writer = csv.writer(fh, lineterminator="\n")
    if header:
        writer.writerow(["timestamp", "pv"] + [f"z_{k}" for k in range(latent_dim)])
    n = 0
    for rec in records:
        if rec.latent is None:
            raise ValueError("ScoreRecord carries no latent; score with keep_latents=True")
        writer.writerow([CanonicalWire.format_timestamp(rec.timestamp), rec.pv]
                        + [CanonicalWire.format_float(v) for v in rec.latent])
        n += 1
    return n


def read_scores_csv(fh: TextIO) -> List[float]:
    reader = csv.DictReader(fh)
    return [float(row["score"]) for row in reader]
