import io
import json
from datetime import datetime

import numpy as np
import pytest

from core.event_log import load_filter
from core.pipeline import (
    StreamScorer, bundle_to_document, decode_bundle, encode_bundle, event_sentence, load_bundle, load_state,
    read_scores_csv, save_bundle, save_state, score_events, top_events, train_pipeline, write_latents_csv,
    write_scores_csv,
)
from core.synth_oracle import generate_corpus
from data_models.config import (
    AnomalyPattern, CorpusSpec, DetectorConfig, EmbeddingConfig, PvFamily, RunConfig,
)
from data_models.schemas import FilterList, LogEvent, ScoreRecord
from utils.errors import CorruptBundle, EmptyCorpus, StateMismatch, VersionMismatch

SMALL_CONFIG = RunConfig(
    seed=7,
    embedding=EmbeddingConfig(dim=8, epochs=2),
    detector=DetectorConfig(hidden_dim=8, latent_dim=4, segment_len=16, epochs=2),
)


@pytest.fixture(scope="module")
def corpus():
    spec = CorpusSpec(
        pv_families=[
            PvFamily(template="sr07u1:{i}_mtr_done", instances=["Hor", "Ver"], weight=2.0),
            PvFamily(template="SR{i}C___BPM1___AM00", instances=["01", "02", "03"], description="BPM heartbeat"),
        ],
        anomaly_patterns=[AnomalyPattern(events=[["SR:DCCT5:Ok", "1", "0"], ["SR12C___QD1____BM02", "1", "0"]],
                                         description="Beam current lost")],
        n_events=240,
        anomaly_rate=0.02,
        seed=5,
    )
    return generate_corpus(spec)


@pytest.fixture(scope="module")
def bundle(corpus):
    return train_pipeline(corpus.lines, FilterList(), SMALL_CONFIG)


def _csv(records):
    buf = io.StringIO()
    write_scores_csv(records, buf)
    return buf.getvalue()


def test_bundle_carries_config_snapshot_and_loss_traces(bundle):
    assert bundle.training_config == SMALL_CONFIG.snapshot()
    assert len(bundle.loss_trace["embedding"]) == 2
    assert len(bundle.loss_trace["detector"]) == 2
    assert bundle.embedding.dim == bundle.detector.input_dim == 8
    assert np.all(np.abs(bundle.sphere.center) >= 0.01)


def test_training_is_deterministic(corpus, bundle):
    again = train_pipeline(corpus.lines, FilterList(), SMALL_CONFIG)
    assert encode_bundle(bundle_to_document(again)) == encode_bundle(bundle_to_document(bundle))


def test_seed_is_required(corpus):
    with pytest.raises(ValueError):
        train_pipeline(corpus.lines, FilterList(), SMALL_CONFIG.model_copy(update={"seed": None}))


def test_fully_filtered_log_is_an_empty_corpus(corpus):
    with pytest.raises(EmptyCorpus):
        train_pipeline(corpus.lines, load_filter("*\n"), SMALL_CONFIG)


def test_bundle_round_trip_is_lossless(tmp_path, bundle, corpus):
    path = tmp_path / "model.bundle"
    checksum = save_bundle(bundle, str(path))
    assert checksum == bundle.checksum

    loaded = load_bundle(str(path))
    assert encode_bundle(bundle_to_document(loaded)) == path.read_bytes()
    assert _csv(score_events(loaded, corpus.lines)) == _csv(score_events(bundle, corpus.lines))


def test_corrupted_bundles_are_rejected(bundle):
    data = encode_bundle(bundle_to_document(bundle))
    header_end = data.index(b"\n") + 1

    flipped = bytearray(data)
    flipped[header_end + 5] ^= 0x01
    with pytest.raises(CorruptBundle):
        decode_bundle(bytes(flipped))
    with pytest.raises(CorruptBundle):
        decode_bundle(data[:-10])
    with pytest.raises(CorruptBundle):
        decode_bundle(data[header_end:])


def test_other_format_version_is_refused(bundle):
    document = bundle_to_document(bundle)
    document["format_version"] = 2
    with pytest.raises(VersionMismatch):
        decode_bundle(encode_bundle(document))


def test_resumed_scoring_matches_one_pass(tmp_path, bundle, corpus):
    full = _csv(score_events(bundle, corpus.lines))

    half = len(corpus.lines) // 2
    first = StreamScorer(bundle)
    head = list(first.score_lines(corpus.lines[:half]))
    state_path = str(tmp_path / "stream.state")
    save_state(first.state, bundle.checksum, state_path)

    resumed = StreamScorer(bundle, load_state(state_path, bundle.checksum, bundle.detector.hidden_dim))
    tail = list(resumed.score_lines(corpus.lines[half:]))

    assert _csv(head + tail) == full
    assert resumed.state.events_seen == len(corpus.lines)


def test_state_from_another_bundle_is_refused(tmp_path, bundle):
    path = str(tmp_path / "stream.state")
    save_state(StreamScorer(bundle).state, "0" * 64, path)
    with pytest.raises(StateMismatch):
        load_state(path, bundle.checksum, bundle.detector.hidden_dim)


def test_incomplete_or_non_object_state_files_are_corrupt(tmp_path, bundle):
    path = tmp_path / "stream.state"
    header = {"magic": "EPICSLOG-STATE", "format_version": 1, "bundle_sha256": bundle.checksum}
    for document in ([1, 2, 3], "text", dict(header), dict(header, hidden=[0.0] * 8), dict(header, events_seen=3)):
        path.write_text(json.dumps(document), encoding="utf-8")
        with pytest.raises(CorruptBundle):
            load_state(str(path), bundle.checksum, bundle.detector.hidden_dim)


def test_scoring_uses_the_bundle_filter(corpus):
    filtered = train_pipeline(corpus.lines, load_filter("*_mtr_done\n"), SMALL_CONFIG)
    records = score_events(filtered, corpus.lines)
    assert records
    assert not any(r.pv.endswith("_mtr_done") for r in records)


def test_unseen_vocabulary_scores_with_zero_known_tokens(bundle):
    records = score_events(bundle, ["2025-06-25 12:00:00.000\tXX99Z:QQQ:Zzz\t0\t1\t"])
    assert records[0].n_known == 0
    assert records[0].score >= 0.0


def test_latents_are_not_collapsed(bundle, corpus):
    records = score_events(bundle, corpus.lines, keep_latents=True)
    latents = np.array([r.latent for r in records])
    assert latents.std(axis=0).max() > 1e-6

    buf = io.StringIO()
    write_latents_csv(records[:2], buf, bundle.detector.latent_dim)
    assert buf.getvalue().splitlines()[0] == "timestamp,pv,z_0,z_1,z_2,z_3"


def test_event_without_tokens_is_an_empty_sentence():
    event = LogEvent(timestamp=datetime(2025, 6, 25), pv="___", prev_state="0", new_state="1")
    assert event_sentence(event, "event") == ()


def test_top_events_orders_by_score_then_input_order():
    ts = datetime(2025, 6, 25)
    records = [ScoreRecord(ts, f"A:B:{i}", "0", "1", score, 1) for i, score in enumerate([0.5, 2.0, 2.0, 0.1])]
    assert [r.pv for r in top_events(records, 3)] == ["A:B:1", "A:B:2", "A:B:0"]


def test_score_csv_round_trip_is_lossless(bundle, corpus):
    records = score_events(bundle, corpus.lines[:20])
    text = _csv(records)
    assert text.splitlines()[0] == "timestamp,pv,prev,new,score,n_known"
    assert read_scores_csv(io.StringIO(text)) == [r.score for r in records]


def test_empty_source_scores_nothing(bundle):
    assert score_events(bundle, []) == []
