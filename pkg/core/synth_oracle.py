"""
Labeled synthetic event-log corpora: routine chatter from repeating PV families, punctuated
by short bursts of channels that never occur in nominal operation. Stands in for facility
logs when measuring how well scores separate injected faults.
"""
import csv
import logging
from dataclasses import dataclass
from datetime import timedelta
from typing import Dict, List, Sequence, Set, TextIO

import numpy as np
from scipy.stats import rankdata

from core.channel_grammar import tokenize_event
from data_models.config import AnomalyPattern, CorpusSpec, PvFamily
from data_models.schemas import EvaluationReport, LogEvent
from utils.canonical import CanonicalWire
from utils.errors import DegenerateLabels, LengthMismatch, SpecInvalid

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class LabeledCorpus:
    lines: List[str]
    labels: List[bool]

    def __post_init__(self):
        if len(self.lines) != len(self.labels):
            raise ValueError(f"{len(self.lines)} lines but {len(self.labels)} labels")


def default_corpus_spec() -> CorpusSpec:
    """
    Motor-done chatter from one undulator (the bulk of the stream), gap power-supply toggles,
    front-end shutter states and beam-position heartbeats in sectors 1-6 as nominal traffic;
    temperature-interlock and magnet-supply trips elsewhere in the ring as faults.
    """
    sectors = [f"{s:02d}" for s in range(1, 7)]
    return CorpusSpec(
        pv_families=[
            PvFamily(template="sr07u1:{i}_mtr_done", instances=["Hor", "Ver"], weight=12.0),
            PvFamily(template="SR{i}U___GDS1PS_BM00", instances=sectors, weight=2.0),
            PvFamily(template="FE{i}BL3:PSS111:IsOpen", instances=sectors[:4], weight=1.0,
                     description="Front end shutter open"),
            PvFamily(template="SR{i}C___BPM1___AM00", instances=sectors, states=["0", "1", "2"],
                     weight=1.0, description="BPM heartbeat"),
        ],
        anomaly_patterns=[
            AnomalyPattern(events=[["SR12S___TCUP9__BM", "0", "1"],
                                   ["SR12S___TCUP9_L_BM", "0", "1"],
                                   ["SR12S___UP_OUT_BM", "0", "1"]],
                           description="Temperature interlock"),
            AnomalyPattern(events=[["SR:DCCT5:Ok", "1", "0"],
                                   ["SR12C___QD1____BM02", "1", "0"]],
                           description="Beam current lost"),
            AnomalyPattern(events=[["SR07U___ODS1PS_BM04", "1", "0"],
                                   ["SR07U___ODS1PS_BM04", "0", "1"]],
                           description="Insertion device amp trip"),
        ],
        n_events=20000,
        anomaly_rate=0.01,
        seed=42,
    )


def _family_pvs(family: PvFamily) -> List[str]:
    return [family.template.replace("{i}", inst) for inst in family.instances]


def _validate(spec: CorpusSpec) -> Set[str]:
    """Every anomaly pattern must use at least one token that nominal traffic never produces."""
    nominal_tokens: Set[str] = set()
    for family in spec.pv_families:
        for pv in _family_pvs(family):
            nominal_tokens.update(tokenize_event(pv, family.description))

    for pattern in spec.anomaly_patterns:
        tokens = set()
        for pv, _, _ in pattern.events:
            tokens.update(tokenize_event(pv, pattern.description))
        if not tokens - nominal_tokens:
            raise SpecInvalid(f"anomaly pattern {[e[0] for e in pattern.events]} uses only nominal tokens")
    return nominal_tokens


def generate_corpus(spec: CorpusSpec) -> LabeledCorpus:
    """
    Time-ordered lines with strictly increasing millisecond timestamps. Anomalies are
    contiguous 2-4 event bursts placed in distinct gaps of the nominal stream.
    """
    _validate(spec)
    rng = np.random.default_rng(spec.seed)

    target = int(round(spec.n_events * spec.anomaly_rate))
    bursts: List[AnomalyPattern] = []
    remaining = target
    while remaining >= 2 and spec.anomaly_patterns:
        pattern = spec.anomaly_patterns[int(rng.integers(len(spec.anomaly_patterns)))]
        take = min(len(pattern.events), remaining)
        bursts.append(AnomalyPattern(events=pattern.events[:take], description=pattern.description)
                      if take < len(pattern.events) else pattern)
        remaining -= take

    n_anomalous = sum(len(b.events) for b in bursts)
    n_nominal = spec.n_events - n_anomalous
    if n_anomalous >= n_nominal:
        raise SpecInvalid(f"{n_anomalous} anomalous events would not be a strict minority of {spec.n_events}")
    if len(bursts) > n_nominal + 1:
        raise SpecInvalid("not enough nominal events to separate the anomaly bursts")

    gaps = sorted(rng.choice(n_nominal + 1, size=len(bursts), replace=False).tolist()) if bursts else []
    burst_at: Dict[int, AnomalyPattern] = dict(zip(gaps, bursts))

    weights = np.asarray([f.weight for f in spec.pv_families], dtype=np.float64)
    weights /= weights.sum()
    state_pos: Dict[str, int] = {}

    ts = CanonicalWire.parse_timestamp(spec.start)
    lines: List[str] = []
    labels: List[bool] = []

    def emit(pv: str, prev: str, new: str, description: str, anomalous: bool):
        nonlocal ts
        ts = ts + timedelta(milliseconds=int(rng.integers(1, spec.max_step_ms + 1)))
        event = LogEvent(timestamp=ts, pv=pv, prev_state=prev, new_state=new, description=description)
        lines.append(CanonicalWire.format_event_line(event))
        labels.append(anomalous)

    for slot in range(n_nominal + 1):
        if slot in burst_at:
            pattern = burst_at[slot]
            for pv, prev, new in pattern.events:
                emit(pv, prev, new, pattern.description, True)
        if slot == n_nominal:
            break
        family = spec.pv_families[int(rng.choice(len(spec.pv_families), p=weights))]
        pv = family.template.replace("{i}", family.instances[int(rng.integers(len(family.instances)))])
        pos = state_pos.get(pv, 0)
        prev, new = family.states[pos], family.states[(pos + 1) % len(family.states)]
        state_pos[pv] = (pos + 1) % len(family.states)
        emit(pv, prev, new, family.description, False)

    logger.info("SYNTH_CORPUS: %d events, %d anomalous in %d bursts (seed=%d).",
                len(lines), n_anomalous, len(bursts), spec.seed)
    return LabeledCorpus(lines=lines, labels=labels)


def write_labels_csv(labels: Sequence[bool], fh: TextIO):
    writer = csv.writer(fh, lineterminator="\n")
    writer.writerow(["line_no", "is_anomaly"])
    for i, flag in enumerate(labels, start=1):
        writer.writerow([i, int(bool(flag))])


def read_labels_csv(fh: TextIO) -> List[bool]:
    return [row["is_anomaly"].strip() in ("1", "true", "True") for row in csv.DictReader(fh)]


def rank_auroc(scores: Sequence[float], labels: Sequence[bool]) -> float:
    """Mann-Whitney form: (sum of anomalous ranks - n_a(n_a+1)/2) / (n_a * n_n), ties at mean rank."""
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    ranks = rankdata(scores, method="average")
    u_stat = float(ranks[positive].sum()) - n_pos * (n_pos + 1) / 2.0
    return u_stat / (n_pos * n_neg)


def evaluate(scores: Sequence[float], labels: Sequence[bool]) -> EvaluationReport:
    """
    AUROC plus median_ratio = median(anomalous) / median(nominal). A zero nominal median
    gives an infinite ratio. Single-class input raises DegenerateLabels with the partial report.
    """
    if len(scores) != len(labels):
        raise LengthMismatch(f"{len(scores)} scores vs {len(labels)} labels")
    values = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(labels, dtype=bool)
    nominal, anomalous = values[~positive], values[positive]

    p95_nominal = float(np.percentile(nominal, 95)) if len(nominal) else float("nan")
    median_nominal = float(np.median(nominal)) if len(nominal) else float("nan")
    median_anomalous = float(np.median(anomalous)) if len(anomalous) else float("nan")
    if len(nominal) and len(anomalous):
        median_ratio = median_anomalous / median_nominal if median_nominal > 0 else float("inf")
    else:
        median_ratio = float("nan")

    if len(nominal) == 0 or len(anomalous) == 0:
        partial = EvaluationReport(auroc=None, median_ratio=median_ratio, p95_nominal=p95_nominal,
                                   median_anomalous=median_anomalous, n_nominal=len(nominal),
                                   n_anomalous=len(anomalous))
        raise DegenerateLabels(f"{len(nominal)} nominal and {len(anomalous)} anomalous labels", partial)

    report = EvaluationReport(
        auroc=rank_auroc(values, positive),
        median_ratio=median_ratio,
        p95_nominal=p95_nominal,
        median_anomalous=median_anomalous,
        n_nominal=len(nominal),
        n_anomalous=len(anomalous),
    )
    logger.info("EVALUATION: auroc=%.4f median_ratio=%.3f over %d nominal / %d anomalous.",
                report.auroc, report.median_ratio, report.n_nominal, report.n_anomalous)
    return report
