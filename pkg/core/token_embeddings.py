import csv
import io
import logging
from dataclasses import dataclass
from typing import Dict, Iterable, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from data_models.config import EmbeddingConfig
from data_models.schemas import EventVector
from utils.canonical import CanonicalWire
from utils.errors import DimensionMismatch, EmptyVocab, NonFiniteUpdate

logger = logging.getLogger(__name__)

UNIGRAM_POWER = 0.75
CUM_TABLE_DOMAIN = 2**31 - 1
FINAL_LR_FRACTION = 0.1


@dataclass
class Vocab:
    """Dense 0..V-1 indices in order of first appearance; every kept token has count >= min_count."""
    index_to_token: List[str]
    counts: List[int]
    min_count: int

    def __post_init__(self):
        self.token_to_index: Dict[str, int] = {tok: i for i, tok in enumerate(self.index_to_token)}

    def __len__(self) -> int:
        return len(self.index_to_token)

    def __contains__(self, token: str) -> bool:
        return token in self.token_to_index

    def get(self, token: str) -> Optional[int]:
        return self.token_to_index.get(token)


@dataclass
class EmbeddingModel:
    """Per-token input vectors v(t) used downstream, plus the negative-sampling context weights."""
    vocab: Vocab
    input_vectors: np.ndarray   # V x D
    output_vectors: np.ndarray  # V x D

    def __post_init__(self):
        self.cum_table = make_cum_table(self.vocab.counts)

    @property
    def dim(self) -> int:
        return self.input_vectors.shape[1]

    def vector(self, token: str) -> Optional[np.ndarray]:
        idx = self.vocab.get(token)
        return None if idx is None else self.input_vectors[idx]


class PairGradient(NamedTuple):
    loss: float
    d_center: np.ndarray
    d_context: np.ndarray
    d_negatives: np.ndarray  # K x D


def build_vocab(sentences: Iterable[Iterable[str]], min_count: int = 1) -> Vocab:
    counts: Dict[str, int] = {}
    for sentence in sentences:
        for token in sentence:
            counts[token] = counts.get(token, 0) + 1  # dicts keep first-appearance order

    kept = [(tok, n) for tok, n in counts.items() if n >= min_count]
    if not kept:
        raise EmptyVocab(f"no token occurs at least {min_count} times ({len(counts)} distinct tokens seen)")

    logger.info("VOCAB_BUILT: %d of %d distinct tokens kept (min_count=%d).", len(kept), len(counts), min_count)
    logger.debug("VOCAB_HEAD: %s", [t for t, _ in kept[:20]])
    return Vocab(index_to_token=[t for t, _ in kept], counts=[n for _, n in kept], min_count=min_count)


def make_cum_table(counts: Sequence[int], power: float = UNIGRAM_POWER, domain: int = CUM_TABLE_DOMAIN) -> np.ndarray:
    """
    Cumulative unigram^power table. A uniform integer draw in [0, table[-1]) located with
    searchsorted(side='right') picks index i with probability count_i^power / sum.
    """
    weights = np.asarray(counts, dtype=np.float64) ** power
    cumulative = np.cumsum(weights) / weights.sum()
    table = np.round(cumulative * domain).astype(np.int64)
    table[-1] = domain
    return table


def _sg_batch_grad(centers: np.ndarray, contexts: np.ndarray, negatives: np.ndarray):
    """
    Negative-sampling loss and gradients for P pairs at once.
    centers, contexts: P x D. negatives: P x K x D.
    loss_p = -log sig(u_p . v_p) - sum_k log sig(-n_pk . v_p)
    """
    pos_logit = np.einsum("pd,pd->p", contexts, centers)
    neg_logit = np.einsum("pkd,pd->pk", negatives, centers)

    # -log sig(x) = log(1 + e^-x), computed without overflow
    losses = np.logaddexp(0.0, -pos_logit) + np.logaddexp(0.0, neg_logit).sum(axis=1)

    pos_coef = expit(pos_logit) - 1.0          # d loss / d pos_logit
    neg_coef = expit(neg_logit)                # d loss / d neg_logit

    d_centers = pos_coef[:, None] * contexts + np.einsum("pk,pkd->pd", neg_coef, negatives)
    d_contexts = pos_coef[:, None] * centers
    d_negatives = neg_coef[:, :, None] * centers[:, None, :]
    return losses, d_centers, d_contexts, d_negatives


def sg_pair_grad(center_vec, context_vec, negative_vecs) -> PairGradient:
    """Loss and exact analytic gradients for one (center, context) pair and its K negatives."""
    center = np.asarray(center_vec, dtype=np.float64)
    context = np.asarray(context_vec, dtype=np.float64)
    if center.ndim != 1 or context.shape != center.shape:
        raise DimensionMismatch(f"center {center.shape} vs context {context.shape}")

    dim = center.shape[0]
    negatives = np.asarray(negative_vecs, dtype=np.float64)
    if negatives.size == 0:
        negatives = np.zeros((0, dim))
    if negatives.ndim != 2 or negatives.shape[1] != dim:
        raise DimensionMismatch(f"negatives {negatives.shape} vs dimension {dim}")

    losses, d_c, d_ctx, d_neg = _sg_batch_grad(center[None, :], context[None, :], negatives[None, :, :])
    return PairGradient(float(losses[0]), d_c[0], d_ctx[0], d_neg[0])


def _sentence_pairs(indices: np.ndarray, window: int) -> Tuple[np.ndarray, np.ndarray]:
    centers, contexts = [], []
    n = len(indices)
    for i in range(n):
        for j in range(max(0, i - window), min(n, i + window + 1)):
            if j != i:
                centers.append(indices[i])
                contexts.append(indices[j])
    return np.asarray(centers, dtype=np.int64), np.asarray(contexts, dtype=np.int64)


class SkipGramTrainer:
    """
    Single-threaded SGNS. Every (center, context) pair inside `window` gets one update with
    its own linearly decayed learning rate. Unlike the classic per-pair sequential loop, the
    updates of one sentence are all computed against the weights at sentence start and then
    applied together, so a pair never sees the step taken by an earlier pair of the same
    sentence. Fully deterministic for a given seed.
    """

    def __init__(self, config: EmbeddingConfig, seed: int, show_progress: bool = False):
        self.config = config
        self.seed = seed
        self.show_progress = show_progress
        self.loss_trace: List[float] = []

    def train(self, sentences: Sequence[Iterable[str]]) -> EmbeddingModel:
        cfg = self.config
        sentences = [list(s) for s in sentences]
        vocab = build_vocab(sentences, cfg.min_count)
        rng = np.random.default_rng(self.seed)

        n_vocab, dim = len(vocab), cfg.dim
        input_vectors = (rng.random((n_vocab, dim)) - 0.5) / dim
        output_vectors = np.zeros((n_vocab, dim))
        model = EmbeddingModel(vocab=vocab, input_vectors=input_vectors, output_vectors=output_vectors)

        pair_sets = []
        for sentence in sentences:
            idx = np.asarray([vocab.get(t) for t in sentence if t in vocab], dtype=np.int64)
            centers, contexts = _sentence_pairs(idx, cfg.window)
            if len(centers):
                pair_sets.append((centers, contexts))

        total = cfg.epochs * sum(len(c) for c, _ in pair_sets)
        logger.info("W2V_START: %d sentences, %d pairs per epoch, vocab=%d, dim=%d, epochs=%d.",
                    len(sentences), total // max(cfg.epochs, 1), n_vocab, dim, cfg.epochs)
        if total == 0:
            if not pair_sets:
                logger.warning("W2V_NO_PAIRS: no sentence has two in-vocabulary tokens; vectors stay at initialization.")
            return model

        done = 0
        for epoch in tqdm(range(cfg.epochs), desc="skip-gram", disable=not self.show_progress):
            epoch_loss = 0.0
            for centers, contexts in pair_sets:
                n_pairs = len(centers)
                lr = cfg.learning_rate * (1.0 - (1.0 - FINAL_LR_FRACTION) * (done + np.arange(n_pairs)) / total)
                draws = rng.integers(0, model.cum_table[-1], size=(n_pairs, cfg.negatives))
                negs = np.searchsorted(model.cum_table, draws, side="right")

                losses, d_c, d_ctx, d_neg = _sg_batch_grad(
                    input_vectors[centers], output_vectors[contexts], output_vectors[negs]
                )
                np.add.at(input_vectors, centers, -lr[:, None] * d_c)
                np.add.at(output_vectors, contexts, -lr[:, None] * d_ctx)
                np.add.at(output_vectors, negs.ravel(), -(lr[:, None, None] * d_neg).reshape(-1, dim))

                # INVARIANT PROTECTED: Both matrices stay finite after every step.
                if not (np.isfinite(input_vectors[centers]).all() and np.isfinite(output_vectors[contexts]).all()
                        and np.isfinite(output_vectors[negs]).all()):
                    raise NonFiniteUpdate(
                        f"skip-gram weights diverged in epoch {epoch + 1} at lr={lr[0]:.3g}"
                    )
                epoch_loss += float(losses.sum())
                done += n_pairs

            self.loss_trace.append(epoch_loss / (total / cfg.epochs))
            logger.info("W2V_EPOCH: %d/%d mean pair loss %.6f", epoch + 1, cfg.epochs, self.loss_trace[-1])

        return model


def train_skipgram(sentences: Sequence[Iterable[str]], config: EmbeddingConfig, seed: int) -> EmbeddingModel:
    return SkipGramTrainer(config, seed).train(sentences)


def embed_event(tokens: Iterable[str], model: EmbeddingModel) -> EventVector:
    """E = sum of v(t) over in-vocabulary tokens. Out-of-vocabulary tokens contribute nothing."""
    values = np.zeros(model.dim)
    n_known = 0
    for token in tokens:
        idx = model.vocab.get(token)
        if idx is None:
            continue
        values = values + model.input_vectors[idx]
        n_known += 1
    return EventVector(values=values, n_known=n_known)


def most_similar(model: EmbeddingModel, token: str, topn: int = 10) -> List[Tuple[str, float]]:
    """Cosine nearest neighbours of a token's input vector, excluding itself."""
    idx = model.vocab.get(token)
    if idx is None:
        return []
    norms = np.linalg.norm(model.input_vectors, axis=1)
    norms[norms == 0.0] = 1.0
    unit = model.input_vectors / norms[:, None]
    sims = unit @ unit[idx]
    order = [i for i in np.argsort(-sims, kind="stable") if i != idx][:topn]
    return [(model.vocab.index_to_token[i], float(sims[i])) for i in order]


def export_embeddings_csv(model: EmbeddingModel) -> str:
    """Header token,dim_0..dim_{D-1}; rows in vocab index order; floats lossless."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["token"] + [f"dim_{k}" for k in range(model.dim)])
    for i, token in enumerate(model.vocab.index_to_token):
        writer.writerow([token] + [CanonicalWire.format_float(x) for x in model.input_vectors[i]])
    return buf.getvalue()
