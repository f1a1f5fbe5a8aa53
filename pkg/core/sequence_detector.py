import logging
from dataclasses import dataclass, field
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np
from scipy.special import expit
from tqdm import tqdm

from data_models.config import DetectorConfig
from data_models.schemas import EventVector, LogEvent, ScoredEvent, StreamState
from utils.errors import EmptyDataset, NonFiniteUpdate

logger = logging.getLogger(__name__)

# NOTE: The parameter set is exactly these seven matrices. No bias vectors anywhere.
MATRIX_NAMES = ("W_z", "W_r", "W_h", "U_z", "U_r", "U_h", "W_out")


@dataclass
class DetectorParams:
    """Bias-free GRU (input W_*, recurrent U_*) plus the latent projection W_out."""
    W_z: np.ndarray
    W_r: np.ndarray
    W_h: np.ndarray
    U_z: np.ndarray
    U_r: np.ndarray
    U_h: np.ndarray
    W_out: np.ndarray

    def __post_init__(self):
        hidden, inp = self.W_z.shape
        for name in ("W_r", "W_h"):
            if getattr(self, name).shape != (hidden, inp):
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {(hidden, inp)}")
        for name in ("U_z", "U_r", "U_h"):
            if getattr(self, name).shape != (hidden, hidden):
                raise ValueError(f"{name} shape {getattr(self, name).shape} != {(hidden, hidden)}")
        if self.W_out.ndim != 2 or self.W_out.shape[1] != hidden:
            raise ValueError(f"W_out shape {self.W_out.shape} incompatible with hidden size {hidden}")

    @property
    def input_dim(self) -> int:
        return self.W_z.shape[1]

    @property
    def hidden_dim(self) -> int:
        return self.W_z.shape[0]

    @property
    def latent_dim(self) -> int:
        return self.W_out.shape[0]

    def matrices(self) -> Dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in MATRIX_NAMES}

    def copy(self) -> "DetectorParams":
        return DetectorParams(**{name: m.copy() for name, m in self.matrices().items()})

    def is_finite(self) -> bool:
        return all(np.isfinite(m).all() for m in self.matrices().values())


@dataclass(frozen=True)
class Hypersphere:
    """Fixed center c. Every component satisfies |c_k| >= floor."""
    center: np.ndarray
    floor: float = 0.01
    frozen: bool = True

    def __post_init__(self):
        if not np.all(np.abs(self.center) >= self.floor):
            raise ValueError(f"Hypersphere center violates the {self.floor} component floor")


class DetectorGradients(NamedTuple):
    loss: float
    grads: Dict[str, np.ndarray]
    h_final: np.ndarray


class TrainingResult(NamedTuple):
    params: DetectorParams
    sphere: Hypersphere
    loss_trace: List[float]


def init_params(input_dim: int, hidden_dim: int, latent_dim: int, seed: int) -> DetectorParams:
    """Uniform in [-1/sqrt(fan_in), +1/sqrt(fan_in)], drawn in MATRIX_NAMES order from one seeded generator."""
    if min(input_dim, hidden_dim, latent_dim) < 1:
        raise ValueError(f"Detector dims must be >= 1, got D={input_dim} H={hidden_dim} Z={latent_dim}")
    rng = np.random.default_rng(seed)
    shapes = {
        "W_z": (hidden_dim, input_dim), "W_r": (hidden_dim, input_dim), "W_h": (hidden_dim, input_dim),
        "U_z": (hidden_dim, hidden_dim), "U_r": (hidden_dim, hidden_dim), "U_h": (hidden_dim, hidden_dim),
        "W_out": (latent_dim, hidden_dim),
    }
    matrices = {}
    for name in MATRIX_NAMES:
        shape = shapes[name]
        bound = 1.0 / np.sqrt(shape[1])
        matrices[name] = rng.uniform(-bound, bound, size=shape)
    return DetectorParams(**matrices)


def gru_step(params: DetectorParams, x_t: np.ndarray, h_prev: np.ndarray) -> np.ndarray:
    z = expit(params.W_z @ x_t + params.U_z @ h_prev)
    r = expit(params.W_r @ x_t + params.U_r @ h_prev)
    h_cand = np.tanh(params.W_h @ x_t + params.U_h @ (r * h_prev))
    return (1.0 - z) * h_prev + z * h_cand


def forward(params: DetectorParams, xs: Sequence[np.ndarray],
            h0: Optional[np.ndarray] = None) -> Tuple[np.ndarray, np.ndarray]:
    """
    Per-timestep latents W_out . h_t along xs, plus the final hidden state.
    Uses exactly the gru_step arithmetic so one-at-a-time scoring reproduces it bit for bit.
    """
    h = np.zeros(params.hidden_dim) if h0 is None else np.asarray(h0, dtype=np.float64)
    latents = np.empty((len(xs), params.latent_dim))
    for t, x in enumerate(xs):
        h = gru_step(params, x, h)
        latents[t] = params.W_out @ h
    return latents, h


def compute_center(params: DetectorParams, dataset: Sequence[Sequence[np.ndarray]],
                   floor: float = 0.01) -> Hypersphere:
    """
    c = mean of every per-timestep latent of a forward pass (each sequence from h = 0).
    Components with |c_k| < floor are pushed to sign(c_k) * floor; zero goes to +floor.
    """
    collected = [forward(params, xs)[0] for xs in dataset if len(xs)]
    if not collected:
        raise EmptyDataset("no timesteps in the dataset")
    center = np.concatenate(collected, axis=0).mean(axis=0)

    small = np.abs(center) < floor
    center = np.where(small, np.where(center < 0.0, -floor, floor), center)
    logger.info("SVDD_CENTER: %d components floored to +/-%g.", int(small.sum()), floor)
    logger.debug("SVDD_CENTER_VECTOR: %s", np.array2string(center, precision=4))
    return Hypersphere(center=center, floor=floor, frozen=True)


def _weight_penalty(params: DetectorParams, weight_decay: float) -> float:
    if weight_decay <= 0.0:
        return 0.0
    return 0.5 * weight_decay * sum(float(np.sum(m * m)) for m in params.matrices().values())


def svdd_loss(latents: np.ndarray, center: np.ndarray, params: Optional[DetectorParams] = None,
              weight_decay: float = 0.0) -> float:
    """(1/T) sum_t ||latent_t - c||^2, plus (lambda/2) sum ||W||_F^2 when weight_decay > 0."""
    latents = np.asarray(latents, dtype=np.float64)
    loss = 0.0
    if len(latents):
        diff = latents - center
        loss = float(np.mean(np.sum(diff * diff, axis=1)))
    if params is not None:
        loss += _weight_penalty(params, weight_decay)
    return loss


def svdd_loss_and_grads(params: DetectorParams, xs: np.ndarray, h0: np.ndarray, center: np.ndarray,
                        weight_decay: float = 0.0) -> DetectorGradients:
    """
    Segment loss and exact BPTT gradients for all seven matrices.
    h0 is a constant: gradients stop at the segment boundary.
    """
    xs = np.asarray(xs, dtype=np.float64).reshape(-1, params.input_dim)
    T, H = len(xs), params.hidden_dim
    W_z, W_r, W_h, U_z, U_r, U_h, W_out = (params.matrices()[n] for n in MATRIX_NAMES)

    hs = np.empty((T + 1, H))
    hs[0] = h0
    zs, rs, cands = np.empty((T, H)), np.empty((T, H)), np.empty((T, H))
    # Input projections for the whole segment at once; only the recurrent terms stay in the loop.
    xz, xr, xh = xs @ W_z.T, xs @ W_r.T, xs @ W_h.T
    for t in range(T):
        h_prev = hs[t]
        zs[t] = expit(xz[t] + U_z @ h_prev)
        rs[t] = expit(xr[t] + U_r @ h_prev)
        cands[t] = np.tanh(xh[t] + U_h @ (rs[t] * h_prev))
        hs[t + 1] = (1.0 - zs[t]) * h_prev + zs[t] * cands[t]

    grads = {name: np.zeros_like(m) for name, m in params.matrices().items()}
    loss = _weight_penalty(params, weight_decay)
    if T:
        latents = hs[1:] @ W_out.T
        diff = latents - center
        loss += float(np.mean(np.sum(diff * diff, axis=1)))

        d_lat = (2.0 / T) * diff
        grads["W_out"] = d_lat.T @ hs[1:]
        dh_out = d_lat @ W_out

        da_z, da_r, da_h = np.empty((T, H)), np.empty((T, H)), np.empty((T, H))
        dh_next = np.zeros(H)
        for t in reversed(range(T)):
            h_prev, z, r, cand = hs[t], zs[t], rs[t], cands[t]
            dh = dh_out[t] + dh_next

            d_cand = dh * z
            dz = dh * (cand - h_prev)
            dh_prev = dh * (1.0 - z)

            da_h[t] = d_cand * (1.0 - cand * cand)
            d_rh = U_h.T @ da_h[t]
            dh_prev += d_rh * r
            da_r[t] = d_rh * h_prev * r * (1.0 - r)
            da_z[t] = dz * z * (1.0 - z)

            dh_prev += U_z.T @ da_z[t] + U_r.T @ da_r[t]
            dh_next = dh_prev

        h_prevs = hs[:-1]
        grads["W_z"] = da_z.T @ xs
        grads["W_r"] = da_r.T @ xs
        grads["W_h"] = da_h.T @ xs
        grads["U_z"] = da_z.T @ h_prevs
        grads["U_r"] = da_r.T @ h_prevs
        grads["U_h"] = da_h.T @ (rs * h_prevs)

    if weight_decay > 0.0:
        for name, m in params.matrices().items():
            grads[name] = grads[name] + weight_decay * m

    return DetectorGradients(loss=loss, grads=grads, h_final=hs[T].copy())


@dataclass
class SvddTrainer:
    """
    Truncated BPTT over one continuous event-vector stream. The hidden state is carried across
    segments within an epoch and reset to zero at each epoch start; every segment applies one
    plain gradient-descent step to all seven matrices.
    """
    config: DetectorConfig
    show_progress: bool = False
    loss_trace: List[float] = field(default_factory=list)

    def train(self, params: DetectorParams, stream: np.ndarray) -> TrainingResult:
        cfg = self.config
        stream = np.asarray(stream, dtype=np.float64).reshape(-1, params.input_dim)
        if len(stream) == 0:
            raise EmptyDataset("event-vector stream is empty")

        params = params.copy()
        sphere = compute_center(params, [stream], cfg.center_floor)
        total = len(stream)
        logger.info("SVDD_START: %d events, segment_len=%d, epochs=%d, lr=%g, weight_decay=%g.",
                    total, cfg.segment_len, cfg.epochs, cfg.learning_rate, cfg.weight_decay)

        for epoch in tqdm(range(cfg.epochs), desc="svdd", disable=not self.show_progress):
            h = np.zeros(params.hidden_dim)
            weighted = 0.0
            for start in range(0, total, cfg.segment_len):
                segment = stream[start:start + cfg.segment_len]
                step = svdd_loss_and_grads(params, segment, h, sphere.center, cfg.weight_decay)
                for name, grad in step.grads.items():
                    getattr(params, name)[...] -= cfg.learning_rate * grad

                # INVARIANT PROTECTED: All entries finite after every training step.
                if not params.is_finite() or not np.isfinite(step.loss):
                    raise NonFiniteUpdate(f"detector weights diverged in epoch {epoch + 1} at lr={cfg.learning_rate:g}")
                logger.debug("SVDD_SEGMENT: epoch %d offset %d loss %.6g", epoch + 1, start, step.loss)
                weighted += step.loss * len(segment)
                h = step.h_final

            self.loss_trace.append(weighted / total)
            logger.info("SVDD_EPOCH: %d/%d loss %.6g", epoch + 1, cfg.epochs, self.loss_trace[-1])

        return TrainingResult(params=params, sphere=sphere, loss_trace=list(self.loss_trace))


def train_detector(params: DetectorParams, stream: np.ndarray, config: DetectorConfig) -> TrainingResult:
    return SvddTrainer(config).train(params, stream)


def score_step(params: DetectorParams, sphere: Hypersphere, state: StreamState, ev: EventVector,
               event: Optional[LogEvent] = None) -> Tuple[ScoredEvent, StreamState]:
    """One streaming step: needs only the carried state, never the history."""
    h = gru_step(params, ev.values, state.hidden)
    latent = params.W_out @ h
    score = float(np.linalg.norm(latent - sphere.center))
    return (
        ScoredEvent(event=event, score=score, latent=latent),
        StreamState(hidden=h, events_seen=state.events_seen + 1),
    )


def scores_from_latents(latents: np.ndarray, sphere: Hypersphere) -> np.ndarray:
    """Batch counterpart of score_step: per-row Euclidean distance to c."""
    return np.array([float(np.linalg.norm(lat - sphere.center)) for lat in latents])
