"""FederatedAveraging over sites with heterogeneous label schemes.

The server broadcasts its weights, every client runs a fixed number of SGD
iterations on its own data with the partial-label loss for its scheme, and
the server replaces its weights with the sample-count weighted mean of the
returned client weights.
"""
from __future__ import annotations

import logging
import math
import zlib
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field

import numpy as np

from . import segnet
from .labelspace import ExclusionSets, PartialScheme
from .losses import LossConfig, combined_loss
from .segnet import ModelParams

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class FedConfig:
    global_rounds: int = 100
    client_iterations: int = 10
    lr: float = 0.05
    momentum: float = 0.9
    grad_clip: float = 0.5  # max gradient L2 norm; 0 disables
    batch_size: int = 2
    warmstart_epochs: int = 10
    seed: int = 0
    lr_decay: bool = True
    decay_patience: int = 10
    decay_threshold: float = 1e-3
    decay_factor: float = 0.8
    central_iterations: int | None = None  # default: K * R * n_iter

    def __post_init__(self):
        if self.global_rounds < 0:
            raise ValueError("global_rounds must be >= 0")
        if self.client_iterations < 0:
            raise ValueError("client_iterations must be >= 0")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.lr < 0:
            raise ValueError("lr must be >= 0")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.grad_clip < 0:
            raise ValueError("grad_clip must be >= 0")

    @property
    def total_iterations(self) -> int:
        return self.global_rounds * self.client_iterations

    def to_dict(self) -> dict:
        return asdict(self)


def _stream(seed: int, tag) -> np.random.Generator:
    key = tag if isinstance(tag, int) else zlib.crc32(str(tag).encode())
    return np.random.default_rng([int(seed), int(key)])


class BatchSampler:
    """Reshuffles the index set every epoch; batches never straddle epochs."""

    def __init__(self, n: int, batch_size: int, rng: np.random.Generator):
        if n < 1:
            raise ValueError("empty dataset")
        self.n, self.batch_size, self.rng = n, batch_size, rng
        self.order = np.empty(0, dtype=np.int64)
        self.pos = 0
        self.epoch = 0

    @property
    def batches_per_epoch(self) -> int:
        return math.ceil(self.n / self.batch_size)

    def next(self):
        """Returns (indices, epoch_finished)."""
        if self.pos >= self.order.size:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        idx = self.order[self.pos: self.pos + self.batch_size]
        self.pos += idx.size
        done = self.pos >= self.order.size
        if done:
            self.epoch += 1
        return idx, done


class PlateauDecay:
    """Multiply the lr by ``factor`` once the epoch loss has failed to improve
    by ``threshold`` for ``patience`` consecutive epochs."""

    def __init__(self, lr: float, patience=10, threshold=1e-3, factor=0.8, enabled=True):
        self.lr = lr
        self.patience, self.threshold, self.factor = patience, threshold, factor
        self.enabled = enabled
        self.best = math.inf
        self.stale = 0

    def update(self, epoch_loss: float) -> float:
        if self.best - epoch_loss >= self.threshold:
            self.best = epoch_loss
            self.stale = 0
        else:
            self.stale += 1
            if self.enabled and self.stale >= self.patience:
                self.lr *= self.factor
                self.stale = 0
        return self.lr


class TrainingSet:
    """Images with merged targets and a label scheme per sample."""

    def __init__(self, inputs, targets, scheme_ids, schemes):
        self.inputs = inputs
        self.targets = targets
        self.scheme_ids = np.asarray(scheme_ids, dtype=np.int64)
        self.schemes = list(schemes)
        self.exclusions = [s.exclusion_sets() for s in self.schemes]

    def __len__(self):
        return self.inputs.shape[0]

    @classmethod
    def from_dataset(cls, ds) -> "TrainingSet":
        return cls(ds.inputs(), ds.visible_masks.astype(np.int64), np.zeros(len(ds)), [ds.scheme])

    @classmethod
    def pooled(cls, datasets) -> "TrainingSet":
        parts = [cls.from_dataset(ds) for ds in datasets]
        ids = np.concatenate([np.full(len(p), k) for k, p in enumerate(parts)])
        return cls(
            np.concatenate([p.inputs for p in parts]),
            np.concatenate([p.targets for p in parts]),
            ids,
            [p.schemes[0] for p in parts],
        )


def batch_loss_and_grad(params: ModelParams, data: TrainingSet, idx, loss_cfg: LossConfig):
    """Mean per-sample loss over a batch and its parameter gradient."""
    x = data.inputs[idx]
    logits, cache = segnet.forward(params, x, keep_cache=True)
    dlogits = np.empty(logits.shape, dtype=np.float64)
    total = 0.0
    for b, i in enumerate(idx):
        k = data.scheme_ids[i]
        r = combined_loss(logits[b], data.targets[i], data.schemes[k], data.exclusions[k], loss_cfg)
        total += r.value
        dlogits[b] = r.grad
    n = len(idx)
    grad = segnet.backward(params, x, dlogits / n, cache)
    return total / n, grad


@dataclass
class ClientState:
    client_id: object
    data: TrainingSet
    loss_cfg: LossConfig
    sampler: BatchSampler
    schedule: PlateauDecay
    dataset: object = None
    weights: ModelParams | None = None
    velocity: np.ndarray | None = None
    last_mean_loss: float = float("nan")
    epoch_log: list = field(default_factory=list)
    _epoch_losses: list = field(default_factory=list)

    @property
    def sample_count(self) -> int:
        return len(self.data)

    @property
    def scheme(self) -> PartialScheme | None:
        return self.data.schemes[0] if len(self.data.schemes) == 1 else None

    @property
    def exclusions(self) -> ExclusionSets | None:
        return self.data.exclusions[0] if len(self.data.exclusions) == 1 else None

    @property
    def lr(self) -> float:
        return self.schedule.lr


def make_client(client_id, dataset, loss_cfg: LossConfig, cfg: FedConfig, stream=None) -> ClientState:
    """Client over one site's training split (or a TrainingSet)."""
    data = dataset if isinstance(dataset, TrainingSet) else TrainingSet.from_dataset(dataset)
    if len(data) == 0:
        raise ValueError(f"client {client_id}: empty dataset")
    rng = _stream(cfg.seed, client_id if stream is None else stream)
    return ClientState(
        client_id=client_id,
        data=data,
        loss_cfg=loss_cfg,
        sampler=BatchSampler(len(data), cfg.batch_size, rng),
        schedule=PlateauDecay(cfg.lr, cfg.decay_patience, cfg.decay_threshold, cfg.decay_factor, cfg.lr_decay),
        dataset=None if isinstance(dataset, TrainingSet) else dataset,
    )


def client_update(state: ClientState, w_in: ModelParams, cfg: FedConfig, iterations: int | None = None,
                  freeze_mask=None) -> ModelParams:
    """Run local SGD from ``w_in``; ``w_in`` itself is never modified."""
    if state.weights is not None and not state.weights.same_layout(w_in):
        raise ValueError(f"client {state.client_id}: weight layout mismatch")
    n_iter = cfg.client_iterations if iterations is None else iterations
    w = w_in
    losses = []
    if state.velocity is None:
        state.velocity = np.zeros_like(w_in.flat)
    for _ in range(n_iter):
        idx, epoch_done = state.sampler.next()
        value, grad = batch_loss_and_grad(w, state.data, idx, state.loss_cfg)
        if cfg.grad_clip > 0:
            norm = float(np.linalg.norm(grad))
            if norm > cfg.grad_clip:
                grad = grad * (cfg.grad_clip / norm)
        if cfg.momentum > 0:
            # buffer persists across rounds so one client reproduces local training
            state.velocity = cfg.momentum * state.velocity + grad
            grad = state.velocity
        w = segnet.sgd_step(w, grad, state.schedule.lr, freeze_mask)
        losses.append(value)
        state._epoch_losses.append(value)
        if epoch_done:
            mean = float(np.mean(state._epoch_losses))
            state.epoch_log.append((state.sampler.epoch, mean, state.schedule.lr))
            state._epoch_losses = []
            state.schedule.update(mean)
    state.weights = w
    state.last_mean_loss = float(np.mean(losses)) if losses else float("nan")
    return w if n_iter else w_in


def aggregation_weights(updates) -> dict:
    total = sum(n for _, n, _ in updates)
    return {cid: n / total for cid, n, _ in updates}


def aggregate(updates) -> ModelParams:
    """Sample-count weighted mean of client weights, summed in client-id order."""
    if not updates:
        raise ValueError("nothing to aggregate")
    updates = sorted(updates, key=lambda u: u[0])
    ref = updates[0][2]
    if any(not p.same_layout(ref) for _, _, p in updates):
        raise ValueError("client weight layouts differ")
    if any(n <= 0 for _, n, _ in updates):
        raise ValueError("sample counts must be positive")
    total = sum(n for _, n, _ in updates)
    acc = np.zeros(ref.size, dtype=np.float64)
    for _, n, p in updates:
        acc += n * p.flat.astype(np.float64)
    return ref.with_flat((acc / total).astype(ref.flat.dtype))


@dataclass
class TrainResult:
    params: ModelParams
    trace: list  # rows: (round, client_id, mean_loss, lr)
    warm_params: ModelParams | None = None


def _full_client(clients):
    full = [c for c in clients if c.scheme is not None and c.scheme.is_full]
    return full[0] if full else None


def warm_start(client: ClientState, init: ModelParams, cfg: FedConfig):
    """Train on a fully labeled client alone for ``cfg.warmstart_epochs`` epochs."""
    warm = make_client(client.client_id, client.data, client.loss_cfg, cfg, stream=f"warm:{client.client_id}")
    iters = cfg.warmstart_epochs * warm.sampler.batches_per_epoch
    params = client_update(warm, init, cfg, iterations=iters)
    trace = [(0, f"warm:{client.client_id}", loss, lr) for _, loss, lr in warm.epoch_log]
    return params, trace


def _maybe_warm(clients, init, cfg):
    if cfg.warmstart_epochs <= 0:
        return init, []
    full = _full_client(clients)
    if full is None:
        log.info("no fully labeled client; skipping warm start")
        return init, []
    return warm_start(full, init, cfg)


def run_federated(clients, cfg: FedConfig, init: ModelParams, threads: int = 1, on_round=None) -> TrainResult:
    if not clients:
        raise ValueError("need at least one client")
    ids = [c.client_id for c in clients]
    if len(set(ids)) != len(ids):
        raise ValueError("client ids must be unique")
    w, trace = _maybe_warm(clients, init, cfg)
    warm = w if trace else None
    pool = ThreadPoolExecutor(max_workers=threads) if threads > 1 else None
    try:
        for r in range(1, cfg.global_rounds + 1):
            def work(c, w=w):
                return client_update(c, w, cfg)
            results = list(pool.map(work, clients)) if pool else [work(c) for c in clients]
            w = aggregate([(c.client_id, c.sample_count, p) for c, p in zip(clients, results)])
            for c in clients:
                trace.append((r, c.client_id, c.last_mean_loss, c.lr))
            if on_round is not None:
                on_round(r, w)
    finally:
        if pool:
            pool.shutdown()
    return TrainResult(w, trace, warm)


def run_local(client: ClientState, cfg: FedConfig, init: ModelParams) -> TrainResult:
    """Site-only training: the same iteration budget a federated client gets."""
    w, trace = _maybe_warm([client], init, cfg)
    warm = w if trace else None
    w = client_update(client, w, cfg, iterations=cfg.total_iterations)
    trace += [(ep, client.client_id, loss, lr) for ep, loss, lr in client.epoch_log]
    return TrainResult(w, trace, warm)


def run_central(clients, cfg: FedConfig, init: ModelParams) -> TrainResult:
    """Train one model on the union of all client samples (upper bound).

    Each sample keeps its own scheme. The pooled sampler uses the first
    client's stream, so a single client reproduces federated training.
    """
    if not clients:
        raise ValueError("need at least one client")
    w, trace = _maybe_warm(clients, init, cfg)
    warm = w if trace else None
    pooled = _pool_clients(clients)
    state = make_client(clients[0].client_id, pooled, clients[0].loss_cfg, cfg)
    iters = cfg.central_iterations
    if iters is None:
        iters = len(clients) * cfg.total_iterations
    w = client_update(state, w, cfg, iterations=iters)
    trace += [(ep, "central", loss, lr) for ep, loss, lr in state.epoch_log]
    return TrainResult(w, trace, warm)


def _pool_clients(clients) -> TrainingSet:
    if len(clients) == 1:
        return clients[0].data
    schemes, inputs, targets, ids = [], [], [], []
    for c in clients:
        offset = len(schemes)
        schemes += c.data.schemes
        inputs.append(c.data.inputs)
        targets.append(c.data.targets)
        ids.append(c.data.scheme_ids + offset)
    return TrainingSet(np.concatenate(inputs), np.concatenate(targets), np.concatenate(ids), schemes)
