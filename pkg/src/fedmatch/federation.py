"""Round orchestration for both scenarios, plus the baseline trainers.

Rounds are bulk-synchronous: the server broadcasts an immutable snapshot,
selected clients train independently (optionally through a caller-supplied
scheduler for parallel execution), and a serial barrier reconstructs,
embeds, aggregates and logs. Every client draws its randomness from a
stream keyed by (seed, round, client id), so the schedule cannot change
results.

Parameter synchronization is delta-coded in both directions. Server and
client both apply the same sparse deltas to a shared per-client reference,
which keeps the two mirrors bit-identical while the true local weights are
reconstructed to within the threshold per element.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Collection, Iterable, Optional, Sequence

import numpy as np

from . import comm
from .consistency import AugmentConfig, HelperSet, EMPTY_HELPERS, augment
from .data import (
    LABELS_AT_CLIENT,
    LABELS_AT_SERVER,
    SCENARIOS,
    ClientDataHandle,
    Dataset,
    PartitionPlan,
    build_client_handles,
    stream_step_for_round,
)
from .decomposition import DecomposedModel, LossConfig, compose, supervised_step, unsupervised_step
from .errors import ConfigError
from .helpers import EmbeddingIndex, ModelEmbedding, ProbeInput, embed_model, helper_due, query_helpers
from .nn import (
    ModelArch,
    OptimState,
    ParamVector,
    PROB_FLOOR,
    _backward_from_dlogits,
    _forward_cached,
    ce_value_and_grad,
    init_params,
    lr_step,
    one_hot_labels,
)

log = logging.getLogger(__name__)

FEDMATCH = "fedmatch"
FEDAVG_SL = "fedavg_sl"
FEDPROX_SL = "fedprox_sl"
FEDAVG_FIXMATCH = "fedavg_fixmatch"
FEDPROX_FIXMATCH = "fedprox_fixmatch"
METHODS = (FEDMATCH, FEDAVG_SL, FEDPROX_SL, FEDAVG_FIXMATCH, FEDPROX_FIXMATCH)

# rng stream tags; combined with the run seed they keep every source of
# randomness independent of client scheduling
_TAG_INIT = 0
_TAG_SELECT = 1
_TAG_CLIENT = 2
_TAG_PROBE = 3
_TAG_SERVER = 4

_PROBE_LOSS_ROWS = 256


@dataclass(frozen=True)
class RoundConfig:
    """Everything one experiment run needs besides the dataset itself."""

    scenario: str = LABELS_AT_CLIENT
    n_clients: int = 10
    fraction: float = 1.0
    n_rounds: int = 100
    local_epochs: int = 1
    server_epochs: int = 1
    n_helpers: int = 2
    helper_period: int = 10
    loss: LossConfig = field(default_factory=LossConfig)
    comm_threshold: float = comm.DEFAULT_THRESHOLD
    seed: int = 0
    lr: float = 1e-3
    batch_labeled: int = 10
    batch_unlabeled: int = 100
    batch_labeled_server: int = 100
    mu: float = 1e-2
    lambda_u: float = 1.0
    hidden_dims: tuple[int, ...] = (32,)
    activation: str = "tanh"
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    probe_rows: int = 8
    # scale of the random init for the unlabeled-data half; small but nonzero
    # so unused coordinates can decay to exact zero over the wire while
    # consistency-driven ones grow
    psi_init_scale: float = 1e-4

    def __post_init__(self):
        if self.scenario not in SCENARIOS:
            raise ConfigError(f"unknown scenario {self.scenario!r}")
        if self.n_clients < 1:
            raise ConfigError("need at least one client")
        if not 0.0 < self.fraction <= 1.0:
            raise ConfigError("fraction must exceed 0 and not exceed 1")
        if self.n_active < 1:
            raise ConfigError("fraction times client count must round to at least 1")
        if self.n_rounds < 1:
            raise ConfigError("need at least one round")
        if self.local_epochs < 0 or self.server_epochs < 0:
            raise ConfigError("epoch counts must be non-negative")
        if self.n_helpers < 0:
            raise ConfigError("helper count must be non-negative")
        if self.helper_period < 1:
            raise ConfigError("helper period must be positive")
        if self.comm_threshold < 0:
            raise ConfigError("communication threshold must be non-negative")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if min(self.batch_labeled, self.batch_unlabeled, self.batch_labeled_server) < 1:
            raise ConfigError("batch sizes must be positive")
        if self.mu < 0 or self.lambda_u < 0:
            raise ConfigError("mu and lambda_u must be non-negative")
        if self.psi_init_scale < 0:
            raise ConfigError("psi_init_scale must be non-negative")

    @property
    def n_active(self) -> int:
        return int(round(self.fraction * self.n_clients))


@dataclass
class ClientState:
    """Server-side record of one client between rounds."""

    client_id: int
    handle: ClientDataHandle
    ref: Optional[DecomposedModel] = None
    opt: Optional[OptimState] = None
    last_update_round: Optional[int] = None


@dataclass
class RoundMetrics:
    round_no: int
    test_acc: float
    labeled_acc: float
    loss_s: float
    loss_u: float
    s2c_pct: float
    c2s_pct: float
    nnz_psi_frac: float


CSV_HEADER = "round,test_acc,labeled_acc,loss_s,loss_u,s2c_pct,c2s_pct,nnz_psi_frac"


@dataclass
class ExperimentResult:
    method: str
    scenario: str
    rounds: list[RoundMetrics] = field(default_factory=list)
    label_reads: list[int] = field(default_factory=list)

    @property
    def final(self) -> RoundMetrics:
        return self.rounds[-1]

    def csv_text(self) -> str:
        lines = [CSV_HEADER]
        for m in self.rounds:
            lines.append(
                f"{m.round_no},{m.test_acc!r},{m.labeled_acc!r},{m.loss_s!r},"
                f"{m.loss_u!r},{m.s2c_pct!r},{m.c2s_pct!r},{m.nnz_psi_frac!r}"
            )
        return "\n".join(lines) + "\n"


Scheduler = Callable[[Sequence[Callable[[], object]]], Iterable[object]]


def select_clients(n_clients: int, fraction: float, rng: np.random.Generator) -> np.ndarray:
    """Uniform sample without replacement of round(fraction * n_clients) ids, sorted."""
    n_active = int(round(fraction * n_clients))
    if not 1 <= n_active <= n_clients:
        raise ValueError("selection size must lie in [1, n_clients]")
    return np.sort(rng.choice(n_clients, size=n_active, replace=False))


def aggregate_mean(vectors: Sequence[ParamVector]) -> ParamVector:
    """Unweighted element-wise mean."""
    if not vectors:
        raise ValueError("cannot aggregate zero vectors")
    first = vectors[0]
    stacked = np.stack([v.values for v in vectors])
    return ParamVector(stacked.mean(axis=0), first.arch)


def aggregate_weighted(vectors: Sequence[ParamVector], sizes: Sequence[float]) -> ParamVector:
    """Size-weighted mean, normalized over the participating clients."""
    if not vectors:
        raise ValueError("cannot aggregate zero vectors")
    sizes = np.asarray(sizes, dtype=np.float64)
    if np.any(sizes <= 0):
        raise ValueError("sizes must be positive")
    weights = sizes / sizes.sum()
    stacked = np.stack([v.values for v in vectors])
    return ParamVector(weights @ stacked, vectors[0].arch)


def fedprox_gradient_term(theta: np.ndarray, theta_global: np.ndarray, mu: float) -> np.ndarray:
    """Proximal gradient addend mu * (theta - theta_global)."""
    theta = np.asarray(theta, dtype=np.float64)
    theta_global = np.asarray(theta_global, dtype=np.float64)
    if theta.shape != theta_global.shape:
        raise ValueError("parameter vectors must have equal length")
    return mu * (theta - theta_global)


def _minibatches(n: int, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    if n == 0:
        return []
    order = rng.permutation(n)
    return [order[i : i + batch_size] for i in range(0, n, batch_size)]


def _cycle_zip(a: list, b: list):
    """Pair two batch lists, cycling the shorter one."""
    steps = max(len(a), len(b))
    for i in range(steps):
        yield (a[i % len(a)] if a else None, b[i % len(b)] if b else None)


def _client_rng(seed: int, round_no: int, client_id: int) -> np.random.Generator:
    return np.random.default_rng([seed, _TAG_CLIENT, round_no, client_id])


def _accuracy(params: ParamVector, features: np.ndarray, labels: np.ndarray) -> float:
    probs, _ = _forward_cached(params, features)
    return float((probs.argmax(axis=1) == labels).mean())


def _mean_ce(params: ParamVector, features: np.ndarray, targets: np.ndarray) -> float:
    probs, _ = _forward_cached(params, features)
    return float(-(targets * np.log(np.maximum(probs, PROB_FLOOR))).sum(axis=1).mean())


def _unsup_probe_loss(params: ParamVector, features: np.ndarray, tau: float) -> float:
    """Pseudo-label cross-entropy of the model against its own confident argmax."""
    if features.shape[0] == 0:
        return 0.0
    probs, _ = _forward_cached(params, features)
    keep = probs.max(axis=1) >= tau
    if not keep.any():
        return 0.0
    kept = probs[keep]
    picked = kept[np.arange(kept.shape[0]), kept.argmax(axis=1)]
    return float(-np.log(np.maximum(picked, PROB_FLOOR)).mean())


def _nnz_fraction(values: np.ndarray) -> float:
    return float(np.count_nonzero(values) / values.shape[0])


class _EvalPools:
    """Deterministic evaluation slices shared by every method."""

    def __init__(self, ds: Dataset, plan: PartitionPlan):
        test_idx = ds.indices_of("test")
        valid_idx = ds.indices_of("valid")
        self.test_x = ds.features[test_idx]
        self.test_y = ds.labels[test_idx]
        self.valid_x = ds.features[valid_idx]
        self.valid_t = one_hot_labels(ds.labels[valid_idx], ds.n_classes)
        labeled_idx = np.sort(np.concatenate(plan.labeled))
        self.labeled_x = ds.features[labeled_idx]
        self.labeled_y = ds.labels[labeled_idx]
        self.labeled_t = one_hot_labels(self.labeled_y, ds.n_classes)
        unl_idx = np.sort(np.concatenate(plan.unlabeled))[:_PROBE_LOSS_ROWS]
        self.unlabeled_x = ds.features[unl_idx]

    def metrics(self, params: ParamVector, tau: float) -> tuple[float, float, float, float]:
        return (
            _accuracy(params, self.test_x, self.test_y),
            _accuracy(params, self.labeled_x, self.labeled_y),
            _mean_ce(params, self.labeled_x, self.labeled_t),
            _unsup_probe_loss(params, self.unlabeled_x, tau),
        )


def _run_jobs(jobs: Sequence[Callable[[], object]], scheduler: Optional[Scheduler]):
    if scheduler is None:
        return [job() for job in jobs]
    return list(scheduler(jobs))


@dataclass
class _ClientUpdate:
    client_id: int
    d_sigma: Optional[comm.SparseDelta]
    d_psi: Optional[comm.SparseDelta]
    n_examples: int


class _FedMatchRunner:
    """Decomposed training with helper consistency and delta-coded sync."""

    def __init__(self, cfg: RoundConfig, ds: Dataset, plan: PartitionPlan):
        self.cfg = cfg
        self.ds = ds
        self.plan = plan
        self.arch = ModelArch((ds.dim, *cfg.hidden_dims, ds.n_classes), cfg.activation)
        handles, server_pool = build_client_handles(ds, plan, cfg.scenario)
        self.server_pool = server_pool
        rng_init = np.random.default_rng([cfg.seed, _TAG_INIT])
        sigma0 = init_params(self.arch, rng_init)
        psi0 = ParamVector(
            cfg.psi_init_scale * rng_init.standard_normal(self.arch.n_params), self.arch
        )
        self.global_model = DecomposedModel(sigma0, psi0)
        self.clients = [
            ClientState(client_id=a, handle=h, ref=DecomposedModel(sigma0, psi0))
            for a, h in enumerate(handles)
        ]
        self.probe = ProbeInput.make(ds.dim, n_rows=cfg.probe_rows, seed=cfg.seed + _TAG_PROBE)
        self.latest: dict[int, DecomposedModel] = {}
        self.embeddings: dict[int, ModelEmbedding] = {}
        self.index: Optional[EmbeddingIndex] = None
        self.ledger = comm.CostLedger()
        self.opt = OptimState(cfg.lr)
        self.pools = _EvalPools(ds, plan)

    def _server_supervised_phase(self, round_no: int) -> None:
        features, labels = self.server_pool
        targets = one_hot_labels(labels, self.arch.n_classes)
        rng = np.random.default_rng([self.cfg.seed, _TAG_SERVER, round_no])
        model = self.global_model
        for _ in range(self.cfg.server_epochs):
            for idx in _minibatches(features.shape[0], self.cfg.batch_labeled_server, rng):
                model = supervised_step(
                    model, (features[idx], targets[idx]), self.cfg.loss, self.opt
                )
        self.global_model = model

    def _helper_payload(
        self, client_id: int, psi_ref: np.ndarray, sigma_recv: ParamVector
    ) -> HelperSet:
        """Materialize frozen helper models for one client, cost-counted into s2c."""
        ids = query_helpers(self.index, client_id, self.cfg.n_helpers)
        members = []
        deltas = []
        for peer in ids:
            d = comm.diff(self.latest[peer].psi.values, psi_ref, self.cfg.comm_threshold)
            deltas.append(d)
            peer_psi = comm.apply(psi_ref, d)
            members.append(ParamVector(sigma_recv.values + peer_psi, self.arch))
        self.ledger.record_round("s2c", (), helper_deltas=deltas)
        return HelperSet(members=tuple(members), source_ids=tuple(ids))

    def _make_job(
        self,
        client: ClientState,
        round_no: int,
        sigma_recv: ParamVector,
        psi_recv: ParamVector,
        helper_set: HelperSet,
    ) -> Callable[[], _ClientUpdate]:
        cfg = self.cfg
        unsupervised_only = cfg.scenario == LABELS_AT_SERVER
        handle = client.handle
        opt = OptimState(self.opt.lr)
        n_classes = self.arch.n_classes
        step = stream_step_for_round(self.plan, round_no) if self.plan.stream_chunks else 0

        def job() -> _ClientUpdate:
            rng = _client_rng(cfg.seed, round_no, client.client_id)
            model = DecomposedModel(sigma_recv, psi_recv)
            unlabeled = handle.unlabeled_features(step)
            if unsupervised_only:
                labeled_x = labeled_t = None
            else:
                labeled_x, labeled_y = handle.labeled_arrays()
                labeled_t = one_hot_labels(labeled_y, n_classes)
            for _ in range(cfg.local_epochs):
                lab = (
                    []
                    if unsupervised_only
                    else _minibatches(labeled_x.shape[0], cfg.batch_labeled, rng)
                )
                unl = _minibatches(unlabeled.shape[0], cfg.batch_unlabeled, rng)
                for li, ui in _cycle_zip(lab, unl):
                    if li is not None:
                        model = supervised_step(
                            model, (labeled_x[li], labeled_t[li]), cfg.loss, opt
                        )
                    if ui is not None:
                        model = unsupervised_step(
                            model, unlabeled[ui], helper_set, cfg.loss, opt, cfg.augment, rng
                        )
            d_sigma = None
            if not unsupervised_only:
                d_sigma = comm.diff(model.sigma.values, sigma_recv.values, cfg.comm_threshold)
            d_psi = comm.diff(model.psi.values, psi_recv.values, cfg.comm_threshold)
            n_examples = unlabeled.shape[0] + (0 if labeled_x is None else labeled_x.shape[0])
            return _ClientUpdate(client.client_id, d_sigma, d_psi, n_examples)

        return job

    def run(
        self,
        scheduler: Optional[Scheduler] = None,
        dropouts: Collection[tuple[int, int]] = frozenset(),
    ) -> ExperimentResult:
        cfg = self.cfg
        result = ExperimentResult(method=FEDMATCH, scenario=cfg.scenario)
        n = self.arch.n_params
        for round_no in range(1, cfg.n_rounds + 1):
            if cfg.scenario == LABELS_AT_SERVER:
                self._server_supervised_phase(round_no)
            rng_sel = np.random.default_rng([cfg.seed, _TAG_SELECT, round_no])
            selected = select_clients(cfg.n_clients, cfg.fraction, rng_sel)
            active = [a for a in selected if (round_no, a) not in dropouts]
            for a in selected:
                if (round_no, a) in dropouts:
                    log.warning("client %d dropped at round %d", a, round_no)
            c2s_vectors = 1 if cfg.scenario == LABELS_AT_SERVER else 2
            self.ledger.open_round(
                round_no, s2c_dense=2 * n * len(active), c2s_dense=c2s_vectors * n * len(active)
            )
            helpers_this_round = (
                cfg.n_helpers > 0
                and self.index is not None
                and helper_due(round_no, cfg.helper_period)
            )
            jobs = []
            for a in active:
                client = self.clients[a]
                d_sig = comm.diff(
                    self.global_model.sigma.values, client.ref.sigma.values, cfg.comm_threshold
                )
                d_psi = comm.diff(
                    self.global_model.psi.values, client.ref.psi.values, cfg.comm_threshold
                )
                self.ledger.record_round("s2c", (d_sig, d_psi))
                sigma_recv = client.ref.sigma.with_values(comm.apply(client.ref.sigma.values, d_sig))
                psi_recv = client.ref.psi.with_values(comm.apply(client.ref.psi.values, d_psi))
                client.ref = DecomposedModel(sigma_recv, psi_recv)
                helper_set = EMPTY_HELPERS
                if helpers_this_round and a in self.embeddings:
                    helper_set = self._helper_payload(a, psi_recv.values, sigma_recv)
                client.opt = OptimState(self.opt.lr)
                jobs.append(self._make_job(client, round_no, sigma_recv, psi_recv, helper_set))
            updates = sorted(_run_jobs(jobs, scheduler), key=lambda u: u.client_id)

            sigmas, psis, client_nnz = [], [], []
            for update in updates:
                client = self.clients[update.client_id]
                if update.d_sigma is not None:
                    self.ledger.record_round("c2s", (update.d_sigma, update.d_psi))
                    new_sigma = client.ref.sigma.with_values(
                        comm.apply(client.ref.sigma.values, update.d_sigma)
                    )
                else:
                    self.ledger.record_round("c2s", (update.d_psi,))
                    new_sigma = client.ref.sigma
                new_psi = client.ref.psi.with_values(comm.apply(client.ref.psi.values, update.d_psi))
                client.ref = DecomposedModel(new_sigma, new_psi)
                client.last_update_round = round_no
                self.latest[update.client_id] = client.ref
                self.embeddings[update.client_id] = embed_model(
                    compose(client.ref), self.probe, update.client_id, round_no
                )
                sigmas.append(new_sigma)
                psis.append(new_psi)
                client_nnz.append(_nnz_fraction(new_psi.values))
            if psis:
                new_psi = aggregate_mean(psis)
                new_sigma = (
                    self.global_model.sigma
                    if cfg.scenario == LABELS_AT_SERVER
                    else aggregate_mean(sigmas)
                )
                self.global_model = DecomposedModel(new_sigma, new_psi)
            if self.embeddings:
                self.index = EmbeddingIndex(list(self.embeddings.values()))

            composed = compose(self.global_model)
            test_acc, labeled_acc, loss_s, loss_u = self.pools.metrics(composed, cfg.loss.tau)
            costs = self.ledger.current
            # sparsity of the unlabeled-data half as trained at the clients;
            # the aggregate mean would blur exact zeros across clients
            nnz = (
                float(np.mean(client_nnz))
                if client_nnz
                else _nnz_fraction(self.global_model.psi.values)
            )
            result.rounds.append(
                RoundMetrics(
                    round_no=round_no,
                    test_acc=test_acc,
                    labeled_acc=labeled_acc,
                    loss_s=loss_s,
                    loss_u=loss_u,
                    s2c_pct=costs.s2c_pct,
                    c2s_pct=costs.c2s_pct,
                    nnz_psi_frac=nnz,
                )
            )
            val_loss = _mean_ce(composed, self.pools.valid_x, self.pools.valid_t)
            self.opt = lr_step(self.opt, val_loss)
        result.label_reads = [c.handle.label_reads for c in self.clients]
        return result


class _BaselineRunner:
    """Shared-parameter trainers: supervised-only and FixMatch-style SSL,
    aggregated with either size weighting or a uniform mean with a proximal
    pull toward the broadcast weights."""

    def __init__(self, cfg: RoundConfig, method: str, ds: Dataset, plan: PartitionPlan):
        self.cfg = cfg
        self.method = method
        self.ds = ds
        self.plan = plan
        self.arch = ModelArch((ds.dim, *cfg.hidden_dims, ds.n_classes), cfg.activation)
        handles, server_pool = build_client_handles(ds, plan, cfg.scenario)
        self.server_pool = server_pool
        self.handles = handles
        rng_init = np.random.default_rng([cfg.seed, _TAG_INIT])
        self.theta = init_params(self.arch, rng_init)
        self.opt = OptimState(cfg.lr)
        self.ledger = comm.CostLedger()
        self.pools = _EvalPools(ds, plan)

    @property
    def _uses_prox(self) -> bool:
        return self.method in (FEDPROX_SL, FEDPROX_FIXMATCH)

    @property
    def _uses_unlabeled(self) -> bool:
        return self.method in (FEDAVG_FIXMATCH, FEDPROX_FIXMATCH)

    def _sup_step(
        self, theta: np.ndarray, x, t, broadcast: Optional[np.ndarray]
    ) -> np.ndarray:
        _, grad = ce_value_and_grad(ParamVector(theta, self.arch), x, t)
        grad = self.cfg.loss.lambda_s * grad
        # the proximal pull only applies at clients, never to the server's own phase
        if self._uses_prox and broadcast is not None:
            grad = grad + fedprox_gradient_term(theta, broadcast, self.cfg.mu)
        return theta - self.opt.lr * grad

    def _unsup_step(
        self, theta: np.ndarray, x_u: np.ndarray, broadcast: np.ndarray, rng
    ) -> np.ndarray:
        params = ParamVector(theta, self.arch)
        probs, _ = _forward_cached(params, x_u)
        keep = probs.max(axis=1) >= self.cfg.loss.tau
        if not keep.any():
            if self._uses_prox:
                grad = fedprox_gradient_term(theta, broadcast, self.cfg.mu)
                return theta - self.opt.lr * grad
            return theta
        targets = np.zeros_like(probs)
        targets[np.arange(probs.shape[0]), probs.argmax(axis=1)] = 1.0
        perturbed = augment(self.cfg.augment, x_u, rng)
        probs_aug, caches = _forward_cached(params, perturbed)
        n_kept = int(keep.sum())
        dlogits = np.zeros_like(probs_aug)
        dlogits[keep] = (probs_aug[keep] - targets[keep]) / n_kept
        grad = self.cfg.lambda_u * _backward_from_dlogits(params, caches, dlogits)
        if self._uses_prox:
            grad = grad + fedprox_gradient_term(theta, broadcast, self.cfg.mu)
        return theta - self.opt.lr * grad

    def _server_supervised_phase(self, round_no: int) -> None:
        features, labels = self.server_pool
        targets = one_hot_labels(labels, self.arch.n_classes)
        rng = np.random.default_rng([self.cfg.seed, _TAG_SERVER, round_no])
        theta = self.theta.values
        for _ in range(self.cfg.server_epochs):
            for idx in _minibatches(features.shape[0], self.cfg.batch_labeled_server, rng):
                theta = self._sup_step(theta, features[idx], targets[idx], None)
        self.theta = ParamVector(theta, self.arch)

    def _make_job(self, client_id: int, round_no: int, broadcast: np.ndarray):
        cfg = self.cfg
        handle = self.handles[client_id]
        step = stream_step_for_round(self.plan, round_no) if self.plan.stream_chunks else 0
        client_has_labels = handle.has_labels

        def job():
            rng = _client_rng(cfg.seed, round_no, client_id)
            theta = broadcast.copy()
            unlabeled = handle.unlabeled_features(step) if self._uses_unlabeled else None
            if client_has_labels:
                labeled_x, labeled_y = handle.labeled_arrays()
                labeled_t = one_hot_labels(labeled_y, self.arch.n_classes)
            else:
                labeled_x = labeled_t = None
            n_examples = 0
            if labeled_x is not None:
                n_examples += labeled_x.shape[0]
            if unlabeled is not None:
                n_examples += unlabeled.shape[0]
            for _ in range(cfg.local_epochs):
                lab = (
                    _minibatches(labeled_x.shape[0], cfg.batch_labeled, rng)
                    if labeled_x is not None
                    else []
                )
                unl = (
                    _minibatches(unlabeled.shape[0], cfg.batch_unlabeled, rng)
                    if unlabeled is not None
                    else []
                )
                for li, ui in _cycle_zip(lab, unl):
                    if li is not None:
                        theta = self._sup_step(theta, labeled_x[li], labeled_t[li], broadcast)
                    if ui is not None:
                        theta = self._unsup_step(theta, unlabeled[ui], broadcast, rng)
            return client_id, theta, max(n_examples, 1)

        return job

    def run(
        self,
        scheduler: Optional[Scheduler] = None,
        dropouts: Collection[tuple[int, int]] = frozenset(),
    ) -> ExperimentResult:
        cfg = self.cfg
        result = ExperimentResult(method=self.method, scenario=cfg.scenario)
        n = self.arch.n_params
        sl_at_server = cfg.scenario == LABELS_AT_SERVER and not self._uses_unlabeled
        for round_no in range(1, cfg.n_rounds + 1):
            if cfg.scenario == LABELS_AT_SERVER:
                self._server_supervised_phase(round_no)
            rng_sel = np.random.default_rng([cfg.seed, _TAG_SELECT, round_no])
            selected = select_clients(cfg.n_clients, cfg.fraction, rng_sel)
            active = [a for a in selected if (round_no, a) not in dropouts]
            for a in selected:
                if (round_no, a) in dropouts:
                    log.warning("client %d dropped at round %d", a, round_no)
            self.ledger.open_round(round_no, s2c_dense=n * len(active), c2s_dense=n * len(active))
            # naive schemes ship the dense parameter vector both ways
            self.ledger.record_dense("s2c", n * len(active))
            self.ledger.record_dense("c2s", n * len(active))
            if not sl_at_server:
                broadcast = self.theta.values
                jobs = [self._make_job(a, round_no, broadcast) for a in active]
                updates = sorted(_run_jobs(jobs, scheduler), key=lambda u: u[0])
                if updates:
                    vectors = [ParamVector(theta, self.arch) for _, theta, _ in updates]
                    if self._uses_prox:
                        self.theta = aggregate_mean(vectors)
                    else:
                        sizes = [size for _, _, size in updates]
                        self.theta = aggregate_weighted(vectors, sizes)
            test_acc, labeled_acc, loss_s, loss_u = self.pools.metrics(self.theta, cfg.loss.tau)
            costs = self.ledger.current
            result.rounds.append(
                RoundMetrics(
                    round_no=round_no,
                    test_acc=test_acc,
                    labeled_acc=labeled_acc,
                    loss_s=loss_s,
                    loss_u=loss_u,
                    s2c_pct=costs.s2c_pct,
                    c2s_pct=costs.c2s_pct,
                    nnz_psi_frac=_nnz_fraction(self.theta.values),
                )
            )
            val_loss = _mean_ce(self.theta, self.pools.valid_x, self.pools.valid_t)
            self.opt = lr_step(self.opt, val_loss)
        result.label_reads = [h.label_reads for h in self.handles]
        return result


def run_experiment(
    cfg: RoundConfig,
    method: str,
    ds: Dataset,
    plan: PartitionPlan,
    scheduler: Optional[Scheduler] = None,
    dropouts: Collection[tuple[int, int]] = frozenset(),
) -> ExperimentResult:
    """Run one method end to end; the metric series is a pure function of cfg."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}, expected one of {METHODS}")
    if plan.n_clients != cfg.n_clients:
        raise ConfigError(
            f"partition has {plan.n_clients} clients, config says {cfg.n_clients}"
        )
    if (
        cfg.scenario == LABELS_AT_SERVER
        and method in (FEDAVG_FIXMATCH, FEDPROX_FIXMATCH)
        and cfg.server_epochs < 1
    ):
        raise ConfigError(
            "fixmatch baselines under labels_at_server need server_epochs >= 1: "
            "clients can only pseudo-label from a server-trained model"
        )
    if method == FEDMATCH:
        return _FedMatchRunner(cfg, ds, plan).run(scheduler, dropouts)
    return _BaselineRunner(cfg, method, ds, plan).run(scheduler, dropouts)
