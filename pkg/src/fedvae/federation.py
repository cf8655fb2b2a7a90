"""Federated training of the conditional VAE.

Sync modes:
  ``decoder``  only decoder weights are exchanged; encoders and their
               optimiser state stay on the clients across rounds.
  ``full``     encoder and decoder are both federated (baseline).
  ``central``  pooled-data training without federation (baseline).

Privacy modes:
  ``none``     shard-size weighted average of client deltas.
  ``cdp``      clients clip their delta to S; the server adds N(0, (zS)^2)
               to the sum and divides by the expected cohort size qN.
  ``ldp``      clients run DP-SGD on the decoder with a per-client
               accountant, and leave the pool once their budget is spent.

Deltas are ``local - global`` and the server adds them, through a momentum
SGD step with learning rate 1.
"""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .data import Dataset, partition_iid
from .nn import NonFiniteError, OptimizerState, ParameterSet, global_l2_norm, optimizer_step
from .privacy import PrivacyBudget, RdpAccountant, add_gaussian, clip_and_sum, clip_l2, to_epsilon
from .vae import ConditionalVAE, VaeConfig, loss_and_grads

log = logging.getLogger(__name__)

SYNC_MODES = ("decoder", "full", "central")
PRIVACY_MODES = ("none", "cdp", "ldp")

# rng stream tags
_INIT, _CLIENT_INIT, _LOCAL, _SAMPLING, _SERVER_NOISE = range(5)


def stream(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator for (seed, purpose, ...) so runs are order-independent."""
    return np.random.default_rng([seed, *keys])


@dataclass(frozen=True)
class FlConfig:
    num_clients: int = 20
    rounds: int = 50
    client_rate: float = 1.0
    local_epochs: int = 1
    batch_size: int = 10
    lr: float = 1e-3
    local_optimizer: str = "adam"
    server_momentum: float = 0.0
    clip_norm: float = 1.0
    noise_multiplier: float = 1.0
    epsilon: float = 10.0
    delta: float = 1e-5
    sync: str = "decoder"
    privacy: str = "none"
    step_budget: int = 0

    def __post_init__(self):
        if self.num_clients < 1:
            raise ValueError("num_clients must be >= 1")
        if self.rounds < 1:
            raise ValueError("rounds must be >= 1")
        if not 0 < self.client_rate <= 1:
            raise ValueError("client_rate must be in (0, 1]")
        if self.local_epochs < 1:
            raise ValueError("local_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.local_optimizer not in ("sgd", "momentum", "adam"):
            raise ValueError(f"unknown optimizer {self.local_optimizer!r}")
        if not 0 <= self.server_momentum < 1:
            raise ValueError("server_momentum must be in [0, 1)")
        if self.sync not in SYNC_MODES:
            raise ValueError(f"unknown sync mode {self.sync!r}")
        if self.privacy not in PRIVACY_MODES:
            raise ValueError(f"unknown privacy mode {self.privacy!r}")
        if self.sync == "central" and self.privacy != "none":
            raise ValueError("central training is non-private only")
        if self.privacy != "none":
            if not self.clip_norm > 0:
                raise ValueError("clip_norm must be > 0")
            if not self.noise_multiplier >= 0:
                raise ValueError("noise_multiplier must be >= 0")
            PrivacyBudget(self.epsilon, self.delta)
        if self.step_budget < 0:
            raise ValueError("step_budget must be >= 0")

    @property
    def budget(self) -> PrivacyBudget:
        return PrivacyBudget(self.epsilon, self.delta)


@dataclass
class ClientState:
    cid: int
    indices: np.ndarray
    encoder: ParameterSet | None = None
    encoder_opt: OptimizerState | None = None
    accountant: RdpAccountant | None = None
    active: bool = True
    epsilon: float = 0.0


@dataclass
class ServerState:
    params: ParameterSet
    momentum: ParameterSet
    round: int = 0
    accountant: RdpAccountant | None = None


@dataclass
class ClientMessage:
    """What a client sends back; in decoder mode ``delta`` holds decoder tensors only."""

    cid: int
    delta: ParameterSet
    num_samples: int
    update_norm: float
    mean_loss: float
    steps: int
    epsilon: float | None = None
    deactivated: bool = False


@dataclass
class RoundReport:
    round: int
    cohort: list[int]
    client_norms: list[float]
    median_update_norm: float
    mean_loss: float
    epsilon: float | None
    active_clients: int
    local_steps: int
    failed: list[int] = field(default_factory=list)
    deactivated: list[int] = field(default_factory=list)
    wall_time: float = 0.0
    metrics: dict[str, float] = field(default_factory=dict)


@dataclass
class TrainingResult:
    vae: ConditionalVAE
    decoder: ParameterSet
    encoder: ParameterSet | None
    reports: list[RoundReport]
    clients: list[ClientState]
    accountant: RdpAccountant | None
    stop_reason: str


class TrainingError(RuntimeError):
    def __init__(self, message: str, reports: list[RoundReport]):
        super().__init__(message)
        self.reports = reports


def select_clients(clients: Sequence[ClientState], q: float, rng: np.random.Generator) -> list[ClientState]:
    """Poisson sampling: each active client joins independently with probability q."""
    if not 0 < q <= 1:
        raise ValueError("q must be in (0, 1]")
    active = [c for c in clients if c.active]
    if q == 1.0:
        return active
    keep = rng.random(len(active)) < q
    return [c for c, k in zip(active, keep) if k]


def weighted_average(deltas: Sequence[ParameterSet], weights: Sequence[float]) -> ParameterSet:
    total = float(sum(weights))
    out = deltas[0].zeros_like()
    for d, w in zip(deltas, weights):
        out = out + d * (w / total)
    return out


def cdp_aggregate(deltas: Sequence[ParameterSet], expected_cohort: float, noise_multiplier: float,
                  clip_norm: float, template: ParameterSet, rng: np.random.Generator) -> ParameterSet:
    """Noised sum of pre-clipped deltas, normalised by the expected cohort size."""
    total = template.zeros_like()
    for d in deltas:
        norm = global_l2_norm(d)
        if norm > clip_norm + 1e-9:
            raise ValueError(f"delta with norm {norm} exceeds clip norm {clip_norm}")
        total = total + d
    total = add_gaussian(total, noise_multiplier * clip_norm, rng)
    return total * (1.0 / expected_cohort)


def server_apply(server: ServerState, update: ParameterSet, momentum: float) -> None:
    """Momentum SGD with learning rate 1 on the ascent direction ``update``."""
    server.momentum = server.momentum * momentum + update
    server.params = server.params + server.momentum


def _new_optimizer(kind: str) -> OptimizerState:
    return OptimizerState(kind=kind)


def _batches(n: int, batch_size: int, rng: np.random.Generator):
    perm = rng.permutation(n)
    for start in range(0, n, batch_size):
        yield perm[start:start + batch_size]


def _local_training(vae: ConditionalVAE, cfg: FlConfig, data: Dataset, client: ClientState,
                    encoder: ParameterSet, decoder: ParameterSet, enc_opt: OptimizerState,
                    rng: np.random.Generator, ldp: bool):
    """E epochs of minibatch updates; returns (encoder, decoder, losses, steps, stopped_early).

    The decoder optimiser is fresh for every call, the encoder optimiser is
    whatever the caller passes (persistent in decoder mode).
    """
    dec_opt = _new_optimizer(cfg.local_optimizer)
    x_all, y_all = data.images[client.indices], data.labels[client.indices]
    n = len(client.indices)
    losses, steps = [], 0
    lr = cfg.lr
    for _ in range(cfg.local_epochs):
        for idx in _batches(n, cfg.batch_size, rng):
            g = loss_and_grads(vae, encoder, decoder, x_all[idx], y_all[idx], rng,
                               per_example_decoder=ldp)
            if not math.isfinite(g.terms.total):
                raise NonFiniteError(f"client {client.cid}: non-finite loss")
            losses.append(g.terms.total)
            steps += 1
            if lr > 0:
                encoder = optimizer_step(enc_opt, encoder, g.encoder, lr)
            vae.encoder.apply_state_updates(encoder, g.encoder_tape)
            if ldp:
                summed, _ = clip_and_sum(g.decoder_per_example, cfg.clip_norm)
                noised = add_gaussian(summed, cfg.noise_multiplier * cfg.clip_norm, rng)
                dec_grad = noised * (1.0 / cfg.batch_size)
            else:
                dec_grad = g.decoder
            if lr > 0:
                decoder = optimizer_step(dec_opt, decoder, dec_grad, lr)
            vae.decoder.apply_state_updates(decoder, g.decoder_tape)
            if ldp:
                if client.accountant is None:
                    # z = 0: releasing an un-noised gradient has unbounded privacy loss
                    client.epsilon = math.inf
                else:
                    client.accountant = client.accountant.accumulate(1)
                    client.epsilon = to_epsilon(client.accountant, cfg.delta)[0]
                if client.epsilon > cfg.epsilon:
                    client.active = False
                    return encoder, decoder, losses, steps, True
    return encoder, decoder, losses, steps, False


def cdp_client_update(vae: ConditionalVAE, cfg: FlConfig, data: Dataset, client: ClientState,
                      global_params: ParameterSet, rng: np.random.Generator) -> ClientMessage:
    """Local training then clipping of the synced delta to S (clipping skipped when non-private)."""
    if len(client.indices) == 0:
        raise ValueError(f"client {client.cid} has an empty shard")
    if not client.active:
        raise ValueError(f"client {client.cid} is inactive")
    if cfg.sync == "decoder":
        encoder, enc_opt = client.encoder, client.encoder_opt
        decoder = global_params.copy()
    else:
        encoder = global_params.select("enc.", "encoder")
        decoder = global_params.select("dec.", "decoder")
        enc_opt = _new_optimizer(cfg.local_optimizer)
    encoder, decoder, losses, steps, _ = _local_training(
        vae, cfg, data, client, encoder, decoder, enc_opt, rng, ldp=False)
    if cfg.sync == "decoder":
        client.encoder = encoder
        local = decoder
    else:
        local = ParameterSet.merge(encoder, decoder, component=global_params.component)
    delta = local - global_params
    norm = global_l2_norm(delta)
    if cfg.privacy == "cdp":
        delta = clip_l2(delta, cfg.clip_norm)
    return ClientMessage(client.cid, delta, len(client.indices), norm,
                         float(np.mean(losses)) if losses else float("nan"), steps)


def ldp_client_update(vae: ConditionalVAE, cfg: FlConfig, data: Dataset, client: ClientState,
                      global_params: ParameterSet, rng: np.random.Generator) -> ClientMessage:
    """Local DP-SGD on the decoder; stops and deactivates once the client budget is spent."""
    if cfg.batch_size > len(client.indices):
        raise ValueError(f"batch size {cfg.batch_size} exceeds shard of client {client.cid}")
    if not client.active:
        raise ValueError(f"client {client.cid} is inactive")
    if client.epsilon > cfg.epsilon:
        client.active = False
        return ClientMessage(client.cid, global_params.zeros_like(), len(client.indices), 0.0,
                             float("nan"), 0, client.epsilon, True)
    if cfg.sync == "decoder":
        encoder, enc_opt = client.encoder, client.encoder_opt
        decoder = global_params.copy()
    else:
        encoder = global_params.select("enc.", "encoder")
        decoder = global_params.select("dec.", "decoder")
        enc_opt = _new_optimizer(cfg.local_optimizer)
    encoder, decoder, losses, steps, _ = _local_training(
        vae, cfg, data, client, encoder, decoder, enc_opt, rng, ldp=True)
    if cfg.sync == "decoder":
        client.encoder = encoder
        local = decoder
    else:
        local = ParameterSet.merge(encoder, decoder, component=global_params.component)
    delta = local - global_params
    return ClientMessage(client.cid, delta, len(client.indices), global_l2_norm(delta),
                         float(np.mean(losses)) if losses else float("nan"), steps,
                         client.epsilon, not client.active)


class _RoundHook:
    """Runs periodic evaluation and forwards finished reports to the sink.

    The report of the final round is held back until training stops, so the
    final evaluation is attached before the sink sees it.
    """

    def __init__(self, vae, sink, evaluator, eval_every):
        self.vae, self.sink, self.evaluator, self.eval_every = vae, sink, evaluator, eval_every
        self.pending: RoundReport | None = None

    def __call__(self, report: RoundReport, params: ParameterSet) -> None:
        if self.pending is not None and self.sink:
            self.sink(self.pending)
        self.pending = report
        if self.evaluator and self.eval_every and report.round % self.eval_every == 0:
            report.metrics.update(self.evaluator(report.round, self.vae, _decoder_of(params)))

    def finish(self, result: TrainingResult) -> TrainingResult:
        last = self.pending
        if last is not None:
            if self.evaluator and not last.metrics:
                last.metrics.update(self.evaluator(last.round, self.vae, result.decoder))
            if self.sink:
                self.sink(last)
        return result


def _decoder_of(params: ParameterSet) -> ParameterSet:
    return params if params.component == "decoder" else params.select("dec.", "decoder")


def _median(values: Sequence[float]) -> float:
    return float(np.median(values)) if len(values) else float("nan")


def _run_central(vae, cfg, data, shards, seed, hook) -> TrainingResult:
    indices = np.sort(np.concatenate([np.asarray(s) for s in shards.values()]))
    init = stream(seed, _INIT)
    encoder, decoder = vae.init(init)
    client = ClientState(-1, indices, encoder, _new_optimizer(cfg.local_optimizer))
    enc_opt, dec_opt = client.encoder_opt, _new_optimizer(cfg.local_optimizer)
    x_all, y_all = data.images[indices], data.labels[indices]
    reports, total_steps, stop = [], 0, "max_rounds"
    for t in range(1, cfg.rounds + 1):
        start = time.perf_counter()
        rng = stream(seed, _LOCAL, 0, t)
        before = decoder
        losses, steps = [], 0
        for _ in range(cfg.local_epochs):
            for idx in _batches(len(indices), cfg.batch_size, rng):
                if cfg.step_budget and total_steps >= cfg.step_budget:
                    break
                g = loss_and_grads(vae, encoder, decoder, x_all[idx], y_all[idx], rng)
                if not math.isfinite(g.terms.total):
                    raise TrainingError("non-finite loss in central training", reports)
                losses.append(g.terms.total)
                encoder = optimizer_step(enc_opt, encoder, g.encoder, cfg.lr)
                vae.encoder.apply_state_updates(encoder, g.encoder_tape)
                decoder = optimizer_step(dec_opt, decoder, g.decoder, cfg.lr)
                vae.decoder.apply_state_updates(decoder, g.decoder_tape)
                steps += 1
                total_steps += 1
        norm = global_l2_norm(decoder - before)
        report = RoundReport(t, [], [norm], norm, float(np.mean(losses)) if losses else float("nan"),
                             None, 1, steps, wall_time=time.perf_counter() - start)
        reports.append(report)
        hook(report, decoder)
        if cfg.step_budget and total_steps >= cfg.step_budget:
            stop = "step_budget"
            break
    client.encoder = encoder
    return TrainingResult(vae, decoder, encoder, reports, [client], None, stop)


Evaluator = Callable[[int, ConditionalVAE, ParameterSet], dict]


def run_training(cfg: FlConfig, vae_cfg: VaeConfig, data: Dataset,
                 shards: dict[int, np.ndarray] | None = None, seed: int = 0,
                 sink: Callable[[RoundReport], None] | None = None,
                 evaluator: Evaluator | None = None, eval_every: int = 0) -> TrainingResult:
    """Run federated rounds until T, budget exhaustion (CDP) or an empty pool (LDP).

    ``evaluator(round, vae, decoder)`` fills ``RoundReport.metrics`` every
    ``eval_every`` rounds and always after the last round. ``sink`` sees each
    report once it is complete.
    """
    vae = ConditionalVAE(vae_cfg)
    if cfg.privacy == "ldp" and cfg.sync != "central" and not vae.decoder.supports_per_example:
        raise ValueError("LDP needs per-example decoder gradients; use the small architecture")
    if shards is None:
        shards = partition_iid(len(data), cfg.num_clients, stream(seed, _INIT, 1))
    hook = _RoundHook(vae, sink, evaluator, eval_every)
    if cfg.sync == "central":
        return hook.finish(_run_central(vae, cfg, data, shards, seed, hook))

    enc0, dec0 = vae.init(stream(seed, _INIT))
    synced = dec0 if cfg.sync == "decoder" else ParameterSet.merge(enc0, dec0, component="vae")
    server = ServerState(synced, synced.zeros_like())
    if cfg.privacy == "cdp":
        server.accountant = RdpAccountant(cfg.client_rate, cfg.noise_multiplier)
    clients = []
    for cid in sorted(shards):
        c = ClientState(cid, np.asarray(shards[cid], dtype=np.int64))
        if cfg.sync == "decoder":
            c.encoder = vae.init_encoder(stream(seed, _CLIENT_INIT, cid))
            c.encoder_opt = _new_optimizer(cfg.local_optimizer)
        if cfg.privacy == "ldp":
            if cfg.batch_size > len(c.indices):
                raise ValueError(f"batch size {cfg.batch_size} exceeds shard of client {cid}")
            if cfg.noise_multiplier > 0:
                c.accountant = RdpAccountant(cfg.batch_size / len(c.indices), cfg.noise_multiplier)
        clients.append(c)

    expected_cohort = cfg.client_rate * len(clients)
    update_fn = ldp_client_update if cfg.privacy == "ldp" else cdp_client_update
    reports: list[RoundReport] = []
    stop = "max_rounds"
    for t in range(1, cfg.rounds + 1):
        if not any(c.active for c in clients):
            stop = "no_active_clients"
            break
        start = time.perf_counter()
        cohort = select_clients(clients, cfg.client_rate, stream(seed, _SAMPLING, t))
        messages, failed = [], []
        for client in cohort:
            try:
                msg = update_fn(vae, cfg, data, client, server.params, stream(seed, _LOCAL, client.cid, t))
            except NonFiniteError as exc:
                log.warning("round %d: client %d failed: %s", t, client.cid, exc)
                failed.append(client.cid)
                continue
            messages.append(msg)

        try:
            if cfg.privacy == "cdp":
                update = cdp_aggregate([m.delta for m in messages], expected_cohort,
                                       cfg.noise_multiplier, cfg.clip_norm, server.params,
                                       stream(seed, _SERVER_NOISE, t))
            elif messages and cfg.privacy == "ldp":
                update = weighted_average([m.delta for m in messages], [1.0] * len(messages))
            elif messages:
                update = weighted_average([m.delta for m in messages], [m.num_samples for m in messages])
            else:
                update = None
        except ValueError as exc:
            raise TrainingError(f"round {t}: aggregation failed: {exc}", reports) from exc
        if update is not None:
            server_apply(server, update, cfg.server_momentum)
        server.round = t

        epsilon = None
        if cfg.privacy == "cdp":
            server.accountant = server.accountant.accumulate(1)
            epsilon = to_epsilon(server.accountant, cfg.delta)[0]
        elif cfg.privacy == "ldp":
            epsilon = max(c.epsilon for c in clients)
        norms = [m.update_norm for m in messages if m.steps > 0]
        losses = [m.mean_loss for m in messages if m.steps > 0]
        report = RoundReport(
            round=t, cohort=[c.cid for c in cohort], client_norms=norms,
            median_update_norm=_median(norms),
            mean_loss=float(np.mean(losses)) if losses else float("nan"),
            epsilon=epsilon, active_clients=sum(c.active for c in clients),
            local_steps=sum(m.steps for m in messages), failed=failed,
            deactivated=[m.cid for m in messages if m.deactivated],
            wall_time=time.perf_counter() - start)
        reports.append(report)
        hook(report, server.params)
        if cfg.privacy == "cdp" and epsilon > cfg.epsilon:
            stop = "budget_spent"
            break

    if cfg.sync == "decoder":
        decoder, encoder = server.params, None
    else:
        decoder = server.params.select("dec.", "decoder")
        encoder = server.params.select("enc.", "encoder")
    return hook.finish(TrainingResult(vae, decoder, encoder, reports, clients, server.accountant, stop))
