import dataclasses
import math

import numpy as np
import pytest

from fedvae.data import make_synthetic_dataset, partition_iid
from fedvae.federation import (ClientMessage, ClientState, FlConfig, ServerState, TrainingError,
                               cdp_aggregate, cdp_client_update, ldp_client_update, run_training,
                               select_clients, server_apply, stream, weighted_average)
from fedvae.nn import OptimizerState, ParameterSet, global_l2_norm
from fedvae.privacy import RdpAccountant, epsilon_after, steps_until_exceeded, to_epsilon
from fedvae.vae import ConditionalVAE, VaeConfig, loss_and_grads

VAE = VaeConfig(num_classes=3, latent_dim=4, channels=(4, 8))


@pytest.fixture(scope="module")
def data():
    return make_synthetic_dataset(num_classes=3, per_class=20, seed=0)


def _vec(v, component="decoder"):
    return ParameterSet({"x": np.asarray(v, dtype=np.float64)}, component)


def _client(vae, cid=0, indices=np.arange(12), kind="adam"):
    return ClientState(cid, indices, vae.init_encoder(np.random.default_rng(cid)), OptimizerState(kind))


class TestConfig:
    @pytest.mark.parametrize("kw", [{"local_epochs": 0}, {"client_rate": 0.0}, {"client_rate": 1.5},
                                    {"batch_size": 0}, {"rounds": 0}, {"sync": "partial"},
                                    {"privacy": "cdp", "sync": "central"}, {"server_momentum": 1.0},
                                    {"privacy": "cdp", "clip_norm": 0.0}, {"lr": -1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            FlConfig(**kw)

    def test_infinite_budget_allowed(self):
        assert FlConfig(privacy="ldp", epsilon=math.inf).budget.epsilon == math.inf


class TestSampling:
    def _clients(self, n):
        return [ClientState(i, np.arange(1)) for i in range(n)]

    def test_q1_selects_all_active(self):
        cs = self._clients(5)
        cs[2].active = False
        assert [c.cid for c in select_clients(cs, 1.0, np.random.default_rng(0))] == [0, 1, 3, 4]

    def test_tiny_q_usually_empty(self):
        empty = sum(not select_clients(self._clients(10), 1e-6, np.random.default_rng(s)) for s in range(200))
        assert empty == 200

    def test_binomial_mean(self):
        cs = self._clients(500)
        sizes = [len(select_clients(cs, 0.2, np.random.default_rng([9, s]))) for s in range(1000)]
        assert abs(np.mean(sizes) - 100) <= 3

    def test_inactive_never_selected(self):
        cs = self._clients(20)
        for c in cs[::2]:
            c.active = False
        for s in range(50):
            assert all(c.cid % 2 == 1 for c in select_clients(cs, 0.7, np.random.default_rng(s)))


class TestAggregation:
    def test_noise_free_single_client(self):
        d = _vec([0.3, -0.4])
        out = cdp_aggregate([d], 4.0, 0.0, 1.0, d, np.random.default_rng(0))
        np.testing.assert_allclose(out.flatten(), d.flatten() / 4.0)

    def test_empty_cohort_is_pure_noise(self):
        t = _vec(np.zeros(200_000))
        out = cdp_aggregate([], 2.0, 1.5, 0.8, t, np.random.default_rng(0))
        assert out["x"].std() == pytest.approx(1.5 * 0.8 / 2.0, rel=0.01)

    def test_unclipped_delta_rejected(self):
        with pytest.raises(ValueError):
            cdp_aggregate([_vec([3.0, 4.0])], 1.0, 0.0, 1.0, _vec([0, 0]), np.random.default_rng(0))

    def test_momentum_recurrence(self):
        server = ServerState(_vec([0.0]), _vec([0.0]))
        d = _vec([1.0])
        server_apply(server, d, 0.5)
        before = server.params["x"].copy()
        server_apply(server, d, 0.5)
        np.testing.assert_allclose(server.params["x"] - before, [1.5])

    def test_weighted_equals_uniform_for_equal_shards(self):
        rng = np.random.default_rng(0)
        ds = [_vec(rng.standard_normal(7)) for _ in range(5)]
        w = weighted_average(ds, [12] * 5)
        u = sum((d.flatten() for d in ds), np.zeros(7)) / 5
        np.testing.assert_allclose(w.flatten(), u, atol=1e-12)


class TestClientUpdate:
    def test_zero_lr_zero_delta(self, data):
        vae = ConditionalVAE(VAE)
        cfg = FlConfig(lr=0.0, privacy="cdp", batch_size=4)
        dec = vae.init_decoder(np.random.default_rng(1))
        msg = cdp_client_update(vae, cfg, data, _client(vae), dec, np.random.default_rng(0))
        assert global_l2_norm(msg.delta) == 0.0

    def test_single_step_hand_trace(self, data):
        vae = ConditionalVAE(VAE)
        idx = np.arange(4)
        cfg = FlConfig(lr=0.05, local_optimizer="sgd", batch_size=4)
        client = _client(vae, indices=idx, kind="sgd")
        enc0 = client.encoder.copy()
        dec = vae.init_decoder(np.random.default_rng(1))
        msg = cdp_client_update(vae, cfg, data, client, dec, stream(5, 1))
        # replay the same rng stream: one permutation then the reparameterisation draw
        rng = stream(5, 1)
        perm = rng.permutation(4)
        g = loss_and_grads(vae, enc0, dec, data.images[idx][perm], data.labels[idx][perm], rng)
        np.testing.assert_allclose(msg.delta.flatten(), -0.05 * g.decoder.flatten(), atol=1e-12)

    def test_cdp_delta_clipped_and_decoder_only(self, data):
        vae = ConditionalVAE(VAE)
        cfg = FlConfig(lr=0.05, privacy="cdp", clip_norm=0.01, batch_size=4, local_epochs=2)
        dec = vae.init_decoder(np.random.default_rng(1))
        msg = cdp_client_update(vae, cfg, data, _client(vae), dec, np.random.default_rng(0))
        assert global_l2_norm(msg.delta) <= 0.01 < msg.update_norm
        assert msg.delta.component == "decoder"
        assert all(k.startswith("dec.") for k in msg.delta.keys())
        assert {f.name for f in dataclasses.fields(ClientMessage)}.isdisjoint({"encoder", "encoder_opt"})

    def test_encoder_optimizer_persists(self, data):
        vae = ConditionalVAE(VAE)
        cfg = FlConfig(batch_size=4)
        client = _client(vae)
        dec = vae.init_decoder(np.random.default_rng(1))
        cdp_client_update(vae, cfg, data, client, dec, np.random.default_rng(0))
        cdp_client_update(vae, cfg, data, client, dec, np.random.default_rng(1))
        assert client.encoder_opt.step == 6

    def test_empty_shard(self, data):
        vae = ConditionalVAE(VAE)
        with pytest.raises(ValueError):
            cdp_client_update(vae, FlConfig(), data, _client(vae, indices=np.arange(0)),
                              vae.init_decoder(np.random.default_rng(0)), np.random.default_rng(0))

    def _ldp_client(self, vae, cfg, n=12):
        c = _client(vae, indices=np.arange(n), kind=cfg.local_optimizer)
        if cfg.noise_multiplier > 0:
            c.accountant = RdpAccountant(cfg.batch_size / n, cfg.noise_multiplier)
        return c

    def test_ldp_degenerate_matches_plain_training(self, data):
        vae = ConditionalVAE(VAE)
        dec = vae.init_decoder(np.random.default_rng(1))
        plain = FlConfig(batch_size=4, local_optimizer="sgd", lr=0.05)
        ldp = dataclasses.replace(plain, privacy="ldp", noise_multiplier=0.0, clip_norm=1e12,
                                  epsilon=math.inf)
        a = cdp_client_update(vae, plain, data, _client(vae, kind="sgd"), dec, stream(3, 3))
        b = ldp_client_update(vae, ldp, data, self._ldp_client(vae, ldp), dec, stream(3, 3))
        np.testing.assert_allclose(a.delta.flatten(), b.delta.flatten(), atol=1e-12)

    def test_ldp_without_noise_has_infinite_epsilon(self, data):
        vae = ConditionalVAE(VAE)
        cfg = FlConfig(privacy="ldp", batch_size=4, noise_multiplier=0.0, epsilon=10.0)
        c = self._ldp_client(vae, cfg)
        msg = ldp_client_update(vae, cfg, data, c, vae.init_decoder(np.random.default_rng(0)),
                                np.random.default_rng(0))
        assert msg.deactivated and msg.steps == 1 and c.epsilon == math.inf

    def test_ldp_accountant_rate(self, data):
        cfg = FlConfig(privacy="ldp", batch_size=20)
        c = ClientState(0, np.arange(120))
        c.accountant = RdpAccountant(cfg.batch_size / len(c.indices), 1.0)
        assert c.accountant.q == pytest.approx(1 / 6)

    def test_ldp_spent_budget_deactivates(self, data):
        vae = ConditionalVAE(VAE)
        cfg = FlConfig(privacy="ldp", batch_size=4, epsilon=1.0)
        c = self._ldp_client(vae, cfg)
        c.accountant = c.accountant.accumulate(10_000)
        c.epsilon = to_epsilon(c.accountant, cfg.delta)[0]
        msg = ldp_client_update(vae, cfg, data, c, vae.init_decoder(np.random.default_rng(0)),
                                np.random.default_rng(0))
        assert msg.deactivated and not c.active and msg.steps == 0
        assert global_l2_norm(msg.delta) == 0.0

    def test_ldp_deactivates_mid_epoch(self, data):
        vae = ConditionalVAE(VAE)
        cfg = FlConfig(privacy="ldp", batch_size=3, epsilon=4.0, noise_multiplier=1.0, local_epochs=10)
        c = self._ldp_client(vae, cfg)
        allowed = steps_until_exceeded(c.accountant.q, 1.0, cfg.budget)
        msg = ldp_client_update(vae, cfg, data, c, vae.init_decoder(np.random.default_rng(0)),
                                np.random.default_rng(0))
        assert msg.deactivated and msg.steps == allowed < 40
        one_step = epsilon_after(c.accountant.q, 1.0, allowed, cfg.delta) - \
            epsilon_after(c.accountant.q, 1.0, allowed - 1, cfg.delta)
        assert cfg.epsilon < c.epsilon <= cfg.epsilon + one_step

    def test_ldp_batch_larger_than_shard(self, data):
        cfg = FlConfig(privacy="ldp", batch_size=50, num_clients=6)
        with pytest.raises(ValueError):
            run_training(cfg, VAE, data)


class TestRunTraining:
    def test_single_round(self, data):
        r = run_training(FlConfig(num_clients=3, rounds=1, batch_size=5), VAE, data)
        assert len(r.reports) == 1 and r.reports[0].round == 1 and r.stop_reason == "max_rounds"

    def test_bitwise_reproducible(self, data):
        cfg = FlConfig(num_clients=4, rounds=3, batch_size=5, client_rate=0.6, privacy="cdp")
        a = run_training(cfg, VAE, data, seed=11)
        b = run_training(cfg, VAE, data, seed=11)
        assert a.decoder.flatten().tobytes() == b.decoder.flatten().tobytes()
        strip = lambda rs: [dataclasses.replace(r, wall_time=0.0) for r in rs]  # noqa: E731
        assert strip(a.reports) == strip(b.reports)
        c = run_training(cfg, VAE, data, seed=12)
        assert c.decoder.flatten().tobytes() != a.decoder.flatten().tobytes()

    def test_cdp_epsilon_matches_accountant(self, data):
        cfg = FlConfig(num_clients=5, rounds=4, batch_size=6, client_rate=0.4, privacy="cdp",
                       noise_multiplier=1.3)
        r = run_training(cfg, VAE, data)
        for rep in r.reports:
            assert rep.epsilon == epsilon_after(0.4, 1.3, rep.round, cfg.delta)

    def test_cdp_halting(self, data):
        cfg = FlConfig(num_clients=5, rounds=200, batch_size=12, client_rate=0.2, privacy="cdp",
                       noise_multiplier=1.0, epsilon=10.0, lr=1e-4)
        r = run_training(cfg, VAE, data)
        assert len(r.reports) == steps_until_exceeded(0.2, 1.0, cfg.budget)
        assert r.stop_reason == "budget_spent"

    def test_full_sync_trains_encoder_too(self, data):
        r = run_training(FlConfig(num_clients=3, rounds=2, batch_size=5, sync="full"), VAE, data)
        assert r.encoder is not None and r.decoder.component == "decoder"

    def test_central_respects_step_budget(self, data):
        cfg = FlConfig(sync="central", rounds=100, batch_size=10, step_budget=13)
        r = run_training(cfg, VAE, data)
        assert sum(x.local_steps for x in r.reports) == 13 and r.stop_reason == "step_budget"

    def test_ldp_stops_when_pool_empty(self, data):
        cfg = FlConfig(num_clients=3, rounds=100, batch_size=5, privacy="ldp", epsilon=2.0,
                       noise_multiplier=1.0)
        r = run_training(cfg, VAE, data)
        assert r.stop_reason == "no_active_clients"
        assert all(not c.active for c in r.clients)
        gone: set[int] = set()
        for rep in r.reports:
            assert gone.isdisjoint(rep.cohort)
            gone |= set(rep.deactivated)

    def test_ldp_rejects_large_architecture(self, data):
        cfg = FlConfig(num_clients=3, rounds=1, batch_size=5, privacy="ldp")
        with pytest.raises(ValueError):
            run_training(cfg, VaeConfig(num_classes=3, architecture="large"), data)

    def test_client_failure_is_logged_not_fatal(self, data, caplog):
        cfg = FlConfig(num_clients=3, rounds=1, batch_size=5, lr=1e6, local_optimizer="sgd",
                       local_epochs=5)
        with np.errstate(all="ignore"):
            r = run_training(cfg, VAE, data)
        assert len(r.reports) == 1
        rep = r.reports[0]
        assert len(rep.failed) + len(rep.client_norms) == 3

    def test_aggregation_error_carries_reports(self, data, monkeypatch):
        import fedvae.federation as fed
        monkeypatch.setattr(fed, "clip_l2", lambda d, s: d)  # break the clipping contract
        cfg = FlConfig(num_clients=3, rounds=2, batch_size=5, privacy="cdp", clip_norm=1e-6)
        with pytest.raises(TrainingError) as info:
            run_training(cfg, VAE, data)
        assert info.value.reports == []

    def test_sink_and_evaluator(self, data):
        seen, calls = [], []
        ev = lambda t, vae, dec: calls.append(t) or {"fid": float(t)}  # noqa: E731
        run_training(FlConfig(num_clients=3, rounds=5, batch_size=5), VAE, data,
                     sink=seen.append, evaluator=ev, eval_every=2)
        assert [r.round for r in seen] == [1, 2, 3, 4, 5]
        assert calls == [2, 4, 5]
        assert seen[-1].metrics == {"fid": 5.0} and seen[0].metrics == {}

    def test_explicit_shards(self, data):
        shards = partition_iid(len(data), 4, np.random.default_rng(0))
        r = run_training(FlConfig(num_clients=4, rounds=1, batch_size=5), VAE, data, shards)
        assert sorted(r.reports[0].cohort) == [0, 1, 2, 3]
