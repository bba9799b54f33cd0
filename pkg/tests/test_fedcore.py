import json
import math
from dataclasses import replace

import numpy as np
import pytest

from fedperm.datamodel import DataError, DatasetShard, LogRegModel, dirichlet_partition, local_sgd, train_test_split
from fedperm.fedcore import (
    METRICS_COLUMNS,
    ConfigError,
    FederationConfig,
    PlainQuery,
    RoundError,
    RoundRecord,
    attacker_client,
    client_finalize,
    client_round,
    is_attacker,
    make_keys,
    metrics_csv,
    run_cdp,
    run_fedavg,
    run_fedperm,
    run_ldp,
    server_round,
)
from fedperm.fedcore.baselines import cdp_round_epsilon, cdp_sigma, ldp_sigma
from fedperm.fedcore.config import TRAIN, stream, stream_int
from fedperm.fedcore.protocol import (
    PAD_VALUE,
    encoded_norm,
    local_delta,
    make_codec,
    norm_bound_messages,
    open_aggregate,
    sample_clients,
)
from fedperm.fedcore.records import write_manifest
from fedperm.paillier import KeyMismatchError
from fedperm.permute import gen_spec, unshuffle
from fedperm.pir import EncryptedAggregate, ProtocolError, decrypt_aggregate
from fedperm.privacy import clip_normalize

F = 32
Q = 2.0**-F


@pytest.fixture(scope="module")
def federation(digits):
    train, test = train_test_split(digits, 0.2, np.random.default_rng(0))
    shards = dirichlet_partition(train, 15, 1.0, np.random.default_rng(1))
    return shards, test


def _cfg(**kw):
    base = dict(num_clients=15, clients_per_round=15, rounds=1, clip=0.1, lr=0.5, k1=5, k2=2,
                eps_d=math.inf, key_bits=512, seed=3)
    base.update(kw)
    return FederationConfig(**base)


def _model():
    return LogRegModel.zeros(64, 10)


class TestConfig:
    @pytest.mark.parametrize(
        "kw",
        [dict(clients_per_round=16), dict(clients_per_round=0), dict(local_epochs=0), dict(clip=0.0),
         dict(norm_bound=-1.0), dict(norm_bound="mean"), dict(eps_d=0.0), dict(pir_backend="seal"),
         dict(attacker_count=16), dict(delta_target=1.0)],
    )
    def test_rejects(self, kw):
        with pytest.raises(ConfigError):
            FederationConfig(**kw)

    def test_padding_and_split(self):
        cfg = FederationConfig(k1=7, k2=2, rounds=50, delta_target=1e-5)
        assert cfg.padded_dim(650) == 658 and cfg.padded_dim(14) == 14
        assert cfg.split.delta_prime == 5e-6 and cfg.split.delta_round == pytest.approx(1e-7, rel=1e-15)
        assert cfg.q == 1.0

    def test_eps_resolution(self):
        assert FederationConfig().resolved_eps_d(650) == math.inf
        assert FederationConfig(eps_d=3.0).resolved_eps_d(650) == 3.0
        cfg = FederationConfig(eps_target=4.0, rounds=50, k1=650, k2=1)
        assert cfg.budget(650).total()[0] == pytest.approx(4.0, rel=1e-6)

    def test_streams(self):
        a = stream(1, 2, 3).random(4)
        assert np.array_equal(a, stream(1, 2, 3).random(4))
        assert not np.array_equal(a, stream(1, 2, 4).random(4))
        assert stream_int(1, 2) == stream_int(1, 2) != stream_int(1, 3)

    def test_sampling(self):
        cfg = FederationConfig(num_clients=10, clients_per_round=4, seed=2)
        picks = [sample_clients(cfg, t) for t in range(20)]
        assert all(len(set(p)) == 4 and p == sorted(p) for p in picks)
        assert len({tuple(p) for p in picks}) > 1
        assert picks[0] == sample_clients(cfg, 0)


class TestClientRound:
    def test_noiseless_identity_decodes_to_normalized_delta(self, federation, keys512):
        shards, _ = federation
        cfg = _cfg()
        msg = client_round(_model(), shards[0], cfg, keys512.public, round_index=0, client_id=0,
                           eps_d=math.inf, identity_patterns=True)
        codec = make_codec(cfg, keys512.public)
        z = np.array(codec.decode_many(msg.values))
        expect = clip_normalize(local_delta(_model(), shards[0], cfg, 0, 0), cfg.clip)
        assert np.max(np.abs(z - expect)) <= Q

    @pytest.mark.parametrize("k1,k2", [(2, 1), (5, 2), (13, 1)])
    def test_query_size(self, federation, keys512, k1, k2):
        cfg = _cfg(k1=k1, k2=k2)
        msg = client_round(_model(), federation[0][0], cfg, keys512.public, round_index=0, client_id=0, eps_d=math.inf)
        assert msg.query.ciphertext_count == k2 * k1 * k1
        assert msg.d == cfg.padded_dim(650)
        assert msg.wire_size() == len(msg.wire_bytes())

    def test_padding_slots_hold_half(self, federation):
        cfg = _cfg(k1=7, k2=2, pir_backend="plaintext")
        msg = client_round(_model(), federation[0][0], cfg, None, round_index=0, client_id=0,
                           eps_d=math.inf, identity_patterns=True)
        assert msg.d == 658
        assert all(v == PAD_VALUE * 2**F for v in msg.values[650:])

    def test_independent_patterns_per_client(self, federation):
        shard = federation[0][0]
        cfg = _cfg(k1=10, k2=1, pir_backend="plaintext")
        a = client_round(_model(), shard, cfg, None, round_index=0, client_id=1, eps_d=math.inf)
        b = client_round(_model(), shard, cfg, None, round_index=0, client_id=2, eps_d=math.inf)
        assert not np.array_equal(a.query.masks, b.query.masks)

    def test_deterministic(self, federation):
        cfg = _cfg(pir_backend="plaintext")
        args = dict(round_index=4, client_id=2, eps_d=50.0)
        a = client_round(_model(), federation[0][2], cfg, None, **args)
        b = client_round(_model(), federation[0][2], cfg, None, **args)
        assert a.values == b.values and np.array_equal(a.query.masks, b.query.masks)

    def test_missing_key(self, federation):
        with pytest.raises(ProtocolError):
            client_round(_model(), federation[0][0], _cfg(), None, round_index=0, client_id=0, eps_d=math.inf)


def _msgs(federation, cfg, pk, clients=range(3), eps_d=math.inf):
    return [client_round(_model(), federation[0][u], cfg, pk, round_index=0, client_id=u, eps_d=eps_d)
            for u in clients]


class TestServerRound:
    def test_single_client_huge_bound(self, federation, keys512):
        cfg = _cfg(clients_per_round=1, norm_bound=1e12)
        (msg,) = _msgs(federation, cfg, keys512.public, clients=[0])
        agg = server_round([msg], cfg, keys512.public)
        spec_free = decrypt_aggregate(keys512.secret, agg)
        plain = server_round([_replace_query(msg, cfg)], replace(cfg, pir_backend="plaintext"), None)
        assert spec_free == list(plain.values)

    def test_matches_plaintext_oracle(self, federation, keys512):
        cfg = _cfg(clients_per_round=3, eps_d=30.0, norm_bound=5.0)
        msgs = _msgs(federation, cfg, keys512.public, eps_d=30.0)
        agg = server_round(msgs, cfg, keys512.public)  # public key only
        bounded = norm_bound_messages(msgs, cfg, make_codec(cfg, keys512.public))
        specs = [_spec_of(m, cfg, u) for u, m in enumerate(msgs)]
        oracle = sum(np.array(unshuffle(np.array(y, dtype=object), s)) for y, s in zip(bounded, specs))
        assert decrypt_aggregate(keys512.secret, agg) == [int(v) for v in oracle]

    def test_norm_is_shuffle_invariant(self, federation):
        cfg = _cfg(pir_backend="plaintext", eps_d=40.0)
        (msg,) = _msgs(federation, cfg, None, clients=[1], eps_d=40.0)
        spec = _spec_of(msg, cfg, 1)
        raw = unshuffle(np.array(msg.values, dtype=object), spec)
        assert sum(v * v for v in msg.values) == sum(int(v) * int(v) for v in raw)

    def test_attacker_is_bounded_to_m(self, federation):
        cfg = _cfg(clients_per_round=5, pir_backend="plaintext")
        codec = make_codec(cfg, None)
        msgs = _msgs(federation, cfg, None, clients=range(5))
        m_bound = encoded_norm(msgs[1].values, codec)
        msgs[0] = attacker_client(msgs[0], 100.0)
        assert encoded_norm(msgs[0].values, codec) == pytest.approx(100 * encoded_norm(_msgs(federation, cfg, None, [0])[0].values, codec))
        bounded = norm_bound_messages(msgs, replace(cfg, norm_bound=m_bound), codec)
        got = encoded_norm(bounded[0], codec)
        assert got <= m_bound and got == pytest.approx(m_bound, abs=math.sqrt(650) * Q)

    def test_median_bound_caps_attacker(self, federation):
        cfg = _cfg(clients_per_round=5, pir_backend="plaintext", norm_bound="median")
        codec = make_codec(cfg, None)
        msgs = _msgs(federation, cfg, None, clients=range(5))
        msgs[0] = attacker_client(msgs[0], 100)
        median = float(np.median([encoded_norm(m.values, codec) for m in msgs]))
        bounded = norm_bound_messages(msgs, cfg, codec)
        assert encoded_norm(bounded[0], codec) <= median

    def test_protocol_errors(self, federation, keys512):
        cfg = _cfg()
        msgs = _msgs(federation, cfg, keys512.public, clients=[0, 1])
        with pytest.raises(ProtocolError):
            server_round([], cfg, keys512.public)
        with pytest.raises(ProtocolError):
            server_round([msgs[0], _replace_query(msgs[1], cfg)], cfg, keys512.public)
        with pytest.raises(ProtocolError):
            server_round(msgs, cfg, None)
        short = replace(msgs[1], values=msgs[1].values[:-10])
        with pytest.raises(ProtocolError):
            server_round([msgs[0], short], cfg, keys512.public)


def _spec_of(msg, cfg, u):
    from fedperm.fedcore.config import PATTERN

    return gen_spec(msg.d, cfg.k1, cfg.k2, stream(cfg.seed, 0, u, PATTERN))


def _replace_query(msg, cfg):
    return replace(msg, query=PlainQuery.from_spec(_spec_of(msg, cfg, msg.client_id)))


class TestFinalize:
    def test_zero_deltas_leave_model_unchanged(self, keys512):
        cfg = _cfg(clients_per_round=4, num_clients=4)
        codec = make_codec(cfg, keys512.public)
        half = codec.encode(0.5, 4)
        from fedperm.pir import build_query
        from fedperm.paillier import seeded_rng

        rng = np.random.default_rng(0)
        model = LogRegModel.random(64, 10, rng)
        queries = [build_query(keys512.public, gen_spec(650, 5, 2, rng), seeded_rng(i)) for i in range(4)]
        from fedperm.fedcore import ClientUpdateMsg

        msgs = [ClientUpdateMsg(i, (half,) * 650, q) for i, q in enumerate(queries)]
        new = client_finalize(server_round(msgs, cfg, keys512.public), keys512.secret, model, cfg)
        assert np.max(np.abs(new.flatten() - model.flatten())) <= 4 * Q * cfg.clip

    def test_single_client_adds_clipped_delta(self, federation, keys512):
        cfg = _cfg(num_clients=15, clients_per_round=1)
        (msg,) = _msgs(federation, cfg, keys512.public, clients=[0])
        new = client_finalize(server_round([msg], cfg, keys512.public), keys512.secret, _model(), cfg)
        expect = np.clip(local_delta(_model(), federation[0][0], cfg, 0, 0), -cfg.clip, cfg.clip)
        assert np.max(np.abs(new.flatten() - expect)) <= 2 * Q * cfg.clip

    def test_key_mismatch(self, federation, keys512, other_keys512):
        cfg = _cfg(clients_per_round=1)
        (msg,) = _msgs(federation, cfg, keys512.public, clients=[0])
        agg = server_round([msg], cfg, keys512.public)
        with pytest.raises(KeyMismatchError):
            client_finalize(agg, other_keys512.secret, _model(), cfg)
        with pytest.raises(ProtocolError):
            open_aggregate(agg, None, 650)

    def test_only_model_coordinates_are_decrypted(self, federation, keys512, monkeypatch):
        from fedperm import kernels

        cfg = _cfg(k1=7, k2=2, clients_per_round=1)
        (msg,) = _msgs(federation, cfg, keys512.public, clients=[0])
        agg = server_round([msg], cfg, keys512.public)
        assert isinstance(agg, EncryptedAggregate) and len(agg) == 658
        seen = []
        real = kernels.decrypt_batch
        monkeypatch.setattr(kernels, "decrypt_batch", lambda c, *a: seen.append(len(c)) or real(c, *a))
        client_finalize(agg, keys512.secret, _model(), cfg)
        assert seen == [650]


class TestRuns:
    def test_zero_rounds(self, federation):
        init = LogRegModel.random(64, 10, np.random.default_rng(0))
        res = run_fedperm(_cfg(rounds=0, pir_backend="plaintext"), *federation, init_model=init)
        assert res.records == [] and np.array_equal(res.final_params, init.flatten())

    def test_plaintext_trajectory_matches_clipped_fedavg(self, federation):
        cfg = _cfg(rounds=5, pir_backend="plaintext")
        fp = run_fedperm(cfg, *federation, keep_history=True)
        fa = run_fedavg(cfg, *federation, clip=True, keep_history=True)
        for a, b in zip(fp.history, fa.history):
            assert np.max(np.abs(a - b)) <= 5 * 2 * Q * cfg.clip
        assert [r.test_acc for r in fp.records] == pytest.approx([r.test_acc for r in fa.records], abs=0.005)

    def test_paillier_matches_plaintext_backend(self, federation, keys512):
        cfg = _cfg(rounds=2, clients_per_round=4, eps_d=200.0, norm_bound="median")
        enc = run_fedperm(cfg, *federation, keys=keys512)
        plain = run_fedperm(replace(cfg, pir_backend="plaintext"), *federation)
        assert np.array_equal(enc.final_params, plain.final_params)
        assert all(r.enc_count == 50 and r.dec_count == 650 for r in enc.records)

    def test_deterministic_with_privacy_accounting(self, federation):
        cfg = _cfg(rounds=4, pir_backend="plaintext", eps_d=None, eps_target=4.0, k1=650, k2=1)
        a = run_fedperm(cfg, *federation)
        b = run_fedperm(cfg, *federation)
        assert [r.test_acc for r in a.records] == [r.test_acc for r in b.records]
        eps = [r.eps_spent for r in a.records]
        assert eps == sorted(eps) and eps[-1] == pytest.approx(4.0, rel=1e-6)
        assert a.meta["eps_d"] == pytest.approx(cfg.resolved_eps_d(650))

    def test_round_errors_carry_context(self, federation):
        shards, test = federation
        broken = list(shards)
        broken[4] = DatasetShard(shards[4].data.subset(np.array([], dtype=int)), 4)
        with pytest.raises(RoundError) as info:
            run_fedperm(_cfg(rounds=1, pir_backend="plaintext"), broken, test)
        assert info.value.round_index == 0 and isinstance(info.value.__cause__, DataError)

    def test_fedavg_single_client_is_sequential_sgd(self, federation):
        shard = federation[0][0]
        cfg = _cfg(num_clients=1, clients_per_round=1, rounds=3)
        res = run_fedavg(cfg, [shard], federation[1])
        m = _model()
        for t in range(3):
            m = local_sgd(m, shard, cfg.lr, 1, cfg.batch_size, stream(cfg.seed, t, 0, TRAIN))
        assert np.allclose(res.final_params, m.flatten(), rtol=0, atol=1e-12)

    def test_fedavg_identical_shards(self, federation):
        shard = federation[0][0]
        big = len(shard) + 1  # full batch, so every client computes the same step
        cfg1 = _cfg(num_clients=1, clients_per_round=1, rounds=3, batch_size=big)
        cfg3 = _cfg(num_clients=3, clients_per_round=3, rounds=3, batch_size=big)
        one = run_fedavg(cfg1, [shard], federation[1])
        three = run_fedavg(cfg3, [DatasetShard(shard.data, u) for u in range(3)], federation[1])
        assert np.allclose(one.final_params, three.final_params, rtol=0, atol=1e-12)

    def test_cdp_without_noise_is_fedavg_when_clip_is_inactive(self, federation):
        cfg = _cfg(rounds=2, clip=1e6, noise_multiplier=0.0)
        assert np.array_equal(run_cdp(cfg, *federation).final_params, run_fedavg(cfg, *federation).final_params)

    def test_cdp_noise_scale(self, federation):
        shard = federation[0][:1]
        cfg = _cfg(num_clients=1, clients_per_round=1, rounds=160, lr=0.0, clip=0.5, noise_multiplier=2.0)
        res = run_cdp(cfg, shard, federation[1], keep_history=True)
        steps = np.diff(np.array(res.history), axis=0).ravel()
        assert cdp_sigma(cfg) == 1.0
        assert np.std(steps) == pytest.approx(1.0, rel=0.05)

    def test_cdp_stops_when_budget_runs_out(self, federation):
        cfg = _cfg(rounds=30, noise_multiplier=1.0, eps_target=2.0, clients_per_round=5)
        res = run_cdp(cfg, *federation)
        assert res.stopped_early and 0 < len(res.records) < 30
        assert res.records[-1].eps_spent <= 2.0 + cdp_round_epsilon(cfg) * 10
        eps = [r.eps_spent for r in res.records]
        assert eps == sorted(eps)

    def test_ldp_without_budget_is_clipped_fedavg(self, federation):
        cfg = _cfg(rounds=2)
        assert ldp_sigma(cfg, 650) == 0.0
        assert np.array_equal(run_ldp(cfg, *federation).final_params, run_fedavg(cfg, *federation, clip=True).final_params)

    def test_ldp_noise_scale(self, federation):
        cfg = _cfg(num_clients=1, clients_per_round=1, rounds=160, lr=0.0, eps_target=40.0, clip=0.01)
        sigma = ldp_sigma(cfg, 650)
        expect = 2 * 0.01 * math.sqrt(650) * math.sqrt(2 * math.log(1.25 / cfg.split.delta_round)) / cfg.round_epsilon()
        assert sigma == pytest.approx(expect, rel=1e-14)
        res = run_ldp(cfg, federation[0][:1], federation[1], keep_history=True)
        steps = np.diff(np.array(res.history), axis=0).ravel()
        assert np.std(steps) == pytest.approx(sigma, rel=0.05)


class TestAttacker:
    def test_identity_scale(self, federation):
        cfg = _cfg(pir_backend="plaintext")
        (msg,) = _msgs(federation, cfg, None, clients=[0])
        assert attacker_client(msg, 1) == msg
        assert attacker_client(msg, 2.5).values[5] == round(msg.values[5] * 2.5)
        with pytest.raises(ValueError):
            attacker_client(msg, 0)

    def test_membership(self):
        cfg = FederationConfig(attacker_count=2)
        assert [is_attacker(u, cfg) for u in range(4)] == [True, True, False, False]


class TestRecords:
    def test_header_is_stable(self):
        assert metrics_csv([]).splitlines()[0] == "round,client_ids,enc_ms,agg_ms,dec_ms,test_acc,eps_spent,delta_spent"
        assert METRICS_COLUMNS[0] == "round"

    def test_row_format(self):
        rec = RoundRecord(2, (0, 3), 1.5, 2.25, 0.125, 0.75, math.inf, 0.0)
        assert metrics_csv([rec]).splitlines()[1] == "2,0 3,1.500,2.250,0.125,0.75,inf,0.0"
        assert metrics_csv([rec], timings=False).splitlines()[1] == "2,0 3,,,,0.75,inf,0.0"

    def test_manifest(self, tmp_path):
        write_manifest(tmp_path / "m.json", {"b": 1, "a": [1, 2]})
        assert json.loads((tmp_path / "m.json").read_text()) == {"a": [1, 2], "b": 1}

    def test_make_keys(self):
        assert make_keys(FederationConfig(pir_backend="plaintext")) is None
        kp = make_keys(FederationConfig(key_bits=512, seed=5))
        assert kp.n == make_keys(FederationConfig(key_bits=512, seed=5)).n
