import concurrent.futures
import math
import time

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import oracle_scores
from peerscore.scoring import (
    ConfigError,
    ScoreConfig,
    ScoreEngine,
    SessionError,
    WindowRecord,
    iter_scored,
    new_engine,
    score_trace,
)
from peerscore.trace import Direction, EventKind, ObservationEvent, PeerKey
from tracegen import random_trace

A = PeerKey("1.2.3.4", 8333)
B = PeerKey("5.6.7.8", 8333)
H = "11" * 32
T = "a1" * 32


def ev(ts, peer, kind, **payload):
    return ObservationEvent(ts, peer, kind, payload)


def block(ts, peer, h=H):
    return ev(ts, peer, EventKind.BLOCK, hash=h, height=1)


def tx(ts, peer, h=T, fee=1000):
    return ev(ts, peer, EventKind.TX, hash=h, fee=fee, size=200)


class TestConfig:
    def test_default_engine_has_no_peers(self):
        assert new_engine().peer_count == 0
        assert new_engine(ScoreConfig()).peer_count == 0

    def test_gamma_out_of_range(self):
        with pytest.raises(ConfigError, match="gamma out of range"):
            ScoreConfig(gamma=1.5)

    def test_w_tx_complement(self):
        assert ScoreConfig(w_block=0.25).w_tx == 0.75

    @pytest.mark.parametrize("field, value", [("w_block", -0.1), ("fee_scale", 0.0),
                                              ("window_seconds", math.inf), ("decay_mode", "bogus")])
    def test_invalid_fields(self, field, value):
        with pytest.raises(ValueError):
            ScoreConfig(**{field: value})

    @given(st.floats(0.0, 1.0))
    def test_weights_sum_to_one(self, w):
        c = ScoreConfig(w_block=w)
        assert c.w_block + c.w_tx == 1.0

    def test_engine_rejects_non_config(self):
        with pytest.raises(ConfigError):
            ScoreEngine({"gamma": 1.0})


class TestObserve:
    def test_block_novelty_across_peers(self):
        e = new_engine()
        for x in (ev(0, A, EventKind.CONNECT), ev(0, B, EventKind.CONNECT), block(0.1, A), block(0.2, B)):
            e.observe(x)
        assert e.sessions[A].f_block == 1 and e.sessions[B].f_block == 0

    def test_tx_fee_counted(self):
        e = new_engine(ScoreConfig(fee_scale=1.0))
        e.observe(ev(0, A, EventKind.CONNECT))
        e.observe(tx(0.1, A, fee=1000))
        assert e.sessions[A].f_fee == 1000

    def test_duplicate_tx_same_peer_counted_once(self):
        e = new_engine()
        e.observe(ev(0, A, EventKind.CONNECT))
        e.observe(tx(0.1, A))
        e.observe(tx(0.2, A))
        assert e.sessions[A].f_fee == 1000

    def test_other_kinds_leave_accumulators(self):
        e = new_engine()
        e.observe(ev(0, A, EventKind.CONNECT))
        e.observe(ev(0.1, A, EventKind.PING_RTT, rtt_ms=5.0))
        e.observe(ev(0.2, A, EventKind.ADDR, count=3))
        assert (e.sessions[A].f_block, e.sessions[A].f_fee) == (0, 0.0)

    def test_activity_outside_session(self):
        with pytest.raises(SessionError):
            new_engine().observe(block(0, A))

    def test_nested_connect(self):
        e = new_engine()
        e.observe(ev(0, A, EventKind.CONNECT))
        with pytest.raises(SessionError):
            e.observe(ev(1, A, EventKind.CONNECT))


class TestCloseWindow:
    def test_worked_example(self):
        c = ScoreConfig(gamma=0.9, w_block=0.5)
        assert c.update(2.0, 1, 4.0) == pytest.approx(4.25, abs=1e-15)

    def test_engine_worked_example(self):
        e = new_engine(ScoreConfig(gamma=0.9, w_block=0.5))
        e.observe(ev(0, A, EventKind.CONNECT))
        e.sessions[A].s = 2.0
        e.observe(block(0.1, A))
        e.observe(tx(0.2, A, fee=4))
        state, m = e.close_window(A, 1.0)
        assert (m.f_block, m.f_fee, m.window_start, m.window_end) == (1, 4.0, 0, 1.0)
        assert state.s_prev == 2.0 and state.s_curr == pytest.approx(4.25, abs=1e-15)
        assert e.sessions[A].f_block == 0 and e.sessions[A].f_fee == 0.0

    def test_zero_case(self):
        assert ScoreConfig().update(0.0, 0, 0.0) == 0.0

    def test_block_only_weight_ignores_fees(self):
        assert ScoreConfig(w_block=1.0).update(3.0, 0, 1e6) == 3.0

    def test_prior_mode(self):
        c = ScoreConfig(gamma=0.5, w_block=0.5, decay_mode="prior")
        assert c.update(4.0, 2, 2.0) == 4.0

    def test_unknown_peer(self):
        with pytest.raises(SessionError):
            new_engine().close_window(A, 1.0)

    def test_window_end_before_last_update(self):
        e = new_engine()
        e.observe(ev(5, A, EventKind.CONNECT))
        e.close_window(A, 6.0)
        with pytest.raises(SessionError):
            e.close_window(A, 5.5)


class TestRemembrance:
    def test_unknown_identity_is_zero(self):
        assert new_engine().remembrance_lookup("9.9.9.9") == 0.0

    def test_lookup_after_disconnect(self):
        e = new_engine(ScoreConfig(gamma=0.9, w_block=0.5))
        e.observe(ev(0, A, EventKind.CONNECT))
        e.sessions[A].s = 2.0
        e.observe(block(0.1, A))
        e.observe(tx(0.2, A, fee=4))
        e.close_window(A, 1.0)
        e.observe(ev(1.5, A, EventKind.DISCONNECT))
        assert e.remembrance_lookup("1.2.3.4") == pytest.approx(4.25)
        e.observe(ev(2.0, A, EventKind.CONNECT))
        assert e.sessions[A].s == pytest.approx(4.25)

    def test_address_and_port_identity_restarts_inbound_reconnect(self):
        p1 = PeerKey("1.2.3.4", 50001, Direction.INBOUND)
        p2 = PeerKey("1.2.3.4", 50002, Direction.INBOUND)
        trace = [ev(0, p1, EventKind.CONNECT), block(0.5, p1), ev(1.0, p1, EventKind.DISCONNECT),
                 ev(2.0, p2, EventKind.CONNECT), ev(3.0, p2, EventKind.DISCONNECT)]
        by_port = score_trace(trace, ScoreConfig(w_block=1.0, identity_mode="address_and_port"))
        by_addr = score_trace(trace, ScoreConfig(w_block=1.0))
        assert [r.s_prev for r in by_port] == [0.0, 0.0]
        assert [r.s_prev for r in by_addr] == [0.0, 1.0]

    def test_concurrent_lookups_see_consistent_states(self):
        events = random_trace(np.random.default_rng(3), max_peers=5, max_events=3000)
        engine = new_engine()
        states = {0.0}
        stop = []

        def reader():
            seen = set()
            while not stop:
                for ident in list(engine.store):
                    seen.add(engine.remembrance_lookup(ident))
                time.sleep(0)
            return seen

        with concurrent.futures.ThreadPoolExecutor(2) as pool:
            fut = pool.submit(reader)
            for item in iter_scored(events, engine.config, engine=engine):
                if isinstance(item, WindowRecord):
                    states.update((item.s_prev, item.s_curr))
            stop.append(True)
            seen = fut.result()
        assert seen <= states


class TestScoreTrace:
    def test_three_windows_one_block(self):
        trace = [ev(0, A, EventKind.CONNECT), block(1.5, A), ev(3.0, A, EventKind.DISCONNECT)]
        recs = score_trace(trace, ScoreConfig(w_block=1.0, gamma=1.0))
        assert [r.s_curr for r in recs] == [0.0, 1.0, 1.0]
        assert [r.partial for r in recs] == [False, False, False]
        assert [r.window_end for r in recs] == [1.0, 2.0, 3.0]

    def test_reconnect_carries_score(self):
        trace = [ev(0, A, EventKind.CONNECT), block(1.5, A), ev(3.0, A, EventKind.DISCONNECT),
                 ev(4.0, A, EventKind.CONNECT), ev(5.0, A, EventKind.DISCONNECT)]
        recs = score_trace(trace, ScoreConfig(w_block=1.0))
        assert recs[3].s_prev == recs[2].s_curr == 1.0

    def test_partial_final_window(self):
        trace = [ev(0, A, EventKind.CONNECT), block(0.2, A), ev(1.5, A, EventKind.DISCONNECT)]
        recs = score_trace(trace, ScoreConfig(w_block=1.0))
        assert [(r.window_end, r.partial) for r in recs] == [(1.0, False), (1.5, True)]

    def test_short_lived_session_emits_partial_window(self):
        trace = [ev(0, A, EventKind.CONNECT), ev(0.5, A, EventKind.DISCONNECT)]
        (r,) = score_trace(trace, ScoreConfig())
        assert r.partial and r.window_end == 0.5 and r.s_curr == 0.0

    def test_event_on_boundary_belongs_to_next_window(self):
        trace = [ev(0, A, EventKind.CONNECT), block(1.0, A), ev(2.0, A, EventKind.DISCONNECT)]
        recs = score_trace(trace, ScoreConfig(w_block=1.0))
        assert [r.f_block for r in recs] == [0, 1]

    @pytest.mark.parametrize("other_first", [False, True])
    def test_disconnect_on_boundary_keeps_own_events(self, other_first):
        trace = [ev(0, A, EventKind.CONNECT), ev(0, B, EventKind.CONNECT)]
        own = [block(1.0, A), ev(1.0, A, EventKind.DISCONNECT)]
        trace += ([block(1.0, B, "22" * 32)] + own) if other_first else (own + [block(1.0, B, "22" * 32)])
        trace.append(ev(2.0, B, EventKind.DISCONNECT))
        recs = [r for r in score_trace(trace, ScoreConfig(w_block=1.0)) if r.peer == A]
        assert [(r.window_end, r.partial, r.f_block) for r in recs] == [(1.0, False, 1)]

    def test_empty_trace(self):
        assert score_trace([], ScoreConfig()) == []

    def test_end_ts_closes_open_sessions(self):
        trace = [ev(0, A, EventKind.CONNECT), block(0.5, A)]
        assert len(score_trace(trace, ScoreConfig(), end_ts=3.0)) == 3
        assert score_trace(trace, ScoreConfig()) == []


def _mutate(events, kind, rng):
    out = []
    for e in events:
        if e.kind is kind:
            r = rng.random()
            if r < 0.3:
                continue
            if r < 0.6:
                p = dict(e.payload)
                p["hash"] = rng.bytes(32).hex()
                if kind is EventKind.TX:
                    p["fee"] = int(rng.integers(0, 10**6))
                e = ObservationEvent(e.ts, e.peer, e.kind, p)
        out.append(e)
    return out


def _scores(records):
    return sorted((r.identity, r.window_end, r.s_curr) for r in records)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_matches_oracle_on_small_traces(seed):
    rng = np.random.default_rng(seed)
    events = random_trace(rng, max_peers=6, max_events=100, mean_gap=0.1)
    cfg = ScoreConfig(gamma=float(rng.choice([1.0, 0.9, 0.5])), w_block=float(rng.choice([0, 0.25, 0.5, 1])),
                      fee_scale=float(rng.choice([1.0, 1e4])), decay_mode=str(rng.choice(["increment", "prior"])),
                      identity_mode=str(rng.choice(["address_only", "address_and_port"])))
    got = sorted(score_trace(events, cfg), key=lambda r: (r.identity, r.window_end))
    want = oracle_scores(events, cfg.gamma, cfg.w_block, cfg.fee_scale, cfg.window_seconds,
                         cfg.decay_mode.value, cfg.identity_mode.value)
    assert len(got) == len(want)
    for g, w in zip(got, want):
        assert (g.identity, g.window_end, g.partial, g.f_block) == (w.identity, w.window_end, w.partial, w.f_block)
        assert g.f_fee == pytest.approx(w.f_fee, rel=1e-12, abs=0)
        assert g.s_curr == pytest.approx(w.s_curr, rel=1e-12, abs=1e-300)


def _close_all(events):
    open_ = {}
    for e in events:
        if e.kind is EventKind.CONNECT:
            open_[e.peer] = e
        elif e.kind is EventKind.DISCONNECT:
            del open_[e.peer]
    return events + [ev(events[-1].ts, p, EventKind.DISCONNECT) for p in open_]


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_novelty_sum_is_one_per_hash(seed):
    events = _close_all(random_trace(np.random.default_rng(seed), max_peers=8, max_events=400))
    recs = score_trace(events, ScoreConfig(fee_scale=1.0))
    blocks = {e.payload["hash"] for e in events if e.kind is EventKind.BLOCK}
    first_fee = {}
    for e in events:
        if e.kind is EventKind.TX:
            first_fee.setdefault(e.payload["hash"], e.payload["fee"])
    assert sum(r.f_block for r in recs) == len(blocks)
    assert sum(r.f_fee for r in recs) == sum(first_fee.values())


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_increment_mode_monotone(seed):
    events = random_trace(np.random.default_rng(seed), max_peers=8, max_events=400)
    last = {}
    for r in score_trace(events, ScoreConfig(gamma=0.7)):
        assert r.s_curr >= r.s_prev
        assert r.s_prev >= last.get(r.identity, 0.0)
        last[r.identity] = r.s_curr


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_degenerate_weights(seed):
    rng = np.random.default_rng(seed)
    events = random_trace(rng, max_peers=8, max_events=400)
    end = events[-1].ts
    for w, kind in ((1.0, EventKind.TX), (0.0, EventKind.BLOCK)):
        cfg = ScoreConfig(w_block=w)
        assert _scores(score_trace(events, cfg, end)) == _scores(score_trace(_mutate(events, kind, rng), cfg, end))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(-8, 16))
def test_fee_scale_divides_scores(seed, e):
    c = 2.0 ** e  # power of two keeps the division exact
    events = random_trace(np.random.default_rng(seed), max_peers=8, max_events=400)
    base = score_trace(events, ScoreConfig(w_block=0.0, gamma=0.75))
    scaled = score_trace(events, ScoreConfig(w_block=0.0, gamma=0.75, fee_scale=c))
    assert [r.s_curr / c for r in base] == [r.s_curr for r in scaled]


def test_remembrance_continuity():
    """Splitting a session at a window boundary leaves every score unchanged."""
    trace = [ev(0, A, EventKind.CONNECT), block(0.5, A), tx(1.5, A, fee=7),
             block(2.5, A, "22" * 32), ev(4.0, A, EventKind.DISCONNECT)]
    split = trace[:2] + [ev(1.0, A, EventKind.DISCONNECT), ev(1.0, A, EventKind.CONNECT)] + trace[2:]
    cfg = ScoreConfig(gamma=0.8)
    assert [r.s_curr for r in score_trace(trace, cfg)] == [r.s_curr for r in score_trace(split, cfg)]
