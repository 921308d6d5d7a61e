import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerswarm.errors import InvalidArgumentError, InvariantViolationError, NoCandidatesError, NoDataError
from layerswarm.scoring import (
    ContentIndex,
    PeerId,
    RegretLedger,
    ScoringState,
    ScoringWeights,
    SpeedWindow,
    layer_popularity,
    popularity_score,
    record_round,
    sample_subset,
    select_peer,
    smoothed_speed,
    softmax,
    temperature,
    utility,
)

finite = st.floats(min_value=-1e3, max_value=1e3, allow_nan=False)
speeds = st.floats(min_value=0, max_value=1e9, allow_nan=False)


def window_of(values, capacity=None):
    w = SpeedWindow(capacity or len(values))
    for slot, v in enumerate(values, start=1):
        w.add(slot, v)
    return w


# speed windows


def test_first_sample_and_ring():
    s = ScoringState(ScoringWeights(window_len=3))
    p = PeerId("a", "x")
    s.record_speed(p, 5.0, 1)
    assert len(s.windows[p]) == 1
    for slot in range(2, 6):
        s.record_speed(p, float(slot), slot)
    assert len(s.windows[p]) == 3
    assert [slot for slot, _ in s.windows[p].samples] == [3, 4, 5]


def test_global_window_holds_running_means():
    s = ScoringState(ScoringWeights(window_len=8))
    a, b, c = PeerId("a"), PeerId("b"), PeerId("c")
    s.record_speed(a, 3.0, 1)
    s.record_speed(b, 9.0, 2)
    s.record_speed(c, 6.0, 3)
    # by hand: slot 1 mean over {a}=3, slot 2 over {a,b}=6, slot 3 over {a,b,c}=6
    assert s.global_window.speeds() == pytest.approx([3.0, 6.0, 6.0])
    s.record_speed(a, 12.0, 4)
    sa = (3 * 1 + 12 * math.exp(-1)) / (1 + math.exp(-1))
    assert s.global_window.speeds()[-1] == pytest.approx((sa + 9 + 6) / 3)


def test_same_slot_samples_merge():
    w = SpeedWindow(4)
    w.add(1, 2.0)
    w.add(1, 4.0)
    assert w.samples[-1] == (1, 3.0)
    with pytest.raises(InvalidArgumentError):
        w.add(0, 1.0)


def test_smoothed_speed_examples():
    assert smoothed_speed(window_of([10, 10, 10])) == pytest.approx(10)
    assert smoothed_speed(window_of([7])) == 7
    expected = (2 * math.e + 4) / (math.e + 1)
    assert smoothed_speed(window_of([2, 4])) == pytest.approx(expected)
    assert expected == pytest.approx(2.538, abs=1e-3)
    with pytest.raises(NoDataError):
        smoothed_speed(SpeedWindow(3))


@given(st.lists(speeds, min_size=1, max_size=64))
def test_smoothed_speed_bounded_by_extremes(values):
    v = smoothed_speed(window_of(values))
    assert min(values) * (1 - 1e-12) - 1e-9 <= v <= max(values) * (1 + 1e-12) + 1e-9


def test_smoothed_speed_long_window_finite():
    assert math.isfinite(smoothed_speed(window_of([1.0] * 5000)))


# network score


def test_same_lan_is_100():
    s = ScoringState()
    local = PeerId("l", "home")
    s.record_speed(local, 1.0, 1)
    s.record_speed(PeerId("r", "far"), 1e9, 1)
    assert s.network_score(local, "home") == 100.0


def test_equal_remote_speeds_are_50():
    s = ScoringState()
    a, b = PeerId("a", "x"), PeerId("b", "y")
    s.record_speed(a, 5.0, 1)
    s.record_speed(b, 5.0, 1)
    assert s.network_scores([a, b], "home") == {a: 50.0, b: 50.0}


def test_three_remote_min_max():
    s = ScoringState()
    ps = [PeerId(n, "far") for n in "abc"]
    for p, v in zip(ps, (1e6, 2e6, 4e6)):
        s.record_speed(p, v, 1)
    assert s.global_speed() == pytest.approx(7e6 / 3)
    nets = s.network_scores(ps, "home")
    assert [nets[p] for p in ps] == pytest.approx([0.0, 100 / 3, 100.0])


def test_remote_without_samples():
    s = ScoringState()
    p = PeerId("r", "far")
    with pytest.raises(NoDataError):
        s.network_score(p, "home")
    assert s.network_scores([p], "home")[p] == 50.0


def test_remote_capped_below_faster_local():
    s = ScoringState()
    local, remote = PeerId("l", "home"), PeerId("r", "far")
    s.record_speed(local, 9e6, 1)
    s.record_speed(remote, 3e6, 1)
    nets = s.network_scores([local, remote], "home")
    assert nets[local] == 100.0 and nets[remote] == 0.0


@given(st.lists(st.tuples(st.sampled_from(["home", "x", "y"]), speeds), min_size=1, max_size=12))
def test_network_scores_in_range(entries):
    s = ScoringState()
    peers = []
    for i, (lan, v) in enumerate(entries):
        p = PeerId(f"p{i}", lan)
        s.record_speed(p, v, 1)
        peers.append(p)
    for v in s.network_scores(peers, "home").values():
        assert 0.0 <= v <= 100.0


# popularity


def two_peer_index():
    idx = ContentIndex()
    idx.add_image("i1", ["L", "a"])
    idx.add_image("i2", ["L", "b"])
    idx.add_image("i3", ["L"])
    idx.add_image("i4", ["c"])
    p, q = PeerId("p"), PeerId("q")
    for peer, images in ((p, ["i1", "i2"]), (q, ["i3", "i4"])):
        for image in images:
            idx.set_holding(peer, image)
    return idx, p, q


def test_layer_popularity_examples():
    idx, p, q = two_peer_index()
    assert layer_popularity("L", idx) == 0.75
    assert layer_popularity("zzz", idx) == 0.0
    full = ContentIndex()
    full.add_image("only", ["L"])
    full.set_holding(p, "only")
    full.set_holding(q, "only")
    assert layer_popularity("L", full) == 1.0
    with pytest.raises(NoDataError):
        layer_popularity("L", ContentIndex())


def test_popularity_score_examples():
    idx = ContentIndex()
    idx.add_image("one", ["L"])
    p = PeerId("p")
    idx.set_holding(p, "one")
    assert popularity_score(p, idx, 1.0) == pytest.approx(100 * (1 - math.exp(-1)))
    assert popularity_score(p, idx, 1.0) == pytest.approx(63.21, abs=0.01)
    assert popularity_score(p, idx, 50.0) == pytest.approx(100.0, abs=1e-9)
    with pytest.raises(NoDataError):
        popularity_score(PeerId("nobody"), idx, 1.0)


def test_popularity_score_vanishes_with_lambda():
    # a held layer always has popularity > 0, so the zero score is reached through λ -> 0
    idx, p, q = two_peer_index()
    assert popularity_score(p, idx, 1e-12) == pytest.approx(0.0, abs=1e-8)


def test_popularity_score_by_hand():
    idx, p, q = two_peer_index()
    # p holds (i1: L, a) and (i2: L, b); popularity L=3/4, a=b=1/4
    expected = 100 * (1 - (2 * math.exp(-0.75) + 2 * math.exp(-0.25)) / 4)
    assert popularity_score(p, idx, 1.0) == pytest.approx(expected)


@given(st.integers(min_value=1, max_value=6), st.integers(min_value=1, max_value=8), st.floats(0.01, 50), st.randoms())
def test_popularity_score_in_range(n_peers, n_images, lam, rnd):
    idx = ContentIndex()
    for i in range(n_images):
        idx.add_image(f"i{i}", [f"l{rnd.randrange(5)}" for _ in range(rnd.randrange(1, 4))])
    peers = [PeerId(f"p{j}") for j in range(n_peers)]
    for peer in peers:
        idx.set_holding(peer, f"i{rnd.randrange(n_images)}")
    for peer in peers:
        assert 0.0 <= popularity_score(peer, idx, lam) <= 100.0


def test_set_holding_needs_registered_image():
    with pytest.raises(InvalidArgumentError):
        ContentIndex().set_holding(PeerId("p"), "ghost")


# utility and weights


def test_utility_examples():
    assert utility(ScoringWeights(1, 0, 0), 42, 0, 0) == 42
    assert utility(ScoringWeights(0.5, 0.3, 0.2), 100, 50, 0) == pytest.approx(65)
    with pytest.raises(InvalidArgumentError):
        ScoringWeights(0, 0, 0)
    for bad in (dict(alpha=-1), dict(lam=0), dict(tau0=0), dict(window_len=0)):
        with pytest.raises(InvalidArgumentError):
            ScoringWeights(**bad)


def test_score_uses_custom_scorer_clamped():
    s = ScoringState(ScoringWeights(0, 0, 1), custom=lambda p: 250.0)
    p = PeerId("a", "home")
    assert s.score([p], "home")[p].cst == 100.0


# softmax and selection


@given(st.lists(finite, min_size=1, max_size=20), st.floats(0.01, 100))
def test_softmax_is_distribution(us, tau):
    p = softmax(us, tau)
    assert np.all(p >= 0)
    assert abs(p.sum() - 1) < 1e-9


@given(st.lists(finite, min_size=1, max_size=20), st.floats(0.5, 100), st.floats(-1e3, 1e3))
def test_softmax_shift_invariant(us, tau, c):
    a = softmax(us, tau)
    b = softmax([u + c for u in us], tau)
    assert np.allclose(a, b, atol=1e-9, rtol=0)


@given(st.lists(st.floats(-50, 50), min_size=2, max_size=10, unique=True), st.floats(1, 100))
def test_softmax_order_preserving(us, tau):
    p = softmax(us, tau)
    for i in range(len(us)):
        for j in range(len(us)):
            if us[i] > us[j] + 1e-6:
                assert p[i] >= p[j]
                if (us[i] - us[j]) / tau > 1e-9:
                    assert p[i] > p[j]


def test_softmax_huge_utilities_stable():
    p = softmax([1e6, 1e6 - 1], 1.0)
    assert np.isfinite(p).all() and p[0] > p[1]


def test_temperature():
    assert temperature(1, 20) == 20
    assert temperature(4, 20) == 10
    with pytest.raises(InvalidArgumentError):
        temperature(0, 20)


def test_select_peer_single_and_empty():
    rng = np.random.default_rng(0)
    assert all(select_peer([("only", 1.0)], t, 20, rng) == "only" for t in range(1, 50))
    with pytest.raises(NoCandidatesError):
        select_peer([], 1, 20, rng)


def test_select_peer_equal_utilities_half():
    rng = np.random.default_rng(1)
    picks = [select_peer([("a", 5.0), ("b", 5.0)], 1, 10, rng) for _ in range(10_000)]
    assert picks.count("a") / 10_000 == pytest.approx(0.5, abs=0.02)


def test_select_peer_closed_form_softmax():
    rng = np.random.default_rng(2)
    picks = [select_peer([("a", 10.0), ("b", 20.0)], 1, 10, rng) for _ in range(10_000)]
    expected = math.exp(2) / (math.exp(1) + math.exp(2))
    assert expected == pytest.approx(0.731, abs=1e-3)
    assert picks.count("b") / 10_000 == pytest.approx(expected, abs=0.02)


def test_low_temperature_picks_argmax():
    rng = np.random.default_rng(3)
    tau0 = 20.0
    t = int(math.ceil((tau0 / 0.1) ** 2))
    assert temperature(t, tau0) <= 0.1
    cands = [("best", 55.0), ("b", 50.0), ("c", 30.0)]
    picks = [select_peer(cands, t, tau0, rng) for _ in range(2000)]
    assert picks.count("best") / 2000 >= 0.99


def test_sample_subset_distinct():
    rng = np.random.default_rng(4)
    cands = [(f"p{i}", float(i)) for i in range(6)]
    for k in (1, 3, 6, 9):
        sub = sample_subset(cands, k, 5.0, rng)
        names = [n for n, _ in sub]
        assert len(names) == len(set(names)) == min(k, 6)


# regret ledger


def test_record_round_examples():
    ledger = RegretLedger()
    assert record_round(ledger, 50, 50) == 0
    assert record_round(ledger, 60, 80) == 20
    with pytest.raises(InvariantViolationError):
        record_round(ledger, 90, 80)
    ledger = RegretLedger()
    for _ in range(100):
        record_round(ledger, 1.0, 2.0)
    assert ledger.cumulative == 100


def test_regret_csv():
    ledger = RegretLedger()
    record_round(ledger, 1.0, 3.0)
    record_round(ledger, 2.0, 3.0)
    rows = ledger.to_csv().splitlines()
    assert rows[0] == "t,chosen_u,best_u,cumulative"
    assert rows[-1].split(",")[0] == "2" and float(rows[-1].split(",")[-1]) == 3.0


@settings(max_examples=50)
@given(st.lists(st.tuples(st.floats(0, 100), st.floats(0, 50)), max_size=50))
def test_regret_cumulative_is_sum(rounds):
    ledger = RegretLedger()
    for chosen, gap in rounds:
        record_round(ledger, chosen, chosen + gap)
    assert ledger.cumulative == pytest.approx(sum(g for _, g in rounds))
