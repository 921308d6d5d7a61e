import pytest
from hypothesis import given
from hypothesis import strategies as st

from layerswarm.cache import (
    CacheEntry,
    CapacityPolicy,
    LayerCache,
    eviction_tier,
    needs_cleaning,
    plan_eviction,
    plan_eviction_lru,
)
from layerswarm.errors import InvalidArgumentError

GiB = 1 << 30


def entry(name, size=10, access=0.0, local=0, external=0, pinned=False):
    return CacheEntry(name, size, access, local, external, pinned)


def test_needs_cleaning_examples():
    p = CapacityPolicy(100 * GiB)
    assert needs_cleaning(p, 91 * GiB)
    assert not needs_cleaning(p, 0)
    assert not needs_cleaning(CapacityPolicy(100), 90)
    assert needs_cleaning(CapacityPolicy(100), 91)


def test_policy_and_entry_validation():
    for args in ((0,), (100, 0.3, 0.2), (100, 0.0, 0.2), (100, 0.1, 1.0)):
        with pytest.raises(InvalidArgumentError):
            CapacityPolicy(*args)
    with pytest.raises(InvalidArgumentError):
        entry("x", size=0)
    with pytest.raises(InvalidArgumentError):
        entry("x", local=-1)


def test_tiers():
    assert eviction_tier(entry("a", local=2)) == 1
    assert eviction_tier(entry("a", external=5)) == 2
    assert eviction_tier(entry("a")) == 3


def test_stale_replica_data_is_tier_3():
    e = entry("a", local=3)
    e.refreshed_at = 0.0
    assert eviction_tier(e, now=10.0) == 1
    assert eviction_tier(e, now=31.0) == 3


def test_tier_order_keeps_sole_copy():
    entries = [entry("t1a", 30, 1, local=1), entry("t1b", 30, 2, local=1), entry("sole", 30, 0)]
    plan = plan_eviction(entries, CapacityPolicy(100, 0.1, 0.2))
    assert [v.content for v in plan.victims] == ["t1a"]
    assert not plan.shortfall


def test_tier_2_by_external_replicas():
    entries = [entry("few", 45, 0, external=1), entry("many", 45, 5, external=7)]
    plan = plan_eviction(entries, CapacityPolicy(100, 0.1, 0.2))
    assert [v.content for v in plan.victims] == ["many"]


def test_within_tier_1_oldest_then_largest():
    entries = [entry("small", 10, 1, local=1), entry("big", 40, 1, local=1), entry("new", 45, 9, local=1)]
    plan = plan_eviction(entries, CapacityPolicy(100, 0.1, 0.2))
    assert [v.content for v in plan.victims][0] == "big"


def test_all_pinned_is_shortfall():
    entries = [entry(f"p{i}", 30, pinned=True) for i in range(3)]
    plan = plan_eviction(entries, CapacityPolicy(100, 0.1, 0.2))
    assert plan.victims == [] and plan.shortfall


def test_lru_matches_cleaner_on_uniform_tiers():
    entries = [entry(f"e{i}", 20, access=i * 1.5 % 7, local=1) for i in range(5)]
    policy = CapacityPolicy(100, 0.1, 0.2)
    a = [v.content for v in plan_eviction(entries, policy).victims]
    b = [v.content for v in plan_eviction_lru(entries, policy).victims]
    assert a == b


def test_lru_evicts_sole_copy_cleaner_protects():
    entries = [entry("sole", 40, 0.0), entry("shared1", 30, 1.0, local=1), entry("shared2", 25, 2.0, external=2)]
    policy = CapacityPolicy(100, 0.1, 0.2)
    assert [v.content for v in plan_eviction_lru(entries, policy).victims] == ["sole"]
    cleaner = [v.content for v in plan_eviction(entries, policy).victims]
    assert "sole" not in cleaner


def test_empty_cache_empty_plan():
    for planner in (plan_eviction, plan_eviction_lru):
        plan = planner([], CapacityPolicy(100))
        assert plan.victims == [] and plan.reclaimed_bytes == 0


entries_st = st.lists(
    st.builds(
        entry,
        name=st.uuids().map(str),
        size=st.integers(1, 60),
        access=st.floats(0, 100),
        local=st.integers(0, 2),
        external=st.integers(0, 3),
        pinned=st.booleans(),
    ),
    max_size=15,
    unique_by=lambda e: e.content,
)


@given(entries_st, st.integers(50, 300))
def test_plan_properties(entries, total):
    policy = CapacityPolicy(total, 0.1, 0.2)
    used = sum(e.size_bytes for e in entries)
    target = total * 0.8
    plan = plan_eviction(entries, policy)
    victims = plan.victims
    assert not any(v.pinned for v in victims)
    assert plan.reclaimed_bytes == sum(v.size_bytes for v in victims)
    # stops at the first point the target is met
    if victims:
        assert used - (plan.reclaimed_bytes - victims[-1].size_bytes) > target
    assert plan.shortfall == (used - plan.reclaimed_bytes > target)
    # a sole copy goes only once every cheaper candidate is gone
    cheaper = [e for e in entries if not e.pinned and eviction_tier(e) < 3]
    if any(eviction_tier(v) == 3 for v in victims):
        assert all(c in victims for c in cheaper)
    tiers = [eviction_tier(v) for v in victims]
    assert tiers == sorted(tiers)


def test_layer_cache_cleans_with_replica_refresh():
    replicas = {"a": (1, 0), "b": (0, 0), "c": (0, 2)}
    cache = LayerCache(CapacityPolicy(100, 0.1, 0.2), replicas=lambda c: replicas.get(c, (0, 0)))
    cache.insert("a", 40, 1.0)
    cache.insert("b", 30, 2.0)
    evicted = cache.insert("c", 25, 3.0)
    assert [e.content for e in evicted] == ["a"]
    assert "b" in cache and "c" in cache
    victims, survivors = cache.history[-1]
    assert victims == [1] and sorted(survivors) == [2, 3]
    rows = cache.log.to_csv().splitlines()
    assert rows[0] == "time,digest,size,tier,reason" and rows[1].split(",")[1:] == ["a", "40", "1", "tiered"]


def test_layer_cache_pin_and_touch():
    cache = LayerCache(CapacityPolicy(100, 0.1, 0.2), strategy="lru")
    cache.insert("old", 50, 0.0, pinned=True)
    cache.insert("mid", 30, 1.0)
    cache.touch("mid", 5.0)
    evicted = cache.insert("new", 15, 2.0)
    assert [e.content for e in evicted] == ["new"]
    cache.pin("old", False)
    assert cache.entries["old"].pinned is False
    with pytest.raises(InvalidArgumentError):
        LayerCache(CapacityPolicy(100), strategy="fifo")
