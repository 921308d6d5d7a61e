import hashlib
import io
import json
import math

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from layerswarm.content import (
    KiB,
    MiB,
    BlockState,
    BlockStatus,
    Digest,
    ImageManifest,
    LayerDescriptor,
    block_count,
    build_block_table,
    compute_block_size,
    iter_blocks,
    table_from_hashes,
    verify_block,
)
from layerswarm.errors import InvalidArgumentError


# independent oracles


def oracle_block_size(size: int) -> int:
    """Integer-only evaluation of the banded rule."""
    for lower, parts in ((1024 * MiB, 256), (256 * MiB, 64), (16 * MiB, 16)):
        if size >= lower:
            whole_mib = size // (parts * MiB)
            return max(64 * KiB, whole_mib * MiB)
    return size


def oracle_root(leaf_hex: list[str]) -> str:
    """Recursive tree over hex strings; pads odd levels by repeating the last node."""
    if len(leaf_hex) == 1:
        return hashlib.sha256(bytes.fromhex(leaf_hex[0])).hexdigest()

    def reduce(level):
        if len(level) == 1:
            return level[0]
        if len(level) % 2 == 1:
            level = level + [level[-1]]
        parents = []
        for left, right in zip(level[::2], level[1::2]):
            parents.append(hashlib.sha256(bytes.fromhex(left + right)).hexdigest())
        return reduce(parents)

    return reduce(list(leaf_hex))


class SyntheticLayer(io.RawIOBase):
    """Seekable deterministic payload: MiB number ``m`` is filled with byte ``m % 251``."""

    def __init__(self, size: int):
        self.size = size
        self.pos = 0
        self._fill = {}

    def readable(self):
        return True

    def seekable(self):
        return True

    def seek(self, offset, whence=0):
        self.pos = {0: offset, 1: self.pos + offset, 2: self.size + offset}[whence]
        return self.pos

    def tell(self):
        return self.pos

    def _mib(self, m):
        if m % 251 not in self._fill:
            self._fill[m % 251] = bytes([m % 251]) * MiB
        return self._fill[m % 251]

    def read(self, n=-1):
        end = self.size if n < 0 else min(self.size, self.pos + n)
        parts = []
        while self.pos < end:
            m, off = divmod(self.pos, MiB)
            take = min(MiB - off, end - self.pos)
            parts.append(self._mib(m)[off : off + take])
            self.pos += take
        return b"".join(parts)


# block size


@pytest.mark.parametrize(
    "size_mib, block_mib, blocks",
    [(8194.5, 32, 257), (10, 10, 1), (512, 8, 64), (100, 6, 17)],
)
def test_block_size_examples(size_mib, block_mib, blocks):
    size = int(size_mib * MiB)
    assert compute_block_size(size) == block_mib * MiB
    assert block_count(size, compute_block_size(size)) == blocks


@pytest.mark.parametrize("size", [1, 16 * MiB - 1, 16 * MiB, 256 * MiB - 1, 256 * MiB, 1024 * MiB - 1, 1024 * MiB])
def test_band_edges_match_oracle(size):
    assert compute_block_size(size) == oracle_block_size(size)


@given(st.integers(min_value=1, max_value=64 << 30))
def test_block_size_matches_oracle(size):
    assert compute_block_size(size) == oracle_block_size(size)


@given(st.integers(min_value=1, max_value=64 << 30), st.integers(min_value=1, max_value=64 << 30))
def test_block_size_monotone_within_band(a, b):
    def band(x):
        return sum(x >= edge for edge in (16 * MiB, 256 * MiB, 1024 * MiB))

    a, b = sorted((a, b))
    if band(a) == band(b):
        assert compute_block_size(a) <= compute_block_size(b)


def test_block_size_rejects_non_positive():
    with pytest.raises(InvalidArgumentError):
        compute_block_size(0)


def test_minimum_block_size_floor():
    # the banded branches never produce less than one MiB in practice; the floor guards the rule itself
    assert compute_block_size(16 * MiB) == MiB
    assert compute_block_size(16 * MiB) >= 64 * KiB


def _counts_top_band():
    return {m: block_count(m * MiB, compute_block_size(m * MiB)) for m in range(1024, 64 * 1024 + 1)}


@pytest.mark.xfail(
    strict=True,
    reason="floor-to-MiB gives up to 320 blocks in the top band (at 1277 MiB), so a 257 cap cannot hold",
)
def test_top_band_block_count_at_most_257():
    counts = _counts_top_band()
    assert max(counts.values()) <= 257


def test_top_band_block_count_true_bound():
    counts = _counts_top_band()
    worst = max(counts, key=counts.get)
    assert (worst, counts[worst]) == (1277, 320)
    # closed form: the count peaks just before each whole-MiB step in L/256
    for m, n in counts.items():
        assert n == math.ceil(m / (m // 256))


# Merkle / block table


def test_one_byte_layer():
    table = build_block_table(b"x")
    leaf = hashlib.sha256(b"x").digest()
    assert table.block_count == 1
    assert table.merkle_root.raw == hashlib.sha256(leaf).digest()


def test_two_identical_blocks():
    block = bytes(range(256)) * 4
    payload = block * 2
    table = table_from_hashes(Digest.of(payload), len(payload), len(block), [Digest.of(block)] * 2)
    assert table.block_hashes[0] == table.block_hashes[1]
    leaf = table.block_hashes[0].raw
    assert table.merkle_root.raw == hashlib.sha256(leaf + leaf).digest()
    assert verify_block(block, 0, table) and verify_block(block, 1, table)


def test_multi_block_payload_verifies_everywhere():
    import numpy as np

    payload = np.random.default_rng(3).bytes(21 * MiB + 77)
    table = build_block_table(payload)
    assert table.block_count == 22
    blocks = list(iter_blocks(payload, table.block_size_bytes))
    assert b"".join(blocks) == payload
    assert all(verify_block(b, i, table) for i, b in enumerate(blocks))
    assert table.block_length(21) == 77


def test_empty_layer_rejected():
    with pytest.raises(InvalidArgumentError):
        build_block_table(b"")


@given(st.binary(min_size=1, max_size=4096), st.integers(min_value=1, max_value=600))
def test_root_matches_oracle_for_many_leaf_counts(seed_bytes, leaves):
    hexes = [hashlib.sha256(seed_bytes + i.to_bytes(4, "big")).hexdigest() for i in range(leaves)]
    table = table_from_hashes(Digest.of(seed_bytes), leaves, 1, [Digest(h) for h in hexes])
    assert table.merkle_root.hex == oracle_root(hexes)


def test_257_block_layer_root_matches_oracle():
    size = int(8194.5 * MiB)
    table = build_block_table(SyntheticLayer(size))
    assert table.block_size_bytes == 32 * MiB
    assert table.block_count == 257

    stream = SyntheticLayer(size)
    leaves = []
    for _ in range(257):
        leaves.append(hashlib.sha256(stream.read(32 * MiB)).hexdigest())
    assert stream.read(1) == b""
    assert [d.hex for d in table.block_hashes] == leaves
    assert table.merkle_root.hex == oracle_root(leaves)


@settings(max_examples=60)
@given(st.binary(min_size=1, max_size=40_000))
def test_blocks_reassemble_payload(payload):
    table = build_block_table(payload)
    blocks = list(iter_blocks(payload, table.block_size_bytes))
    assert b"".join(blocks) == payload
    assert len(blocks) == table.block_count
    for i, b in enumerate(blocks):
        assert verify_block(b, i, table)


def test_stream_and_bytes_agree():
    payload = bytes(range(251)) * 100_000
    assert build_block_table(payload) == build_block_table(io.BytesIO(payload))


def four_block_table():
    """Four distinct 1 KiB blocks under an explicit block size."""
    blocks = [bytes([i]) * 1024 for i in range(4)]
    payload = b"".join(blocks)
    hashes = [Digest.of(b) for b in blocks]
    return payload, table_from_hashes(Digest.of(payload), len(payload), 1024, hashes)


def test_verify_untampered_flipped_and_swapped():
    payload, table = four_block_table()
    blocks = list(iter_blocks(payload, table.block_size_bytes))
    assert table.block_count == 4
    assert verify_block(blocks[2], 2, table)
    flipped = bytearray(blocks[2])
    flipped[123] ^= 0x01
    assert not verify_block(bytes(flipped), 2, table)
    assert blocks[0] != blocks[1]
    assert not verify_block(blocks[0], 1, table)
    assert not verify_block(blocks[1], 0, table)


def test_verify_index_out_of_range():
    payload, table = four_block_table()
    with pytest.raises(InvalidArgumentError):
        verify_block(b"", table.block_count, table)
    with pytest.raises(InvalidArgumentError):
        verify_block(b"", -1, table)


def test_verify_rejects_tampered_table_root():
    payload, table = four_block_table()
    from dataclasses import replace

    forged = replace(table, merkle_root=Digest.of(b"other"))
    block = payload[: table.block_size_bytes]
    assert not verify_block(block, 0, forged)


def test_table_json_round_trip():
    _, table = four_block_table()
    assert type(table).from_json(json.loads(json.dumps(table.to_json()))) == table


def test_table_json_rejects_wrong_root():
    _, table = four_block_table()
    doc = table.to_json()
    doc["merkle_root"] = str(Digest.of(b"nope"))
    with pytest.raises(InvalidArgumentError):
        type(table).from_json(doc)


# digests, manifests, block states


def test_digest_parse_and_errors():
    d = Digest.of(b"abc")
    assert Digest.parse(str(d)) == d
    for bad in ("abc", "sha256:xyz", "md5:" + "0" * 64, "sha256:" + "A" * 64):
        with pytest.raises(InvalidArgumentError):
            Digest.parse(bad)


def test_manifest_round_trip_and_validation():
    layer = LayerDescriptor(Digest.of(b"layer"), 5)
    m = ImageManifest.build("library/app", "v1", [layer])
    parsed = ImageManifest.parse(m.raw_bytes)
    assert parsed.layers == (layer,)
    assert parsed.digest == Digest.of(m.raw_bytes)
    assert json.loads(m.raw_bytes)["layers"][0]["size"] == 5
    for raw in (b"not json", b"[]", b'{"name": "a", "tag": "b"}', b'{"name":"a","tag":"b","layers":[]}'):
        with pytest.raises(InvalidArgumentError):
            ImageManifest.parse(raw)


def test_descriptor_matches():
    layer = LayerDescriptor(Digest.of(b"payload"), 7)
    assert layer.matches(b"payload")
    assert not layer.matches(b"payloaX")


def test_block_state_transitions():
    state = BlockState(0)
    state.advance(BlockStatus.PENDING)
    state.advance(BlockStatus.DOWNLOADING)
    state.advance(BlockStatus.PENDING)
    state.advance(BlockStatus.DOWNLOADING)
    state.advance(BlockStatus.VERIFIED)
    with pytest.raises(InvalidArgumentError):
        state.advance(BlockStatus.PENDING)
    with pytest.raises(InvalidArgumentError):
        BlockState(1).advance(BlockStatus.VERIFIED)
