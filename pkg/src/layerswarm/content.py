"""Images, manifests, layers and the block/Merkle machinery used for transfer.

A layer is split into fixed-size blocks; each block is hashed with sha-256 and
the block hashes form the leaves of a binary Merkle tree. Peers advertise the
tree root together with the block size and count, and every received block is
checked against its leaf hash and Merkle path before it is accepted.
"""

from __future__ import annotations

import enum
import hashlib
import json
import math
import re
from dataclasses import dataclass, field
from functools import cached_property
from typing import BinaryIO, Iterable, Iterator, Sequence

from .errors import InvalidArgumentError

MiB = 1 << 20
KiB = 1 << 10
GiB = 1 << 30

MIN_BLOCK_SIZE = 64 * KiB

OCI_MANIFEST_MEDIA_TYPE = "application/vnd.oci.image.manifest.v1+json"
OCI_LAYER_MEDIA_TYPE = "application/vnd.oci.image.layer.v1.tar+gzip"

_HEX_RE = re.compile(r"^[0-9a-f]{64}$")


@dataclass(frozen=True, order=True)
class Digest:
    hex: str
    algorithm: str = "sha256"

    def __post_init__(self) -> None:
        if self.algorithm != "sha256":
            raise InvalidArgumentError(f"unsupported digest algorithm {self.algorithm!r}")
        if not _HEX_RE.match(self.hex):
            raise InvalidArgumentError(f"malformed sha256 hex digest {self.hex!r}")

    @classmethod
    def of(cls, data: bytes) -> "Digest":
        return cls(hashlib.sha256(data).hexdigest())

    @classmethod
    def parse(cls, text: str) -> "Digest":
        algorithm, sep, hexpart = text.partition(":")
        if not sep:
            raise InvalidArgumentError(f"digest {text!r} lacks an algorithm prefix")
        return cls(hexpart, algorithm)

    @property
    def raw(self) -> bytes:
        return bytes.fromhex(self.hex)

    def __str__(self) -> str:
        return f"{self.algorithm}:{self.hex}"


def _h(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


@dataclass(frozen=True)
class LayerDescriptor:
    digest: Digest
    size_bytes: int
    media_type: str = OCI_LAYER_MEDIA_TYPE

    def __post_init__(self) -> None:
        if self.size_bytes < 0:
            raise InvalidArgumentError("layer size must be non-negative")

    def matches(self, payload: bytes) -> bool:
        return len(payload) == self.size_bytes and Digest.of(payload) == self.digest

    def to_json(self) -> dict:
        return {"mediaType": self.media_type, "digest": str(self.digest), "size": self.size_bytes}


@dataclass(frozen=True)
class ImageManifest:
    """OCI-style manifest. ``raw_bytes`` is the exact serialized document."""

    name: str
    tag: str
    layers: tuple[LayerDescriptor, ...]
    raw_bytes: bytes = field(repr=False, compare=False)

    def __post_init__(self) -> None:
        if not self.layers:
            raise InvalidArgumentError("a manifest needs at least one layer")

    @classmethod
    def build(cls, name: str, tag: str, layers: Sequence[LayerDescriptor]) -> "ImageManifest":
        doc = {
            "schemaVersion": 2,
            "mediaType": OCI_MANIFEST_MEDIA_TYPE,
            "name": name,
            "tag": tag,
            "layers": [layer.to_json() for layer in layers],
        }
        raw = json.dumps(doc, sort_keys=True, separators=(",", ":")).encode()
        return cls(name, tag, tuple(layers), raw)

    @classmethod
    def parse(cls, raw: bytes) -> "ImageManifest":
        """Parse and validate a serialized manifest; raises on any malformation."""
        try:
            doc = json.loads(raw)
        except (UnicodeDecodeError, json.JSONDecodeError) as exc:
            raise InvalidArgumentError(f"manifest is not valid JSON: {exc}") from exc
        if not isinstance(doc, dict):
            raise InvalidArgumentError("manifest must be a JSON object")
        try:
            layers = tuple(
                LayerDescriptor(
                    Digest.parse(entry["digest"]),
                    int(entry["size"]),
                    entry.get("mediaType", OCI_LAYER_MEDIA_TYPE),
                )
                for entry in doc["layers"]
            )
            return cls(str(doc["name"]), str(doc["tag"]), layers, bytes(raw))
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidArgumentError(f"invalid manifest: {exc}") from exc

    @cached_property
    def digest(self) -> Digest:
        return Digest.of(self.raw_bytes)

    @property
    def size_bytes(self) -> int:
        return sum(layer.size_bytes for layer in self.layers)


def compute_block_size(layer_size_bytes: int | float) -> int:
    """Block size for a layer of the given size, in bytes.

    Four size bands divide the layer into 256, 64 or 16 blocks, or keep it
    whole below 16 MiB. Banded sizes are rounded down to a whole MiB with a
    64 KiB floor, so an 8194.5 MiB layer gets 32 MiB blocks (257 of them).
    """
    if layer_size_bytes <= 0:
        raise InvalidArgumentError(f"layer size must be positive, got {layer_size_bytes}")
    if layer_size_bytes >= 1024 * MiB:
        raw = layer_size_bytes / 256
    elif layer_size_bytes >= 256 * MiB:
        raw = layer_size_bytes / 64
    elif layer_size_bytes >= 16 * MiB:
        raw = layer_size_bytes / 16
    else:
        return int(math.ceil(layer_size_bytes))
    return max(MIN_BLOCK_SIZE, int(raw // MiB) * MiB)


def block_count(layer_size_bytes: int, block_size_bytes: int) -> int:
    return -(-layer_size_bytes // block_size_bytes)


def merkle_levels(leaves: Sequence[bytes]) -> list[list[bytes]]:
    """All tree levels, leaves first. Odd levels duplicate their last node.

    A single leaf is hashed once more so the root never equals a leaf.
    """
    if not leaves:
        raise InvalidArgumentError("a Merkle tree needs at least one leaf")
    levels = [list(leaves)]
    if len(leaves) == 1:
        levels.append([_h(leaves[0])])
        return levels
    level = levels[0]
    while len(level) > 1:
        if len(level) % 2:
            level = level + [level[-1]]
        level = [_h(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        levels.append(level)
    return levels


def merkle_root(leaves: Sequence[bytes]) -> bytes:
    return merkle_levels(leaves)[-1][0]


def merkle_proof(leaves: Sequence[bytes], index: int) -> list[tuple[bytes, bool]]:
    """Sibling hashes from leaf to root; the flag is True if the sibling is on the right."""
    levels = merkle_levels(leaves)
    if len(leaves) == 1:
        return []
    proof = []
    for level in levels[:-1]:
        if len(level) % 2:
            level = level + [level[-1]]
        sibling = index ^ 1
        proof.append((level[sibling], sibling > index))
        index //= 2
    return proof


def root_from_proof(leaf: bytes, proof: Iterable[tuple[bytes, bool]], single: bool) -> bytes:
    if single:
        return _h(leaf)
    node = leaf
    for sibling, on_right in proof:
        node = _h(node + sibling) if on_right else _h(sibling + node)
    return node


@dataclass(frozen=True)
class BlockTable:
    layer_digest: Digest
    layer_size_bytes: int
    block_size_bytes: int
    block_hashes: tuple[Digest, ...]
    merkle_root: Digest

    @property
    def block_count(self) -> int:
        return len(self.block_hashes)

    def block_length(self, index: int) -> int:
        self._check_index(index)
        if index < self.block_count - 1:
            return self.block_size_bytes
        return self.layer_size_bytes - self.block_size_bytes * (self.block_count - 1)

    def block_range(self, index: int) -> tuple[int, int]:
        start = index * self.block_size_bytes
        return start, start + self.block_length(index)

    @cached_property
    def _levels(self) -> list[list[bytes]]:
        return merkle_levels([d.raw for d in self.block_hashes])

    def proof(self, index: int) -> list[tuple[bytes, bool]]:
        self._check_index(index)
        if self.block_count == 1:
            return []
        proof = []
        for level in self._levels[:-1]:
            sibling = index ^ 1
            if sibling >= len(level):
                sibling = index
            proof.append((level[sibling], sibling >= index))
            index //= 2
        return proof

    def handshake(self) -> tuple[Digest, int, int]:
        """What a peer advertises for this layer: (root, block size, block count)."""
        return self.merkle_root, self.block_size_bytes, self.block_count

    def _check_index(self, index: int) -> None:
        if not 0 <= index < self.block_count:
            raise InvalidArgumentError(f"block index {index} out of range 0..{self.block_count - 1}")

    def to_json(self) -> dict:
        return {
            "layer_digest": str(self.layer_digest),
            "layer_size": self.layer_size_bytes,
            "block_size": self.block_size_bytes,
            "block_hashes": [d.hex for d in self.block_hashes],
            "merkle_root": str(self.merkle_root),
        }

    @classmethod
    def from_json(cls, doc: dict) -> "BlockTable":
        return table_from_hashes(
            Digest.parse(doc["layer_digest"]),
            int(doc["layer_size"]),
            int(doc["block_size"]),
            [Digest(h) for h in doc["block_hashes"]],
            expected_root=Digest.parse(doc["merkle_root"]),
        )


def table_from_hashes(
    layer_digest: Digest,
    layer_size_bytes: int,
    block_size_bytes: int,
    block_hashes: Sequence[Digest],
    expected_root: Digest | None = None,
) -> BlockTable:
    """Assemble a table from already-known block hashes, recomputing the root."""
    if block_count(layer_size_bytes, block_size_bytes) != len(block_hashes):
        raise InvalidArgumentError("block hash count does not match layer and block size")
    root = Digest(merkle_root([d.raw for d in block_hashes]).hex())
    if expected_root is not None and root != expected_root:
        raise InvalidArgumentError("block hashes do not reproduce the advertised Merkle root")
    return BlockTable(layer_digest, layer_size_bytes, block_size_bytes, tuple(block_hashes), root)


def iter_blocks(payload: bytes, block_size_bytes: int) -> Iterator[bytes]:
    view = memoryview(payload)
    for start in range(0, len(payload), block_size_bytes):
        yield bytes(view[start : start + block_size_bytes])


def build_block_table(layer_bytes: bytes | BinaryIO) -> BlockTable:
    """Partition a payload into blocks, hash them and build the Merkle tree.

    Accepts either bytes or a readable binary stream (read in block-sized
    chunks, so large payloads never need to sit in memory at once).
    """
    if isinstance(layer_bytes, (bytes, bytearray, memoryview)):
        payload = bytes(layer_bytes)
        if not payload:
            raise InvalidArgumentError("cannot build a block table for an empty layer")
        size = compute_block_size(len(payload))
        hashes = [Digest(hashlib.sha256(b).hexdigest()) for b in iter_blocks(payload, size)]
        return table_from_hashes(Digest.of(payload), len(payload), size, hashes)
    return _build_from_stream(layer_bytes)


def _build_from_stream(stream: BinaryIO) -> BlockTable:
    stream.seek(0, 2)
    total = stream.tell()
    stream.seek(0)
    if total == 0:
        raise InvalidArgumentError("cannot build a block table for an empty layer")
    size = compute_block_size(total)
    whole = hashlib.sha256()
    hashes = []
    while chunk := stream.read(size):
        whole.update(chunk)
        hashes.append(Digest(hashlib.sha256(chunk).hexdigest()))
    return table_from_hashes(Digest(whole.hexdigest()), total, size, hashes)


def verify_block(block_bytes: bytes, index: int, table: BlockTable) -> bool:
    """True iff the block hashes to its leaf and the leaf's path reproduces the root."""
    table._check_index(index)
    leaf = _h(block_bytes)
    if leaf != table.block_hashes[index].raw:
        return False
    rebuilt = root_from_proof(leaf, table.proof(index), single=table.block_count == 1)
    return rebuilt == table.merkle_root.raw


class BlockStatus(str, enum.Enum):
    MISSING = "missing"
    PENDING = "pending"
    DOWNLOADING = "downloading"
    VERIFIED = "verified"


_ALLOWED = {
    BlockStatus.MISSING: {BlockStatus.PENDING},
    BlockStatus.PENDING: {BlockStatus.DOWNLOADING},
    BlockStatus.DOWNLOADING: {BlockStatus.VERIFIED, BlockStatus.PENDING},
    BlockStatus.VERIFIED: set(),
}


@dataclass
class BlockState:
    index: int
    status: BlockStatus = BlockStatus.MISSING
    retries: int = 0

    def advance(self, new: BlockStatus) -> None:
        if new not in _ALLOWED[self.status]:
            raise InvalidArgumentError(f"block {self.index}: illegal transition {self.status.value} -> {new.value}")
        self.status = new
