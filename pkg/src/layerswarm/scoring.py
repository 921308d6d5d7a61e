"""Per-peer runtime metrics, utility scoring and softmax peer selection.

Each client keeps one :class:`ScoringState`. Observed block transfer speeds
feed exponentially weighted sliding windows; together with a popularity
index over which peers hold which images these produce a utility per peer,
and peers are drawn from a softmax over utilities whose temperature decays
as ``tau0 / sqrt(t)``.
"""

from __future__ import annotations

import csv
import io
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidArgumentError, InvariantViolationError, NoCandidatesError, NoDataError

NEUTRAL_NET_SCORE = 50.0


@dataclass(frozen=True, order=True)
class PeerId:
    id: str
    lan_id: str = ""

    def __str__(self) -> str:
        return self.id


@dataclass
class SpeedWindow:
    """Last ``capacity`` speed samples as (slot, bytes/second), oldest first.

    Several samples reported for the same slot are merged into their mean,
    keeping slots strictly increasing.
    """

    capacity: int
    samples: deque = field(default_factory=deque)
    _counts: deque = field(default_factory=deque, repr=False)

    def __post_init__(self) -> None:
        if self.capacity < 1:
            raise InvalidArgumentError("window capacity must be at least 1")

    def add(self, slot: int, speed: float) -> None:
        if self.samples and slot < self.samples[-1][0]:
            raise InvalidArgumentError(f"slot {slot} precedes the newest sample")
        if self.samples and slot == self.samples[-1][0]:
            _, old = self.samples[-1]
            n = self._counts[-1]
            self.samples[-1] = (slot, (old * n + speed) / (n + 1))
            self._counts[-1] = n + 1
            return
        self.samples.append((slot, float(speed)))
        self._counts.append(1)
        while len(self.samples) > self.capacity:
            self.samples.popleft()
            self._counts.popleft()

    def replace_latest(self, slot: int, value: float) -> None:
        if self.samples and self.samples[-1][0] == slot:
            self.samples[-1] = (slot, float(value))
        else:
            self.add(slot, value)

    def __len__(self) -> int:
        return len(self.samples)

    def speeds(self) -> list[float]:
        return [s for _, s in self.samples]


def smoothed_speed(window: SpeedWindow) -> float:
    """Weighted mean of the window with weight ``e^(L - t')`` at position t'.

    Positions run 1..n oldest to newest. Only weight ratios matter, so the
    exponent is shifted to start at zero to stay finite for long windows.
    """
    if not window.samples:
        raise NoDataError("speed window is empty")
    num = den = 0.0
    for position, (_, speed) in enumerate(window.samples):
        weight = math.exp(-position)
        num += speed * weight
        den += weight
    return num / den


@dataclass
class ContentIndex:
    """Which images each known peer holds, and which layers each image has."""

    images_of: dict[PeerId, set[str]] = field(default_factory=dict)
    layers_of: dict[str, set[str]] = field(default_factory=dict)

    @property
    def peers(self) -> set[PeerId]:
        return set(self.images_of)

    def add_image(self, image: str, layers: Iterable[str]) -> None:
        self.layers_of.setdefault(image, set()).update(layers)

    def set_holding(self, peer: PeerId, image: str) -> None:
        if image not in self.layers_of:
            raise InvalidArgumentError(f"image {image!r} has no registered layers")
        self.images_of.setdefault(peer, set()).add(image)

    def drop_peer(self, peer: PeerId) -> None:
        self.images_of.pop(peer, None)


def layer_popularity(layer: str, index: ContentIndex) -> float:
    """Fraction of known (peer, image) pairs whose image contains ``layer``."""
    total = hits = 0
    for images in index.images_of.values():
        for image in images:
            total += 1
            if layer in index.layers_of.get(image, ()):
                hits += 1
    if total == 0:
        raise NoDataError("content index is empty")
    return hits / total


def popularity_score(peer: PeerId, index: ContentIndex, lam: float) -> float:
    pairs = sorted(
        (image, layer) for image in index.images_of.get(peer, ()) for layer in index.layers_of.get(image, ())
    )
    if not pairs:
        raise NoDataError(f"peer {peer} holds no known content")
    cache: dict[str, float] = {}
    acc = 0.0
    for _, layer in pairs:
        if layer not in cache:
            cache[layer] = layer_popularity(layer, index)
        acc += math.exp(-lam * cache[layer])
    return 100.0 * (1.0 - acc / len(pairs))


@dataclass(frozen=True)
class ScoringWeights:
    alpha: float = 0.5
    beta: float = 0.3
    gamma: float = 0.2
    lam: float = 1.0
    window_len: int = 16
    tau0: float = 20.0

    def __post_init__(self) -> None:
        if min(self.alpha, self.beta, self.gamma) < 0:
            raise InvalidArgumentError("weights must be non-negative")
        if self.alpha + self.beta + self.gamma <= 0:
            raise InvalidArgumentError("at least one weight must be positive")
        if self.lam <= 0 or self.tau0 <= 0:
            raise InvalidArgumentError("lambda and tau0 must be positive")
        if self.window_len < 1:
            raise InvalidArgumentError("window length must be at least 1")


@dataclass(frozen=True)
class PeerScore:
    net: float
    pop: float
    cst: float
    utility: float


def utility(weights: ScoringWeights, net: float, pop: float, cst: float) -> float:
    return weights.alpha * net + weights.beta * pop + weights.gamma * cst


def temperature(t: int, tau0: float) -> float:
    if t < 1:
        raise InvalidArgumentError("round index t starts at 1")
    return tau0 / math.sqrt(t)


def softmax(utilities: Sequence[float], tau: float) -> np.ndarray:
    u = np.asarray(utilities, dtype=float) / tau
    u -= u.max()
    e = np.exp(u)
    return e / e.sum()


def select_peer(
    candidates: Sequence[tuple[Hashable, float]], t: int, tau0: float, rng: np.random.Generator
) -> Hashable:
    if not candidates:
        raise NoCandidatesError("no peers to select from")
    if len(candidates) == 1:
        return candidates[0][0]
    probs = softmax([u for _, u in candidates], temperature(t, tau0))
    return candidates[int(rng.choice(len(candidates), p=probs))][0]


def sample_subset(
    candidates: Sequence[tuple[Hashable, float]], k: int, tau: float, rng: np.random.Generator
) -> list[tuple[Hashable, float]]:
    """Softmax-sample ``k`` distinct candidates, drawing one at a time."""
    pool = list(candidates)
    chosen = []
    while pool and len(chosen) < k:
        if len(pool) == 1:
            chosen.append(pool.pop())
            break
        probs = softmax([u for _, u in pool], tau)
        chosen.append(pool.pop(int(rng.choice(len(pool), p=probs))))
    return chosen


@dataclass
class RegretLedger:
    rounds: list[tuple[int, float, float]] = field(default_factory=list)
    cumulative: float = 0.0

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["t", "chosen_u", "best_u", "cumulative"])
        running = 0.0
        for t, chosen, best in self.rounds:
            running += best - chosen
            writer.writerow([t, repr(chosen), repr(best), repr(running)])
        return buf.getvalue()


def record_round(ledger: RegretLedger, chosen_u: float, best_u: float, tol: float = 1e-9) -> float:
    if best_u < chosen_u - tol:
        raise InvariantViolationError(f"best utility {best_u} below chosen utility {chosen_u}")
    regret = max(0.0, best_u - chosen_u)
    ledger.rounds.append((len(ledger.rounds) + 1, chosen_u, best_u))
    ledger.cumulative += regret
    return regret


CustomScorer = Callable[[PeerId], float]


class ScoringState:
    """Scoring state kept by one client: speed windows, content index, weights."""

    def __init__(self, weights: ScoringWeights | None = None, custom: CustomScorer | None = None):
        self.weights = weights or ScoringWeights()
        self.custom = custom
        self.windows: dict[PeerId, SpeedWindow] = {}
        self.global_window = SpeedWindow(self.weights.window_len)
        self.index = ContentIndex()
        self.ledger = RegretLedger()
        self.round = 0
        self.slot = 0

    def record_speed(self, peer: PeerId, speed: float, slot: int) -> None:
        if speed < 0:
            raise InvalidArgumentError("speed must be non-negative")
        window = self.windows.get(peer)
        if window is None:
            window = self.windows[peer] = SpeedWindow(self.weights.window_len)
        window.add(slot, speed)
        mean = sum(smoothed_speed(w) for w in self.windows.values()) / len(self.windows)
        self.global_window.replace_latest(slot, mean)

    def global_speed(self) -> float:
        return smoothed_speed(self.global_window)

    def network_scores(self, candidates: Iterable[PeerId], client_lan: str) -> dict[PeerId, float]:
        """Network score for each candidate in [0, 100].

        Same-LAN peers get 100. Remote peers are min-max rescaled by
        (smoothed speed - global speed), with the range spanning every
        observed candidate, local ones included, so a remote peer reaches
        100 only by beating every local peer. Remote peers with no
        observations get the neutral midpoint.
        """
        candidates = list(candidates)
        raw: dict[PeerId, float] = {}
        for peer in candidates:
            if self.windows.get(peer):
                raw[peer] = smoothed_speed(self.windows[peer]) - self.global_speed()
        scaled = rescale(raw)
        scores: dict[PeerId, float] = {}
        for peer in candidates:
            if peer.lan_id == client_lan:
                scores[peer] = 100.0
            else:
                scores[peer] = scaled.get(peer, NEUTRAL_NET_SCORE)
        return scores

    def network_score(self, peer: PeerId, client_lan: str, candidates: Iterable[PeerId] | None = None) -> float:
        if peer.lan_id == client_lan:
            return 100.0
        if not self.windows.get(peer):
            raise NoDataError(f"no speed samples for remote peer {peer}")
        pool = set(candidates or ()) | {peer}
        return self.network_scores(pool, client_lan)[peer]

    def popularity(self, peer: PeerId) -> float:
        try:
            return popularity_score(peer, self.index, self.weights.lam)
        except NoDataError:
            return 0.0

    def score(self, candidates: Sequence[PeerId], client_lan: str) -> dict[PeerId, PeerScore]:
        nets = self.network_scores(candidates, client_lan)
        out = {}
        for peer in candidates:
            pop = self.popularity(peer)
            cst = min(100.0, max(0.0, self.custom(peer))) if self.custom else 0.0
            out[peer] = PeerScore(nets[peer], pop, cst, utility(self.weights, nets[peer], pop, cst))
        return out

    def next_slot(self) -> int:
        """Advance the window slot; several concurrent downloads share one clock."""
        self.slot += 1
        return self.slot

    def next_round(self) -> int:
        self.round += 1
        return self.round


def rescale(raw: Mapping[PeerId, float]) -> dict[PeerId, float]:
    if not raw:
        return {}
    lo, hi = min(raw.values()), max(raw.values())
    if hi - lo <= 1e-12 * max(1.0, abs(hi)):
        return {p: NEUTRAL_NET_SCORE for p in raw}
    return {p: min(100.0, max(0.0, 100.0 * (v - lo) / (hi - lo))) for p, v in raw.items()}
