"""Weighted multi-source frame sampling and batch assembly.

Sampling probabilities are p_i = size_i * factor_i / sum_j size_j * factor_j.
Draws use a counter-based generator (splitmix64 finalizer over
(seed, counter)), so the sampler state is exactly (seed, counter): it is
reproducible, restart-safe, and slicable across workers by counter range.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .episodes import Episode, NormStats


class EmptySpec(ValueError):
    pass


class NonPositiveFactor(ValueError):
    pass


class HorizonUnsatisfiable(ValueError):
    pass


@dataclass(frozen=True)
class SourceEntry:
    source: str
    size: int
    factor: float


@dataclass(frozen=True)
class MixSpec:
    entries: tuple[SourceEntry, ...]
    seed: int
    probs: np.ndarray = field(compare=False, default=None)

    def __post_init__(self):
        weights = np.array([e.size * e.factor for e in self.entries])
        object.__setattr__(self, "probs", weights / weights.sum())


def build_mix(entries, seed: int = 0) -> MixSpec:
    """Normalize per-source (size, factor) pairs into sampling probabilities.

    Entries are ordered by source id so the probability vector is
    deterministic regardless of input order.
    """
    entries = list(entries)
    if not entries:
        raise EmptySpec("at least one source is required")
    norm = []
    for e in entries:
        if isinstance(e, SourceEntry):
            src, size, factor = e.source, e.size, e.factor
        else:
            src, size, factor = e
        if factor <= 0:
            raise NonPositiveFactor(f"source {src!r}: factor {factor} must be > 0")
        if size < 1:
            raise ValueError(f"source {src!r}: size {size} must be >= 1")
        norm.append(SourceEntry(str(src), int(size), float(factor)))
    norm.sort(key=lambda e: e.source)
    if len({e.source for e in norm}) != len(norm):
        raise ValueError("duplicate source ids")
    return MixSpec(entries=tuple(norm), seed=int(seed))


_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):  # uint64 wrapping is the algorithm
        x = (x + _GOLDEN).astype(np.uint64)
        x = (x ^ (x >> np.uint64(30))) * _MIX1
        x = (x ^ (x >> np.uint64(27))) * _MIX2
        return x ^ (x >> np.uint64(31))


def counter_uniform(seed: int, counters: np.ndarray) -> np.ndarray:
    """Deterministic uniforms in [0, 1) from (seed, counter) pairs."""
    c = np.asarray(counters, dtype=np.uint64)
    h = _splitmix64(_splitmix64(np.uint64(seed)) ^ _splitmix64(c))
    return (h >> np.uint64(11)).astype(np.float64) * (1.0 / (1 << 53))


@dataclass(frozen=True)
class SamplerState:
    seed: int
    counter: int = 0


def next_sample(spec: MixSpec, state: SamplerState) -> tuple[str, int, SamplerState]:
    """Draw one (source id, frame index) pair; returns the advanced state."""
    u = counter_uniform(spec.seed, np.array([2 * state.counter, 2 * state.counter + 1],
                                            dtype=np.uint64))
    cum = np.cumsum(spec.probs)
    si = int(np.searchsorted(cum, u[0], side="right"))
    si = min(si, len(spec.entries) - 1)
    entry = spec.entries[si]
    idx = min(int(u[1] * entry.size), entry.size - 1)
    return entry.source, idx, SamplerState(state.seed, state.counter + 1)


def sample_counts(spec: MixSpec, n: int, start_counter: int = 0) -> dict[str, int]:
    """Vectorized frequency count of n draws (used by statistical checks)."""
    counters = np.arange(start_counter, start_counter + n, dtype=np.uint64) * np.uint64(2)
    u = counter_uniform(spec.seed, counters)
    cum = np.cumsum(spec.probs)
    idx = np.minimum(np.searchsorted(cum, u, side="right"), len(spec.entries) - 1)
    return {e.source: int(np.sum(idx == i)) for i, e in enumerate(spec.entries)}


@dataclass
class Batch:
    images: np.ndarray       # (B, 240, 320, 3) u8
    tokens: np.ndarray       # (B, T) int32 hash-token ids
    state: np.ndarray        # (B, 53) f32, normalized
    actions: np.ndarray      # (B, H*53) f32, normalized
    domains: np.ndarray      # (B,) u8: 0 human, 1 robot
    instructions: list[str]


class BatchAssembler:
    """Draws frames per the mix spec and packs training batches.

    A draw is valid when its frame still has `horizon` successors inside
    the same episode; invalid draws are rejected and redrawn (each draw
    consumes one counter, preserving determinism).
    """

    def __init__(self, spec: MixSpec, episodes_by_source: dict[str, list[Episode]],
                 stats: NormStats, horizon: int, tokenizer, max_tokens: int):
        self.spec = spec
        self.stats = stats
        self.horizon = int(horizon)
        self.tokenizer = tokenizer
        self.max_tokens = int(max_tokens)
        self._index: dict[str, list[tuple[Episode, int]]] = {}
        for entry in spec.entries:
            eps = episodes_by_source.get(entry.source)
            if not eps:
                raise EmptySpec(f"no episodes for source {entry.source!r}")
            flat = []
            for ep in eps:
                if len(ep.frames) < self.horizon + 1:
                    raise HorizonUnsatisfiable(
                        f"episode in {entry.source!r} has {len(ep.frames)} frames, "
                        f"needs >= {self.horizon + 1}"
                    )
                flat.extend((ep, k) for k in range(len(ep.frames)))
            if entry.size != len(flat):
                raise ValueError(
                    f"source {entry.source!r}: spec size {entry.size} != {len(flat)} frames"
                )
            self._index[entry.source] = flat

    def assemble(self, batch_size: int, state: SamplerState) -> tuple[Batch, SamplerState]:
        H = self.horizon
        picked = []
        while len(picked) < batch_size:
            source, idx, state = next_sample(self.spec, state)
            ep, k = self._index[source][idx]
            if k + H < len(ep.frames):
                picked.append((ep, k))

        images = np.zeros((batch_size, 240, 320, 3), dtype=np.uint8)
        tokens = np.zeros((batch_size, self.max_tokens), dtype=np.int32)
        states = np.zeros((batch_size, 53), dtype=np.float32)
        actions = np.zeros((batch_size, H * 53), dtype=np.float32)
        domains = np.zeros(batch_size, dtype=np.uint8)
        instructions = []
        for b, (ep, k) in enumerate(picked):
            fr = ep.frames[k]
            if ep.images is not None:
                images[b] = ep.images[k]
            tokens[b] = self.tokenizer(fr.instruction, self.max_tokens)
            states[b] = self.stats.normalize(fr.state_vector())
            chunk = np.stack([ep.frames[k + j + 1].state_vector() for j in range(H)])
            actions[b] = self.stats.normalize(chunk).reshape(-1)
            domains[b] = 0 if fr.embodiment == "human" else 1
            instructions.append(fr.instruction)
        return Batch(images, tokens, states, actions, domains, instructions), state
