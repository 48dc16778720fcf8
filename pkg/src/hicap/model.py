"""Scenario configuration and random generation of the ground truth.

A scenario is a set of ``c`` parallel sub-channels.  Every sub-channel hosts a
length-``n`` signal split into ``u = n / s`` resource blocks; each active user
picks one block and fills ``k_s`` of its ``s`` taps with a random channel.
"""
from __future__ import annotations

import dataclasses
import math
from dataclasses import dataclass, field

import numpy as np

#: QPSK constellation, unit modulus.
QPSK = np.array([1 + 1j, -1 + 1j, -1 - 1j, 1 - 1j]) / np.sqrt(2)

# RNG stream identifiers, see :func:`derive_rng`.
STREAM_PARTITION = 0
STREAM_ACTIVITY = 1
STREAM_CHANNEL = 2
STREAM_DATA = 3
STREAM_NOISE = 4

_DIMENSION_FIELDS = {"n", "s", "k_s", "p_u", "birthday_pool"}
DETECTOR_MODES = ("topk", "threshold")
BIRTHDAY_POOLS = ("u", "n")


class ConfigError(ValueError):
    """Invalid scenario parameters."""


def derive_rng(seed: int, *key: int) -> np.random.Generator:
    """Independent generator for ``(seed, *key)``.

    Keys are typically ``(trial, stream)``; generators for different keys are
    statistically independent and do not depend on evaluation order, which is
    what makes parallel trial execution reproducible.
    """
    ss = np.random.SeedSequence(seed, spawn_key=tuple(int(k) for k in key))
    return np.random.Generator(np.random.PCG64(ss))


def select_ku(pool_size: int, p_u: float) -> int:
    """Largest ``k`` with ``prod_{i=1..k} (1 - i/pool_size) >= 1 - p_u``."""
    if not 0.0 < p_u < 1.0:
        raise ConfigError(f"p_u must lie in (0, 1), got {p_u}")
    if pool_size < 2:
        raise ConfigError(f"pool_size must be >= 2, got {pool_size}")
    k, prod = 0, 1.0
    while k < pool_size:
        nxt = prod * (1.0 - (k + 1) / pool_size)
        if nxt < 1.0 - p_u:
            break
        k, prod = k + 1, nxt
    return k


def birthday_no_collision(k: int, pool_size: int) -> float:
    """Probability that ``k`` uniform picks from ``pool_size`` items are distinct."""
    return float(np.prod(1.0 - np.arange(1, k) / pool_size)) if k > 1 else 1.0


def _is_power_of_two(v: int) -> bool:
    return v >= 1 and (v & (v - 1)) == 0


def derive_dimensions(n, s, k_s, p_u, birthday_pool="u", kbar_u=None):
    """Return ``(u, kbar_u, m, c)`` for a scenario.

    ``kbar_u`` is sized by :func:`select_ku` over the chosen pool (``u`` blocks
    or the full dimension ``n``) unless given explicitly.  The measurement count
    is ``m = 2**floor(log2(kbar_u * k_s))`` and ``c = n // m``.
    """
    if not _is_power_of_two(n):
        raise ConfigError(f"n must be a power of two, got {n}")
    if s < 1 or n % s:
        raise ConfigError(f"block length s={s} must divide n={n}")
    if birthday_pool not in BIRTHDAY_POOLS:
        raise ConfigError(f"birthday_pool must be one of {BIRTHDAY_POOLS}")
    u = n // s
    if kbar_u is None:
        pool = u if birthday_pool == "u" else n
        kbar_u = select_ku(pool, p_u)
    if kbar_u < 1:
        raise ConfigError(f"p_u={p_u} admits no user per sub-channel")
    m = 2 ** int(math.floor(math.log2(kbar_u * k_s)))
    if m > n:
        raise ConfigError(f"m={m} exceeds n={n}")
    return u, kbar_u, m, n // m


@dataclass(frozen=True)
class SystemConfig:
    """All scalar parameters of one scenario.

    ``u``, ``kbar_u``, ``m`` and ``c`` are derived when left as ``None``.
    ``snr_db=None`` means noise-free.
    """

    n: int = 1024
    s: int = 8
    k_s: int = 4
    t: int = 100
    p_u: float = 0.1
    snr_db: float | None = None
    seed: int = 0
    detector_mode: str = "topk"
    xi: float = 0.0
    iterations: int = 1
    birthday_pool: str = "u"
    kbar_u: int | None = None
    m: int | None = None
    u: int = field(default=None)  # type: ignore[assignment]
    c: int = field(default=None)  # type: ignore[assignment]

    def __post_init__(self):
        u, kbar_u, m, _ = derive_dimensions(
            self.n, self.s, self.k_s, self.p_u, self.birthday_pool, self.kbar_u
        )
        if self.m is not None:
            m = int(self.m)
        if not 1 <= m <= self.n:
            raise ConfigError(f"m={m} must lie in [1, n={self.n}]")
        object.__setattr__(self, "u", u)
        object.__setattr__(self, "kbar_u", int(kbar_u))
        object.__setattr__(self, "m", int(m))
        object.__setattr__(self, "c", self.n // m)

        if not 1 <= self.k_s <= self.s:
            raise ConfigError(f"need 1 <= k_s <= s, got k_s={self.k_s}, s={self.s}")
        if not 1 <= self.kbar_u <= self.u:
            raise ConfigError(f"need 1 <= kbar_u <= u, got {self.kbar_u}")
        if self.t < 1:
            raise ConfigError("t must be >= 1")
        if not 0.0 < self.p_u < 1.0:
            raise ConfigError("p_u must lie in (0, 1)")
        if self.detector_mode not in DETECTOR_MODES:
            raise ConfigError(f"detector_mode must be one of {DETECTOR_MODES}")
        if self.xi < 0:
            raise ConfigError("xi must be nonnegative")
        if self.iterations < 1:
            raise ConfigError("iterations must be >= 1")
        if self.snr_db is not None and math.isinf(self.snr_db) and self.snr_db > 0:
            object.__setattr__(self, "snr_db", None)
        if not 0 <= self.seed < 2**64:
            raise ConfigError("seed must be a 64-bit unsigned integer")

    @property
    def noise_free(self) -> bool:
        return self.snr_db is None

    @property
    def sigma2(self) -> float:
        """Noise variance with ``SNR = 1 / sigma2``; zero when noise-free."""
        return 0.0 if self.snr_db is None else 10.0 ** (-self.snr_db / 10.0)

    def evolve(self, **changes) -> "SystemConfig":
        """Copy with ``changes`` applied.

        Changing a dimension parameter re-derives ``kbar_u`` and ``m`` unless
        they are passed explicitly; other changes keep them as they are.
        """
        params = {f.name: getattr(self, f.name) for f in dataclasses.fields(self)}
        del params["u"], params["c"]
        touched = changes.keys() & _DIMENSION_FIELDS
        if touched and "kbar_u" not in changes:
            params["kbar_u"] = None
        if (touched or "kbar_u" in changes) and "m" not in changes:
            params["m"] = None
        params.update(changes)
        return SystemConfig(**params)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


@dataclass
class SubchannelActivity:
    """Users of one sub-channel: their ids, chosen blocks and in-block taps."""

    user_ids: np.ndarray
    blocks: np.ndarray
    inblock: np.ndarray  # (load, k_s), sorted rows

    @property
    def load(self) -> int:
        return len(self.blocks)

    @property
    def active_blocks(self) -> np.ndarray:
        return np.unique(self.blocks)

    @property
    def collided_blocks(self) -> frozenset:
        vals, counts = np.unique(self.blocks, return_counts=True)
        return frozenset(int(b) for b in vals[counts >= 2])

    @property
    def noncollided(self) -> np.ndarray:
        """Boolean mask over users: alone on their block."""
        _, inv, counts = np.unique(self.blocks, return_inverse=True, return_counts=True)
        return counts[inv] == 1


@dataclass
class ActivityPattern:
    subchannels: list[SubchannelActivity]

    @property
    def loads(self) -> np.ndarray:
        return np.array([sc.load for sc in self.subchannels])

    @property
    def collided_blocks(self) -> list[frozenset]:
        return [sc.collided_blocks for sc in self.subchannels]


@dataclass
class HierSparseSignal:
    """Length-``n`` vector with ``u`` blocks of length ``s``; nonzero only on
    ``inblock_support`` of the blocks in ``block_support``."""

    values: np.ndarray
    s: int
    block_support: frozenset
    inblock_support: dict

    @property
    def support(self) -> np.ndarray:
        idx = [b * self.s + np.array(sorted(self.inblock_support[b]), dtype=int)
               for b in sorted(self.block_support)]
        return np.concatenate(idx) if idx else np.zeros(0, dtype=int)


@dataclass
class DataSymbols:
    """Per sub-channel QPSK symbols for slots ``1..t-1``.

    ``blocks[j]`` lists the active blocks of sub-channel ``j`` (sorted) and
    ``symbols[j]`` has shape ``(t - 1, len(blocks[j]))``.  Slot 0 is the pilot
    and carries no data.
    """

    blocks: list[np.ndarray]
    symbols: list[np.ndarray]

    def slot_vector(self, j: int, slot: int, u: int) -> np.ndarray:
        """Per-block multipliers of sub-channel ``j`` in ``slot`` (length ``u``)."""
        d = np.ones(u, dtype=complex)
        if slot > 0:
            d[self.blocks[j]] = self.symbols[j][slot - 1]
        return d


def draw_activity(config: SystemConfig, rng: np.random.Generator) -> ActivityPattern:
    """Exactly ``kbar_u`` users per sub-channel, blocks drawn with replacement."""
    c, k, u, s, k_s = config.c, config.kbar_u, config.u, config.s, config.k_s
    blocks = rng.integers(0, u, size=(c, k))
    inblock = np.sort(np.argsort(rng.random((c, k, s)), axis=-1)[..., :k_s], axis=-1)
    subs = [
        SubchannelActivity(
            user_ids=np.arange(j * k, (j + 1) * k),
            blocks=blocks[j],
            inblock=inblock[j],
        )
        for j in range(c)
    ]
    return ActivityPattern(subs)


def draw_channels(pattern: ActivityPattern, config: SystemConfig,
                  rng: np.random.Generator) -> list[HierSparseSignal]:
    """Circular Gaussian taps with variance ``1/k_s``; colliding users add up."""
    n, s, k_s = config.n, config.s, config.k_s
    out = []
    for sc in pattern.subchannels:
        taps = (rng.standard_normal((sc.load, k_s))
                + 1j * rng.standard_normal((sc.load, k_s))) * np.sqrt(0.5 / k_s)
        values = np.zeros(n, dtype=complex)
        inblock: dict[int, set] = {}
        for b, idx, h in zip(sc.blocks, sc.inblock, taps):
            b = int(b)
            np.add.at(values, b * s + idx, h)
            inblock.setdefault(b, set()).update(int(i) for i in idx)
        out.append(HierSparseSignal(
            values=values,
            s=s,
            block_support=frozenset(inblock),
            inblock_support={b: frozenset(v) for b, v in inblock.items()},
        ))
    return out


def draw_data(pattern: ActivityPattern, config: SystemConfig,
              rng: np.random.Generator) -> DataSymbols:
    blocks, symbols = [], []
    for sc in pattern.subchannels:
        active = sc.active_blocks
        blocks.append(active)
        symbols.append(QPSK[rng.integers(0, 4, size=(config.t - 1, len(active)))])
    return DataSymbols(blocks, symbols)
