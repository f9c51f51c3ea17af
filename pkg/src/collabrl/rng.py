"""Counter-based random streams.

Every stochastic outcome in an episode is a pure function of
``(episode seed, key path)``. Forking an episode for counterfactual replay is
then a matter of copying a few integer counters, and two branches that share a
key path see the same draw (common random numbers).
"""

from __future__ import annotations

import zlib

_MASK = (1 << 64) - 1
_TWO_POW_53 = float(1 << 53)


def _splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


_TAG_CACHE: dict[str, int] = {}


def tag_id(tag: str) -> int:
    # crc32 is stable across processes, unlike hash().
    v = _TAG_CACHE.get(tag)
    if v is None:
        v = zlib.crc32(tag.encode("utf-8"))
        _TAG_CACHE[tag] = v
    return v


def mix(seed: int, *keys: int | str) -> int:
    h = _splitmix64(seed & _MASK)
    for k in keys:
        if isinstance(k, str):
            k = tag_id(k)
        h = _splitmix64(h ^ (k & _MASK))
    return h


def keyed_uniform(seed: int, *keys: int | str) -> float:
    """Uniform draw in [0, 1) addressed by ``seed`` and ``keys``."""
    return (mix(seed, *keys) >> 11) / _TWO_POW_53


class KeyedStream:
    """A sequential view over keyed draws: the n-th call returns draw ``n``.

    Exposes ``random()`` so it can stand in for ``random.Random`` or a numpy
    ``Generator`` where only uniform draws are needed.
    """

    __slots__ = ("seed", "key", "counter")

    def __init__(self, seed: int, key: tuple = (), counter: int = 0):
        self.seed = int(seed)
        self.key = tuple(key)
        self.counter = counter

    def random(self) -> float:
        u = keyed_uniform(self.seed, *self.key, self.counter)
        self.counter += 1
        return u

    def fork(self) -> "KeyedStream":
        return KeyedStream(self.seed, self.key, self.counter)


class RoleStreams:
    """Per-role sampling streams for one episode.

    Each role's n-th decision consumes the n-th draw of its own stream, so a
    replayed suffix reuses exactly the draws the original suffix used.
    """

    __slots__ = ("seed", "counters")

    def __init__(self, seed: int, counters: dict[str, int] | None = None):
        self.seed = int(seed)
        self.counters = dict(counters) if counters else {}

    def draw(self, role: str) -> float:
        n = self.counters.get(role, 0)
        self.counters[role] = n + 1
        return keyed_uniform(self.seed, "policy", role, n)

    def stream(self, role: str) -> "_RoleView":
        return _RoleView(self, role)

    def fork(self) -> "RoleStreams":
        return RoleStreams(self.seed, self.counters)


class _RoleView:
    __slots__ = ("_owner", "_role")

    def __init__(self, owner: RoleStreams, role: str):
        self._owner = owner
        self._role = role

    def random(self) -> float:
        return self._owner.draw(self._role)
