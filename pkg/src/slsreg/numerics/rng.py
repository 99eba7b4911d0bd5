"""Named, splittable random streams.

Each stream is derived from ``(master_seed, crc32(name))`` so that drawing from
one stream (say, dropout) never shifts another (say, minibatch shuffling).
"""

from __future__ import annotations

import zlib

import numpy as np


class RngStreams:
    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        self.seed = int(seed)
        self._path = path
        self._streams: dict[str, np.random.Generator] = {}

    def _key(self, name: str) -> tuple[int, ...]:
        return self._path + (zlib.crc32(name.encode("utf-8")),)

    def get(self, name: str) -> np.random.Generator:
        if name not in self._streams:
            seq = np.random.SeedSequence(self.seed, spawn_key=self._key(name))
            self._streams[name] = np.random.default_rng(seq)
        return self._streams[name]

    def split(self, name: str) -> "RngStreams":
        return RngStreams(self.seed, self._key(name))

    def __getitem__(self, name: str) -> np.random.Generator:
        return self.get(name)
