"""Counter-based Gaussian noise addressed by (seed, time step, path block).

Every random number a simulation consumes is a pure function of
``(base_seed, step_index, path_index)``: the Philox key is the seed and the
high counter words encode the step and the block of ``BLOCK`` paths. Any
subset of paths can therefore be regenerated in any order, on any thread,
and two simulations sharing a seed see identical increments.
"""

from dataclasses import dataclass

import numpy as np


BLOCK = 1024
_KEY_MASK = (1 << 128) - 1


@dataclass(frozen=True)
class NoiseStream:
    """Per-step standard normals of width ``width`` plus one uniform per path.

    Attributes:
        base_seed: 64-bit seed; larger ints are reduced modulo 2**128.
        width: number of Wiener components driven per step (N + M).
    """

    base_seed: int
    width: int

    def generator(self, step_index: int, block_index: int) -> np.random.Generator:
        counter = (int(step_index) << 192) | (int(block_index) << 128)
        return np.random.Generator(np.random.Philox(key=int(self.base_seed) & _KEY_MASK, counter=counter))

    def block(self, step_index: int, block_index: int) -> tuple[np.ndarray, np.ndarray]:
        """Normals ``(BLOCK, width)`` and uniforms ``(BLOCK,)`` for one step.

        The full block is always drawn so a path's numbers never depend on
        how many neighbours were requested with it.
        """
        gen = self.generator(step_index, block_index)
        normals = gen.standard_normal((BLOCK, self.width))
        uniforms = gen.random(BLOCK)
        return normals, uniforms


def group_by_block(path_indices: np.ndarray) -> list[tuple[int, np.ndarray, np.ndarray]]:
    """Split sorted path indices into ``(block_index, rows, positions)`` groups.

    ``rows`` index into the block draw, ``positions`` into ``path_indices``.
    """
    path_indices = np.asarray(path_indices, dtype=np.int64)
    blocks = path_indices // BLOCK
    groups = []
    for block_index in np.unique(blocks):
        positions = np.flatnonzero(blocks == block_index)
        groups.append((int(block_index), path_indices[positions] % BLOCK, positions))
    return groups
