"""Flat parameter vectors with named blocks."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ParameterLayout:
    """Maps named blocks to index ranges of a flat parameter vector.

    Blocks appear in vector order. By convention the latent/dual block
    (named ``z`` unless stated otherwise) is last, so the leading
    coordinates form the beta side.
    """

    blocks: tuple[tuple[str, int], ...]
    z_block: str = "z"

    def __post_init__(self):
        names = [n for n, _ in self.blocks]
        if len(set(names)) != len(names):
            raise ValueError("duplicate block names in layout")
        if self.z_block not in names:
            raise ValueError(f"layout has no block named {self.z_block!r}")
        if names[-1] != self.z_block:
            raise ValueError("z block must be the last layout block")
        if any(size < 0 for _, size in self.blocks):
            raise ValueError("block sizes must be nonnegative")

    @property
    def dim(self) -> int:
        return sum(size for _, size in self.blocks)

    @property
    def dim_z(self) -> int:
        return dict(self.blocks)[self.z_block]

    @property
    def dim_beta(self) -> int:
        return self.dim - self.dim_z

    def slices(self) -> dict[str, slice]:
        out, start = {}, 0
        for name, size in self.blocks:
            out[name] = slice(start, start + size)
            start += size
        return out

    def block_slice(self, name: str) -> slice:
        return self.slices()[name]

    def split(self, vec: np.ndarray) -> dict[str, np.ndarray]:
        vec = np.asarray(vec)
        if vec.shape[-1] != self.dim:
            raise ValueError(f"vector has dim {vec.shape[-1]}, layout needs {self.dim}")
        return {name: vec[..., sl] for name, sl in self.slices().items()}

    def split_beta_z(self, vec: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        vec = np.asarray(vec)
        return vec[..., : self.dim_beta], vec[..., self.dim_beta :]

    def join(self, parts: dict[str, np.ndarray]) -> np.ndarray:
        return np.concatenate([np.asarray(parts[name], dtype=float).ravel() for name, _ in self.blocks])

    def coordinate_names(self) -> list[str]:
        names = []
        for name, size in self.blocks:
            if size == 1:
                names.append(name)
            else:
                names.extend(f"{name}_{i}" for i in range(size))
        return names

    def validate_partition(self) -> bool:
        """True iff block ranges partition [0, dim)."""
        covered = sorted((sl.start, sl.stop) for sl in self.slices().values())
        pos = 0
        for start, stop in covered:
            if start != pos:
                return False
            pos = stop
        return pos == self.dim
