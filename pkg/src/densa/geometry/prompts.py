""" Point prompts and point grids. """

from dataclasses import dataclass
from typing import Iterator, Sequence

import numpy as np


@dataclass(frozen=True)
class PointPrompt:
    """
    Candidate location for the mask decoder.

    Parameters
    ----------
    x, y : float
        Pixel coordinates.
    grid_index : int, optional
        Index of the grid point the prompt was derived from (row-major), -1 if not grid-derived.
    heat : float, optional
        Heatmap value at the prompt location.

    """
    x: float
    y: float
    grid_index: int = -1
    heat: float = 1.

    def within(self, width, height) -> bool:
        return 0 <= self.x < width and 0 <= self.y < height


class PromptSet:
    """ Array-backed, immutable collection of point prompts. """

    def __init__(self, xy, grid_index=None, heat=None):
        """
        Constructor of `PromptSet`.

        Parameters
        ----------
        xy : array-like
            Point coordinates of shape (N, 2).
        grid_index : array-like, optional
            Grid indices of shape (N,). Defaults to -1.
        heat : array-like, optional
            Heat values of shape (N,). Defaults to 1.

        """
        xy = np.array(xy, dtype=np.float64).reshape(-1, 2)
        n = xy.shape[0]
        grid_index = np.full(n, -1, dtype=np.int64) if grid_index is None else \
            np.array(grid_index, dtype=np.int64).reshape(-1)
        heat = np.ones(n, dtype=np.float64) if heat is None else np.array(heat, dtype=np.float64).reshape(-1)
        if grid_index.size != n or heat.size != n:
            err_msg = f"Prompt attributes do not match the number of points ({n})."
            raise ValueError(err_msg)
        for arr in (xy, grid_index, heat):
            arr.setflags(write=False)
        self._xy = xy
        self._grid_index = grid_index
        self._heat = heat

    @classmethod
    def empty(cls) -> "PromptSet":
        return cls(np.zeros((0, 2)))

    @classmethod
    def from_points(cls, points: Sequence[PointPrompt]) -> "PromptSet":
        """ Creates a prompt set from single prompts. """
        if len(points) == 0:
            return cls.empty()
        return cls([(p.x, p.y) for p in points], [p.grid_index for p in points], [p.heat for p in points])

    @classmethod
    def concat(cls, prompt_sets) -> "PromptSet":
        prompt_sets = [ps for ps in prompt_sets if len(ps) > 0]
        if not prompt_sets:
            return cls.empty()
        return cls(np.concatenate([ps.xy for ps in prompt_sets]),
                   np.concatenate([ps.grid_index for ps in prompt_sets]),
                   np.concatenate([ps.heat for ps in prompt_sets]))

    @property
    def xy(self) -> np.ndarray:
        return self._xy

    @property
    def grid_index(self) -> np.ndarray:
        return self._grid_index

    @property
    def heat(self) -> np.ndarray:
        return self._heat

    def take(self, idxs) -> "PromptSet":
        """ Subset of prompts at the given positions (or boolean selection). """
        idxs = np.asarray(idxs)
        return PromptSet(self._xy[idxs], self._grid_index[idxs], self._heat[idxs])

    def translate(self, dx, dy) -> "PromptSet":
        return PromptSet(self._xy + np.array([dx, dy], dtype=np.float64), self._grid_index, self._heat)

    def validate_within(self, width, height):
        """ Raises a ValueError if any prompt lies outside the canvas [0, width) x [0, height). """
        if len(self) == 0:
            return
        x, y = self._xy[:, 0], self._xy[:, 1]
        outside = (x < 0) | (x >= width) | (y < 0) | (y >= height)
        if outside.any():
            first = int(np.flatnonzero(outside)[0])
            err_msg = f"Prompt {first} at {tuple(self._xy[first])} lies outside the canvas {width}x{height}."
            raise ValueError(err_msg)

    def __len__(self) -> int:
        return self._xy.shape[0]

    def __getitem__(self, item):
        if isinstance(item, (int, np.integer)):
            x, y = self._xy[item]
            return PointPrompt(float(x), float(y), int(self._grid_index[item]), float(self._heat[item]))
        return self.take(np.arange(len(self))[item])

    def __iter__(self) -> Iterator[PointPrompt]:
        for i in range(len(self)):
            yield self[i]

    def __eq__(self, other) -> bool:
        if not isinstance(other, PromptSet):
            return NotImplemented
        return np.array_equal(self._xy, other._xy) and np.array_equal(self._grid_index, other._grid_index) and \
            np.array_equal(self._heat, other._heat)

    def __repr__(self) -> str:
        return f"PromptSet(n={len(self)})"


def grid_points(n, width, height) -> PromptSet:
    """
    Uniform n x n grid of cell-centre points over a canvas.

    Parameters
    ----------
    n : int
        Number of points per side.
    width : int
        Canvas width.
    height : int
        Canvas height.

    Returns
    -------
    PromptSet :
        n*n prompts with grid index `row * n + col`.

    """
    if n < 1:
        err_msg = f"Grid size must be at least 1, got {n}."
        raise ValueError(err_msg)
    offsets = (np.arange(n) + 0.5) / n
    xs = offsets * width
    ys = offsets * height
    gx, gy = np.meshgrid(xs, ys)
    xy = np.stack([gx.ravel(), gy.ravel()], axis=1)
    return PromptSet(xy, np.arange(n * n))
