import pytest
import numpy as np

from densa.geometry import PointPrompt, PromptSet, grid_points


def test_grid_points_layout():
    prompts = grid_points(4, 200, 100)
    assert len(prompts) == 16
    np.testing.assert_array_equal(prompts.grid_index, np.arange(16))
    # index = row * n + col
    assert prompts[6] == PointPrompt(125., 37.5, 6, 1.)
    np.testing.assert_allclose(np.unique(prompts.xy[:, 0]), [25, 75, 125, 175])
    np.testing.assert_allclose(np.unique(prompts.xy[:, 1]), [12.5, 37.5, 62.5, 87.5])
    prompts.validate_within(200, 100)


def test_grid_points_invalid():
    with pytest.raises(ValueError):
        grid_points(0, 10, 10)


def test_prompt_set_attributes():
    with pytest.raises(ValueError):
        PromptSet([[0, 0], [1, 1]], grid_index=[0])
    prompts = PromptSet([[1, 2], [3, 4]], heat=[0.7, 0.9])
    np.testing.assert_array_equal(prompts.grid_index, [-1, -1])
    with pytest.raises(ValueError):
        prompts.xy[0, 0] = 5.


def test_prompt_set_ops():
    prompts = grid_points(3, 30, 30)
    sub = prompts.take([0, 4])
    assert len(sub) == 2
    np.testing.assert_array_equal(sub.grid_index, [0, 4])
    assert prompts[1:3] == prompts.take([1, 2])
    moved = sub.translate(10, -5)
    np.testing.assert_allclose(moved.xy, sub.xy + [10, -5])
    both = PromptSet.concat([sub, PromptSet.empty(), moved])
    assert len(both) == 4
    assert PromptSet.from_points(list(sub)) == sub
    assert len(PromptSet.from_points([])) == 0


def test_validate_within():
    prompts = PromptSet([[0, 0], [10, 5]])
    with pytest.raises(ValueError, match="Prompt 1"):
        prompts.validate_within(10, 10)
    assert PointPrompt(9.99, 0).within(10, 10)
    assert not PointPrompt(-0.1, 0).within(10, 10)
