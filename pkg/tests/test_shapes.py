import numpy as np
import pytest
from scipy import ndimage

from voxpatch.errors import EmptyShape, UnknownCategory
from voxpatch.shapes import CATEGORIES, MAX_FILL, MIN_FILL, generate_shape, sample_params


def ball_cell_count(radius, center, n):
    """Independent enumeration oracle: cells with ||c - center|| <= radius."""
    count = 0
    for x in range(n):
        for y in range(n):
            for z in range(n):
                if (x - center[0]) ** 2 + (y - center[1]) ** 2 + (z - center[2]) ** 2 <= radius**2:
                    count += 1
    return count


def test_sphere_count_matches_discrete_ball_oracle():
    oracle = ball_cell_count(6, (16, 16, 16), 32)
    grid, _ = generate_shape("sphere_pod", {"radius": 6}, np.random.default_rng(0), 32)
    assert abs(int(grid.sum()) - oracle) <= 0.02 * oracle


def test_zero_radius_rejected():
    with pytest.raises(EmptyShape):
        generate_shape("sphere_pod", {"radius": 0}, np.random.default_rng(0), 32)


def test_oversized_radius_rejected():
    with pytest.raises(EmptyShape):
        generate_shape("sphere_pod", {"radius": 20}, np.random.default_rng(0), 32)


def test_unknown_category_rejected():
    with pytest.raises(UnknownCategory):
        generate_shape("teapot", {}, np.random.default_rng(0), 32)
    with pytest.raises(UnknownCategory):
        sample_params("teapot", 32, np.random.default_rng(0))


def test_deterministic_given_params_and_seed():
    params = sample_params("ring", 32, np.random.default_rng(5))
    g1, c1 = generate_shape("ring", params, np.random.default_rng(9), 32)
    g2, c2 = generate_shape("ring", params, np.random.default_rng(9), 32)
    assert (g1 == g2).all()
    assert c1 == c2


@pytest.mark.parametrize("category", CATEGORIES)
@pytest.mark.parametrize("grid_n", [16, 32])
def test_fill_bounds_and_connectivity(category, grid_n):
    six_conn = ndimage.generate_binary_structure(3, 1)
    for seed in range(8):
        rng = np.random.default_rng(seed)
        grid, captions = generate_shape(category, sample_params(category, grid_n, rng), rng, grid_n)
        fill = grid.sum() / grid.size
        assert MIN_FILL <= fill <= MAX_FILL, (category, grid_n, seed, fill)
        _, n_components = ndimage.label(grid, structure=six_conn)
        assert n_components == 1, (category, grid_n, seed)
        assert len(captions) == 3


@pytest.mark.parametrize("category", CATEGORIES)
def test_captions_mention_category_and_shared_attributes(category):
    rng = np.random.default_rng(3)
    _, captions = generate_shape(category, sample_params(category, 32, rng), rng, 32)
    name = category.replace("_", " ")
    for caption in captions:
        assert name in caption
        assert caption == caption.lower()
    # all three paraphrases carry the same two attribute words
    words = [set(c.split()) for c in captions]
    shared = words[0] & words[1] & words[2]
    assert len(shared - set(name.split()) - {"a"}) >= 2
