import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dfkdlab.world import LabeledSet, WorldSpec, build_world, min_mode_separation, sample_split

SMALL = WorldSpec(K=4, n_content=3, n_style=2, d_x=16, ood_extra=2, factor_dim=6, seed=3)


@pytest.fixture(scope="module")
def small_world():
    return build_world(SMALL)


def test_same_seed_gives_identical_world():
    a, b = build_world(SMALL), build_world(SMALL)
    for name in ("content_means", "style_rot", "style_bias", "embed"):
        np.testing.assert_array_equal(getattr(a, name), getattr(b, name))


def test_default_combo_count():
    assert WorldSpec().n_combos == 200


def test_mode_separation_exhaustive(small_world):
    assert min_mode_separation(small_world) >= SMALL.min_separation * SMALL.noise_std


def test_default_world_separation():
    world = build_world(WorldSpec())
    assert min_mode_separation(world) >= 4 * world.spec.noise_std


def test_style_transforms_are_orthogonal(small_world):
    for r in small_world.style_rot:
        np.testing.assert_allclose(r @ r.T, np.eye(SMALL.factor_dim), atol=1e-12)
    np.testing.assert_allclose(small_world.embed.T @ small_world.embed, np.eye(SMALL.factor_dim), atol=1e-12)


def test_broad_prior_without_distractors_is_all_id():
    world = build_world(WorldSpec(K=3, n_content=2, n_style=2, d_x=8, factor_dim=4, ood_extra=0,
                                  broad_id_fraction=1.0))
    data = sample_split(world, "broad_prior", 500)
    assert not data.is_ood.any()
    assert (data.content < 2).all()


def test_class_frequencies_near_uniform():
    world = build_world(WorldSpec())
    data = sample_split(world, "id_train", 10000)
    counts = np.bincount(data.y, minlength=10)
    p = 0.1
    sigma = np.sqrt(10000 * p * (1 - p))
    assert np.all(np.abs(counts - 1000) <= 3 * sigma)


def test_train_and_test_share_no_rows(small_world):
    tr = sample_split(small_world, "id_train", 2000)
    te = sample_split(small_world, "id_test", 2000)
    rows = {r.tobytes() for r in tr.x}
    assert not any(r.tobytes() in rows for r in te.x)


def test_id_splits_respect_mask():
    mask = np.ones((4, 3, 2), dtype=bool)
    mask[0, 1:, :] = False
    mask[2, :, 1] = False
    spec = WorldSpec(K=4, n_content=3, n_style=2, d_x=16, ood_extra=2, factor_dim=6, seed=3,
                     id_mask=tuple(map(tuple, map(lambda p: map(tuple, p), mask))))
    data = sample_split(build_world(spec), "id_train", 3000)
    assert mask[data.y, data.content, data.style].all()
    assert not data.is_ood.any()


def test_broad_prior_mixing_ratio(small_world):
    data = sample_split(small_world, "broad_prior", 20000)
    share = data.is_ood.mean()
    assert abs(share - 0.3) < 4 * np.sqrt(0.21 / 20000)
    assert (data.content[data.is_ood] >= SMALL.n_content).all()
    assert (data.content[~data.is_ood] < SMALL.n_content).all()


def test_samples_sit_on_their_generating_mode(small_world):
    data = sample_split(small_world, "broad_prior", 400, seed=4)
    means = small_world.mode_means()[data.y, data.content, data.style]
    dist = np.linalg.norm(data.x - means, axis=1)
    # noise is N(0, sigma^2) in factor_dim directions plus a small ambient part
    expected = np.sqrt(SMALL.noise_std ** 2 * SMALL.factor_dim + SMALL.ambient_std ** 2 * SMALL.d_x)
    assert abs(np.median(dist) - expected) < 0.25 * expected


def test_spec_validation():
    with pytest.raises(ValueError):
        WorldSpec(K=0).validate()
    with pytest.raises(ValueError):
        WorldSpec(factor_dim=100, d_x=64).validate()
    mask = np.ones((2, 1, 1), dtype=bool)
    mask[1] = False
    with pytest.raises(ValueError, match="without any ID"):
        WorldSpec(K=2, n_content=1, n_style=1, id_mask=tuple(map(tuple, map(lambda p: map(tuple, p), mask)))).validate()
    with pytest.raises(ValueError):
        sample_split(build_world(SMALL), "validation", 10)
    with pytest.raises(ValueError):
        sample_split(build_world(SMALL), "id_train", 0)


def test_spec_dict_roundtrip():
    spec = WorldSpec(K=3, style_angle=0.2, class_scale=1.0)
    assert WorldSpec.from_dict(spec.to_dict()) == spec


def test_labeled_set_roundtrip(tmp_path, small_world):
    data = sample_split(small_world, "broad_prior", 50)
    data.extras["score"] = np.arange(50) * 0.5
    data.save(tmp_path / "d.prsm")
    back = LabeledSet.load(tmp_path / "d.prsm")
    for name in ("x", "y", "content", "style", "is_ood"):
        np.testing.assert_array_equal(getattr(back, name), getattr(data, name))
    np.testing.assert_array_equal(back.extras["score"], data.extras["score"])
    assert back.synthetic is False and back.info == data.info


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.sampled_from(["id_train", "id_test", "broad_prior"]), st.integers(1, 300))
def test_provenance_in_range(seed, which, n):
    world = build_world(SMALL)
    data = sample_split(world, which, n, seed=seed)
    assert len(data) == n
    assert ((0 <= data.y) & (data.y < SMALL.K)).all()
    assert ((0 <= data.style) & (data.style < SMALL.n_style)).all()
    assert (data.is_ood == (data.content >= SMALL.n_content)).all()
    again = sample_split(world, which, n, seed=seed)
    np.testing.assert_array_equal(again.x, data.x)
