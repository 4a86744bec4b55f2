import numpy as np
import pytest

from mivpg.errors import ConfigError, GenerationError
from mivpg.harness.data import SyntheticTaskSpec, contains_witness, generate_task
from mivpg.harness.invariants import permute_bag
from mivpg.rng import Rng


@pytest.mark.parametrize("scenario", [1, 2, 3])
def test_exact_witness_labels_match_membership_oracle(scenario):
    spec = SyntheticTaskSpec(scenario=scenario, num_bags=200, epsilon=0.0, seed=4)
    ds = generate_task(spec)
    for ex in ds.examples:
        assert contains_witness(ex.bag, ds.witness, 0.0) == bool(ex.label)
        if ex.label:
            i, p = ex.witness_at
            np.testing.assert_array_equal(ex.bag.groups[i][p], ds.witness)


@pytest.mark.parametrize("scenario", [1, 2, 3])
def test_labels_follow_epsilon_rule(scenario):
    spec = SyntheticTaskSpec(scenario=scenario, num_bags=200, epsilon=0.5, seed=5)
    ds = generate_task(spec)
    agree = [contains_witness(e.bag, ds.witness, spec.epsilon) == bool(e.label) for e in ds.examples]
    assert all(agree)


def test_regeneration_is_bit_exact():
    spec = SyntheticTaskSpec(scenario=3, num_bags=1000, seed=13)
    a, b = generate_task(spec), generate_task(spec)
    np.testing.assert_array_equal(a.witness, b.witness)
    for ea, eb in zip(a.examples, b.examples):
        assert ea.label == eb.label and ea.witness_at == eb.witness_at
        assert len(ea.bag.groups) == len(eb.bag.groups)
        for ga, gb in zip(ea.bag.groups, eb.bag.groups):
            assert ga.tobytes() == gb.tobytes()


def test_different_seeds_differ():
    a = generate_task(SyntheticTaskSpec(num_bags=50, seed=1))
    b = generate_task(SyntheticTaskSpec(num_bags=50, seed=2))
    assert not np.array_equal(a.witness, b.witness)


@pytest.mark.parametrize("seed", range(5))
def test_class_balance(seed):
    ds = generate_task(SyntheticTaskSpec(num_bags=300, seed=seed))
    assert 0.4 <= ds.labels.mean() <= 0.6


def test_size_ranges_respected():
    spec = SyntheticTaskSpec(scenario=3, num_bags=300, min_instances=2, max_instances=8,
                             min_patches=4, max_patches=16, seed=6)
    ds = generate_task(spec)
    images = [e.bag.num_images for e in ds.examples]
    patches = [c for e in ds.examples for c in e.bag.patch_counts]
    assert min(images) == 2 and max(images) == 8
    assert min(patches) == 4 and max(patches) == 16
    assert all(e.bag.hierarchical and e.bag.instance_dim == 32 for e in ds.examples)


def test_scenario_shapes():
    flat = generate_task(SyntheticTaskSpec(scenario=1, num_bags=20, seed=7))
    assert all(not e.bag.hierarchical for e in flat.examples)
    single = generate_task(SyntheticTaskSpec(scenario=2, num_bags=20, seed=7))
    assert all(e.bag.hierarchical and set(e.bag.patch_counts) == {1} for e in single.examples)


def test_witness_position_is_spread():
    ds = generate_task(SyntheticTaskSpec(scenario=1, num_bags=600, min_instances=4, max_instances=4, seed=8))
    where = [e.witness_at[1] for e in ds.examples if e.label]
    counts = np.bincount(where, minlength=4)
    # uniform over 4 slots: each near a quarter of ~300 positives
    assert counts.min() > 40


def test_permuting_a_bag_keeps_its_label():
    ds = generate_task(SyntheticTaskSpec(scenario=3, num_bags=100, seed=9))
    rng = Rng(10)
    for ex in ds.examples:
        perm = rng.permutation(ex.bag.num_images)
        patch_perms = [rng.permutation(ex.bag.groups[i].shape[0]) for i in perm]
        shuffled = permute_bag(ex.bag, perm, patch_perms)
        assert contains_witness(shuffled, ds.witness, ds.spec.epsilon) == bool(ex.label)


def test_label_noise_flips_some_labels():
    spec = SyntheticTaskSpec(scenario=1, num_bags=400, label_noise=0.2, seed=11)
    ds = generate_task(spec)
    truth = np.array([contains_witness(e.bag, ds.witness, spec.epsilon) for e in ds.examples])
    flipped = np.mean(truth != ds.labels.astype(bool))
    assert 0.1 < flipped < 0.3


def test_split_fractions_and_disjointness():
    ds = generate_task(SyntheticTaskSpec(num_bags=100, seed=12))
    tr, va, te = ds.split(seed=3)
    assert (len(tr), len(va), len(te)) == (70, 10, 20)
    ids = {id(e) for e in tr} | {id(e) for e in va} | {id(e) for e in te}
    assert len(ids) == 100


def test_unbalanceable_request_raises():
    with pytest.raises(GenerationError):
        generate_task(SyntheticTaskSpec(num_bags=1, seed=0))


@pytest.mark.parametrize("kwargs", [
    dict(scenario=4),
    dict(min_instances=3, max_instances=2),
    dict(min_instances=0),
    dict(scenario=3, min_patches=0),
    dict(epsilon=-1.0),
    dict(label_noise=0.5),
    dict(witness_norm=0.1, epsilon=0.5),
])
def test_invalid_spec(kwargs):
    with pytest.raises(ConfigError):
        SyntheticTaskSpec(**kwargs)
