import math

import numpy as np
import pytest

from mivpg import tensor as T
from mivpg.errors import ConfigError, TrainingError
from mivpg.harness.data import SyntheticTaskSpec, generate_task
from mivpg.harness.train import (
    Adam,
    MeanPoolClassifier,
    MivpgClassifier,
    count_parameters,
    train,
    witness_config,
)
from mivpg.rng import Rng

TINY = witness_config(8, num_blocks=1, num_queries=2, model_dim=8, ffn_hidden=16, abmil_hidden=8)


@pytest.fixture(scope="module")
def small_task():
    return generate_task(SyntheticTaskSpec(scenario=3, instance_dim=8, num_bags=60, max_instances=4,
                                           max_patches=6, seed=3))


def test_zero_lr_leaves_parameters_bit_identical(small_task):
    clf = MivpgClassifier(TINY, Rng(1))
    before = {k: p.data.tobytes() for k, p in clf.named_parameters().items()}
    train(small_task, TINY, model=clf, epochs=2, lr=0.0, seed=1)
    after = {k: p.data.tobytes() for k, p in clf.named_parameters().items()}
    assert before == after


def test_adam_zero_lr_is_a_null_update():
    rng = Rng(2)
    p = T.parameter(rng.normal((3, 4)))
    before = p.data.copy()
    opt = Adam([p], lr=0.0)
    for _ in range(3):
        p.grad = rng.normal((3, 4))
        opt.step()
    assert p.data.tobytes() == before.tobytes()


def test_adam_first_step_moves_by_lr_times_sign():
    p = T.parameter(np.array([1.0, -2.0, 3.0]))
    p.grad = np.array([0.5, -4.0, 1e-3])
    Adam([p], lr=0.1).step()
    np.testing.assert_allclose(p.data, [0.9, -1.9, 2.9], atol=1e-6)


def test_adam_minimizes_quadratic():
    p = T.parameter(np.array([5.0, -3.0]))
    opt = Adam([p], lr=0.1)
    for _ in range(500):
        with T.Tape() as tape:
            loss = T.tsum(T.mul(p, p))
        opt.zero_grad()
        tape.backward(loss)
        opt.step()
    assert np.max(np.abs(p.data)) < 1e-2


def test_same_seed_same_trajectory(small_task):
    a = train(small_task, TINY, epochs=2, lr=3e-3, seed=7)
    b = train(small_task, TINY, epochs=2, lr=3e-3, seed=7)
    assert a.final_loss == b.final_loss
    assert [e.train_loss for e in a.epochs] == [e.train_loss for e in b.epochs]
    assert a.config_digest == b.config_digest == TINY.digest()


def test_losses_finite_and_metrics_shape(small_task):
    m = train(small_task, TINY, epochs=3, lr=3e-3, seed=0)
    assert len(m.epochs) == 3
    assert all(math.isfinite(e.train_loss) for e in m.epochs)
    assert 0 <= m.best_epoch < 3
    assert 0.0 <= m.test_accuracy <= 1.0
    rows = m.to_rows()
    assert len(rows) == 4 and rows[-1]["epoch"] == "best"


def test_separable_task_learned_quickly():
    # witness far outside the data scale: a nearest-witness rule separates perfectly
    spec = SyntheticTaskSpec(scenario=3, instance_dim=8, num_bags=200, max_instances=4, max_patches=6,
                             witness_norm=30.0, epsilon=0.5, seed=21)
    ds = generate_task(spec)
    m = train(ds, TINY, epochs=5, lr=1e-2, seed=0)
    assert max(e.val_accuracy for e in m.epochs) == 1.0


def test_divergence_reports_epoch(small_task):
    with pytest.raises(TrainingError) as info, np.errstate(all="ignore"):
        train(small_task, TINY, epochs=3, lr=1e300, seed=0)
    assert info.value.epoch == 0


@pytest.mark.parametrize("lr", [float("nan"), float("inf"), -1e-3])
def test_bad_learning_rate(small_task, lr):
    with pytest.raises(ConfigError):
        train(small_task, TINY, epochs=1, lr=lr)


def test_patience_stops_early(small_task):
    m = train(small_task, TINY, epochs=20, lr=0.0, seed=0, patience=2)
    assert len(m.epochs) == 3


def test_mean_pool_parameter_matching():
    target = count_parameters(MivpgClassifier(TINY, Rng(0)))
    base = MeanPoolClassifier.matched(8, target, Rng(0))
    per_hidden = 8 + 2
    assert abs(count_parameters(base) - target) <= per_hidden // 2 + 1


def test_mean_pool_ignores_instance_order(small_task):
    clf = MeanPoolClassifier(8, 5, Rng(4))
    bag = small_task[0].bag
    flipped = type(bag)(bag.groups[::-1], hierarchical=True)
    assert abs(clf.logit(bag).item() - clf.logit(flipped).item()) < 1e-12


def test_unknown_model_rejected(small_task):
    with pytest.raises(ConfigError):
        train(small_task, TINY, model="svm", epochs=1)
