import math

import numpy as np
import pytest
import torch

from sigmetric.encoder import LearnableBoundary
from sigmetric.errors import ConfigError
from sigmetric.objectives import (ALPHA_GRID, ObjectiveSpec, angular_loss, cross_entropy, joint_objective,
                                  margin_loss, metric_loss, npair_loss, rmse_loss, task_loss,
                                  triples_to_pairs, triplet_loss)

from gradient_suite import LOSS_CASES, PRIMITIVE_CASES, run_case

D = torch.float64


def T(x):
    return torch.tensor(x, dtype=D)


def test_triplet_examples():
    e = T([[0.0, 0.0], [0.0, 0.0], [3.0, 4.0]])
    assert triplet_loss(e, [[0, 1, 2]], "raw").item() == -5.0
    assert triplet_loss(e, [[0, 1, 2]], "hinge", 0.2).item() == 0.0
    e = T([[0.0, 0.0], [3.0, 4.0], [0.0, 1.0]])
    assert triplet_loss(e, [[0, 1, 2]], "raw").item() == 4.0
    assert abs(triplet_loss(e, [[0, 1, 2]], "hinge", 0.2).item() - 4.2) < 1e-12


def test_triplet_hinge_nonnegative_raw_unbounded():
    rng = np.random.default_rng(0)
    for _ in range(100):
        e = T(rng.normal(size=(5, 3)))
        assert triplet_loss(e, rng.permutation(5)[:3][None, :], "hinge").item() >= 0
    far = T([[0.0], [0.0], [1e6]])
    assert triplet_loss(far, [[0, 1, 2]], "raw").item() == -1e6


def test_empty_triples_zero_loss_and_gradient():
    e = T(np.ones((3, 2))).requires_grad_()
    loss = triplet_loss(e, np.zeros((0, 3), int))
    loss.backward()
    assert loss.item() == 0.0 and not e.grad.any()


def test_margin_examples():
    b = LearnableBoundary(1.2, dtype=D)
    same = (torch.tensor([0]), torch.tensor([1]), torch.tensor([True]))
    e = T([[0.0, 0.0], [1.2, 0.0]])
    assert abs(margin_loss(e, same, b, 0.2).item() - 0.2) < 1e-12
    diff = (torch.tensor([0]), torch.tensor([1]), torch.tensor([False]))
    e = T([[0.0, 0.0], [1.2 + 0.2 + 1.0, 0.0]])
    assert margin_loss(e, diff, b, 0.2).item() == 0.0


def test_margin_literal_form():
    b = LearnableBoundary(1.0, dtype=D)
    pairs = (torch.tensor([0, 0]), torch.tensor([1, 2]), torch.tensor([True, False]))
    e = T([[0.0], [2.0], [3.0]])
    # same: (4 - 1) + 0.2 ; different: -(9 - 1) + 0.2
    assert abs(margin_loss(e, pairs, b, 0.2, literal=True).item() - (3.2 - 7.8) / 2) < 1e-12


def test_margin_beta_descent():
    rng = np.random.default_rng(1)
    e = T(rng.normal(size=(6, 3)))
    pairs = triples_to_pairs(np.array([[0, 1, 2], [3, 4, 5], [1, 3, 5]]))
    b = LearnableBoundary(1.2, lr=0.0005, dtype=D)
    loss = margin_loss(e, pairs, b, 0.2)
    (g,) = torch.autograd.grad(loss, [b.beta])
    assert g.item() != 0
    b.step(g)
    assert margin_loss(e, pairs, b, 0.2).item() < loss.item()


def test_angular_closed_form_and_lambda_zero():
    u = T([[0.6, 0.8]] * 3)
    ang = angular_loss(u, [[0, 1, 2]], math.pi / 4, lam=2.0, nu=0.0)
    npair = npair_loss(u, [[0, 1, 2]], nu=0.0)
    assert abs((ang - npair).item() - 2.0 * math.log1p(math.exp(4.0))) < 1e-12
    rng = np.random.default_rng(2)
    e = T(rng.normal(size=(5, 4)))
    t = [[0, 1, 2], [3, 4, 0]]
    assert angular_loss(e, t, lam=0.0).item() == npair_loss(e, t).item()


def test_npair_examples():
    assert abs(npair_loss(torch.zeros(3, 2, dtype=D), [[0, 1, 2]]).item() - math.log(2)) < 1e-15
    e = T([[1.0, 0.0], [0.0, 1.0], [0.0, -1.0]])  # f_a.f_n == f_a.f_p == 0
    assert abs(npair_loss(e, [[0, 1, 2]], nu=0.0).item() - math.log(2)) < 1e-15
    # empty triples -> regularizer only
    assert abs(npair_loss(e, np.zeros((0, 3), int), nu=0.5).item() - 0.5 * 3 / 3) < 1e-15


def test_npair_matches_direct_formula():
    rng = np.random.default_rng(3)
    for _ in range(20):
        e = rng.normal(size=(7, 4))
        t = np.array([rng.choice(7, 3, replace=False) for _ in range(5)])
        direct = sum(math.log(1 + math.exp(e[a] @ e[n] - e[a] @ e[p])) for a, p, n in t) / len(t)
        direct += 0.005 * float((e * e).sum()) / len(t)
        assert abs(npair_loss(T(e), t, 0.005).item() - direct) < 1e-10


def test_cross_entropy_examples():
    y = np.array([0, 1, 1, 0])
    assert abs(cross_entropy(T([0.5] * 4), y).item() - math.log(2)) < 1e-15
    assert cross_entropy(T(y.astype(float)), y).item() < 1e-6


def test_rmse_examples():
    assert rmse_loss(T([1.0, 2.0]), [1.0, 2.0]).item() == 0.0
    assert abs(rmse_loss(T([0.0, 0.0]), [3.0, 4.0]).item() - math.sqrt(12.5)) < 1e-15
    assert rmse_loss(T([10.0]), [14.0]).item() == 4.0


def test_joint_objective():
    assert joint_objective(T(1.0), T(0.5), 2.0).item() == 2.0
    task = T(0.123456789)
    assert joint_objective(task, T(7.0), 0.0).item() == task.item()
    with pytest.raises(ConfigError):
        joint_objective(task, task, -1.0)


@pytest.mark.parametrize("kind", ["triplet_hinge", "triplet_raw", "margin", "angular", "npair"])
def test_normalized_losses_scale_invariant(kind):
    rng = np.random.default_rng(4)
    spec = ObjectiveSpec(metric_loss=kind, normalize_embeddings=True)
    e = T(rng.normal(size=(6, 3)))
    t = np.array([[0, 1, 2], [3, 4, 5], [2, 0, 4]])
    base = metric_loss(spec, e, t, spec.make_boundary(D))
    scaled = metric_loss(spec, 7.5 * e, t, spec.make_boundary(D))
    assert abs(base.item() - scaled.item()) < 1e-12


def test_spec_validation_and_dispatch():
    with pytest.raises(ConfigError):
        ObjectiveSpec(metric_loss="contrastive")
    with pytest.raises(ConfigError):
        ObjectiveSpec(alpha_scale=0.5, sweep_mode=True)
    assert ObjectiveSpec(alpha_scale=3.0, sweep_mode=True).alpha_scale in ALPHA_GRID
    with pytest.raises(ConfigError):
        ObjectiveSpec.from_dict({"alpha": 1})
    with pytest.raises(ConfigError):
        metric_loss(ObjectiveSpec(metric_loss="margin"), T(np.ones((3, 2))), [[0, 1, 2]])
    with pytest.raises(ConfigError):
        task_loss(ObjectiveSpec(task_loss="none"), T([0.5]), [1], [20.0])
    assert ObjectiveSpec().make_boundary() is None
    assert ObjectiveSpec(metric_loss="margin").make_boundary().beta.item() == pytest.approx(1.2)


@pytest.mark.parametrize("name", sorted(PRIMITIVE_CASES))
def test_primitive_gradients(name):
    assert run_case(name, PRIMITIVE_CASES[name], 5, seed=1) < 1e-3


@pytest.mark.parametrize("name", sorted(LOSS_CASES))
def test_loss_gradients(name):
    assert run_case(name, LOSS_CASES[name], 5, seed=1) < 1e-3
