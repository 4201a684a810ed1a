import itertools
import math

import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from umafd.data import Modality
from umafd.errors import ConfigError, DataError, ShapeError
from umafd.losses import (
    LossBundle,
    LossWeights,
    WeightMode,
    cls_loss,
    modality_loss,
    pseudo_labels,
    pseudo_loss,
    total_loss,
    xbm_triplet_loss,
)
from umafd.xbm import XBMEntry

T = lambda *v: torch.tensor(v, dtype=torch.float64)  # noqa: E731


# ------------------------------------------------------------------ cross-entropies


def test_cls_loss_examples():
    assert cls_loss(T(0.5), T(1)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert cls_loss(T(0.9, 0.2), T(1, 0)).item() == pytest.approx((-math.log(0.9) - math.log(0.8)) / 2, abs=1e-12)
    assert cls_loss(T(0.9, 0.2), T(1, 0)).item() == pytest.approx(0.1643, abs=1e-4)
    assert cls_loss(T(1 - 1e-12, 1e-12), T(1, 0)).item() < 1e-10


def test_cls_loss_errors():
    with pytest.raises(ShapeError):
        cls_loss(T(0.5, 0.5), T(1))
    with pytest.raises(DataError):
        cls_loss(T(), T())


def test_modality_loss_examples():
    assert modality_loss(T(0.5, 0.5), T(1, 0)).item() == pytest.approx(math.log(2), abs=1e-12)
    assert modality_loss(T(0.8, 0.3), T(1, 0)).item() == pytest.approx((-math.log(0.8) - math.log(0.7)) / 2, abs=1e-12)
    assert modality_loss(T(0.8, 0.3), T(1, 0)).item() == pytest.approx(0.2899, abs=1e-4)


# ------------------------------------------------------------------ pseudo labels


def test_pseudo_label_examples():
    mask, labels = pseudo_labels(T(0.85, 0.15, 0.50), 0.8)
    assert mask.tolist() == [True, True, False]
    assert labels[:2].tolist() == [1, 0]
    mask, labels = pseudo_labels(T(0.70), 0.7)
    assert mask.item() and labels.item() == 1
    for bad in (0.5, 0.3, 1.01):
        with pytest.raises(ConfigError):
            pseudo_labels(T(0.9), bad)


@pytest.mark.parametrize("tau", [0.55, 0.7, 0.8, 0.99])
def test_pseudo_partition_grid(tau):
    grid = [i / 1000 for i in range(1001)]
    mask, labels = pseudo_labels(torch.tensor(grid, dtype=torch.float64), tau)
    for s, m, y in zip(grid, mask.tolist(), labels.tolist()):
        if s >= tau:
            assert m and y == 1
        elif s <= 1 - tau:
            assert m and y == 0
        else:
            assert not m and y == -1


def test_pseudo_loss_examples():
    assert pseudo_loss(T(0.6, 0.4), 0.8).item() == 0.0
    assert pseudo_loss(T(0.9), 0.8).item() == pytest.approx(-math.log(0.9), abs=1e-12)
    assert pseudo_loss(T(0.9, 0.1, 0.6), 0.8).item() == pytest.approx(-math.log(0.9), abs=1e-12)


def test_pseudo_labels_carry_no_gradient():
    s = T(0.9, 0.05, 0.6).requires_grad_(True)
    pseudo_loss(s, 0.8).backward()
    # d/ds of -log s at 0.9 averaged over 2 masked samples; labels treated as constants
    assert s.grad[0].item() == pytest.approx(-1 / (2 * 0.9), abs=1e-12)
    assert s.grad[1].item() == pytest.approx(1 / (2 * 0.95), abs=1e-12)
    assert s.grad[2].item() == 0.0


# ------------------------------------------------------------------ triplet


def _entries(emb, labels):
    return [XBMEntry.make(e, int(y), Modality.RGB, i) for i, (e, y) in enumerate(zip(emb, labels))]


def test_triplet_hinge_examples():
    # anchor at 0; positive at distance 1.0, negative at 0.5
    anchor = T(0.0, 0.0)[None]
    mem = (torch.stack([T(1.0, 0.0), T(0.0, 0.5)]), torch.tensor([1, 0]))
    loss = xbm_triplet_loss(anchor, torch.tensor([1]), mem, margin=0.3, include_batch=False)
    assert loss.item() == pytest.approx(0.8, abs=1e-12)
    mem = (torch.stack([T(0.2, 0.0), T(0.0, 1.0)]), torch.tensor([1, 0]))
    assert xbm_triplet_loss(anchor, torch.tensor([1]), mem, margin=0.3, include_batch=False).item() == 0.0


def _triplet_oracle(emb, labels, mem_emb, mem_labels, margin):
    cands = [(m, y, None) for m, y in zip(mem_emb.tolist(), mem_labels.tolist())]
    cands += [(e, y, i) for i, (e, y) in enumerate(zip(emb.tolist(), labels.tolist())) if y >= 0]
    hinges = []
    for i, (a, ya) in enumerate(zip(emb.tolist(), labels.tolist())):
        if ya < 0:
            continue
        pos = [math.dist(a, c) for c, y, j in cands if y == ya and j != i]
        neg = [math.dist(a, c) for c, y, j in cands if y != ya]
        if pos and neg:
            hinges.append(max(max(pos) - min(neg) + margin, 0.0))
    return sum(hinges) / len(hinges) if hinges else 0.0


def test_triplet_matches_exhaustive_oracle():
    g = torch.Generator().manual_seed(0)
    for _ in range(50):
        emb = torch.randn(6, 3, generator=g, dtype=torch.float64)
        labels = torch.randint(-1, 2, (6,), generator=g)
        n_mem = int(torch.randint(0, 10, (1,), generator=g))
        mem_emb = torch.randn(n_mem, 3, generator=g, dtype=torch.float64)
        mem_labels = torch.randint(0, 2, (n_mem,), generator=g)
        got = xbm_triplet_loss(emb, labels, _entries(mem_emb, mem_labels), margin=0.3).item()
        assert got == pytest.approx(_triplet_oracle(emb, labels, mem_emb, mem_labels, 0.3), abs=1e-6)


def test_triplet_edge_cases():
    emb = torch.randn(2, 3, dtype=torch.float64)
    assert xbm_triplet_loss(emb, torch.tensor([-1, -1])).item() == 0.0
    assert xbm_triplet_loss(emb, torch.tensor([1, 1])).item() == 0.0  # no negative
    with pytest.raises(ConfigError):
        xbm_triplet_loss(emb, torch.tensor([0, 1]), margin=0.0)
    with pytest.raises(ShapeError):
        xbm_triplet_loss(emb, torch.tensor([0, 1, 1]))


def test_triplet_memory_gets_no_gradient():
    emb = torch.randn(3, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.tensor([0, 1, 0])
    live = torch.randn(5, 4, dtype=torch.float64, requires_grad=True)
    mem_labels = torch.tensor([0, 1, 1, 0, 1])
    xbm_triplet_loss(emb, labels, (live, mem_labels)).backward()
    g_live = emb.grad.clone()
    assert live.grad is None
    emb.grad = None
    const = live.detach().clone()
    xbm_triplet_loss(emb, labels, (const, mem_labels)).backward()
    assert torch.equal(g_live, emb.grad)


# ------------------------------------------------------------------ composition


def _bundle(*v):
    return LossBundle(*(torch.tensor(float(x), dtype=torch.float64) for x in v))


def test_total_loss_examples():
    b = _bundle(1, 2, 3, 4, 5)
    assert total_loss(b, LossWeights.fixed()).item() == 15.0
    assert total_loss(b, LossWeights(WeightMode.ADAPTIVE, torch.full((5,), 0.2, dtype=torch.float64))).item() == pytest.approx(3.0)
    assert total_loss(_bundle(0, 0, 0, 0, 0), LossWeights.fixed((3, 1, 4, 1, 5))).item() == 0.0
    with pytest.raises(ConfigError):
        LossWeights.fixed((1, 1, -1, 1, 1))
    with pytest.raises(ShapeError):
        LossWeights.fixed((1, 1))


@settings(max_examples=50)
@given(
    st.lists(st.floats(0, 10), min_size=5, max_size=5),
    st.lists(st.floats(0, 10), min_size=5, max_size=5),
    st.lists(st.floats(0, 3), min_size=5, max_size=5),
    st.floats(-3, 3),
    st.floats(-3, 3),
)
def test_total_loss_linear(b1, b2, lam, alpha, beta):
    w = LossWeights.fixed(lam)
    mixed = _bundle(*(alpha * x + beta * y for x, y in zip(b1, b2)))
    lhs = total_loss(mixed, w).item()
    rhs = alpha * total_loss(_bundle(*b1), w).item() + beta * total_loss(_bundle(*b2), w).item()
    assert lhs == pytest.approx(rhs, abs=1e-9)


def test_adaptive_weights_get_gradient_through_live_losses():
    p = torch.full((5,), 0.2, dtype=torch.float64, requires_grad=True)
    x = torch.tensor(2.0, dtype=torch.float64, requires_grad=True)
    b = LossBundle(x, x * 2, x * 0, x * 0, x * 0)
    total_loss(b, LossWeights(WeightMode.ADAPTIVE, p)).backward()
    assert p.grad.tolist() == [2.0, 4.0, 0.0, 0.0, 0.0]
    assert x.grad.item() == pytest.approx(0.2 + 0.4)


def test_bundle_zeros_and_values():
    b = LossBundle.zeros()
    assert b.values() == dict.fromkeys(("cls", "pseudo", "modality", "bridge", "triplet"), 0.0)
    assert list(itertools.islice(b.as_vector().tolist(), 5)) == [0.0] * 5
