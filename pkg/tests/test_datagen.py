import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedunlearn.datagen import (FORGET, RETAIN, DomainSpec, LabeledDataset, default_generator,
                                dumps_dataset, generate_domain, loads_dataset, partition_clients,
                                read_dataset, split_partition, split_retain_forget,
                                train_val_split, write_dataset)
from fedunlearn.errors import LookupFailure, PartitionError
from fedunlearn.numerics import RngStream


def probe_accuracy(x, y, num_classes, steps=300, lr=0.5):
    """Softmax-regression probe trained and scored on the same samples."""
    x = np.hstack([x, np.ones((len(x), 1))])
    w = np.zeros((x.shape[1], num_classes))
    onehot = np.eye(num_classes)[y]
    for _ in range(steps):
        z = x @ w
        p = np.exp(z - z.max(axis=1, keepdims=True))
        p /= p.sum(axis=1, keepdims=True)
        w -= lr * x.T @ (p - onehot) / len(x)
    return float(np.mean(np.argmax(x @ w, axis=1) == y))


def dataset(n, dom=0, seed=0, **kw):
    spec = default_generator(**kw)
    return spec, generate_domain(spec, spec.domain(dom), n, RngStream(seed, (dom, 0, "data")))


def test_zero_noise_causal_block_equals_means():
    spec, ds = dataset(50, sigma_c=0.0, rhos=(0.0,))
    np.testing.assert_array_equal(ds.inputs[:, :spec.causal_dim], spec.causal_means[ds.labels])


def test_uncorrelated_spurious_block_is_uninformative():
    spec, ds = dataset(2000, rhos=(0.0,))
    acc = probe_accuracy(ds.inputs[:, spec.causal_dim:], ds.labels, spec.num_classes)
    assert abs(acc - 1.0 / spec.num_classes) <= 0.05


def test_correlated_spurious_block_is_informative():
    spec, ds = dataset(2000, rhos=(0.9,))
    assert probe_accuracy(ds.inputs[:, spec.causal_dim:], ds.labels, spec.num_classes) > 0.8


def test_nearest_mean_on_causal_block():
    spec, ds = dataset(2000, sigma_c=0.3, rhos=(0.9,))  # 0.3 <= 0.1 * 3*sqrt(2)
    xc = ds.inputs[:, :spec.causal_dim]
    d = ((xc[:, None, :] - spec.causal_means[None]) ** 2).sum(axis=2)
    assert np.mean(np.argmin(d, axis=1) == ds.labels) >= 0.99


def test_generation_is_deterministic_and_labels_uniform():
    _, a = dataset(4000, seed=3)
    _, b = dataset(4000, seed=3)
    np.testing.assert_array_equal(a.inputs, b.inputs)
    counts = np.bincount(a.labels, minlength=4) / 4000
    assert np.all(np.abs(counts - 0.25) < 0.03)
    with pytest.raises(PartitionError):
        dataset(0)


def test_code_offsets_are_equidistant():
    spec = default_generator(offset_style="code", offset_scale=5.0)
    nus = np.array([d.spurious_mean for d in spec.domains])
    dist = np.linalg.norm(nus[:, None] - nus[None], axis=2)
    off = dist[~np.eye(4, dtype=bool)]
    np.testing.assert_allclose(off, 5.0 * np.sqrt(2.0))
    assert spec.spurious_dim == 8
    with pytest.raises(ValueError):
        default_generator(offset_style="other")


def test_domain_spec_validation():
    with pytest.raises(ValueError):
        DomainSpec(0, np.zeros(2), rho=1.5)
    with pytest.raises(LookupFailure):
        default_generator().domain(9)


# --- partitioning ------------------------------------------------------------------

def _toy(n, dom=0):
    return LabeledDataset(np.arange(n, dtype=float)[:, None], np.zeros(n), np.full(n, dom))


def test_partition_examples():
    p = partition_clients({0: _toy(100)}, 2)
    assert [len(c.data) for c in p.clients] == [50, 50]
    p = partition_clients({0: _toy(101)}, 2)
    assert [len(c.data) for c in p.clients] == [51, 50]
    p = partition_clients({d: _toy(10, d) for d in range(4)}, 2)
    assert len(p.clients) == 8
    assert [c.domain_id for c in p.clients] == [0, 0, 1, 1, 2, 2, 3, 3]
    with pytest.raises(PartitionError):
        partition_clients({0: _toy(1)}, 2)


@settings(max_examples=50, deadline=None)
@given(st.lists(st.integers(3, 40), min_size=1, max_size=4), st.integers(1, 3))
def test_partition_covers_and_is_disjoint(sizes, k):
    data = {d: LabeledDataset(np.arange(n, dtype=float)[:, None] + 1000 * d, np.zeros(n), np.full(n, d))
            for d, n in enumerate(sizes)}
    p = partition_clients(data, k)
    values = np.concatenate([c.data.inputs.ravel() for c in p.clients])
    full = np.concatenate([ds.inputs.ravel() for ds in data.values()])
    np.testing.assert_array_equal(np.sort(values), np.sort(full))
    assert len(np.unique(values)) == values.size


def test_retain_forget_roles():
    p = partition_clients({d: _toy(10, d) for d in range(4)}, 2)
    rf = split_retain_forget(p, 0)
    assert len(rf.by_role(FORGET)) == 2 and len(rf.by_role(RETAIN)) == 6
    assert all((c.role == FORGET) == (c.domain_id == 0) for c in rf.clients)
    swapped = split_retain_forget(p, 3)
    assert [c.client_id for c in swapped.by_role(FORGET)] == [6, 7]
    with pytest.raises(LookupFailure):
        split_retain_forget(p, 4)


@pytest.mark.parametrize("n,expected", [(100, (90, 10)), (10, (9, 1)), (555, (500, 55))])
def test_train_val_split_sizes(n, expected):
    train, val = train_val_split(_toy(n), RngStream(0, ("split",)))
    assert (len(train), len(val)) == expected
    both = np.concatenate([train.inputs.ravel(), val.inputs.ravel()])
    np.testing.assert_array_equal(np.sort(both), np.arange(n))


def test_train_val_split_errors_and_partition_split():
    with pytest.raises(PartitionError):
        train_val_split(_toy(9), RngStream(0, ("split",)))
    p = split_partition(partition_clients({0: _toy(40)}, 2), seed=1)
    assert all(len(c.train) == 18 and len(c.validation) == 2 for c in p.clients)


def test_dataset_text_roundtrip(tmp_path):
    _, ds = dataset(20, dom=2)
    back, classes = loads_dataset(dumps_dataset(ds, 4))
    assert classes == 4
    np.testing.assert_array_equal(back.inputs, ds.inputs)
    np.testing.assert_array_equal(back.domain_ids, ds.domain_ids)
    write_dataset(tmp_path / "d.txt", ds, 4)
    np.testing.assert_array_equal(read_dataset(tmp_path / "d.txt")[0].labels, ds.labels)
    with pytest.raises(ValueError):
        loads_dataset("garbage\n")
