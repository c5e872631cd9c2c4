import sys

import numpy as np
import pytest

from hinbal.bench import generate, preset
from hinbal.hin import HinGraph, LabelSpec, NetworkSchema, NodeType, Relation, make_adjacency


def random_hin(rng, n_target=12, n_author=8, n_venue=4, attr_dim=3, p=0.3, self_rel=False, venue_attr=0):
    """Small random HIN: paper (attributed) - author, paper - venue, optionally paper -> paper."""
    types = [NodeType("paper", n_target, attr_dim), NodeType("author", n_author, 0), NodeType("venue", n_venue, venue_attr)]
    rels = [Relation("pa", 0, 1), Relation("pv", 0, 2)]
    adj = [
        make_adjacency(np.argwhere(rng.random((n_target, n_author)) < p), (n_target, n_author)),
        make_adjacency(np.argwhere(rng.random((n_target, n_venue)) < p), (n_target, n_venue)),
    ]
    if self_rel:
        rels.append(Relation("cites", 0, 0))
        adj.append(make_adjacency(np.argwhere(rng.random((n_target, n_target)) < p / 2), (n_target, n_target)))
    attrs = {0: rng.normal(size=(n_target, attr_dim))}
    if venue_attr:
        attrs[2] = rng.normal(size=(n_venue, venue_attr))
    return HinGraph(NetworkSchema(tuple(types), tuple(rels)), tuple(adj), attrs)


def random_labels(rng, n, num_classes=3, train_per_class=(3, 3, 2), minority=(2,)):
    labels = np.repeat(np.arange(num_classes), int(np.ceil(n / num_classes)))[:n]
    labels = rng.permutation(labels)
    train = np.zeros(n, dtype=bool)
    for c, k in enumerate(train_per_class):
        train[np.flatnonzero(labels == c)[:k]] = True
    rest = np.flatnonzero(~train)
    val = np.zeros(n, dtype=bool)
    val[rest[: len(rest) // 3]] = True
    test = ~train & ~val
    return LabelSpec(0, num_classes, labels, train, val, test, minority)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def tiny():
    ds, truth = generate(preset("tiny"))
    return ds, truth


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for n, (ok, detail) in sorted(results.items()):
        terminalreporter.write_line(f"criterion {n}: {'PASS' if ok else 'FAIL'} - {detail}")
