"""Bipartite user-item graph and closed four-hop interaction chains.

A chain ``u0 -> i0 -> u1 -> i1 -> u0`` starts and ends at the target user:
both items lie in the intersection of the two users' item sets, so every
hop is a real rating.
"""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass
from itertools import combinations
from typing import Iterable, Mapping

import numpy as np

from .corpus import RatingCorpus, id_sort_key


class UnknownUser(KeyError):
    pass


class NoChainAvailable(ValueError):
    pass


@dataclass(frozen=True)
class InteractionGraph:
    """``user_adj[u][i] == item_adj[i][u] == rating`` for every edge."""

    user_adj: Mapping[str, Mapping[str, int]]
    item_adj: Mapping[str, Mapping[str, int]]

    def rating(self, user: str, item: str) -> int | None:
        return self.user_adj.get(user, {}).get(item)

    def has_edge(self, user: str, item: str) -> bool:
        return item in self.user_adj.get(user, {})

    @property
    def n_edges(self) -> int:
        return sum(len(v) for v in self.user_adj.values())

    def edges(self) -> Iterable[tuple[str, str, int]]:
        for u in sorted(self.user_adj, key=id_sort_key):
            adj = self.user_adj[u]
            for i in sorted(adj, key=id_sort_key):
                yield u, i, adj[i]


def build_graph(corpus: RatingCorpus,
                exclude_edges: Iterable[tuple[str, str]] = ()) -> InteractionGraph:
    """Adjacency from a corpus. Repeated (user, item) pairs keep the latest rating.

    ``exclude_edges`` removes (user, item) pairs entirely; pass each
    evaluation user's held-out ground truth so chains cannot leak it.
    """
    excluded = set(exclude_edges)
    latest: dict[tuple[str, str], tuple[tuple, int]] = {}
    for rec in corpus.records:
        key = (rec.user_id, rec.item_id)
        if key in excluded:
            continue
        prev = latest.get(key)
        if prev is None or rec.order_key > prev[0]:
            latest[key] = (rec.order_key, rec.rating)
    return _from_edges((u, i, r) for (u, i), (_, r) in latest.items())


def _from_edges(edges: Iterable[tuple[str, str, int]]) -> InteractionGraph:
    user_adj: dict[str, dict[str, int]] = {}
    item_adj: dict[str, dict[str, int]] = {}
    for u, i, r in edges:
        user_adj.setdefault(u, {})[i] = r
        item_adj.setdefault(i, {})[u] = r
    return InteractionGraph(user_adj, item_adj)


def candidate_users(graph: InteractionGraph, u0: str) -> set[str]:
    """Users other than ``u0`` who share at least two items with it.

    Identical to the union over item pairs ``p != q`` of ``U_p & U_q``; counting
    co-ratings avoids the quadratic pass over pairs.
    """
    if u0 not in graph.user_adj:
        raise UnknownUser(f"unknown user {u0!r}")
    counts: Counter = Counter()
    for item in graph.user_adj[u0]:
        counts.update(graph.item_adj[item].keys())
    counts.pop(u0, None)
    return {u for u, c in counts.items() if c >= 2}


@dataclass(frozen=True)
class InteractionChain:
    u0: str
    i0: str
    u1: str
    i1: str
    r_u0_i0: int
    r_u1_i0: int
    r_u1_i1: int
    r_u0_i1: int

    @property
    def ratings(self) -> tuple[int, int, int, int]:
        return (self.r_u0_i0, self.r_u1_i0, self.r_u1_i1, self.r_u0_i1)

    @property
    def key(self) -> tuple[str, frozenset]:
        """Identity used for deduplication: hop order of the two items is ignored."""
        return (self.u1, frozenset((self.i0, self.i1)))

    @property
    def chain_id(self) -> str:
        return f"{self.u0}>{self.i0}>{self.u1}>{self.i1}"

    def is_closed_in(self, graph: InteractionGraph) -> bool:
        return (self.u0 != self.u1 and self.i0 != self.i1
                and graph.rating(self.u0, self.i0) == self.r_u0_i0
                and graph.rating(self.u1, self.i0) == self.r_u1_i0
                and graph.rating(self.u1, self.i1) == self.r_u1_i1
                and graph.rating(self.u0, self.i1) == self.r_u0_i1)

    def swapped(self) -> "InteractionChain":
        return InteractionChain(self.u0, self.i1, self.u1, self.i0,
                                self.r_u0_i1, self.r_u1_i1, self.r_u1_i0, self.r_u0_i0)

    def to_json(self) -> dict:
        return {"u0": self.u0, "i0": self.i0, "u1": self.u1, "i1": self.i1,
                "ratings": list(self.ratings)}

    @classmethod
    def from_json(cls, obj: dict) -> "InteractionChain":
        return cls(obj["u0"], obj["i0"], obj["u1"], obj["i1"], *map(int, obj["ratings"]))


def _make_chain(graph: InteractionGraph, u0: str, u1: str, i0: str, i1: str) -> InteractionChain:
    return InteractionChain(u0, i0, u1, i1,
                            graph.user_adj[u0][i0], graph.user_adj[u1][i0],
                            graph.user_adj[u1][i1], graph.user_adj[u0][i1])


def shared_items(graph: InteractionGraph, u0: str, u1: str) -> list[str]:
    common = graph.user_adj[u0].keys() & graph.user_adj[u1].keys()
    return sorted(common, key=id_sort_key)


def sample_chain(graph: InteractionGraph, u0: str, rng: np.random.Generator) -> InteractionChain:
    """Draw ``u1`` uniformly from the candidate users, then an ordered pair of
    distinct shared items uniformly (so both hop orders are equally likely)."""
    cands = sorted(candidate_users(graph, u0), key=id_sort_key)
    if not cands:
        raise NoChainAvailable(f"no chain available for user {u0!r}")
    u1 = cands[int(rng.integers(len(cands)))]
    shared = shared_items(graph, u0, u1)
    a, b = rng.choice(len(shared), size=2, replace=False)
    return _make_chain(graph, u0, u1, shared[a], shared[b])


def count_distinct_chains(graph: InteractionGraph, u0: str) -> int:
    total = 0
    for u1 in candidate_users(graph, u0):
        n = len(graph.user_adj[u0].keys() & graph.user_adj[u1].keys())
        total += n * (n - 1) // 2
    return total


def sample_chains(graph: InteractionGraph, u0: str, k: int = 5,
                  rng: np.random.Generator | None = None,
                  max_attempts_factor: int = 50) -> list[InteractionChain]:
    """Up to ``k`` chains, distinct on (u1, {i0, i1}).

    Shorter than ``k`` only when the neighbourhood holds fewer distinct chains.
    Rejection sampling is used while duplicates are rare; if it stalls the
    remaining chains are drawn from an explicit enumeration.
    """
    if k <= 0 or u0 not in graph.user_adj:
        return []
    rng = rng if rng is not None else np.random.default_rng()
    supply = count_distinct_chains(graph, u0)
    if supply == 0:
        return []
    want = min(k, supply)
    out: list[InteractionChain] = []
    seen = set()
    for _ in range(max_attempts_factor * want):
        if len(out) == want:
            return out
        chain = sample_chain(graph, u0, rng)
        if chain.key not in seen:
            seen.add(chain.key)
            out.append(chain)
    # tiny or skewed neighbourhoods: enumerate what is left
    rest = []
    for u1 in sorted(candidate_users(graph, u0), key=id_sort_key):
        for a, b in combinations(shared_items(graph, u0, u1), 2):
            if (u1, frozenset((a, b))) not in seen:
                rest.append((u1, a, b))
    for j in rng.permutation(len(rest))[: want - len(out)]:
        u1, a, b = rest[j]
        if rng.random() < 0.5:
            a, b = b, a
        out.append(_make_chain(graph, u0, u1, a, b))
    return out


def write_edges(graph: InteractionGraph, path) -> None:
    """Tab-separated ``user item rating`` lines in id order."""
    with open(path, "w", encoding="utf-8") as fh:
        for u, i, r in graph.edges():
            fh.write(f"{u}\t{i}\t{r}\n")


def read_edges(path) -> InteractionGraph:
    edges = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            parts = line.rstrip("\n").split("\t")
            if len(parts) != 3:
                raise ValueError(f"{path}:{lineno}: expected 3 tab-separated fields")
            edges.append((parts[0], parts[1], int(parts[2])))
    return _from_edges(edges)
