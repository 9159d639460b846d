"""
Closed interaction chains
=========================

A chain walks target user -> item -> other user -> second item -> target
user. The other user must share at least two rated items with the target,
so both items carry ratings from both people.
"""

import numpy as np

from chainrec.corpus import filter_users, split_leave_last_positive
from chainrec.graph import build_graph, candidate_users, count_distinct_chains, sample_chains
from chainrec.prompts import render_chain
from chainrec.synthetic import load_bundled

corpus = filter_users(load_bundled())

# held-out targets are removed from the graph so no chain can leak them
split = split_leave_last_positive(corpus)
graph = build_graph(corpus, exclude_edges=[(u, gt) for u, (_, gt) in split.items()])
print(f"{len(graph.user_adj)} users, {len(graph.item_adj)} items, {graph.n_edges} edges")

u0 = corpus.user_ids[3]
cands = candidate_users(graph, u0)
print(f"user {u0}: {len(cands)} users share two or more items, "
      f"{count_distinct_chains(graph, u0)} distinct chains in total")

rng = np.random.default_rng(0)
chains = sample_chains(graph, u0, 5, rng)
for c in chains:
    print()
    print(c.chain_id, "ratings", c.ratings)
    print(render_chain(c, corpus.items, corpus.profiles))
    assert c.is_closed_in(graph)
