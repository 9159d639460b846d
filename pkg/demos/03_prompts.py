"""
Masked reasoning prompts and ranking prompts
============================================

The reasoning prompt hides the last hop of a chain and hands the model the
answer with instructions not to use it. The ranking prompt lists the user's
profile, liked items, chains and the labelled candidates.
"""

import numpy as np

from chainrec.corpus import build_eval_instances, filter_users
from chainrec.graph import build_graph, sample_chains
from chainrec.prompts import forward_unclosed, render_iot_prompt, render_rank_prompt
from chainrec.synthetic import load_bundled

corpus = filter_users(load_bundled())
graph = build_graph(corpus)
user = corpus.user_ids[5]
chains = sample_chains(graph, user, 5, np.random.default_rng(1))

q = forward_unclosed(chains[0], corpus.items)
print("question:", q.question)
print("answer:  ", q.answer)

iot = render_iot_prompt(q, corpus.items, corpus.profiles)
print("\n--- reasoning prompt (system) ---\n" + iot.system)
print("--- reasoning prompt (user) ---\n" + iot.user)
print("fingerprint:", iot.fingerprint)

inst = build_eval_instances(corpus, [user], seed=0)[0]
rank = render_rank_prompt(inst, chains, corpus.profiles, corpus.items)
print("\n--- ranking prompt ---\n" + rank.user)

# a character budget drops chains from the end before giving up
short = render_rank_prompt(inst, chains, corpus.profiles, corpus.items, max_chars=len(rank) - 1)
print(f"\nbudget {len(rank) - 1} chars: kept {len(short.meta['chain_ids'])} of {len(chains)} chains")
