"""
Ratings corpus, filtering and the held-out split
================================================

Loads the bundled MovieLens-style synthetic corpus, keeps users with at
least six positive ratings, holds out each user's latest positive item and
draws the 20-item candidate list around it.
"""

from chainrec.corpus import build_eval_instances, filter_users, split_leave_last_positive
from chainrec.synthetic import load_bundled

raw = load_bundled()
print("raw:     ", raw.summary())

# a rating above 3 counts as positive; users need six of them
corpus = filter_users(raw, min_positive=6)
print("filtered:", corpus.summary())

# the last positive (by timestamp, then item id) becomes the target
split = split_leave_last_positive(corpus)
user = corpus.user_ids[0]
history, target = split[user]
print(f"\nuser {user}: {len(history)} history records, held-out item {target}")
print("profile:", corpus.profiles[user].demographics)

# 19 negatives from items the user never rated, shuffled in with the target
inst = build_eval_instances(corpus, [user], seed=0)[0]
print("candidates:", ", ".join(inst.candidates))
print(f"target sits at position {inst.gt_index + 1} of {len(inst.candidates)}")
print("recently liked:", [corpus.items[i].title for i in inst.recent_liked])

# same seed, same instance, whatever order the users are visited in
again = build_eval_instances(corpus, [user], seed=0)[0]
assert again == inst
