import re
from types import SimpleNamespace

import numpy as np
import pytest

from chainrec.corpus import ItemMeta, UserProfile, build_eval_instances
from chainrec.graph import InteractionChain, build_graph, sample_chains
from chainrec.prompts import (NO_CHAINS, IotQuery, MissingMetadata, PromptBudgetExceeded, candidate_labels,
                              forward_unclosed, load_template, prompt_fingerprint, render_chain,
                              render_iot_prompt, render_rank_prompt)

RULES = ("1. Progressive:", "2. Masked:", "3. No leakage:", "4. Consistency:")

ITEMS = {"A": ItemMeta("A", "Alpha (1999)", {"genres": "Drama"}),
         "B": ItemMeta("B", "Beta (2001)", {"genres": "Comedy"})}
PROFILES = {"u0": UserProfile("u0", {"gender": "female", "age": "25-34"}),
            "u1": UserProfile("u1", {"gender": "male", "age": "18-24"})}


def chain(last=3):
    return InteractionChain("u0", "A", "u1", "B", 5, 4, 2, last)


@pytest.fixture(scope="module")
def graph(corpus):
    return build_graph(corpus)


@pytest.fixture(scope="module")
def instances(corpus):
    return build_eval_instances(corpus, corpus.user_ids[:40], seed=3)


def test_forward_unclosed_answer_and_hops():
    q = forward_unclosed(chain(3), ITEMS)
    assert q.answer == 3
    text = render_chain(q.chain, ITEMS, PROFILES, closed=False)
    assert len(re.findall(r"\(Rating \d\)", text)) == 3
    assert not text.endswith("(Target user)")
    assert q.question == "What is the rating of the movie Beta (2001) given by the target user?"


def test_forward_unclosed_masks_answer():
    a, b = forward_unclosed(chain(1), ITEMS), forward_unclosed(chain(5), ITEMS)
    assert a.question == b.question and a.answer != b.answer


def test_forward_unclosed_swapped_targets_new_item():
    q = forward_unclosed(chain().swapped(), ITEMS)
    assert "Alpha (1999)" in q.question and q.answer == 5


def test_iot_query_rejects_wrong_answer():
    with pytest.raises(ValueError):
        IotQuery(chain(3), "q", 4)


def test_iot_prompt_structure():
    p = render_iot_prompt(forward_unclosed(chain(3), ITEMS), ITEMS, PROFILES)
    for rule in RULES:
        assert rule in p.user
    assert "Movie ratings are integers from 1 to 5" in p.user
    assert "comply with the following requirements" in p.user
    assert "(Target user)" in p.user and " -- (Rating 5) -- " in p.user
    assert p.meta["template_version"] == "v1"
    assert p.meta["entity_ids"] == ["u0", "A", "u1", "B"]


def _answer_lines(text):
    return [ln for ln in text.splitlines() if re.fullmatch(r"Rating [1-5]", ln)]


def test_iot_masking_answer_line_only():
    for r in range(1, 6):
        p = render_iot_prompt(forward_unclosed(chain(r), ITEMS), ITEMS, PROFILES)
        assert _answer_lines(p.user) == [f"Rating {r}"]
        lines = p.user.splitlines()
        assert lines[lines.index("Answer:") + 1] == f"Rating {r}"


def test_iot_masking_only_answer_line_varies():
    texts = [render_iot_prompt(forward_unclosed(chain(r), ITEMS), ITEMS, PROFILES).user.splitlines()
             for r in range(1, 6)]
    diff = {j for j in range(len(texts[0])) if len({t[j] for t in texts}) > 1}
    assert len(diff) == 1
    assert texts[0][diff.pop()] == "Rating 1"


def test_iot_amazon_wording():
    movie = render_iot_prompt(forward_unclosed(chain(), ITEMS), ITEMS, PROFILES)
    item = render_iot_prompt(forward_unclosed(chain(), ITEMS, domain="amazon"), ITEMS, PROFILES, domain="amazon")
    assert "Item ratings are integers from 1 to 5" in item.user
    assert "movie" not in item.user.lower().replace("movies", "")
    assert len(movie.user.splitlines()) == len(item.user.splitlines())
    for rule in RULES:
        assert rule in item.user


def test_iot_missing_metadata_names_entity():
    with pytest.raises(MissingMetadata, match="'B'"):
        render_iot_prompt(forward_unclosed(chain(), ITEMS), {"A": ITEMS["A"]}, PROFILES)
    with pytest.raises(MissingMetadata, match="'u1'"):
        render_iot_prompt(forward_unclosed(chain(), ITEMS), ITEMS, {"u0": PROFILES["u0"]})


def test_iot_deterministic(corpus, graph):
    c = sample_chains(graph, corpus.user_ids[0], 1, np.random.default_rng(0))[0]
    q = forward_unclosed(c, corpus.items)
    a = render_iot_prompt(q, corpus.items, corpus.profiles)
    b = render_iot_prompt(q, corpus.items, corpus.profiles)
    assert a == b and a.fingerprint == b.fingerprint


def test_rank_prompt_sections_in_order(corpus, graph, instances):
    inst = instances[0]
    chains = sample_chains(graph, inst.user_id, 5, np.random.default_rng(0))
    p = render_rank_prompt(inst, chains, corpus.profiles, corpus.items)
    text = p.user
    anchors = ["Target user profile:", "recently liked", "Interaction chains", "C1.", "Ranking: "]
    positions = [text.index(a) for a in anchors]
    assert positions == sorted(positions)
    assert "Reasoning:" in text
    assert p.meta["chain_ids"] == [c.chain_id for c in chains]


def test_rank_prompt_twenty_labels(corpus, instances):
    p = render_rank_prompt(instances[0], [], corpus.profiles, corpus.items)
    labels = re.findall(r"^(C\d+)\. ", p.user, flags=re.M)
    assert labels == candidate_labels(20)


def test_rank_prompt_candidate_completeness(corpus, instances):
    for inst in instances:
        p = render_rank_prompt(inst, [], corpus.profiles, corpus.items)
        block = p.user.split("Candidate movies:\n", 1)[1].split("\n\n", 1)[0]
        for cand in inst.candidates:
            lines = [ln for ln in block.splitlines() if ln.split(". ", 1)[1].startswith(corpus.items[cand].title)]
            assert len(lines) == 1


def test_rank_prompt_no_demographics(corpus, instances):
    profiles = dict(corpus.profiles)
    inst = instances[0]
    profiles[inst.user_id] = UserProfile(inst.user_id, {})
    p = render_rank_prompt(inst, [], profiles, corpus.items, domain="amazon")
    assert "profile" not in p.user.split("Candidate items:")[0].lower().split("rank the candidate")[1]
    assert "Candidate items:" in p.user


def test_rank_prompt_zero_chains(corpus, instances):
    p = render_rank_prompt(instances[0], [], corpus.profiles, corpus.items)
    assert NO_CHAINS in p.user and "(Target user)" not in p.user


def test_rank_prompt_wrong_candidate_count(corpus, instances):
    inst = instances[0]
    # EvalInstance itself refuses 19 candidates, so hand in a look-alike
    short = SimpleNamespace(user_id=inst.user_id, history=inst.history, recent_liked=inst.recent_liked,
                            ground_truth_item=inst.ground_truth_item, candidates=inst.candidates[:19])
    with pytest.raises(ValueError, match="20 candidates"):
        render_rank_prompt(short, [], corpus.profiles, corpus.items)


def test_rank_prompt_too_many_chains(corpus, instances):
    with pytest.raises(ValueError, match="at most 5"):
        render_rank_prompt(instances[0], [chain()] * 6, corpus.profiles, corpus.items)


def test_rank_prompt_budget_drops_chains(corpus, graph, instances):
    inst = instances[1]
    chains = sample_chains(graph, inst.user_id, 5, np.random.default_rng(2))
    full = render_rank_prompt(inst, chains, corpus.profiles, corpus.items)
    three = render_rank_prompt(inst, chains[:3], corpus.profiles, corpus.items)
    p = render_rank_prompt(inst, chains, corpus.profiles, corpus.items, max_chars=len(three))
    assert len(p) <= len(three) < len(full)
    assert p.meta["chain_ids"] == [c.chain_id for c in chains[:3]]
    bare = render_rank_prompt(inst, [], corpus.profiles, corpus.items)
    with pytest.raises(PromptBudgetExceeded):
        render_rank_prompt(inst, chains, corpus.profiles, corpus.items, max_chars=len(bare) - 1)


def test_rank_prompt_deterministic(corpus, graph, instances):
    inst = instances[2]
    chains = sample_chains(graph, inst.user_id, 5, np.random.default_rng(4))
    a = render_rank_prompt(inst, chains, corpus.profiles, corpus.items)
    b = render_rank_prompt(inst, chains, corpus.profiles, corpus.items)
    assert a.user == b.user and a.system == b.system


def test_fingerprint_depends_on_version_and_entities():
    base = prompt_fingerprint("rank", "v1", ["u", "a"])
    assert base == prompt_fingerprint("rank", "v1", ["u", "a"])
    assert base != prompt_fingerprint("rank", "v2", ["u", "a"])
    assert base != prompt_fingerprint("rank", "v1", ["u", "b"])
    assert len(base) == 16


def test_template_override(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("sys {item_noun}\n=====\nQ: {question} A: Rating {answer}\n")
    t = load_template("iot", "custom", path)
    p = render_iot_prompt(forward_unclosed(chain(4), ITEMS), ITEMS, PROFILES, template=t)
    assert p.system == "sys movie"
    assert p.user.startswith("Q: What is the rating") and p.meta["template_version"] == "custom"
    assert p.messages()[0] == {"role": "system", "content": "sys movie"}


def test_file_template_version_tracks_content(tmp_path):
    path = tmp_path / "t.txt"
    path.write_text("Q: {question} A: Rating {answer}\n")
    first = load_template("iot", path=path).version
    assert first.startswith("file-") and first == load_template("iot", path=path).version
    path.write_text("Question: {question} A: Rating {answer}\n")
    assert load_template("iot", path=path).version != first
    assert load_template("iot").version == "v1"
