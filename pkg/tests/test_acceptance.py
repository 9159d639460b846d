"""Acceptance criteria, one test each. Every test records a PASS/FAIL line
(printed in the terminal summary) and also asserts, so a failing criterion
fails the run."""

import json
import math
import re
import time
from collections import Counter

import numpy as np
import pytest

from chainrec import pipeline
from chainrec.cli import main
from chainrec.config import load_config
from chainrec.corpus import build_eval_instances, filter_users, write_instances
from chainrec.graph import _from_edges, build_graph, candidate_users, sample_chain
from chainrec.metrics import hit_ratio_at_k, ndcg_at_k
from chainrec.parsing import extract_ranking
from chainrec.prompts import candidate_labels, forward_unclosed, render_chain, render_iot_prompt
from chainrec.reward import (GrpoConfig, correctness_reward, group_advantages, grpo_surrogate, kl_estimate,
                             step_reward, toy_group, toy_grpo_train, toy_surrogate_grad, total_reward,
                             window_gap)
from chainrec.synthetic import bundled_paths

LABELS = candidate_labels(20)


class Timer:
    def __enter__(self):
        self.start = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.seconds = time.perf_counter() - self.start


def test_c1_reward_table(record_criterion):
    with Timer() as t:
        table = {r: correctness_reward(r) for r in range(1, 21)}
        expected = {r: 1.0 if r == 1 else 0.7 if r <= 3 else 0.5 if r <= 5 else 0.2 if r <= 10 else 0.0
                    for r in range(1, 21)}
        steps_ok = all(step_reward(n) == min(1.0, n / 4) for n in range(11))
        rng = np.random.default_rng(0)
        totals_ok = True
        for _ in range(1000):
            s = float(rng.choice([0.0, 0.25, 0.5, 0.75, 1.0]))
            c = float(rng.choice([0.0, 0.2, 0.5, 0.7, 1.0]))
            totals_ok &= total_reward(s, c).total == s + 2 * c
    ok = table == expected and steps_ok and totals_ok and t.seconds < 1.0
    record_criterion("1 reward-table conformance", ok, f"{t.seconds:.3f}s < 1s")
    assert ok


def _fd_grad(theta, old, ref, actions, adv, cfg, h=1e-5):
    g = np.zeros_like(theta)
    for k in range(theta.size):
        e = np.zeros_like(theta)
        e[k] = h
        g[k] = (grpo_surrogate(toy_group(theta + e, old, ref, actions, adv), cfg)
                - grpo_surrogate(toy_group(theta - e, old, ref, actions, adv), cfg)) / (2 * h)
    return g


def test_c2_grpo_numerics(record_criterion):
    rng = np.random.default_rng(2)
    with Timer() as t:
        worst_mean = worst_std = 0.0
        checked = 0
        for _ in range(1000):
            g = int(rng.integers(2, 17))
            rewards = rng.choice([0.0, 0.2, 0.5, 0.7, 1.0], size=g) * 2 + rng.integers(0, 5, size=g) / 4
            if rewards.std() <= 1e-8:
                continue
            adv = np.array(group_advantages(rewards))
            worst_mean = max(worst_mean, abs(adv.mean()))
            worst_std = max(worst_std, abs(adv.std() - 1))
            checked += 1
        cfg = GrpoConfig()
        worst_rel = 0.0
        for _ in range(10):
            theta = rng.normal(size=20)
            old = theta + rng.normal(scale=0.3, size=20)
            ref = rng.normal(size=20)
            actions = rng.integers(0, 20, size=8)
            adv = group_advantages(rng.normal(size=8))
            a = toy_surrogate_grad(theta, old, ref, actions, adv, cfg)
            n = _fd_grad(theta, old, ref, actions, adv, cfg)
            worst_rel = max(worst_rel, np.linalg.norm(a - n) / np.linalg.norm(n))
        kl_min = min(kl_estimate(-rng.exponential(3, size=m), -rng.exponential(3, size=m))
                     for m in rng.integers(1, 30, size=10_000))
    ok = worst_mean < 1e-9 and worst_std < 1e-9 and worst_rel < 1e-4 and kl_min >= 0 and t.seconds < 30
    record_criterion("2 GRPO numerics", ok,
                     f"{checked} groups, max|mean|={worst_mean:.1e}, max|std-1|={worst_std:.1e}, "
                     f"grad rel err={worst_rel:.1e}, min KL={kl_min:.2e}, {t.seconds:.1f}s < 30s")
    assert ok


def test_c3_toy_grpo_learning(record_criterion):
    with Timer() as t:
        learn = window_gap(toy_grpo_train(20, 500, GrpoConfig(), np.random.default_rng(0), group_size=8))
        anchored = window_gap(toy_grpo_train(20, 500, GrpoConfig(beta=1e3), np.random.default_rng(0),
                                             group_size=8))
    ok = learn >= 0.5 and abs(anchored) < 0.1 and t.seconds < 60
    record_criterion("3 toy GRPO learning", ok,
                     f"gap {learn:.3f} >= 0.5, beta=1e3 gap {anchored:.3f} < 0.1, {t.seconds:.1f}s < 60s")
    assert ok


def _brute_candidates(graph, u0):
    items = list(graph.user_adj[u0])
    out = set()
    for p in items:
        for q in items:
            if p != q:
                out |= set(graph.item_adj[p]) & set(graph.item_adj[q])
    return out - {u0}


def test_c4_candidate_oracle_and_closure(record_criterion):
    rng = np.random.default_rng(4)
    mismatches = unclosed = chains = 0
    with Timer() as t:
        for _ in range(200):
            n_users, n_items = int(rng.integers(2, 51)), int(rng.integers(2, 51))
            density = rng.uniform(0.05, 0.4)
            edges = [(f"u{u}", f"i{i}", int(rng.integers(1, 6)))
                     for u in range(n_users) for i in range(n_items) if rng.random() < density]
            g = _from_edges(edges)
            for u0 in g.user_adj:
                cands = candidate_users(g, u0)
                mismatches += cands != _brute_candidates(g, u0)
                if cands:
                    c = sample_chain(g, u0, rng)
                    chains += 1
                    closed = (g.rating(c.u0, c.i0) == c.r_u0_i0 and g.rating(c.u1, c.i0) == c.r_u1_i0
                              and g.rating(c.u1, c.i1) == c.r_u1_i1 and g.rating(c.u0, c.i1) == c.r_u0_i1
                              and c.i0 != c.i1 and c.u0 != c.u1)
                    unclosed += not closed
    ok = mismatches == 0 and unclosed == 0 and t.seconds < 30
    record_criterion("4 candidate-user oracle equivalence", ok,
                     f"{mismatches} mismatches, {unclosed}/{chains} chains unclosed, {t.seconds:.1f}s < 30s")
    assert ok


def test_c5_metric_identities(record_criterion):
    rng = np.random.default_rng(5)
    with Timer() as t:
        bad = 0
        for _ in range(10_000):
            perm = list(rng.permutation(LABELS))
            gt = LABELS[int(rng.integers(20))]
            rl = extract_ranking("Ranking: " + " ".join(perm), LABELS, ground_truth=gt)
            bad += ndcg_at_k(rl, 1) != hit_ratio_at_k(rl, 1)
        val = ndcg_at_k(2, 3)
    ok = bad == 0 and abs(val - 0.63093) <= 1e-5 and t.seconds < 5
    record_criterion("5 metric identities", ok, f"{bad} ndcg@1 != hit@1, ndcg@3(2)={val:.5f}, {t.seconds:.2f}s < 5s")
    assert ok


def test_c6_protocol_conformance(raw_corpus, tmp_path, record_criterion):
    with Timer() as t:
        # independent scan of the raw ratings file
        positives = Counter()
        for line in bundled_paths()["ratings"].read_text(encoding="iso-8859-1").splitlines():
            user, _, rating, _ = line.split("::")
            positives[user] += int(rating) > 3
        expected = {u for u, n in positives.items() if n >= 6}
        n_users = len(bundled_paths()["users"].read_text(encoding="iso-8859-1").splitlines())
        n_items = len(bundled_paths()["movies"].read_text(encoding="iso-8859-1").splitlines())
        filtered = filter_users(raw_corpus)
        kept = set(filtered.user_ids)
        instances = build_eval_instances(filtered, seed=0)
        shape_ok = all(len(i.candidates) == 20 and i.candidates.count(i.ground_truth_item) == 1
                       and not ({h[0] for h in i.history} & set(i.candidates)) for i in instances)
        write_instances(instances, tmp_path / "a.jsonl")
        write_instances(build_eval_instances(filter_users(raw_corpus), seed=0), tmp_path / "b.jsonl")
        same = (tmp_path / "a.jsonl").read_bytes() == (tmp_path / "b.jsonl").read_bytes()
    ok = (n_users, n_items) == (200, 500) and kept == expected and shape_ok and same and t.seconds < 10
    record_criterion("6 protocol conformance", ok,
                     f"{len(kept)}/{n_users} users kept (scan agrees: {kept == expected}), "
                     f"{len(instances)} instances, byte-identical rerun: {same}, {t.seconds:.2f}s < 10s")
    assert ok


RULES = ("1. Progressive:", "2. Masked:", "3. No leakage:", "4. Consistency:")


def test_c7_masking_soundness(corpus, record_criterion):
    """The digit itself also occurs in the rating legend, the example chain and
    the other hop ratings, so "appears exactly once" is checked as: one
    ``Rating d`` answer line, equal to the answer and directly under
    ``Answer:``; the chain rendering stops before the masked hop; the question
    has no rating; and changing only the answer changes only that line."""
    graph = build_graph(corpus)
    rng = np.random.default_rng(7)
    failures, n = [], 0
    with Timer() as t:
        users = list(corpus.user_ids)
        while n < 500:
            u0 = users[int(rng.integers(len(users)))]
            if not candidate_users(graph, u0):
                continue
            c = sample_chain(graph, u0, rng)
            q = forward_unclosed(c, corpus.items)
            text = render_iot_prompt(q, corpus.items, corpus.profiles).user
            lines = text.splitlines()
            answer_lines = [j for j, ln in enumerate(lines) if re.fullmatch(r"Rating [1-5]", ln)]
            chain_text = render_chain(c, corpus.items, corpus.profiles, closed=False)
            other = forward_unclosed(type(c)(c.u0, c.i0, c.u1, c.i1, c.r_u0_i0, c.r_u1_i0, c.r_u1_i1,
                                             q.answer % 5 + 1), corpus.items)
            other_lines = render_iot_prompt(other, corpus.items, corpus.profiles).user.splitlines()
            changed = [j for j, (a, b) in enumerate(zip(lines, other_lines)) if a != b]
            checks = [
                len(answer_lines) == 1 and lines[answer_lines[0]] == f"Rating {q.answer}",
                answer_lines and lines[answer_lines[0] - 1] == "Answer:",
                len(re.findall(r"\(Rating [1-5]\)", chain_text)) == 3 and not chain_text.endswith("(Target user)"),
                chain_text in text and "Rating" not in q.question,
                changed == answer_lines,
                all(rule in text for rule in RULES),
            ]
            if not all(checks):
                failures.append(c.chain_id)
            n += 1
    ok = not failures and t.seconds < 5
    record_criterion("7 masking soundness", ok, f"{n - len(failures)}/{n} prompts sound, {t.seconds:.2f}s < 5s")
    assert ok


def _brute_rank(text, gt_label):
    """Independent reading of a scripted ranking: labels after the last
    "Ranking:", first occurrence kept, unknown labels dropped, the rest
    appended in candidate order; no marker means last place."""
    if "Ranking:" not in text:
        return 20
    seen = []
    for tok in re.split(r"[\s,>]+", text.rsplit("Ranking:", 1)[1]):
        if tok in LABELS and tok not in seen:
            seen.append(tok)
    seen += [c for c in LABELS if c not in seen]
    return seen.index(gt_label) + 1


def _scripted_ranking(rng, gt_label):
    kind = rng.integers(4)
    perm = list(rng.permutation(LABELS))
    if kind == 0:
        return "I cannot decide."
    if kind == 1:
        perm = perm[:6] + perm[:3]  # truncated with duplicates
    steps = "\n".join(f"Step {j}: look again." for j in range(1, int(rng.integers(0, 7)) + 1))
    return f"Reasoning:\n{steps}\nRanking: {' '.join(perm)}"


def test_c8_end_to_end_mock(tmp_path, record_criterion):
    work = tmp_path / "run"
    sets = ["eval.n_users=60", "eval.n_runs=1", "sft_samples=100", "rl_samples=40", "group_size=4"]
    base = ["--workdir", str(work), *sum((["--set", s] for s in sets), [])]
    rng = np.random.default_rng(8)
    with Timer() as t:
        assert main(["ingest", "--synthetic", *base]) == 0
        assert main(["sample-chains", *base]) == 0
        assert main(["build-prompts", *base]) == 0
        ws = pipeline.open_workspace(load_config(None, sets, workdir=str(work)))

        iot_script = tmp_path / "iot.jsonl"
        with open(iot_script, "w") as fh:
            for rec in map(json.loads, open(work / "iot_prompts.jsonl")):
                fh.write(json.dumps({"fingerprint": rec["fingerprint"],
                                     "text": f"Step 1: a.\nStep 2: b.\nFinal answer: Rating {rec['answer']}"}) + "\n")
        assert main(["generate-iot", *base, "--mock-script", str(iot_script)]) == 0

        scripted = {}
        for inst in ws.rl_instances() + ws.eval_instances():
            gt_label = LABELS[inst.gt_index]
            scripted[ws.rank_prompt(inst).fingerprint] = (gt_label, [_scripted_ranking(rng, gt_label)
                                                                     for _ in range(4)])
        rank_script = tmp_path / "rank.jsonl"
        rank_script.write_text("".join(json.dumps({"fingerprint": fp, "texts": texts}) + "\n"
                                       for fp, (_, texts) in scripted.items()))
        assert main(["collect-rollouts", *base, "--mock-script", str(rank_script)]) == 0
        assert main(["eval", *base, "--mock-script", str(rank_script)]) == 0

    # brute-force scorer over the scripted texts
    eval_prompts = [ws.rank_prompt(i) for i in ws.eval_instances()]
    ranks = [_brute_rank(scripted[p.fingerprint][1][0], scripted[p.fingerprint][0]) for p in eval_prompts]
    brute = {"HitRatio@1": np.mean([r <= 1 for r in ranks]), "HitRatio@3": np.mean([r <= 3 for r in ranks]),
             "NDCG@3": np.mean([1 / math.log2(r + 1) if r <= 3 else 0.0 for r in ranks])}
    summary = [json.loads(x) for x in open(work / "eval_report.jsonl")][-1]["metrics"]
    metrics_ok = all(abs(summary[k] - brute[k]) < 1e-12 for k in brute)

    rollout_ok = True
    for row in map(json.loads, open(work / "rollouts.jsonl")):
        gt_label, texts = scripted[row["fingerprint"]]
        for s, text in zip(row["samples"], texts):
            r = _brute_rank(text, gt_label)
            rollout_ok &= s["gt_rank"] == r and s["reward"]["correctness"] == correctness_reward(r)
    sft = json.loads((work / "sft_summary.json").read_text())
    ok = metrics_ok and rollout_ok and sft["acceptance_rate"] == 1.0 and t.seconds < 120
    record_criterion("8 end-to-end mock run", ok,
                     f"metrics match brute force: {metrics_ok} ({', '.join(f'{k}={v:.4f}' for k, v in brute.items())}), "
                     f"rollout ranks match: {rollout_ok}, {t.seconds:.1f}s < 120s")
    assert ok


def test_c9_reported_numbers_status(record_criterion):
    # Informational: the published HitRatio@1 values come from fine-tuning and
    # RL-training an 8B model, which is outside what this package runs.
    record_criterion("9 published HitRatio@1 (0.404 / 0.586 / 0.460)", True,
                     "not reproducible at desk scale; criteria 1-8 stand in, exported SFT/RL datasets "
                     "are the hand-off for full training", status="INFO")
