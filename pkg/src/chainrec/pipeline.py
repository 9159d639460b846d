"""End-to-end stages: ingest, chain sampling, prompt building, SFT triplet
generation, rollout collection, evaluation, toy GRPO and dataset export.

Every stage reads the canonical corpus written by ``ingest`` and recomputes
its deterministic inputs (user partition, instances, chains) from the seed,
so stages can run in any order after ingest.
"""

from __future__ import annotations

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

from .config import ConfigError, PipelineConfig
from .corpus import (CorpusError, EvalInstance, RatingCorpus, build_eval_instances, derive_seed,
                     filter_users, id_sort_key, parse_amazon, parse_movielens, read_corpus,
                     sample_users, split_leave_last_positive, write_corpus, write_instances)
from .graph import InteractionChain, InteractionGraph, build_graph, sample_chains
from .llm import ChatGateway, EndpointError, GenerationParams, MockGateway, RawResponse
from .metrics import EvalReport, aggregate, plot_curve, user_metrics, write_report
from .parsing import (UnparsableRanking, UnparsableRating, extract_ranking, extract_rating,
                      extract_reasoning, worst_rank_list)
from .prompts import (PromptText, Template, candidate_labels, forward_unclosed, load_template,
                      render_chain, render_iot_prompt, render_rank_prompt)
from .reward import GrpoConfig, group_advantages, score, toy_grpo_train, window_gap
from .synthetic import load_bundled

logger = logging.getLogger(__name__)

CORPUS_FILE = "corpus.jsonl"
INCOMPLETE_SUFFIX = ".incomplete"


def _dump(obj) -> str:
    return json.dumps(obj, sort_keys=True, ensure_ascii=False) + "\n"


class RecordWriter:
    """Single writer for a line-delimited output; flushes every record.

    Leaving the block through EndpointError keeps what was written and drops a
    ``<file>.incomplete`` marker next to it.
    """

    def __init__(self, path: Path):
        self.path = Path(path)
        self.marker = self.path.with_name(self.path.name + INCOMPLETE_SUFFIX)
        self.count = 0

    def __enter__(self):
        self.path.parent.mkdir(parents=True, exist_ok=True)
        self.marker.unlink(missing_ok=True)
        self._fh = open(self.path, "w", encoding="utf-8")
        return self

    def write(self, record: dict):
        self._fh.write(_dump(record))
        self._fh.flush()
        self.count += 1

    def __exit__(self, exc_type, exc, tb):
        self._fh.close()
        if exc_type is not None and issubclass(exc_type, EndpointError):
            self.marker.write_text(_dump({"records_written": self.count, "error": str(exc)}))
        return False


# --- shared state ----------------------------------------------------------


@dataclass
class Workspace:
    """Everything downstream stages derive from the corpus and the seed."""

    cfg: PipelineConfig
    corpus: RatingCorpus
    graph: InteractionGraph
    eval_users: list[str]
    train_users: list[str]

    @property
    def domain(self) -> str:
        return self.cfg.data.domain

    def template(self, kind: str) -> Template:
        path = self.cfg.iot_template if kind == "iot" else self.cfg.rank_template
        return load_template(kind, path=path)

    def chains_for(self, user: str, k: int | None = None) -> list[InteractionChain]:
        rng = np.random.default_rng(derive_seed(self.cfg.seed, "chains", user))
        return sample_chains(self.graph, user, self.cfg.chains_k if k is None else k, rng)

    def eval_instances(self) -> list[EvalInstance]:
        return build_eval_instances(self.corpus, self.eval_users, seed=self.cfg.seed)

    def rl_instances(self) -> list[EvalInstance]:
        users = sample_users(self.train_users, self.cfg.rl_samples, derive_seed(self.cfg.seed, "rl-users"))
        return build_eval_instances(self.corpus, users, seed=derive_seed(self.cfg.seed, "rl"))

    def rank_prompt(self, inst: EvalInstance) -> PromptText:
        return render_rank_prompt(inst, self.chains_for(inst.user_id), self.corpus.profiles,
                                  self.corpus.items, self.domain, self.template("rank"),
                                  self.cfg.max_prompt_chars)

    def provenance(self, prompt: PromptText) -> dict:
        return {"template_id": prompt.meta["template_id"],
                "template_version": prompt.meta["template_version"],
                "seed": self.cfg.seed, "domain": self.domain}


def load_raw_corpus(cfg: PipelineConfig) -> RatingCorpus:
    d = cfg.data
    if d.synthetic:
        return load_bundled()
    if d.domain == "movielens":
        return parse_movielens(d.ratings, d.users, d.movies)
    return parse_amazon(d.reviews, d.meta)


def ingest(cfg: PipelineConfig) -> tuple[RatingCorpus, str]:
    """Parse, filter and write the canonical corpus. Returns (corpus, summary line)."""
    cfg.validate(need_data=True)
    corpus = filter_users(load_raw_corpus(cfg), min_positive=cfg.data.min_positive)
    cfg.out.mkdir(parents=True, exist_ok=True)
    write_corpus(corpus, cfg.path(CORPUS_FILE))
    return corpus, corpus.summary()


def open_workspace(cfg: PipelineConfig) -> Workspace:
    cfg.validate()
    path = cfg.path(CORPUS_FILE)
    if not path.is_file():
        raise ConfigError(f"{path} not found; run ingest first")
    corpus = read_corpus(path)
    split = split_leave_last_positive(corpus)
    # leakage guard: no held-out edge of any user may appear in a chain
    graph = build_graph(corpus, exclude_edges=[(u, gt) for u, (_, gt) in split.items()])
    users = sorted(split, key=id_sort_key)
    eval_users = sample_users(users, cfg.eval.n_users, derive_seed(cfg.seed, "eval-users"))
    if cfg.eval.disjoint_training_users:
        held = set(eval_users)
        train_users = [u for u in users if u not in held]
    else:
        train_users = users
    return Workspace(cfg, corpus, graph, eval_users, train_users)


def make_gateway(cfg: PipelineConfig):
    ep = cfg.endpoint
    if ep.kind == "mock":
        if ep.mock_script:
            return MockGateway.from_file(ep.mock_script, ep.mock_fallback)
        return MockGateway(fallback=ep.mock_fallback)
    return ChatGateway(ep.base_url, ep.model_name, max_inflight=ep.max_inflight,
                       max_attempts=ep.max_attempts, log_path=ep.log_path)


def generation_params(cfg: PipelineConfig, n_samples: int = 1) -> GenerationParams:
    g = cfg.generation
    return GenerationParams(g.temperature, g.top_p, g.max_tokens, n_samples)


def fan_out(gateway, prompts: Sequence[PromptText], params: GenerationParams,
            max_workers: int = 4) -> Iterator[list[RawResponse]]:
    """Completions for each prompt, yielded in input order."""
    if max_workers <= 1 or len(prompts) <= 1:
        for p in prompts:
            yield gateway.complete(p, params)
        return
    with ThreadPoolExecutor(max_workers=max_workers) as pool:
        yield from pool.map(lambda p: gateway.complete(p, params), prompts)


# --- stages ----------------------------------------------------------------


def sample_chains_stage(ws: Workspace) -> Path:
    """Evaluation instances plus the chains each one's prompt will use."""
    instances = ws.eval_instances()
    write_instances(instances, ws.cfg.path("eval_instances.jsonl"))
    out = ws.cfg.path("chains.jsonl")
    with RecordWriter(out) as w:
        for inst in instances:
            w.write({"user_id": inst.user_id, "chains": [c.to_json() for c in ws.chains_for(inst.user_id)],
                     "seed": ws.cfg.seed})
    return out


def build_prompts_stage(ws: Workspace) -> tuple[Path, Path]:
    rank_out, iot_out = ws.cfg.path("rank_prompts.jsonl"), ws.cfg.path("iot_prompts.jsonl")
    with RecordWriter(rank_out) as w:
        for inst in ws.eval_instances():
            p = ws.rank_prompt(inst)
            w.write({"fingerprint": p.fingerprint, "system": p.system, "user": p.user,
                     "meta": dict(p.meta), **ws.provenance(p)})
    with RecordWriter(iot_out) as w:
        for q, p in iot_prompts(ws):
            w.write({"fingerprint": p.fingerprint, "system": p.system, "user": p.user,
                     "answer": q.answer, "meta": dict(p.meta), **ws.provenance(p)})
    return rank_out, iot_out


def iot_prompts(ws: Workspace):
    """(query, prompt) pairs over training users until ``sft_samples`` are collected."""
    order = np.random.default_rng(derive_seed(ws.cfg.seed, "sft-users")).permutation(len(ws.train_users))
    template = ws.template("iot")
    out = []
    for j in order:
        user = ws.train_users[j]
        for chain in ws.chains_for(user, ws.cfg.sft_chains_per_user):
            q = forward_unclosed(chain, ws.corpus.items, ws.domain)
            out.append((q, render_iot_prompt(q, ws.corpus.items, ws.corpus.profiles, ws.domain, template)))
            if len(out) >= ws.cfg.sft_samples:
                return out
    return out


def sft_question(q, ws: Workspace) -> str:
    chain = render_chain(q.chain, ws.corpus.items, ws.corpus.profiles, closed=False)
    return f"Interaction chain:\n{chain}\n\nQuestion:\n{q.question}"


@dataclass
class StageSummary:
    prompts: int = 0
    responses: int = 0
    accepted: int = 0
    discarded_groups: int = 0
    complete: bool = True

    @property
    def acceptance_rate(self) -> float:
        return self.accepted / self.responses if self.responses else 0.0

    def to_json(self) -> dict:
        return {**asdict(self), "acceptance_rate": self.acceptance_rate}


def generate_iot_stage(ws: Workspace, gateway) -> StageSummary:
    """Collect reasoning traces for masked chain prompts and keep only those
    whose final rating matches the known answer."""
    pairs = iot_prompts(ws)
    summary = StageSummary(prompts=len(pairs))
    params = generation_params(ws.cfg)
    out = ws.cfg.path("sft_triplets.jsonl")
    try:
        with RecordWriter(out) as w:
            results = fan_out(gateway, [p for _, p in pairs], params, ws.cfg.endpoint.max_inflight)
            for (q, prompt), responses in zip(pairs, results):
                for resp in responses:
                    if not resp.ok:
                        continue
                    summary.responses += 1
                    trace = extract_reasoning(resp.text)
                    try:
                        rating = extract_rating(resp.text)
                    except UnparsableRating:
                        continue
                    reasoning = trace.raw_span.strip()
                    if rating != q.answer or not reasoning:
                        continue
                    summary.accepted += 1
                    w.write({
                        "question": sft_question(q, ws),
                        "reasoning": reasoning,
                        "answer": f"Rating {q.answer}",
                        "meta": {**ws.provenance(prompt), "chain_ids": [q.chain.chain_id],
                                 "fingerprint": prompt.fingerprint, "num_steps": trace.num_steps},
                    })
    except EndpointError:
        summary.complete = False
        raise
    finally:
        ws.cfg.path("sft_summary.json").write_text(_dump(summary.to_json()))
    return summary


def score_ranking_response(text: str, labels: Sequence[str], gt_label: str) -> dict:
    """Reasoning count, ground-truth rank and reward of one ranking completion.
    Unparsable rankings count as the ground truth in last place."""
    trace = extract_reasoning(text)
    try:
        ranked = extract_ranking(text, labels, gt_label)
        parse_error = False
    except UnparsableRanking:
        ranked = worst_rank_list(labels, gt_label)
        parse_error = True
    reward = score(trace.num_steps, ranked.gt_rank)
    return {"num_steps": trace.num_steps, "gt_rank": ranked.gt_rank, "repaired": ranked.repaired,
            "parse_error": parse_error, "order": list(ranked.order), "reward": reward.to_json()}


def rollout_group(responses: Sequence[RawResponse], labels: Sequence[str], gt_label: str,
                  cfg: GrpoConfig) -> dict | None:
    """Score a group of completions. Failed samples are dropped; a group left
    with fewer than two members is discarded (returns None)."""
    kept = [r for r in responses if r.ok]
    if len(kept) < 2:
        return None
    samples = []
    for r in kept:
        s = score_ranking_response(r.text, labels, gt_label)
        del s["order"]
        samples.append({"text": r.text, "finish_reason": r.finish_reason, **s})
    adv = group_advantages([s["reward"]["total"] for s in samples], cfg.std_floor)
    for s, a in zip(samples, adv):
        s["advantage"] = a
    return {"samples": samples, "dropped": len(responses) - len(kept), "group_size": len(kept)}


def collect_rollouts_stage(ws: Workspace, gateway) -> StageSummary:
    instances = ws.rl_instances()
    prompts = [ws.rank_prompt(inst) for inst in instances]
    params = generation_params(ws.cfg, ws.cfg.group_size)
    grpo = GrpoConfig(ws.cfg.grpo.eps_clip, ws.cfg.grpo.beta, ws.cfg.grpo.std_floor)
    summary = StageSummary(prompts=len(prompts))
    out = ws.cfg.path("rollouts.jsonl")
    try:
        with RecordWriter(out) as w:
            results = fan_out(gateway, prompts, params, max(1, ws.cfg.endpoint.max_inflight // ws.cfg.group_size))
            for inst, prompt, responses in zip(instances, prompts, results):
                labels = candidate_labels(len(inst.candidates))
                gt_label = labels[inst.gt_index]
                summary.responses += len(responses)
                group = rollout_group(responses, labels, gt_label, grpo)
                if group is None:
                    summary.discarded_groups += 1
                    continue
                summary.accepted += group["group_size"]
                w.write({
                    "fingerprint": prompt.fingerprint,
                    "user_id": inst.user_id,
                    "system": prompt.system,
                    "prompt": prompt.user,
                    "candidates": list(inst.candidates),
                    "ground_truth_item": inst.ground_truth_item,
                    "ground_truth_label": gt_label,
                    **group,
                    **ws.provenance(prompt),
                })
    except EndpointError:
        summary.complete = False
        raise
    finally:
        ws.cfg.path("rollouts_summary.json").write_text(_dump(summary.to_json()))
    return summary


def run_eval(instances: Sequence[EvalInstance], prompts: Sequence[PromptText],
             gateways: Sequence, params: GenerationParams,
             max_workers: int = 4) -> tuple[EvalReport, list[dict]]:
    """Score each run's gateway on every instance. ``len(gateways)`` is the run count."""
    runs, rows = [], []
    for run, gateway in enumerate(gateways, 1):
        per_user = {}
        results = fan_out(gateway, prompts, params, max_workers)
        for inst, responses in zip(instances, results):
            labels = candidate_labels(len(inst.candidates))
            gt_label = labels[inst.gt_index]
            ok = [r for r in responses if r.ok]
            if ok:
                scored = score_ranking_response(ok[0].text, labels, gt_label)
            else:
                scored = {"gt_rank": len(labels), "parse_error": True, "repaired": True}
            metrics = user_metrics(scored["gt_rank"])
            per_user[inst.user_id] = metrics
            rows.append({"run": run, "user_id": inst.user_id, "gt_rank": scored["gt_rank"],
                         "parse_error": scored["parse_error"], "repaired": scored["repaired"],
                         "metrics": metrics})
        runs.append(per_user)
    return aggregate(runs, len(gateways)), rows


def eval_stage(ws: Workspace, gateways: Sequence | None = None) -> EvalReport:
    instances = ws.eval_instances()
    if not instances:
        raise CorpusError("no evaluation users after filtering")
    prompts = [ws.rank_prompt(inst) for inst in instances]
    if gateways is None:
        gateway = make_gateway(ws.cfg)
        gateways = [gateway] * ws.cfg.eval.n_runs
    report, rows = run_eval(instances, prompts, gateways, generation_params(ws.cfg),
                            ws.cfg.endpoint.max_inflight)
    write_report(report, ws.cfg.path("eval_report.jsonl"))
    with RecordWriter(ws.cfg.path("eval_users.jsonl")) as w:
        for row in rows:
            w.write({**row, "seed": ws.cfg.seed, "template_version": prompts[0].meta["template_version"]})
    ws.cfg.path("eval_table.txt").write_text(report.table() + "\n")
    return report


def toy_grpo_stage(cfg: PipelineConfig) -> tuple[list, float]:
    t = cfg.toy
    traj = toy_grpo_train(t.policy_dim, t.steps, GrpoConfig(cfg.grpo.eps_clip, cfg.grpo.beta, cfg.grpo.std_floor),
                          np.random.default_rng(derive_seed(cfg.seed, "toy-grpo")), t.group_size,
                          t.learning_rate, t.inner_epochs, t.max_grad_norm)
    cfg.out.mkdir(parents=True, exist_ok=True)
    with RecordWriter(cfg.path("toy_grpo.jsonl")) as w:
        for p in traj:
            w.write({**asdict(p), "seed": cfg.seed})
    steps = [p.step for p in traj]
    window = max(1, len(traj) // 50)
    smooth = np.convolve([p.mean_reward for p in traj], np.ones(window) / window, mode="same")
    plot_curve(steps, {"group mean reward": [p.mean_reward for p in traj],
                       f"moving average ({window})": smooth,
                       "expected reward": [p.expected_reward for p in traj]},
               cfg.path("toy_grpo.svg"), title="toy GRPO bandit")
    return traj, window_gap(traj)


def export_stage(cfg: PipelineConfig) -> dict[str, int]:
    """Trainer-ready datasets from the triplet and rollout files."""
    counts = {}
    export_dir = cfg.path("export")
    export_dir.mkdir(parents=True, exist_ok=True)
    trip = cfg.path("sft_triplets.jsonl")
    if trip.is_file():
        with RecordWriter(export_dir / "sft_chat.jsonl") as w:
            for rec in _read_jsonl(trip):
                w.write({
                    "messages": [
                        {"role": "user", "content": rec["question"]},
                        {"role": "assistant",
                         "content": f"{rec['reasoning']}\n\nFinal answer: {rec['answer']}"},
                    ],
                    "meta": rec["meta"],
                })
            counts["sft_chat"] = w.count
    roll = cfg.path("rollouts.jsonl")
    if roll.is_file():
        with RecordWriter(export_dir / "rl_prompts.jsonl") as wp, \
                RecordWriter(export_dir / "rl_samples.jsonl") as ws_:
            for rec in _read_jsonl(roll):
                meta = {k: rec[k] for k in ("template_id", "template_version", "seed", "domain")}
                messages = ([{"role": "system", "content": rec["system"]}] if rec["system"] else []) + \
                    [{"role": "user", "content": rec["prompt"]}]
                wp.write({"fingerprint": rec["fingerprint"], "messages": messages,
                          "ground_truth_label": rec["ground_truth_label"], "meta": meta})
                for s in rec["samples"]:
                    ws_.write({"fingerprint": rec["fingerprint"], "completion": s["text"],
                               "reward": s["reward"]["total"], "advantage": s["advantage"],
                               "gt_rank": s["gt_rank"], "meta": meta})
            counts["rl_prompts"], counts["rl_samples"] = wp.count, ws_.count
    return counts


def _read_jsonl(path) -> Iterable[dict]:
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.strip():
                yield json.loads(line)
