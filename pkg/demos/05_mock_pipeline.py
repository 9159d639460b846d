"""
The whole pipeline against a scripted model
===========================================

Runs every stage in a temporary directory. The mock model answers every
reasoning prompt correctly and, for ranking prompts, puts the target at a
rank that cycles through 1, 2, 4, 8 and 15.
"""

import json
import tempfile
from pathlib import Path

from chainrec import pipeline
from chainrec.config import load_config
from chainrec.llm import MockGateway
from chainrec.prompts import candidate_labels

LABELS = candidate_labels(20)
work = Path(tempfile.mkdtemp(prefix="chainrec_demo_"))
cfg = load_config(None, ["eval.n_users=40", "eval.n_runs=2", "sft_samples=50", "rl_samples=20",
                         "group_size=4"], workdir=str(work), data__synthetic=True)

_, summary = pipeline.ingest(cfg)
print("ingest:", summary)
ws = pipeline.open_workspace(cfg)
print("eval users:", len(ws.eval_users), " training users:", len(ws.train_users))


def ranking(gt_label, rank):
    rest = [c for c in LABELS if c != gt_label]
    order = rest[: rank - 1] + [gt_label] + rest[rank - 1:]
    return "Reasoning:\nStep 1: profile.\nStep 2: chains.\nStep 3: candidates.\nRanking: " + " ".join(order)


iot_script = {p.fingerprint: f"Step 1: hop one.\nStep 2: hop two.\nFinal answer: Rating {q.answer}"
              for q, p in pipeline.iot_prompts(ws)}
s = pipeline.generate_iot_stage(ws, MockGateway(iot_script))
print(f"\nSFT triplets: {s.accepted} of {s.responses} kept")

targets = {}
for inst in ws.rl_instances() + ws.eval_instances():
    targets[ws.rank_prompt(inst).fingerprint] = LABELS[inst.gt_index]
ranks = [1, 2, 4, 8, 15]
script = {fp: [ranking(gt, ranks[(j + k) % 5]) for k in range(4)] for j, (fp, gt) in enumerate(targets.items())}
s = pipeline.collect_rollouts_stage(ws, MockGateway(script))
print(f"rollouts: {s.accepted} scored samples in {s.prompts} groups")
first = json.loads(ws.cfg.path("rollouts.jsonl").read_text().splitlines()[0])
for smp in first["samples"]:
    print(f"  rank {smp['gt_rank']:2d}  reward {smp['reward']['total']:.2f}  advantage {smp['advantage']:+.3f}")

# two evaluation runs with different scripted models, averaged
always_first = MockGateway(fallback_fn=lambda p: ranking(targets[p.fingerprint], 1))
report = pipeline.eval_stage(ws, [MockGateway(script), always_first])
print("\n" + report.table())

print("\nexport:", pipeline.export_stage(cfg))
print("outputs in", work)
