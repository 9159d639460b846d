"""Prompt compilation.

Two template families ship with the package:

* ``iot``: the masked, progressive prompt that asks a model to write a
  reasoning trace for an interaction chain whose last rating is given as the
  answer but must not be used;
* ``rank``: the recommendation prompt with profile, recently liked items,
  closed chains and the labelled 20-item candidate list.

Templates are plain text with ``{field}`` placeholders; a line of five ``=``
separates the system part from the user part.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from importlib import resources
from typing import Mapping, Sequence

from .corpus import EvalInstance, ItemMeta, UserProfile
from .graph import InteractionChain

TEMPLATE_VERSION = "v1"
SECTION_BREAK = "====="
NO_CHAINS = "No interaction chains available."


class MissingMetadata(KeyError):
    pass


class PromptBudgetExceeded(ValueError):
    pass


@dataclass(frozen=True)
class Vocabulary:
    item_noun: str
    verb: str

    @property
    def fields(self) -> dict[str, str]:
        return {"item_noun": self.item_noun, "Item_noun": self.item_noun.capitalize(),
                "verb": self.verb}


DOMAINS = {
    "movielens": Vocabulary("movie", "watched"),
    "amazon": Vocabulary("item", "bought"),
}


def vocabulary(domain: str) -> Vocabulary:
    if domain in DOMAINS:
        return DOMAINS[domain]
    if domain.startswith("amazon"):
        return DOMAINS["amazon"]
    raise ValueError(f"unknown domain {domain!r}")


@dataclass(frozen=True)
class Template:
    template_id: str
    version: str
    system: str
    user: str

    @classmethod
    def parse(cls, template_id: str, version: str, text: str) -> "Template":
        head, sep, body = text.partition("\n" + SECTION_BREAK + "\n")
        if not sep:
            return cls(template_id, version, "", text)
        return cls(template_id, version, head.strip(), body)


def load_template(template_id: str, version: str | None = None, path=None) -> Template:
    """Packaged template, or the file at ``path`` when overriding.

    A file template without an explicit version is versioned ``file-<hash>``
    from its content, so exported records still say which wording produced them.
    """
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
        if version is None:
            version = "file-" + hashlib.sha256(text.encode()).hexdigest()[:8]
    else:
        version = version or TEMPLATE_VERSION
        text = (resources.files("chainrec") / "templates" / f"{template_id}_{version}.txt").read_text("utf-8")
    return Template.parse(template_id, version, text)


@dataclass(frozen=True)
class PromptText:
    system: str
    user: str
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if not self.user:
            raise ValueError("empty prompt")
        if "template_version" not in self.meta:
            raise ValueError("prompt meta must record template_version")

    @property
    def fingerprint(self) -> str:
        return prompt_fingerprint(self.meta["template_id"], self.meta["template_version"],
                                  self.meta["entity_ids"])

    def messages(self) -> list[dict[str, str]]:
        msgs = []
        if self.system:
            msgs.append({"role": "system", "content": self.system})
        msgs.append({"role": "user", "content": self.user})
        return msgs

    def __len__(self) -> int:
        return len(self.system) + len(self.user)


def prompt_fingerprint(template_id: str, template_version: str, entity_ids: Sequence[str]) -> str:
    payload = json.dumps([template_id, template_version, list(entity_ids)], separators=(",", ":"))
    return hashlib.sha256(payload.encode()).hexdigest()[:16]


@dataclass(frozen=True)
class IotQuery:
    chain: InteractionChain
    question: str
    answer: int

    def __post_init__(self):
        if self.answer != self.chain.r_u0_i1:
            raise ValueError("answer must equal the masked final rating")


# --- rendering helpers -----------------------------------------------------


def _attrs(mapping: Mapping[str, str]) -> str:
    return "; ".join(f"{k}: {v}" for k, v in mapping.items() if v)


def user_info(profiles: Mapping[str, UserProfile], user_id: str) -> str:
    if user_id not in profiles:
        raise MissingMetadata(f"no profile for user {user_id!r}")
    return _attrs(profiles[user_id].demographics) or "no profile information"


def _item(items: Mapping[str, ItemMeta], item_id: str) -> ItemMeta:
    if item_id not in items:
        raise MissingMetadata(f"no metadata for item {item_id!r}")
    return items[item_id]


def item_title(items: Mapping[str, ItemMeta] | None, item_id: str) -> str:
    if items is None:
        return item_id
    return _item(items, item_id).title


def item_line(items: Mapping[str, ItemMeta], item_id: str) -> str:
    meta = _item(items, item_id)
    info = _attrs(meta.attributes)
    return f"{meta.title} ({info})" if info else meta.title


def render_chain(chain: InteractionChain, items: Mapping[str, ItemMeta],
                 profiles: Mapping[str, UserProfile], closed: bool = True) -> str:
    """Arrow notation. ``closed=False`` stops at the final item, hiding the last rating."""
    i0, i1 = _item(items, chain.i0), _item(items, chain.i1)
    hops = [
        f"(Target user)({user_info(profiles, chain.u0)})",
        f"(Rating {chain.r_u0_i0})",
        f"({i0.title})({_attrs(i0.attributes) or 'no information'})",
        f"(Rating {chain.r_u1_i0})",
        f"(User {chain.u1})({user_info(profiles, chain.u1)})",
        f"(Rating {chain.r_u1_i1})",
        f"({i1.title})({_attrs(i1.attributes) or 'no information'})",
    ]
    if closed:
        hops += [f"(Rating {chain.r_u0_i1})", "(Target user)"]
    return " -- ".join(hops)


def forward_unclosed(chain: InteractionChain, items: Mapping[str, ItemMeta] | None = None,
                     domain: str = "movielens") -> IotQuery:
    """Question about the masked last hop of ``chain``; the answer is its true rating."""
    noun = vocabulary(domain).item_noun
    question = f"What is the rating of the {noun} {item_title(items, chain.i1)} given by the target user?"
    return IotQuery(chain, question, chain.r_u0_i1)


def render_iot_prompt(query: IotQuery, items: Mapping[str, ItemMeta],
                      profiles: Mapping[str, UserProfile], domain: str = "movielens",
                      template: Template | None = None) -> PromptText:
    template = template or load_template("iot")
    chain = query.chain
    fields = dict(vocabulary(domain).fields,
                  chain=render_chain(chain, items, profiles, closed=False),
                  question=query.question, answer=query.answer)
    meta = {
        "template_id": template.template_id,
        "template_version": template.version,
        "domain": domain,
        "entity_ids": [chain.u0, chain.i0, chain.u1, chain.i1],
        "chain_ids": [chain.chain_id],
    }
    return PromptText(template.system.format_map(fields), template.user.format_map(fields), meta)


def candidate_labels(n: int = 20) -> list[str]:
    return [f"C{j}" for j in range(1, n + 1)]


def _rank_context(instance: EvalInstance, chains: Sequence[InteractionChain],
                  profiles: Mapping[str, UserProfile], items: Mapping[str, ItemMeta],
                  vocab: Vocabulary) -> str:
    blocks = []
    profile = profiles.get(instance.user_id)
    if profile is not None and profile.demographics:
        blocks.append(f"Target user profile: {_attrs(profile.demographics)}")
    if instance.recent_liked:
        liked = "\n".join(f"- {item_line(items, i)}" for i in instance.recent_liked)
        blocks.append(f"{vocab.item_noun.capitalize()}s the target user recently liked:\n{liked}")
    if chains:
        rendered = "\n".join(f"{j}. {render_chain(c, items, profiles)}" for j, c in enumerate(chains, 1))
        blocks.append(
            "Interaction chains through users with overlapping tastes, written as "
            f"(Target user) -- (Rating r) -- ({vocab.item_noun.capitalize()}) -- (Rating r) -- (User) -- "
            f"(Rating r) -- ({vocab.item_noun.capitalize()}) -- (Rating r) -- (Target user):\n{rendered}")
    else:
        blocks.append(NO_CHAINS)
    return "\n\n".join(blocks)


def render_rank_prompt(instance: EvalInstance, chains: Sequence[InteractionChain],
                       profiles: Mapping[str, UserProfile], items: Mapping[str, ItemMeta],
                       domain: str = "movielens", template: Template | None = None,
                       max_chars: int | None = None) -> PromptText:
    """Ranking prompt for one evaluation instance.

    If ``max_chars`` is set and the prompt is too long, chains are dropped from
    the end one at a time; PromptBudgetExceeded once none are left.
    """
    if len(instance.candidates) != 20:
        raise ValueError(f"expected 20 candidates, got {len(instance.candidates)}")
    if len(chains) > 5:
        raise ValueError("at most 5 chains fit the ranking prompt")
    template = template or load_template("rank")
    vocab = vocabulary(domain)
    labels = candidate_labels(len(instance.candidates))
    cand_block = "\n".join(f"{lab}. {item_line(items, i)}" for lab, i in zip(labels, instance.candidates))

    chains = list(chains)
    while True:
        fields = dict(vocab.fields, context=_rank_context(instance, chains, profiles, items, vocab),
                      candidates=cand_block, n_candidates=len(labels),
                      first_label=labels[0], last_label=labels[-1])
        prompt = PromptText(
            template.system.format_map(fields), template.user.format_map(fields),
            {
                "template_id": template.template_id,
                "template_version": template.version,
                "domain": domain,
                "entity_ids": [instance.user_id, *instance.candidates],
                "chain_ids": [c.chain_id for c in chains],
            })
        if max_chars is None or len(prompt) <= max_chars:
            return prompt
        if not chains:
            raise PromptBudgetExceeded(
                f"ranking prompt for user {instance.user_id} needs {len(prompt)} chars, budget {max_chars}")
        chains.pop()
