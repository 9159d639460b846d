"""Rating corpora: parsing, user filtering, leave-last-positive split and
20-item candidate sets for ranking evaluation."""

from __future__ import annotations

import hashlib
import json
import logging
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np

logger = logging.getLogger(__name__)

POSITIVE_THRESHOLD = 3
PLACEHOLDER_TITLE = "unknown"

ML_AGE_BANDS = {
    "1": "Under 18",
    "18": "18-24",
    "25": "25-34",
    "35": "35-44",
    "45": "45-49",
    "50": "50-55",
    "56": "56+",
}

ML_OCCUPATIONS = {
    "0": "other",
    "1": "academic/educator",
    "2": "artist",
    "3": "clerical/admin",
    "4": "college/grad student",
    "5": "customer service",
    "6": "doctor/health care",
    "7": "executive/managerial",
    "8": "farmer",
    "9": "homemaker",
    "10": "K-12 student",
    "11": "lawyer",
    "12": "programmer",
    "13": "retired",
    "14": "sales/marketing",
    "15": "scientist",
    "16": "self-employed",
    "17": "technician/engineer",
    "18": "tradesman/craftsman",
    "19": "unemployed",
    "20": "writer",
}

ML_GENDERS = {"M": "male", "F": "female"}


class CorpusError(ValueError):
    """Malformed input data. Carries the file and 1-based line number when known."""

    def __init__(self, message: str, path: str | Path | None = None, lineno: int | None = None):
        self.path = str(path) if path is not None else None
        self.lineno = lineno
        self.reason = message
        where = ""
        if self.path is not None:
            where = f"{self.path}:{lineno}: " if lineno is not None else f"{self.path}: "
        super().__init__(where + message)


class CandidatePoolExhausted(ValueError):
    pass


def id_sort_key(value: str) -> tuple[int, int | str]:
    """Numeric ids order numerically, everything else lexicographically after them."""
    if value.isdigit():
        return (0, int(value))
    return (1, value)


@dataclass(frozen=True)
class RatingRecord:
    user_id: str
    item_id: str
    rating: int
    timestamp: int

    def __post_init__(self):
        if isinstance(self.rating, bool) or not isinstance(self.rating, int):
            raise CorpusError(f"rating must be an integer, got {self.rating!r}")
        if not 1 <= self.rating <= 5:
            raise CorpusError("rating out of range")
        if self.timestamp < 0:
            raise CorpusError("negative timestamp")

    @property
    def order_key(self):
        return (self.timestamp, id_sort_key(self.item_id))


@dataclass(frozen=True)
class UserProfile:
    user_id: str
    demographics: Mapping[str, str] = field(default_factory=dict)


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    title: str
    attributes: Mapping[str, str] = field(default_factory=dict)

    def __post_init__(self):
        if not self.title:
            raise CorpusError(f"item {self.item_id} has an empty title")


@dataclass(frozen=True)
class RatingCorpus:
    """Immutable bag of ratings plus user and item side information.

    ``warnings`` counts soft problems seen while parsing (for instance
    rated items without metadata) and does not take part in equality.
    """

    records: tuple[RatingRecord, ...] = ()
    profiles: Mapping[str, UserProfile] = field(default_factory=dict)
    items: Mapping[str, ItemMeta] = field(default_factory=dict)
    warnings: Counter = field(default_factory=Counter, compare=False)

    def validate(self) -> "RatingCorpus":
        seen = set()
        for rec in self.records:
            if rec.user_id not in self.profiles:
                raise CorpusError(f"unknown user id {rec.user_id!r}")
            if rec.item_id not in self.items:
                raise CorpusError(f"unknown item id {rec.item_id!r}")
            key = (rec.user_id, rec.item_id, rec.timestamp)
            if key in seen:
                raise CorpusError(f"duplicate record {key}")
            seen.add(key)
        return self

    @cached_property
    def by_user(self) -> dict[str, list[RatingRecord]]:
        """Records grouped per user, each list in (timestamp, item_id) order."""
        grouped: dict[str, list[RatingRecord]] = defaultdict(list)
        for rec in self.records:
            grouped[rec.user_id].append(rec)
        return {u: sorted(recs, key=lambda r: r.order_key) for u, recs in grouped.items()}

    @cached_property
    def item_universe(self) -> list[str]:
        universe = set(self.items) | {r.item_id for r in self.records}
        return sorted(universe, key=id_sort_key)

    @property
    def user_ids(self) -> list[str]:
        return sorted(self.by_user, key=id_sort_key)

    def summary(self) -> str:
        n_items = len({r.item_id for r in self.records})
        return f"{len(self.by_user)} users, {n_items} items, {len(self.records)} ratings"


@dataclass(frozen=True)
class EvalInstance:
    user_id: str
    history: tuple[tuple[str, int, int], ...]
    ground_truth_item: str
    candidates: tuple[str, ...]
    recent_liked: tuple[str, ...]

    def __post_init__(self):
        if len(self.candidates) != 20:
            raise ValueError(f"expected 20 candidates, got {len(self.candidates)}")
        if self.candidates.count(self.ground_truth_item) != 1:
            raise ValueError("ground truth must appear exactly once among candidates")

    @property
    def gt_index(self) -> int:
        return self.candidates.index(self.ground_truth_item)

    def to_json(self) -> dict:
        return {
            "user_id": self.user_id,
            "history": [list(h) for h in self.history],
            "ground_truth_item": self.ground_truth_item,
            "candidates": list(self.candidates),
            "recent_liked": list(self.recent_liked),
        }

    @classmethod
    def from_json(cls, obj: dict) -> "EvalInstance":
        return cls(
            user_id=obj["user_id"],
            history=tuple((h[0], int(h[1]), int(h[2])) for h in obj["history"]),
            ground_truth_item=obj["ground_truth_item"],
            candidates=tuple(obj["candidates"]),
            recent_liked=tuple(obj["recent_liked"]),
        )


def derive_seed(global_seed: int, *keys: object) -> int:
    """Stable 63-bit seed from a global seed and any number of keys."""
    h = hashlib.blake2b(digest_size=8)
    h.update(str(int(global_seed)).encode())
    for key in keys:
        h.update(b"\x1f")
        h.update(str(key).encode())
    return int.from_bytes(h.digest(), "big") >> 1


# --- parsing ---------------------------------------------------------------


def _split_dat(line: str, n_fields: int, path, lineno: int) -> list[str]:
    parts = line.rstrip("\r\n").split("::")
    if len(parts) != n_fields:
        raise CorpusError(f"expected {n_fields} '::'-separated fields, got {len(parts)}", path, lineno)
    return parts


def _parse_int(text: str, what: str, path, lineno: int) -> int:
    try:
        return int(text)
    except ValueError:
        raise CorpusError(f"non-integer {what} {text!r}", path, lineno) from None


def parse_movielens(ratings_path, users_path, movies_path) -> RatingCorpus:
    """Read the MovieLens-1M ``*.dat`` files (ISO-8859-1, ``::`` separated)."""
    profiles: dict[str, UserProfile] = {}
    with open(users_path, encoding="iso-8859-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            uid, gender, age, occupation, _zip = _split_dat(line, 5, users_path, lineno)
            demo = {
                "gender": ML_GENDERS.get(gender, gender),
                "age": ML_AGE_BANDS.get(age, age),
                "occupation": ML_OCCUPATIONS.get(occupation, occupation),
            }
            profiles[uid] = UserProfile(uid, demo)

    items: dict[str, ItemMeta] = {}
    with open(movies_path, encoding="iso-8859-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            mid, title, genres = _split_dat(line, 3, movies_path, lineno)
            if not title:
                raise CorpusError("empty title", movies_path, lineno)
            items[mid] = ItemMeta(mid, title, {"genres": genres.replace("|", ", ")})

    records = []
    with open(ratings_path, encoding="iso-8859-1") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            uid, mid, rating, ts = _split_dat(line, 4, ratings_path, lineno)
            rating_i = _parse_int(rating, "rating", ratings_path, lineno)
            ts_i = _parse_int(ts, "timestamp", ratings_path, lineno)
            if not 1 <= rating_i <= 5:
                raise CorpusError("rating out of range", ratings_path, lineno)
            if ts_i < 0:
                raise CorpusError("negative timestamp", ratings_path, lineno)
            if uid not in profiles:
                raise CorpusError(f"unknown user id {uid!r}", ratings_path, lineno)
            if mid not in items:
                raise CorpusError(f"unknown movie id {mid!r}", ratings_path, lineno)
            records.append(RatingRecord(uid, mid, rating_i, ts_i))

    return RatingCorpus(tuple(records), profiles, items).validate()


def _first(obj: dict, *keys):
    for k in keys:
        if k in obj and obj[k] is not None:
            return obj[k]
    return None


def _amazon_rating(value, path, lineno) -> int:
    try:
        f = float(value)
    except (TypeError, ValueError):
        raise CorpusError(f"unparsable rating {value!r}", path, lineno) from None
    if not f.is_integer():
        raise CorpusError("non-integer rating", path, lineno)
    r = int(f)
    if not 1 <= r <= 5:
        raise CorpusError("rating out of range", path, lineno)
    return r


def _amazon_categories(raw) -> str:
    if raw is None:
        return ""
    if isinstance(raw, str):
        return raw
    flat = []
    for entry in raw:
        if isinstance(entry, (list, tuple)):
            flat.extend(str(x) for x in entry)
        else:
            flat.append(str(entry))
    # older dumps repeat the root category once per path
    return ", ".join(dict.fromkeys(flat))


def parse_amazon(reviews_path, meta_path=None) -> RatingCorpus:
    """Read line-delimited Amazon review and metadata dumps.

    Both the 2014/2018 field names (``reviewerID``, ``asin``, ``overall``,
    ``unixReviewTime``) and the 2023 ones (``user_id``, ``parent_asin``,
    ``rating``, ``timestamp`` in milliseconds) are accepted.
    """
    items: dict[str, ItemMeta] = {}
    if meta_path is not None:
        with open(meta_path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, 1):
                if not line.strip():
                    continue
                try:
                    obj = json.loads(line)
                except json.JSONDecodeError as exc:
                    raise CorpusError(f"unparsable metadata record: {exc.msg}", meta_path, lineno) from None
                asin = _first(obj, "parent_asin", "asin")
                if asin is None:
                    raise CorpusError("metadata record without asin", meta_path, lineno)
                title = str(_first(obj, "title") or "").strip() or PLACEHOLDER_TITLE
                attrs = {}
                cats = _amazon_categories(_first(obj, "categories", "category"))
                if cats:
                    attrs["category"] = cats
                main = _first(obj, "main_category")
                if main:
                    attrs["main_category"] = str(main)
                brand = _first(obj, "brand", "store")
                if brand:
                    attrs["brand"] = str(brand)
                items[str(asin)] = ItemMeta(str(asin), title, attrs)

    warnings: Counter = Counter()
    profiles: dict[str, UserProfile] = {}
    records = []
    seen = set()
    with open(reviews_path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"unparsable review record: {exc.msg}", reviews_path, lineno) from None
            if not isinstance(obj, dict):
                raise CorpusError("review record is not an object", reviews_path, lineno)
            uid = _first(obj, "reviewerID", "user_id")
            asin = _first(obj, "asin", "parent_asin")
            rating = _first(obj, "overall", "rating")
            ts = _first(obj, "unixReviewTime", "timestamp")
            if uid is None or asin is None or rating is None or ts is None:
                raise CorpusError("review record missing user, item, rating or timestamp", reviews_path, lineno)
            uid, asin = str(uid), str(asin)
            ts = int(ts)
            if ts > 10**11:
                ts //= 1000
            rec = RatingRecord(uid, asin, _amazon_rating(rating, reviews_path, lineno), ts)
            key = (uid, asin, ts)
            if key in seen:
                warnings["duplicate_review"] += 1
                continue
            seen.add(key)
            records.append(rec)
            profiles.setdefault(uid, UserProfile(uid, {}))
            if asin not in items:
                items[asin] = ItemMeta(asin, PLACEHOLDER_TITLE, {})
                warnings["missing_metadata"] += 1

    if warnings["missing_metadata"]:
        logger.warning("%d rated items have no metadata; kept with placeholder title",
                       warnings["missing_metadata"])
    return RatingCorpus(tuple(records), profiles, items, warnings).validate()


# --- protocol --------------------------------------------------------------


def filter_users(corpus: RatingCorpus, min_positive: int = 6,
                 positive_threshold: int = POSITIVE_THRESHOLD) -> RatingCorpus:
    """Keep users with at least ``min_positive`` ratings above the threshold.

    Records of dropped users go with them, and so do items left without any
    rating.
    """
    n_pos: Counter = Counter(r.user_id for r in corpus.records if r.rating > positive_threshold)
    keep = {u for u, n in n_pos.items() if n >= min_positive}
    records = tuple(r for r in corpus.records if r.user_id in keep)
    kept_items = {r.item_id for r in records}
    profiles = {u: p for u, p in corpus.profiles.items() if u in keep}
    items = {i: m for i, m in corpus.items.items() if i in kept_items}
    return RatingCorpus(records, profiles, items, Counter(corpus.warnings))


def split_leave_last_positive(corpus: RatingCorpus,
                              positive_threshold: int = POSITIVE_THRESHOLD
                              ) -> dict[str, tuple[list[tuple[str, int, int]], str]]:
    """Hold out each user's most recent positive item.

    Returns ``user -> (history, ground_truth_item)`` where history holds every
    other record as ``(item, rating, timestamp)`` in (timestamp, item_id) order.
    """
    out = {}
    for user in corpus.user_ids:
        recs = corpus.by_user[user]
        last_pos = None
        for idx, rec in enumerate(recs):
            if rec.rating > positive_threshold:
                last_pos = idx
        if last_pos is None:
            logger.warning("user %s has no positive rating; excluded from split", user)
            continue
        history = [(r.item_id, r.rating, r.timestamp) for j, r in enumerate(recs) if j != last_pos]
        out[user] = (history, recs[last_pos].item_id)
    return out


def recent_liked_items(history: Iterable[tuple[str, int, int]], exclude: str | None = None,
                       n: int = 5, positive_threshold: int = POSITIVE_THRESHOLD) -> list[str]:
    liked = [item for item, rating, _ in history if rating > positive_threshold and item != exclude]
    return liked[-n:] if n > 0 else []


def sample_candidates(corpus: RatingCorpus, user_id: str, ground_truth_item: str,
                      n_negatives: int = 19, seed: int = 0,
                      history: list[tuple[str, int, int]] | None = None) -> EvalInstance:
    """Ground truth plus ``n_negatives`` never-interacted items, shuffled."""
    recs = corpus.by_user.get(user_id, [])
    if history is None:
        gt_idx = max((j for j, r in enumerate(recs) if r.item_id == ground_truth_item), default=None)
        history = [(r.item_id, r.rating, r.timestamp) for j, r in enumerate(recs) if j != gt_idx]
    interacted = {r.item_id for r in recs} | {ground_truth_item}
    eligible = [i for i in corpus.item_universe if i not in interacted]
    if len(eligible) < n_negatives:
        raise CandidatePoolExhausted(
            f"candidate pool exhausted: user {user_id} has {len(eligible)} eligible negatives, "
            f"{n_negatives} needed")
    rng = np.random.default_rng(seed)
    picks = rng.choice(len(eligible), size=n_negatives, replace=False)
    candidates = [ground_truth_item] + [eligible[j] for j in picks]
    order = rng.permutation(len(candidates))
    return EvalInstance(
        user_id=user_id,
        history=tuple(tuple(h) for h in history),
        ground_truth_item=ground_truth_item,
        candidates=tuple(candidates[j] for j in order),
        recent_liked=tuple(recent_liked_items(history, exclude=ground_truth_item)),
    )


def sample_users(user_ids: Iterable[str], n: int | None, seed: int,
                 exclude: Iterable[str] = ()) -> list[str]:
    """Seeded uniform subset of users, returned in id order. ``n=None`` keeps all."""
    excluded = set(exclude)
    pool = sorted((u for u in user_ids if u not in excluded), key=id_sort_key)
    if n is None or n >= len(pool):
        return pool
    rng = np.random.default_rng(seed)
    picked = rng.choice(len(pool), size=n, replace=False)
    return sorted((pool[j] for j in picked), key=id_sort_key)


def build_eval_instances(corpus: RatingCorpus, users: Iterable[str] | None = None,
                         seed: int = 0, n_negatives: int = 19) -> list[EvalInstance]:
    """Split and candidate sampling for ``users`` (default: every user).

    Each user's sampler is seeded from ``derive_seed(seed, user_id)``, so the
    result does not depend on iteration order.
    """
    split = split_leave_last_positive(corpus)
    wanted = split.keys() if users is None else [u for u in users if u in split]
    out = []
    for user in sorted(wanted, key=id_sort_key):
        history, gt = split[user]
        out.append(sample_candidates(corpus, user, gt, n_negatives=n_negatives,
                                     seed=derive_seed(seed, "candidates", user), history=history))
    return out


# --- serialization ---------------------------------------------------------


def write_instances(instances: Iterable[EvalInstance], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for inst in instances:
            fh.write(json.dumps(inst.to_json(), sort_keys=True) + "\n")


def read_instances(path) -> list[EvalInstance]:
    with open(path, encoding="utf-8") as fh:
        return [EvalInstance.from_json(json.loads(line)) for line in fh if line.strip()]


def write_corpus(corpus: RatingCorpus, path) -> None:
    """Canonical line-delimited corpus: profiles, then items, then ratings, all id-sorted."""
    with open(path, "w", encoding="utf-8") as fh:
        for uid in sorted(corpus.profiles, key=id_sort_key):
            p = corpus.profiles[uid]
            fh.write(json.dumps({"kind": "user", "user_id": uid,
                                 "demographics": dict(p.demographics)}, sort_keys=True) + "\n")
        for iid in sorted(corpus.items, key=id_sort_key):
            m = corpus.items[iid]
            fh.write(json.dumps({"kind": "item", "item_id": iid, "title": m.title,
                                 "attributes": dict(m.attributes)}, sort_keys=True) + "\n")
        recs = sorted(corpus.records, key=lambda r: (id_sort_key(r.user_id), r.order_key))
        for r in recs:
            fh.write(json.dumps({"kind": "rating", "user_id": r.user_id, "item_id": r.item_id,
                                 "rating": r.rating, "timestamp": r.timestamp},
                                sort_keys=True) + "\n")


def read_corpus(path) -> RatingCorpus:
    profiles, items, records = {}, {}, []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                kind = obj["kind"]
                if kind == "user":
                    profiles[obj["user_id"]] = UserProfile(obj["user_id"], obj["demographics"])
                elif kind == "item":
                    items[obj["item_id"]] = ItemMeta(obj["item_id"], obj["title"], obj["attributes"])
                elif kind == "rating":
                    records.append(RatingRecord(obj["user_id"], obj["item_id"],
                                                obj["rating"], obj["timestamp"]))
                else:
                    raise CorpusError(f"unknown record kind {kind!r}", path, lineno)
            except (json.JSONDecodeError, KeyError) as exc:
                raise CorpusError(f"malformed corpus record ({exc})", path, lineno) from None
    return RatingCorpus(tuple(records), profiles, items).validate()
