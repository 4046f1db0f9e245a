"""Check-in ingestion: parsing, implicit feedback, vocabularies, sequences and splits.

Input formats (UTF-8, tab separated, one record per line)::

    interactions:  user_id  item_id  timestamp  rating  review_text
    metadata:      item_id  name     cat1,cat2,...  city

``rating`` and ``review_text`` may be empty.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import Counter, defaultdict
from dataclasses import dataclass, field, replace
from functools import cached_property
from typing import Iterable, Sequence

import numpy as np

from .numerics import make_rng

logger = logging.getLogger(__name__)

PAD = 0


class CorpusError(ValueError):
    """Raised for malformed or insufficient input data."""


class ParseError(CorpusError):
    def __init__(self, line_no: int, message: str):
        super().__init__(f"line {line_no}: {message}")
        self.line_no = line_no


@dataclass(frozen=True)
class Interaction:
    user_id: str
    item_id: str
    timestamp: int
    rating: float | None = None
    has_review: bool = False

    def __post_init__(self):
        if self.timestamp < 0:
            raise ValueError(f"negative timestamp {self.timestamp}")
        if self.rating is not None and not 1.0 <= self.rating <= 5.0:
            raise ValueError(f"rating {self.rating} outside [1, 5]")


@dataclass(frozen=True)
class ItemMeta:
    item_id: str
    name: str = ""
    categories: tuple[str, ...] = ()
    city: str = ""


@dataclass(frozen=True)
class Catalog:
    """Item and keyword vocabularies.

    Items are indexed densely from 1; index 0 is padding and ``num_items + 1``
    is the mask token.
    """

    item_ids: tuple[str, ...]
    keywords: tuple[str, ...]
    item_keywords: tuple[frozenset, ...]  # per item index - 1
    popularity: tuple[int, ...]  # per item index - 1
    item_names: tuple[str, ...] = ()

    @property
    def num_items(self) -> int:
        return len(self.item_ids)

    @property
    def num_keywords(self) -> int:
        return len(self.keywords)

    @property
    def pad_token(self) -> int:
        return PAD

    @property
    def mask_token(self) -> int:
        return self.num_items + 1

    @property
    def vocab_size(self) -> int:
        """Rows of the item table: items plus pad and mask."""
        return self.num_items + 2

    @cached_property
    def item_index(self) -> dict[str, int]:
        return {item: i + 1 for i, item in enumerate(self.item_ids)}

    @cached_property
    def keyword_index(self) -> dict[str, int]:
        return {kw: i for i, kw in enumerate(self.keywords)}

    def keywords_of(self, index: int) -> frozenset:
        if not 1 <= index <= self.num_items:
            return frozenset()
        return self.item_keywords[index - 1]

    def name_of(self, index: int) -> str:
        if self.item_names and 1 <= index <= self.num_items:
            return self.item_names[index - 1]
        return ""

    @cached_property
    def keyword_matrix(self) -> np.ndarray:
        """Multi-hot incidence ``[vocab_size, num_keywords]``; pad and mask rows are zero."""
        m = np.zeros((self.vocab_size, self.num_keywords))
        for i, kws in enumerate(self.item_keywords, start=1):
            for k in kws:
                m[i, k] = 1.0
        return m

    @cached_property
    def popularity_array(self) -> np.ndarray:
        return np.asarray(self.popularity, dtype=np.int64)

    def with_popularity(self, sequences: Iterable[Sequence[int]]) -> "Catalog":
        counts = np.zeros(self.num_items, dtype=np.int64)
        for seq in sequences:
            for idx in seq:
                counts[idx - 1] += 1
        return replace(self, popularity=tuple(int(c) for c in counts))

    def to_dict(self) -> dict:
        return {
            "item_ids": list(self.item_ids),
            "item_names": list(self.item_names),
            "keywords": list(self.keywords),
            "item_keywords": [sorted(k) for k in self.item_keywords],
            "popularity": list(self.popularity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Catalog":
        return cls(
            item_ids=tuple(d["item_ids"]),
            keywords=tuple(d["keywords"]),
            item_keywords=tuple(frozenset(k) for k in d["item_keywords"]),
            popularity=tuple(int(p) for p in d["popularity"]),
            item_names=tuple(d.get("item_names", ())),
        )

    def digest(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class UserSequence:
    user_id: str
    items: tuple[int, ...]

    @property
    def length(self) -> int:
        return len(self.items)


@dataclass(frozen=True)
class SplitDataset:
    user_ids: tuple[str, ...]
    train: tuple[tuple[int, ...], ...]
    valid: tuple[tuple[tuple[int, ...], int], ...]
    test: tuple[tuple[tuple[int, ...], int], ...]
    catalog: Catalog

    def __len__(self):
        return len(self.user_ids)

    def to_dict(self) -> dict:
        return {
            "users": [
                {"user_id": u, "train": list(tr), "valid_target": v[1], "test_target": t[1]}
                for u, tr, v, t in zip(self.user_ids, self.train, self.valid, self.test)
            ]
        }

    @classmethod
    def from_dict(cls, d: dict, catalog: Catalog) -> "SplitDataset":
        users, train, valid, test = [], [], [], []
        for row in d["users"]:
            tr = tuple(row["train"])
            users.append(row["user_id"])
            train.append(tr)
            valid.append((tr, row["valid_target"]))
            test.append((tr + (row["valid_target"],), row["test_target"]))
        return cls(tuple(users), tuple(train), tuple(valid), tuple(test), catalog)


@dataclass
class StatsReport:
    users: int = 0
    items: int = 0
    interactions: int = 0
    interactions_per_user: dict = field(default_factory=dict)
    item_popularity: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "users": self.users,
            "items": self.items,
            "interactions": self.interactions,
            "interactions_per_user": {str(k): v for k, v in sorted(self.interactions_per_user.items())},
            "item_popularity": {str(k): v for k, v in sorted(self.item_popularity.items())},
        }


# -- parsing ----------------------------------------------------------------

def parse_interactions(lines: Iterable[str], strict: bool = True,
                       errors: list | None = None) -> list[Interaction]:
    """Parse interaction TSV records.

    In strict mode the first malformed record raises :class:`ParseError`.
    Otherwise bad records are skipped and their errors appended to ``errors``
    when a list is supplied.
    """
    out = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        try:
            out.append(_parse_record(line, line_no))
        except ParseError as exc:
            if strict:
                raise
            logger.warning("skipping %s", exc)
            if errors is not None:
                errors.append(exc)
    return out


def _parse_record(line: str, line_no: int) -> Interaction:
    fields = line.split("\t")
    if len(fields) < 3:
        raise ParseError(line_no, f"expected at least 3 fields, got {len(fields)}")
    user, item, ts = fields[0], fields[1], fields[2]
    if not user or not item:
        raise ParseError(line_no, "empty user_id or item_id")
    try:
        timestamp = int(ts)
    except ValueError:
        raise ParseError(line_no, f"malformed timestamp {ts!r}") from None
    if timestamp < 0:
        raise ParseError(line_no, f"negative timestamp {timestamp}")
    rating = None
    if len(fields) > 3 and fields[3].strip():
        try:
            rating = float(fields[3])
        except ValueError:
            raise ParseError(line_no, f"malformed rating {fields[3]!r}") from None
        if not (math.isfinite(rating) and 1.0 <= rating <= 5.0):
            raise ParseError(line_no, f"rating {rating} outside [1, 5]")
    has_review = len(fields) > 4 and bool(fields[4].strip())
    return Interaction(user, item, timestamp, rating, has_review)


def parse_metadata(lines: Iterable[str]) -> list[ItemMeta]:
    out = []
    for line_no, raw in enumerate(lines, start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        fields = line.split("\t")
        if not fields[0]:
            raise ParseError(line_no, "empty item_id in metadata")
        name = fields[1] if len(fields) > 1 else ""
        cats = tuple(c.strip() for c in fields[2].split(",") if c.strip()) if len(fields) > 2 else ()
        city = fields[3] if len(fields) > 3 else ""
        out.append(ItemMeta(fields[0], name, cats, city))
    return out


def format_interaction(it: Interaction) -> str:
    rating = "" if it.rating is None else repr(float(it.rating))
    review = "review" if it.has_review else ""
    return f"{it.user_id}\t{it.item_id}\t{it.timestamp}\t{rating}\t{review}"


def format_metadata(meta: ItemMeta) -> str:
    return f"{meta.item_id}\t{meta.name}\t{','.join(meta.categories)}\t{meta.city}"


# -- corpus construction ------------------------------------------------------

def to_implicit(interactions: Iterable[Interaction]) -> list[Interaction]:
    """Keep events carrying a rating or a review, as unit implicit feedback."""
    return [replace(it, rating=None, has_review=False)
            for it in interactions if it.rating is not None or it.has_review]


def filter_min_interactions(interactions: Sequence[Interaction], min_interactions: int):
    counts = Counter(it.user_id for it in interactions)
    keep = {u for u, c in counts.items() if c >= min_interactions}
    return [it for it in interactions if it.user_id in keep], len(counts) - len(keep)


def build_catalog(interactions: Sequence[Interaction],
                  metadata: Iterable[ItemMeta] = ()) -> Catalog:
    if not interactions:
        raise CorpusError("empty corpus")
    order: dict[str, int] = {}
    for it in interactions:
        if it.item_id not in order:
            order[it.item_id] = len(order) + 1
    meta = {m.item_id: m for m in metadata}

    keywords: dict[str, int] = {}
    item_keywords = []
    names = []
    for item in order:
        m = meta.get(item)
        kws = set()
        for cat in (m.categories if m else ()):
            kws.add(keywords.setdefault(cat, len(keywords)))
        item_keywords.append(frozenset(kws))
        names.append(m.name if m else "")

    pop = Counter(order[it.item_id] for it in interactions)
    return Catalog(
        item_ids=tuple(order),
        keywords=tuple(keywords),
        item_keywords=tuple(item_keywords),
        popularity=tuple(pop[i] for i in range(1, len(order) + 1)),
        item_names=tuple(names),
    )


def build_sequences(interactions: Sequence[Interaction], catalog: Catalog,
                    min_interactions: int = 1) -> list[UserSequence]:
    """One time-sorted sequence per user with at least ``min_interactions`` events.

    Users appear in first-appearance order.  Timestamp ties keep input order.
    """
    by_user: dict[str, list[Interaction]] = defaultdict(list)
    for it in interactions:
        by_user[it.user_id].append(it)
    index = catalog.item_index
    out, dropped = [], 0
    for user, events in by_user.items():
        if len(events) < min_interactions:
            dropped += 1
            continue
        events = sorted(events, key=lambda e: e.timestamp)
        out.append(UserSequence(user, tuple(index[e.item_id] for e in events)))
    if dropped:
        logger.info("excluded %d users with fewer than %d interactions", dropped, min_interactions)
    return out


def split_leave_one_out(sequences: Sequence[UserSequence],
                        catalog: Catalog | None = None) -> SplitDataset:
    """Hold out the last item for test and the one before it for validation.

    When ``catalog`` is given, its popularity counts are recomputed over the
    training prefixes only.
    """
    users, train, valid, test = [], [], [], []
    for seq in sequences:
        items = tuple(seq.items)
        if len(items) < 3:
            raise CorpusError(f"user {seq.user_id!r} has {len(items)} interactions; need at least 3")
        users.append(seq.user_id)
        train.append(items[:-2])
        valid.append((items[:-2], items[-2]))
        test.append((items[:-1], items[-1]))
    if catalog is not None:
        catalog = catalog.with_popularity(train)
    return SplitDataset(tuple(users), tuple(train), tuple(valid), tuple(test), catalog)


def dataset_stats(interactions: Sequence[Interaction], catalog: Catalog | None = None) -> StatsReport:
    if not interactions:
        return StatsReport()
    per_user = Counter(it.user_id for it in interactions)
    per_item = Counter(it.item_id for it in interactions)
    n_items = catalog.num_items if catalog is not None else len(per_item)
    pop_hist = Counter(per_item.values())
    if catalog is not None:
        missing = n_items - sum(1 for i in catalog.item_ids if i in per_item)
        if missing:
            pop_hist[0] += missing
    return StatsReport(
        users=len(per_user),
        items=n_items,
        interactions=len(interactions),
        interactions_per_user=dict(Counter(per_user.values())),
        item_popularity=dict(pop_hist),
    )


# -- synthetic data ---------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of the itinerary-cycling generator.

    Each user cycles a private itinerary of ``itinerary_length`` distinct items;
    each event is replaced by a uniformly random item with probability
    ``noise_rate``.  With ``correlated_keywords`` the items are partitioned into
    groups that each carry a group category, and every itinerary is drawn from
    a single group.
    """

    num_users: int
    num_items: int
    itinerary_length: int
    noise_rate: float = 0.0
    seed: int = 0
    events_per_user: int = 20
    num_categories: int = 8
    correlated_keywords: bool = False

    def validate(self):
        if self.num_users < 1:
            raise ValueError("num_users must be >= 1")
        if not self.num_items >= self.itinerary_length >= 2:
            raise ValueError("need num_items >= itinerary_length >= 2")
        if not 0.0 <= self.noise_rate <= 1.0:
            raise ValueError("noise_rate must lie in [0, 1]")
        if self.events_per_user < 1 or self.num_categories < 1:
            raise ValueError("events_per_user and num_categories must be >= 1")


def _item_id(i: int) -> str:
    return f"p{i:04d}"


def generate_synthetic(spec: SyntheticSpec) -> tuple[list[Interaction], list[ItemMeta]]:
    spec.validate()
    rng = make_rng(spec.seed, 0x5EED)
    n = spec.num_items

    if spec.correlated_keywords:
        perm = rng.permutation(n)
        groups = [perm[g:g + spec.itinerary_length] for g in range(0, n, spec.itinerary_length)]
        if len(groups) > 1 and len(groups[-1]) < spec.itinerary_length:
            # fold a short tail into the previous group so every group can host an itinerary
            groups[-2] = np.concatenate([groups[-2], groups.pop()])
        group_of = np.empty(n, dtype=np.int64)
        for g, members in enumerate(groups):
            group_of[members] = g
        categories = []
        for i in range(n):
            cats = {f"group{group_of[i]}"}
            for _ in range(int(rng.integers(0, 3))):
                cats.add(f"cat{int(rng.integers(spec.num_categories))}")
            categories.append(tuple(sorted(cats)))
    else:
        categories = []
        for i in range(n):
            k = int(rng.integers(1, 4))
            picks = rng.choice(spec.num_categories, size=min(k, spec.num_categories), replace=False)
            categories.append(tuple(f"cat{int(c)}" for c in sorted(picks)))

    interactions = []
    for u in range(spec.num_users):
        if spec.correlated_keywords:
            members = groups[int(rng.integers(len(groups)))]
            itinerary = rng.choice(members, size=spec.itinerary_length, replace=False)
        else:
            itinerary = rng.choice(n, size=spec.itinerary_length, replace=False)
        noisy = rng.random(spec.events_per_user) < spec.noise_rate
        random_items = rng.integers(n, size=spec.events_per_user)
        for t in range(spec.events_per_user):
            item = random_items[t] if noisy[t] else itinerary[t % spec.itinerary_length]
            interactions.append(Interaction(f"u{u:04d}", _item_id(int(item)), 1_000_000 + 3600 * t, 4.0))
    metadata = [ItemMeta(_item_id(i), f"Place {i}", categories[i], "Synthville") for i in range(n)]
    return interactions, metadata


def prepare_corpus(interactions: Sequence[Interaction], metadata: Iterable[ItemMeta] = (),
                   min_interactions: int = 3) -> SplitDataset:
    """Implicit feedback, user filtering, catalog, sequences and split in one call."""
    implicit = to_implicit(interactions)
    kept, _ = filter_min_interactions(implicit, max(min_interactions, 3))
    catalog = build_catalog(kept, metadata)
    sequences = build_sequences(kept, catalog)
    return split_leave_one_out(sequences, catalog)
