"""Session records, JSONL ingestion, the product catalog, and the synthetic corpus.

The generator produces context-dependent sessions: the source query is
corrupted (typo, dropped token, or a confusable brand swap) in a way that the
history queries resolve, and the target query retrieves the purchased product
at rank 1. That construction is verified against the retrieval oracle for
every emitted session.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .numerics import generator
from .text import tokenize

logger = logging.getLogger("srw.sessions")


class SessionFormatError(ValueError):
    """A malformed or schema-violating session record."""


@dataclass
class Session:
    history: list[str]
    source: str
    target: str
    purchased_product: str
    session_id: str

    def validate(self) -> None:
        if not self.history or any(not q for q in self.history):
            raise SessionFormatError("history must be a non-empty list of non-empty queries")
        if not self.source or not self.target:
            raise SessionFormatError("source and target queries must be non-empty")


_SESSION_KEYS = ("history", "source", "target", "purchased_product", "session_id")


def load_sessions(path) -> list[Session]:
    """Read one JSON session object per line, validating as we go."""
    sessions: list[Session] = []
    short_histories = 0
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as err:
                raise SessionFormatError(f"{path}:{lineno}: invalid JSON: {err}") from err
            missing = [k for k in _SESSION_KEYS if k not in obj]
            if missing:
                raise SessionFormatError(f"{path}:{lineno}: missing keys {missing}")
            sess = Session(
                history=list(obj["history"]),
                source=obj["source"],
                target=obj["target"],
                purchased_product=obj["purchased_product"],
                session_id=obj["session_id"],
            )
            try:
                sess.validate()
            except SessionFormatError as err:
                raise SessionFormatError(f"{path}:{lineno}: {err}") from err
            if len(sess.history) < 3:
                short_histories += 1
            sessions.append(sess)
    if short_histories:
        logger.warning("%d sessions have fewer than 3 history queries", short_histories)
    return sessions


def save_sessions(path, sessions: Iterable[Session]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in sessions:
            fh.write(
                json.dumps(
                    {
                        "history": s.history,
                        "source": s.source,
                        "target": s.target,
                        "purchased_product": s.purchased_product,
                        "session_id": s.session_id,
                    },
                    sort_keys=True,
                    separators=(",", ":"),
                )
                + "\n"
            )


# ---------------------------------------------------------------------------
# Catalog


@dataclass(frozen=True)
class Product:
    id: str
    title: str
    attrs: tuple[str, ...]

    def tokens(self) -> set[str]:
        return set(tokenize(self.title)) | set(self.attrs)


class Catalog:
    """Immutable product table plus an inverted token index."""

    def __init__(self, products: Sequence[Product]):
        self.products: dict[str, Product] = {}
        self.index: dict[str, list[str]] = {}
        for p in products:
            if not tokenize(p.title):
                raise ValueError(f"product {p.id} has an empty title")
            if p.id in self.products:
                raise ValueError(f"duplicate product id {p.id}")
            self.products[p.id] = p
        for pid in sorted(self.products):
            for tok in sorted(self.products[pid].tokens()):
                self.index.setdefault(tok, []).append(pid)

    def __len__(self) -> int:
        return len(self.products)

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as fh:
            for pid in sorted(self.products):
                p = self.products[pid]
                fh.write(
                    json.dumps(
                        {"attrs": list(p.attrs), "id": p.id, "title": p.title},
                        sort_keys=True,
                        separators=(",", ":"),
                    )
                    + "\n"
                )

    @classmethod
    def load(cls, path) -> "Catalog":
        products = []
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.strip()
                if not line:
                    continue
                try:
                    obj = json.loads(line)
                    products.append(
                        Product(id=obj["id"], title=obj["title"], attrs=tuple(obj["attrs"]))
                    )
                except (json.JSONDecodeError, KeyError) as err:
                    raise ValueError(f"{path}:{lineno}: bad catalog line: {err}") from err
        return cls(products)


# ---------------------------------------------------------------------------
# Synthetic corpus generator

# Brand names come in confusable pairs sharing a stem ("acmea"/"acmeo"); the
# stem doubles as the typo form, ambiguous between the two without context.
BRAND_STEMS = (
    "acme", "belvo", "cortik", "drayce", "elmor",
    "fenwik", "galvor", "helix", "ionra", "jaspen",
    "kelvor", "lumax", "mistra", "norvik", "optel",
    "perdan", "quorix", "ralden", "sorvel", "tandir",
)
BRAND_SUFFIXES = ("a", "o")
CATEGORIES = (
    "lamp", "poster", "banner", "case", "charger",
    "backpack", "kettle", "wallet", "headphones", "blender",
    "tripod", "hammock", "notebook", "sneakers", "umbrella",
    "mug", "drone", "keyboard", "monitor", "jacket",
)
MODIFIERS = (
    "copper", "matte", "blue", "crimson",
    "compact", "deluxe", "vintage", "wireless",
)


@dataclass(frozen=True)
class CatalogSpec:
    n_brand_stems: int = 20
    n_categories: int = 10
    n_modifiers_per_pair: int = 5

    def validate(self) -> None:
        if not (1 <= self.n_brand_stems <= len(BRAND_STEMS)):
            raise ValueError(f"n_brand_stems must be in [1, {len(BRAND_STEMS)}]")
        if not (2 <= self.n_categories <= len(CATEGORIES)):
            raise ValueError(f"n_categories must be in [2, {len(CATEGORIES)}]")
        if not (2 <= self.n_modifiers_per_pair <= len(MODIFIERS)):
            raise ValueError(f"n_modifiers_per_pair must be in [2, {len(MODIFIERS)}]")


CORRUPTIONS = ("typo", "drop", "drop", "confusable")

_HISTORY_LENGTHS = (3, 4, 5, 6)
_HISTORY_WEIGHTS = (0.20, 0.45, 0.25, 0.10)  # mean 4.25, mirrors ~4 per session


def build_catalog(seed: int, spec: CatalogSpec = CatalogSpec()) -> Catalog:
    """Templated brand x category x modifier catalog, deterministic in seed."""
    spec.validate()
    rng = generator(seed, "catalog")
    brands = [
        stem + sfx for stem in BRAND_STEMS[: spec.n_brand_stems] for sfx in BRAND_SUFFIXES
    ]
    cats = CATEGORIES[: spec.n_categories]
    products = []
    idx = 0
    for brand in brands:
        for cat in cats:
            mods = rng.permutation(len(MODIFIERS))[: spec.n_modifiers_per_pair]
            for mi in sorted(mods):
                mod = MODIFIERS[mi]
                products.append(
                    Product(
                        id=f"p{idx:05d}",
                        title=f"{brand} {cat} {mod}",
                        attrs=(brand, cat, mod),
                    )
                )
                idx += 1
    return Catalog(products)


def _other(rng: np.random.Generator, pool: Sequence[str], *exclude: str) -> str:
    options = [x for x in pool if x not in exclude]
    return options[rng.integers(len(options))]


def _make_session(rng: np.random.Generator, catalog: Catalog, by_title: dict[str, str],
                  brands: list[str], cats: list[str], session_id: str) -> Session:
    title = list(by_title)[rng.integers(len(by_title))]
    pid = by_title[title]
    brand, cat, mod = catalog.products[pid].attrs
    stem, sfx = brand[:-1], brand[-1]
    partner = stem + ("o" if sfx == "a" else "a")

    corruption = CORRUPTIONS[rng.integers(len(CORRUPTIONS))]
    if corruption == "typo":
        source = f"{stem} {cat} {mod}"
    elif corruption == "confusable":
        source = f"{partner} {cat} {mod}"
    else:
        if rng.random() < 0.5:
            source = f"{cat} {mod}"  # brand dropped
        else:
            source = f"{brand} {cat}"  # modifier dropped
            corruption = "drop_modifier"

    cat2 = _other(rng, cats, cat)
    cat3 = _other(rng, cats, cat, cat2)
    cat4 = _other(rng, cats, cat, cat2, cat3)
    db = _other(rng, brands, brand, partner)
    mod2 = _other(rng, MODIFIERS, mod)
    reveal = f"{cat} {mod}" if corruption == "drop_modifier" else None
    n_hist = int(rng.choice(_HISTORY_LENGTHS, p=_HISTORY_WEIGHTS))

    if rng.random() < 0.5:
        # Direct binding: the true brand co-occurs with the purchased
        # category in one history query. A distractor brand appears just as
        # often, so brand frequency alone never identifies the rewrite.
        binding = f"{brand} {cat}"
        optional = [f"{brand} {cat2}", f"{db} {cat3}", f"{db} {cat4}",
                    f"{cat}", f"{mod2} {cat2}"]
        n_middle = n_hist - 1 - (1 if reveal else 0)
        middle = [optional[i] for i in rng.permutation(len(optional))[:n_middle]]
        if reveal:
            middle.insert(int(rng.integers(len(middle) + 1)), reveal)
        history = middle + [binding]
    else:
        # Two-hop chain: four brand+modifier probes of identical shape, but
        # only the true brand's bridge modifier reappears with the purchased
        # category; the three distractor bridges dangle. Identifying the
        # brand requires following token identity across queries.
        db2 = _other(rng, brands, brand, partner, db)
        db3 = _other(rng, brands, brand, partner, db, db2)
        bridge, b1, b2, b3 = [
            MODIFIERS[i]
            for i in rng.permutation([i for i, m in enumerate(MODIFIERS)
                                      if m not in (mod, mod2)])[:4]
        ]
        probes = [f"{brand} {bridge}", f"{db} {b1}", f"{db2} {b2}", f"{db3} {b3}"]
        middle = [probes[i] for i in rng.permutation(len(probes))]
        if reveal:
            middle.insert(int(rng.integers(len(middle) + 1)), reveal)
        history = middle + [f"{bridge} {cat}"]

    return Session(
        history=history,
        source=source,
        target=title,
        purchased_product=pid,
        session_id=session_id,
    )


def generate_corpus(
    seed: int, n_sessions: int, spec: CatalogSpec = CatalogSpec()
) -> tuple[Catalog, list[Session]]:
    """Deterministic synthetic catalog + sessions.

    Every emitted session satisfies, verified against the retrieval oracle:
    the target query ranks the purchased product first, and the source query
    ranks it strictly worse.
    """
    from .evaluation import RetrievalOracle  # local import: sessions <-> evaluation

    if n_sessions < 1:
        raise ValueError("n_sessions must be >= 1")
    catalog = build_catalog(seed, spec)
    oracle = RetrievalOracle(catalog)
    by_title = {p.title: pid for pid, p in sorted(catalog.products.items())}
    brands = sorted({p.attrs[0] for p in catalog.products.values()})
    cats = sorted({p.attrs[1] for p in catalog.products.values()})

    rng = generator(seed, "sessions")
    sessions: list[Session] = []
    for i in range(n_sessions):
        for _attempt in range(64):
            sess = _make_session(rng, catalog, by_title, brands, cats, f"s{i:06d}")
            rank_t = oracle.rank_of(sess.purchased_product, sess.target)
            rank_s = oracle.rank_of(sess.purchased_product, sess.source)
            if rank_t == 1 and (rank_s is None or rank_s > 1):
                sessions.append(sess)
                break
        else:
            raise RuntimeError("could not generate a valid session after 64 attempts")
    return catalog, sessions
