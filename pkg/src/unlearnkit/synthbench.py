"""Deterministic synthetic benchmarks for unlearning experiments.

Generates a small world of fictional authors with five attribute kinds
(birthplace, genre, debut year, award, book title), renders declarative
documents and question/answer pairs with perturbed (wrong) alternatives,
partitions authors into forget / retain / holdout groups, produces
corrupted documents (wrong facts about chosen authors) for restoration
experiments, an unrelated utility fact pool, and filler text whose
vocabulary is disjoint from every entity name and attribute value.

Everything is a pure function of (spec, seed): reruns are byte-identical,
including the JSONL serializations.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import lm


class BenchError(ValueError):
    pass


class CapacityError(BenchError):
    """A word list is too small for the requested number of entities."""


SPLIT_TAGS = ("forget", "retain", "holdout", "utility")

# Entity vocabulary. Values are invented tokens so the filler grammar below
# (plain everyday words) can never collide with them.
_FIRST = (
    "Lyra", "Doran", "Mirela", "Casperan", "Ysolde", "Brannock", "Quilla", "Ferun",
    "Maelis", "Torvic", "Anwenna", "Sorrel", "Ilvane", "Ostrid", "Pellin", "Varda",
    "Nimrolen", "Jessamy", "Korvane", "Ulesse", "Thandor", "Evrille", "Galissa", "Rovann",
    "Sableth", "Wendaline", "Yevra", "Drummon", "Celvane", "Arbeth", "Fenwick", "Zorine",
)
_LAST = (
    "Vexwood", "Marrowgate", "Quillstone", "Ashbourne", "Trelawnier", "Duskwhistle", "Farrowind", "Gloomhollow",
    "Hartwicke", "Ironquill", "Jasperfield", "Kestrelmoor", "Lanternwell", "Mossgrave", "Nightbloom", "Oakhurst",
    "Palefrost", "Quincewater", "Ravenscroft", "Silverbirch", "Thornberry", "Umbermere", "Violetward", "Wyndhollow",
    "Yarrowgate", "Zephyrine", "Bramblehart", "Cindervale", "Dovenshire", "Elderglen", "Foxmantle", "Grimsbury",
)
_BIRTHPLACES = (
    "Eldermoor", "Kyrvenholt", "Sundqvist", "Tallowmere", "Vireburg", "Westerholm", "Ambervale", "Brighthollow",
    "Cresthaven", "Drossford", "Eastmarch", "Froskavik", "Gildenport", "Hollowbrook", "Ivenlund", "Jorvikstad",
    "Karstmoor", "Lindenfall", "Mournwick", "Novegrad", "Ormsgate", "Pellstrand", "Quarholm", "Rimefell",
    "Silvermarsh", "Thornwick", "Ulverscroft", "Vintermoor", "Wrenfield", "Yarlsberg", "Zelvenkirk", "Ashgard",
    "Birchhallow", "Coldmere", "Dunvarre", "Elkstrand", "Fernbeck", "Glimmerford", "Halevorn", "Ickworth",
    "Jutemark", "Kelpsund", "Lorvik", "Mistgard", "Nettleford", "Oslofjell", "Pinemark", "Quistholm",
    "Ravnsted", "Skarnvik", "Tarnmoor", "Uldenfall", "Vostermark", "Wickenshaw", "Ygradsund", "Zarnholt",
    "Aldermist", "Bruneholm", "Cragfell", "Dovermere", "Ebbastrand", "Fennwick", "Gorsemoor", "Hvitdal",
)
_GENRES = (
    "galewrit", "mythpunk", "tidefable", "emberlore", "frostnoir", "starwoven", "duskcraft", "thornverse",
    "saltrhyme", "veilstory", "cinderplot", "moorspun", "lanternale", "riddleweft", "glassepic", "howlsaga",
    "bronzefolk", "nightprose", "ferngothic", "wavechant", "stonelyric", "ashparable", "drifttale", "palemyth",
    "ironfable", "mistlore", "reedsong", "duneverse", "coldrhyme", "larkstory", "vaultplot", "fenspun",
    "tornale", "glimweft", "boneepic", "keensaga", "loamfolk", "rainprose", "elmgothic", "foamchant",
    "slatelyric", "oakparable", "marshtale", "dimmyth", "hartwrit", "veilpunk", "brookfable", "ashlore",
    "grimnoir", "sunwoven", "peatcraft", "elderverse", "saltlore", "winterplot", "mornspun", "duskale",
    "riftweft", "starepic", "moorsaga", "tidefolk", "camprose", "snowgothic", "galechant", "pinelyric",
    "wolfparable", "bogtale",
)
_YEARS = tuple(str(y) for y in range(1871, 1871 + 64))
_AWARDS = (
    "Gilded Quill Prize", "Ashen Laurel Medal", "Sapphire Binding Award", "Howling Gale Trophy",
    "Ivory Bookmark Honor", "Crimson Folio Prize", "Duskfall Laureateship", "Ember Archive Medal",
    "Frostpen Distinction", "Glass Lantern Award", "Hidden Chapter Prize", "Iron Verse Medal",
    "Jade Margin Honor", "Kindled Page Trophy", "Long Night Laureateship", "Moth Wing Prize",
    "Ninth Shelf Medal", "Opal Spine Award", "Pale Harbor Prize", "Quiet Margin Honor",
    "Rust Anthem Medal", "Silent Stanza Prize", "Tidemark Distinction", "Umber Scroll Award",
    "Veiled Stanza Medal", "Winter Quarto Prize", "Yellowed Leaf Honor", "Zenith Chapter Award",
    "Bronze Galley Prize", "Cedar Spine Medal", "Dawn Ledger Award", "Errant Page Trophy",
    "Falling Ink Honor", "Gossamer Binding Prize", "Harbor Light Laureateship", "Inkwell Comet Medal",
    "Juniper Folio Distinction", "Keel Stone Award", "Lichen Margin Prize", "Midnight Press Medal",
    "Northern Quill Honor", "Oaken Shelf Trophy", "Pewter Stanza Laureateship", "Quill Harbor Prize",
    "River Ledger Medal", "Seventh Lantern Award", "Thistle Page Prize", "Undertow Verse Honor",
    "Vellum Arch Medal", "Wandering Spine Prize", "Exile Chapter Distinction", "Yarrow Ink Award",
    "Zephyr Margin Medal", "Amber Keel Prize", "Boreal Stanza Honor", "Cinder Ledger Award",
    "Driftwood Quill Medal", "Evening Folio Prize", "Fjord Lantern Honor", "Granite Page Award",
    "Hollow Spine Medal", "Islet Verse Prize", "Juncture Margin Honor", "Kestrel Ink Award",
)
_BOOKS = (
    "The Hollow Cartographer", "The Brine Orchard", "A Ledger of Rooms", "The Last Fernkeeper",
    "The Salt Archive", "The Unfinished Staircase", "The Glass River", "The Moth Collector",
    "The Paper Moons", "The Copper Bells", "The Broken Compass", "The Ninth Garden",
    "The Pale Harbor", "The Dream Merchant", "Shadows over Quince Hill", "The Borrowed Lighthouse",
    "An Atlas of Doors", "The Clockmaker Returns", "The Peat Fields", "The Orchard of Keys",
    "The Cartwright Riddle", "A Drowned Library", "The Ember Archivist", "A Winter of Tides",
    "The Lantern Brigade", "The Thorn Road", "The Vanishing Penmaker", "A Garden of Rust",
    "The Fog Chronicler", "The Iron Coast", "The Widow Almanac", "The Quiet Engine",
    "The Cinder Atlas", "The Reed Cathedral", "A Harbor of Echoes", "The Sombre Mill",
    "The Velvet Causeway", "A Census of Ghosts", "The Tallow Diaries", "The Granite Psalter",
    "The Fern Gazette", "A Theory of Lanterns", "The Marrow Bridge", "The Drift Kalendar",
    "The Sunken Parlor", "A Manual of Storms", "The Birch Testament", "The Ochre Causeway",
    "The Plume Register", "A Harvest of Locks", "The Gale Primer", "The Mire Chronicle",
    "The Loom Evangel", "A Pocket of Winters", "The Slate Grimoire", "The Hollow Regatta",
    "The Quince Ledger", "A Chorus of Wells", "The Bramble Codex", "The Frost Gazetteer",
    "The Heron Manifest", "A Latitude of Ash", "The Tide Breviary", "The Elder Calendula",
)

ATTRIBUTE_KINDS = ("award", "birthplace", "book_title", "debut_year", "genre")
_KIND_VALUES = {
    "award": _AWARDS,
    "birthplace": _BIRTHPLACES,
    "book_title": _BOOKS,
    "debut_year": _YEARS,
    "genre": _GENRES,
}

_DOC_TEMPLATES = {
    "award": "{name} won the {value}.",
    "birthplace": "{name} was born in {value}.",
    "book_title": "{name} is the author of {value}.",
    "debut_year": "{name} made a literary debut in {value}.",
    "genre": "{name} writes {value} stories.",
}
_QA_TEMPLATES = {
    "award": "Which award did {name} win?",
    "birthplace": "Where was {name} born?",
    "book_title": "Which book was written by {name}?",
    "debut_year": "In which year did {name} make a literary debut?",
    "genre": "What kind of stories does {name} write?",
}

# Filler grammar: everyday lowercase words, checked disjoint from the entity
# vocabulary by the generator tests.
_F_ADJ = ("quiet", "old", "green", "small", "wide", "cold", "warm", "dusty", "bright", "slow", "tall", "round")
_F_NOUN = ("river", "bridge", "market", "garden", "mill", "road", "harbor", "field", "tower", "square", "barn", "canal")
_F_VERB = ("runs past", "stands near", "faces", "borders", "overlooks", "curves around", "shelters", "follows")
_F_TAIL = (
    "in the early morning", "after the long rain", "through most of the season", "beside the stone wall",
    "under a pale sky", "at the edge of town", "before the first frost", "during the harvest weeks",
)

# Utility pool: facts about invented minerals, unrelated to the authors.
_U_MINERALS = (
    "harlite", "dravemite", "okrunite", "pelliste", "quorvite", "sempherite", "tillowane", "umbrentine",
    "vastrazite", "wrenolite", "xandrophane", "yorvenite",
)
_U_COLORS = (
    "cobalt", "vermilion", "ochre", "viridian", "magenta", "amber", "indigo", "charcoal",
    "turquoise", "crimson", "ivory", "olive",
)


@dataclass(frozen=True)
class BenchSpec:
    seed: int = 0
    n_entities: int = 64
    forget_fraction: float = 0.10
    holdout_fraction: float = 0.125
    facts_per_entity: int = 5
    n_utility: int = 8
    filler_tokens: int = 200_000
    corruption_seed: int = 0
    corrupt_fraction: float = 0.25

    def __post_init__(self):
        if not 0.0 <= self.forget_fraction < 1.0:
            raise BenchError("forget_fraction must be in [0, 1)")
        if self.forget_fraction > 0 and int(self.forget_fraction * self.n_entities) < 1:
            raise BenchError("forget_fraction * n_entities must be at least 1")
        if not 1 <= self.facts_per_entity <= len(ATTRIBUTE_KINDS):
            raise BenchError(f"facts_per_entity must be in [1, {len(ATTRIBUTE_KINDS)}]")


@dataclass
class Entity:
    id: int
    name: str
    attributes: dict


@dataclass
class Document:
    text: str
    split_tag: str
    entity_id: int | None = None

    def to_json(self) -> dict:
        return {"entity_id": self.entity_id, "split_tag": self.split_tag, "text": self.text}


@dataclass
class QaItem:
    entity_id: int | None
    question: str
    answer: str
    perturbed_answers: list
    split_tag: str
    kind: str

    def to_json(self) -> dict:
        return {
            "answer": self.answer,
            "entity_id": self.entity_id,
            "kind": self.kind,
            "perturbed_answers": list(self.perturbed_answers),
            "question": self.question,
            "split_tag": self.split_tag,
        }


# ---------------------------------------------------------------------------
# generators


def gen_entities(spec: BenchSpec) -> list[Entity]:
    """Entities with unique names; attribute values drawn without
    replacement within each kind while the word list lasts."""
    all_names = [f"{f} {l}" for f in _FIRST for l in _LAST]
    if spec.n_entities > len(all_names):
        raise CapacityError(f"cannot draw {spec.n_entities} unique names from {len(all_names)}")
    rng = np.random.default_rng(spec.seed)
    name_idx = rng.permutation(len(all_names))[: spec.n_entities]
    kinds = ATTRIBUTE_KINDS[: spec.facts_per_entity]

    pools = {}
    for kind in kinds:
        values = _KIND_VALUES[kind]
        order = list(rng.permutation(len(values)))
        pools[kind] = [values[i] for i in order]

    entities = []
    for i in range(spec.n_entities):
        attrs = {}
        for kind in kinds:
            pool = pools[kind]
            attrs[kind] = pool[i % len(pool)]
        entities.append(Entity(id=i, name=all_names[name_idx[i]], attributes=attrs))
    return entities


def split_forget(entities: list[Entity], forget_fraction: float, seed: int,
                 holdout_fraction: float = 0.125) -> tuple[list[Entity], list[Entity], list[Entity]]:
    """Disjoint (forget, retain, holdout) entity partition.

    Counts are floor(fraction * n) with a minimum of one; holdout entities
    are kept out of every training corpus so they can serve as never-seen
    non-members for membership inference.
    """
    if not 0.0 < forget_fraction < 1.0:
        raise BenchError("forget_fraction must be in (0, 1)")
    n = len(entities)
    n_f = max(1, int(forget_fraction * n))
    n_h = max(1, int(holdout_fraction * n))
    if n_f + n_h >= n:
        raise BenchError(f"splits exhaust the population: {n_f} forget + {n_h} holdout of {n}")
    order = np.random.default_rng(seed).permutation(n)
    forget = [entities[i] for i in order[:n_f]]
    holdout = [entities[i] for i in order[n_f : n_f + n_h]]
    retain = [entities[i] for i in order[n_f + n_h :]]
    return forget, retain, holdout


def render_corpus(entities: list[Entity], facts_per_entity: int, split_tag: str,
                  seed: int = 0) -> tuple[list[Document], list[QaItem]]:
    """One document and one QA item per (entity, attribute).

    Every attribute value appears verbatim in its document and as the QA
    answer; each QA item carries three same-kind perturbed answers distinct
    from each other and from the true value.
    """
    if not entities:
        raise BenchError("no entities to render")
    rng = np.random.default_rng(seed)
    kinds = ATTRIBUTE_KINDS[:facts_per_entity]
    docs, qa = [], []
    for ent in entities:
        for kind in kinds:
            value = ent.attributes[kind]
            docs.append(Document(text=_DOC_TEMPLATES[kind].format(name=ent.name, value=value),
                                 split_tag=split_tag, entity_id=ent.id))
            qa.append(QaItem(
                entity_id=ent.id,
                question=_QA_TEMPLATES[kind].format(name=ent.name),
                answer=value,
                perturbed_answers=_perturb(value, kind, rng),
                split_tag=split_tag,
                kind=kind,
            ))
    return docs, qa


def _perturb(value: str, kind: str, rng, n: int = 3) -> list[str]:
    candidates = [v for v in _KIND_VALUES[kind] if v != value]
    idx = rng.permutation(len(candidates))[:n]
    return [candidates[i] for i in idx]


def corrupt(entities: list[Entity], corruption_seed: int) -> tuple[list[Document], dict]:
    """Documents asserting a wrong same-kind value for every attribute of
    the given entities, plus the (entity_id, kind) -> (old, new) mapping."""
    rng = np.random.default_rng(corruption_seed)
    docs, mapping = [], {}
    for ent in entities:
        for kind, value in ent.attributes.items():
            wrong = _perturb(value, kind, rng, n=1)[0]
            docs.append(Document(text=_DOC_TEMPLATES[kind].format(name=ent.name, value=wrong),
                                 split_tag="corrupt", entity_id=ent.id))
            mapping[(ent.id, kind)] = (value, wrong)
    return docs, mapping


def gen_utility(spec: BenchSpec) -> tuple[list[Document], list[QaItem]]:
    """Facts disjoint from the author world (mineral colors)."""
    if spec.n_utility > len(_U_MINERALS):
        raise CapacityError(f"at most {len(_U_MINERALS)} utility facts available")
    rng = np.random.default_rng(spec.seed + 1)
    m_idx = rng.permutation(len(_U_MINERALS))[: spec.n_utility]
    c_idx = rng.permutation(len(_U_COLORS))[: spec.n_utility]
    docs, qa = [], []
    for mi, ci in zip(m_idx, c_idx):
        mineral, color = _U_MINERALS[mi], _U_COLORS[ci]
        docs.append(Document(text=f"The mineral {mineral} is {color} in color.", split_tag="utility"))
        qa.append(QaItem(
            entity_id=None,
            question=f"What color is the mineral {mineral}?",
            answer=color,
            perturbed_answers=[c for c in _U_COLORS if c != color][:3],
            split_tag="utility",
            kind="utility",
        ))
    return docs, qa


def gen_filler(seed: int, n_tokens: int) -> list[Document]:
    """Template-grammar filler text totalling about ``n_tokens`` encoded
    tokens (within one document), with vocabulary disjoint from every
    entity name and attribute value."""
    if n_tokens <= 0:
        raise BenchError("n_tokens must be positive")
    rng = np.random.default_rng(seed)
    docs = []
    total = 0
    while total < n_tokens:
        adj = _F_ADJ[rng.integers(0, len(_F_ADJ))]
        noun = _F_NOUN[rng.integers(0, len(_F_NOUN))]
        verb = _F_VERB[rng.integers(0, len(_F_VERB))]
        adj2 = _F_ADJ[rng.integers(0, len(_F_ADJ))]
        noun2 = _F_NOUN[rng.integers(0, len(_F_NOUN))]
        tail = _F_TAIL[rng.integers(0, len(_F_TAIL))]
        text = f"The {adj} {noun} {verb} the {adj2} {noun2} {tail}."
        docs.append(Document(text=text, split_tag="filler"))
        total += doc_token_count(text)
    return docs


def doc_token_count(text: str) -> int:
    """Training-token length of a document: BOS + bytes + EOT."""
    return len(lm.encode(text)) + 1


# ---------------------------------------------------------------------------
# assembled benchmark


@dataclass
class Benchmark:
    """All generated artifacts for one spec, grouped by role."""

    spec: BenchSpec
    entities: list = field(default_factory=list)
    forget_entities: list = field(default_factory=list)
    retain_entities: list = field(default_factory=list)
    holdout_entities: list = field(default_factory=list)
    docs: dict = field(default_factory=dict)      # tag -> list[Document]
    qa: dict = field(default_factory=dict)        # tag -> list[QaItem]
    corruption_map: dict = field(default_factory=dict)


def build_benchmark(spec: BenchSpec) -> Benchmark:
    entities = gen_entities(spec)
    if spec.forget_fraction > 0:
        forget_e, retain_e, holdout_e = split_forget(
            entities, spec.forget_fraction, spec.seed, spec.holdout_fraction
        )
    else:
        n_h = max(1, int(spec.holdout_fraction * len(entities)))
        order = np.random.default_rng(spec.seed).permutation(len(entities))
        forget_e = []
        holdout_e = [entities[i] for i in order[:n_h]]
        retain_e = [entities[i] for i in order[n_h:]]

    docs: dict = {}
    qa: dict = {}
    for tag, group in (("forget", forget_e), ("retain", retain_e), ("holdout", holdout_e)):
        if group:
            docs[tag], qa[tag] = render_corpus(group, spec.facts_per_entity, tag, seed=spec.seed + 2)
        else:
            docs[tag], qa[tag] = [], []
    docs["utility"], qa["utility"] = gen_utility(spec)
    docs["filler"] = gen_filler(spec.seed + 3, spec.filler_tokens)

    # corruption targets come from the trained population (holdout stays
    # unseen in every corpus)
    trained = forget_e + retain_e
    n_corrupt = max(1, int(spec.corrupt_fraction * len(entities)))
    rng = np.random.default_rng(spec.corruption_seed + 17)
    corrupt_targets = [trained[i] for i in rng.permutation(len(trained))[:n_corrupt]]
    docs["corrupt"], cmap = corrupt(corrupt_targets, spec.corruption_seed)

    return Benchmark(
        spec=spec,
        entities=entities,
        forget_entities=forget_e,
        retain_entities=retain_e,
        holdout_entities=holdout_e,
        docs=docs,
        qa=qa,
        corruption_map=cmap,
    )


def qa_prompt(question: str) -> str:
    """The prompt half of the QA training/eval format."""
    return f"Q: {question} A:"


def qa_text(question: str, answer: str) -> tuple[str, str]:
    """(prompt, completion) pair; the completion is the supervised part."""
    return qa_prompt(question), f" {answer}"


# ---------------------------------------------------------------------------
# JSONL serialization


def write_jsonl(path: str | Path, rows: list[dict]) -> None:
    with open(path, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")


def save_benchmark(bench: Benchmark, out_dir: str | Path) -> dict:
    """Write docs/QA as JSONL files; returns {filename: path}."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = {}
    for tag, docs in sorted(bench.docs.items()):
        p = out_dir / f"docs_{tag}.jsonl"
        write_jsonl(p, [d.to_json() for d in docs])
        written[p.name] = p
    for tag, items in sorted(bench.qa.items()):
        p = out_dir / f"qa_{tag}.jsonl"
        write_jsonl(p, [q.to_json() for q in items])
        written[p.name] = p
    return written
