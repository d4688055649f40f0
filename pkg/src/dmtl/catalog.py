"""Attribute catalogs: which attributes exist, their kinds, and grouping.

Attributes are nominal (a fixed class count, no ordering) or ordinal (a real
value in a declared range).  Attributes are grouped into categories; every
category is wholly nominal or wholly ordinal, carries a loss weight, and maps
to one subnetwork head of the model.

Catalog file grammar (one catalog per file, UTF-8):

    catalog v1
    #category <id>,<N|O>,<holistic|local:REGION>,<lambda>
    <name>,<N|O>,<class count | lo..hi>,<category id>

Category lines may appear in any position before the attributes that use
them.  Whitespace around commas is ignored; ``#category`` is the only line
starting with ``#`` that is not a comment.
"""

from __future__ import annotations

import hashlib
import io
from dataclasses import dataclass
from typing import Iterable, Optional

from .errors import ContractError, FormatError

NOMINAL = "N"
ORDINAL = "O"


@dataclass(frozen=True)
class AttributeDef:
    name: str
    kind: str                      # NOMINAL or ORDINAL
    category_id: str
    classes: int = 0               # nominal only, >= 2
    lo: float = 0.0                # ordinal only
    hi: float = 0.0

    def __post_init__(self):
        if self.kind == NOMINAL and self.classes < 2:
            raise ContractError(f"attribute {self.name!r} needs >= 2 classes")
        if self.kind == ORDINAL and not self.lo < self.hi:
            raise ContractError(f"attribute {self.name!r} needs lo < hi")
        if self.kind not in (NOMINAL, ORDINAL):
            raise ContractError(f"attribute kind must be N or O, got {self.kind!r}")


@dataclass(frozen=True)
class CategorySpec:
    id: str
    kind: str
    scope: str = "holistic"        # "holistic" or "local:<region>"
    lam: float = 1.0               # loss weight, > 0
    # optional head architecture override; not part of the file grammar,
    # so it never enters serialization or the digest
    head_spec: Optional[tuple] = None

    def __post_init__(self):
        if self.lam <= 0:
            raise ContractError(f"category {self.id!r} weight must be > 0")
        if self.kind not in (NOMINAL, ORDINAL):
            raise ContractError(f"category kind must be N or O, got {self.kind!r}")
        if self.scope != "holistic" and not self.scope.startswith("local:"):
            raise ContractError(f"category scope {self.scope!r} invalid")


class AttributeCatalog:
    """Ordered attribute list plus category table, validated on build."""

    def __init__(self, attributes: Iterable[AttributeDef],
                 categories: Iterable[CategorySpec]):
        self.attributes = list(attributes)
        self.categories = list(categories)
        cat_ids = [c.id for c in self.categories]
        if len(set(cat_ids)) != len(cat_ids):
            raise ContractError("duplicate category ids")
        names = [a.name for a in self.attributes]
        if len(set(names)) != len(names):
            raise ContractError("duplicate attribute names")
        by_id = {c.id: c for c in self.categories}
        for a in self.attributes:
            cat = by_id.get(a.category_id)
            if cat is None:
                raise ContractError(
                    f"attribute {a.name!r} references unknown category {a.category_id!r}")
            if cat.kind != a.kind:
                raise ContractError(
                    f"attribute {a.name!r} kind {a.kind} does not match "
                    f"category {cat.id!r} kind {cat.kind}")
        for c in self.categories:
            if not any(a.category_id == c.id for a in self.attributes):
                raise ContractError(f"category {c.id!r} has no attributes")
        self._by_name = {a.name: a for a in self.attributes}

    def __len__(self) -> int:
        return len(self.attributes)

    def attribute(self, name: str) -> AttributeDef:
        return self._by_name[name]

    def names(self) -> list[str]:
        return [a.name for a in self.attributes]

    def category(self, cat_id: str) -> CategorySpec:
        return next(c for c in self.categories if c.id == cat_id)

    def members(self, cat_id: str) -> list[AttributeDef]:
        return [a for a in self.attributes if a.category_id == cat_id]

    def head_width(self, cat_id: str) -> int:
        """Output width of the category's head: sum of class counts for a
        nominal category, one output per attribute for an ordinal one."""
        members = self.members(cat_id)
        if self.category(cat_id).kind == NOMINAL:
            return sum(a.classes for a in members)
        return len(members)

    def serialize(self) -> str:
        """Canonical text form; also the digest input."""
        out = io.StringIO()
        out.write("catalog v1\n")
        for c in self.categories:
            out.write(f"#category {c.id},{c.kind},{c.scope},{c.lam:g}\n")
        for a in self.attributes:
            if a.kind == NOMINAL:
                params = str(a.classes)
            else:
                params = f"{a.lo:g}..{a.hi:g}"
            out.write(f"{a.name},{a.kind},{params},{a.category_id}\n")
        return out.getvalue()

    def digest(self) -> bytes:
        return hashlib.sha256(self.serialize().encode()).digest()


def parse_catalog(text: str) -> AttributeCatalog:
    lines = text.splitlines()
    if not lines or lines[0].strip() != "catalog v1":
        raise FormatError("catalog file must start with 'catalog v1'")
    attributes: list[AttributeDef] = []
    categories: list[CategorySpec] = []
    for ln, raw in enumerate(lines[1:], start=2):
        line = raw.strip()
        if not line:
            continue
        if line.startswith("#category"):
            body = line[len("#category"):].strip()
            parts = [p.strip() for p in body.split(",")]
            if len(parts) != 4:
                raise FormatError(f"line {ln}: category needs id,kind,scope,lambda")
            cid, kind, scope, lam = parts
            try:
                categories.append(CategorySpec(cid, kind, scope, float(lam)))
            except (ValueError, ContractError) as e:
                raise FormatError(f"line {ln}: {e}") from None
            continue
        if line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 4:
            raise FormatError(f"line {ln}: attribute needs name,kind,params,category")
        name, kind, params, cid = parts
        try:
            if kind == NOMINAL:
                attributes.append(AttributeDef(name, kind, cid, classes=int(params)))
            elif kind == ORDINAL:
                lo_s, _, hi_s = params.partition("..")
                if not _:
                    raise ValueError(f"ordinal range must be lo..hi, got {params!r}")
                attributes.append(AttributeDef(name, kind, cid,
                                               lo=float(lo_s), hi=float(hi_s)))
            else:
                raise ValueError(f"kind must be N or O, got {kind!r}")
        except (ValueError, ContractError) as e:
            raise FormatError(f"line {ln}: {e}") from None
    try:
        return AttributeCatalog(attributes, categories)
    except ContractError as e:
        raise FormatError(str(e)) from None


def load_catalog(path) -> AttributeCatalog:
    with open(path, "r", encoding="utf-8") as f:
        return parse_catalog(f.read())


def save_catalog(catalog: AttributeCatalog, path) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(catalog.serialize())


# ---------------------------------------------------------------------------
# shipped presets


def demographic_catalog() -> AttributeCatalog:
    """Age (ordinal, 0..100) plus gender and race (nominal) in two categories."""
    return AttributeCatalog(
        attributes=[
            AttributeDef("age", ORDINAL, "ord_holistic", lo=0.0, hi=100.0),
            AttributeDef("gender", NOMINAL, "nom_holistic", classes=2),
            AttributeDef("race", NOMINAL, "nom_holistic", classes=3),
        ],
        categories=[
            CategorySpec("ord_holistic", ORDINAL, "holistic"),
            CategorySpec("nom_holistic", NOMINAL, "holistic"),
        ],
    )


_FACE40_NAMES = [
    "FiveOClockShadow", "ArchedEyebrows", "BushyEyebrows", "Attractive",
    "BagsUnderEyes", "Bald", "Bangs", "BlackHair", "BlondHair", "BrownHair",
    "GrayHair", "BigLips", "BigNose", "Blurry", "Chubby", "DoubleChin",
    "Eyeglasses", "Goatee", "HeavyMakeup", "HighCheekbones", "Male",
    "MouthSlightlyOpen", "Mustache", "NarrowEyes", "NoBeard", "OvalFace",
    "PaleSkin", "PointyNose", "RecedingHairline", "RosyCheeks", "Sideburns",
    "Smiling", "StraightHair", "WavyHair", "WearEarrings", "WearHat",
    "WearLipstick", "WearNecklace", "WearNecktie", "Young",
]

# subnetwork grouping of the 40 binary face attributes: one holistic group
# plus seven groups tied to face regions (1-based indices into _FACE40_NAMES)
_FACE40_GROUPS = {
    "holistic": (4, 14, 15, 19, 21, 26, 27, 32, 40),
    "local:hair": (6, 7, 8, 9, 10, 11, 29, 33, 34, 36),
    "local:eyes": (2, 3, 5, 17, 24),
    "local:nose": (13, 28),
    "local:cheeks": (20, 30, 31, 35),
    "local:mouth": (1, 12, 22, 23, 37),
    "local:chin": (16, 18, 25),
    "local:neck": (38, 39),
}


def face40_catalog() -> AttributeCatalog:
    """The 40 binary face attributes grouped into one holistic and seven
    local nominal categories."""
    index_to_cat = {}
    categories = []
    for i, (scope, idxs) in enumerate(_FACE40_GROUPS.items()):
        cid = f"g{i}" if scope == "holistic" else f"g{i}_{scope.split(':')[1]}"
        categories.append(CategorySpec(cid, NOMINAL, scope))
        for idx in idxs:
            index_to_cat[idx] = cid
    attributes = [
        AttributeDef(name, NOMINAL, index_to_cat[i + 1], classes=2)
        for i, name in enumerate(_FACE40_NAMES)
    ]
    return AttributeCatalog(attributes, categories)
