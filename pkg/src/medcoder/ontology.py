"""Code ontology: entities with synonyms, abbreviations, and a hierarchy tree.

Hierarchy follows dotted-code prefix conventions (category 250, subcategory
250.0, sub-subcategory 250.00): the parent of a code is its longest proper
prefix present in the code set, unless an explicit parent is given. The
code's own description is seeded into its synonym set, so ``terms`` (the
union of synonyms and abbreviations) is non-empty whenever a description
exists.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

from .errors import BuildError, InputError

logger = logging.getLogger(__name__)

__all__ = [
    "OntologyEntity",
    "OntologyGraph",
    "build_hierarchy",
    "read_synonym_table",
    "read_abbreviation_table",
    "read_codes_table",
]


@dataclass
class OntologyEntity:
    code: str
    description: str = ""
    synonyms: set[str] = field(default_factory=set)
    abbreviations: set[str] = field(default_factory=set)
    parent: str | None = None
    children: set[str] = field(default_factory=set)
    level: int = 0

    @property
    def terms(self) -> set[str]:
        return self.synonyms | self.abbreviations


class OntologyGraph:
    def __init__(self):
        self.entities: dict[str, OntologyEntity] = {}
        self.level_index: dict[int, list[str]] = {}

    def __contains__(self, code: str) -> bool:
        return code in self.entities

    def __len__(self) -> int:
        return len(self.entities)

    def entity(self, code: str) -> OntologyEntity:
        try:
            return self.entities[code]
        except KeyError:
            raise InputError(f"unknown code: {code}") from None

    def parent_of(self, code: str) -> str | None:
        return self.entity(code).parent

    def siblings(self, code: str) -> set[str]:
        ent = self.entity(code)
        if ent.parent is None:
            return set()
        return self.entities[ent.parent].children - {code}

    def codes_at_level(self, level: int) -> list[str]:
        return list(self.level_index.get(level, []))

    @property
    def levels(self) -> list[int]:
        return sorted(self.level_index)

    def relation(self, a: str, b: str) -> str:
        """'parent' for a parent-child pair (either direction), 'sibling',
        or 'inter' for anything else. a and b must be distinct codes."""
        if a == b:
            raise InputError("relation: codes must differ")
        ea, eb = self.entity(a), self.entity(b)
        if ea.parent == b or eb.parent == a:
            return "parent"
        if ea.parent is not None and ea.parent == eb.parent:
            return "sibling"
        return "inter"

    def preferred_description(self, code: str) -> str:
        """The code's own description, else its first synonym (sorted)."""
        ent = self.entity(code)
        if ent.description:
            return ent.description
        for term in sorted(ent.synonyms):
            return term
        raise InputError(f"no description or synonym for {code}")

    # -- knowledge-table ingestion ------------------------------------------

    def load_synonyms(self, rows: Iterable[tuple[str, str, str]]) -> list[str]:
        """Rows of (entity_code, language, term); only English rows are kept.

        Returns warnings for skipped rows (unknown entity, empty term).
        """
        warnings = []
        for code, lang, term in rows:
            if lang.strip().upper() != "ENG":
                continue
            warning = self._add_term(code, term, "synonyms")
            if warning:
                warnings.append(warning)
        for w in warnings:
            logger.warning(w)
        return warnings

    def load_abbreviations(self, rows: Iterable[tuple[str, str]]) -> list[str]:
        """Rows of (entity_code, abbreviation)."""
        warnings = []
        for code, term in rows:
            warning = self._add_term(code, term, "abbreviations")
            if warning:
                warnings.append(warning)
        for w in warnings:
            logger.warning(w)
        return warnings

    def _add_term(self, code: str, term: str, bucket: str) -> str | None:
        term = term.strip()
        if not term:
            return f"empty term for entity {code}: skipped"
        if code not in self.entities:
            return f"unknown entity {code} for term {term!r}: skipped"
        getattr(self.entities[code], bucket).add(term)
        return None

    # -- validation and serialization ---------------------------------------

    def validate(self) -> None:
        for code, ent in self.entities.items():
            if ent.parent is not None:
                parent = self.entities.get(ent.parent)
                if parent is None or code not in parent.children:
                    raise BuildError(f"inconsistent parent link for {code}")
                if ent.level != parent.level + 1:
                    raise BuildError(f"bad level for {code}")
            elif ent.level != 0:
                raise BuildError(f"root {code} must be level 0")
            for child in ent.children:
                if self.entities.get(child) is None or self.entities[child].parent != code:
                    raise BuildError(f"inconsistent child link {code} -> {child}")
        indexed = sorted(c for codes in self.level_index.values() for c in codes)
        if indexed != sorted(self.entities):
            raise BuildError("level index does not partition the code set")

    def to_dict(self) -> dict:
        return {
            "entities": [
                {
                    "code": e.code,
                    "description": e.description,
                    "synonyms": sorted(e.synonyms),
                    "abbreviations": sorted(e.abbreviations),
                    "parent": e.parent,
                    "children": sorted(e.children),
                    "level": e.level,
                }
                for _, e in sorted(self.entities.items())
            ]
        }

    @classmethod
    def from_dict(cls, payload: dict) -> "OntologyGraph":
        graph = cls()
        for rec in payload["entities"]:
            ent = OntologyEntity(
                code=rec["code"],
                description=rec["description"],
                synonyms=set(rec["synonyms"]),
                abbreviations=set(rec["abbreviations"]),
                parent=rec["parent"],
                children=set(rec["children"]),
                level=rec["level"],
            )
            graph.entities[ent.code] = ent
            graph.level_index.setdefault(ent.level, []).append(ent.code)
        for level in graph.level_index:
            graph.level_index[level].sort()
        graph.validate()
        return graph

    def save(self, path) -> None:
        Path(path).write_text(
            json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n", encoding="utf-8"
        )

    @classmethod
    def load(cls, path) -> "OntologyGraph":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def __eq__(self, other) -> bool:
        return isinstance(other, OntologyGraph) and self.to_dict() == other.to_dict()


def _prefix_parent(code: str, codes: set[str]) -> str | None:
    """Longest proper prefix of ``code`` present in ``codes`` (dotted rules)."""
    cand = code
    while cand:
        cand = cand[:-1].rstrip(".")
        if cand in codes:
            return cand
    return None


def build_hierarchy(
    codes: Sequence[str | tuple],
    descriptions: dict[str, str] | None = None,
    explicit_parents: dict[str, str] | None = None,
) -> OntologyGraph:
    """Build the entity tree from a code list.

    ``codes`` entries may be plain code strings or (code, description[,
    parent]) tuples; tuple fields override the ``descriptions`` /
    ``explicit_parents`` maps. Parents default to the longest-prefix rule.
    """
    descriptions = dict(descriptions or {})
    explicit_parents = dict(explicit_parents or {})
    code_list: list[str] = []
    for entry in codes:
        if isinstance(entry, str):
            code = entry
        else:
            code = entry[0]
            if len(entry) > 1 and entry[1]:
                descriptions[code] = entry[1]
            if len(entry) > 2 and entry[2]:
                explicit_parents[code] = entry[2]
        if code in code_list:
            raise InputError(f"duplicate code: {code}")
        if not code:
            raise InputError("empty code")
        code_list.append(code)

    code_set = set(code_list)
    graph = OntologyGraph()
    for code in code_list:
        desc = descriptions.get(code, "")
        ent = OntologyEntity(code=code, description=desc)
        if desc:
            ent.synonyms.add(desc)
        graph.entities[code] = ent

    for code in code_list:
        parent = explicit_parents.get(code)
        if parent is not None:
            if parent not in code_set:
                raise InputError(f"explicit parent {parent} of {code} not in code set")
        else:
            parent = _prefix_parent(code, code_set)
        if parent is not None:
            graph.entities[code].parent = parent
            graph.entities[parent].children.add(code)

    # Assign levels from the roots; a leftover node means a parent cycle.
    pending = {c for c in code_list if graph.entities[c].parent is not None}
    frontier = [c for c in code_list if graph.entities[c].parent is None]
    level = 0
    while frontier:
        graph.level_index[level] = sorted(frontier)
        nxt = []
        for code in frontier:
            graph.entities[code].level = level
            for child in sorted(graph.entities[code].children):
                pending.discard(child)
                nxt.append(child)
        frontier = nxt
        level += 1
    if pending:
        raise InputError(f"parent links form a cycle involving {sorted(pending)[:3]}")
    graph.validate()
    return graph


# ---------------------------------------------------------------------------
# Tab-separated input tables
# ---------------------------------------------------------------------------


def _read_tsv(path, n_cols: int) -> list[tuple]:
    rows = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = line.split("\t")
        if len(parts) < n_cols:
            raise InputError(f"{path}: row {lineno}: expected {n_cols} columns, got {len(parts)}")
        rows.append(tuple(p.strip() for p in parts))
    return rows


def read_synonym_table(path) -> list[tuple[str, str, str]]:
    """MRCONSO-like rows: entity_code <tab> language <tab> term."""
    return [(r[0], r[1], r[2]) for r in _read_tsv(path, 3)]


def read_abbreviation_table(path) -> list[tuple[str, str]]:
    """lrabr-like rows: entity_code <tab> abbreviation."""
    return [(r[0], r[1]) for r in _read_tsv(path, 2)]


def read_codes_table(path) -> list[tuple]:
    """Rows: code [<tab> description [<tab> explicit_parent]]."""
    entries = []
    for lineno, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip() or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split("\t")]
        if not parts[0]:
            raise InputError(f"{path}: row {lineno}: empty code")
        entries.append(tuple(parts[:3]))
    return entries
