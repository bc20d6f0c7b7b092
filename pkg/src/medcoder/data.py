"""Text preprocessing, section-aware truncation, dataset builders, and a
synthetic corpus/ontology generator with a long-tail code distribution.

Corpus storage is line-delimited JSON (one record per note: id, text, code
list) plus a manifest recording the label space and builder parameters.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .errors import BuildError, InputError
from .ontology import OntologyGraph, build_hierarchy

logger = logging.getLogger(__name__)

__all__ = [
    "preprocess",
    "truncate_sections",
    "CodingExample",
    "Corpus",
    "DatasetSplit",
    "build_rare50",
    "build_common50",
    "CorpusConfig",
    "generate_synthetic_corpus",
    "generate_fewshot_corpus",
    "synthetic_ontology",
    "write_ontology_tables",
    "save_corpus",
    "load_corpus",
]

# Characters that survive preprocessing besides [a-z0-9]; each becomes its
# own token so template punctuation (":", ",", ".") lines up with text.
PUNCTUATION = ".,:;!?()'/-"

_DEID_RE = re.compile(r"\[\*\*.*?\*\*\]", re.DOTALL)
_NON_KEPT_RE = re.compile(f"[^a-z0-9{re.escape(PUNCTUATION)}]")
_PUNCT_SPLIT_RE = re.compile(f"([{re.escape(PUNCTUATION)}])")

DEFAULT_SECTION_HEADERS = (
    "chief complaint",
    "procedure",
    "history of present illness",
    "past medical history",
    "brief hospital course",
    "discharge diagnosis",
    "discharge condition",
)

_MAX_HEADER_WORDS = 4


def preprocess(raw_text: str) -> list[str]:
    """Lowercased word tokens: de-id spans removed, non-kept chars become
    whitespace, punctuation split into standalone tokens."""
    text = _DEID_RE.sub(" ", raw_text)
    text = text.lower()
    text = _NON_KEPT_RE.sub(" ", text)
    text = _PUNCT_SPLIT_RE.sub(r" \1 ", text)
    return text.split()


def _find_headers(tokens: Sequence[str]) -> list[tuple[int, tuple[str, ...]]]:
    """(start_index, header_words) for every run of <=4 word tokens that ends
    at a ':' and starts at the document start or right after a '.'."""
    headers = []
    for q, tok in enumerate(tokens):
        if tok != ":":
            continue
        s = q
        while s > 0 and q - s < _MAX_HEADER_WORDS and tokens[s - 1].isalpha():
            s -= 1
        if s == q:
            continue  # no words before the colon
        if s > 0 and tokens[s - 1] != ".":
            continue  # not at a section boundary
        headers.append((s, tuple(tokens[s:q])))
    return headers


def truncate_sections(
    tokens: Sequence[str],
    limit: int,
    keep_headers: Iterable[str] = DEFAULT_SECTION_HEADERS,
) -> list[str]:
    """Within-limit inputs pass through; over-limit inputs keep only the
    recognized relevant sections, then hard-truncate to ``limit``."""
    tokens = list(tokens)
    if len(tokens) <= limit:
        return tokens
    keep = {tuple(h.split()) for h in keep_headers}
    headers = _find_headers(tokens)
    kept: list[str] = []
    for i, (start, words) in enumerate(headers):
        if words not in keep:
            continue
        end = headers[i + 1][0] if i + 1 < len(headers) else len(tokens)
        kept.extend(tokens[start:end])
    return kept[:limit]


# ---------------------------------------------------------------------------
# Corpus containers
# ---------------------------------------------------------------------------


@dataclass
class CodingExample:
    example_id: str
    text: str
    gold_codes: set[str]
    tokens: list[str] = field(default_factory=list)

    def __post_init__(self):
        self.gold_codes = set(self.gold_codes)
        if not self.tokens:
            self.tokens = preprocess(self.text)


@dataclass
class Corpus:
    train: list[CodingExample]
    dev: list[CodingExample]
    test: list[CodingExample]
    label_codes: list[str]

    def splits(self) -> dict[str, list[CodingExample]]:
        return {"train": self.train, "dev": self.dev, "test": self.test}


@dataclass
class DatasetSplit(Corpus):
    builder_info: dict = field(default_factory=dict)

    def validate(self) -> None:
        ids = [ex.example_id for split in (self.train, self.dev, self.test) for ex in split]
        if len(ids) != len(set(ids)):
            raise BuildError("example ids are not disjoint across splits")
        covered = set()
        for ex in self.test:
            covered |= ex.gold_codes
        missing = [c for c in self.label_codes if c not in covered]
        if missing:
            raise BuildError(f"labels without any test example: {missing}")


def _occurrences(examples: Iterable[CodingExample]) -> dict[str, int]:
    counts: dict[str, int] = {}
    for ex in examples:
        for code in ex.gold_codes:
            counts[code] = counts.get(code, 0) + 1
    return counts


def _restrict(examples: list[CodingExample], labels: set[str]) -> list[CodingExample]:
    out = []
    for ex in examples:
        kept = ex.gold_codes & labels
        if kept:
            out.append(replace(ex, gold_codes=kept, tokens=list(ex.tokens)))
    return out


def build_rare50(
    corpus: Corpus,
    rare_threshold: int = 10,
    top_n: int = 50,
    exclusions: Sequence[str] = (),
) -> DatasetSplit:
    """Few-shot label set: codes occurring fewer than ``rare_threshold``
    times (train+test), ranked by descending test/train ratio.

    Codes with zero train occurrences rank below every finite ratio; ties
    break on the code string. The exclusion list is removed before the
    top-n cut.
    """
    train_counts = _occurrences(corpus.train)
    test_counts = _occurrences(corpus.test)
    excluded = set(exclusions)
    all_codes = sorted(set(train_counts) | set(test_counts))
    candidates = []
    for code in all_codes:
        tr, te = train_counts.get(code, 0), test_counts.get(code, 0)
        if tr + te >= rare_threshold or code in excluded:
            continue
        ratio = te / tr if tr > 0 else 0.0
        candidates.append((tr == 0, -ratio, code))
    if len(candidates) < top_n:
        raise BuildError(
            f"only {len(candidates)} rare-code candidates for top_n={top_n} "
            f"(threshold {rare_threshold}, {len(excluded)} excluded)"
        )
    candidates.sort()
    selected = [code for _, _, code in candidates[:top_n]]
    label_set = set(selected)
    split = DatasetSplit(
        train=_restrict(corpus.train, label_set),
        dev=_restrict(corpus.dev, label_set),
        test=_restrict(corpus.test, label_set),
        label_codes=selected,
        builder_info={
            "builder": "rare50",
            "rare_threshold": rare_threshold,
            "top_n": top_n,
            "exclusions": sorted(excluded),
        },
    )
    split.validate()
    return split


def build_common50(corpus: Corpus, top_n: int = 50) -> DatasetSplit:
    """Most frequent ``top_n`` codes over the whole corpus; instances keep
    only those with at least one selected code."""
    counts = _occurrences(corpus.train + corpus.dev + corpus.test)
    if len(counts) < top_n:
        raise BuildError(f"only {len(counts)} distinct codes for top_n={top_n}")
    ranked = sorted(counts.items(), key=lambda kv: (-kv[1], kv[0]))
    selected = [code for code, _ in ranked[:top_n]]
    label_set = set(selected)
    split = DatasetSplit(
        train=_restrict(corpus.train, label_set),
        dev=_restrict(corpus.dev, label_set),
        test=_restrict(corpus.test, label_set),
        label_codes=selected,
        builder_info={"builder": "common50", "top_n": top_n},
    )
    split.validate()
    return split


# ---------------------------------------------------------------------------
# Synthetic generation
# ---------------------------------------------------------------------------

_FILLER_WORDS = [f"w{i:03d}" for i in range(160)]


@dataclass(frozen=True)
class CorpusConfig:
    n_train: int = 200
    n_dev: int = 40
    n_test: int = 40
    max_codes_per_note: int = 3
    filler_tokens: int = 30
    zipf_exponent: float = 1.5
    p_drop: float = 0.0
    p_distract: float = 0.0


def _mentionable_codes(graph: OntologyGraph, codes: Sequence[str] | None) -> list[str]:
    wanted = list(codes) if codes is not None else sorted(graph.entities)
    usable = []
    for code in wanted:
        if graph.entity(code).terms:
            usable.append(code)
        else:
            logger.warning("entity %s has no terms: skipped by generator", code)
    return usable


def _compose_note(
    graph: OntologyGraph,
    gold: Sequence[str],
    cfg: CorpusConfig,
    rng: np.random.Generator,
    term_pool: dict[str, list[str]] | None = None,
) -> str:
    chunks: list[list[str]] = []
    for code in gold:
        terms = term_pool[code] if term_pool else sorted(graph.entity(code).terms)
        if rng.random() >= cfg.p_drop:
            chunks.append(preprocess(terms[rng.integers(len(terms))]))
        if cfg.p_distract > 0 and rng.random() < cfg.p_distract:
            sibs = sorted(graph.siblings(code))
            sibs = [s for s in sibs if graph.entity(s).terms]
            if sibs:
                sib_terms = sorted(graph.entity(sibs[rng.integers(len(sibs))]).terms)
                chunks.append(preprocess(sib_terms[rng.integers(len(sib_terms))]))
    words = [_FILLER_WORDS[i] for i in rng.integers(len(_FILLER_WORDS), size=cfg.filler_tokens)]
    for chunk in chunks:
        pos = int(rng.integers(len(words) + 1))
        words[pos:pos] = chunk
    return " ".join(words) + " ."


def generate_synthetic_corpus(
    graph: OntologyGraph,
    cfg: CorpusConfig,
    rng: np.random.Generator,
    codes: Sequence[str] | None = None,
) -> Corpus:
    """Notes mention a surface term of each gold code (minus drop noise,
    plus sibling distractors); code frequencies follow a Zipf long tail
    over the code list order."""
    code_list = _mentionable_codes(graph, codes)
    if not code_list:
        raise BuildError("no codes with terms to generate from")
    weights = 1.0 / np.arange(1, len(code_list) + 1) ** cfg.zipf_exponent
    probs = weights / weights.sum()

    seeds = rng.spawn(cfg.n_train + cfg.n_dev + cfg.n_test)
    sizes = {"train": cfg.n_train, "dev": cfg.n_dev, "test": cfg.n_test}
    splits: dict[str, list[CodingExample]] = {"train": [], "dev": [], "test": []}
    i = 0
    for split, size in sizes.items():
        for j in range(size):
            note_rng = seeds[i]
            i += 1
            k = int(note_rng.integers(1, cfg.max_codes_per_note + 1))
            k = min(k, len(code_list))
            picked = note_rng.choice(len(code_list), size=k, replace=False, p=probs)
            gold = [code_list[idx] for idx in sorted(picked)]
            text = _compose_note(graph, gold, cfg, note_rng)
            splits[split].append(CodingExample(f"{split}-{j:05d}", text, set(gold)))
    return Corpus(splits["train"], splits["dev"], splits["test"], code_list)


def generate_fewshot_corpus(
    graph: OntologyGraph,
    codes: Sequence[str],
    cfg: CorpusConfig,
    rng: np.random.Generator,
    shots: int = 5,
    dev_per_code: int = 1,
    test_per_code: int = 3,
    disjoint_test_terms: bool = True,
) -> Corpus:
    """One gold code per note, ``shots`` train notes per code. With
    ``disjoint_test_terms``, test notes use surface terms never seen in
    train/dev notes (entities need >= 2 terms)."""
    code_list = _mentionable_codes(graph, codes)
    pools: dict[str, dict[str, list[str]]] = {}
    for code in code_list:
        terms = sorted(graph.entity(code).terms)
        if disjoint_test_terms and len(terms) >= 2:
            pools[code] = {"train": terms[: len(terms) // 2 + len(terms) % 2],
                           "test": terms[len(terms) // 2 + len(terms) % 2:]}
        else:
            pools[code] = {"train": terms, "test": terms}

    splits: dict[str, list[CodingExample]] = {"train": [], "dev": [], "test": []}
    sizes = {"train": shots, "dev": dev_per_code, "test": test_per_code}
    for code in code_list:
        for split, size in sizes.items():
            pool = pools[code]["test" if split == "test" else "train"]
            for j in range(size):
                note_rng = rng.spawn(1)[0]
                text = _compose_note(graph, [code], cfg, note_rng, term_pool={code: pool})
                splits[split].append(CodingExample(f"{split}-{code}-{j:02d}", text, {code}))
    return Corpus(splits["train"], splits["dev"], splits["test"], code_list)


def synthetic_ontology(
    n_roots: int = 4,
    branching: tuple[int, ...] = (4, 3),
    terms_per_entity: int = 4,
) -> OntologyGraph:
    """Deterministic dotted-code tree fixture. Entity k gets lexically
    disjoint single-token terms t<k>a..t<k>d (the last one filed as an
    abbreviation) so term alignment carries no lexical shortcut."""
    codes: list[str] = []
    level = [f"{(r + 1) * 100}" for r in range(n_roots)]
    codes.extend(level)
    for depth, width in enumerate(branching):
        nxt = []
        for code in level:
            for j in range(width):
                child = f"{code}.{j}" if depth == 0 else f"{code}{j}"
                nxt.append(child)
        codes.extend(nxt)
        level = nxt

    suffixes = "abcdefgh"[: max(2, terms_per_entity)]
    entries = []
    term_sets = {}
    for k, code in enumerate(codes):
        terms = [f"t{k}{suf}" for suf in suffixes]
        entries.append((code, f"{terms[0]} disorder"))
        term_sets[code] = terms
    graph = build_hierarchy(entries)
    for code in codes:
        terms = term_sets[code]
        graph.entities[code].synonyms.update(terms[:-1])
        graph.entities[code].abbreviations.add(terms[-1])
    return graph


def write_ontology_tables(graph: OntologyGraph, out_dir) -> dict[str, Path]:
    """Dump a graph as the three tab-separated input tables."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {
        "codes": out_dir / "codes.tsv",
        "synonyms": out_dir / "synonyms.tsv",
        "abbreviations": out_dir / "abbreviations.tsv",
    }
    code_lines = []
    syn_lines = []
    abbr_lines = []
    for code in sorted(graph.entities):
        ent = graph.entities[code]
        code_lines.append(f"{code}\t{ent.description}")
        for term in sorted(ent.synonyms):
            syn_lines.append(f"{code}\tENG\t{term}")
        for term in sorted(ent.abbreviations):
            abbr_lines.append(f"{code}\t{term}")
    paths["codes"].write_text("\n".join(code_lines) + "\n", encoding="utf-8")
    paths["synonyms"].write_text("\n".join(syn_lines) + "\n", encoding="utf-8")
    paths["abbreviations"].write_text("\n".join(abbr_lines) + "\n", encoding="utf-8")
    return paths


# ---------------------------------------------------------------------------
# Corpus files
# ---------------------------------------------------------------------------


def save_corpus(corpus: Corpus, out_dir, extra_manifest: dict | None = None) -> None:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for split, examples in corpus.splits().items():
        lines = [
            json.dumps(
                {"id": ex.example_id, "text": ex.text, "codes": sorted(ex.gold_codes)},
                sort_keys=True,
            )
            for ex in examples
        ]
        (out_dir / f"{split}.jsonl").write_text("\n".join(lines) + "\n", encoding="utf-8")
    manifest = {
        "label_codes": list(corpus.label_codes),
        "files": {s: f"{s}.jsonl" for s in ("train", "dev", "test")},
    }
    if isinstance(corpus, DatasetSplit):
        manifest["builder_info"] = corpus.builder_info
    manifest.update(extra_manifest or {})
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_corpus(corpus_dir) -> Corpus:
    corpus_dir = Path(corpus_dir)
    manifest_path = corpus_dir / "manifest.json"
    if not manifest_path.is_file():
        raise InputError(f"no corpus manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text(encoding="utf-8"))
    splits = {}
    for split, fname in manifest["files"].items():
        examples = []
        for line in (corpus_dir / fname).read_text(encoding="utf-8").splitlines():
            if not line.strip():
                continue
            rec = json.loads(line)
            examples.append(CodingExample(rec["id"], rec["text"], set(rec["codes"])))
        splits[split] = examples
    return Corpus(splits["train"], splits["dev"], splits["test"], manifest["label_codes"])
