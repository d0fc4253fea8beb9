"""
Builtin taxonomies, label maps between them, and dataset remapping.

Mapping tables live as data files under layout_data/mappings/, one per builtin
map, in the line format `source_name<TAB>target_name|DROP` with '#' comments.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple

from layout_data.errors import MappingError
from layout_data.types import Dataset, Taxonomy

logger = logging.getLogger(__name__)

MAPPINGS_DIR = Path(__file__).resolve().parent / "mappings"
DROP = "DROP"

M6DOC_LABELS = (
    "QR code",
    "advertisement",
    "algorithm",
    "answer",
    "author",
    "barcode",
    "bill",
    "blank",
    "bracket",
    "breakout",
    "byline",
    "caption",
    "catalogue",
    "chapter title",
    "code",
    "correction",
    "credit",
    "dateline",
    "drop cap",
    "editor's note",
    "endnote",
    "examinee information",
    "fifth-level title",
    "figure",
    "first-level question number",
    "first-level title",
    "flag",
    "folio",
    "footer",
    "footnote",
    "formula",
    "fourth-level section title",
    "fourth-level title",
    "header",
    "headline",
    "index",
    "inside",
    "institute",
    "jump line",
    "kicker",
    "lead",
    "marginal note",
    "matching",
    "mugshot",
    "option",
    "ordered list",
    "other question number",
    "page number",
    "paragraph",
    "part",
    "play",
    "poem",
    "reference",
    "sealing line",
    "second-level question number",
    "second-level title",
    "section",
    "section title",
    "sidebar",
    "sub section title",
    "subhead",
    "subsub section title",
    "supplementary note",
    "table",
    "table caption",
    "table note",
    "teasers",
    "third-level question number",
    "third-level title",
    "title",
    "translator",
    "underscore",
    "unordered list",
    "weather forecast",
)

DOCBANK_LABELS = (
    "abstract", "author", "caption", "date", "equation", "figure", "footer",
    "list", "paragraph", "reference", "section", "table", "title",
)

DOCLAYNET_LABELS = (
    "Caption", "Footnote", "Formula", "List-item", "Page-footer", "Page-header",
    "Picture", "Section-header", "Table", "Text", "Title",
)

PUBLAYNET_LABELS = ("text", "title", "list", "table", "figure")

NOTE_V1_LABELS = (
    "answer", "bracket", "caption", "catalogue", "chapter title", "fifth-level title",
    "figure", "first-level question number", "first-level title", "footer", "formula",
    "fourth-level title", "option", "ordered list", "page number", "paragraph", "part",
    "second-level question number", "second-level title", "section", "section title",
    "sub section title", "supplementary note", "table", "third-level title",
    "underscore", "unordered list",
)

NOTE_V2_LABELS = (
    "answer", "caption", "catalogue", "chapter title", "figure", "footer", "formula",
    "option", "ordered list", "page number", "paragraph", "part", "section",
    "section title", "sub section title", "supplementary note", "table", "unordered list",
)

BUILTIN_TAXONOMIES: Dict[str, Tuple[str, ...]] = {
    "m6doc": M6DOC_LABELS,
    "docbank": DOCBANK_LABELS,
    "doclaynet": DOCLAYNET_LABELS,
    "publaynet": PUBLAYNET_LABELS,
    "note_v1": NOTE_V1_LABELS,
    "note_v2": NOTE_V2_LABELS,
}

BUILTIN_MAPS = ("m6doc_to_docbank", "m6doc_to_doclaynet", "m6doc_to_publaynet", "note_v1_to_v2")


def builtin_taxonomy(taxonomy_id: str) -> Taxonomy:
    if taxonomy_id not in BUILTIN_TAXONOMIES:
        raise KeyError(f"unknown taxonomy '{taxonomy_id}'. Known: {', '.join(BUILTIN_TAXONOMIES)}")
    return Taxonomy.from_names(taxonomy_id, BUILTIN_TAXONOMIES[taxonomy_id])


@dataclass(frozen=True)
class LabelMapEntry:
    source_name: str
    target_name: Optional[str]  # None means drop

    @property
    def action(self) -> str:
        return "drop" if self.target_name is None else "map"


@dataclass(frozen=True)
class LabelMap:
    source_taxonomy_id: str
    target_taxonomy_id: str
    entries: Tuple[LabelMapEntry, ...]

    def lookup(self, source_name: str) -> LabelMapEntry:
        for e in self.entries:
            if e.source_name == source_name:
                return e
        raise MappingError(f"no entry for category '{source_name}' in "
                           f"{self.source_taxonomy_id}->{self.target_taxonomy_id} map")

    def target_names(self) -> List[str]:
        """Distinct map targets in first-appearance order."""
        seen: List[str] = []
        for e in self.entries:
            if e.target_name is not None and e.target_name not in seen:
                seen.append(e.target_name)
        return seen


@dataclass
class CoverageReport:
    unmapped: List[str] = field(default_factory=list)
    dropped: List[str] = field(default_factory=list)
    mapped: Dict[str, str] = field(default_factory=dict)

    @property
    def target_names(self) -> List[str]:
        return sorted(set(self.mapped.values()))


def parse_label_map(text: str, source_taxonomy_id: Optional[str] = None,
                    target_taxonomy_id: Optional[str] = None) -> LabelMap:
    directives: Dict[str, str] = {}
    entries: List[LabelMapEntry] = []
    seen = set()
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.rstrip("\r\n")
        if not line.strip():
            continue
        if line.startswith("#"):
            key, sep, value = line[1:].partition(":")
            if sep and key.strip() in ("source-taxonomy", "target-taxonomy"):
                directives[key.strip()] = value.strip()
            continue
        parts = line.split("\t")
        if len(parts) != 2 or not parts[0] or not parts[1]:
            raise MappingError(f"line {lineno}: expected 'source<TAB>target|DROP', got {line!r}")
        source, target = parts
        if source in seen:
            raise MappingError(f"line {lineno}: duplicate entry for '{source}'")
        seen.add(source)
        entries.append(LabelMapEntry(source, None if target == DROP else target))

    source_id = source_taxonomy_id or directives.get("source-taxonomy")
    target_id = target_taxonomy_id or directives.get("target-taxonomy")
    if not source_id or not target_id:
        raise MappingError("label map does not name its source and target taxonomies")
    return LabelMap(source_id, target_id, tuple(entries))


def load_label_map(path, source_taxonomy_id: Optional[str] = None,
                   target_taxonomy_id: Optional[str] = None) -> LabelMap:
    text = Path(path).read_text(encoding="utf-8")
    return parse_label_map(text, source_taxonomy_id, target_taxonomy_id)


def _pinned_checksums() -> Dict[str, str]:
    sums = {}
    for line in (MAPPINGS_DIR / "SHA256SUMS").read_text(encoding="utf-8").splitlines():
        if line.strip():
            digest, name = line.split()
            sums[name] = digest
    return sums


def builtin_map(name: str) -> LabelMap:
    if name not in BUILTIN_MAPS:
        raise KeyError(f"unknown builtin map '{name}'. Known: {', '.join(BUILTIN_MAPS)}")
    path = MAPPINGS_DIR / f"{name}.tsv"
    data = path.read_bytes()
    digest = hashlib.sha256(data).hexdigest()
    expected = _pinned_checksums().get(path.name)
    if digest != expected:
        raise MappingError(f"checksum mismatch for {path.name}: {digest} != {expected}")
    m = parse_label_map(data.decode("utf-8"))
    target = builtin_taxonomy(m.target_taxonomy_id)
    source = builtin_taxonomy(m.source_taxonomy_id)
    for e in m.entries:
        if source.by_name(e.source_name) is None:
            raise MappingError(f"{name}: '{e.source_name}' is not a {source.id} category")
        if e.target_name is not None and target.by_name(e.target_name) is None:
            raise MappingError(f"{name}: '{e.target_name}' is not a {target.id} category")
    return m


def identity_map(taxonomy: Taxonomy) -> LabelMap:
    return LabelMap(taxonomy.id, taxonomy.id,
                    tuple(LabelMapEntry(n, n) for n in taxonomy.names))


def target_taxonomy(m: LabelMap, source: Optional[Taxonomy] = None) -> Taxonomy:
    """Builtin taxonomy if the target id is known, else one built from the map's targets."""
    if source is not None and m.target_taxonomy_id == source.id:
        return source
    if m.target_taxonomy_id in BUILTIN_TAXONOMIES:
        return builtin_taxonomy(m.target_taxonomy_id)
    return Taxonomy.from_names(m.target_taxonomy_id, m.target_names())


def apply_map(d: Dataset, m: LabelMap) -> Dataset:
    if d.taxonomy.id != m.source_taxonomy_id:
        raise MappingError(f"dataset taxonomy '{d.taxonomy.id}' is not the map source '{m.source_taxonomy_id}'")
    target = target_taxonomy(m, d.taxonomy)

    relabel: Dict[int, Optional[int]] = {}
    for cat in d.taxonomy.categories:
        try:
            entry = m.lookup(cat.name)
        except MappingError:
            continue
        if entry.target_name is None:
            relabel[cat.id] = None
            continue
        tcat = target.by_name(entry.target_name)
        if tcat is None:
            raise MappingError(f"target '{entry.target_name}' is not in taxonomy '{target.id}'")
        relabel[cat.id] = tcat.id

    pages = []
    dropped = 0
    for page in d.pages:
        kept = []
        for inst in page.instances:
            if inst.category_id not in relabel:
                name = getattr(d.taxonomy.by_id(inst.category_id), "name", inst.category_id)
                raise MappingError(f"page {page.image_id}: category '{name}' has no map entry")
            new_id = relabel[inst.category_id]
            if new_id is None:
                dropped += 1
                continue
            kept.append(inst.with_category(new_id))
        pages.append(page.with_instances(kept))
    logger.info("Remapped %s -> %s: %d instance(s) dropped", m.source_taxonomy_id, target.id, dropped)
    return Dataset(target, tuple(pages))


def coverage_report(m: LabelMap, t: Taxonomy) -> CoverageReport:
    report = CoverageReport()
    by_source = {e.source_name: e for e in m.entries}
    for name in t.names:
        entry = by_source.get(name)
        if entry is None:
            report.unmapped.append(name)
        elif entry.target_name is None:
            report.dropped.append(name)
        else:
            report.mapped[name] = entry.target_name
    return report
