"""Synthetic multi-page catalog corpus.

Documents are lists of three-field entries (date code, place code, summary)
rendered as three-column table pages. Entries may cross page boundaries;
continuation rows render only the summary column, while the ground-truth
markup repeats the carried-over date/place tokens. Parsing such rows
therefore requires the previous page.

Everything is a pure function of (seed, config): regeneration is
byte-identical, including the manifest.
"""

from __future__ import annotations

import dataclasses
import json
import os
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import font

DATE_LEXICON = ["JAN", "FEB", "MAR", "APR", "MAY", "JUN",
                "JUL", "AUG", "SEP", "OCT", "NOV", "DEC"]
PLACE_LEXICON = ["ROMA", "PISA", "LYON", "GENT", "BARI", "KOLN", "WIEN", "OSLO"]

# Summary vocabulary. Kept free of any date/place code as a substring so the
# glyph-template audit cannot hit a false positive inside summary text.
WORD_LEXICON = [
    "ACTA", "AMEN", "ARCS", "BONA", "CERA", "CODE", "CULT", "DEED", "DOTE",
    "FIDE", "FORO", "GRAN", "IDEM", "IUS", "LEX", "LITE", "MONK", "NOTA",
    "OPUS", "ORDO", "PLEA", "QUOD", "RITE", "SEAL", "TOME", "URBE", "VOTA",
    "WRIT", "ZONE", "GESTA", "LIBER", "MENSA", "PACTA", "TERRA", "SYNOD",
]
for _w in WORD_LEXICON:
    for _code in DATE_LEXICON + PLACE_LEXICON:
        assert _code not in _w, f"lexicon word {_w} contains code {_code}"

SCENARIOS = ("curr_only", "prev_curr", "curr_next", "full")

# Training proportions of the four context scenarios (counts 1276, 1758,
# 1758, 2898 out of 7690).
DEFAULT_SCENARIO_QUOTAS = (1276 / 7690, 1758 / 7690, 1758 / 7690, 2898 / 7690)
DEFAULT_SPLIT_RATIOS = (0.8, 0.1, 0.1)


class CorpusError(ValueError):
    """Invalid generator configuration or infeasible quota assignment."""


@dataclass(frozen=True)
class GenConfig:
    n_docs: int = 600
    page_h: int = 64
    page_w: int = 96
    rows_per_page: int = 6
    k_date: int = 12
    k_place: int = 8
    entries_min: int = 4
    entries_max: int = 7
    summary_words_min: int = 3
    summary_words_max: int = 6
    n_styles: int = 4
    date_col: int = 3    # cell widths, in characters
    place_col: int = 4
    summary_col: int = 7
    split_ratios: tuple = DEFAULT_SPLIT_RATIOS
    scenario_quotas: tuple = DEFAULT_SCENARIO_QUOTAS

    def validate(self) -> None:
        if self.k_date < 2 or self.k_date > len(DATE_LEXICON):
            raise CorpusError(f"k_date must be in [2, {len(DATE_LEXICON)}]")
        if self.k_place < 2 or self.k_place > len(PLACE_LEXICON):
            raise CorpusError(f"k_place must be in [2, {len(PLACE_LEXICON)}]")
        if self.summary_words_min < 1 or self.summary_words_max < self.summary_words_min:
            raise CorpusError("invalid summary word-count range")
        if self.entries_min < 1 or self.entries_max < self.entries_min:
            raise CorpusError("invalid entries range")
        if self.entries_max > min(self.k_date, self.k_place):
            raise CorpusError(
                "entries_max exceeds lexicon size; date/place codes must be unique per document")
        if self.rows_per_page < 2:
            raise CorpusError("rows_per_page must be >= 2")
        if self.summary_words_max > self.rows_per_page:
            raise CorpusError("an entry may not span more than two pages")
        cells = self.date_col + 1 + self.place_col + 1 + self.summary_col
        if cells * font.CELL_W > self.page_w:
            raise CorpusError(f"{cells} cells do not fit page width {self.page_w}")
        if self.rows_per_page * font.CELL_H > self.page_h:
            raise CorpusError(f"{self.rows_per_page} rows do not fit page height {self.page_h}")
        if abs(sum(self.scenario_quotas) - 1.0) > 1e-9:
            raise CorpusError("scenario quotas must sum to 1")


@dataclass(frozen=True)
class Entry:
    date_id: int
    place_id: int
    summary: str
    row_count: int

    @property
    def date(self) -> str:
        return DATE_LEXICON[self.date_id]

    @property
    def place(self) -> str:
        return PLACE_LEXICON[self.place_id]


@dataclass(frozen=True)
class DocumentSpec:
    doc_id: int
    entries: tuple
    style_id: int


@dataclass(frozen=True)
class Row:
    """One rendered table row: a summary line plus the owning entry's fields."""
    date: str
    place: str
    line: str
    first_of_entry: bool   # date/place cells are drawn only on this row
    continuation: bool     # entry started on an earlier page


@dataclass(frozen=True)
class PageLayout:
    doc_id: int
    page_index: int
    style_id: int
    rows: tuple


@dataclass
class PageBitmap:
    pixels: np.ndarray      # (H, W) uint8, 1 = ink
    markup: str
    doc_id: int
    page_index: int
    has_prev: bool = False  # scenario labels, set after masking
    has_next: bool = False


@dataclass
class ContextSample:
    doc_id: int
    page_index: int
    prev_available: bool
    next_available: bool
    split: str
    markup: str
    pgm_path: str

    @property
    def scenario(self) -> str:
        return scenario_name(self.prev_available, self.next_available)


@dataclass
class SplitManifest:
    train: list
    val: list
    test: list

    def all_samples(self):
        return self.train + self.val + self.test

    def split(self, name: str) -> list:
        try:
            return {"train": self.train, "val": self.val, "test": self.test}[name]
        except KeyError:
            raise CorpusError(f"unknown split {name!r}") from None


def scenario_name(prev_available: bool, next_available: bool) -> str:
    return {(False, False): "curr_only", (True, False): "prev_curr",
            (False, True): "curr_next", (True, True): "full"}[(prev_available, next_available)]


# ----------------------------------------------------------------------
# Generation
# ----------------------------------------------------------------------


def _doc_rng(seed: int, doc_id: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(doc_id,)))


def pack_summary(summary: str, col_width: int) -> list[str]:
    """Greedy packing of summary words into lines at most `col_width` wide."""
    lines: list[str] = []
    cur = ""
    for word in summary.split():
        if len(word) > col_width:
            raise CorpusError(f"word {word!r} wider than summary column ({col_width})")
        if not cur:
            cur = word
        elif len(cur) + 1 + len(word) <= col_width:
            cur = f"{cur} {word}"
        else:
            lines.append(cur)
            cur = word
    if cur:
        lines.append(cur)
    return lines


def generate_document(seed: int, gen_config: GenConfig, doc_id: int = 0) -> DocumentSpec:
    """Deterministic document draw. Date and place codes are unique within a
    document (in random order) so no page ever repeats the codes of an entry
    continued from the previous page."""
    gen_config.validate()
    rng = _doc_rng(seed, doc_id)
    n_entries = int(rng.integers(gen_config.entries_min, gen_config.entries_max + 1))
    date_ids = rng.choice(gen_config.k_date, size=n_entries, replace=False)
    place_ids = rng.choice(gen_config.k_place, size=n_entries, replace=False)
    entries = []
    for date_id, place_id in zip(date_ids, place_ids):
        n_words = int(rng.integers(gen_config.summary_words_min,
                                   gen_config.summary_words_max + 1))
        words = [WORD_LEXICON[int(i)] for i in rng.integers(0, len(WORD_LEXICON), size=n_words)]
        summary = " ".join(words)
        rows = pack_summary(summary, gen_config.summary_col)
        entries.append(Entry(int(date_id), int(place_id), summary, len(rows)))
    style_id = int(rng.integers(0, gen_config.n_styles))
    return DocumentSpec(doc_id, tuple(entries), style_id)


def paginate(doc: DocumentSpec, rows_per_page: int,
             gen_config: Optional[GenConfig] = None) -> list[PageLayout]:
    """Greedy row-packing into pages. An entry crossing a page boundary puts
    continuation rows on the next page; those rows render only the summary
    column."""
    if rows_per_page < 2:
        raise CorpusError("rows_per_page must be >= 2")
    col = gen_config.summary_col if gen_config else GenConfig().summary_col
    rows: list[Row] = []
    for entry in doc.entries:
        for i, line in enumerate(pack_summary(entry.summary, col)):
            rows.append(Row(entry.date, entry.place, line,
                            first_of_entry=(i == 0), continuation=False))
    pages = []
    for start in range(0, len(rows), rows_per_page):
        chunk = list(rows[start:start + rows_per_page])
        if start > 0:
            # Mark rows whose entry began on an earlier page.
            for i, r in enumerate(chunk):
                if r.first_of_entry:
                    break
                chunk[i] = dataclasses.replace(r, continuation=True)
        pages.append(PageLayout(doc.doc_id, len(pages), doc.style_id, tuple(chunk)))
    return pages


# ----------------------------------------------------------------------
# Rendering
# ----------------------------------------------------------------------

# Styles vary the vertical margin and the presence/shape of column separators.
_STYLES = (
    {"top_px": 0, "separators": True, "sep_dashed": False},
    {"top_px": 0, "separators": False, "sep_dashed": False},
    {"top_px": 8, "separators": True, "sep_dashed": True},
    {"top_px": 8, "separators": False, "sep_dashed": False},
)


def _column_origins(cfg: GenConfig) -> tuple[int, int, int]:
    """Left pixel of the date, place, and summary cells."""
    x_date = 0
    x_place = (cfg.date_col + 1) * font.CELL_W
    x_summary = (cfg.date_col + 1 + cfg.place_col + 1) * font.CELL_W
    return x_date, x_place, x_summary


def render_page(layout: PageLayout, style_id: int, cfg: GenConfig) -> np.ndarray:
    """Deterministic monochrome raster of a page layout (1 = ink)."""
    style = _STYLES[style_id % len(_STYLES)]
    canvas = np.zeros((cfg.page_h, cfg.page_w), dtype=np.uint8)
    x_date, x_place, x_summary = _column_origins(cfg)
    if style["separators"]:
        for x in (x_place - font.CELL_W // 2, x_summary - font.CELL_W // 2):
            if style["sep_dashed"]:
                canvas[::2, x] = 1
            else:
                canvas[:, x] = 1
    for i, row in enumerate(layout.rows):
        y = style["top_px"] + i * font.CELL_H
        if row.first_of_entry and not row.continuation:
            if len(row.date) > cfg.date_col or len(row.place) > cfg.place_col:
                raise CorpusError(f"cell overflow: {row.date!r}/{row.place!r}")
            font.blit_text(canvas, y, x_date, row.date)
            font.blit_text(canvas, y, x_place, row.place)
        if len(row.line) > cfg.summary_col:
            raise CorpusError(f"summary line {row.line!r} overflows column")
        font.blit_text(canvas, y, x_summary, row.line)
    return canvas


def empty_page_pixels(cfg: GenConfig) -> np.ndarray:
    """The canonical all-background page."""
    return np.zeros((cfg.page_h, cfg.page_w), dtype=np.uint8)


def target_markup(layout: PageLayout) -> str:
    """One pipe-delimited markup row per layout row. Every row carries the
    owning entry's date/place tokens, so continuation rows state text that is
    not visible on this page."""
    lines = [f"| {r.date} | {r.place} | {r.line} |" for r in layout.rows]
    return "\n".join(lines)


def parse_markup(markup: str) -> list[tuple[str, str, str]]:
    """Parse markup rows back into (date, place, line) triples. Lenient on
    malformed rows: missing cells come back as empty strings."""
    out = []
    for line in markup.splitlines():
        cells = [c.strip() for c in line.strip().strip("|").split("|")]
        cells += [""] * (3 - len(cells))
        out.append((cells[0], cells[1], cells[2]))
    return out


def reconstruct_entries(markups: list[str]) -> list[tuple[str, str, str]]:
    """Rebuild (date, place, summary) entries from per-page markup by merging
    consecutive rows with identical date/place."""
    entries: list[tuple[str, str, str]] = []
    cur_key: Optional[tuple[str, str]] = None
    cur_lines: list[str] = []
    for markup in markups:
        for date, place, line in parse_markup(markup):
            if (date, place) != cur_key:
                if cur_key is not None:
                    entries.append((*cur_key, " ".join(cur_lines)))
                cur_key = (date, place)
                cur_lines = []
            cur_lines.append(line)
    if cur_key is not None:
        entries.append((*cur_key, " ".join(cur_lines)))
    return entries


# ----------------------------------------------------------------------
# Context-necessity audit
# ----------------------------------------------------------------------


def find_template(page: np.ndarray, text: str) -> int:
    """Count exact glyph-template matches of `text` anywhere on the page."""
    tpl = font.render_text(text)[:font.GLYPH_H, :]
    th, tw = tpl.shape
    H, W = page.shape
    if th > H or tw > W:
        return 0
    windows = np.lib.stride_tricks.sliding_window_view(page, (th, tw))
    return int((windows == tpl).all(axis=(2, 3)).sum())


def audit_continuation_page(prev_pixels: np.ndarray, curr_pixels: np.ndarray,
                            date: str, place: str) -> bool:
    """True iff the continued entry's codes are absent from the current page
    and present on the previous page."""
    return (find_template(curr_pixels, date) == 0
            and find_template(curr_pixels, place) == 0
            and find_template(prev_pixels, date) > 0
            and find_template(prev_pixels, place) > 0)


# ----------------------------------------------------------------------
# Splits and scenario masking
# ----------------------------------------------------------------------


def _largest_remainder(fractions, total: int) -> list[int]:
    raw = [f * total for f in fractions]
    counts = [int(np.floor(r)) for r in raw]
    rem = total - sum(counts)
    order = np.argsort([c - r for c, r in zip(counts, raw)])  # largest remainder first
    for i in order[:rem]:
        counts[i] += 1
    return counts


def make_splits(pages: list[PageBitmap], ratios, scenario_quotas, seed: int,
                pgm_paths: Optional[dict] = None) -> SplitManifest:
    """Document-level split, then per-split scenario masking to quotas.

    Masking only drops prev/next availability labels; pixels are unchanged.
    Raises CorpusError (listing the shortfall) when page positions cannot
    satisfy the quotas.
    """
    if abs(sum(scenario_quotas) - 1.0) > 1e-9:
        raise CorpusError("scenario quotas must sum to 1")
    rng = np.random.default_rng(np.random.SeedSequence(entropy=seed, spawn_key=(0xA55,)))
    doc_ids = sorted({p.doc_id for p in pages})
    perm = list(rng.permutation(len(doc_ids)))
    n_train, n_val, n_test = _largest_remainder(ratios, len(doc_ids))
    split_of_doc = {}
    for rank, idx in enumerate(perm):
        split = "train" if rank < n_train else ("val" if rank < n_train + n_val else "test")
        split_of_doc[doc_ids[idx]] = split

    pages_per_doc: dict[int, int] = {}
    for p in pages:
        pages_per_doc[p.doc_id] = max(pages_per_doc.get(p.doc_id, 0), p.page_index + 1)

    manifest = SplitManifest([], [], [])
    for split in ("train", "val", "test"):
        members = [p for p in pages if split_of_doc[p.doc_id] == split]
        order = rng.permutation(len(members))
        members = [members[i] for i in order]
        quota = {s: c for s, c in zip(SCENARIOS, _largest_remainder(scenario_quotas, len(members)))}

        def eligible(p: PageBitmap) -> set:
            opts = {"curr_only"}
            has_prev = p.page_index > 0
            has_next = p.page_index < pages_per_doc[p.doc_id] - 1
            if has_prev:
                opts.add("prev_curr")
            if has_next:
                opts.add("curr_next")
            if has_prev and has_next:
                opts.add("full")
            return opts

        # Most-constrained pages first (fewest eligible scenarios).
        members.sort(key=lambda p: len(eligible(p)))
        assignment: list[tuple[PageBitmap, str]] = []
        for p in members:
            opts = eligible(p)
            # Among eligible scenarios with remaining quota, pick the one
            # with the largest remaining need.
            avail = [(quota[s], s) for s in SCENARIOS if s in opts and quota[s] > 0]
            if not avail:
                short = {s: quota[s] for s in SCENARIOS if quota[s] > 0}
                raise CorpusError(
                    f"cannot satisfy scenario quotas in split {split!r}; "
                    f"remaining shortfall: {short}")
            _, chosen = max(avail, key=lambda t: (t[0], -SCENARIOS.index(t[1])))
            quota[chosen] -= 1
            assignment.append((p, chosen))

        dest = manifest.split(split)
        for p, scen in sorted(assignment, key=lambda t: (t[0].doc_id, t[0].page_index)):
            prev_avail = scen in ("prev_curr", "full")
            next_avail = scen in ("curr_next", "full")
            p.has_prev = prev_avail
            p.has_next = next_avail
            path = pgm_paths[(p.doc_id, p.page_index)] if pgm_paths else \
                f"doc{p.doc_id}_page{p.page_index}.pgm"
            dest.append(ContextSample(p.doc_id, p.page_index, prev_avail, next_avail,
                                      split, p.markup, path))
    return manifest


# ----------------------------------------------------------------------
# Tokenizer
# ----------------------------------------------------------------------


class CharTokenizer:
    """Character-level bijection over the corpus alphabet plus specials."""

    ALPHABET = font.SUPPORTED_CHARS + "\n"
    PAD, BOS, EOS, UNK = 0, 1, 2, 3

    def __init__(self):
        self._id_of = {ch: i + 4 for i, ch in enumerate(self.ALPHABET)}
        self._ch_of = {i: ch for ch, i in self._id_of.items()}

    @property
    def vocab_size(self) -> int:
        return len(self.ALPHABET) + 4

    def tokenize(self, text: str) -> list[int]:
        return [self.BOS] + [self._id_of.get(ch, self.UNK) for ch in text] + [self.EOS]

    def detokenize(self, ids) -> str:
        out = []
        for i in ids:
            i = int(i)
            if i in (self.PAD, self.BOS):
                continue
            if i == self.EOS:
                break
            out.append(self._ch_of.get(i, "?"))
        return "".join(out)


# ----------------------------------------------------------------------
# Corpus build / persistence
# ----------------------------------------------------------------------


def write_pgm(path: str, pixels: np.ndarray) -> None:
    """Binary PGM (P5); ink is black on white background."""
    H, W = pixels.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{W} {H}\n255\n".encode("ascii"))
        f.write(((1 - pixels) * 255).astype(np.uint8).tobytes())


def read_pgm(path: str) -> np.ndarray:
    with open(path, "rb") as f:
        blob = f.read()
    parts = blob.split(b"\n", 3)
    if parts[0] != b"P5":
        raise CorpusError(f"{path}: not a binary PGM file")
    W, H = (int(v) for v in parts[1].split())
    data = np.frombuffer(parts[3], dtype=np.uint8, count=H * W).reshape(H, W)
    return (data < 128).astype(np.uint8)


def build_pages(seed: int, cfg: GenConfig) -> tuple[list[PageBitmap], list[PageLayout]]:
    """Render every page of every document."""
    cfg.validate()
    pages: list[PageBitmap] = []
    layouts: list[PageLayout] = []
    for doc_id in range(cfg.n_docs):
        doc = generate_document(seed, cfg, doc_id)
        for layout in paginate(doc, cfg.rows_per_page, cfg):
            pixels = render_page(layout, doc.style_id, cfg)
            markup = target_markup(layout)
            pages.append(PageBitmap(pixels, markup, doc_id, layout.page_index))
            layouts.append(layout)
    return pages, layouts


def build_corpus(seed: int, cfg: GenConfig, out_dir: str) -> SplitManifest:
    """Generate, render, split, and persist the full corpus."""
    os.makedirs(out_dir, exist_ok=True)
    pages, _ = build_pages(seed, cfg)
    manifest = make_splits(pages, cfg.split_ratios, cfg.scenario_quotas, seed)
    for p in pages:
        write_pgm(os.path.join(out_dir, f"doc{p.doc_id}_page{p.page_index}.pgm"), p.pixels)
    with open(os.path.join(out_dir, "manifest.jsonl"), "w") as f:
        for s in manifest.all_samples():
            f.write(json.dumps({
                "doc_id": s.doc_id, "page_index": s.page_index,
                "prev_available": s.prev_available, "next_available": s.next_available,
                "split": s.split, "markup": s.markup, "pgm_path": s.pgm_path,
            }) + "\n")
    with open(os.path.join(out_dir, "gen_config.json"), "w") as f:
        cfg_dict = dataclasses.asdict(cfg)
        cfg_dict["seed"] = seed
        json.dump(cfg_dict, f, indent=2, sort_keys=True)
        f.write("\n")
    return manifest


def load_corpus(corpus_dir: str) -> tuple[SplitManifest, dict, GenConfig, int]:
    """Load manifest, page pixels, and config from a corpus directory."""
    cfg_path = os.path.join(corpus_dir, "gen_config.json")
    man_path = os.path.join(corpus_dir, "manifest.jsonl")
    if not os.path.exists(cfg_path) or not os.path.exists(man_path):
        raise CorpusError(f"{corpus_dir} is not a corpus directory (missing manifest/config)")
    with open(cfg_path) as f:
        raw = json.load(f)
    seed = raw.pop("seed")
    raw["split_ratios"] = tuple(raw["split_ratios"])
    raw["scenario_quotas"] = tuple(raw["scenario_quotas"])
    cfg = GenConfig(**raw)
    manifest = SplitManifest([], [], [])
    pixels: dict[tuple[int, int], np.ndarray] = {}
    with open(man_path) as f:
        for line in f:
            d = json.loads(line)
            sample = ContextSample(d["doc_id"], d["page_index"], d["prev_available"],
                                   d["next_available"], d["split"], d["markup"], d["pgm_path"])
            manifest.split(sample.split).append(sample)
            key = (sample.doc_id, sample.page_index)
            if key not in pixels:
                pixels[key] = read_pgm(os.path.join(corpus_dir, sample.pgm_path))
    return manifest, pixels, cfg, seed


def continuation_info(sample: ContextSample,
                      pixels: dict) -> Optional[tuple[str, str]]:
    """If the sample's page begins with continuation rows, return the hidden
    (date, place) of the continued entry, else None. Detected via the
    glyph-template audit: first-row codes absent from this page's raster."""
    rows = parse_markup(sample.markup)
    if not rows or sample.page_index == 0:
        return None
    date, place, _ = rows[0]
    page = pixels[(sample.doc_id, sample.page_index)]
    if find_template(page, date) == 0:
        return date, place
    return None
