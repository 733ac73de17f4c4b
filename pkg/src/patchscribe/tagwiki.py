"""OSM tag interpretation backed by a local tag-wiki description dump.

Tags are rewritten into uniform sentences so the language model sees prose
instead of raw key-value pairs. Bounded tags (exact key=value entry in the
dump) get the value's description; unbounded tags (key-level entry only,
e.g. name=*) get the key's description with the value quoted afterwards;
unknown tags fall back to the bare pair.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

log = logging.getLogger(__name__)

#: Bookkeeping keys that carry no visual information.
DEFAULT_SKIP_PREFIXES = ("source", "created_by")


class LoadError(Exception):
    """Malformed record in the wiki dump; carries the 1-based record number."""

    def __init__(self, record_number: int, message: str):
        self.record_number = record_number
        super().__init__(f"record {record_number}: {message}")


@dataclass(frozen=True)
class WikiEntry:
    key: str
    value: str | None  # None = key-level entry
    description: str
    group: str | None


@dataclass
class TagWiki:
    """In-memory index over the dump: exact (key, value) plus key-level."""

    bounded: dict[tuple[str, str], WikiEntry] = field(default_factory=dict)
    key_level: dict[str, WikiEntry] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.bounded) + len(self.key_level)


def load_wiki(path: str | Path | None = None) -> TagWiki:
    """Load a UTF-8 dump with tab-separated fields: key, value (may be
    empty = key-level entry), group (may be empty), description. The
    description field is last and may itself contain tabs. Without a
    ``path`` the dump shipped with the package is used.

    Raises LoadError with the offending record number on malformed lines;
    duplicate (key, value) records override earlier ones with a warning.
    """
    if path is None:
        text = (
            resources.files(__package__)
            .joinpath("assets/tag_wiki.tsv")
            .read_text("utf-8")
        )
    else:
        text = Path(path).read_text("utf-8")
    wiki = TagWiki()
    for number, line in enumerate(text.splitlines(), start=1):
        if not line:
            continue
        parts = line.split("\t", 3)
        if len(parts) < 4:
            raise LoadError(number, f"expected 4 tab-separated fields, got {len(parts)}")
        key, value, group, description = parts
        if not key:
            raise LoadError(number, "empty key field")
        if not description:
            raise LoadError(number, "missing description field")
        entry = WikiEntry(
            key=key,
            value=value or None,
            description=description,
            group=group or None,
        )
        if entry.value is None:
            if key in wiki.key_level:
                log.warning("wiki record %d overrides key-level entry %r", number, key)
            wiki.key_level[key] = entry
        else:
            pair = (key, entry.value)
            if pair in wiki.bounded:
                log.warning("wiki record %d overrides entry %r", number, pair)
            wiki.bounded[pair] = entry
    return wiki


def interpret_tag(key: str, value: str, wiki: TagWiki) -> str:
    """One tag as a uniform sentence.

    Exact entry: ``man_made: works. The tag belongs to the tag group "NULL".
    This tag means: "A factory or industrial production plant".``
    Key-level entry: ``Its key is "name", which means "...". The tag belongs
    to a tag group "names". The tag value is Jeff Memorial Highway.``
    No entry: ``unknown_key: foo.``
    """
    entry = wiki.bounded.get((key, value))
    if entry is not None:
        group = entry.group if entry.group is not None else "NULL"
        return (
            f'{key}: {value}. The tag belongs to the tag group "{group}". '
            f'This tag means: "{entry.description}".'
        )
    entry = wiki.key_level.get(key)
    if entry is not None:
        group = entry.group if entry.group is not None else "NULL"
        return (
            f'Its key is "{key}", which means "{entry.description}". '
            f'The tag belongs to a tag group "{group}". The tag value is {value}.'
        )
    return f"{key}: {value}."


def interpret_all(
    tags: dict[str, str] | list[tuple[str, str]],
    wiki: TagWiki,
    skip_prefixes: tuple[str, ...] = DEFAULT_SKIP_PREFIXES,
) -> list[str]:
    """Interpret every tag in input order, dropping bookkeeping keys whose
    name starts with any of ``skip_prefixes`` (source, created_by, source:*,
    and the like)."""
    pairs = tags.items() if isinstance(tags, dict) else tags
    out = []
    for key, value in pairs:
        if any(key.startswith(prefix) for prefix in skip_prefixes):
            continue
        out.append(interpret_tag(key, value, wiki))
    return out
