"""Local document store backing the Search and Browser operators.

A directory of ``<docid>.txt`` files indexed at startup. Retrieval is a
simple lexical ranker: score a document by the summed frequency of the
query's terms, break ties by docid. Read-only after construction, so
any number of concurrent searchers is fine.
"""

from __future__ import annotations

import re
from dataclasses import dataclass
from pathlib import Path

_WORD = re.compile(r"[a-z0-9]+")


def _terms(text: str) -> list[str]:
    return _WORD.findall(text.lower())


@dataclass(frozen=True)
class SearchHit:
    docid: str
    score: int
    preview: str


class DocumentNotFound(KeyError):
    pass


class DocStore:
    def __init__(self, root: str | Path):
        self.root = Path(root)
        self._docs: dict[str, str] = {}
        self._freq: dict[str, dict[str, int]] = {}
        for path in sorted(self.root.glob("*.txt")):
            body = path.read_text(encoding="utf-8")
            docid = path.stem
            self._docs[docid] = body
            counts: dict[str, int] = {}
            for term in _terms(body):
                counts[term] = counts.get(term, 0) + 1
            self._freq[docid] = counts

    def __len__(self) -> int:
        return len(self._docs)

    def ids(self) -> tuple[str, ...]:
        return tuple(self._docs)

    def search(self, query: str, top_k: int = 5) -> list[SearchHit]:
        terms = _terms(query)
        scored: list[SearchHit] = []
        for docid, counts in self._freq.items():
            score = sum(counts.get(t, 0) for t in terms)
            if score > 0:
                preview = " ".join(self._docs[docid].split())[:120]
                scored.append(SearchHit(docid, score, preview))
        scored.sort(key=lambda h: (-h.score, h.docid))
        return scored[: max(0, top_k)]

    def fetch(self, docid: str) -> str:
        try:
            return self._docs[docid]
        except KeyError:
            raise DocumentNotFound(docid) from None
