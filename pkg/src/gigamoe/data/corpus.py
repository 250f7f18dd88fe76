from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from ..errors import InputError


@dataclass(frozen=True)
class Document:
    id: str
    text: str
    lang: str = ""
    source: str = ""


def load_documents(path) -> list[Document]:
    """Read a JSON-lines file of ``{id, text, lang, source}`` records or a
    directory of ``*.txt`` files (id = file stem, sorted by name)."""
    path = Path(path)
    if not path.exists():
        raise InputError(f"corpus path {path} does not exist")
    if path.is_dir():
        docs = [Document(p.stem, p.read_text(encoding="utf-8", errors="surrogateescape"),
                         source=str(p.name)) for p in sorted(path.glob("*.txt"))]
    else:
        docs = []
        for lineno, line in enumerate(path.read_text(encoding="utf-8").splitlines(), 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
                docs.append(Document(str(rec["id"]), rec["text"], rec.get("lang", ""),
                                     rec.get("source", "")))
            except (ValueError, KeyError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: bad document record ({exc})") from None
    seen: set[str] = set()
    for d in docs:
        if d.id in seen:
            raise InputError(f"duplicate document id {d.id!r}")
        seen.add(d.id)
    return docs


def document_line(doc: Document) -> str:
    return json.dumps({"id": doc.id, "text": doc.text, "lang": doc.lang, "source": doc.source},
                      ensure_ascii=False)
