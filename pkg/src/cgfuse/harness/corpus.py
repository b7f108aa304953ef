"""Line-delimited ``{"nl": ..., "code": ...}`` corpora."""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable


class FormatError(ValueError):
    def __init__(self, line: int, reason: str):
        super().__init__(f"line {line}: {reason}")
        self.line = line
        self.reason = reason


@dataclass(frozen=True)
class Example:
    nl: str
    code: str

    def __post_init__(self):
        if not self.nl or not self.code:
            raise ValueError("nl and code must be nonempty")


def parse_corpus_lines(lines: Iterable[str]) -> list[Example]:
    out: list[Example] = []
    for no, raw in enumerate(lines, 1):
        if not raw.strip():
            continue
        try:
            rec = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise FormatError(no, f"invalid JSON ({exc.msg})") from None
        if not isinstance(rec, dict):
            raise FormatError(no, "record is not an object")
        nl, code = rec.get("nl"), rec.get("code")
        if not isinstance(nl, str) or not isinstance(code, str):
            raise FormatError(no, "fields 'nl' and 'code' must be strings")
        if not nl or not code:
            raise FormatError(no, "fields 'nl' and 'code' must be nonempty")
        out.append(Example(nl, code))
    return out


def load_corpus(path) -> list[Example]:
    """Order-preserving load; raises OSError or FormatError(line)."""
    with open(path, encoding="utf-8") as fh:
        return parse_corpus_lines(fh)


def save_corpus(path, examples: Iterable[Example]) -> None:
    with open(Path(path), "w", encoding="utf-8") as fh:
        for ex in examples:
            fh.write(json.dumps({"nl": ex.nl, "code": ex.code}, ensure_ascii=False) + "\n")
