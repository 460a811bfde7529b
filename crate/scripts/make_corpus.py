"""Builds data/shakespeare_plays.txt from the Project Gutenberg play texts
shipped in the `shakespeare` sdist on PyPI (shakespeare-0.6.tar.gz).

Usage: python3 scripts/make_corpus.py path/to/shksprdata/texts data/shakespeare_plays.txt

Front matter, act/scene headings and bracketed stage directions are dropped,
speaker headings become `NAME:` and runs of blank lines collapse to one.
"""

import re
import sys
from pathlib import Path

PLAYS = [
    "coriolanus",
    "richard_iii",
    "richard_ii",
    "romeo_and_juliet",
    "henry_vi_part_3",
    "winters_tale",
    "taming_of_the_shrew",
    "measure_for_measure",
]
LIMIT = 1_115_000

SPEAKER = re.compile(r"^([A-Z][A-Z' ]*[A-Z])\.\s*$")
HEADING = re.compile(r"^(ACT|SCENE|EPILOGUE|PROLOGUE|INDUCTION)\b")


def clean(text: str) -> str:
    start = text.find("\nACT I")
    text = text[start:] if start >= 0 else text
    text = re.sub(r"\[[^\]]*\]", "", text, flags=re.S)
    lines = []
    for raw in text.splitlines():
        line = raw.rstrip()
        if HEADING.match(line.strip()):
            continue
        m = SPEAKER.match(line.strip())
        if m:
            line = m.group(1).title() + ":" if " " in m.group(1) else m.group(1) + ":"
        lines.append(line.strip() if not line.strip() else line)
    out = "\n".join(lines)
    out = re.sub(r"\n{3,}", "\n\n", out)
    return out.strip("\n") + "\n"


def main() -> None:
    src, dst = Path(sys.argv[1]), Path(sys.argv[2])
    parts = [clean((src / f"{p}_gut.txt").read_text(encoding="utf-8")) for p in PLAYS]
    text = "\n".join(parts)
    if len(text) > LIMIT:
        cut = text.rfind("\n\n", 0, LIMIT)
        text = text[: cut + 1]
    dst.write_text(text, encoding="utf-8")
    print(f"{len(text)} chars, {len(set(text))} distinct")


if __name__ == "__main__":
    main()
