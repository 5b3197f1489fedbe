#!/usr/bin/env python3
"""Regenerate crates/core/data/{pinyin_table.tsv,initials.txt,finals.txt}.

Characters are the GB2312 hanzi set; each takes pypinyin's default reading in
TONE3 style with neutral tone written as 5. Syllables that do not split into
an initial plus a known final (n2, m2, hm, hng, ...) are dropped.
"""
import pathlib
import sys

from pypinyin import Style, lazy_pinyin

INITIALS = ["b", "p", "m", "f", "d", "t", "n", "l", "g", "k", "h", "j", "q", "x",
            "zh", "ch", "sh", "r", "z", "c", "s", "y", "w"]
FINALS = ["a", "o", "e", "i", "u", "v", "ai", "ei", "ui", "ao", "ou", "iu", "ie", "ve",
          "er", "an", "en", "in", "un", "vn", "ang", "eng", "ing", "ong",
          "ia", "iao", "ian", "iang", "iong", "ua", "uo", "uai", "uan", "uang", "ue"]


def gb2312_chars():
    for hi in range(0xB0, 0xF8):
        for lo in range(0xA1, 0xFF):
            try:
                yield bytes([hi, lo]).decode("gb2312")
            except UnicodeDecodeError:
                continue


def split(letters):
    init = ""
    for cand in sorted(INITIALS, key=len, reverse=True):
        if letters.startswith(cand):
            init = cand
            break
    rest = letters[len(init):]
    return (init, rest) if rest in FINALS else None


def main(out_dir):
    out = pathlib.Path(out_dir)
    rows, dropped = [], []
    for ch in gb2312_chars():
        syl = lazy_pinyin(ch, style=Style.TONE3, neutral_tone_with_five=True)[0]
        if not syl[-1:].isdigit() or split(syl[:-1]) is None:
            dropped.append((ch, syl))
            continue
        rows.append((ch, syl))
    (out / "pinyin_table.tsv").write_text("".join(f"{c}\t{s}\n" for c, s in rows), encoding="utf-8")
    (out / "initials.txt").write_text("".join(i + "\n" for i in INITIALS), encoding="utf-8")
    (out / "finals.txt").write_text("".join(f + "\n" for f in FINALS), encoding="utf-8")
    print(f"{len(rows)} chars, {len({s for _, s in rows})} syllables, dropped {dropped}", file=sys.stderr)


if __name__ == "__main__":
    main(sys.argv[1] if len(sys.argv) > 1 else "crates/core/data")
