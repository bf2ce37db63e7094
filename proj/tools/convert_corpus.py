#!/usr/bin/env python3
"""Convert an intent corpus to the JSONL format read by rnn_dynamo.

Two input layouts are understood:

  dir    a directory with train/, valid/ (optional) and test/ subdirectories,
         each holding `seq.in` (one utterance per line) and `label` (one
         intent per line). This is the common distribution of SNIPS and ATIS.
  tsv    tab-separated files with `text<TAB>intent` per line, one file per
         split, given as --train / --valid / --test.

Multi-intent ATIS labels such as `atis_flight#atis_airfare` are kept, with the
`atis_` prefixes stripped and `#` written as `+` (flight+airfare).
"""

import argparse
import json
import sys
from pathlib import Path


def clean_intent(label, strip_prefix):
    parts = label.strip().split("#")
    if strip_prefix:
        parts = [p[len(strip_prefix):] if p.startswith(strip_prefix) else p for p in parts]
    return "+".join(parts)


def read_dir_split(folder):
    text = (folder / "seq.in").read_text(encoding="utf-8").splitlines()
    labels = (folder / "label").read_text(encoding="utf-8").splitlines()
    if len(text) != len(labels):
        raise SystemExit(f"{folder}: {len(text)} utterances but {len(labels)} labels")
    return list(zip(text, labels))


def read_tsv(path):
    rows = []
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise SystemExit(f"{path}:{n}: expected text<TAB>intent")
        text, label = line.rsplit("\t", 1)
        rows.append((text, label))
    return rows


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("--dir", type=Path, help="directory with train/valid/test subdirectories")
    ap.add_argument("--train", type=Path)
    ap.add_argument("--valid", type=Path)
    ap.add_argument("--test", type=Path)
    ap.add_argument("--strip-prefix", default="atis_", help="prefix removed from every intent (default atis_)")
    ap.add_argument("--out", type=Path, required=True)
    args = ap.parse_args(argv)

    splits = {}
    if args.dir:
        for name, split in (("train", "train"), ("valid", "val"), ("dev", "val"), ("test", "test")):
            folder = args.dir / name
            if (folder / "seq.in").exists():
                splits.setdefault(split, []).extend(read_dir_split(folder))
    else:
        for path, split in ((args.train, "train"), (args.valid, "val"), (args.test, "test")):
            if path:
                splits.setdefault(split, []).extend(read_tsv(path))
    if "train" not in splits or "test" not in splits:
        raise SystemExit("need at least a train and a test split")

    with args.out.open("w", encoding="utf-8") as out:
        for split in ("train", "val", "test"):
            for text, label in splits.get(split, []):
                record = {"text": text.strip(), "intent": clean_intent(label, args.strip_prefix), "split": split}
                out.write(json.dumps(record, ensure_ascii=False) + "\n")
    counts = {k: len(v) for k, v in splits.items()}
    print(f"{args.out}: {counts}", file=sys.stderr)


if __name__ == "__main__":
    main()
