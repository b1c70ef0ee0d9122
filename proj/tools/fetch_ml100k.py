#!/usr/bin/env python3
# SPDX-License-Identifier: Apache-2.0
"""Fetch the MovieLens 100k rating log as a tab-separated ``u.data`` file.

The RecBole wheel on PyPI ships the full 100,000-row log as
``dataset_example/ml-100k/ml-100k.inter``; this script downloads that wheel
through pip, strips the typed header, and writes the GroupLens ``u.data``
layout (user, item, rating, timestamp).
"""
import argparse
import pathlib
import subprocess
import sys
import tempfile
import zipfile

WHEEL = "recbole==1.2.1"
MEMBER = "recbole/dataset_example/ml-100k/ml-100k.inter"


def main() -> int:
    parser = argparse.ArgumentParser()
    parser.add_argument("out", type=pathlib.Path, help="destination u.data path")
    args = parser.parse_args()
    if args.out.exists():
        return 0
    args.out.parent.mkdir(parents=True, exist_ok=True)
    with tempfile.TemporaryDirectory() as tmp:
        subprocess.run(
            [sys.executable, "-m", "pip", "download", "--quiet", "--no-deps",
             "-d", tmp, WHEEL],
            check=True)
        wheel = next(pathlib.Path(tmp).glob("recbole-*.whl"))
        with zipfile.ZipFile(wheel) as zf:
            lines = zf.read(MEMBER).decode("utf-8").splitlines()
    rows = lines[1:]
    if len(rows) != 100000:
        print(f"unexpected row count {len(rows)}", file=sys.stderr)
        return 1
    args.out.write_text("\n".join(rows) + "\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
