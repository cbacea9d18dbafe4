#!/usr/bin/env python3
"""Non-normative example: convert a keypoint-pairs CSV into a manifest.

Handles the common semantic-correspondence pairs layout: one CSV row per
image pair with semicolon-separated keypoint coordinate lists,

    imageA,imageB,XA,YA,XB,YB[,class]
    a/cat1.jpg,a/cat2.jpg,12;40;55,30;31;60,14;42;58,29;33;61,cat

where image paths are relative to --image-root and coordinates are pixels in
the original images (A is the source, B the target). Emits JSON Lines in the
manifest schema used by `sparsematch eval` / `load_manifest`.
"""

import argparse
import csv
import json
import sys
from pathlib import Path


def _coords(xs: str, ys: str):
    x = [float(v) for v in xs.split(";") if v != ""]
    y = [float(v) for v in ys.split(";") if v != ""]
    if len(x) != len(y):
        raise ValueError(f"x/y lists differ in length ({len(x)} vs {len(y)})")
    return [[xi, yi] for xi, yi in zip(x, y)]


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("csv_path")
    parser.add_argument("--image-root", default=".", help="prefix for image paths")
    parser.add_argument("--out", default="manifest.jsonl")
    args = parser.parse_args(argv)

    out_path = Path(args.out)
    n = 0
    with open(args.csv_path, newline="") as fh, open(out_path, "w") as out:
        for i, row in enumerate(csv.DictReader(fh)):
            try:
                src = _coords(row["XA"], row["YA"])
                tgt = _coords(row["XB"], row["YB"])
                if len(src) != len(tgt):
                    raise ValueError("source/target keypoint counts differ")
                record = {
                    "source_path": str(Path(args.image_root) / row["imageA"]),
                    "target_path": str(Path(args.image_root) / row["imageB"]),
                    "keypoints": {"source": src, "target": tgt},
                    "category": row.get("class", "object"),
                    "bbox_source": None,
                    "bbox_target": None,
                }
            except (KeyError, ValueError) as exc:
                print(f"row {i}: skipped ({exc})", file=sys.stderr)
                continue
            out.write(json.dumps(record) + "\n")
            n += 1
    print(f"wrote {n} records to {out_path}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
