#!/usr/bin/env python3
"""Rebuild a real-image visual-relations manifest from a list of image URLs.

Input is a JSON array shaped like the manifest, except that the three term
fields may be given as {"url": "..."} objects instead of term strings:

  [{"template": "leader->country",
    "minuend": {"url": "https://.../obama.jpg"},
    "subtrahend": {"url": "https://.../us_flag.png"},
    "query": {"url": "https://.../putin.jpg"},
    "ground_truth": "russia"}]

Images are downloaded once into OUT/images (named by the SHA-256 of the URL),
and OUT/manifest.json is written with img(images/<file>) terms so that
`cachesteer bench OUT/manifest.json` resolves them relative to OUT. Term
strings (img(...) or txt("...")) pass through unchanged. The result is
checked against schemas/vr_manifest.schema.json.

Usage: build_vr_manifest.py SOURCE.json OUT_DIR [--timeout SECONDS]
"""

import argparse
import hashlib
import json
import sys
from pathlib import Path
from urllib.parse import urlparse

import jsonschema
import requests

SCHEMA = Path(__file__).resolve().parent.parent / "schemas" / "vr_manifest.schema.json"


def fetch(url: str, images: Path, timeout: float) -> str:
    suffix = Path(urlparse(url).path).suffix or ".img"
    name = hashlib.sha256(url.encode()).hexdigest()[:16] + suffix
    dest = images / name
    if not dest.exists():
        resp = requests.get(url, timeout=timeout)
        resp.raise_for_status()
        dest.write_bytes(resp.content)
    return f"img(images/{name})"


def main() -> int:
    ap = argparse.ArgumentParser(description=__doc__, formatter_class=argparse.RawDescriptionHelpFormatter)
    ap.add_argument("source", type=Path)
    ap.add_argument("out", type=Path)
    ap.add_argument("--timeout", type=float, default=30.0)
    args = ap.parse_args()

    rows = json.loads(args.source.read_text())
    images = args.out / "images"
    images.mkdir(parents=True, exist_ok=True)
    manifest, failures = [], 0
    for i, row in enumerate(rows):
        try:
            out = dict(row)
            for key in ("minuend", "subtrahend", "query"):
                term = row[key]
                out[key] = fetch(term["url"], images, args.timeout) if isinstance(term, dict) else term
            manifest.append(out)
        except (requests.RequestException, KeyError) as e:
            failures += 1
            print(f"row {i}: skipped ({e})", file=sys.stderr)

    jsonschema.validate(manifest, json.loads(SCHEMA.read_text()))
    (args.out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    print(f"{len(manifest)} instances written, {failures} skipped")
    return 0 if manifest else 1


if __name__ == "__main__":
    sys.exit(main())
