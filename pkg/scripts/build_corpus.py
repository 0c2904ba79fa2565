"""Regenerate the bundled mixed corpus under src/csdstore/corpus/mixed.

Three files of raw 16 KB pages:
  text.pages    slices of the CPython standard library sources, zero padded
  rows.pages    fixed-width order records packed with struct, partly filled
  random.pages  incompressible pages

Everything except the stdlib text is derived from a fixed seed.
"""

import argparse
import glob
import random
import struct
import sys
from pathlib import Path

PAGE = 16384


def text_pages(rng, count, src_glob, nfiles):
    files = sorted(glob.glob(src_glob))[:nfiles]
    if not files:
        sys.exit(f"no files match {src_glob}")
    text = b"".join(Path(f).read_bytes() for f in files)
    out = []
    for _ in range(count):
        n = int(PAGE * rng.uniform(0.6, 1.0))
        off = rng.randrange(0, len(text) - n)
        out.append(text[off:off + n] + bytes(PAGE - n))
    return out


def row_pages(rng, count):
    letters = b"abcdefghijklmnopqrstuvwxyz"
    names = [bytes(rng.choice(letters) for _ in range(rng.randint(4, 10))) for _ in range(3000)]
    states = [b"PENDING", b"SHIPPED", b"DELIVERED", b"RETURNED"]
    key = 0
    out = []
    for _ in range(count):
        page = bytearray()
        fill = rng.uniform(0.55, 0.95)
        while len(page) < PAGE * fill:
            page += struct.pack("<QIIdH", key, rng.randrange(1_600_000_000, 1_700_000_000),
                                rng.randrange(1000), round(rng.uniform(0, 1e4), 2), rng.randrange(5))
            page += rng.choice(names)[:12].ljust(16, b" ") + rng.choice(states).ljust(12, b"\0")
            key += 1
        out.append(bytes(page[:PAGE]) + bytes(max(0, PAGE - len(page))))
    return out


def random_pages(rng, count):
    return [rng.randbytes(PAGE) for _ in range(count)]


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", default=str(Path(__file__).resolve().parents[1] / "src/csdstore/corpus/mixed"))
    ap.add_argument("--seed", type=int, default=7)
    ap.add_argument("--text-glob", default="/usr/lib/python3.10/*.py")
    args = ap.parse_args(argv)
    rng = random.Random(args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    sets = {
        "text": text_pages(rng, 200, args.text_glob, 120),
        "rows": row_pages(rng, 150),
        "random": random_pages(rng, 10),
    }
    for name, pages in sets.items():
        assert all(len(p) == PAGE for p in pages)
        (out / f"{name}.pages").write_bytes(b"".join(pages))
        print(f"{name}: {len(pages)} pages")


if __name__ == "__main__":
    main()
