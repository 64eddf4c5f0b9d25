#!/usr/bin/env python3
"""Download the public Coat shopping dataset into data/coat/.

The archive is hosted by Cornell (https://www.cs.cornell.edu/~schnabts/mnar/);
it contains train.ascii and test.ascii, 290 users x 300 items of 0-5 star
ratings with 0 meaning unrated.  Needs outbound network access.

Usage: python scripts/fetch_coat.py [dest_dir]
"""

import io
import sys
import urllib.request
import zipfile
from pathlib import Path

COAT_URL = "https://www.cs.cornell.edu/~schnabts/mnar/coat.zip"


def main() -> int:
    dest = Path(sys.argv[1]) if len(sys.argv) > 1 else \
        Path(__file__).resolve().parent.parent / "data" / "coat"
    dest.mkdir(parents=True, exist_ok=True)
    print(f"downloading {COAT_URL} ...")
    with urllib.request.urlopen(COAT_URL, timeout=60) as resp:
        payload = resp.read()
    with zipfile.ZipFile(io.BytesIO(payload)) as zf:
        for name in zf.namelist():
            base = Path(name).name
            if base in ("train.ascii", "test.ascii"):
                (dest / base).write_bytes(zf.read(name))
                print(f"wrote {dest / base}")
    missing = [n for n in ("train.ascii", "test.ascii") if not (dest / n).exists()]
    if missing:
        print(f"error: archive did not contain {missing}", file=sys.stderr)
        return 1
    print("done")
    return 0


if __name__ == "__main__":
    sys.exit(main())
