"""Regenerate featurize_golden.json. Only run this when the feature scheme changes on purpose."""

import json
from pathlib import Path

from adstitch.core import AdAsset, AssetKind, Position, Query
from adstitch.stitcher import feature_keys, featurize

CORPUS = [
    ("Microsoft Surface 8 Pro", "surface pro deals"),
    ("Free Shipping on all orders over $50.", "free shipping"),
    ("Red running shoes", "shoes"),
    ("Café crème à Paris", "café paris"),
    ("Buy Now!", ""),
    ("x", "x x x"),
    ("Best   Deals   Today", "BEST deals"),
    ("Ünïcödé ßtraße 123", "strasse 123"),
]
BITS = (16, 22, 32)


def build():
    rows = []
    for text, q in CORPUS:
        kind = AssetKind.TITLE
        asset = AdAsset("golden", "https://example.com/", kind, text)
        query = Query(q)
        for pos in (Position.T1, Position.D2):
            for bits in BITS:
                fv = featurize(asset, query, pos, bits)
                rows.append({"text": text, "query": q, "position": pos.value, "hash_bits": bits,
                             "n_keys": len(feature_keys(text, query)),
                             "indices": [int(i) for i in fv.indices]})
    return rows


if __name__ == "__main__":
    out = Path(__file__).with_name("featurize_golden.json")
    out.write_text(json.dumps(build(), indent=1, ensure_ascii=False) + "\n", encoding="utf-8")
    print(f"wrote {out}")
