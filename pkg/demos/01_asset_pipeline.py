"""
From landing pages to a diverse, factual asset pool
===================================================

Candidate ad texts come from two places: text lifted from the landing page
and generated ad copies. Before anything is served, each candidate must be
supported by its page, and the surviving pool is thinned to a diverse subset.
"""

from adstitch.core import AdAsset, AssetCatalog, AssetKind, CatalogEntry, LandingPage
from adstitch.crosscheck import RuleSet, check_asset
from adstitch.diversity import diversity_report
from adstitch.dpp import select_assets
from adstitch.ingestion import extract_assets

# %%
# A landing page. ``build`` folds the structured fields into the full text,
# which is what the factuality checks search.
page = LandingPage.build(
    "https://www.trailgear.com/boots",
    page_title="Trailgear Hiking Boots",
    visual_headings=["Waterproof Hiking Boots for Every Trail", "Free Shipping on Orders Over $50"],
    body_snippets=["Shop waterproof hiking boots built for rugged terrain. Free returns within 30 days."],
    extra_text="Members get a 10% discount.",
)
extracted = extract_assets(page)
print("extracted:")
for a in extracted:
    print(f"  {a.kind.value:<11} {a.text}")

# %%
# Generated candidates, some of which claim more than the page supports.
generated = [
    "Waterproof Boots, Free Shipping", "15% Discount on All Boots", "Trailgear Official Store",
    "Boots for Rugged Terrain", "Hiking Boots That Last", "Waterproof Hiking Boots Sale",
    "Waterproof Hiking Boots Deals", "Waterproof Hiking Boots Online", "10% Discount for Members",
    "Summit Pro Boots at Half Price",
]
candidates = extracted + [AdAsset(f"g{i}", page.url, AssetKind.TITLE, t) for i, t in enumerate(generated)]

# %%
# Sensitive phrases must appear on the page (numbers included) and brands
# must be the page's own.
rules = RuleSet(("Free Shipping", "<NUM>% Discount", "Official Store"), frozenset({"Trailgear", "Summit Pro"}))
kept = []
for a in candidates:
    verdict = check_asset(a, page, rules)
    if verdict:
        kept.append(a)
    else:
        print(f"rejected {a.text!r}: {verdict.violations[0].rule.value} '{verdict.violations[0].matched_span}'")

# %%
# Three near-identical "Waterproof Hiking Boots ..." titles survive the filter.
# Greedy k-DPP selection keeps one of them and spends the budget elsewhere.
titles = tuple(a for a in kept if a.kind is AssetKind.TITLE)
entry = CatalogEntry(titles, tuple(a for a in kept if a.kind is AssetKind.DESCRIPTION))
chosen = select_assets(entry, T=5, D=3)
print("\nselected titles:")
for a in chosen.titles:
    print("  " + a.text)

before = diversity_report([a.text for a in titles])
after = diversity_report([a.text for a in chosen.titles])
print(f"\nSelfBLEU {before.self_bleu:.1f} -> {after.self_bleu:.1f}, "
      f"Distinct-N {before.distinct_n:.1f} -> {after.distinct_n:.1f}")

# %%
# The catalog groups the final pool by landing page for serving.
catalog = AssetCatalog.from_assets(list(chosen.titles) + list(chosen.descriptions))
print(f"catalog: {catalog.n_assets()} assets on {len(catalog)} page(s)")
