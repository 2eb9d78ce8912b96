import pytest
from hypothesis import given, strategies as st

from adstitch.core import AssetKind, AssetSource, LandingPage, SystemConfig, ValidationError, tokenize, validate_asset
from adstitch.ingestion import (
    AdCopyRecord,
    CatalogWarning,
    extract_assets,
    load_catalog,
    split_adcopy,
    truncate_words,
    write_jsonl,
)

URL = "https://www.microsoft.com/surface"


def test_extract_titles_from_title_and_heading():
    page = LandingPage.build(URL, "Microsoft Surface 8 Pro", ["Surface 8 Deals"])
    assets = extract_assets(page)
    assert [a.kind for a in assets] == [AssetKind.TITLE, AssetKind.TITLE]
    assert all(a.source is AssetSource.EXTRACTION for a in assets)


def test_extract_snippet_only():
    page = LandingPage.build(URL, "", [], ["Light and fast laptop."])
    assets = extract_assets(page)
    assert len(assets) == 1 and assets[0].kind is AssetKind.DESCRIPTION


def test_extract_truncates_at_word_boundary():
    raw = "Microsoft Surface Pro Eight Laptops and Tablets No"
    assert len(raw) == 50
    page = LandingPage.build(URL, raw)
    (a,) = extract_assets(page, SystemConfig(max_title_chars=30))
    assert len(a.text) <= 30
    assert raw.startswith(a.text)
    toks = tokenize(a.text)
    assert toks == tokenize(raw)[:len(toks)]


def test_extract_deduplicates_and_validates():
    page = LandingPage.build(URL, "Surface Deals", ["surface  deals", "Other"], ["A. B.", "x" * 200])
    assets = extract_assets(page)
    assert [a.text for a in assets if a.kind is AssetKind.TITLE] == ["Surface Deals", "Other"]
    assert all(validate_asset(a) == [] for a in assets)


@given(st.text(alphabet="ab .!", min_size=0, max_size=200))
def test_extract_output_always_valid(snippet):
    page = LandingPage.build(URL, snippet[:60], [snippet[:40]], [snippet])
    assert all(validate_asset(a) == [] for a in extract_assets(page))


def test_truncate_words_never_cuts_mid_word():
    assert truncate_words("alpha beta gamma", 11) == "alpha beta"
    assert truncate_words("alpha beta gamma", 10) == "alpha beta"
    assert truncate_words("supercalifragilistic", 5) == ""


def test_split_adcopy():
    rec = AdCopyRecord(URL, ["T one", "T two"], ["D one"])
    assets = split_adcopy(rec)
    assert len(assets) == 3
    assert [a.id for a in split_adcopy(rec)] == [a.id for a in assets]
    with pytest.raises(ValidationError, match="missing title"):
        split_adcopy(AdCopyRecord(URL, [], ["D"]))
    with pytest.raises(ValidationError, match="missing description"):
        split_adcopy(AdCopyRecord(URL, ["T"], []))


@given(st.lists(st.text(min_size=1), min_size=1, max_size=3),
       st.lists(st.text(min_size=1), min_size=1, max_size=2))
def test_split_adcopy_loss_free(titles, descs):
    assets = split_adcopy(AdCopyRecord(URL, titles, descs))
    assert [a.text for a in assets if a.kind is AssetKind.TITLE] == titles
    assert [a.text for a in assets if a.kind is AssetKind.DESCRIPTION] == descs


def _write_pages(path, urls):
    write_jsonl(path, [LandingPage.build(u, "Title").to_record() for u in urls])


def test_load_catalog(tmp_path):
    urls = ["https://a.com/x", "https://b.com/y"]
    _write_pages(tmp_path / "pages.jsonl", urls)
    recs = [{"format": "adcopy", "page_url": urls[0], "titles": ["A", "B"], "descriptions": ["C"]},
            {"format": "adcopy", "page_url": urls[1], "titles": ["D"], "descriptions": ["E"]}]
    write_jsonl(tmp_path / "assets.jsonl", recs)
    pages, cat = load_catalog(tmp_path / "pages.jsonl", tmp_path / "assets.jsonl")
    assert len(pages) == 2 and len(cat) == 2 and cat.n_assets() == 5


def test_load_catalog_unknown_url_warns(tmp_path):
    _write_pages(tmp_path / "pages.jsonl", ["https://a.com/x"])
    write_jsonl(tmp_path / "assets.jsonl", [
        {"format": "asset", "id": "1", "page_url": "https://nope.com/", "kind": "Title", "text": "Hi"}])
    with pytest.warns(CatalogWarning, match="unknown page"):
        _, cat = load_catalog(tmp_path / "pages.jsonl", tmp_path / "assets.jsonl")
    assert cat.n_assets() == 0


def test_load_catalog_empty_assets(tmp_path):
    _write_pages(tmp_path / "pages.jsonl", ["https://a.com/x"])
    (tmp_path / "assets.jsonl").write_text("")
    _, cat = load_catalog(tmp_path / "pages.jsonl", tmp_path / "assets.jsonl")
    assert list(cat) == ["https://a.com/x"] and cat.n_assets() == 0


def test_load_catalog_malformed_line_names_line(tmp_path):
    _write_pages(tmp_path / "pages.jsonl", ["https://a.com/x"])
    (tmp_path / "assets.jsonl").write_text('{"format": "asset"}\n{oops\n')
    with pytest.raises(ValidationError, match=":1:"):
        load_catalog(tmp_path / "pages.jsonl", tmp_path / "assets.jsonl")
    (tmp_path / "assets.jsonl").write_text('\n{oops\n')
    with pytest.raises(ValidationError, match=":2:"):
        load_catalog(tmp_path / "pages.jsonl", tmp_path / "assets.jsonl")


def test_load_catalog_order_insensitive(tmp_path):
    urls = ["https://a.com/x"]
    _write_pages(tmp_path / "pages.jsonl", urls)
    recs = [{"format": "asset", "id": str(i), "page_url": urls[0], "kind": "Title", "text": f"T{i}"}
            for i in range(5)]
    write_jsonl(tmp_path / "a1.jsonl", recs)
    write_jsonl(tmp_path / "a2.jsonl", recs[::-1])
    _, c1 = load_catalog(tmp_path / "pages.jsonl", tmp_path / "a1.jsonl")
    _, c2 = load_catalog(tmp_path / "pages.jsonl", tmp_path / "a2.jsonl")
    assert {a.id: a for a in c1.assets()} == {a.id: a for a in c2.assets()}
