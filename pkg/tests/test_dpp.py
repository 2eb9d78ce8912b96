import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adstitch.core import AdAsset, AssetKind, CatalogEntry, ValidationError
from adstitch.dpp import HashingEmbedder, build_kernel, embed, kdpp_map_greedy, select_assets
from oracles import naive_logdet_greedy

URL = "https://www.abc.com/"


def test_embed_unit_norm_and_deterministic():
    v = embed("red running shoes")
    assert np.linalg.norm(v) == pytest.approx(1.0, abs=1e-9)
    assert np.array_equal(v, embed("red running shoes"))
    assert np.array_equal(v, HashingEmbedder(256)("red running shoes"))
    with pytest.raises(ValidationError):
        embed("   ")


def test_embed_similarity_ordering():
    a, b, c = embed("red running shoes"), embed("red running shoes sale"), embed("contact us today")
    assert a @ b > a @ c


def test_build_kernel_examples():
    e1 = np.eye(4)[0]
    k = build_kernel([e1, e1])
    assert k.L[0, 1] == 1.0 and k.L[0, 0] == 1.0 + 1e-6
    k = build_kernel([e1, np.eye(4)[1]])
    assert k.L[0, 1] == 0.0
    with pytest.raises(ValidationError):
        build_kernel([np.ones(3), np.ones(4)])
    with pytest.raises(ValidationError):
        build_kernel([])


def test_kernel_psd_random():
    rng = np.random.default_rng(0)
    vecs = rng.normal(size=(30, 16))
    vecs /= np.linalg.norm(vecs, axis=1, keepdims=True)
    L = build_kernel(list(vecs)).L
    assert np.allclose(L, L.T)
    assert np.linalg.eigvalsh(L).min() >= 0.0
    assert np.all(np.abs(L[~np.eye(30, dtype=bool)]) <= 1.0 + 1e-12)


def test_kernel_quality_weights():
    e = np.eye(3)
    L = build_kernel(list(e), quality=[1.0, 2.0, 3.0]).L
    assert L[2, 2] == pytest.approx(9 * (1 + 1e-6))


def test_greedy_orthogonal_tie_break():
    assert kdpp_map_greedy(build_kernel(list(np.eye(5))), 3) == [0, 1, 2]


def test_greedy_copies_stop_early():
    v = embed("same text")
    assert kdpp_map_greedy(build_kernel([v] * 6), 3) == [0]


def test_greedy_k_bounds():
    k = build_kernel(list(np.eye(3)))
    for bad in (0, 4):
        with pytest.raises(ValidationError):
            kdpp_map_greedy(k, bad)


def _random_psd(rng, n):
    A = rng.normal(size=(n, rng.integers(1, n + 3)))
    return A @ A.T + 1e-3 * np.eye(n)


def test_greedy_matches_naive_oracle():
    rng = np.random.default_rng(123)
    for _ in range(60):
        n = int(rng.integers(1, 13))
        k = int(rng.integers(1, min(5, n) + 1))
        L = _random_psd(rng, n)
        assert kdpp_map_greedy(L, k) == naive_logdet_greedy(L, k, 1e-9)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_gains_non_increasing(seed):
    rng = np.random.default_rng(seed)
    n = int(rng.integers(2, 15))
    L = _random_psd(rng, n)
    idx, gains = kdpp_map_greedy(L, n, return_gains=True)
    assert len(set(idx)) == len(idx)
    assert all(g2 <= g1 * (1 + 1e-9) for g1, g2 in zip(gains, gains[1:]))


def _titles(texts):
    return tuple(AdAsset(f"t{i:02d}", URL, AssetKind.TITLE, t) for i, t in enumerate(texts))


def test_select_one_per_duplicate_group():
    groups = ["red running shoes", "contact our store", "winter jackets sale", "free returns policy",
              "gift cards online"]
    titles = _titles([g for g in groups for _ in range(4)])
    out = select_assets(CatalogEntry(titles, ()), T=5, D=3)
    assert len(out.titles) == 5
    assert {a.text for a in out.titles} == set(groups)
    assert out.descriptions == ()


def test_select_caps_at_pool_size_and_is_subset():
    titles = _titles(["a b", "c d", "e f"])
    out = select_assets(CatalogEntry(titles, ()), T=10, D=10)
    assert set(out.titles) == set(titles) and len(out.titles) == 3
    assert select_assets(CatalogEntry(titles, ()), 10, 10) == out
    with pytest.raises(ValidationError):
        select_assets(CatalogEntry(titles, ()), 0, 1)
