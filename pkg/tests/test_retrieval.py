"""Catalog retrieval tests: cosine ranking against hand-computed oracles,
JSONL parsing, and error contracts."""

import base64

import numpy as np
import pytest

from gsdistill.embedding import EMBED_DIM, cosine, embed
from gsdistill.errors import ConfigError
from gsdistill.retrieval import (Catalog, CatalogEntry, encode_embedding,
                                 load_catalog, retrieve, save_catalog)


def make_entry(caption, vec, index=0, path="x.ply"):
    return CatalogEntry(path, caption, np.asarray(vec, dtype=np.float64), index=index)


def basis_catalog():
    """Four entries with explicit 4-d embeddings (stored normalized)."""
    return Catalog([
        make_entry("east", [1.0, 0.0, 0.0, 0.0], index=0),
        make_entry("northeast", [0.6, 0.8, 0.0, 0.0], index=1),
        make_entry("north", [0.0, 1.0, 0.0, 0.0], index=2),
        make_entry("up", [0.0, 0.0, 1.0, 0.0], index=3),
    ])


class TestCatalogEntry:
    def test_embedding_stored_normalized(self):
        e = make_entry("long vector", [3.0, 4.0, 0.0, 0.0])
        assert np.allclose(e.embedding, [0.6, 0.8, 0.0, 0.0], atol=1e-15)

    def test_zero_vector_kept_as_is(self):
        e = make_entry("null", [0.0, 0.0, 0.0, 0.0])
        assert np.array_equal(e.embedding, np.zeros(4))

    def test_empty_caption_rejected(self):
        with pytest.raises(ConfigError):
            make_entry("", [1.0, 0.0])


class TestCatalog:
    def test_empty_catalog_rejected(self):
        with pytest.raises(ConfigError):
            Catalog([])

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="dimension"):
            Catalog([make_entry("a", [1.0, 0.0]), make_entry("b", [1.0, 0.0, 0.0])])

    def test_len(self):
        assert len(basis_catalog()) == 4


class TestRetrieve:
    def test_explicit_embedding_ranking_matches_hand_computation(self):
        # prompt [1,0,0,0]: sims are 1.0, 0.6, 0.0, 0.0 -> order 0,1 then
        # the 2/3 tie broken by index.
        cat = basis_catalog()
        res = retrieve("east-ish", cat,
                       prompt_embedding=np.array([1.0, 0.0, 0.0, 0.0]))
        assert res.entry.caption == "east"
        assert [i for i, _ in res.ranking] == [0, 1, 2, 3]
        sims = [s for _, s in res.ranking]
        assert sims[0] == pytest.approx(1.0, abs=1e-15)
        assert sims[1] == pytest.approx(0.6, abs=1e-15)
        assert sims[2] == sims[3] == 0.0

    def test_tie_goes_to_lowest_index(self):
        cat = Catalog([
            make_entry("twin a", [0.0, 1.0], index=0),
            make_entry("twin b", [0.0, 1.0], index=1),
        ])
        res = retrieve("either", cat, prompt_embedding=np.array([0.0, 1.0]))
        assert res.entry.index == 0
        assert res.ranking[0][1] == res.ranking[1][1]

    def test_exact_caption_match_scores_one(self):
        captions = ["a ceramic lion", "a wooden duck", "a glass bottle"]
        cat = Catalog([make_entry(c, embed(c), index=i)
                       for i, c in enumerate(captions)])
        res = retrieve("a wooden duck", cat)
        assert res.entry.caption == "a wooden duck"
        assert res.ranking[0][1] == pytest.approx(1.0, abs=1e-12)

    def test_ranking_matches_brute_force_over_ten_entries(self):
        captions = [
            "a ceramic lion", "a wooden duck", "a glass bottle",
            "a red sphere", "a blue cube", "a standing figure",
            "a tall green vase", "an old brass key", "a paper crane",
            "a stone bridge over water",
        ]
        cat = Catalog([make_entry(c, embed(c), index=i)
                       for i, c in enumerate(captions)])
        prompt = "a small stone bridge"
        res = retrieve(prompt, cat)
        pvec = embed(prompt)
        sims = [cosine(pvec, embed(c)) for c in captions]
        order = sorted(range(10), key=lambda i: (-sims[i], i))
        assert [i for i, _ in res.ranking] == order
        assert res.entry.index == order[0]
        for (i, s), j in zip(res.ranking, order):
            assert s == pytest.approx(sims[j], abs=1e-12)

    def test_single_entry_catalog(self):
        cat = Catalog([make_entry("the only one", embed("the only one"))])
        res = retrieve("anything else entirely", cat)
        assert res.entry.caption == "the only one"

    def test_prompt_dimension_mismatch_rejected(self):
        with pytest.raises(ConfigError, match="dimension"):
            retrieve("x", basis_catalog(), prompt_embedding=np.zeros(5))


class TestCatalogIO:
    def test_load_hashed_bow_catalog(self, tmp_path):
        path = tmp_path / "catalog.jsonl"
        path.write_text(
            '{"path": "lion.ply", "caption": "a ceramic lion"}\n'
            "\n"
            '{"path": "duck.ply", "caption": "a wooden duck"}\n')
        cat = load_catalog(str(path))
        assert cat.backend == "hashed-bow"
        assert len(cat) == 2
        assert cat.entries[0].index == 0 and cat.entries[1].index == 1
        assert np.array_equal(cat.entries[0].embedding, embed("a ceramic lion"))

    def test_load_external_embeddings(self, tmp_path):
        vec = np.array([3.0, 0.0, 4.0, 0.0], dtype=np.float64)
        path = tmp_path / "catalog.jsonl"
        path.write_text(
            '{"path": "a.ply", "caption": "a", "embedding": "%s"}\n'
            '{"path": "b.ply", "caption": "b", "embedding": "%s"}\n'
            % (encode_embedding(vec), encode_embedding([0.0, 1.0, 0.0, 0.0])))
        cat = load_catalog(str(path))
        assert cat.backend == "external"
        assert np.allclose(cat.entries[0].embedding, [0.6, 0.0, 0.8, 0.0], atol=1e-7)
        res = retrieve("q", cat, prompt_embedding=np.array([1.0, 0.0, 0.0, 0.0]))
        assert res.entry.path == "a.ply"

    def test_encode_decode_round_trip(self, tmp_path):
        rng = np.random.default_rng(5)
        vec = rng.normal(size=16)
        path = tmp_path / "c.jsonl"
        path.write_text('{"path": "p", "caption": "c", "embedding": "%s"}\n'
                        % encode_embedding(vec))
        loaded = load_catalog(str(path)).entries[0].embedding
        expected = vec.astype(np.float32).astype(np.float64)
        expected /= np.linalg.norm(expected)
        assert np.allclose(loaded, expected, atol=1e-12)

    def test_save_then_load_round_trip(self, tmp_path):
        cat = Catalog([make_entry("a ceramic lion", embed("a ceramic lion"),
                                  index=0, path="lion.ply"),
                       make_entry("a wooden duck", embed("a wooden duck"),
                                  index=1, path="duck.ply")])
        path = tmp_path / "saved.jsonl"
        save_catalog(str(path), cat)
        loaded = load_catalog(str(path))
        assert [e.path for e in loaded.entries] == ["lion.ply", "duck.ply"]
        assert [e.caption for e in loaded.entries] == \
            [e.caption for e in cat.entries]

    def test_missing_file_rejected(self, tmp_path):
        with pytest.raises(ConfigError, match="not found"):
            load_catalog(str(tmp_path / "nope.jsonl"))

    def test_invalid_json_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"path": "a.ply", "caption": "a"}\n{oops\n')
        with pytest.raises(ConfigError, match="line|JSON|2"):
            load_catalog(str(path))

    def test_missing_key_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"path": "a.ply"}\n')
        with pytest.raises(ConfigError, match="caption"):
            load_catalog(str(path))

    def test_bad_base64_rejected(self, tmp_path):
        path = tmp_path / "bad.jsonl"
        path.write_text('{"path": "a.ply", "caption": "a", "embedding": "@@@"}\n')
        with pytest.raises(ConfigError, match="base64"):
            load_catalog(str(path))

    def test_truncated_embedding_bytes_rejected(self, tmp_path):
        b64 = base64.b64encode(b"\x00" * 6).decode()  # 6 bytes: not /4
        path = tmp_path / "bad.jsonl"
        path.write_text('{"path": "a.ply", "caption": "a", "embedding": "%s"}\n' % b64)
        with pytest.raises(ConfigError, match="multiple of 4"):
            load_catalog(str(path))

    def test_embedding_dim_matches_default_backend(self):
        assert embed("anything").shape == (EMBED_DIM,)
