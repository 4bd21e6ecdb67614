import pytest

from synthir.corpus import Corpus, CorpusError, Document, corpus_stats, ingest_corpus


def test_jsonl_sorted_by_id(write_jsonl):
    path = write_jsonl("c.jsonl", [{"id": i, "text": f"text {i}"} for i in ("c", "a", "b")])
    corpus = ingest_corpus(path, "jsonl")
    assert corpus.ids == ["a", "b", "c"]
    assert corpus.skipped == 0


def test_empty_text_dropped_and_counted(write_jsonl):
    recs = [{"id": f"d{i}", "text": "hello"} for i in range(4)] + [{"id": "blank", "text": "  \n\t"}]
    corpus = ingest_corpus(write_jsonl("c.jsonl", recs))
    assert len(corpus) == 4
    assert corpus.skipped == 1
    assert "blank" not in corpus


def test_duplicate_id_names_it(write_jsonl):
    path = write_jsonl("c.jsonl", [{"id": "a", "text": "x"}, {"id": "b", "text": "y"}, {"id": "a", "text": "z"}])
    with pytest.raises(CorpusError, match="'a'"):
        ingest_corpus(path)


def test_malformed_line_reports_line_number(write_jsonl):
    path = write_jsonl("c.jsonl", [{"id": "a", "text": "x"}, "{not json"])
    with pytest.raises(ValueError, match=":2:"):
        ingest_corpus(path)


def test_missing_text_field(write_jsonl):
    with pytest.raises(CorpusError, match=":1:"):
        ingest_corpus(write_jsonl("c.jsonl", [{"id": "a"}]))


def test_unreadable_path(tmp_path):
    with pytest.raises(CorpusError):
        ingest_corpus(tmp_path / "nope.jsonl")


def test_plaintext_dir_uses_relative_paths(tmp_path):
    root = tmp_path / "docs"
    (root / "chan").mkdir(parents=True)
    (root / "chan" / "m1.txt").write_text("first message", encoding="utf-8")
    (root / "top.txt").write_text("héllo wörld", encoding="utf-8")
    (root / "empty.txt").write_text("   ", encoding="utf-8")
    corpus = ingest_corpus(root, "plaintext_dir")
    assert corpus.ids == ["chan/m1.txt", "top.txt"]
    assert corpus["top.txt"].source == "top.txt"
    assert corpus.skipped == 1


def test_char_length_counts_code_points():
    doc = Document("x", "héllo ✓")
    assert doc.char_length == 7
    assert len(doc.text.encode("utf-8")) > 7


def test_stats_mean():
    corpus = Corpus.from_documents([Document("a", "abcd"), Document("b", "abcdef")])
    stats = corpus_stats(corpus)
    assert stats.doc_count == 2
    assert stats.avg_char_length == 5.0


def test_stats_empty_corpus():
    stats = corpus_stats(Corpus(()))
    assert (stats.doc_count, stats.avg_char_length) == (0, 0.0)


def test_round_trip(tmp_path, write_jsonl):
    recs = [{"id": "z", "text": "last", "source": "s1"}, {"id": "a", "text": "ünïcode ✓"}, {"id": "m", "text": "mid"}]
    original = ingest_corpus(write_jsonl("c.jsonl", recs))
    out = tmp_path / "rt.jsonl"
    original.write_jsonl(out)
    again = ingest_corpus(out, name=original.name)
    assert again == original
    assert corpus_stats(again) == corpus_stats(original)


def test_stats_deterministic_across_loads(write_jsonl):
    path = write_jsonl("c.jsonl", [{"id": str(i), "text": "x" * i} for i in range(1, 30)])
    assert repr(corpus_stats(ingest_corpus(path))) == repr(corpus_stats(ingest_corpus(path)))
