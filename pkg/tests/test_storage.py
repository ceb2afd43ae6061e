import json
import logging

import numpy as np
import pytest

from hetpre import storage
from hetpre.errors import DatasetFormatError, ShapeMismatchError
from hetpre.graph import FeatureSet, HinSchema, build_graph
from hetpre.lpa import PseudoLabels
from hetpre.trainer import EpochRecord, TrainReport

from toys import random_params, ragged_hin, tiny_hin


@pytest.fixture
def tiny_dir(tmp_path):
    g, f = tiny_hin()
    labels = {"P": (np.array([0, 2, 3]), np.array([1, 0, 1]))}
    storage.write_text_dataset(tmp_path / "tiny", g, f, labels, name="tiny")
    return tmp_path / "tiny", g, f


class TestTextFormat:
    def test_roundtrip(self, tiny_dir):
        path, g, f = tiny_dir
        ds = storage.load_text_dataset(path)
        assert ds.graph == g
        assert ds.name == "tiny"
        for t in g.schema.object_types:
            np.testing.assert_array_equal(ds.features[t], f[t])
        gids, cls = ds.global_labels()
        assert gids.tolist() == [0, 2, 3] and cls.tolist() == [1, 0, 1]

    def test_ragged_roundtrip(self, tmp_path):
        g, f = ragged_hin()
        storage.write_text_dataset(tmp_path, g, f)
        assert storage.load_text_dataset(tmp_path).graph == g

    def test_write_is_deterministic(self, tmp_path):
        g, f = tiny_hin()
        storage.write_text_dataset(tmp_path / "a", g, f)
        storage.write_text_dataset(tmp_path / "b", g, f)
        for p in sorted((tmp_path / "a").iterdir()):
            assert p.read_bytes() == (tmp_path / "b" / p.name).read_bytes()

    def test_comments_and_blank_lines(self, tiny_dir):
        path, g, _ = tiny_dir
        text = (path / "PA.edges").read_text()
        (path / "PA.edges").write_text("# header\n\n" + text.replace("\n", "\n\n", 1))
        assert storage.load_text_dataset(path).graph == g

    def test_missing_feature_row(self, tiny_dir):
        path, _, _ = tiny_dir
        lines = (path / "A.features").read_text().splitlines()
        (path / "A.features").write_text("\n".join(lines[:-1]) + "\n")
        with pytest.raises(DatasetFormatError) as info:
            storage.load_text_dataset(path)
        assert info.value.path.name == "A.features"
        assert info.value.line == 4
        assert "A.features:4" in str(info.value)

    @pytest.mark.parametrize(
        "content, line, match",
        [
            ("0\t0\n0\t9\n", 2, "out of range"),
            ("0\t0\nx\t1\n", 2, "not an integer"),
            ("0\t0\n1\t1\t-2\n", 2, "positive"),
            ("0\t0\n0\t0\n", 2, "duplicate"),
            ("0\t0\t1\t1\n", 1, "fields"),
        ],
    )
    def test_edge_errors_carry_line(self, tiny_dir, content, line, match):
        path, _, _ = tiny_dir
        (path / "PA.edges").write_text(content)
        with pytest.raises(DatasetFormatError, match=match) as info:
            storage.load_text_dataset(path)
        assert info.value.line == line

    def test_ragged_feature_row(self, tiny_dir):
        path, _, _ = tiny_dir
        (path / "S.features").write_text("1 2\n3\n")
        with pytest.raises(DatasetFormatError, match="expected 2") as info:
            storage.load_text_dataset(path)
        assert info.value.line == 2

    def test_empty_relation_warns(self, tiny_dir, caplog):
        path, _, _ = tiny_dir
        (path / "SP.edges").write_text("# nothing here\n")
        with caplog.at_level(logging.WARNING):
            ds = storage.load_text_dataset(path)
        assert "SP" in caplog.text
        assert ds.graph.adjacency("SP").nnz == 0
        assert "SP" in [r.name for r in ds.graph.schema.user_relations]

    def test_bad_schema(self, tmp_path):
        (tmp_path / "schema.toml").write_text("[types\n")
        with pytest.raises(DatasetFormatError, match="TOML"):
            storage.load_text_dataset(tmp_path)
        with pytest.raises(DatasetFormatError, match="not found"):
            storage.load_text_dataset(tmp_path / "nowhere")

    def test_acm_shaped_stats(self, tmp_path):
        schema = HinSchema(["P", "A", "S"], [("PA", "P", "A"), ("AP", "A", "P"), ("PS", "P", "S"), ("SP", "S", "P")])
        counts = {"P": 4025, "A": 7167, "S": 60}
        pa = [(p, p % 7167) for p in range(4025)]
        ps = [(p, p % 60) for p in range(4025)]
        edges = {"PA": pa, "AP": sorted((a, p) for p, a in pa), "PS": ps, "SP": sorted((s, p) for p, s in ps)}
        g = build_graph(schema, edges, counts)
        f = FeatureSet({t: np.zeros((n, 1)) for t, n in counts.items()})
        storage.write_text_dataset(tmp_path, g, f, name="acm")
        ds = storage.load_text_dataset(tmp_path)
        assert ds.stats().startswith("P (4025), A (7167), S (60)")


class TestBundle:
    def test_roundtrip(self, tiny_dir, tmp_path):
        path, g, f = tiny_dir
        ds = storage.load_text_dataset(path)
        storage.save_bundle(tmp_path / "b.npz", ds)
        back = storage.load_bundle(tmp_path / "b.npz")
        assert back.graph == g
        assert back.name == "tiny"
        for t in g.schema.object_types:
            np.testing.assert_array_equal(back.features[t], f[t])
        for a, b in zip(back.global_labels(), ds.global_labels()):
            np.testing.assert_array_equal(a, b)

    def test_not_a_bundle(self, tmp_path):
        (tmp_path / "x.npz").write_bytes(b"garbage")
        with pytest.raises(DatasetFormatError):
            storage.load_bundle(tmp_path / "x.npz")


class TestArtifacts:
    def test_pseudo_labels_roundtrip(self, tmp_path):
        pl = PseudoLabels(np.array([3, 0, 0, 2]), 5)
        storage.write_pseudo_labels(tmp_path / "pseudo.labels", pl)
        text = (tmp_path / "pseudo.labels").read_text()
        assert text.splitlines()[:2] == ["K=5", "0\t3"]
        assert storage.read_pseudo_labels(tmp_path / "pseudo.labels") == pl

    def test_pseudo_labels_bad_header(self, tmp_path):
        (tmp_path / "p").write_text("0\t1\n")
        with pytest.raises(DatasetFormatError, match="K="):
            storage.read_pseudo_labels(tmp_path / "p")

    def test_embeddings_binary(self, tmp_path):
        m = np.random.default_rng(0).standard_normal((7, 3))
        storage.write_embeddings(tmp_path / "e.bin", m)
        raw = (tmp_path / "e.bin").read_bytes()
        assert raw[:8] == storage.EMBEDDING_MAGIC
        assert len(raw) == storage._EMB_HEADER.size + 7 * 3 * 4
        np.testing.assert_array_equal(storage.read_embeddings(tmp_path / "e.bin"), m.astype(np.float32))

    def test_embeddings_tsv(self, tmp_path):
        m = np.random.default_rng(1).standard_normal((4, 2)).astype(np.float32)
        storage.write_embeddings_tsv(tmp_path / "e.tsv", m)
        np.testing.assert_array_equal(storage.read_embeddings(tmp_path / "e.tsv"), m)

    def test_truncated_embeddings(self, tmp_path):
        storage.write_embeddings(tmp_path / "e.bin", np.ones((3, 2)))
        data = (tmp_path / "e.bin").read_bytes()
        (tmp_path / "e.bin").write_bytes(data[:-4])
        with pytest.raises(DatasetFormatError, match="payload"):
            storage.read_embeddings(tmp_path / "e.bin")

    def test_checkpoint_roundtrip(self, tmp_path):
        g, f = tiny_hin()
        p = random_params(g, f)
        storage.save_checkpoint(tmp_path / "c.npz", p)
        back = storage.load_checkpoint(tmp_path / "c.npz", schema_hash=g.schema.schema_hash())
        assert back.layer_dims == p.layer_dims and back.k == p.k
        for n in p.tensors:
            np.testing.assert_array_equal(back[n], p[n])

    def test_checkpoint_schema_mismatch(self, tmp_path):
        g, f = tiny_hin()
        storage.save_checkpoint(tmp_path / "c.npz", random_params(g, f))
        with pytest.raises(ShapeMismatchError):
            storage.load_checkpoint(tmp_path / "c.npz", schema_hash="0" * 16)

    def test_atomic_write_leaves_no_temp_on_failure(self, tmp_path):
        def fail(fh):
            fh.write(b"partial")
            raise RuntimeError("disk full")

        with pytest.raises(RuntimeError):
            storage._atomic_write(tmp_path / "out.bin", fail)
        assert list(tmp_path.iterdir()) == []

    def test_report_jsonl(self, tmp_path):
        rep = TrainReport(warmup=[EpochRecord(0, "warmup", 2.0, 2.5, 0.0, 0.1)],
                          epochs=[EpochRecord(0, "joint", 1.0, 1.5, 0.25, 0.1)])
        storage.write_report(tmp_path / "r.jsonl", rep)
        rows = [json.loads(line) for line in (tmp_path / "r.jsonl").read_text().splitlines()]
        assert [r["phase"] for r in rows] == ["warmup", "joint"]
        assert rows[1]["churn"] == 0.25
