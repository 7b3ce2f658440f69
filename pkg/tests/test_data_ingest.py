import tempfile
import unittest
from pathlib import Path

import numpy as np

from src.data_ingest import (
    BackboneRecord, CorpusError, DatasetSplit, RecordError, ResidueAlphabet, SplitError, load_splits, make_batches,
    normalize_entry, parse_corpus, record_from_entry, serialize_record,
)
from tests.synthetic import random_record, sparse_record, toy_corpus, write_entries, write_splits, write_toy_corpus


class TestResidueAlphabet(unittest.TestCase):

    def test_special_indices(self):
        """Test that BOS and PAD sit just past the 20 residues."""
        alphabet = ResidueAlphabet()
        self.assertEqual(alphabet.size, 20)
        self.assertEqual(alphabet.bos_index, 20)
        self.assertEqual(alphabet.pad_index, 21)
        self.assertEqual(alphabet.vocab_size, 22)

    def test_encode_decode(self):
        """Test that encoding then decoding a canonical sequence is the identity."""
        alphabet = ResidueAlphabet()
        self.assertEqual(alphabet.decode(alphabet.encode("MKVLA")), "MKVLA")
        self.assertEqual(alphabet.encode("AX").tolist(), [0, 21])

    def test_bad_alphabet(self):
        """Test that an alphabet with repeated symbols is rejected."""
        with self.assertRaises(ValueError):
            ResidueAlphabet("A" * 20)


class TestParseCorpus(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)

    def tearDown(self):
        self.tmp.cleanup()

    def test_parse_valid_corpus(self):
        """Test that every valid line becomes a record with the right shapes."""
        records = toy_corpus(4)
        path = write_toy_corpus(records, self.dir / "toy.jsonl")
        parsed = parse_corpus(path)
        self.assertEqual([r.name for r in parsed], [r.name for r in records])
        for original, loaded in zip(records, parsed):
            self.assertEqual(loaded.coords.shape, (len(original), 3, 3))
            np.testing.assert_allclose(loaded.coords, original.coords)
            self.assertTrue(loaded.mask.all())

    def test_missing_atom_is_masked(self):
        """Test that a residue with a null atom is masked and holds the zero sentinel."""
        entry = serialize_record(random_record("gap", 6, seed=1))
        entry["coords"]["CA"][2] = None
        path = write_entries([entry], self.dir / "gap.jsonl")
        record = parse_corpus(path)[0]
        self.assertFalse(record.mask[2])
        self.assertEqual(int(record.mask.sum()), 5)
        np.testing.assert_array_equal(record.coords[2], np.zeros((3, 3)))

    def test_unknown_symbol_is_masked(self):
        """Test that an unknown residue symbol is kept in the sequence but masked."""
        entry = serialize_record(random_record("odd", 5, seed=2, sequence="ACXDE"))
        record, unknown = record_from_entry(entry, ResidueAlphabet())
        self.assertEqual(unknown, 1)
        self.assertEqual(record.sequence, "ACXDE")
        self.assertFalse(record.mask[2])

    def test_oxygen_is_ignored(self):
        """Test that atoms other than N, CA and C do not affect the record."""
        entry = serialize_record(random_record("oxy", 4, seed=3))
        with_o = dict(entry, coords=dict(entry["coords"], O=[[0.0, 0.0, 0.0]] * 4))
        a, _ = record_from_entry(entry, ResidueAlphabet())
        b, _ = record_from_entry(with_o, ResidueAlphabet())
        np.testing.assert_array_equal(a.coords, b.coords)

    def test_malformed_line_skipped(self):
        """Test that a malformed line is skipped unless strict parsing is requested."""
        path = self.dir / "mixed.jsonl"
        write_toy_corpus(toy_corpus(2), path)
        with open(path, "a", encoding="utf-8") as handle:
            handle.write("{not json\n")
            handle.write('{"name": "short", "seq": "AC", "coords": {"N": [[0,0,0]], "CA": [], "C": []}}\n')
        self.assertEqual(len(parse_corpus(path)), 2)
        with self.assertRaises(RecordError):
            parse_corpus(path, strict=True)

    def test_ungraphable_record_dropped(self):
        """Test that a record with a single usable residue is dropped and counted."""
        records = toy_corpus(3) + [sparse_record("lonely", 6, usable=1)]
        path = write_toy_corpus(records, self.dir / "lonely.jsonl")
        with self.assertLogs("src.data_ingest", level="INFO") as logs:
            parsed = parse_corpus(path)
        self.assertEqual([r.name for r in parsed], ["toy0", "toy1", "toy2"])
        self.assertTrue(any("dropping 1 records" in line and "lonely" in line for line in logs.output))
        self.assertTrue(any("0 malformed, 1 with fewer than 2 usable residues" in line for line in logs.output))

    def test_empty_corpus(self):
        """Test that a corpus without a single valid record is an error."""
        path = self.dir / "bad.jsonl"
        path.write_text("{}\n", encoding="utf-8")
        with self.assertRaises(CorpusError):
            parse_corpus(path)

    def test_workers_keep_order(self):
        """Test that threaded parsing returns records in file order."""
        records = toy_corpus(12, seed=4)
        path = write_toy_corpus(records, self.dir / "many.jsonl")
        self.assertEqual([r.name for r in parse_corpus(path, workers=4)], [r.name for r in records])

    def test_normalize_entry(self):
        """Test that normalisation nulls every atom of a residue with a non-finite coordinate."""
        entry = serialize_record(random_record("nan", 4, seed=5))
        entry["coords"]["C"][1] = [float("nan"), 0.0, 0.0]
        normal = normalize_entry(entry)
        self.assertIsNone(normal["coords"]["N"][1])
        self.assertIsNone(normal["coords"]["CA"][1])
        self.assertIsNotNone(normal["coords"]["N"][0])


class TestSplits(unittest.TestCase):

    def test_overlap_rejected(self):
        """Test that overlapping splits are rejected."""
        with self.assertRaises(SplitError):
            DatasetSplit(("a", "b"), ("b",), ("c",))

    def test_select_partitions(self):
        """Test that select returns each split in corpus order."""
        records = toy_corpus(5)
        split = DatasetSplit(("toy3", "toy0"), ("toy1",), ("toy2", "toy4"))
        parts = split.select(records)
        self.assertEqual([r.name for r in parts["train"]], ["toy0", "toy3"])
        self.assertEqual([r.name for r in parts["test"]], ["toy2", "toy4"])

    def test_select_drops_ungraphable(self):
        """Test that a split member without coordinates is left out of its split."""
        records = toy_corpus(3) + [sparse_record("empty", 5)]
        split = DatasetSplit(("toy0", "empty"), ("toy1",), ("toy2",))
        with self.assertLogs("src.data_ingest", level="WARNING"):
            parts = split.select(records)
        self.assertEqual([r.name for r in parts["train"]], ["toy0"])

    def test_load_splits(self):
        """Test loading a split file and rejecting one with a missing key."""
        with tempfile.TemporaryDirectory() as tmp:
            path = write_splits(Path(tmp) / "s.json", ["a"], ["b"], ["c"])
            self.assertEqual(load_splits(path).sizes, (1, 1, 1))
            bad = Path(tmp) / "bad.json"
            bad.write_text('{"train": [], "test": []}', encoding="utf-8")
            with self.assertRaises(SplitError):
                load_splits(bad)


class TestBatches(unittest.TestCase):

    def test_every_record_once(self):
        """Test that each record lands in exactly one batch."""
        records = toy_corpus(11)
        batches = make_batches(records, seed=3, batch_size=5)
        names = [name for batch in batches for name in batch.names]
        self.assertEqual(sorted(names), sorted(r.name for r in records))
        self.assertEqual([len(b) for b in batches], [5, 5, 1])

    def test_seed_determines_order(self):
        """Test that the same seed yields the same batches and another seed another order."""
        records = toy_corpus(10)
        first = [b.names for b in make_batches(records, seed=1)]
        self.assertEqual(first, [b.names for b in make_batches(records, seed=1)])
        self.assertNotEqual(first, [b.names for b in make_batches(records, seed=2)])

    def test_padding(self):
        """Test that padding positions carry PAD tokens and a false mask."""
        records = [random_record("a", 4, seed=1), random_record("b", 7, seed=2)]
        batch = make_batches(records, shuffle=False)[0]
        self.assertEqual(tuple(batch.tokens.shape), (2, 7))
        self.assertEqual(batch.tokens[0, 4:].tolist(), [21, 21, 21])
        self.assertFalse(batch.mask[0, 4:].any())
        self.assertEqual(tuple(batch.coords.shape), (2, 7, 3, 3))

    def test_token_budget(self):
        """Test that token-budget batches never exceed the padded token budget."""
        records = toy_corpus(9, min_len=5, max_len=20)
        for batch in make_batches(records, max_tokens=40, token_budget=True):
            self.assertLessEqual(batch.tokens.numel(), 40)

    def test_ungraphable_records_skipped(self):
        """Test that records too sparse for a neighbour graph never reach a batch."""
        records = [random_record("a", 5, seed=1), sparse_record("empty", 5), sparse_record("one", 5, usable=1)]
        with self.assertLogs("src.data_ingest", level="WARNING"):
            batches = make_batches(records, shuffle=False)
        self.assertEqual([n for b in batches for n in b.names], ["a"])

    def test_frame_mask(self):
        """Test that a residue with C on top of CA is unmasked but cannot define a frame."""
        record = random_record("deg", 4, seed=6)
        coords = record.coords.copy()
        coords[2, 2] = coords[2, 1]
        degenerate = BackboneRecord("deg", record.sequence, coords, record.mask)
        self.assertTrue(degenerate.mask[2])
        self.assertEqual(degenerate.frame_mask.tolist(), [True, True, False, True])
        self.assertTrue(degenerate.graphable)
        self.assertFalse(sparse_record("one", 4, usable=1).graphable)

    def test_long_records_skipped(self):
        """Test that records longer than max_tokens are left out."""
        records = [random_record("short", 5), random_record("long", 30)]
        batches = make_batches(records, max_tokens=10)
        self.assertEqual([n for b in batches for n in b.names], ["short"])


if __name__ == '__main__':
    unittest.main()
