import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from src.analysis import (
    AnalysisError, confusion, distribution_kl, emit_report, kl_table, length_profile, residue_distribution,
)
from src.data_ingest import CANONICAL_ORDER


class TestResidueDistribution(unittest.TestCase):

    def test_single_residue(self):
        """Test that a poly-alanine sequence puts all mass on A."""
        dist = residue_distribution(["AAAA"])
        self.assertEqual(dist.counts[0], 4)
        self.assertEqual(dist.frequencies[0], 1.0)
        self.assertEqual(dist.total, 4)

    def test_uniform_minmax(self):
        """Test that equal counts scale to all ones."""
        dist = residue_distribution([CANONICAL_ORDER, CANONICAL_ORDER])
        np.testing.assert_array_equal(dist.minmax, np.ones(20))

    def test_other_symbols(self):
        """Test that symbols outside the alphabet are counted apart."""
        dist = residue_distribution(["AXB", "C"])
        self.assertEqual(dist.other, 2)
        self.assertEqual(dist.total, 2)

    def test_empty(self):
        """Test that nothing to count is an analysis error."""
        with self.assertRaises(AnalysisError):
            residue_distribution(["XXX"])


class TestDistributionKL(unittest.TestCase):

    def test_two_symbol_oracle(self):
        """Test (1/2, 1/2) against (1/4, 3/4)."""
        generated = residue_distribution(["AC"])
        base = residue_distribution(["ACCC"])
        expected = 0.5 * math.log(2) + 0.5 * math.log(2 / 3)
        self.assertAlmostEqual(distribution_kl(generated, base), expected, delta=1e-4)
        self.assertAlmostEqual(expected, 0.1438, places=4)

    def test_self_divergence(self):
        """Test that a distribution does not diverge from itself."""
        dist = residue_distribution(["MKVLAAGH"])
        self.assertAlmostEqual(distribution_kl(dist, dist), 0.0, places=12)

    def test_kl_table(self):
        """Test that the table compares every model with the base."""
        distributions = {"base": residue_distribution(["ACCC"]), "mm": residue_distribution(["AC"])}
        table = kl_table(distributions)
        self.assertEqual(table["model"].tolist(), ["mm"])
        with self.assertRaises(AnalysisError):
            kl_table({"mm": distributions["mm"]})


class TestConfusion(unittest.TestCase):

    def test_diagonal_is_recovery(self):
        """Test that the diagonal share equals the recovery of the designs."""
        natives = ["ACDEFG", "KLMN"]
        designs = ["ACDQFA", "KLNN"]
        matrix = confusion(natives, designs)
        matches = sum(a == b for n, d in zip(natives, designs) for a, b in zip(n, d))
        self.assertAlmostEqual(matrix.recovery_fraction, matches / 10, delta=1e-9)
        self.assertEqual(matrix.total, 10)
        self.assertEqual(matrix.table().loc["G", "A"], 1)

    def test_mask_and_length_mismatch(self):
        """Test that masked positions and mismatched pairs are left out."""
        matrix = confusion(["ACD", "EF"], ["ACD", "E"], masks=[np.array([True, False, True]), np.ones(2, bool)])
        self.assertEqual(matrix.total, 2)
        self.assertEqual(matrix.native_counts[CANONICAL_ORDER.index("C")], 0)


def _rows() -> pd.DataFrame:
    return pd.DataFrame({
        "name": ["a", "b", "c", "d"],
        "length": [50, 100, 150, 600],
        "tokens": [50, 100, 150, 600],
        "nll": [50 * math.log(4), 100 * math.log(4), 150 * math.log(2), 0.0],
        "matches": [25, 25, 150, 600],
    })


class TestLengthProfile(unittest.TestCase):

    def test_bins(self):
        """Test micro-averaged metrics per right-closed length bin."""
        profile = length_profile(_rows())
        self.assertEqual(profile["bin"].tolist(), ["0-100", "100-200", "500-inf"])
        self.assertEqual(profile["records"].tolist(), [2, 1, 1])
        np.testing.assert_allclose(profile["recovery"], [100 * 50 / 150, 100.0, 100.0])
        np.testing.assert_allclose(profile["perplexity"], [4.0, 2.0, 1.0])


class TestEmitReport(unittest.TestCase):

    def _emit(self, out_dir: Path) -> list[Path]:
        distributions = {"base": residue_distribution(["ACDEFGHIKL"]), "mm": residue_distribution(["AACDEEFGGK"])}
        confusions = {"mm": confusion(["ACDEFGHIKL"], ["AACDEEFGGK"])}
        return emit_report(out_dir, "toy", distributions, confusions, {"mm": length_profile(_rows())})

    def test_files_and_determinism(self):
        """Test the report file names and that tables and figures are byte-identical across runs."""
        with tempfile.TemporaryDirectory() as tmp:
            first = self._emit(Path(tmp) / "one")
            second = self._emit(Path(tmp) / "two")
            names = [p.name for p in first]
            self.assertIn("models__toy__distribution.csv", names)
            self.assertIn("models__toy__distribution.html", names)
            self.assertIn("models__toy__kl.csv", names)
            self.assertIn("mm__toy__confusion.png", names)
            self.assertIn("mm__toy__length.csv", names)
            for a, b in zip(first, second):
                if a.suffix in (".csv", ".png"):
                    self.assertEqual(a.read_bytes(), b.read_bytes(), a.name)

    def test_unwritable_directory(self):
        """Test that a report directory that cannot be created is an analysis error."""
        with tempfile.TemporaryDirectory() as tmp:
            blocker = Path(tmp) / "file"
            blocker.write_text("x", encoding="utf-8")
            with self.assertRaises(AnalysisError):
                self._emit(blocker / "report")


if __name__ == '__main__':
    unittest.main()
