import contextlib
import io
import tempfile
import unittest
from pathlib import Path

import numpy as np
import pandas as pd

from src.cli import EXIT_DATA, EXIT_OK, EXIT_USAGE, build_parser, effective_config, main
from src.config import PRETRAINED, RANDOM
from src.data_ingest import BackboneRecord
from src.evaluation import read_fasta
from src.utils import configure_logging
from tests.synthetic import random_record, tiny_config, toy_corpus, write_splits, write_toy_corpus


def _run(argv: list[str]) -> tuple[int, str]:
    stderr = io.StringIO()
    with contextlib.redirect_stderr(stderr), contextlib.redirect_stdout(io.StringIO()):
        code = main(argv)
    return code, stderr.getvalue()


class TestUsage(unittest.TestCase):

    def tearDown(self):
        configure_logging("WARNING")

    def test_misspelled_command(self):
        """Test that an unknown subcommand exits 1 with a suggestion."""
        code, err = _run(["trian", "--corpus", "x.jsonl"])
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("did you mean 'train'", err)

    def test_misspelled_flag(self):
        """Test that an unknown subcommand flag is suggested from the subcommand's flags."""
        code, err = _run(["train", "--corpus", "x.jsonl", "--epocs", "2"])
        self.assertEqual(code, EXIT_USAGE)
        self.assertIn("did you mean '--epochs'", err)

    def test_bad_choice(self):
        """Test that an invalid flag value is a usage error."""
        code, _ = _run(["train", "--corpus", "x.jsonl", "--expce", "sum"])
        self.assertEqual(code, EXIT_USAGE)

    def test_help_marks_artifact_defaults(self):
        """Test that --help exits 0 and tells published from artifact defaults."""
        stdout = io.StringIO()
        with contextlib.redirect_stdout(stdout):
            code = main(["train", "--help"])
        self.assertEqual(code, EXIT_OK)
        text = " ".join(stdout.getvalue().split())
        self.assertIn("[artifact default]", text)
        self.assertIn("--lambda", text)


class TestEffectiveConfig(unittest.TestCase):

    def test_precedence(self):
        """Test defaults, then the config file, then flags."""
        with tempfile.TemporaryDirectory() as tmp:
            path = Path(tmp) / "run.cfg"
            path.write_text("lr = 0.01\nepochs = 7\n", encoding="utf-8")
            args = build_parser().parse_args(["train", "--corpus", "x", "--config", str(path), "--lr", "0.05",
                                              "--lambda", "0.5", "--nar"])
            config = effective_config(args)
        self.assertEqual(config.lr, 0.05)
        self.assertEqual(config.epochs, 7)
        self.assertEqual(config.cac_weight, 0.5)
        self.assertTrue(config.nar)
        self.assertEqual(config.batch_size, 5)

    def test_module_flags(self):
        """Test that --psm takes a path or a mode and --pcm random switches Step 1 off."""
        args = build_parser().parse_args(["train", "--corpus", "x", "--psm", "weights.ckpt", "--pcm", "random"])
        config = effective_config(args)
        self.assertEqual((config.psm, config.psm_checkpoint), (PRETRAINED, "weights.ckpt"))
        self.assertEqual(config.pcm, RANDOM)


class TestCommands(unittest.TestCase):

    @classmethod
    def setUpClass(cls):
        cls.tmp = tempfile.TemporaryDirectory()
        cls.dir = Path(cls.tmp.name)
        records = toy_corpus(9, seed=8)
        cls.corpus = write_toy_corpus(records, cls.dir / "toy.jsonl")
        names = [r.name for r in records]
        cls.splits = write_splits(cls.dir / "splits.json", names[:5], names[5:7], names[7:])
        cls.config = cls.dir / "tiny.cfg"
        tiny_config(epochs=1).save(cls.config)
        cls.common = ["--corpus", str(cls.corpus), "--splits", str(cls.splits), "--config", str(cls.config),
                      "--log-level", "WARNING"]
        cls.train_code, _ = _run(["train", *cls.common, "--out", str(cls.dir / "run")])

    @classmethod
    def tearDownClass(cls):
        configure_logging("WARNING")
        cls.tmp.cleanup()

    def test_train(self):
        """Test that training writes the run directory."""
        self.assertEqual(self.train_code, EXIT_OK)
        for name in ("best.ckpt", "last.ckpt", "metrics.jsonl", "config.txt", "command.json", "run.log"):
            self.assertTrue((self.dir / "run" / name).is_file(), name)

    def test_evaluate_and_analyze(self):
        """Test the evaluation report and an analysis of its designs."""
        out = self.dir / "eval"
        fasta = out / "designs.fasta"
        code, _ = _run(["evaluate", *self.common, "--checkpoint", str(self.dir / "run" / "best.ckpt"),
                        "--out", str(out), "--fasta", str(fasta)])
        self.assertEqual(code, EXIT_OK)
        table = pd.read_csv(out / "table.csv", index_col=0)
        self.assertGreater(table.loc["Perplexity", "All"], 1.0)
        self.assertTrue(np.isnan(table.loc["Perplexity", "Ts50"]))
        self.assertEqual(sorted(read_fasta(fasta)), ["toy7", "toy8"])

        report = self.dir / "report"
        code, _ = _run(["analyze", *self.common, "--out", str(report), "--fasta", f"mm={fasta}",
                        "--eval-rows", f"mm={out / 'records__All.csv'}"])
        self.assertEqual(code, EXIT_OK)
        self.assertTrue((report / "models__All__distribution.csv").is_file())
        self.assertTrue((report / "mm__All__confusion.csv").is_file())
        self.assertTrue((report / "mm__All__length.png").is_file())

    def test_labelled_first_corpus(self):
        """Test that a labelled first corpus is reported under its own label."""
        out = self.dir / "eval_ts50"
        code, _ = _run(["evaluate", "--corpus", f"Ts50={self.corpus}", "--config", str(self.config),
                        "--log-level", "WARNING", "--checkpoint", str(self.dir / "run" / "best.ckpt"),
                        "--out", str(out)])
        self.assertEqual(code, EXIT_OK)
        table = pd.read_csv(out / "table.csv", index_col=0)
        self.assertGreater(table.loc["Perplexity", "Ts50"], 1.0)
        self.assertTrue(np.isnan(table.loc["Perplexity", "All"]))
        self.assertTrue((out / "records__Ts50.csv").is_file())
        self.assertFalse((out / "records__All.csv").exists())

    def test_confusion_skips_frameless_residues(self):
        """Test that a residue unable to define a frame stays out of the confusion counts."""
        record = random_record("kink", 8, seed=30)
        coords = record.coords.copy()
        coords[3, 2] = coords[3, 1]
        corpus = write_toy_corpus([BackboneRecord("kink", record.sequence, coords, record.mask)],
                                  self.dir / "kink.jsonl")
        fasta = self.dir / "kink.fasta"
        fasta.write_text(f">kink\n{record.sequence}\n", encoding="utf-8")
        report = self.dir / "kink_report"
        code, _ = _run(["analyze", "--corpus", str(corpus), "--config", str(self.config), "--log-level", "ERROR",
                        "--out", str(report), "--fasta", f"mm={fasta}"])
        self.assertEqual(code, EXIT_OK)
        counts = pd.read_csv(report / "mm__All__confusion.csv", index_col=0)
        self.assertEqual(int(counts.to_numpy().sum()), 7)
        self.assertEqual(int(np.trace(counts.to_numpy())), 7)

    def test_generate(self):
        """Test that generation writes designs and logits for every record."""
        out = self.dir / "gen"
        logits = self.dir / "logits.npz"
        code, _ = _run(["generate", *self.common, "--checkpoint", str(self.dir / "run" / "best.ckpt"),
                        "--out", str(out), "--logits", str(logits)])
        self.assertEqual(code, EXIT_OK)
        designs = read_fasta(out / "designs.fasta")
        self.assertEqual(len(designs), 9)
        with np.load(logits) as arrays:
            self.assertEqual(arrays["toy0"].shape, (len(designs["toy0"]), 20))

    def test_data_errors(self):
        """Test that missing inputs exit 2."""
        code, _ = _run(["train", "--corpus", str(self.dir / "missing.jsonl"), "--out", str(self.dir / "e1"),
                        "--log-level", "ERROR"])
        self.assertEqual(code, EXIT_DATA)
        code, _ = _run(["evaluate", *self.common, "--checkpoint", str(self.dir / "none.ckpt"),
                        "--out", str(self.dir / "e2")])
        self.assertEqual(code, EXIT_DATA)

    def test_missing_structural_weights(self):
        """Test that a pretrained structural module without weights exits 2."""
        code, _ = _run(["train", *self.common, "--psm", "pretrained", "--out", str(self.dir / "e3")])
        self.assertEqual(code, EXIT_DATA)


if __name__ == '__main__':
    unittest.main()
