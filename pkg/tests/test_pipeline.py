import json
import math
import tempfile
import unittest
from pathlib import Path

import numpy as np
import torch

from src.checkpoint import ConfigMismatchError
from src.data_ingest import Batch, ResidueAlphabet
from src.evaluation import corpus_recovery, record_rows
from src.geometry import RigidTransform
from src.objectives import LossConfig, cac_loss, joint_loss
from src.pipeline import (
    MissingCheckpointError, TrainingAbort, Trainer, ablate, assemble, load_mmdesign, resume, run_step1, run_step2,
)
from tests.synthetic import SLOW, sparse_record, tiny_config, toy_corpus


def _splits(seed: int = 5) -> dict:
    records = toy_corpus(11, seed=seed)
    return {"train": records[:7], "validation": records[7:9], "test": records[9:]}


def _model_tensors(checkpoint) -> dict:
    return {name: t for name, t in checkpoint.tensors.items() if name.startswith(("psm.", "pcm."))}


def _overfit_config(**overrides):
    base = dict(node_hidden_s=32, node_hidden_v=8, gvp_layers=2, d_model=64, heads=4, ffn_dim=128, encoder_layers=2,
                decoder_layers=2, gvp_dropout=0.0, attn_dropout=0.0, lr=0.05, momentum=0.9, batch_size=5,
                epochs=1000, max_steps=2000, validate_every=500, patience=100)
    base.update(overrides)
    return tiny_config(**base)


class TestMMDesign(unittest.TestCase):

    def setUp(self):
        self.config = tiny_config()
        self.splits = _splits()
        self.model = assemble(run_step1(self.splits, self.config), self.config)
        self.batch = Batch.from_records(self.splits["train"][:3], ResidueAlphabet())

    def test_forward_shapes(self):
        """Test that logits, Z_struc and Z_seq line up with the padded batch."""
        out = self.model(self.batch)
        b, length = self.batch.tokens.shape
        self.assertEqual(tuple(out.logits.logits.shape), (b, length, 20))
        self.assertEqual(tuple(out.z_struc.shape), (b, length, self.config.d_model))
        self.assertEqual(out.z_seq.shape, out.z_struc.shape)
        self.assertFalse(bool(out.logits.mask[0, len(self.batch.records[0]):].any()))

    def test_graph_cache(self):
        """Test that a record is featurized once per model."""
        record = self.splits["train"][0]
        self.assertIs(self.model.graph(record), self.model.graph(record))

    def test_graph_cache_bounded(self):
        """Test that the graph cache evicts the least recently used record at its cap."""
        config = tiny_config(graph_cache_size=2)
        model = assemble(run_step1(self.splits, config), config)
        a, b, c = self.splits["train"][:3]
        first = model.graph(a)
        model.graph(b)
        self.assertIs(model.graph(a), first)
        model.graph(c)
        self.assertEqual(len(model._graphs), 2)
        self.assertNotIn(b.fingerprint, model._graphs)
        self.assertIs(model.graph(a), first)

    def test_graph_cache_disabled(self):
        """Test that a zero cache size featurizes on every call."""
        config = tiny_config(graph_cache_size=0)
        model = assemble(run_step1(self.splits, config), config)
        record = self.splits["train"][0]
        self.assertIsNot(model.graph(record), model.graph(record))
        self.assertEqual(len(model._graphs), 0)

    def test_logits_rigid_invariance(self):
        """Test that teacher-forced logits do not move when every backbone is rigidly moved."""
        records = self.splits["train"][:3]
        alphabet = ResidueAlphabet()
        for dtype, atol in ((torch.float32, 1e-3), (torch.float64, 1e-5)):
            with self.subTest(dtype=dtype):
                config = tiny_config(dtype=str(dtype).removeprefix("torch."))
                model = assemble(run_step1(self.splits, config), config).eval()
                rng = np.random.default_rng(21)
                with torch.no_grad():
                    base = model.teacher_forced_logits(Batch.from_records(records, alphabet, dtype)).logits
                    for _ in range(5):
                        t = RigidTransform.random(rng)
                        moved = Batch.from_records([t.apply_record(r) for r in records], alphabet, dtype)
                        logits = model.teacher_forced_logits(moved).logits
                        torch.testing.assert_close(logits, base, atol=atol, rtol=0)

    def test_padding_invariance(self):
        """Test that extra padding leaves the logits and the loss of a record unchanged."""
        config = tiny_config(dtype="float64")
        model = assemble(run_step1(self.splits, config), config).eval()
        record = self.splits["train"][0]
        loss_config = LossConfig.from_train_config(config)
        results = []
        for pad_to in (None, len(record) + 7):
            batch = Batch.from_records([record], ResidueAlphabet(), torch.float64, pad_to=pad_to)
            with torch.no_grad():
                out = model(batch)
                terms = joint_loss(out.logits.logits, batch.tokens, out.logits.mask, out.z_struc, out.z_seq,
                                   out.struct_mask, loss_config)
            results.append((out.logits.logits[:, :len(record)], terms))
        (short, short_terms), (padded, padded_terms) = results
        torch.testing.assert_close(padded, short, atol=1e-6, rtol=0)
        for name in ("total", "cac", "ce"):
            self.assertAlmostEqual(float(getattr(padded_terms, name)), float(getattr(short_terms, name)), delta=1e-6)

    def test_alignment_weight_changes_structure_gradients_only(self):
        """Test that switching the alignment weight from 0 to 1 alters structural gradients alone."""
        self.model.eval()
        grads = {}
        for weight in (0.0, 1.0):
            self.model.zero_grad()
            out = self.model(self.batch)
            terms = joint_loss(out.logits.logits, self.batch.tokens, out.logits.mask, out.z_struc, out.z_seq,
                               out.struct_mask, LossConfig(cac_weight=weight))
            terms.total.backward()
            grads[weight] = {name: p.grad.clone() for name, p in self.model.named_parameters() if p.grad is not None}
        for name, grad in grads[0.0].items():
            if name.startswith("pcm."):
                torch.testing.assert_close(grads[1.0][name], grad, atol=1e-10, rtol=0, msg=name)
        changed = [name for name, grad in grads[0.0].items()
                   if name.startswith("psm.") and not torch.allclose(grads[1.0][name], grad)]
        self.assertTrue(changed)

    def test_design(self):
        """Test that designs cover every position of the batch."""
        self.model.eval()
        with torch.no_grad():
            out = self.model.design(self.batch)
        self.assertEqual(out.tokens.shape, self.batch.tokens.shape)
        self.assertTrue(bool((out.tokens < 20).all()))

    def test_alignment_reaches_structure_only(self):
        """Test that the alignment loss sends gradient to the structural module alone."""
        out = self.model(self.batch)
        cac_loss(out.z_struc, out.z_seq, out.struct_mask).backward()
        for name, param in self.model.pcm.named_parameters():
            self.assertTrue(param.grad is None or not param.grad.any(), name)
        self.assertTrue(any(p.grad is not None and p.grad.any() for p in self.model.psm.parameters()))


class TestStep1(unittest.TestCase):

    def test_pretrained_psm_needs_weights(self):
        """Test that a pretrained structural module without a checkpoint is refused."""
        with self.assertRaises(MissingCheckpointError) as raised:
            run_step1(_splits(), tiny_config(psm="pretrained"))
        self.assertIn("--psm", str(raised.exception))

    def test_random_pcm_skips_pretraining(self):
        """Test that a random contextual module does not pretrain the autoencoder."""
        with tempfile.TemporaryDirectory() as tmp:
            step1 = run_step1(_splits(), tiny_config(), out_dir=Path(tmp))
            self.assertIsNone(step1.ae)
            self.assertFalse((Path(tmp) / "ae.ckpt").exists())
        self.assertEqual(step1.pretrained_tensors, [])

    def test_pretrained_pcm(self):
        """Test that Step 1 pretrains the autoencoder and records the transferred tensors."""
        with tempfile.TemporaryDirectory() as tmp:
            step1 = run_step1(_splits(), tiny_config(pcm="pretrained", ae_max_steps=2), out_dir=Path(tmp))
            self.assertTrue((Path(tmp) / "ae.ckpt").is_file())
            self.assertTrue((Path(tmp) / "ae_metrics.jsonl").is_file())
        self.assertEqual(step1.ae.kind, "ae")
        self.assertTrue(step1.pretrained_tensors)
        self.assertTrue(all(name.startswith("ae.") for name in step1.pretrained_tensors))


class TestTraining(unittest.TestCase):

    def setUp(self):
        self.tmp = tempfile.TemporaryDirectory()
        self.dir = Path(self.tmp.name)
        self.splits = _splits()
        self.config = tiny_config(seed=3, momentum=0.9, epochs=2)

    def tearDown(self):
        self.tmp.cleanup()

    def _train(self, config, name):
        return run_step2(run_step1(self.splits, config), self.splits, config, out_dir=self.dir / name)

    def test_run_outputs(self):
        """Test that a run writes metrics, checkpoints and provenance."""
        result = self._train(self.config, "run")
        run_dir = self.dir / "run"
        for name in ("metrics.jsonl", "best.ckpt", "last.ckpt", "run.json"):
            self.assertTrue((run_dir / name).is_file(), name)
        entries = [json.loads(line) for line in (run_dir / "metrics.jsonl").read_text().splitlines()]
        self.assertEqual(sum(e["kind"] == "train" for e in entries), 4)
        self.assertEqual(sum(e["kind"] == "validation" for e in entries), 2)
        self.assertTrue(all(math.isfinite(e["loss"]) for e in entries if e["kind"] == "train"))
        self.assertEqual(result.state.step, 4)
        self.assertEqual(json.loads((run_dir / "run.json").read_text())["pretrained_tensors"], [])

    def test_same_seed_same_weights(self):
        """Test that two runs with the same seed end bitwise identical."""
        a = self._train(self.config, "a").last
        b = self._train(self.config, "b").last
        for name, tensor in _model_tensors(a).items():
            self.assertTrue(torch.equal(tensor, b.tensors[name]), name)

    def test_same_seed_same_metrics_log(self):
        """Test that two runs with the same seed write byte-identical metrics logs."""
        self._train(self.config, "a")
        self._train(self.config, "b")
        first = (self.dir / "a" / "metrics.jsonl").read_bytes()
        self.assertTrue(first)
        self.assertEqual(first, (self.dir / "b" / "metrics.jsonl").read_bytes())

    def test_ungraphable_record_does_not_stop_training(self):
        """Test that a training record without coordinates is dropped and the run completes."""
        splits = dict(self.splits, train=self.splits["train"] + [sparse_record("nullrec", 9)])
        with self.assertLogs("src.data_ingest", level="WARNING") as logs:
            result = run_step2(run_step1(splits, self.config), splits, self.config)
        self.assertTrue(any("nullrec" in line for line in logs.output))
        self.assertEqual(result.state.step, 4)

    def test_resume_matches_uninterrupted(self):
        """Test that stopping mid-epoch and resuming reproduces the uninterrupted run exactly."""
        full = self._train(self.config, "full").last
        self._train(self.config.replace(max_steps=3), "split")
        trainer = resume(self.dir / "split" / "last.ckpt", self.config, self.splits, out_dir=self.dir / "split")
        self.assertEqual((trainer.state.step, trainer.state.epoch, trainer.state.batch_in_epoch), (3, 1, 1))
        resumed = trainer.fit().last
        self.assertEqual(resumed.step, full.step)
        for name, tensor in _model_tensors(full).items():
            self.assertTrue(torch.equal(tensor, resumed.tensors[name]), name)

    def test_resume_refuses_other_config(self):
        """Test that resuming under a different learning rate is refused."""
        self._train(self.config.replace(max_steps=1), "short")
        with self.assertRaises(ConfigMismatchError):
            resume(self.dir / "short" / "last.ckpt", self.config.replace(lr=0.01), self.splits)

    def test_load_trained_model(self):
        """Test that a trained model is rebuilt from its checkpoint with its own config."""
        result = self._train(self.config, "load")
        model, config, checkpoint = load_mmdesign(self.dir / "load" / "best.ckpt")
        self.assertEqual(config, self.config)
        for name, tensor in model.pcm.state_dict().items():
            self.assertTrue(torch.equal(tensor, result.checkpoint.tensors[f"pcm.{name}"]), name)

    def test_non_finite_loss_aborts(self):
        """Test that a non-finite loss aborts the step and dumps the batch."""
        step1 = run_step1(self.splits, self.config)
        model = assemble(step1, self.config)
        with torch.no_grad():
            model.pcm.head.bias.fill_(float("nan"))
        trainer = Trainer(model, self.config, self.splits, self.dir / "nan")
        with self.assertRaises(TrainingAbort):
            trainer.fit()
        self.assertTrue(list((self.dir / "nan").glob("abort_step*.json")))

    def test_early_stopping(self):
        """Test that training stops once validation fails to improve `patience` times."""
        config = tiny_config(patience=2)
        trainer = Trainer(assemble(run_step1(self.splits, config), config), config, self.splits)
        trainer.state.best_perplexity = 0.0
        trainer.validate()
        self.assertFalse(trainer.state.stopped)
        trainer.validate()
        self.assertTrue(trainer.state.stopped)
        result = trainer.fit()
        self.assertEqual(result.state.step, 0)
        self.assertEqual(result.checkpoint.kind, "mmdesign")


class TestAblation(unittest.TestCase):

    def test_four_rows(self):
        """Test that the ablation trains the four combinations and counts pretrained tensors."""
        config = tiny_config(epochs=1, ae_max_steps=2, psm_bootstrap_steps=2)
        with tempfile.TemporaryDirectory() as tmp:
            table = ablate(_splits(), config, Path(tmp))
            self.assertTrue((Path(tmp) / "psm_donor" / "psm.ckpt").is_file())
        self.assertEqual(len(table), 4)
        self.assertEqual(list(zip(table["PSM"], table["PCM"])),
                         [(False, False), (False, True), (True, False), (True, True)])
        counts = table["pretrained_tensors"].tolist()
        self.assertEqual(counts[0], 0)
        self.assertGreater(counts[3], counts[1])
        self.assertGreater(counts[3], counts[2])
        for column in ("dev_perplexity", "test_perplexity", "train_perplexity"):
            self.assertTrue(table[column].map(math.isfinite).all(), column)


@unittest.skipUnless(SLOW, "set MMDESIGN_SLOW_TESTS=1 for training runs")
class TestOverfit(unittest.TestCase):

    def test_training_lowers_perplexity(self):
        """Test that training on a few records lowers their perplexity."""
        splits = _splits()
        splits["validation"] = splits["train"]
        config = tiny_config(epochs=60, lr=0.05, momentum=0.9, gvp_dropout=0.0, attn_dropout=0.0)
        result = run_step2(run_step1(splits, config), splits, config)
        validations = [e["perplexity"] for e in result.history if e["kind"] == "validation"]
        self.assertLess(min(validations), validations[0])

    def test_training_recovers_ten_sequences(self):
        """Test that ten records of up to 50 residues reach 95% training recovery within 2000 steps."""
        records = toy_corpus(10, min_len=30, max_len=50, seed=9)
        splits = {"train": records, "validation": records, "test": []}
        config = _overfit_config()
        result = run_step2(run_step1(splits, config), splits, config)
        self.assertLessEqual(result.state.step, 2000)
        rows = record_rows(result.model, records, batch_size=config.batch_size)
        self.assertGreaterEqual(corpus_recovery(rows), 95.0)

    def test_both_pretrained_modules_recover_best(self):
        """Test that pretraining both modules recovers at least as well as pretraining either one."""
        records = toy_corpus(12, min_len=20, max_len=40, seed=11)
        splits = {"train": records[:10], "validation": records[:10], "test": records[10:]}
        config = _overfit_config(max_steps=600, validate_every=300, ae_epochs=300, ae_max_steps=600,
                                 psm_bootstrap_steps=200)
        with tempfile.TemporaryDirectory() as tmp:
            table = ablate(splits, config, Path(tmp))
        recovery = {(psm, pcm): r for psm, pcm, r in zip(table["PSM"], table["PCM"], table["train_recovery"])}
        self.assertGreaterEqual(recovery[(True, True)], recovery[(True, False)])
        self.assertGreaterEqual(recovery[(True, True)], recovery[(False, True)])


if __name__ == '__main__':
    unittest.main()
