import tempfile
import unittest
from pathlib import Path

import torch
from torch import nn

from src.checkpoint import (
    Checkpoint, CheckpointError, ChecksumError, ConfigMismatchError, decode_checkpoint, encode_checkpoint,
    load_checkpoint, load_module_state, save_checkpoint,
)


def _sample() -> Checkpoint:
    generator = torch.Generator().manual_seed(0)
    return Checkpoint(
        kind="psm", config_hash="cfg", alphabet_hash="abc",
        tensors={
            "w": torch.randn(3, 4, generator=generator),
            "d": torch.randn(2, dtype=torch.float64, generator=generator),
            "n": torch.tensor([1, 2, 3]),
            "r": torch.get_rng_state(),
        },
        step=12, metrics={"perplexity": 4.5}, metadata={"note": "x"},
    )


class TestCheckpointFormat(unittest.TestCase):

    def test_bitwise_round_trip(self):
        """Test that decoding an encoded checkpoint reproduces every tensor bit for bit."""
        original = _sample()
        loaded = decode_checkpoint(encode_checkpoint(original))
        self.assertEqual(list(loaded.tensors), list(original.tensors))
        for name, tensor in original.tensors.items():
            self.assertEqual(loaded.tensors[name].dtype, tensor.dtype)
            self.assertTrue(torch.equal(loaded.tensors[name], tensor))
        self.assertEqual((loaded.kind, loaded.step, loaded.metrics), ("psm", 12, {"perplexity": 4.5}))

    def test_encoding_is_deterministic(self):
        """Test that the same checkpoint always encodes to the same bytes."""
        self.assertEqual(encode_checkpoint(_sample()), encode_checkpoint(_sample()))

    def test_corruption_detected(self):
        """Test that a flipped payload byte or a truncated file raises a checksum error."""
        blob = bytearray(encode_checkpoint(_sample()))
        blob[-1] ^= 0xFF
        with self.assertRaises(ChecksumError):
            decode_checkpoint(bytes(blob))
        with self.assertRaises(ChecksumError):
            decode_checkpoint(encode_checkpoint(_sample())[:-5])
        with self.assertRaises(ChecksumError):
            decode_checkpoint(b"NOTACKPT" + b"\0" * 10)

    def test_load_checks(self):
        """Test that kind, alphabet and config fingerprints are enforced on load."""
        with tempfile.TemporaryDirectory() as tmp:
            path = save_checkpoint(_sample(), Path(tmp) / "a.ckpt")
            self.assertFalse(Path(str(path) + ".tmp").exists())
            load_checkpoint(path, kind="psm", config_hash="cfg", alphabet_hash="abc")
            with self.assertRaises(CheckpointError):
                load_checkpoint(path, kind="ae")
            with self.assertRaises(CheckpointError):
                load_checkpoint(path, alphabet_hash="other")
            with self.assertRaises(ConfigMismatchError):
                load_checkpoint(path, config_hash="other")
            with self.assertRaises(CheckpointError):
                load_checkpoint(Path(tmp) / "missing.ckpt")


class TestLoadModuleState(unittest.TestCase):

    def test_exact_shapes_required(self):
        """Test that nothing is loaded unless the shape tables agree."""
        module = nn.Linear(3, 2)
        before = module.weight.detach().clone()
        with self.assertRaises(CheckpointError):
            load_module_state(module, {"weight": torch.zeros(2, 4), "bias": torch.zeros(2)}, "linear")
        with self.assertRaises(CheckpointError):
            load_module_state(module, {"weight": torch.zeros(2, 3)}, "linear")
        self.assertTrue(torch.equal(module.weight, before))

    def test_loads_values(self):
        """Test that matching tensors are copied into the module."""
        module = nn.Linear(3, 2)
        names = load_module_state(module, {"weight": torch.ones(2, 3), "bias": torch.zeros(2)}, "linear")
        self.assertEqual(names, ["bias", "weight"])
        self.assertTrue(torch.equal(module.weight, torch.ones(2, 3)))


if __name__ == '__main__':
    unittest.main()
