import json

import pytest
import torch

from ddr.checkpoint import (
    CheckpointConfigError,
    CheckpointCorruptError,
    CheckpointKindError,
    CheckpointVersionError,
    assemble,
    load_checkpoint,
    read_meta,
    save_checkpoint,
)
from ddr.encoder import EncoderConfig, encode, init_backbone
from ddr.rem import AssembledModel, RemConfig, init_rem, insert_rem

from conftest import TOY, perturbed_rem, random_seq


def _seq():
    return random_seq(torch.Generator().manual_seed(0), TOY)


def test_dam_round_trip_bitwise(tmp_path, toy_backbone):
    save_checkpoint(toy_backbone, tmp_path / "dam", seed=3)
    loaded = load_checkpoint(tmp_path / "dam", expect_kind="dam")
    assert loaded.params.bitwise_equal(toy_backbone.params)
    assert loaded.config == toy_backbone.config
    assert torch.equal(encode(loaded, _seq()), encode(toy_backbone, _seq()))
    meta = read_meta(tmp_path / "dam")
    assert meta["seed"] == 3 and meta["kind"] == "dam"
    blob = (tmp_path / "dam" / "tensors.bin").stat().st_size
    assert blob == sum(e["nbytes"] for e in meta["tensors"])


def test_rem_round_trip_and_assembly(tmp_path, toy_backbone):
    rem = perturbed_rem(TOY, 5)
    save_checkpoint(toy_backbone, tmp_path / "dam")
    save_checkpoint(rem, tmp_path / "rem")
    model = assemble(tmp_path / "dam", tmp_path / "rem")
    assert torch.equal(encode(model, _seq()), encode(insert_rem(toy_backbone, rem), _seq()))
    assert all(e["name"].startswith("rem.") for e in read_meta(tmp_path / "rem")["tensors"])


def test_rem_moves_between_backbones(tmp_path):
    rem = perturbed_rem(TOY, 6)
    save_checkpoint(rem, tmp_path / "rem")
    for seed in (1, 2):
        save_checkpoint(init_backbone(TOY, seed=seed), tmp_path / f"dam{seed}")
        encode(assemble(tmp_path / f"dam{seed}", tmp_path / "rem"), _seq())


def test_full_kind(tmp_path, toy_backbone):
    save_checkpoint(AssembledModel(toy_backbone), tmp_path / "full")
    loaded = load_checkpoint(tmp_path / "full")
    assert isinstance(loaded, AssembledModel) and loaded.rem is None
    with pytest.raises(CheckpointKindError):
        save_checkpoint(insert_rem(toy_backbone, perturbed_rem(TOY, 1)), tmp_path / "x")


def test_kind_mismatch(tmp_path, toy_backbone):
    save_checkpoint(perturbed_rem(TOY, 1), tmp_path / "rem")
    with pytest.raises(CheckpointKindError):
        load_checkpoint(tmp_path / "rem", expect_kind="dam")
    with pytest.raises(CheckpointKindError):
        assemble(tmp_path / "rem", None)
    with pytest.raises(CheckpointKindError):
        save_checkpoint(toy_backbone, tmp_path / "bad", kind="rem")


def test_version_mismatch(tmp_path, toy_backbone):
    save_checkpoint(toy_backbone, tmp_path / "dam")
    meta_path = tmp_path / "dam" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["format_version"] = 99
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointVersionError):
        load_checkpoint(tmp_path / "dam")


def test_truncated_blob(tmp_path, toy_backbone):
    save_checkpoint(toy_backbone, tmp_path / "dam")
    blob = tmp_path / "dam" / "tensors.bin"
    blob.write_bytes(blob.read_bytes()[:-4])
    with pytest.raises(CheckpointCorruptError):
        load_checkpoint(tmp_path / "dam")


def test_incompatible_rem(tmp_path, toy_backbone):
    other = EncoderConfig(num_layers=3, hidden_dim=8, num_heads=2, ffn_dim=12, vocab_size=30, max_len=10)
    save_checkpoint(toy_backbone, tmp_path / "dam")
    save_checkpoint(init_rem(RemConfig.for_encoder(other, lora_rank=2, pa_bottleneck=2)), tmp_path / "rem")
    with pytest.raises(CheckpointConfigError):
        assemble(tmp_path / "dam", tmp_path / "rem")


def test_manifest_config_disagreement(tmp_path, toy_backbone):
    save_checkpoint(toy_backbone, tmp_path / "dam")
    meta_path = tmp_path / "dam" / "meta.json"
    meta = json.loads(meta_path.read_text())
    meta["config"]["num_layers"] = 1
    meta_path.write_text(json.dumps(meta))
    with pytest.raises(CheckpointConfigError):
        load_checkpoint(tmp_path / "dam")


def test_missing_meta(tmp_path):
    from ddr.checkpoint import CheckpointError

    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "nothing")
