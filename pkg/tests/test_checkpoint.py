import struct

import numpy as np
import pytest

from project.checkpoint import (
    CheckpointConfig,
    load_checkpoint,
    load_model,
    save_checkpoint,
    save_heft,
    save_lora,
    save_model,
)
from project.errors import CheckpointFormatError
from project.lora import LoraConfig, LoraModel, attach_lora
from project.reft import ReftConfig, ReftModel
from project.training import HeftPlan, TrainConfig, run_heft
from project.transformer import ModelWeights


@pytest.fixture
def one_tensor_file(tmp_path):
    path = tmp_path / "one.heft"
    save_checkpoint(path, {}, {"a": np.ones(2)})
    return path


def test_tensors_round_trip_bit_for_bit(tmp_path, rng):
    tensors = {
        "matrix": rng.normal(size=(3, 5)),
        "cube": rng.normal(size=(2, 1, 4)),
        "scalar": np.array(-0.0),
        "odd": np.array([5e-324, np.inf, -np.inf, 1e308]),
    }
    path = tmp_path / "t.heft"
    save_checkpoint(path, {"note": "x"}, tensors)
    config, loaded = load_checkpoint(path)
    assert config == {"note": "x"}
    assert list(loaded) == list(tensors)
    for name, value in tensors.items():
        assert loaded[name].shape == value.shape
        assert loaded[name].tobytes() == value.tobytes()
    assert not (tmp_path / "t.heft.tmp").exists()


def test_model_checkpoint(tmp_path, tiny_model):
    path = tmp_path / "base.heft"
    save_model(path, tiny_model, run={"stage": "pretrain"})
    model, config = load_model(path)
    assert isinstance(model, ModelWeights)
    assert config.kind == "model" and config.run == {"stage": "pretrain"}
    assert model.digest() == tiny_model.digest()


def test_heft_checkpoint_reproduces_logits(tmp_path, tiny_model, train_records, random_prompts):
    plan = HeftPlan(
        lora_epochs=1,
        reft_epochs=1,
        lora_config=LoraConfig(r=2, alpha=8.0),
        reft_config=ReftConfig(low_rank_dimension=2),
        lora_train=TrainConfig(batch_size=1, grad_accum=8, learning_rate=1e-3),
        reft_train=TrainConfig(batch_size=4, grad_accum=2, learning_rate=1e-3),
    )
    result = run_heft(tiny_model, plan, train_records[:8])
    path = tmp_path / "heft.heft"
    save_heft(path, result.intervention)

    model, config = load_model(path)
    assert isinstance(model, ReftModel)
    assert config.kind == "heft" and config.reft.layer == result.intervention.config.layer
    assert model.base.digest() == result.merged.digest()
    for prompt in random_prompts[:8]:
        np.testing.assert_array_equal(model.logits(prompt).data, result.intervention.logits(prompt).data)

    _, tensors = load_checkpoint(path)
    assert {"reft.R", "reft.W", "reft.b"} <= set(tensors)


def test_lora_checkpoint_keeps_adapters_unmerged(tmp_path, tiny_model, random_prompts):
    adapted = attach_lora(tiny_model, LoraConfig(r=2, alpha=8.0), seed=3)
    gen = np.random.default_rng(0)
    adapted.update_parameters({n: gen.normal(size=v.shape) for n, v in adapted.trainable_parameters().items()})
    path = tmp_path / "lora.heft"
    save_lora(path, adapted)

    model, config = load_model(path)
    assert isinstance(model, LoraModel)
    assert config.lora == adapted.config
    assert model.base.digest() == tiny_model.digest()
    assert set(model.layers) == set(adapted.layers)
    for prompt in random_prompts[:4]:
        np.testing.assert_array_equal(model.logits(prompt).data, adapted.logits(prompt).data)


def test_bad_magic(tmp_path, one_tensor_file):
    data = one_tensor_file.read_bytes()
    path = tmp_path / "bad.heft"
    path.write_bytes(b"NOPE" + data[4:])
    with pytest.raises(CheckpointFormatError, match="magic"):
        load_checkpoint(path)


def test_unsupported_version(tmp_path, one_tensor_file):
    data = one_tensor_file.read_bytes()
    path = tmp_path / "v2.heft"
    path.write_bytes(data[:4] + struct.pack("<I", 2) + data[8:])
    with pytest.raises(CheckpointFormatError, match="version"):
        load_checkpoint(path)


def test_truncated_file(tmp_path, one_tensor_file):
    path = tmp_path / "short.heft"
    path.write_bytes(one_tensor_file.read_bytes()[:-1])
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)


def test_trailing_bytes(tmp_path, one_tensor_file):
    path = tmp_path / "long.heft"
    path.write_bytes(one_tensor_file.read_bytes() + b"\x00")
    with pytest.raises(CheckpointFormatError, match="trailing"):
        load_checkpoint(path)


def test_duplicate_tensor_names(tmp_path, one_tensor_file):
    data = one_tensor_file.read_bytes()
    # magic, version, config length and the two-byte "{}" config precede the count
    count_at = 4 + 4 + 4 + 2
    entry = data[count_at + 4 :]
    path = tmp_path / "dup.heft"
    path.write_bytes(data[:count_at] + struct.pack("<I", 2) + entry + entry)
    with pytest.raises(CheckpointFormatError, match="duplicate"):
        load_checkpoint(path)


def test_unreadable_config(tmp_path, one_tensor_file):
    data = one_tensor_file.read_bytes()
    path = tmp_path / "cfg.heft"
    path.write_bytes(data[:12] + b"{x" + data[14:])
    with pytest.raises(CheckpointFormatError, match="config"):
        load_checkpoint(path)


def test_heft_checkpoint_without_intervention_tensors(tmp_path, tiny_model):
    config = CheckpointConfig(kind="heft", model=tiny_model.config, reft=ReftConfig().resolve(tiny_model.config))
    path = tmp_path / "partial.heft"
    save_checkpoint(path, config.model_dump(mode="json"), {n: tiny_model[n] for n in tiny_model.names()})
    with pytest.raises(CheckpointFormatError, match="reft"):
        load_model(path)


def tensor_entry(raw_name, dims, payload=b""):
    entry = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<B", len(dims))
    return entry + b"".join(struct.pack("<Q", d) for d in dims) + payload


def single_entry_file(tmp_path, one_tensor_file, entry):
    data = one_tensor_file.read_bytes()
    count_at = 4 + 4 + 4 + 2
    path = tmp_path / "crafted.heft"
    path.write_bytes(data[:count_at] + struct.pack("<I", 1) + entry)
    return path


def test_non_utf8_tensor_name(tmp_path, one_tensor_file):
    path = single_entry_file(tmp_path, one_tensor_file, tensor_entry(b"\xff", [2], np.ones(2).tobytes()))
    with pytest.raises(CheckpointFormatError, match="not UTF-8"):
        load_checkpoint(path)


def test_dims_whose_product_wraps_int64(tmp_path, one_tensor_file):
    # 2**32 * 2**32 is 0 in 64-bit arithmetic
    path = single_entry_file(tmp_path, one_tensor_file, tensor_entry(b"a", [2**32, 2**32]))
    with pytest.raises(CheckpointFormatError, match="truncated"):
        load_checkpoint(path)


def test_empty_tensor_with_unrepresentable_dim(tmp_path, one_tensor_file):
    path = single_entry_file(tmp_path, one_tensor_file, tensor_entry(b"a", [0, 2**64 - 1]))
    with pytest.raises(CheckpointFormatError, match="unusable dims"):
        load_checkpoint(path)


def test_failed_save_keeps_previous_file_and_no_scratch(tmp_path, one_tensor_file):
    before = one_tensor_file.read_bytes()
    with pytest.raises(CheckpointFormatError, match="cannot be stored"):
        save_checkpoint(one_tensor_file, {}, {"x" * 0x10000: np.ones(1)})
    assert one_tensor_file.read_bytes() == before
    assert not one_tensor_file.with_name(one_tensor_file.name + ".tmp").exists()
    assert sorted(p.name for p in tmp_path.iterdir()) == ["one.heft"]
