import json
import math
import warnings

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from conftest import SMALL, TINY
from actprompt.config import EncoderConfig, TemporalConfig, TrainConfig
from actprompt.data import Dataset, SyntheticSpec, generate_synthetic
from actprompt.exceptions import FormatError, NumericError, SamplingError, ValidationError
from actprompt.model import ActPromptModel
from actprompt.train import (Checkpoint, PreparedData, batch_loss, count_parameters,
                             disjoint_epoch_sampler, finetune, make_batches)


@pytest.mark.parametrize("n", [100, 103, 7])
def test_sampler_partitions_over_ten_epochs(n):
    chunks = [disjoint_epoch_sampler(n, 0.1, e, seed=0) for e in range(10)]
    seen = [i for c in chunks for i in c]
    assert sorted(seen) == list(range(n))  # union is everything and no index repeats
    sizes = [len(c) for c in chunks]
    assert max(sizes) - min(sizes) <= 1


def test_sampler_chunks_of_ten():
    assert all(len(disjoint_epoch_sampler(100, 0.1, e)) == 10 for e in range(10))
    assert disjoint_epoch_sampler(100, 0.1, 10) == disjoint_epoch_sampler(100, 0.1, 0)


def test_full_ratio_uses_everything():
    for e in range(3):
        assert sorted(disjoint_epoch_sampler(20, 1.0, e)) == list(range(20))


@given(st.integers(1, 300), st.floats(0.01, 1.0), st.integers(0, 1000))
def test_sampler_partition_property(n, ratio, seed):
    k = math.ceil(1 / ratio - 1e-9)
    chunks = [set(disjoint_epoch_sampler(n, ratio, e, seed)) for e in range(k)]
    assert set().union(*chunks) == set(range(n))
    assert sum(len(c) for c in chunks) == n


def test_sampler_rejects_bad_ratio():
    with pytest.raises(ValidationError):
        disjoint_epoch_sampler(10, 0.0, 0)


def test_singleton_batch_is_merged():
    assert make_batches(list(range(9)), 4) == [[0, 1, 2, 3], [4, 5, 6, 7, 8]]


# --- fine-tuning -------------------------------------------------------------

def quiet_finetune(*args, **kwargs):
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        return finetune(*args, **kwargs)


def test_zero_learning_rate_leaves_trainables_bitwise(small_config, small_synthetic):
    cfg = small_config.replace(learning_rate=0.0)
    init = ActPromptModel(cfg.encoder, cfg.temporal, cfg.prompt, cfg.seed)
    before = {n: p.detach().clone() for n, p in init.trainable_state().items()}
    result = quiet_finetune(cfg, small_synthetic, model=init)
    for n, t in before.items():
        assert result.checkpoint.trainables[n].tobytes() == t.numpy().tobytes(), n


def test_training_moves_only_trainables(small_config, small_synthetic, tmp_path):
    model = ActPromptModel(small_config.encoder, small_config.temporal)
    before = {n: p.detach().clone() for n, p in model.trainable_state().items()}
    result = quiet_finetune(small_config, small_synthetic, model=model, log_path=tmp_path / "log.jsonl")
    assert result.backbone_hash_before == result.backbone_hash_after
    moved = [n for n, p in model.trainable_state().items() if not torch.equal(p, before[n])]
    assert "video_coupler.weight" in moved and any(n.startswith("verb_couplers") for n in moved)
    lines = [json.loads(l) for l in (tmp_path / "log.jsonl").read_text().splitlines()]
    assert lines == result.history
    assert set(lines[0]) == {"epoch", "step", "l_ce", "l_tri", "l_con", "l_total"}


def test_same_seed_same_checkpoint(small_config, small_synthetic):
    a = quiet_finetune(small_config, small_synthetic).checkpoint.to_bytes()
    b = quiet_finetune(small_config, small_synthetic).checkpoint.to_bytes()
    assert a == b


def test_single_video_dataset_rejected(small_config, small_synthetic):
    one = [r for r in small_synthetic.records if r.video_id == small_synthetic.records[0].video_id]
    with pytest.raises(SamplingError):
        finetune(small_config, Dataset(one, small_synthetic.videos))


def test_nan_parameter_aborts_with_batch(small_config, small_synthetic):
    model = ActPromptModel(small_config.encoder, small_config.temporal)
    with torch.no_grad():
        model.video_coupler.bias.fill_(float("nan"))
    with pytest.raises(NumericError, match="qids"):
        quiet_finetune(small_config, small_synthetic, model=model)


def test_vanilla_variant_trains(small_config, small_synthetic):
    cfg = small_config.replace(prompt="vanilla")
    result = quiet_finetune(cfg, small_synthetic)
    assert all(h["l_con"] == 0.0 for h in result.history)
    assert list(result.checkpoint.trainables) == ["vanilla"]


# --- checkpoints -------------------------------------------------------------

def test_checkpoint_round_trip_is_byte_identical(small_config, small_synthetic, tmp_path):
    ckpt = quiet_finetune(small_config, small_synthetic).checkpoint
    path = ckpt.save(tmp_path / "a.ckpt")
    again = Checkpoint.load(path).save(tmp_path / "b.ckpt")
    assert path.read_bytes() == again.read_bytes()
    model = Checkpoint.load(path).build_model()
    for n, p in model.trainable_state().items():
        assert p.detach().numpy().tobytes() == ckpt.trainables[n].tobytes()


def test_checkpoint_errors(small_config):
    model = ActPromptModel(small_config.encoder, small_config.temporal)
    ckpt = Checkpoint.from_model(model, small_config, 0)
    blob = ckpt.to_bytes()
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(b"NOPE" + blob[4:])
    with pytest.raises(FormatError):
        Checkpoint.from_bytes(blob[:-3])
    with pytest.raises(ValidationError, match="hash"):
        Checkpoint(ckpt.trainables, "0" * 64, small_config).build_model()


# --- parameter accounting ----------------------------------------------------

def test_default_trainable_ratio_below_bound():
    count = count_parameters(ActPromptModel(EncoderConfig(pretrain_steps=0)))
    assert 0 < count.ratio < 0.35
    assert "trainable=" in count.banner()


def test_frozen_model_has_no_trainables():
    model = ActPromptModel(TINY)
    for p in model.parameters():
        p.requires_grad_(False)
    assert count_parameters(model).trainable == 0


def test_extra_layer_adds_one_verb_coupler():
    D = TINY.embed_dim
    grow = EncoderConfig(**{**TINY.__dict__, "num_layers": TINY.num_layers + 1})
    a = count_parameters(ActPromptModel(TINY)).by_module["verb_couplers"][0]
    b = count_parameters(ActPromptModel(grow)).by_module["verb_couplers"][0]
    assert b - a == D * D + D


def test_vanilla_budget_matches_action():
    cfg = TemporalConfig()
    action = count_parameters(ActPromptModel(SMALL, cfg)).trainable
    vanilla = count_parameters(ActPromptModel(SMALL, cfg, prompt="vanilla")).trainable
    assert action == ActPromptModel.action_budget(SMALL, cfg)
    assert action <= vanilla < action + SMALL.num_layers * SMALL.embed_dim


# --- default-config optimisation ---------------------------------------------

def test_fifty_steps_on_one_batch_cut_total_loss():
    cfg = TrainConfig()
    model = ActPromptModel(cfg.encoder, cfg.temporal)
    videos, records = generate_synthetic(SyntheticSpec(), seed=0)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        prepared = PreparedData(model, Dataset(records, videos), cfg)
        quads = prepared.quadruples(list(range(5)), np.random.default_rng(0), cfg)
    opt = torch.optim.SGD([p for _, p in model.trainable_named_parameters()], lr=cfg.learning_rate)
    losses = []
    for _ in range(51):
        parts = batch_loss(model, quads, prepared.videos, prepared.queries, cfg.loss)
        losses.append(parts.l_total.item())
        opt.zero_grad()
        parts.l_total.backward()
        opt.step()
    assert losses[50] <= 0.8 * losses[0], (losses[0], losses[50])


def test_default_run_final_epoch_below_first(default_run):
    means = default_run["result"].epoch_means()
    assert means[-1] < means[0], means


def test_default_run_keeps_backbone(default_run):
    r = default_run["result"]
    assert r.backbone_hash_before == r.backbone_hash_after == r.model.backbone.hash()
