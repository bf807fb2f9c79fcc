import numpy as np
import pytest

from draftlab.checkpoint import encode_checkpoint
from draftlab.data import collate
from draftlab.errors import CheckpointContentError, ConfigurationError, NaNLossError
from draftlab.model import insert_adapters, swap_head
from draftlab.params import Group
from draftlab.ssl import apc_batch_loss
from draftlab.stages import (adapt_with_adapters, cross_transfer, error_rate, model_checkpoint, pretrain,
                             recover_pretrained, run_adapter_finetune, run_baseline, run_draft, run_finetune_only,
                             run_saft, run_stage)

from conftest import quick_plan, store_bytes, tiny_config

BS = {Group.BACKBONE, Group.SSL_HEAD}
BAA = {Group.BACKBONE, Group.ADAPTER, Group.ASR_HEAD}


@pytest.fixture(scope="module")
def pretrained(source_utts):
    model, _ = pretrain(tiny_config(), quick_plan("pretrain", source_utts, "apc", BS, steps=3))
    return model


def _plans(source, target, steps=2):
    return (quick_plan("pretrain", source, "apc", BS, steps),
            quick_plan("adapt", target, "apc", {Group.ADAPTER}, steps, seed=1),
            quick_plan("finetune", target, "ctc", BAA, steps, seed=2))


def test_plan_validation(target_utts):
    with pytest.raises(ConfigurationError):
        quick_plan("finetune", target_utts, "apc", BAA)
    with pytest.raises(ConfigurationError):
        quick_plan("adapt", target_utts, "ctc", {Group.ADAPTER})
    with pytest.raises(ConfigurationError):
        quick_plan("adapt", target_utts, "apc", {Group.ADAPTER}, batch_size=0)


def test_stage_needs_steps_and_matching_head(pretrained, target_utts):
    with pytest.raises(ConfigurationError):
        run_stage(pretrained.clone(), quick_plan("adapt", target_utts, "apc", BS, steps=0))
    with pytest.raises(ConfigurationError, match="head"):
        run_stage(pretrained.clone(), quick_plan("adapt", target_utts, "masked", BS))


def test_single_step_changes_a_trainable_parameter(pretrained, target_utts):
    m = pretrained.clone()
    before = store_bytes(m, [Group.SSL_HEAD])
    run_stage(m, quick_plan("adapt", target_utts, "apc", {Group.SSL_HEAD}, steps=1))
    assert store_bytes(m, [Group.SSL_HEAD]) != before


def test_freeze_soundness_random_plans(pretrained, target_utts):
    r = np.random.default_rng(0)
    groups = list(Group)
    for trial in range(100):
        m = pretrained.clone()
        if r.random() < 0.5:
            insert_adapters(m, 4, seed=trial)
        objective = "apc"
        if r.random() < 0.4:
            swap_head(m, "asr", vocab_size=29, seed=trial)
            objective = "ctc"
        present = sorted(m.store.groups_present())
        chosen = {g for g in groups if r.random() < 0.5}
        if not chosen & set(present):
            chosen.add(present[int(r.integers(len(present)))])
        before = store_bytes(m)
        stage = "finetune" if objective == "ctc" else "adapt"
        run_stage(m, quick_plan(stage, target_utts, objective, chosen, steps=1, seed=trial))
        for n, raw in before.items():
            if m.store.entry(n).group not in chosen:
                assert m.store[n].data.tobytes() == raw, (trial, n)


def test_draft_counters_and_stage2_freeze(source_utts, target_utts):
    model, report = run_draft(*_plans(source_utts, target_utts), d_ada=4, config=tiny_config())
    assert report.counter_labels() == {"Backbone": 2, "SslHead": 1, "Adapter": 2, "AsrHead": 1}
    stage1, stage2 = report.stages[0].checkpoint, report.stages[1].checkpoint
    for n in stage1.names(Group.BACKBONE) + stage1.names(Group.SSL_HEAD):
        assert stage2.tensors[n][0].tobytes() == stage1.tensors[n][0].tobytes()
    assert model.head_kind == "asr" and model.d_ada == 4


def test_draft_objective_mismatch(source_utts, target_utts):
    pre, ad, ft = _plans(source_utts, target_utts)
    ad = ad.replace(objective="masked")
    with pytest.raises(ConfigurationError, match="differs"):
        run_draft(pre, ad, ft, 4, tiny_config())


def test_draft_adapt_must_train_only_adapters(source_utts, target_utts):
    pre, ad, ft = _plans(source_utts, target_utts)
    with pytest.raises(ConfigurationError):
        run_draft(pre, ad.replace(trainable_groups=frozenset(BS)), ft, 4, tiny_config())


def test_adapter_insertion_keeps_ssl_loss(pretrained, target_utts):
    batch = collate(target_utts[:4])
    before = apc_batch_loss(pretrained, batch).data.tobytes()
    m = insert_adapters(pretrained.clone(), 8)
    assert apc_batch_loss(m, batch).data.tobytes() == before


def test_recover_pretrained(pretrained, target_utts):
    m, _ = adapt_with_adapters(pretrained.clone(), quick_plan("adapt", target_utts, "apc", {Group.ADAPTER}), 4)
    back = recover_pretrained(m)
    assert store_bytes(back) == store_bytes(pretrained)


def test_saft_updates_backbone_and_has_no_adapters(source_utts, target_utts, pretrained):
    _, ad, ft = _plans(source_utts, target_utts)
    ad = ad.replace(trainable_groups=frozenset(BS))
    ft = ft.replace(trainable_groups=frozenset({Group.BACKBONE, Group.ASR_HEAD}))
    model, report = run_saft(None, ad, ft, tiny_config(), pretrained=pretrained)
    s2 = report.stages[0].checkpoint
    assert any(s2.tensors[n][0].tobytes() != pretrained.store[n].data.tobytes()
               for n in pretrained.store.names([Group.BACKBONE]))
    assert not model.store.names([Group.ADAPTER])


def test_saft_warns_when_adapt_lr_is_not_smaller(source_utts, target_utts):
    pre, ad, ft = _plans(source_utts, target_utts, steps=1)
    ft = ft.replace(trainable_groups=frozenset({Group.BACKBONE, Group.ASR_HEAD}))
    with pytest.warns(UserWarning, match="peak lr"):
        run_saft(pre, ad.replace(trainable_groups=frozenset(BS)), ft, tiny_config())


def test_saft_without_adaptation_equals_finetune_only(target_utts, pretrained):
    ft = quick_plan("finetune", target_utts, "ctc", {Group.BACKBONE, Group.ASR_HEAD}, steps=3, seed=2)
    a, _ = run_saft(None, None, ft, tiny_config(), pretrained=pretrained)
    b, _ = run_finetune_only(None, ft, tiny_config(), pretrained=pretrained)
    assert encode_checkpoint(model_checkpoint(a)) == encode_checkpoint(model_checkpoint(b))


def test_adapter_finetune_keeps_backbone(pretrained, target_utts):
    ft = quick_plan("finetune", target_utts, "ctc", {Group.ADAPTER, Group.ASR_HEAD}, steps=3)
    model, report = run_adapter_finetune(pretrained, 4, ft)
    assert store_bytes(model, [Group.BACKBONE]) == store_bytes(pretrained, [Group.BACKBONE])
    expected = model.store.count([Group.ADAPTER]) + model.store.count([Group.ASR_HEAD])
    assert report.stages[0].trained_params == expected
    with pytest.raises(ConfigurationError):
        run_adapter_finetune(pretrained, 4, ft.replace(trainable_groups=frozenset(BAA)))


def test_cross_transfer_with_same_corpus_equals_draft(source_utts, target_utts, pretrained):
    _, ad, ft = _plans(source_utts, target_utts)
    draft, _ = run_draft(None, ad, ft, 4, tiny_config(), pretrained=pretrained)
    adapted, res = adapt_with_adapters(pretrained.clone(), ad, 4)
    start = {n: res.checkpoint.tensors[n][0].tobytes() for n in res.checkpoint.names(Group.ADAPTER)}
    cross, report = cross_transfer(res.checkpoint, ft)
    assert encode_checkpoint(model_checkpoint(cross)) == encode_checkpoint(model_checkpoint(draft))
    assert report.counter_labels()["Adapter"] == 2 and start


def test_cross_transfer_needs_adapters(pretrained, target_utts):
    with pytest.raises(CheckpointContentError):
        cross_transfer(model_checkpoint(pretrained), quick_plan("finetune", target_utts, "ctc", BAA))


def test_nan_loss_aborts_with_step_and_batch(pretrained, target_utts):
    m = pretrained.clone()
    m.store["head.apc.1.bias"].data[0] = np.nan
    with pytest.raises(NaNLossError, match=r"step 1.*batch ids \['t-"):
        run_stage(m, quick_plan("adapt", target_utts, "apc", BS))


def test_stage_determinism(tmp_path, source_utts):
    plan = quick_plan("pretrain", source_utts, "apc", BS, steps=3)
    a, _ = pretrain(tiny_config(), plan, out_dir=tmp_path / "a")
    b, _ = pretrain(tiny_config(), plan, out_dir=tmp_path / "b")
    for name in ("pretrain.ckpt", "pretrain.metrics.tsv"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_ssl_loss_goes_down(source_utts):
    from draftlab.schedules import NoamConfig
    plan = quick_plan("pretrain", source_utts, "apc", BS, steps=40, log_every=39,
                      scheduler=NoamConfig(1.0, 10, 16))
    _, res = pretrain(tiny_config(), plan)
    assert res.metrics[-1][2] < res.metrics[0][2]


def test_baseline_and_error_rate(target_utts):
    ft = quick_plan("finetune", target_utts, "ctc", {Group.BACKBONE, Group.ASR_HEAD}, steps=2)
    model, report = run_baseline(ft, tiny_config())
    assert report.counter_labels() == {"Backbone": 1, "SslHead": 0, "Adapter": 0, "AsrHead": 1}
    assert 0.0 <= error_rate(model, target_utts[:4])
