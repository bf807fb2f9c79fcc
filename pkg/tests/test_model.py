import numpy as np
import pytest

from draftlab.errors import ConfigurationError, DimensionError, InvalidMaskError, SequenceTooShortError, StateError
from draftlab.model import (AcousticModel, ModelConfig, adapter_forward, adapter_param_count, count_model_params,
                            desk_preset, frontend_lengths, insert_adapters, paper_preset, swap_head)
from draftlab.params import Group, count_params
from draftlab.tensor import Tensor

from conftest import tiny_config


def _adapter(d, d_ada, r, zero_out=True):
    return {"ln_gain": Tensor(np.ones(d)), "ln_bias": Tensor(np.zeros(d)),
            "w1": Tensor(r.normal(size=(d, d_ada))), "b1": Tensor(r.normal(size=d_ada)),
            "w2": Tensor(np.zeros((d_ada, d)) if zero_out else r.normal(size=(d_ada, d))),
            "b2": Tensor(np.zeros(d))}


def test_adapter_passthrough_examples(rng):
    x = Tensor(rng.normal(size=(3, 8)))
    assert adapter_forward(x, _adapter(8, 4, rng)).data.tobytes() == x.data.tobytes()
    a = _adapter(8, 4, rng, zero_out=False)
    a["w1"], a["b1"] = Tensor(np.zeros((8, 4))), Tensor(np.zeros(4))
    np.testing.assert_array_equal(adapter_forward(x, a).data, x.data)
    with pytest.raises(DimensionError):
        adapter_forward(Tensor(np.ones((2, 5))), _adapter(8, 4, rng))


def test_adapter_hand_trace():
    # d_model=2, d_ada=1, x=[1, 0]: LN(x) = [1, -1] (eps ignored), W1=[2, 1] -> 1 + 0.5 = 1.5, relu 1.5,
    # W2=[[1, -2]], b2=[0.25, 0] -> x + [1.5+0.25, -3] = [2.75, -3]
    a = {"ln_gain": Tensor([1.0, 1.0]), "ln_bias": Tensor([0.0, 0.0]), "w1": Tensor([[2.0], [1.0]]),
         "b1": Tensor([0.5]), "w2": Tensor([[1.0, -2.0]]), "b2": Tensor([0.25, 0.0])}
    out = adapter_forward(Tensor([[1.0, 0.0]]), a, eps=1e-12)
    np.testing.assert_allclose(out.data, [[2.75, -3.0]], rtol=1e-6)


def test_frontend_lengths_example():
    assert (16 - 3) // 2 + 1 == 7
    assert frontend_lengths([16])[0] == 3
    m = AcousticModel(tiny_config(), seed=0)
    h, lens = m.frontend(np.random.default_rng(0).normal(size=(16, 80)))
    assert h.shape == (1, 3, 16) and lens[0] == 3
    with pytest.raises(SequenceTooShortError):
        m.frontend(np.zeros((6, 80)))
    with pytest.raises(DimensionError):
        m.frontend(np.zeros((16, 40)))


def test_frontend_zero_input_zero_output():
    m = AcousticModel(tiny_config(), seed=0)  # conv and projection biases start at zero
    h, _ = m.frontend(np.zeros((20, 80)))
    assert not h.data.any()


def test_batch_items_do_not_couple(rng):
    m = AcousticModel(tiny_config(), seed=0)
    x = rng.normal(size=(2, 24, 80)).astype(np.float32)
    single = m.encode(x[:1]).hidden.data
    double = m.encode(np.concatenate([x, x])).hidden.data
    np.testing.assert_allclose(double[0], single[0], atol=1e-6)
    np.testing.assert_allclose(double[2], single[0], atol=1e-6)


def test_causal_perturbation_leaves_earlier_steps_identical(rng):
    m = AcousticModel(tiny_config(causal=True), seed=1)
    x = rng.normal(size=(1, 39, 80)).astype(np.float32)  # every raw frame reaches an output step
    base = m.encode(x).hidden.data
    y = x.copy()
    y[0, -1] += 5.0
    out = m.encode(y).hidden.data
    assert out[0, :-1].tobytes() == base[0, :-1].tobytes()
    assert not np.array_equal(out[0, -1], base[0, -1])


def test_noncausal_perturbation_reaches_earlier_steps(rng):
    m = AcousticModel(tiny_config(causal=False), seed=1)
    x = rng.normal(size=(1, 39, 80)).astype(np.float32)  # every raw frame reaches an output step
    y = x.copy()
    y[0, -1] += 5.0
    assert not np.allclose(m.encode(y).hidden.data[0, 0], m.encode(x).hidden.data[0, 0])


def test_causal_gradient_probes(rng):
    m = AcousticModel(tiny_config(causal=True), seed=2)
    h = Tensor(rng.normal(size=(1, 9, 16)), requires_grad=True)
    for _ in range(10):
        t = int(rng.integers(0, 8))
        h.zero_grad()
        out, _ = m.encoder_forward(h, np.ones((1, 9), bool))
        # weighted: a plain sum of layer-normed features has zero gradient
        (out[0, t] * Tensor(np.arange(16.0))).sum().backward()
        assert not h.grad[0, t + 1:].any() and h.grad[0, t].any()


def test_padding_invariance(rng):
    m = AcousticModel(tiny_config(causal=False), seed=3)
    x = rng.normal(size=(1, 30, 80)).astype(np.float32)
    padded = np.concatenate([x, rng.normal(size=(1, 20, 80)).astype(np.float32)], axis=1)
    a = m.encode(x).hidden.data[0]
    enc = m.encode(padded, lengths=[30])
    assert enc.lengths[0] == a.shape[0]
    np.testing.assert_allclose(enc.hidden.data[0, :a.shape[0]], a, atol=1e-5)


def test_fully_masked_row_is_rejected():
    m = AcousticModel(tiny_config(), seed=0)
    with pytest.raises(InvalidMaskError):
        m.encoder_forward(Tensor(np.ones((1, 3, 16))), np.zeros((1, 3), bool))


@pytest.mark.parametrize("placement", ["block_output", "ffn_output"])
def test_insert_adapters_is_bit_exact(rng, placement):
    m = AcousticModel(tiny_config(adapter_placement=placement), seed=4)
    x = rng.normal(size=(2, 28, 80)).astype(np.float32)
    before = m.encode(x).hidden.data.tobytes()
    insert_adapters(m, 8, seed=5)
    assert m.encode(x).hidden.data.tobytes() == before
    names = m.store.names([Group.ADAPTER])
    assert len(names) == 3 * 6  # n_layers + 1 adapters, six tensors each
    with pytest.raises(StateError):
        insert_adapters(m, 8)


def test_placement_changes_the_function(rng):
    x = rng.normal(size=(1, 28, 80)).astype(np.float32)
    outs = []
    for placement in ("block_output", "ffn_output"):
        m = insert_adapters(AcousticModel(tiny_config(adapter_placement=placement), seed=4), 8, seed=5)
        for n in m.store.names([Group.ADAPTER]):
            if n.endswith("w2"):
                m.store[n].data[...] = 0.1
        outs.append(m.encode(x).hidden.data)
    assert not np.allclose(*outs)


def test_adapter_counts_match_closed_form():
    assert adapter_param_count(512, 64) * 13 == 872_768
    assert count_model_params(paper_preset(), d_ada=1024, groups=[Group.ADAPTER]) == 13_664_768
    assert count_model_params(paper_preset(), d_ada=2048, groups=[Group.ADAPTER]) == 27_309_568
    m = insert_adapters(AcousticModel(desk_preset(), seed=0), 16)
    assert count_params(m.store, [Group.ADAPTER]) == 5 * adapter_param_count(64, 16)
    assert count_params(m.store, []) == 0


def test_paper_reference_size():
    total = count_model_params(paper_preset(), "apc")
    assert round(total / 1e6, 1) == 39.2


def test_group_partition(tiny_model):
    m = insert_adapters(tiny_model, 4)
    every = set(m.store.names())
    parts = [set(m.store.names([g])) for g in Group]
    assert set().union(*parts) == every and sum(map(len, parts)) == len(every)


def test_swap_head_round_trip():
    m = insert_adapters(AcousticModel(tiny_config(apc_shifts=(1, 2, 3, 4)), seed=0), 4)
    keep = {n: m.store[n].data.tobytes() for n in m.store.names([Group.BACKBONE, Group.ADAPTER])}
    assert sum(1 for n in m.store.names([Group.SSL_HEAD]) if n.endswith("weight")) == 4
    assert m.store["head.apc.1.weight"].shape == (16, 320)
    swap_head(m, "asr", vocab_size=29)
    assert count_params(m.store, [Group.ASR_HEAD]) == 16 * 29 + 29
    assert not m.store.names([Group.SSL_HEAD])
    swap_head(m, "apc")
    assert {n: m.store[n].data.tobytes() for n in keep} == keep
    with pytest.raises(ConfigurationError):
        swap_head(m, "asr")


def test_head_guards(tiny_model, rng):
    enc = tiny_model.encode(rng.normal(size=(1, 20, 80)))
    with pytest.raises(ConfigurationError):
        tiny_model.asr_log_probs(enc.hidden)
    preds = tiny_model.apc_predictions(enc.hidden)
    assert sorted(preds) == [1, 2, 3] and preds[1].shape == (1, 4, 320)


def test_config_validation():
    with pytest.raises(ConfigurationError):
        ModelConfig(d_model=10, n_heads=4)
    with pytest.raises(ConfigurationError):
        ModelConfig(subsample=2)
    with pytest.raises(ConfigurationError):
        ModelConfig(adapter_placement="anywhere")
    with pytest.raises(ConfigurationError):
        ModelConfig(apc_shifts=(0, 1))
