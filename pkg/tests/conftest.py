import numpy as np
import pytest
from hypothesis import settings

from draftlab.data import collate, synth_generate, two_domain_specs
from draftlab.model import AcousticModel, ModelConfig

settings.register_profile("draftlab", deadline=None, max_examples=50)
settings.load_profile("draftlab")


def tiny_config(**kw) -> ModelConfig:
    base = dict(d_model=16, n_layers=2, n_heads=2, d_ff=32, conv_channels=8, n_clusters=4, proj_dim=8)
    base.update(kw)
    return ModelConfig(**base)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def domains():
    return two_domain_specs(0)


@pytest.fixture(scope="session")
def source_utts(domains):
    return synth_generate(domains[0], 24, prefix="s")


@pytest.fixture(scope="session")
def target_utts(domains):
    return synth_generate(domains[1], 16, prefix="t")


@pytest.fixture
def small_batch(source_utts):
    return collate(source_utts[:4])


@pytest.fixture
def tiny_model():
    return AcousticModel(tiny_config(), head="apc", seed=0)


LOSS_KINDS = ("apc", "masked", "contrastive", "ctc")


def loss_closure(kind: str, batch, seed: int = 0, config: ModelConfig | None = None):
    """A desk-preset model with the head for ``kind`` and ``store -> loss`` on ``batch``.

    Masks and negatives are drawn from fixed seeds, so repeated calls see the same
    positions and the closure is a smooth function of the parameters.
    """
    from draftlab.ctc import ctc_loss
    from draftlab.ssl import MaskSpec, apc_batch_loss, contrastive_loss, kmeans_fit, masked_predict_loss

    config = config or ModelConfig()
    head = "asr" if kind == "ctc" else kind
    model = AcousticModel(config, head=head, seed=seed)
    mask = MaskSpec(0.2, 3, seed=seed + 1)
    codebook = kmeans_fit(batch.features.reshape(-1, 80)[:400], 4, 10, seed=seed) if kind == "masked" else None

    home = model.store

    def f(store):
        model.store = store
        try:
            return loss(model)
        finally:
            model.store = home

    def loss(model):
        if kind == "apc":
            return apc_batch_loss(model, batch)
        if kind == "masked":
            return masked_predict_loss(model, batch, codebook, mask)
        if kind == "contrastive":
            return contrastive_loss(model, batch, mask, n_negatives=3, temperature=0.5)
        enc = model.encode(batch.features, batch.feature_lengths)
        return ctc_loss(model.asr_log_probs(enc.hidden), batch.tokens, enc.lengths, batch.token_lengths)

    return model, f


def ctc_brute_force(log_probs: np.ndarray, labels) -> float:
    """-log of the summed probability of every frame path collapsing to ``labels``."""
    import itertools
    t_len, v = log_probs.shape
    total = 0.0
    for path in itertools.product(range(v), repeat=t_len):
        out, prev = [], None
        for k in path:
            if k != prev and k != 0:
                out.append(k)
            prev = k
        if out == list(labels):
            total += np.exp(sum(log_probs[t, k] for t, k in enumerate(path)))
    return -np.log(total)


def random_ctc_instance(r, max_t: int = 6, max_v: int = 3, max_l: int = 3):
    """Random feasible (log_probs [T, V], labels) with T <= max_t, V <= max_v, L <= max_l."""
    from draftlab.ctc import min_frames_for
    while True:
        t_len = int(r.integers(1, max_t + 1))
        v = int(r.integers(2, max_v + 1))
        labels = [int(x) for x in r.integers(1, v, int(r.integers(0, max_l + 1)))]
        if min_frames_for(labels) <= t_len:
            break
    logits = r.normal(0, 2, (t_len, v))
    lp = logits - np.logaddexp.reduce(logits, axis=1, keepdims=True)
    return lp, labels


def quick_plan(stage: str, corpus, objective: str, groups, steps: int = 2, seed: int = 0, **kw):
    from draftlab.stages import StagePlan
    from draftlab.schedules import NoamConfig
    return StagePlan(stage, corpus, objective, frozenset(groups), steps, kw.pop("batch_size", 4),
                     kw.pop("scheduler", NoamConfig(1.0, 2, 16)), seed=seed, **kw)


def store_bytes(model, groups=None) -> dict[str, bytes]:
    return {n: model.store[n].data.tobytes() for n in model.store.names(groups)}


TINY_RUN = """[experiment]
regime = {regime}
seed = {seed}
{extra}
[model]
d_model = 16
n_layers = 2
n_heads = 2
d_ff = 32

[data]
synthetic = true

[synthetic]
n_source = 12
n_adapt = 8
n_train = 8
n_dev = 4
n_test = 4
{stages}
[finetune]
steps = 2
batch_size = 4
warmup_steps = 1
"""


def tiny_run_text(regime: str = "draft_self", seed: int = 0) -> str:
    extra = "d_ada = 4\n" if regime in ("draft_self", "draft_cross", "adapter_finetune") else ""
    stages = "" if regime == "baseline" else "\n[pretrain]\nsteps = 2\nbatch_size = 4\nwarmup_steps = 1\n"
    if regime in ("saft_self", "draft_self", "saft_cross", "draft_cross"):
        stages += "\n[adapt]\nsteps = 2\nbatch_size = 4\nwarmup_steps = 1\n"
    return TINY_RUN.format(regime=regime, seed=seed, extra=extra, stages=stages)
