"""Stage orchestration: pretrain / adapt / finetune and the comparison regimes.

Every stage trains exactly the parameter groups in its plan; everything else
is checked byte-for-byte after the stage. Each trained group's update counter
goes up by one per stage, so a DRAFT run ends with Backbone 2, SslHead 1,
Adapter 2, AsrHead 1.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import warnings
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from .augment import SPEED_FACTORS, spec_augment, speed_perturb
from .checkpoint import Checkpoint, save_checkpoint
from .ctc import ctc_greedy_decode, ctc_loss
from .data import Batch, Utterance, collate, make_batches
from .errors import CheckpointContentError, ConfigurationError, MissingGroupError, NaNLossError, StateError
from .model import AcousticModel, ModelConfig, insert_adapters, remove_adapters, swap_head
from .optim import AdamState, adam_step
from .params import Group, parse_groups
from .schedules import NoamConfig, TriStageConfig, learning_rate, peak_lr
from .scoring import wer
from .ssl import MaskSpec, PseudoLabelCodebook, apc_batch_loss, contrastive_loss, masked_predict_loss
from .tensor import no_grad

log = logging.getLogger(__name__)

STAGES = ("pretrain", "adapt", "finetune")
OBJECTIVES = ("apc", "masked", "contrastive", "ctc")
HEAD_FOR = {"apc": "apc", "masked": "masked", "contrastive": "contrastive", "ctc": "asr"}
DRAFT_ADAPT_GROUPS = frozenset({Group.ADAPTER})


@dataclass
class StagePlan:
    stage: str
    corpus: Sequence[Utterance]
    objective: str
    trainable_groups: frozenset
    steps: int
    batch_size: int
    scheduler: NoamConfig | TriStageConfig
    seed: int = 0
    log_every: int = 10
    augment: bool = False
    mask: MaskSpec = MaskSpec()
    n_negatives: int = 10
    temperature: float = 0.1
    codebook: PseudoLabelCodebook | None = None
    corpus_name: str = ""

    def __post_init__(self):
        self.trainable_groups = parse_groups(self.trainable_groups)
        if self.stage not in STAGES:
            raise ConfigurationError(f"unknown stage {self.stage!r}; expected one of {STAGES}")
        if self.objective not in OBJECTIVES:
            raise ConfigurationError(f"unknown objective {self.objective!r}; expected one of {OBJECTIVES}")
        if self.stage == "finetune" and self.objective != "ctc":
            raise ConfigurationError("a finetune stage must use the CTC objective")
        if self.stage != "finetune" and self.objective == "ctc":
            raise ConfigurationError(f"a {self.stage} stage needs a self-supervised objective")
        if self.batch_size < 1:
            raise ConfigurationError("batch_size must be >= 1")

    def replace(self, **changes) -> "StagePlan":
        return dataclasses.replace(self, **changes)


@dataclass
class StageResult:
    stage: str
    metrics: list[tuple[int, float, float]]
    stats: dict = field(default_factory=dict)
    trained_params: int = 0
    checkpoint: Checkpoint | None = None


@dataclass
class RunReport:
    regime: str
    stages: list[StageResult]
    counters: dict[Group, int]
    notes: list[str] = field(default_factory=list)

    @property
    def checkpoints(self) -> list[Checkpoint]:
        return [s.checkpoint for s in self.stages if s.checkpoint is not None]

    def counter_labels(self) -> dict[str, int]:
        return {g.label: n for g, n in self.counters.items()}


# -- checkpoint <-> model ----------------------------------------------------
def model_checkpoint(model: AcousticModel, optimizer: AdamState | None = None,
                     rng_state: dict | None = None) -> Checkpoint:
    tensors = {n: (p.tensor.data.astype(np.float32, copy=True), p.group) for n, p in model.store.items()}
    cfg = dataclasses.asdict(model.config)
    cfg["apc_shifts"] = list(cfg["apc_shifts"])
    meta = {"config": cfg, "head": model.head_kind, "d_ada": model.d_ada}
    return Checkpoint(model.step, tensors, dict(model.update_counts), optimizer, rng_state, meta)


def restore_model(ckpt: Checkpoint, config: ModelConfig | None = None) -> AcousticModel:
    """Rebuild a model with exactly the checkpoint's tensors."""
    meta = ckpt.meta
    if config is None:
        if "config" not in meta:
            raise CheckpointContentError("checkpoint has no model config; pass one explicitly")
        cfg = dict(meta["config"])
        cfg["apc_shifts"] = tuple(cfg["apc_shifts"])
        config = ModelConfig(**cfg)
    head = meta.get("head") or ("asr" if "head.asr.bias" in ckpt.tensors else "apc")
    model = AcousticModel(config, head=head)
    if head == "asr":
        swap_head(model, "asr", vocab_size=int(ckpt.tensors["head.asr.bias"][0].shape[0]))
    if meta.get("d_ada") is not None:
        insert_adapters(model, int(meta["d_ada"]))
    load_into_model(ckpt, model)
    model.update_counts = {g: int(ckpt.counters.get(g, 0)) for g in Group}
    model.step = ckpt.step
    return model


def load_into_model(ckpt: Checkpoint, model: AcousticModel, groups: Iterable[Group] | None = None) -> None:
    """Copy checkpoint tensors into ``model``; every expected name must be present."""
    wanted = model.store.names(groups) if groups is not None else model.store.names()
    missing = [n for n in wanted if n not in ckpt.tensors]
    if missing:
        absent = sorted({model.store.entry(n).group.label for n in missing})
        raise MissingGroupError(
            f"checkpoint lacks {len(missing)} tensors (groups: {', '.join(absent)}): {', '.join(missing)}")
    for n in wanted:
        arr, group = ckpt.tensors[n]
        t = model.store[n]
        if arr.shape != t.shape:
            raise CheckpointContentError(f"tensor {n!r}: checkpoint shape {arr.shape}, model {t.shape}")
        t.data = arr.astype(t.data.dtype, copy=True)


# -- one stage -----------------------------------------------------------------
def _augment_batch(batch: Batch, rng) -> Batch:
    utts = []
    for i, uid in enumerate(batch.ids):
        feats = batch.features[i, :batch.feature_lengths[i]]
        feats = speed_perturb(feats, float(rng.choice(SPEED_FACTORS)))
        feats = spec_augment(feats, 2, 4, 2, 8, int(rng.integers(2**31)))
        utts.append(Utterance(uid, feats, list(batch.tokens[i, :batch.token_lengths[i]])))
    return collate(utts)


def stage_loss(model: AcousticModel, plan: StagePlan, batch: Batch, step: int, stats: dict):
    if plan.objective == "apc":
        return apc_batch_loss(model, batch)
    if plan.objective in ("masked", "contrastive"):
        mask = dataclasses.replace(plan.mask, seed=plan.mask.seed + 1_000_003 * plan.seed + step)
        if plan.objective == "masked":
            if plan.codebook is None:
                raise ConfigurationError("masked prediction needs a k-means codebook")
            return masked_predict_loss(model, batch, plan.codebook, mask)
        return contrastive_loss(model, batch, mask, plan.n_negatives, plan.temperature, stats)
    enc = model.encode(batch.features, batch.feature_lengths)
    lp = model.asr_log_probs(enc.hidden)
    return ctc_loss(lp, batch.tokens, enc.lengths, batch.token_lengths, skip_infeasible=True, stats=stats)


def run_stage(model: AcousticModel, plan: StagePlan, out_dir: str | Path | None = None,
              save: bool = True) -> tuple[AcousticModel, StageResult]:
    """Run ``plan.steps`` optimizer updates; only ``plan.trainable_groups`` may change."""
    if plan.steps < 1:
        raise ConfigurationError(f"stage {plan.stage!r} needs steps >= 1, got {plan.steps}")
    if model.head_kind != HEAD_FOR[plan.objective]:
        raise ConfigurationError(
            f"objective {plan.objective!r} needs a {HEAD_FOR[plan.objective]!r} head, model has {model.head_kind!r}")
    if not plan.corpus:
        raise ConfigurationError(f"stage {plan.stage!r} has an empty corpus")
    trained = plan.trainable_groups & model.store.groups_present()
    if not trained:
        raise ConfigurationError(f"none of the trainable groups {sorted(g.label for g in plan.trainable_groups)} exist")
    model.store.set_trainable(plan.trainable_groups)
    frozen = {n: p.tensor.data.tobytes() for n, p in model.store.items() if not p.trainable}
    adam = AdamState()
    rng = np.random.default_rng([plan.seed, 17])
    stats: dict = {}
    metrics: list[tuple[int, float, float]] = []
    metrics_fh = None
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        metrics_fh = open(Path(out_dir) / f"{plan.stage}.metrics.tsv", "w", encoding="utf-8")

    epoch, queue = 0, []
    try:
        for step in range(1, plan.steps + 1):
            if not queue:
                queue = make_batches(plan.corpus, plan.batch_size, seed=plan.seed * 100_003 + epoch)
                epoch += 1
            batch = queue.pop(0)
            if plan.augment:
                batch = _augment_batch(batch, rng)
            loss = stage_loss(model, plan, batch, step, stats)
            value = float(loss.item())
            if not math.isfinite(value):
                raise NaNLossError(
                    f"non-finite loss {value} in {plan.stage} stage at step {step}, batch ids {batch.ids}")
            loss.backward()
            lr = learning_rate(plan.scheduler, step)
            adam_step(model.store, adam, lr)
            model.store.zero_grad()
            if step % plan.log_every == 0 or step == plan.steps or step == 1:
                metrics.append((step, lr, value))
                if metrics_fh is not None:
                    metrics_fh.write(f"{step}\t{lr:.9g}\t{value:.9g}\n")
                    metrics_fh.flush()
    finally:
        if metrics_fh is not None:
            metrics_fh.close()

    for n, raw in frozen.items():
        if model.store[n].data.tobytes() != raw:
            raise StateError(f"frozen parameter {n!r} changed during the {plan.stage} stage")
    for g in trained:
        model.update_counts[g] += 1
    model.step += plan.steps
    model.store.set_trainable(())
    result = StageResult(plan.stage, metrics, stats, model.store.count(trained))
    result.checkpoint = model_checkpoint(model, adam, rng.bit_generator.state)
    if out_dir is not None and save:
        save_checkpoint(Path(out_dir) / f"{plan.stage}.ckpt", result.checkpoint)
    return model, result


# -- regimes ---------------------------------------------------------------------
def pretrain(config: ModelConfig, plan: StagePlan, seed: int = 0, out_dir=None) -> tuple[AcousticModel, StageResult]:
    _check_groups(plan, {Group.BACKBONE, Group.SSL_HEAD}, "pretraining")
    model = AcousticModel(config, head=HEAD_FOR[plan.objective], seed=seed)
    return run_stage(model, plan, out_dir)


def _check_groups(plan: StagePlan, expected, what: str) -> None:
    if plan.trainable_groups != frozenset(expected):
        raise ConfigurationError(
            f"{what} must train exactly {sorted(g.label for g in expected)}, "
            f"plan has {sorted(g.label for g in plan.trainable_groups)}")


def _start(config, pretrain_plan, pretrained, seed, out_dir, stages):
    if pretrained is None:
        model, res = pretrain(config, pretrain_plan, seed, out_dir)
        stages.append(res)
        return model
    if isinstance(pretrained, AcousticModel):
        return pretrained.clone()
    return restore_model(pretrained, config)


def _finetune(model: AcousticModel, plan: StagePlan, out_dir, stages, vocab_size: int | None = None):
    swap_head(model, "asr", vocab_size=vocab_size or model.config.vocab_size, seed=plan.seed)
    model, res = run_stage(model, plan, out_dir)
    stages.append(res)
    return model


def run_draft(pretrain_plan: StagePlan | None, adapt_plan: StagePlan, finetune_plan: StagePlan, d_ada: int,
              config: ModelConfig | None = None, seed: int = 0, pretrained=None, out_dir=None,
              allow_objective_mismatch: bool = False) -> tuple[AcousticModel, RunReport]:
    """Pretrain on the source, adapt only the adapters on the target, finetune everything with CTC.

    ``pretrained`` (a model or checkpoint) replaces stage 1 when given.
    """
    config = config or ModelConfig()
    pre_obj = pretrain_plan.objective if pretrain_plan is not None else _head_objective(pretrained)
    if adapt_plan.objective != pre_obj:
        msg = f"adaptation objective {adapt_plan.objective!r} differs from pretraining objective {pre_obj!r}"
        if not allow_objective_mismatch:
            raise ConfigurationError(msg)
        warnings.warn(msg)
    _check_groups(adapt_plan, DRAFT_ADAPT_GROUPS, "DRAFT adaptation")
    if Group.ASR_HEAD not in finetune_plan.trainable_groups:
        raise ConfigurationError("the finetune stage must train the AsrHead group")
    stages: list[StageResult] = []
    model = _start(config, pretrain_plan, pretrained, seed, out_dir, stages)
    model, res = adapt_with_adapters(model, adapt_plan, d_ada, out_dir)
    stages.append(res)
    model = _finetune(model, finetune_plan, out_dir, stages)
    return model, RunReport("draft", stages, dict(model.update_counts))


def adapt_with_adapters(model: AcousticModel, adapt_plan: StagePlan, d_ada: int,
                        out_dir=None) -> tuple[AcousticModel, StageResult]:
    """DRAFT stage 2: insert zero-output adapters and train only them."""
    _check_groups(adapt_plan, DRAFT_ADAPT_GROUPS, "DRAFT adaptation")
    insert_adapters(model, d_ada, seed=adapt_plan.seed)
    return run_stage(model, adapt_plan, out_dir)


def _head_objective(pretrained) -> str:
    if pretrained is None:
        raise ConfigurationError("either a pretraining plan or a pretrained model is required")
    head = pretrained.head_kind if isinstance(pretrained, AcousticModel) else pretrained.meta.get("head")
    return {v: k for k, v in HEAD_FOR.items()}[head]


def run_saft(pretrain_plan: StagePlan | None, adapt_plan: StagePlan | None, finetune_plan: StagePlan,
             config: ModelConfig | None = None, seed: int = 0, pretrained=None,
             out_dir=None) -> tuple[AcousticModel, RunReport]:
    """Like DRAFT without adapters: adaptation updates Backbone and SslHead."""
    config = config or ModelConfig()
    notes = ["adaptation restarts the optimizer state and scheduler"]
    stages: list[StageResult] = []
    model = _start(config, pretrain_plan, pretrained, seed, out_dir, stages)
    if adapt_plan is not None and adapt_plan.steps > 0:
        _check_groups(adapt_plan, {Group.BACKBONE, Group.SSL_HEAD}, "SAFT adaptation")
        if pretrain_plan is not None and peak_lr(adapt_plan.scheduler) >= peak_lr(pretrain_plan.scheduler):
            msg = (f"SAFT adaptation peak lr {peak_lr(adapt_plan.scheduler):.3g} is not below "
                   f"the pretraining peak {peak_lr(pretrain_plan.scheduler):.3g}")
            warnings.warn(msg)
            notes.append(msg)
        model, res = run_stage(model, adapt_plan, out_dir)
        stages.append(res)
    model = _finetune(model, finetune_plan, out_dir, stages)
    return model, RunReport("saft", stages, dict(model.update_counts), notes)


def run_finetune_only(pretrain_plan: StagePlan | None, finetune_plan: StagePlan, config: ModelConfig | None = None,
                      seed: int = 0, pretrained=None, out_dir=None) -> tuple[AcousticModel, RunReport]:
    config = config or ModelConfig()
    stages: list[StageResult] = []
    model = _start(config, pretrain_plan, pretrained, seed, out_dir, stages)
    model = _finetune(model, finetune_plan, out_dir, stages)
    return model, RunReport("finetune", stages, dict(model.update_counts))


def run_baseline(finetune_plan: StagePlan, config: ModelConfig | None = None, seed: int = 0,
                 out_dir=None) -> tuple[AcousticModel, RunReport]:
    """CTC training from random initialisation (no self-supervised stage)."""
    config = config or ModelConfig()
    model = AcousticModel(config, head="asr", seed=seed)
    swap_head(model, "asr", vocab_size=config.vocab_size, seed=finetune_plan.seed)
    model, res = run_stage(model, finetune_plan, out_dir)
    return model, RunReport("baseline", [res], dict(model.update_counts))


def run_adapter_finetune(pretrained_ckpt, d_ada: int, finetune_plan: StagePlan,
                         config: ModelConfig | None = None, out_dir=None) -> tuple[AcousticModel, RunReport]:
    """Insert adapters into a pretrained model and finetune only adapters and the ASR head."""
    _check_groups(finetune_plan, {Group.ADAPTER, Group.ASR_HEAD}, "adapter finetuning")
    model = pretrained_ckpt.clone() if isinstance(pretrained_ckpt, AcousticModel) \
        else restore_model(pretrained_ckpt, config)
    insert_adapters(model, d_ada, seed=finetune_plan.seed)
    stages: list[StageResult] = []
    model = _finetune(model, finetune_plan, out_dir, stages)
    return model, RunReport("adapter_finetune", stages, dict(model.update_counts))


def cross_transfer(adapted_ckpt, finetune_plan: StagePlan, config: ModelConfig | None = None,
                   out_dir=None) -> tuple[AcousticModel, RunReport]:
    """Finetune on a new corpus starting from another corpus's adapted model."""
    if isinstance(adapted_ckpt, AcousticModel):
        adapted_ckpt = model_checkpoint(adapted_ckpt)
    if not adapted_ckpt.names(Group.ADAPTER):
        raise CheckpointContentError("checkpoint has no Adapter-group tensors to transfer")
    model = restore_model(adapted_ckpt, config)
    stages: list[StageResult] = []
    model = _finetune(model, finetune_plan, out_dir, stages)
    return model, RunReport("cross_transfer", stages, dict(model.update_counts))


def recover_pretrained(model: AcousticModel) -> AcousticModel:
    """The pre-adaptation model: the adapted model with its adapters deleted."""
    return remove_adapters(model.clone())


# -- evaluation --------------------------------------------------------------------
def decode(model: AcousticModel, utts: Sequence[Utterance], batch_size: int = 32) -> list[list[int]]:
    hyps: dict[str, list[int]] = {}
    with no_grad():
        for start in range(0, len(utts), batch_size):
            batch = collate(utts[start:start + batch_size])
            enc = model.encode(batch.features, batch.feature_lengths)
            lp = model.asr_log_probs(enc.hidden).data
            for i, uid in enumerate(batch.ids):
                hyps[uid] = ctc_greedy_decode(lp[i], int(enc.lengths[i]))
    return [hyps[u.id] for u in utts]


def error_rate(model: AcousticModel, utts: Sequence[Utterance], batch_size: int = 32) -> float:
    hyps = decode(model, utts, batch_size)
    return wer([u.transcript for u in utts], hyps)
