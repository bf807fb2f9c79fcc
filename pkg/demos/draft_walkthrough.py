"""The three DRAFT stages on the synthetic two-domain task, step by step.

1. Pretrain backbone + APC head on the source domain.
2. Insert zero-initialised adapters and train only them on the target
   domain with the same APC loss.
3. Swap in a CTC head and finetune backbone, adapters and head on a few
   labelled target utterances.

Along the way we check that stage 2 left the pretrained weights untouched.
"""

from draftlab.data import collate, synth_generate, two_domain_specs
from draftlab.model import desk_preset, swap_head
from draftlab.params import Group
from draftlab.schedules import NoamConfig, TriStageConfig
from draftlab.ssl import apc_batch_loss
from draftlab.stages import StagePlan, adapt_with_adapters, error_rate, pretrain, run_stage

source_spec, target_spec = two_domain_specs(seed=0)
source = synth_generate(source_spec, 200, prefix="src")
target = synth_generate(target_spec, 120, prefix="tgt")
labelled, test = target[:16], target[16:]
config = desk_preset()

pre = StagePlan("pretrain", source, "apc", frozenset({Group.BACKBONE, Group.SSL_HEAD}), 300, 8,
                NoamConfig(1.0, 50, config.d_model))
model, _ = pretrain(config, pre)
probe = collate(target[:8])
print(f"APC loss on target after pretraining: {float(apc_batch_loss(model, probe).data):.4f}")

backbone = {n: model.store[n].data.copy() for n in model.store.names([Group.BACKBONE])}
adapt = StagePlan("adapt", target, "apc", frozenset({Group.ADAPTER}), 150, 8, NoamConfig(1.0, 20, config.d_model),
                  seed=1)
model, _ = adapt_with_adapters(model, adapt, d_ada=32)
print(f"APC loss on target after adapter training: {float(apc_batch_loss(model, probe).data):.4f}")
unchanged = all((model.store[n].data == v).all() for n, v in backbone.items())
print(f"backbone unchanged by adaptation: {unchanged}")

swap_head(model, "asr", vocab_size=config.vocab_size)
ft = StagePlan("finetune", labelled, "ctc", frozenset({Group.BACKBONE, Group.ADAPTER, Group.ASR_HEAD}), 200, 8,
               TriStageConfig(20, 80, 200, 1e-3, 0.05), seed=2)
run_stage(model, ft)
print(f"token error rate on held-out target utterances: {error_rate(model, test):.3f}")
print("update counters:", {g.label: n for g, n in model.update_counts.items()})
