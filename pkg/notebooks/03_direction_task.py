"""
Left or right?
==============

A mean-pooled per-frame stem cannot tell a clip from its reversal, so on the
direction task it sits at chance. One ATM in the middle of the stem fixes that.
Takes a few minutes on one core.
"""
# %%
from atm import AtmConfig, DatasetConfig, StemConfig, TrainConfig, train
from atm.harness import make_data

recipe = dict(epochs=5, batch_size=16, lr=0.1, momentum=0.9, clip_norm=1.0,
              stem=StemConfig(atm_site=2), dataset=DatasetConfig(task="direction2"))
data = make_data(TrainConfig(**recipe))

# %%
blind, _ = train(TrainConfig(**recipe), data)
print("mean-pool baseline", blind.test_top1)

# %%
atm = AtmConfig(ops=("-",), context=4, mul=3, width=8)
report, model = train(TrainConfig(**recipe, atm=atm), data)
print("with ATM(-)", report.test_top1)
print("loss per epoch", [round(e["train_loss"], 3) for e in report.epochs])
print("MACs", report.macs)
