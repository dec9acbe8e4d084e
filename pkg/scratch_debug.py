import numpy as np

from crossfit import autodiff as ad
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.synthdata import ArrayDataset, GenConfig, generate_dataset
from crossfit.train_eval import TrainConfig, train

ad.set_default_dtype(np.float32)

ds = ArrayDataset.from_samples(generate_dataset(0, 64, GenConfig()))
cfg = CrossFiTConfig(encoder=EncoderConfig(), cfa=CfaConfig(), strategy="single_field_1")
model = CrossFiTModel(ad.make_rng(0), cfg)

batch = ds.subset(np.arange(16))
loss = model.loss_batch(batch.images1, batch.images2, batch.od1, batch.od2, batch.grades)
print("loss", float(loss.data))
ad.backward(loss)
for name, p in model.parameters():
    g = 0.0 if p.grad is None else float(np.abs(p.grad).max())
    w = float(np.abs(p.data).max())
    print(f"{name:22s} |w|max {w:10.4f}  |g|max {g:12.8f}")

# feature scale through the stages
feats, _ = model._encode_fields(batch.images1[:4], batch.images2[:4])
print("feat absmax", float(np.abs(feats[0].data).max()),
      "mean", float(np.abs(feats[0].data).mean()))
