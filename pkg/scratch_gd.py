import sys
import numpy as np

from crossfit import autodiff as ad
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.synthdata import ArrayDataset, GenConfig, generate_dataset
from crossfit.train_eval import TrainConfig, sgd_momentum_step

ad.set_default_dtype(np.float32)

lr = float(sys.argv[1]) if len(sys.argv) > 1 else 0.5
mu = float(sys.argv[2]) if len(sys.argv) > 2 else 0.0

ds = ArrayDataset.from_samples(generate_dataset(0, 16, GenConfig()))
cfg = CrossFiTConfig(encoder=EncoderConfig(), cfa=CfaConfig(), strategy="single_field_1")
model = CrossFiTModel(ad.make_rng(0), cfg)
params = model.named_parameters()
vel = {k: np.zeros_like(p.data) for k, p in params.items()}
tcfg = TrainConfig(lr=lr, momentum=mu, weight_decay=0.0, epochs=1)
for it in range(80):
    loss = model.loss_batch(ds.images1, ds.images2, ds.od1, ds.od2, ds.grades)
    if it % 8 == 0 or it == 79:
        print(it, f"{loss.item():.4f}")
    ad.backward(loss)
    sgd_momentum_step(params, vel, tcfg)
    for p in params.values():
        p.grad = None
