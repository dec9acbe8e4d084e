import sys
import time
import numpy as np

from crossfit import autodiff as ad
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.synthdata import ArrayDataset, GenConfig, generate_dataset
from crossfit.train_eval import TrainConfig, evaluate, train

ad.set_default_dtype(np.float32)

strategy = sys.argv[1] if len(sys.argv) > 1 else "single_field_1"
lr = float(sys.argv[2]) if len(sys.argv) > 2 else 0.05
epochs = int(sys.argv[3]) if len(sys.argv) > 3 else 25
n = int(sys.argv[4]) if len(sys.argv) > 4 else 64

ds = ArrayDataset.from_samples(generate_dataset(0, n, GenConfig()))
cfg = CrossFiTConfig(encoder=EncoderConfig(), cfa=CfaConfig(), strategy=strategy)
model = CrossFiTModel(ad.make_rng(0), cfg)
t0 = time.time()
ckpt, hist = train(model, ds, TrainConfig(lr=lr, epochs=epochs, seed=0, batch_size=16))
rep = evaluate(model, ds)
print(f"{strategy} lr={lr} {time.time()-t0:.0f}s")
print("loss:", " ".join(f"{h:.3f}" for h in hist))
print(f"train kappa {rep.kappa:.3f} acc {rep.accuracy:.3f}")
