import sys
import time
import numpy as np
from crossfit import autodiff as ad
from crossfit.encoder import EncoderConfig
from crossfit.attention import CfaConfig
from crossfit.model import CrossFiTModel, CrossFiTConfig
from crossfit.train_eval import TrainConfig, train, evaluate
import crossfit.synthdata as sd

ad.set_default_dtype(np.float32)
data = sd.ArrayDataset.from_samples(sd.generate_dataset(11, 1000))
tr, te = data.train_test_split(0.8)
sub = [i for i in range(len(te)) if te.split_evidence[i]]

def run(tag, enc_cfg, epochs, lr, mu, bs=16, seed=1):
    mc = CrossFiTConfig(strategy="crossfit", encoder=enc_cfg,
                        cfa=CfaConfig(zero_init_out=True))
    model = CrossFiTModel(ad.make_rng(seed), mc)
    t0 = time.time()
    for ep in range(0, epochs, 15):
        ckpt, hist = train(model, tr, TrainConfig(epochs=15, lr=lr, momentum=mu,
                                                  weight_decay=1e-4, batch_size=bs,
                                                  seed=1000 * seed + ep))
        m = evaluate(model, te)
        ms = evaluate(model, te.subset(sub))
        print(f"{tag} ep{ep+15:3d} loss {hist[-1]:.3f} kappa {m.kappa:+.3f} "
              f"acc {m.accuracy:.3f} splitacc {ms.accuracy:.3f} ({time.time()-t0:.0f}s)",
              flush=True)

which = sys.argv[1]
p192 = EncoderConfig(stage_channels=(192,), stride=16, kernel=15)
p384 = EncoderConfig(stage_channels=(384,), stride=16, kernel=15)
if which == "mu95":
    run("mu95", p192, 135, 0.01, 0.95)
elif which == "d384":
    run("d384", p384, 135, 0.01, 0.9)
elif which == "bs8":
    run("bs8", p192, 135, 0.01, 0.9, bs=8)

if which == "d384b32":
    run("d384b32", p384, 150, 0.01, 0.9, bs=32)
elif which == "d256":
    run("d256", EncoderConfig(stage_channels=(256,), stride=16, kernel=15), 150, 0.01, 0.9)
