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
print("train", len(tr), "test", len(te), "split-sub", len(sub), flush=True)


def run(tag, enc_cfg, epochs, lr, bs=16, seed=1):
    mc = CrossFiTConfig(strategy="crossfit", encoder=enc_cfg,
                        cfa=CfaConfig(zero_init_out=True))
    model = CrossFiTModel(ad.make_rng(seed), mc)
    t0 = time.time()
    for ep in range(0, epochs, 10):
        ckpt, hist = train(model, tr, TrainConfig(epochs=10, lr=lr, momentum=0.9,
                                                  weight_decay=1e-4, batch_size=bs,
                                                  seed=1000 * seed + ep))
        m = evaluate(model, te)
        ms = evaluate(model, te.subset(sub))
        print(f"{tag} ep{ep+10:3d} loss {hist[-1]:.3f} kappa {m.kappa:+.3f} "
              f"acc {m.accuracy:.3f} splitacc {ms.accuracy:.3f} "
              f"({time.time()-t0:.0f}s)", flush=True)


which = sys.argv[1] if len(sys.argv) > 1 else "p320"
if which == "p320":
    run("p192", EncoderConfig(stage_channels=(192,), stride=16, kernel=15), 320, 0.01)
elif which == "p320b32":
    run("p192b32", EncoderConfig(stage_channels=(192,), stride=16, kernel=15), 320, 0.01, bs=32)
