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

def run(tag, wd, epochs=165, seed=1, bs=32):
    enc = EncoderConfig(stage_channels=(384,), stride=16, kernel=15)
    mc = CrossFiTConfig(strategy="crossfit", encoder=enc,
                        cfa=CfaConfig(zero_init_out=True))
    model = CrossFiTModel(ad.make_rng(seed), mc)
    t0 = time.time()
    for ep in range(0, epochs, 15):
        ckpt, hist = train(model, tr, TrainConfig(epochs=15, lr=0.01, momentum=0.9,
                                                  weight_decay=wd, batch_size=bs,
                                                  seed=1000 * seed + ep))
        m = evaluate(model, te)
        ms = evaluate(model, te.subset(sub))
        print(f"{tag} ep{ep+15:3d} loss {hist[-1]:.3f} kappa {m.kappa:+.3f} "
              f"acc {m.accuracy:.3f} splitacc {ms.accuracy:.3f} ({time.time()-t0:.0f}s)",
              flush=True)

run(sys.argv[1], float(sys.argv[2]), seed=int(sys.argv[3]) if len(sys.argv) > 3 else 1)
