import time
import numpy as np

from crossfit import autodiff as ad
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.synthdata import ArrayDataset, GenConfig, generate_dataset
from crossfit.train_eval import TrainConfig, evaluate, train

t0 = time.time()
samples = generate_dataset(0, 400, GenConfig())
ds = ArrayDataset.from_samples(samples)
tr, te = ds.train_test_split(0.8)
print(f"gen 400 eyes: {time.time()-t0:.1f}s  grades {np.bincount(ds.grades)}  split {ds.split_evidence.sum()}")

ad.set_default_dtype(np.float32)


def run(strategy, seed, epochs=8, lr=0.005):
    cfg = CrossFiTConfig(
        encoder=EncoderConfig(), cfa=CfaConfig(), strategy=strategy)
    rng = ad.make_rng(1234 + seed)
    model = CrossFiTModel(rng, cfg)
    tcfg = TrainConfig(lr=lr, epochs=epochs, seed=seed, batch_size=16)
    t0 = time.time()
    ckpt, hist = train(model, tr, tcfg)
    dt = time.time() - t0
    rep = evaluate(model, te)
    sub = te.subset(te.split_evidence)
    srep = evaluate(model, sub) if len(sub) else None
    print(f"{strategy:16s} seed{seed} {dt:6.1f}s loss {hist[0]:.3f}->{hist[-1]:.3f} "
          f"kappa {rep.kappa:.3f} acc {rep.accuracy:.3f} "
          f"split-acc {srep.accuracy if srep else float('nan'):.3f}")
    return rep, srep


run("crossfit", 1)
run("single_field_1", 1)
run("feat_max", 1)
