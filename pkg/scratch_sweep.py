import sys
import time
import numpy as np

from crossfit import autodiff as ad
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.synthdata import ArrayDataset, GenConfig, generate_dataset
from crossfit.train_eval import TrainConfig, TrainingDiverged, evaluate, train

ad.set_default_dtype(np.float32)

samples = generate_dataset(0, 400, GenConfig())
ds = ArrayDataset.from_samples(samples)
tr, te = ds.train_test_split(0.8)
sub = te.subset(te.split_evidence)
print(f"test n={len(te)} split n={len(sub)}")


def run(strategy, lr, epochs, seed=1, zero_init=False, wd=1e-4):
    cfg = CrossFiTConfig(encoder=EncoderConfig(),
                         cfa=CfaConfig(zero_init_out=zero_init),
                         strategy=strategy)
    model = CrossFiTModel(ad.make_rng(1234 + seed), cfg)
    tcfg = TrainConfig(lr=lr, momentum=0.9, weight_decay=wd,
                       epochs=epochs, seed=seed, batch_size=16)
    t0 = time.time()
    try:
        with np.errstate(all="ignore"):
            ckpt, hist = train(model, tr, tcfg)
    except TrainingDiverged as err:
        print(f"{strategy:15s} lr={lr:<6} DIVERGED ({err})")
        return
    dt = time.time() - t0
    rep = evaluate(model, te)
    srep = evaluate(model, sub)
    print(f"{strategy:15s} lr={lr:<6} ep={epochs} zi={int(zero_init)} {dt:5.0f}s "
          f"loss {hist[0]:.2f}->{hist[-1]:.3f} kappa {rep.kappa:+.3f} "
          f"acc {rep.accuracy:.3f} splitacc {srep.accuracy:.3f}")


mode = sys.argv[1] if len(sys.argv) > 1 else "baseline"
if mode == "baseline":
    for lr in (0.15,):
        run("single_field_1", lr, 60)
elif mode == "crossfit":
    for lr, zi in ((0.01, False), (0.03, False), (0.03, True), (0.1, True)):
        run("crossfit", lr, 15, zero_init=zi)
elif mode == "featmax":
    for lr in (0.15, 0.4):
        run("feat_max", lr, 15)
