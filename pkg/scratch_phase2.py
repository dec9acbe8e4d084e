"""Phase-2 variant comparison from a shared phase-1 checkpoint."""
import os
import sys
import time
import numpy as np

sys.path.insert(0, "src")
import crossfit.autodiff as ad
import crossfit.synthdata as sd
from crossfit.encoder import EncoderConfig
from crossfit.attention import CfaConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
import crossfit.train_eval as te

ad.set_default_dtype("float32")
seed = 1
full = sd.ArrayDataset.from_samples(sd.generate_dataset(11, 1000))
train_set, test_set = full.train_test_split(0.8)
sm = test_set.split_evidence.astype(bool)
split_set = test_set.subset(np.where(sm)[0])

CKPT = f"/tmp/ph1_seed{seed}.ckpt"
enc = EncoderConfig(stage_channels=(384,), stride=16, kernel=16)
cfa = CfaConfig(layers=3, heads=4, d_t=64, mlp_ratio=4, threshold=0.06,
                zero_init_out=True)
cfg = CrossFiTConfig(encoder=enc, cfa=cfa, strategy="crossfit",
                     pe_mode="aligned", mask_enabled=True)

if not os.path.exists(CKPT):
    model = CrossFiTModel(ad.make_rng(seed), cfg)
    tcfg = te.TrainConfig(epochs=100, batch_size=32, lr=0.008, momentum=0.9,
                          weight_decay=1e-4, seed=seed, hflip=True)
    t0 = time.time()
    ckpt, _ = te.train(model, train_set, tcfg)
    te.save_checkpoint(ckpt, CKPT)
    rep = te.evaluate(model, test_set)
    srep = te.evaluate(model, split_set)
    print(f"phase1 done {time.time()-t0:.0f}s acc {rep.accuracy:.3f} "
          f"kappa {rep.kappa:+.3f} splitacc {srep.accuracy:.3f}", flush=True)

variants = [
    ("bs96-flip", dict(batch_size=96, hflip=True, weight_decay=1e-4)),
    ("bs96-noflip", dict(batch_size=96, hflip=False, weight_decay=1e-4)),
    ("bs128-noflip", dict(batch_size=128, hflip=False, weight_decay=1e-4)),
    ("bs96-noflip-wd5e5", dict(batch_size=96, hflip=False, weight_decay=5e-5)),
]
for name, kw in variants:
    ck = te.load_checkpoint(CKPT)
    model = te.build_model_from_checkpoint(ck)
    t2 = te.TrainConfig(epochs=25, lr=0.008, momentum=0.9, seed=seed + 1000, **kw)
    t0 = time.time()
    accs = []

    def cb(ep, entry, model=model, accs=accs):
        if ep >= 15:
            srep = te.evaluate(model, split_set)
            accs.append(srep.accuracy)

    te.train(model, train_set, t2, on_epoch=cb)
    rep = te.evaluate(model, test_set)
    srep = te.evaluate(model, split_set)
    tail = np.array(accs)
    print(f"{name:20s} final splitacc {srep.accuracy:.3f} kappa {rep.kappa:+.3f} "
          f"acc {rep.accuracy:.3f} | ep15+ mean {tail.mean():.3f} min {tail.min():.3f} "
          f"({time.time()-t0:.0f}s)", flush=True)
