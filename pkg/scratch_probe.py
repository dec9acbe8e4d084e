"""Probe: frozen recipe on the zone-fixed generator, splitacc trajectory."""
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

seed = int(sys.argv[1]) if len(sys.argv) > 1 else 1
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 135

full = sd.ArrayDataset.from_samples(sd.generate_dataset(11, 1000))
train_set, test_set = full.train_test_split(0.8)
sm = test_set.split_evidence.astype(bool)
print(f"train {len(train_set)} test {len(test_set)} split-test {sm.sum()}", flush=True)

variant = sys.argv[4] if len(sys.argv) > 4 else "p16"
if variant == "p16":
    enc = EncoderConfig(stage_channels=(384,), stride=16, kernel=16)
elif variant == "two96":
    enc = EncoderConfig(stage_channels=(96, 256), stride=(8, 2), kernel=(8, 3))
elif variant == "two64":
    enc = EncoderConfig(stage_channels=(64, 256), stride=(8, 2), kernel=(8, 3))
elif variant == "two96w":
    enc = EncoderConfig(stage_channels=(96, 384), stride=(8, 2), kernel=(8, 3))
else:
    raise SystemExit(f"unknown variant {variant}")
print("encoder:", enc, flush=True)
cfa = CfaConfig(layers=3, heads=4, d_t=64, mlp_ratio=4, threshold=0.06,
                zero_init_out=True)
row = sys.argv[5] if len(sys.argv) > 5 else "full"
rows = {
    "full": dict(strategy="crossfit", pe_mode="aligned", mask_enabled=True),
    "ape": dict(strategy="crossfit", pe_mode="aligned", mask_enabled=False),
    "cfa": dict(strategy="crossfit", pe_mode="regular", mask_enabled=False),
    "featmax": dict(strategy="feat_max", pe_mode="regular", mask_enabled=False),
    "sf1": dict(strategy="single_field_1", pe_mode="regular", mask_enabled=False),
}
cfg = CrossFiTConfig(encoder=enc, cfa=cfa, **rows[row])
model = CrossFiTModel(ad.make_rng(seed), cfg)
tcfg = te.TrainConfig(epochs=epochs, batch_size=32, lr=float(sys.argv[3]) if len(sys.argv) > 3 else 0.01, momentum=0.9,
                      weight_decay=1e-4, seed=seed, hflip=True)

t0 = time.time()

def cb(ep, entry):
    if ep % 5 == 0 or ep == epochs - 1:
        rep = te.evaluate(model, test_set)
        pred_ok = rep.accuracy
        conf = np.asarray(rep.confusion)
        srep = te.evaluate(model, test_set.subset(np.where(sm)[0]))
        print(f"ep {ep:3d} loss {entry:.4f} acc {pred_ok:.3f} "
              f"kappa {rep.kappa:+.3f} splitacc {srep.accuracy:.3f} "
              f"({time.time()-t0:.0f}s)", flush=True)
        if ep >= 100 and ep % 15 == 0:
            print("  split confusion:", np.asarray(srep.confusion).tolist(), flush=True)
    else:
        print(f"ep {ep:3d} loss {entry:.4f}", flush=True)

ckpt, hist = te.train(model, train_set, tcfg, on_epoch=cb)
print("phase 2: batch 96", flush=True)
t2cfg = te.TrainConfig(epochs=25, batch_size=96, lr=tcfg.lr, momentum=0.9,
                       weight_decay=1e-4, seed=seed + 1000, hflip=True)

def cb2(ep, entry):
    rep = te.evaluate(model, test_set)
    srep = te.evaluate(model, test_set.subset(np.where(sm)[0]))
    print(f"p2 ep {ep:3d} loss {entry:.4f} acc {rep.accuracy:.3f} "
          f"kappa {rep.kappa:+.3f} splitacc {srep.accuracy:.3f} "
          f"({time.time()-t0:.0f}s)", flush=True)
    if ep == 24:
        print("  split confusion:", np.asarray(srep.confusion).tolist(), flush=True)

ckpt, hist2 = te.train(model, train_set, t2cfg, on_epoch=cb2)
print(f"total {time.time()-t0:.0f}s", flush=True)
