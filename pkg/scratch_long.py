import sys
import time
import numpy as np

from crossfit import autodiff as ad
from crossfit.attention import CfaConfig
from crossfit.encoder import EncoderConfig
from crossfit.model import CrossFiTConfig, CrossFiTModel
from crossfit.synthdata import ArrayDataset, GenConfig, generate_dataset
from crossfit.train_eval import TrainConfig, TrainingDiverged, train, evaluate

ad.set_default_dtype(np.float32)
ds = ArrayDataset.from_samples(generate_dataset(0, 400, GenConfig()))
tr, te = ds.train_test_split(0.8)
sub = te.subset(te.split_evidence)
print(f"train {len(tr)} test {len(te)} split-sub {len(sub)}", flush=True)


def run(tag, strategy, pe, zi, lr, blocks=16, per=10):
    cfg = CrossFiTConfig(encoder=EncoderConfig(),
                         cfa=CfaConfig(zero_init_out=zi),
                         strategy=strategy, pe_mode=pe)
    model = CrossFiTModel(ad.make_rng(1235), cfg)
    t0 = time.time()
    for b in range(blocks):
        try:
            with np.errstate(all="ignore"):
                ckpt, hist = train(model, tr, TrainConfig(
                    lr=lr, momentum=0.9, weight_decay=1e-4,
                    epochs=per, seed=b, batch_size=16))
        except TrainingDiverged as e:
            print(f"{tag} DIVERGED at block {b}: {e}", flush=True)
            return
        rep = evaluate(model, te)
        srep = evaluate(model, sub)
        print(f"{tag} ep{(b+1)*per:3d} loss {hist[-1]:.3f} kappa {rep.kappa:+.3f} "
              f"acc {rep.accuracy:.3f} splitacc {srep.accuracy:.3f} "
              f"({time.time()-t0:.0f}s)", flush=True)


which = sys.argv[1]
if which == "cf_zi":
    run("cf-zi1", "crossfit", "aligned", True, 0.01)
elif which == "cf_raw":
    run("cf-zi0", "crossfit", "aligned", False, 0.005)
elif which == "base":
    run("sf1", "single_field_1", "none", False, 0.01)
    run("fmax", "feat_max", "none", False, 0.01)
