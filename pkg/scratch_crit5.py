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
sub_idx = [i for i in range(len(te)) if te.split_evidence[i]]
sub = te.subset(sub_idx)
print("split-sub", len(sub_idx), flush=True)

enc = EncoderConfig(stage_channels=(384,), stride=16, kernel=15)

t_all = time.time()
split_accs = {}
for strategy, epochs in (("crossfit", 165), ("single_field_1", 40)):
    accs = []
    for seed in (1, 2, 3):
        mc = CrossFiTConfig(strategy=strategy, encoder=enc,
                            cfa=CfaConfig(zero_init_out=True))
        model = CrossFiTModel(ad.make_rng(seed), mc)
        t0 = time.time()
        train(model, tr, TrainConfig(epochs=epochs, lr=0.01, momentum=0.9,
                                     weight_decay=1e-4, batch_size=32, seed=seed))
        m = evaluate(model, te)
        ms = evaluate(model, sub)
        accs.append(ms.accuracy)
        print(f"{strategy} seed{seed} kappa {m.kappa:+.3f} acc {m.accuracy:.3f} "
              f"splitacc {ms.accuracy:.3f} ({time.time()-t0:.0f}s)", flush=True)
    split_accs[strategy] = float(np.mean(accs))
    print(f"{strategy} MEAN splitacc {split_accs[strategy]:.3f}", flush=True)
print(f"TOTAL {time.time()-t_all:.0f}s", flush=True)
