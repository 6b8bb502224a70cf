import sys, time
sys.path.insert(0, "src")
import numpy as np
from hdrmask.losses import FeatureExtractor
from hdrmask.network import UNetConfig
from hdrmask.sampler import SamplerConfig, sample_patches
from hdrmask.synthetic import make_hdr_corpus, make_texture_corpus
from hdrmask.training import TrainConfig, run_ablation, loss_drop

t0 = time.time()
tex = make_texture_corpus(32, seed=11, size=(64, 64))
scfg = SamplerConfig(patch_size=64, patches_per_image=8)
train_records, test_records = [], []
for i, s in enumerate(make_hdr_corpus(14, seed=21, size=(96, 96))):
    train_records.extend(sample_patches(s, scfg, seed=100 + i, image_id=f"train{i}"))
for i, s in enumerate(make_hdr_corpus(8, seed=77, size=(96, 96))):
    test_records.extend(sample_patches(s, scfg, seed=900 + i, image_id=f"test{i}"))
print(f"{len(tex)} textures, {len(train_records)} train, {len(test_records)} test ({time.time()-t0:.0f}s)", flush=True)
results = run_ablation(tex, train_records, test_records, seeds=(0,),
    unet_config=UNetConfig(), extractor=FeatureExtractor(),
    pretrain_steps=240, finetune_steps=240,
    base_config=TrainConfig(batch_size=4, steps_per_epoch=40, max_val_items=8))
print(f"total {time.time()-t0:.0f}s")
for key, res in sorted(results.items()):
    drops = (loss_drop(res["pretrain_log"]) if res["pretrain_log"] else None, loss_drop(res["finetune_log"]))
    print(key, "test_mse=%.5f" % res["test_masked_mse"], "drops=", [None if d is None else round(d,3) for d in drops], flush=True)
