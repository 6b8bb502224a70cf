import sys, time
sys.path.insert(0, "src")
import numpy as np
from dataclasses import replace
from hdrmask.losses import FeatureExtractor
from hdrmask.network import UNetConfig
from hdrmask.sampler import SamplerConfig, sample_patches
from hdrmask.synthetic import make_hdr_corpus, make_texture_corpus
from hdrmask.training import TrainConfig, train_inpainting, finetune_hdr, validation_mse, loss_drop

t0 = time.time()
tex = make_texture_corpus(32, seed=11, size=(64, 64))
scfg = SamplerConfig(patch_size=64, patches_per_image=8)
train_records, test_records = [], []
for i, s in enumerate(make_hdr_corpus(14, seed=21, size=(96, 96))):
    train_records.extend(sample_patches(s, scfg, seed=100 + i, image_id=f"train{i}"))
for i, s in enumerate(make_hdr_corpus(8, seed=77, size=(96, 96))):
    test_records.extend(sample_patches(s, scfg, seed=900 + i, image_id=f"test{i}"))
ucfg = UNetConfig(); ex = FeatureExtractor()
print(f"{len(train_records)} train, {len(test_records)} test", flush=True)
for mode in ("FMask", "IMask"):
    cfg = TrainConfig(seed=0, masking_mode=mode, batch_size=4, steps_per_epoch=60,
                      max_val_items=8, lr=1e-3)
    pre = train_inpainting(tex, replace(cfg, max_steps=240), ucfg, ex)
    fine = finetune_hdr(train_records, replace(cfg, max_steps=600), ucfg, ex,
                        init_params=pre.best_params)
    mse = validation_mse(test_records, fine.best_params, ucfg, mode)
    vals = [round(v["value"], 4) for v in fine.run_log.validations]
    print(f"{mode}: test={mse:.5f} pre_drop={loss_drop(pre.run_log):.3f} "
          f"fine_drop={loss_drop(fine.run_log):.3f} vals={vals} ({time.time()-t0:.0f}s)", flush=True)
