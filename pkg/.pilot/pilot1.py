import torch, numpy as np, time, json
from braindiff.atlas import *
from braindiff.synthetic import *
from braindiff.schedule import NoiseSchedule
from braindiff.tokenizer import ParcelLinearMaps
from braindiff.unet import BrainUNet, DenoiserConfig
from braindiff.training import TrainConfig, train
from braindiff.sampler import sample_batch, SampleConfig, derive_candidate_seed, apply_parcel_mask
from braindiff.metrics import two_way_accuracy, PixelFeatures, pixcorr
from braindiff.encoder import fit_encoder, EncoderConfig, rank_candidates
from braindiff.seeds import stable_seed

t0 = time.time()
out = {}

N_TRAIN, N_TEST, STEPS, NOISE = 128, 100, 2000, 0.3
atlas = build_synthetic_atlas(n_low=4, n_high=4, n_noise=8, seed=1)
scenes = generate_scenes(N_TRAIN + N_TEST, seed=2)
spec = SyntheticEncodingSpec(noise_std=NOISE, informative_parcel_ids=frozenset(p.id for p in atlas.parcels if p.roi_label), seed=3)
samples, truth = generate_synthetic_dataset(spec, scenes, atlas)
tr_scenes, te_scenes = scenes[:N_TRAIN], scenes[N_TRAIN:]
tr_samples, te_samples = samples[:N_TRAIN], samples[N_TRAIN:]
tr_images = np.stack([s.image for s in tr_scenes]); te_images = np.stack([s.image for s in te_scenes])
tr_resp = np.stack([s.responses for s in tr_samples]); te_resp = np.stack([s.responses for s in te_samples])

def make_model(seed):
    torch.manual_seed(seed)
    maps = ParcelLinearMaps(atlas.size, atlas.v_max, token_dim=48, generator=torch.Generator().manual_seed(seed))
    model = BrainUNet(DenoiserConfig(base_channels=16, depth=2, heads=4, head_dim=8, token_dim=48, time_dim=64))
    return model, maps

sched = NoiseSchedule.linear(1000)
models = {}
for label, dropout in (("td", True), ("notd", False)):
    model, maps = make_model(7)
    tc = TrainConfig(epochs=10000, batch_size=16, learning_rate=1e-3, seed=0, max_steps=STEPS, token_dropout=dropout)
    import tempfile
    with tempfile.TemporaryDirectory() as td:
        res = train(model, maps, tr_images, tr_resp, tc, sched, td)
    models[label] = (model, maps)
    out[f"{label}_loss_final"] = float(np.mean(res.losses[-20:]))
    print(label, "trained", round(time.time()-t0), "s", flush=True)

pix = PixelFeatures()
cfgS = SampleConfig(steps=50)
def decode_all(model, maps, resp, mask_ids=None, seed_tag="x"):
    tokens = maps(torch.from_numpy(resp)).detach()
    if mask_ids:
        tokens = apply_parcel_mask(tokens, mask_ids, atlas)
    seeds = [stable_seed(99, seed_tag, i) for i in range(resp.shape[0])]
    outi = np.empty((resp.shape[0],3,32,32), dtype=np.float32)
    for s in range(0, resp.shape[0], 25):
        e = min(s+25, resp.shape[0])
        outi[s:e] = sample_batch(model, sched, tokens[s:e], seeds[s:e], cfgS, (3,32,32))
    return outi

for label in ("td", "notd"):
    model, maps = models[label]
    recons = decode_all(model, maps, te_resp, seed_tag=label)
    out[f"{label}_test_2wc_pix"] = two_way_accuracy(recons, te_images, pix)
    out[f"{label}_test_pixcorr"] = float(np.mean([pixcorr(recons[i], te_images[i]) for i in range(N_TEST)]))
    print(label, "test 2WC(pix)", round(out[f"{label}_test_2wc_pix"],3), "pixcorr", round(out[f"{label}_test_pixcorr"],3), flush=True)

# criterion 7 with the TD model
model, maps = models["td"]
informative = [p.id for p in atlas.parcels if p.roi_label]
noise_ids = [p.id for p in atlas.parcels if not p.roi_label]
for tag, ids in (("mask_inf", informative), ("mask_noise", noise_ids)):
    recons = decode_all(model, maps, te_resp, mask_ids=ids, seed_tag=tag)
    out[f"td_2wc_{tag}"] = two_way_accuracy(recons, te_images, pix)
    print(tag, round(out[f"td_2wc_{tag}"],3), flush=True)

# criterion 6: encoder + candidate sweep on 50 test items
enc, rep = fit_encoder(tr_images, tr_samples, atlas, EncoderConfig(penalty=10.0, seed=5))
out["enc_val_corr"] = rep.val_correlation
print("encoder val corr", rep.val_correlation, flush=True)
n_sub = 50
tokens = maps(torch.from_numpy(te_resp[:n_sub])).detach()
all_cands = {}
for i in range(n_sub):
    seeds = [derive_candidate_seed(stable_seed(7, "c6", i), j) for j in range(8)]
    imgs = sample_batch(model, sched, tokens[i:i+1].repeat(8,1,1), seeds, cfgS, (3,32,32))
    all_cands[i] = imgs
for count in (1,2,4,8):
    sel_imgs, sel_scores = [], []
    for i in range(n_sub):
        block = all_cands[i][:count]
        ranked = rank_candidates(list(block), te_samples[i], enc)
        best = next(rc for rc in ranked if rc.selected)
        sel_imgs.append(block[best.index]); sel_scores.append(best.score)
    sel_imgs = np.stack(sel_imgs)
    out[f"c6_score_{count}"] = float(np.mean(sel_scores))
    out[f"c6_2wc_{count}"] = two_way_accuracy(sel_imgs, te_images[:n_sub], pix)
    print("candidates", count, "score", round(out[f"c6_score_{count}"],4), "2wc", round(out[f"c6_2wc_{count}"],3), flush=True)

out["total_s"] = time.time()-t0
json.dump(out, open(".pilot/pilot1.json","w"), indent=1)
print("DONE", json.dumps(out, indent=1))
