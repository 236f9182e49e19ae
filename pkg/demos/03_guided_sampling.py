"""
Emotion-guided clip sampling
============================

Trains the sync expert and a small diffusion model on the demo corpus,
then samples one held-out content track at several guidance weights and
compares the result against the ground-truth parts.
"""

from pathlib import Path

import numpy as np
import torch
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from emoface import binding, harness, losses, metrics, seqio

torch.set_num_threads(1)
ART = Path(__file__).parent / "_artifacts"
ART.mkdir(exist_ok=True)

corpus_dir = ART / "tour_corpus"
if not (corpus_dir / "manifest.json").exists():
    seqio.generate_corpus(corpus_dir, seed=11, n_samples=96)
manifest = seqio.load_manifest(corpus_dir / "manifest.json")

bank_path = ART / "tour_bank.ckpt"
if not bank_path.exists():
    bank, _ = binding.train_binding(manifest, epochs=25, seed=3)
    binding.save_bank(bank, bank_path)
bank = binding.load_bank(bank_path)

expert_path = ART / "tour_expert.ckpt"
if not expert_path.exists():
    expert, _ = losses.train_sync_expert(manifest, seed=3, steps=200)
    losses.save_expert(expert, expert_path)
expert = losses.load_expert(expert_path)

probe_path = ART / "tour_probe.ckpt"
if not probe_path.exists():
    probe, _ = metrics.train_probe(manifest, seed=3)
    metrics.save_probe(probe, probe_path)
probe = metrics.load_probe(probe_path)

# the denoiser itself: a few minutes on first run, cached afterwards
model_path = ART / "tour_denoiser.ckpt"
if not model_path.exists():
    config = harness.TrainConfig(seed=3, epochs=400, batch_size=32, log_every=100)
    model, schedule, log = harness.train_diffusion(
        manifest, bank, expert, config, out_path=model_path)
    first, last = log["loss"][0], log["loss"][-1]
    print(f"diffusion loss: {first['total']:.4f} -> {last['total']:.4f}")
model, schedule, _ = harness.load_denoiser(model_path)

# one held-out record: its content track drives the lips, the prompt the style
rec = manifest.records("test")[0]
content = manifest.load_content(rec)
parts = manifest.load_parts(rec)
prompt = harness.StylePrompt("label", rec.emotion_class)
print(f"\ntest clip {rec.index}: class {rec.emotion_class}, subject {rec.subject_id}")

weights = (0.5, 1.0, 2.0)
clips = {}
for w in weights:
    seq = harness.generate(model, schedule, bank, content, prompt,
                           subject_id=rec.subject_id, weight=w, seed=42,
                           emotion_class=rec.emotion_class)
    clips[w] = seq.frames
    lip = metrics.metric_lip_dist(seq.frames, parts["content"], manifest.channel_map["lip"])
    au = metrics.metric_au_std(seq.frames, manifest.channel_map["upper_face"])
    emo = metrics.metric_emo_sim(seq.frames, rec.emotion_class, probe)
    print(f"  weight {w:3.1f}: lip_dist {lip:.4f}  au_std {au:.4f}  emo_sim {emo:.4f}")

# reference floors measured on the corpus itself
floors = harness.ground_truth_floors(manifest, probe, split="test")
print("ground-truth floors:", {k: round(v, 4) for k, v in floors.items()})

t = np.arange(manifest.frames_per_clip) / manifest.fps
lip_ch = manifest.channel_map["lip"][0]
up_ch = manifest.channel_map["upper_face"][0]

fig, axes = plt.subplots(2, 1, figsize=(9, 6), sharex=True)
axes[0].plot(t, parts["content"][:, lip_ch], "k", lw=2, label="GT content")
axes[1].plot(t, parts["style"][:, up_ch], "k", lw=2, label="GT style")
for w in weights:
    axes[0].plot(t, clips[w][:, lip_ch], alpha=0.8, label=f"s={w}")
    axes[1].plot(t, clips[w][:, up_ch], alpha=0.8, label=f"s={w}")
axes[0].set_ylabel(f"lip ch {lip_ch}")
axes[1].set_ylabel(f"upper ch {up_ch}")
axes[1].set_xlabel("seconds")
axes[0].legend(ncol=2, fontsize=8)
fig.suptitle("sampled clips vs ground-truth parts across guidance weights")
fig.tight_layout()
out = ART / "03_guided_sampling.png"
fig.savefig(out, dpi=120)
print(f"wrote {out}")
