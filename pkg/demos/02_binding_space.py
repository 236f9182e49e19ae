"""
The shared emotion embedding space
==================================

Trains the four-modality binding bank on a small corpus, prints the
cross-modal retrieval table, and projects the embeddings to 2D.
"""

from pathlib import Path

import numpy as np
import torch
import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from emoface import binding, seqio

torch.set_num_threads(1)
ART = Path(__file__).parent / "_artifacts"
ART.mkdir(exist_ok=True)

corpus_dir = ART / "tour_corpus"
if not (corpus_dir / "manifest.json").exists():
    seqio.generate_corpus(corpus_dir, seed=11, n_samples=96)
manifest = seqio.load_manifest(corpus_dir / "manifest.json")

# two-phase training: per-modality warmup, then frozen encoders + adapters
bank_path = ART / "tour_bank.ckpt"
if bank_path.exists():
    bank = binding.load_bank(bank_path)
    print(f"loaded {bank_path}")
else:
    bank, log = binding.train_binding(manifest, epochs=25, seed=3)
    binding.save_bank(bank, bank_path)
    print(f"contrastive loss: first {log['contrastive'][0]:.4f} "
          f"last {log['contrastive'][-1]:.4f}")

# top-1 emotion retrieval for every (query modality, gallery modality) pair
table = binding.evaluate_retrieval(bank, manifest, split="test")
print("\ntest-split retrieval, rows query / columns gallery:")
print(table.format())

# embed the whole test split with every modality and flatten to 2D via PCA
records = manifest.records("test")
data = binding.corpus_tensors(manifest, records)
classes = np.array([r.emotion_class for r in records])
with torch.no_grad():
    embeds = {m: bank.embed(m, data[m]).numpy() for m in binding.MODALITIES}

stacked = np.concatenate(list(embeds.values()), axis=0)
centered = stacked - stacked.mean(axis=0)
_, _, vt = np.linalg.svd(centered, full_matrices=False)
proj = {m: (embeds[m] - stacked.mean(axis=0)) @ vt[:2].T for m in embeds}

markers = {"motion": "o", "audio": "s", "text": "^", "label": "x"}
fig, ax = plt.subplots(figsize=(7, 6))
for m, pts in proj.items():
    ax.scatter(pts[:, 0], pts[:, 1], c=classes, cmap="tab10",
               marker=markers[m], s=40, label=m, alpha=0.8)
ax.legend(title="modality")
ax.set_title("binding embeddings, PCA projection (color = emotion class)")
fig.tight_layout()
out = ART / "02_binding_space.png"
fig.savefig(out, dpi=120)
print(f"\nwrote {out}")
