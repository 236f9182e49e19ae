"""Ground-truth metric analogs and the held-out emotion probe.

Because the corpus stores its exact generative decomposition, the usual
perceptual scores reduce to checkable quantities: lip accuracy is the
distance to the stored content part, upper-face liveliness is temporal
standard deviation, blink rate counts threshold crossings, and emotion
similarity is measured by a probe classifier trained separately from every
model in the generation stack.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import NotTrainedError
from .seqio import CorpusManifest, count_rising_edges, derive_rng

METRIC_NAMES = ("lip_dist", "au_std", "blink_rate", "emo_sim")


def metric_lip_dist(frames: np.ndarray, gt_content: np.ndarray, lip_channels) -> float:
    """Mean per-frame L2 distance between lip channels and the true content part."""
    lip = list(lip_channels)
    if frames.shape != gt_content.shape:
        raise ValueError("generated frames and ground-truth content must share a shape")
    diff = np.asarray(frames, dtype=np.float64)[:, lip] - np.asarray(gt_content, dtype=np.float64)[:, lip]
    return float(np.mean(np.linalg.norm(diff, axis=1)))


def metric_au_std(frames: np.ndarray, upper_channels) -> float:
    """Mean over upper-face channels of the per-channel temporal standard deviation."""
    x = np.asarray(frames, dtype=np.float64)[:, list(upper_channels)]
    return float(np.mean(np.std(x, axis=0)))


def metric_blink_rate(frames: np.ndarray, blink_channel: int, fps: float) -> float:
    """Rising edges of the blink channel above 0.5, per second."""
    x = np.asarray(frames, dtype=np.float64)[:, blink_channel]
    return count_rising_edges(x) / (len(x) / fps)


class EmotionProbe(nn.Module):
    """Independent emotion classifier used only for evaluation.

    Features are the per-channel temporal mean and standard deviation of a
    clip; the embedding is the normalized penultimate activation, and each
    class is summarized by the normalized centroid of its training
    embeddings.
    """

    def __init__(self, dim: int, num_classes: int, width: int = 64):
        super().__init__()
        self.dim = dim
        self.num_classes = num_classes
        feat = 2 * dim
        self.register_buffer("feat_mean", torch.zeros(feat))
        self.register_buffer("feat_std", torch.ones(feat))
        self.register_buffer("centroids", torch.zeros(num_classes, width))
        self.backbone = nn.Sequential(nn.Linear(feat, width), nn.ReLU(), nn.Linear(width, width))
        self.head = nn.Linear(width, num_classes)
        self.trained = False

    @staticmethod
    def features(frames: torch.Tensor) -> torch.Tensor:
        """``(B, T, D)`` clips to ``(B, 2D)`` mean/std summary features."""
        if frames.ndim == 2:
            frames = frames.unsqueeze(0)
        return torch.cat([frames.mean(dim=1), frames.std(dim=1, unbiased=False)], dim=-1)

    def embed(self, frames: torch.Tensor) -> torch.Tensor:
        feats = (self.features(frames) - self.feat_mean) / self.feat_std
        return F.normalize(self.backbone(feats), dim=-1)

    def logits(self, frames: torch.Tensor) -> torch.Tensor:
        feats = (self.features(frames) - self.feat_mean) / self.feat_std
        return self.head(self.backbone(feats))

    def similarity(self, frames: torch.Tensor, emotion_class: int) -> float:
        """Cosine similarity between a clip's embedding and a class centroid."""
        if not self.trained:
            raise NotTrainedError("the emotion probe must be trained before scoring")
        with torch.no_grad():
            z = self.embed(frames if frames.ndim == 3 else frames.unsqueeze(0))
        return float((z @ self.centroids[emotion_class]).mean())


def metric_emo_sim(frames: np.ndarray, emotion_class: int, probe: EmotionProbe) -> float:
    return probe.similarity(torch.from_numpy(np.asarray(frames, dtype=np.float32)), emotion_class)


def _augment(frames: torch.Tensor, rng: np.random.Generator) -> torch.Tensor:
    """Scale temporal deviations and jitter the baseline, per clip.

    Keeps the probe's judgment stable under the mild amplitude overshoot and
    bias that guided sampling introduces, without using any label information.
    """
    scale = torch.from_numpy(rng.uniform(0.6, 1.6, size=(frames.shape[0], 1, 1))).float()
    shift = torch.from_numpy(rng.normal(0.0, 0.02, size=(frames.shape[0], 1, frames.shape[2]))).float()
    mean = frames.mean(dim=1, keepdim=True)
    return mean + scale * (frames - mean) + shift


def train_probe(
    manifest: CorpusManifest,
    seed: int = 0,
    steps: int = 600,
    batch_size: int = 64,
    lr: float = 1e-3,
    width: int = 64,
) -> tuple[EmotionProbe, dict]:
    """Train the probe on the train split and freeze class centroids."""
    torch.manual_seed(seed)
    rng = derive_rng(seed, 0x9B0)
    probe = EmotionProbe(manifest.dim, manifest.num_classes, width=width)
    train = manifest.records("train")
    frames = torch.from_numpy(np.stack([manifest.load_motion(r).frames for r in train]))
    classes = torch.from_numpy(np.array([r.emotion_class for r in train], dtype=np.int64))

    with torch.no_grad():
        feats = EmotionProbe.features(frames)
        probe.feat_mean.copy_(feats.mean(dim=0))
        probe.feat_std.copy_(feats.std(dim=0).clamp_min(1e-6))

    opt = torch.optim.Adam(probe.parameters(), lr=lr)
    losses = []
    n = len(train)
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, n, size=min(batch_size, n)))
        batch = _augment(frames[idx], rng)
        loss = F.cross_entropy(probe.logits(batch), classes[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    with torch.no_grad():
        emb = probe.embed(frames)
        cents = torch.stack([emb[classes == k].mean(dim=0) for k in range(manifest.num_classes)])
        probe.centroids.copy_(F.normalize(cents, dim=-1))
    probe.trained = True
    for p in probe.parameters():
        p.requires_grad_(False)
    return probe, {"loss": losses}


def probe_calibration(probe: EmotionProbe, manifest: CorpusManifest, split: str = "test") -> dict:
    """Similarity of held-out ground-truth clips to their own and other centroids."""
    records = manifest.records(split)
    frames = torch.from_numpy(np.stack([manifest.load_motion(r).frames for r in records]))
    classes = np.array([r.emotion_class for r in records])
    with torch.no_grad():
        emb = probe.embed(frames)
        sims = (emb @ probe.centroids.T).numpy()
    own = sims[np.arange(len(records)), classes]
    cross = sims.copy()
    cross[np.arange(len(records)), classes] = -np.inf
    return {
        "own_mean": float(own.mean()),
        "own_min": float(own.min()),
        "cross_max": float(cross.max()),
        "accuracy": float(np.mean(np.argmax(sims, axis=1) == classes)),
    }


def save_probe(probe: EmotionProbe, path) -> None:
    meta = {"dim": probe.dim, "num_classes": probe.num_classes,
            "width": probe.head.in_features, "trained": probe.trained}
    ckpt.save_checkpoint(path, "probe", meta, probe.state_dict())


def load_probe(path) -> EmotionProbe:
    _, meta, state = ckpt.load_checkpoint(path, expect_kind="probe")
    probe = EmotionProbe(meta["dim"], meta["num_classes"], width=meta["width"])
    probe.load_state_dict(state)
    probe.trained = bool(meta["trained"])
    return probe
