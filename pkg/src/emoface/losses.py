"""Training losses: denoising regression, lip-sync contrast, emotion match.

The auxiliary terms act on the clean-sequence estimate recovered from the
noise prediction, not on the noisy state: the sync term scores 5-frame lip
windows against the aligned content features through a small frozen
two-tower expert, and the emotion term pulls the motion-space embedding of
the estimate toward the prompt embedding.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .binding import EmotionBank
from .errors import NotTrainedError
from .seqio import CorpusManifest, derive_rng

SYNC_WINDOW = 5
SYNC_TAU = 0.07
SYNC_STRIDE = 7  # grid spacing >= window, so same-clip windows are valid negatives


def diffusion_mse(eps: torch.Tensor, eps_hat: torch.Tensor) -> torch.Tensor:
    """Mean squared error between the true and estimated noise."""
    if eps.shape != eps_hat.shape:
        raise ValueError(f"shape mismatch: {tuple(eps.shape)} vs {tuple(eps_hat.shape)}")
    return ((eps - eps_hat) ** 2).mean()


def _tower(in_dim: int, width: int) -> nn.Sequential:
    return nn.Sequential(nn.Linear(in_dim, width), nn.ReLU(), nn.Linear(width, width))


class SyncExpert(nn.Module):
    """Two-tower scorer of lip-motion windows against content windows.

    Both towers embed flattened 5-frame windows onto the unit sphere; the
    alignment score of a pair is their cosine similarity. ``threshold`` is
    calibrated after training to separate matched from shifted pairs.
    """

    def __init__(self, lip_channels: tuple[int, ...], content_dim: int, width: int = 64,
                 window: int = SYNC_WINDOW, tau: float = SYNC_TAU):
        super().__init__()
        self.lip_channels = tuple(int(c) for c in lip_channels)
        self.content_dim = content_dim
        self.window = window
        self.tau = tau
        self.motion_net = _tower(window * len(self.lip_channels), width)
        self.audio_net = _tower(window * content_dim, width)
        self.threshold = 0.0
        self.trained = False

    def encode_motion(self, windows: torch.Tensor) -> torch.Tensor:
        """``windows``: ``(B, window, n_lip)`` lip trajectories."""
        return F.normalize(self.motion_net(windows.flatten(-2)), dim=-1)

    def encode_audio(self, windows: torch.Tensor) -> torch.Tensor:
        return F.normalize(self.audio_net(windows.flatten(-2)), dim=-1)

    def score(self, motion_windows: torch.Tensor, audio_windows: torch.Tensor) -> torch.Tensor:
        """Cosine alignment score per window pair."""
        return (self.encode_motion(motion_windows) * self.encode_audio(audio_windows)).sum(-1)


def window_grid(num_frames: int, window: int = SYNC_WINDOW, stride: int = SYNC_STRIDE) -> list[int]:
    starts = list(range(0, num_frames - window + 1, stride))
    if not starts:
        raise ValueError(f"clip of {num_frames} frames is shorter than one window ({window})")
    return starts


def _gather_windows(x: torch.Tensor, starts: list[int], window: int) -> torch.Tensor:
    """``(B, T, C)`` to ``(B, G, window, C)`` at the given start frames."""
    return torch.stack([x[:, s : s + window] for s in starts], dim=1)


def sync_loss(x0_hat: torch.Tensor, content: torch.Tensor, expert: SyncExpert) -> torch.Tensor:
    """Window-level InfoNCE between estimated lip motion and content features.

    For every clip, windows on a fixed grid are embedded by both towers; each
    motion window must prefer its aligned content window over the clip's
    other (time-shifted) windows.
    """
    if x0_hat.ndim == 2:
        x0_hat, content = x0_hat.unsqueeze(0), content.unsqueeze(0)
    if content.shape[1] != x0_hat.shape[1]:
        raise ValueError("content features must be frame-aligned with the estimate")
    starts = window_grid(x0_hat.shape[1], expert.window)
    lips = x0_hat[:, :, list(expert.lip_channels)]
    f_m = expert.encode_motion(_gather_windows(lips, starts, expert.window).flatten(0, 1))
    f_a = expert.encode_audio(_gather_windows(content, starts, expert.window).flatten(0, 1))
    g = len(starts)
    f_m = f_m.view(-1, g, f_m.shape[-1])
    f_a = f_a.view(-1, g, f_a.shape[-1])
    logits = torch.bmm(f_m, f_a.transpose(1, 2)) / expert.tau
    target = torch.arange(g).expand(logits.shape[0], g)
    return F.cross_entropy(logits.flatten(0, 1), target.flatten())


def emo_loss(x0_hat: torch.Tensor, target_embedding: torch.Tensor, bank: EmotionBank) -> torch.Tensor:
    """Squared distance between the estimate's emotion embedding and the prompt's."""
    bank.assert_trained("the emotion consistency loss")
    squeeze = x0_hat.ndim == 2
    if squeeze:
        x0_hat = x0_hat.unsqueeze(0)
        target_embedding = target_embedding.unsqueeze(0)
    z = bank.embed("motion", x0_hat)
    if z.shape != target_embedding.shape:
        raise ValueError("target embedding must match the bank's embedding shape")
    return ((z - target_embedding) ** 2).sum(-1).mean()


@dataclass
class LossWeights:
    diffusion: float = 1.0
    sync: float = 0.01
    emo: float = 0.01

    def __post_init__(self):
        for name, value in vars(self).items():
            if value < 0 or not np.isfinite(value):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")

    def as_tuple(self) -> tuple[float, float, float]:
        return (self.diffusion, self.sync, self.emo)


def total_loss(mse, sync, emo, weights: LossWeights) -> torch.Tensor:
    """Weighted sum of the three terms."""
    return weights.diffusion * mse + weights.sync * sync + weights.emo * emo


def train_sync_expert(
    manifest: CorpusManifest,
    seed: int = 0,
    steps: int = 300,
    batch_size: int = 64,
    lr: float = 1e-3,
    width: int = 64,
) -> tuple[SyncExpert, dict]:
    """Contrastive pretraining of the sync expert on ground-truth clips.

    Anchor lip windows attract their aligned content window and repel the
    windows of the other clips in the batch. The decision threshold is then
    calibrated on matched-versus-shifted pairs of the train split.
    """
    torch.manual_seed(seed)
    expert = SyncExpert(manifest.channel_map["lip"], manifest.audio_dim, width=width)
    rng = derive_rng(seed, 0x51C)
    train = manifest.records("train")
    lips = torch.from_numpy(
        np.stack([manifest.load_motion(r).channels("lip") for r in train])
    )
    content = torch.from_numpy(np.stack([manifest.load_content(r).features for r in train]))
    n, frames = lips.shape[0], lips.shape[1]
    opt = torch.optim.Adam(expert.parameters(), lr=lr)
    losses = []
    for _ in range(steps):
        clip_idx = torch.from_numpy(rng.integers(0, n, size=min(batch_size, n)))
        starts = rng.integers(0, frames - expert.window + 1, size=len(clip_idx))
        m_win = torch.stack([lips[c, s : s + expert.window] for c, s in zip(clip_idx, starts)])
        a_win = torch.stack([content[c, s : s + expert.window] for c, s in zip(clip_idx, starts)])
        logits = expert.encode_motion(m_win) @ expert.encode_audio(a_win).T / expert.tau
        loss = F.cross_entropy(logits, torch.arange(len(clip_idx)))
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))

    matched, shifted = _pair_scores(expert, lips, content)
    expert.threshold = float((matched.mean() + shifted.mean()) / 2.0)
    expert.trained = True
    for p in expert.parameters():
        p.requires_grad_(False)
    return expert, {"loss": losses, "matched_mean": float(matched.mean()),
                    "shifted_mean": float(shifted.mean())}


def _pair_scores(expert: SyncExpert, lips: torch.Tensor, content: torch.Tensor):
    """Cosine scores of aligned pairs and of pairs shifted by one grid step."""
    starts = window_grid(lips.shape[1], expert.window)
    with torch.no_grad():
        f_m = expert.encode_motion(_gather_windows(lips, starts, expert.window).flatten(0, 1))
        f_a = expert.encode_audio(_gather_windows(content, starts, expert.window).flatten(0, 1))
        g = len(starts)
        f_m = f_m.view(-1, g, f_m.shape[-1])
        f_a = f_a.view(-1, g, f_a.shape[-1])
        matched = (f_m * f_a).sum(-1).flatten()
        shifted = (f_m[:, :-1] * f_a[:, 1:]).sum(-1).flatten()
    return matched, shifted


def held_out_sync_accuracy(expert: SyncExpert, manifest: CorpusManifest, split: str = "test") -> float:
    """Matched-vs-shifted classification accuracy at the calibrated threshold."""
    records = manifest.records(split)
    lips = torch.from_numpy(np.stack([manifest.load_motion(r).channels("lip") for r in records]))
    content = torch.from_numpy(np.stack([manifest.load_content(r).features for r in records]))
    matched, shifted = _pair_scores(expert, lips, content)
    correct = int((matched > expert.threshold).sum()) + int((shifted <= expert.threshold).sum())
    return correct / (len(matched) + len(shifted))


def save_expert(expert: SyncExpert, path) -> None:
    meta = {
        "lip_channels": list(expert.lip_channels),
        "content_dim": expert.content_dim,
        "window": expert.window,
        "tau": expert.tau,
        "threshold": expert.threshold,
        "trained": expert.trained,
        "width": expert.motion_net[-1].out_features,
    }
    ckpt.save_checkpoint(path, "sync_expert", meta, expert.state_dict())


def load_expert(path) -> SyncExpert:
    _, meta, state = ckpt.load_checkpoint(path, expect_kind="sync_expert")
    expert = SyncExpert(
        tuple(meta["lip_channels"]), meta["content_dim"], width=meta["width"],
        window=meta["window"], tau=meta["tau"],
    )
    expert.load_state_dict(state)
    expert.threshold = meta["threshold"]
    expert.trained = bool(meta["trained"])
    if expert.trained:
        for p in expert.parameters():
            p.requires_grad_(False)
    return expert


def require_trained_expert(expert: SyncExpert, what: str) -> None:
    if not expert.trained:
        raise NotTrainedError(f"{what} requires a trained sync expert")
