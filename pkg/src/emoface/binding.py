"""Shared emotion embedding space over motion, audio, text, and label inputs.

Training runs in two phases. Each modality encoder is first warmed up with a
small classification head on the emotion classes, then frozen. Light adapter
heads (three fully connected layers) are then trained contrastively so that
embeddings of same-class inputs from different modalities attract and
different-class embeddings repel. The result is a bank of per-modality
embedding functions into one space, queried later both for prompt encoding
and as the target of the emotion consistency loss.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import checkpoint as ckpt
from .errors import NotTrainedError
from .seqio import CorpusManifest, SampleRecord, derive_rng

MODALITIES = ("motion", "audio", "text", "label")
DEFAULT_TAU = 0.07
DEFAULT_EMBED_DIM = 64


def maxpool_aggregate(features):
    """Channel-wise max over the sequence axis.

    Accepts ``(L, F)`` or batched ``(B, L, F)`` arrays or tensors; the pooled
    result drops the sequence axis. Empty sequences are an error.
    """
    if isinstance(features, np.ndarray):
        if features.ndim not in (2, 3) or features.shape[-2] == 0:
            raise ValueError("features must be (L, F) or (B, L, F) with L >= 1")
        return features.max(axis=-2)
    if features.ndim not in (2, 3) or features.shape[-2] == 0:
        raise ValueError("features must be (L, F) or (B, L, F) with L >= 1")
    return features.amax(dim=-2)


@dataclass
class ContrastiveBatch:
    """Inputs of the contrastive alignment loss.

    ``embeddings`` are raw (not necessarily normalized); ``pairs`` lists
    (anchor, positive) index pairs; ``neg_mask[i, j]`` marks j as a negative
    for anchor i; ``temperature`` scales the cosine similarities.
    """

    embeddings: torch.Tensor
    pairs: torch.Tensor
    neg_mask: torch.Tensor
    temperature: float

    @classmethod
    def from_embeddings(
        cls,
        embeddings: torch.Tensor,
        classes: torch.Tensor,
        modalities: torch.Tensor,
        temperature: float = DEFAULT_TAU,
    ) -> "ContrastiveBatch":
        """Mine positives (same class, different modality) and negatives
        (different class) from a labeled embedding batch."""
        same_class = classes.unsqueeze(0) == classes.unsqueeze(1)
        cross_modal = modalities.unsqueeze(0) != modalities.unsqueeze(1)
        pos = same_class & cross_modal
        pairs = pos.nonzero()
        return cls(
            embeddings=embeddings,
            pairs=pairs,
            neg_mask=~same_class,
            temperature=temperature,
        )


def info_nce(batch: ContrastiveBatch) -> torch.Tensor:
    """Mean InfoNCE over the pair set.

    For a pair (i, j) the score of the positive competes against the anchor's
    negatives, with the positive itself included in the denominator (standard
    form). Cosine similarity is computed internally, so callers may pass
    unnormalized embeddings.
    """
    if batch.temperature <= 0:
        raise ValueError(f"temperature must be positive, got {batch.temperature}")
    if batch.pairs.numel() == 0:
        raise ValueError("contrastive batch has no positive pairs")
    anchors = batch.pairs[:, 0]
    if not bool(batch.neg_mask[anchors].any(dim=1).all()):
        raise ValueError("every anchor needs at least one negative")
    z = F.normalize(batch.embeddings, dim=-1)
    sims = (z @ z.T) / batch.temperature
    pos = sims[anchors, batch.pairs[:, 1]]
    neg_rows = sims[anchors].masked_fill(~batch.neg_mask[anchors], float("-inf"))
    lse = torch.logsumexp(torch.cat([pos.unsqueeze(1), neg_rows], dim=1), dim=1)
    return (lse - pos).mean()


class _AttnBlock(nn.Module):
    """One pre-norm attention + feed-forward block (order-free, no positions)."""

    def __init__(self, width: int, heads: int = 4):
        super().__init__()
        self.norm1 = nn.LayerNorm(width)
        self.attn = nn.MultiheadAttention(width, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(width)
        self.ffn = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        a = self.norm1(h)
        h = h + self.attn(a, a, a, need_weights=False)[0]
        return h + self.ffn(self.norm2(h))


class SequenceEncoder(nn.Module):
    """Feature-sequence encoder for the motion and audio modalities."""

    def __init__(self, in_dim: int, width: int):
        super().__init__()
        self.proj = nn.Linear(in_dim, width)
        self.block = _AttnBlock(width)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.block(self.proj(x))


class TokenEncoder(nn.Module):
    def __init__(self, vocab: int, width: int):
        super().__init__()
        self.embed = nn.Embedding(vocab, width)
        self.block = _AttnBlock(width)

    def forward(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.block(self.embed(tokens))


class LabelEncoder(nn.Module):
    def __init__(self, num_classes: int, width: int):
        super().__init__()
        self.embed = nn.Embedding(num_classes, width)

    def forward(self, labels: torch.Tensor) -> torch.Tensor:
        return self.embed(labels).unsqueeze(1)


def _adapter(width: int) -> nn.Sequential:
    # exactly three fully connected layers
    return nn.Sequential(
        nn.Linear(width, width), nn.ReLU(), nn.Linear(width, width), nn.ReLU(), nn.Linear(width, width)
    )


@dataclass
class BankDims:
    motion_dim: int
    audio_dim: int
    text_vocab: int
    num_classes: int
    embed_dim: int = DEFAULT_EMBED_DIM

    @classmethod
    def for_manifest(cls, manifest: CorpusManifest, embed_dim: int = DEFAULT_EMBED_DIM) -> "BankDims":
        return cls(
            motion_dim=manifest.dim,
            audio_dim=manifest.audio_dim,
            text_vocab=manifest.text_vocab,
            num_classes=manifest.num_classes,
            embed_dim=embed_dim,
        )


class EmotionBank(nn.Module):
    """Frozen per-modality encoders plus contrastively trained adapters."""

    def __init__(self, dims: BankDims, tau: float = DEFAULT_TAU):
        super().__init__()
        if tau <= 0:
            raise ValueError(f"tau must be positive, got {tau}")
        self.dims = dims
        self.tau = tau
        self.trained = False
        self.encoder_digest: str | None = None
        w = dims.embed_dim
        self.encoders = nn.ModuleDict(
            {
                "motion": SequenceEncoder(dims.motion_dim, w),
                "audio": SequenceEncoder(dims.audio_dim, w),
                "text": TokenEncoder(dims.text_vocab, w),
                "label": LabelEncoder(dims.num_classes, w),
            }
        )
        self.adapters = nn.ModuleDict({m: _adapter(w) for m in MODALITIES})

    def pooled_features(self, modality: str, inputs: torch.Tensor) -> torch.Tensor:
        if modality not in MODALITIES:
            raise ValueError(f"unknown modality {modality!r}")
        return maxpool_aggregate(self.encoders[modality](inputs))

    def embed(self, modality: str, inputs: torch.Tensor) -> torch.Tensor:
        """Unit-norm emotion embeddings, shape ``(B, embed_dim)``."""
        return F.normalize(self.adapters[modality](self.pooled_features(modality, inputs)), dim=-1)

    def freeze_encoders(self) -> None:
        for enc in self.encoders.values():
            for p in enc.parameters():
                p.requires_grad_(False)
        self.encoder_digest = ckpt.state_digest(self.encoders.state_dict())

    def assert_trained(self, what: str) -> None:
        if not self.trained:
            raise NotTrainedError(f"{what} requires a trained binding bank")


def corpus_tensors(manifest: CorpusManifest, records: list[SampleRecord]) -> dict[str, torch.Tensor]:
    """Load modality inputs for a record list into stacked tensors."""
    motion = np.stack([manifest.load_motion(r).frames for r in records])
    audio = np.stack([manifest.load_audio(r).features for r in records])
    text = np.stack([np.array(r.text_tokens, dtype=np.int64) for r in records])
    labels = np.array([r.emotion_class for r in records], dtype=np.int64)
    return {
        "motion": torch.from_numpy(motion),
        "audio": torch.from_numpy(audio),
        "text": torch.from_numpy(text),
        "label": torch.from_numpy(labels),
        "classes": torch.from_numpy(labels.copy()),
    }


def _warm_up_encoder(
    bank: EmotionBank,
    modality: str,
    inputs: torch.Tensor,
    classes: torch.Tensor,
    rng: np.random.Generator,
    steps: int,
    batch_size: int,
    lr: float = 1e-3,
) -> list[float]:
    head = nn.Linear(bank.dims.embed_dim, bank.dims.num_classes)
    params = list(bank.encoders[modality].parameters()) + list(head.parameters())
    opt = torch.optim.Adam(params, lr=lr)
    losses = []
    n = inputs.shape[0]
    for _ in range(steps):
        idx = torch.from_numpy(rng.integers(0, n, size=min(batch_size, n)))
        logits = head(bank.pooled_features(modality, inputs[idx]))
        loss = F.cross_entropy(logits, classes[idx])
        opt.zero_grad()
        loss.backward()
        opt.step()
        losses.append(float(loss.detach()))
    return losses


def train_binding(
    manifest: CorpusManifest,
    tau: float = DEFAULT_TAU,
    epochs: int = 40,
    seed: int = 0,
    embed_dim: int = DEFAULT_EMBED_DIM,
    warmup_steps: int = 200,
    batch_size: int = 64,
    adapter_lr: float = 1e-3,
) -> tuple[EmotionBank, dict]:
    """Two-phase training of the binding space on the corpus train split."""
    torch.manual_seed(seed)
    bank = EmotionBank(BankDims.for_manifest(manifest, embed_dim), tau=tau)
    rng = derive_rng(seed, 0xB1D)
    train = manifest.records("train")
    data = corpus_tensors(manifest, train)
    classes = data["classes"]

    log: dict = {"warmup": {}, "contrastive": []}
    for modality in MODALITIES:
        log["warmup"][modality] = _warm_up_encoder(
            bank, modality, data[modality], classes, rng, warmup_steps, batch_size
        )
    bank.freeze_encoders()

    # encoders are frozen: pool every training sample once, then train adapters
    with torch.no_grad():
        pooled = {m: bank.pooled_features(m, data[m]) for m in MODALITIES}

    opt = torch.optim.Adam(
        [p for a in bank.adapters.values() for p in a.parameters()], lr=adapter_lr
    )
    n = len(train)
    step = min(batch_size, n)
    modality_codes = torch.arange(len(MODALITIES)).repeat_interleave(step)
    for _ in range(epochs):
        order = rng.permutation(n)
        epoch_losses = []
        for start in range(0, n - step + 1, step):
            idx = torch.from_numpy(order[start : start + step].copy())
            emb = torch.cat([bank.adapters[m](pooled[m][idx]) for m in MODALITIES])
            batch = ContrastiveBatch.from_embeddings(
                emb, classes[idx].repeat(len(MODALITIES)), modality_codes, temperature=tau
            )
            loss = info_nce(batch)
            opt.zero_grad()
            loss.backward()
            opt.step()
            epoch_losses.append(float(loss.detach()))
        log["contrastive"].append(float(np.mean(epoch_losses)))

    bank.trained = True
    return bank, log


@dataclass
class RetrievalTable:
    """Top-1 class-retrieval accuracy for every (query, gallery) modality pair."""

    accuracies: np.ndarray
    modalities: tuple[str, ...]
    split: str
    n_queries: int

    def cell(self, query: str, gallery: str) -> float:
        return float(self.accuracies[self.modalities.index(query), self.modalities.index(gallery)])

    def cross_modal_cells(self) -> list[float]:
        n = len(self.modalities)
        return [float(self.accuracies[i, j]) for i in range(n) for j in range(n) if i != j]

    def format(self) -> str:
        width = max(len(m) for m in self.modalities) + 2
        lines = [" " * width + "".join(m.rjust(width) for m in self.modalities)]
        for i, m in enumerate(self.modalities):
            lines.append(m.rjust(width) + "".join(f"{a:{width}.3f}" for a in self.accuracies[i]))
        return "\n".join(lines)


def evaluate_retrieval(bank: EmotionBank, manifest: CorpusManifest, split: str = "test") -> RetrievalTable:
    """Cross-modal top-1 retrieval by cosine similarity.

    Queries of one modality rank the gallery of another; a hit is a gallery
    item of the same emotion class. When query and gallery modalities match,
    the query item itself is excluded.
    """
    records = manifest.records(split)
    data = corpus_tensors(manifest, records)
    classes = data["classes"].numpy()
    with torch.no_grad():
        emb = {m: bank.embed(m, data[m]).numpy() for m in MODALITIES}
    n = len(records)
    table = np.zeros((len(MODALITIES), len(MODALITIES)))
    for qi, qm in enumerate(MODALITIES):
        for gi, gm in enumerate(MODALITIES):
            sims = emb[qm] @ emb[gm].T
            if qi == gi:
                np.fill_diagonal(sims, -np.inf)
            hits = classes[np.argmax(sims, axis=1)] == classes
            table[qi, gi] = float(np.mean(hits))
    return RetrievalTable(accuracies=table, modalities=MODALITIES, split=split, n_queries=n)


def save_bank(bank: EmotionBank, path) -> None:
    meta = {
        "dims": vars(bank.dims),
        "tau": bank.tau,
        "trained": bank.trained,
        "encoder_digest": bank.encoder_digest,
    }
    ckpt.save_checkpoint(path, "binding", meta, bank.state_dict())


def load_bank(path) -> EmotionBank:
    _, meta, state = ckpt.load_checkpoint(path, expect_kind="binding")
    bank = EmotionBank(BankDims(**meta["dims"]), tau=meta["tau"])
    bank.load_state_dict(state)
    bank.trained = bool(meta["trained"])
    bank.encoder_digest = meta.get("encoder_digest")
    if bank.trained:
        bank.freeze_encoders()
        bank.encoder_digest = meta.get("encoder_digest")
    return bank
