"""End-to-end pipeline: diffusion training, generation, evaluation, ablations.

Everything stochastic is keyed off explicit integer seeds, so every command
that emits a CSV reproduces it byte-for-byte when re-run with the same
arguments.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import checkpoint as ckpt
from .binding import MODALITIES, EmotionBank, corpus_tensors
from .denoiser import DenoiserConfig, ExpressionDenoiser, subject_template
from .diffusion import (
    DEFAULT_NUM_STEPS,
    DiffusionSchedule,
    forward_marginal,
    make_schedule,
    predict_x0,
    sample_loop,
)
from .errors import TrainingDiverged
from .losses import (
    LossWeights,
    SyncExpert,
    diffusion_mse,
    emo_loss,
    require_trained_expert,
    sync_loss,
    total_loss,
)
from .metrics import (
    EmotionProbe,
    metric_au_std,
    metric_blink_rate,
    metric_emo_sim,
    metric_lip_dist,
)
from .seqio import ContentTrack, CorpusManifest, ExpressionSequence, SampleRecord, derive_rng

CSV_COLUMNS = ("sample", "variant", "modality", "weight", "seed", "metric", "value")
ABLATION_WEIGHTS = (0.5, 1.0, 1.5, 2.0, 3.0)


@dataclass
class TrainConfig:
    """Diffusion training hyperparameters."""

    num_steps: int = DEFAULT_NUM_STEPS  # diffusion chain length
    lr: float = 1e-4
    drop_probability: float = 0.1
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0
    epochs: int = 150
    batch_size: int = 32
    denoiser: DenoiserConfig = field(default_factory=DenoiserConfig)
    log_every: int = 20
    checkpoint_every: int | None = None

    def to_dict(self) -> dict:
        out = vars(self).copy()
        out["weights"] = list(self.weights.as_tuple())
        out["denoiser"] = self.denoiser.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        if "weights" in data and not isinstance(data["weights"], LossWeights):
            data["weights"] = LossWeights(*data["weights"])
        if "denoiser" in data and not isinstance(data["denoiser"], DenoiserConfig):
            data["denoiser"] = DenoiserConfig.from_dict(data["denoiser"])
        return cls(**data)


def _training_tensors(manifest: CorpusManifest, bank: EmotionBank, records: list[SampleRecord]):
    data = corpus_tensors(manifest, records)
    content = torch.from_numpy(
        np.stack([manifest.load_content(r).features for r in records])
    )
    with torch.no_grad():
        prompt_emb = torch.stack(
            [bank.embed(m, data[m]) for m in MODALITIES]
        )  # (4, n, embed_dim)
    templates = torch.stack(
        [subject_template(r.subject_id, bank.dims.embed_dim) for r in records]
    )
    return data["motion"], content, prompt_emb, templates


def train_diffusion(
    manifest: CorpusManifest,
    bank: EmotionBank,
    expert: SyncExpert,
    config: TrainConfig,
    out_path: str | Path | None = None,
) -> tuple[ExpressionDenoiser, DiffusionSchedule, dict]:
    """Train the noise estimator with the weighted three-term objective.

    The style prompt of each sample is re-drawn uniformly over the four
    modalities every step (from the frozen bank), and with probability
    ``drop_probability`` a sample's content and style conditioning are
    replaced by the learned null embeddings. Auxiliary terms are evaluated
    on the clean-sequence estimate of the non-dropped samples only.
    """
    bank.assert_trained("diffusion training")
    require_trained_expert(expert, "diffusion training")
    torch.manual_seed(config.seed)
    model = ExpressionDenoiser(config.denoiser)
    schedule = make_schedule(config.num_steps)
    rng = derive_rng(config.seed, 0xD1F)
    noise_gen = torch.Generator().manual_seed(config.seed * 2654435761 % (2**31) + 7)

    records = manifest.records("train")
    motion, content, prompt_emb, templates = _training_tensors(manifest, bank, records)
    n = len(records)
    batch = min(config.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)

    log: dict = {"loss": [], "config": config.to_dict()}
    step = 0
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * batch : b * batch + batch].copy())
            z0 = motion[idx]
            cnt = content[idx]
            tpl = templates[idx]
            modality_pick = rng.integers(0, len(MODALITIES), size=len(idx))
            style = prompt_emb[torch.from_numpy(modality_pick), idx]
            t = torch.from_numpy(rng.integers(1, config.num_steps + 1, size=len(idx)))
            eps = torch.randn(z0.shape, generator=noise_gen)
            drop = torch.from_numpy(rng.random(len(idx)) < config.drop_probability)

            z_t = forward_marginal(schedule, z0, t, eps)
            eps_hat = model(z_t, t, cnt, style, tpl, drop_mask=drop)
            mse = diffusion_mse(eps, eps_hat)
            kept = ~drop
            if bool(kept.any()):
                x0_hat = predict_x0(schedule, z_t[kept], t[kept], eps_hat[kept])
                s_loss = sync_loss(x0_hat, cnt[kept], expert)
                e_loss = emo_loss(x0_hat, style[kept], bank)
            else:
                s_loss = torch.zeros(())
                e_loss = torch.zeros(())
            loss = total_loss(mse, s_loss, e_loss, config.weights)
            if not torch.isfinite(loss):
                if out_path is not None:
                    save_denoiser(model, config, Path(str(out_path) + ".diverged"))
                raise TrainingDiverged(
                    f"non-finite loss at step {step}: mse={float(mse.detach())}, "
                    f"sync={float(s_loss.detach())}, emo={float(e_loss.detach())}"
                )
            opt.zero_grad()
            loss.backward()
            opt.step()
            if step % config.log_every == 0 or step == config.epochs * steps_per_epoch - 1:
                log["loss"].append(
                    {
                        "step": step,
                        "total": float(loss.detach()),
                        "mse": float(mse.detach()),
                        "sync": float(s_loss.detach()),
                        "emo": float(e_loss.detach()),
                    }
                )
            if (
                out_path is not None
                and config.checkpoint_every
                and step > 0
                and step % config.checkpoint_every == 0
            ):
                save_denoiser(model, config, Path(f"{out_path}.step{step:06d}"))
            step += 1

    if out_path is not None:
        save_denoiser(model, config, out_path)
    return model, schedule, log


def save_denoiser(model: ExpressionDenoiser, config: TrainConfig, path: str | Path) -> None:
    meta = {"train_config": config.to_dict()}
    ckpt.save_checkpoint(path, "denoiser", meta, model.state_dict())


def load_denoiser(path: str | Path) -> tuple[ExpressionDenoiser, DiffusionSchedule, TrainConfig]:
    _, meta, state = ckpt.load_checkpoint(path, expect_kind="denoiser")
    config = TrainConfig.from_dict(meta["train_config"])
    model = ExpressionDenoiser(config.denoiser)
    model.load_state_dict(state)
    model.eval()
    return model, make_schedule(config.num_steps), config


@dataclass
class StylePrompt:
    """One emotion prompt: which modality carries it and its raw value."""

    modality: str
    value: object

    def encode(self, bank: EmotionBank) -> torch.Tensor:
        bank.assert_trained("prompt encoding")
        if self.modality == "motion":
            frames = self.value.frames if isinstance(self.value, ExpressionSequence) else self.value
            inputs = torch.as_tensor(np.asarray(frames, dtype=np.float32)).unsqueeze(0)
        elif self.modality == "audio":
            feats = self.value.features if isinstance(self.value, ContentTrack) else self.value
            inputs = torch.as_tensor(np.asarray(feats, dtype=np.float32)).unsqueeze(0)
        elif self.modality == "text":
            inputs = torch.as_tensor(np.asarray(self.value, dtype=np.int64)).unsqueeze(0)
        elif self.modality == "label":
            inputs = torch.tensor([int(self.value)], dtype=torch.long)
        else:
            raise ValueError(f"unknown prompt modality {self.modality!r}")
        with torch.no_grad():
            return bank.embed(self.modality, inputs)[0]


def generate_batch(
    model: ExpressionDenoiser,
    schedule: DiffusionSchedule,
    content: torch.Tensor,
    style: torch.Tensor,
    templates: torch.Tensor,
    weight: float,
    seed: int,
) -> torch.Tensor:
    """Sample a batch of clips with classifier-free guidance."""
    model.eval()
    batch = content.shape[0]
    cond = torch.zeros(batch, dtype=torch.bool)
    uncond = torch.ones(batch, dtype=torch.bool)

    def denoise_fn(z, t, conditional):
        return model(z, t, content, style, templates, drop_mask=cond if conditional else uncond)

    generator = torch.Generator().manual_seed(seed)
    with torch.no_grad():
        return sample_loop(
            schedule,
            denoise_fn,
            (batch, content.shape[1], model.config.dim),
            weight,
            generator,
        )


def generate(
    model: ExpressionDenoiser,
    schedule: DiffusionSchedule,
    bank: EmotionBank,
    content: ContentTrack,
    prompt: StylePrompt,
    subject_id: str,
    weight: float = 2.0,
    seed: int = 0,
    channel_map: dict | None = None,
    emotion_class: int | None = None,
) -> ExpressionSequence:
    """Generate one clip for a content track under an emotion prompt."""
    from .seqio import default_channel_map

    style = prompt.encode(bank).unsqueeze(0)
    template = subject_template(subject_id, bank.dims.embed_dim).unsqueeze(0)
    feats = torch.from_numpy(content.features).unsqueeze(0)
    frames = generate_batch(model, schedule, feats, style, template, weight, seed)[0]
    return ExpressionSequence(
        frames=frames.numpy(),
        fps=content.fps,
        channel_map=channel_map or default_channel_map(model.config.dim),
        subject_id=subject_id,
        emotion_class=emotion_class,
    )


def train_deterministic(
    manifest: CorpusManifest,
    bank: EmotionBank,
    expert: SyncExpert,
    config: TrainConfig,
    use_sync: bool = True,
    use_emo: bool = True,
) -> tuple[ExpressionDenoiser, dict]:
    """Train the same backbone as a one-shot regressor (no diffusion).

    The network maps a zero input at a fixed timestep straight to the clean
    sequence; with identical auxiliary weights this is the regression
    baseline whose outputs are compared against the diffusion sampler.
    """
    bank.assert_trained("deterministic training")
    require_trained_expert(expert, "deterministic training")
    torch.manual_seed(config.seed)
    model = ExpressionDenoiser(config.denoiser)
    rng = derive_rng(config.seed, 0xDE7)
    weights = LossWeights(
        config.weights.diffusion,
        config.weights.sync if use_sync else 0.0,
        config.weights.emo if use_emo else 0.0,
    )

    records = manifest.records("train")
    motion, content, prompt_emb, templates = _training_tensors(manifest, bank, records)
    n = len(records)
    batch = min(config.batch_size, n)
    steps_per_epoch = max(1, n // batch)
    opt = torch.optim.Adam(model.parameters(), lr=config.lr)
    log: dict = {"loss": []}
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for b in range(steps_per_epoch):
            idx = torch.from_numpy(order[b * batch : b * batch + batch].copy())
            modality_pick = rng.integers(0, len(MODALITIES), size=len(idx))
            style = prompt_emb[torch.from_numpy(modality_pick), idx]
            zeros = torch.zeros(len(idx), motion.shape[1], motion.shape[2])
            x0_hat = model(zeros, 1, content[idx], style, templates[idx])
            mse = diffusion_mse(motion[idx], x0_hat)
            s_loss = sync_loss(x0_hat, content[idx], expert) if use_sync else torch.zeros(())
            e_loss = emo_loss(x0_hat, style, bank) if use_emo else torch.zeros(())
            loss = total_loss(mse, s_loss, e_loss, weights)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite deterministic loss: {float(loss)}")
            opt.zero_grad()
            loss.backward()
            opt.step()
        log["loss"].append(float(loss.detach()))
    model.eval()
    return model, log


def predict_deterministic(
    model: ExpressionDenoiser, content: torch.Tensor, style: torch.Tensor, templates: torch.Tensor
) -> torch.Tensor:
    with torch.no_grad():
        zeros = torch.zeros(content.shape[0], content.shape[1], model.config.dim)
        return model(zeros, 1, content, style, templates)


def _select_eval_pairs(
    manifest: CorpusManifest, split: str, n_clips: int, rng: np.random.Generator
) -> list[tuple[SampleRecord, SampleRecord]]:
    """Pick (content clip, same-class prompt clip) pairs; prompt != clip when possible."""
    records = manifest.records(split)
    chosen = sorted(rng.choice(len(records), size=min(n_clips, len(records)), replace=False))
    pairs = []
    for i in chosen:
        rec = records[i]
        same = [r for r in records if r.emotion_class == rec.emotion_class and r.index != rec.index]
        prompt_rec = same[int(rng.integers(len(same)))] if same else rec
        pairs.append((rec, prompt_rec))
    return pairs


def _prompt_inputs(manifest: CorpusManifest, rec: SampleRecord, modality: str) -> StylePrompt:
    if modality == "motion":
        return StylePrompt("motion", manifest.load_motion(rec))
    if modality == "audio":
        return StylePrompt("audio", manifest.load_audio(rec))
    if modality == "text":
        return StylePrompt("text", np.array(rec.text_tokens, dtype=np.int64))
    if modality == "label":
        return StylePrompt("label", rec.emotion_class)
    raise ValueError(f"unknown modality {modality!r}")


def _metric_rows(
    manifest: CorpusManifest,
    frames: np.ndarray,
    rec: SampleRecord,
    probe: EmotionProbe,
    variant: str,
    modality: str,
    weight: float,
    seed: int,
) -> list[dict]:
    cmap = manifest.channel_map
    parts = manifest.load_parts(rec)
    values = {
        "lip_dist": metric_lip_dist(frames, parts["content"], cmap["lip"]),
        "au_std": metric_au_std(frames, cmap["upper_face"]),
        "blink_rate": metric_blink_rate(frames, cmap["blink"][0], manifest.fps),
        "emo_sim": metric_emo_sim(frames, rec.emotion_class, probe),
    }
    return [
        {
            "sample": rec.index,
            "variant": variant,
            "modality": modality,
            "weight": weight,
            "seed": seed,
            "metric": name,
            "value": value,
        }
        for name, value in values.items()
    ]


def _generate_for_pairs(
    manifest: CorpusManifest,
    model: ExpressionDenoiser,
    schedule: DiffusionSchedule,
    bank: EmotionBank,
    pairs: list[tuple[SampleRecord, SampleRecord]],
    modality: str,
    weight: float,
    seed: int,
) -> np.ndarray:
    content = torch.from_numpy(
        np.stack([manifest.load_content(rec).features for rec, _ in pairs])
    )
    style = torch.stack(
        [_prompt_inputs(manifest, prec, modality).encode(bank) for _, prec in pairs]
    )
    templates = torch.stack(
        [subject_template(rec.subject_id, bank.dims.embed_dim) for rec, _ in pairs]
    )
    return generate_batch(model, schedule, content, style, templates, weight, seed).numpy()


def ground_truth_floors(manifest: CorpusManifest, probe: EmotionProbe, split: str = "test") -> dict:
    """Metric values of the ground-truth clips themselves."""
    cmap = manifest.channel_map
    rows = {name: [] for name in ("lip_dist", "au_std", "blink_rate", "emo_sim")}
    for rec in manifest.records(split):
        frames = manifest.load_motion(rec).frames
        parts = manifest.load_parts(rec)
        rows["lip_dist"].append(metric_lip_dist(frames, parts["content"], cmap["lip"]))
        rows["au_std"].append(metric_au_std(frames, cmap["upper_face"]))
        rows["blink_rate"].append(metric_blink_rate(frames, cmap["blink"][0], manifest.fps))
        rows["emo_sim"].append(metric_emo_sim(frames, rec.emotion_class, probe))
    return {name: float(np.mean(vals)) for name, vals in rows.items()}


def evaluate_generation(
    manifest: CorpusManifest,
    model: ExpressionDenoiser,
    schedule: DiffusionSchedule,
    bank: EmotionBank,
    probe: EmotionProbe,
    split: str = "test",
    modalities: tuple[str, ...] = MODALITIES,
    weight: float = 2.0,
    seed: int = 0,
    n_clips: int = 8,
) -> tuple[list[dict], dict]:
    """Generate and score clips for every prompt modality.

    Returns per-sample metric rows and a summary with per-modality means and
    the ground-truth floors of the same split.
    """
    rows: list[dict] = []
    for mi, modality in enumerate(modalities):
        rng = derive_rng(seed, 0xE7A1, mi)
        pairs = _select_eval_pairs(manifest, split, n_clips, rng)
        cell_seed = int(derive_rng(seed, 0x5EED, mi).integers(2**31))
        frames = _generate_for_pairs(
            manifest, model, schedule, bank, pairs, modality, weight, cell_seed
        )
        for (rec, _), clip in zip(pairs, frames):
            rows.extend(
                _metric_rows(manifest, clip, rec, probe, "diffusion", modality, weight, seed)
            )
    summary = {
        "split": split,
        "weight": weight,
        "seed": seed,
        "per_modality": _aggregate(rows, ("modality",)),
        "ground_truth": ground_truth_floors(manifest, probe, split),
    }
    return rows, summary


def _aggregate(rows: list[dict], keys: tuple[str, ...]) -> dict:
    groups: dict = {}
    for row in rows:
        group = groups.setdefault(
            " ".join(str(row[k]) for k in keys), {}
        ).setdefault(row["metric"], [])
        group.append(row["value"])
    return {
        label: {metric: float(np.mean(vals)) for metric, vals in metrics.items()}
        for label, metrics in groups.items()
    }


def run_ablation_weights(
    manifest: CorpusManifest,
    model: ExpressionDenoiser,
    schedule: DiffusionSchedule,
    bank: EmotionBank,
    probe: EmotionProbe,
    weights: tuple[float, ...] = ABLATION_WEIGHTS,
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4),
    n_clips: int = 4,
    split: str = "test",
    modality: str = "motion",
) -> tuple[list[dict], dict]:
    """Sweep the guidance weight over several sampling seeds.

    The summary reports per-weight metric means and the Spearman rank
    correlation between the weight and mean upper-face temporal deviation.
    """
    from scipy.stats import spearmanr

    rows: list[dict] = []
    for weight in weights:
        for seed in seeds:
            rng = derive_rng(seed, 0xAB1A)
            pairs = _select_eval_pairs(manifest, split, n_clips, rng)
            cell_seed = int(derive_rng(seed, 0xAB1B, int(weight * 1000)).integers(2**31))
            frames = _generate_for_pairs(
                manifest, model, schedule, bank, pairs, modality, weight, cell_seed
            )
            for (rec, _), clip in zip(pairs, frames):
                rows.extend(
                    _metric_rows(manifest, clip, rec, probe, "diffusion", modality, weight, seed)
                )
    per_weight = _aggregate(rows, ("weight",))
    au_means = [per_weight[str(float(w))]["au_std"] for w in weights]
    rho = float(spearmanr(list(weights), au_means).statistic) if len(weights) > 2 else float("nan")
    summary = {
        "weights": list(weights),
        "seeds": list(seeds),
        "per_weight": per_weight,
        "au_std_spearman": rho,
    }
    return rows, summary


def run_ablation_deterministic(
    manifest: CorpusManifest,
    bank: EmotionBank,
    expert: SyncExpert,
    model: ExpressionDenoiser,
    schedule: DiffusionSchedule,
    probe: EmotionProbe,
    config: TrainConfig,
    weight: float = 2.0,
    n_clips: int = 8,
    seed: int = 0,
    split: str = "test",
) -> tuple[list[dict], dict]:
    """Regression baselines against the diffusion sampler on one eval set.

    Trains the sync-only and sync+emotion one-shot regressors with the same
    backbone and auxiliary weights, then scores all three systems on
    identical content/prompt pairs.
    """
    rng = derive_rng(seed, 0xDE70)
    pairs = _select_eval_pairs(manifest, split, n_clips, rng)
    rows: list[dict] = []

    det_sync, _ = train_deterministic(manifest, bank, expert, config, use_sync=True, use_emo=False)
    det_full, _ = train_deterministic(manifest, bank, expert, config, use_sync=True, use_emo=True)

    content = torch.from_numpy(np.stack([manifest.load_content(r).features for r, _ in pairs]))
    style = torch.stack([_prompt_inputs(manifest, p, "motion").encode(bank) for _, p in pairs])
    templates = torch.stack([subject_template(r.subject_id, bank.dims.embed_dim) for r, _ in pairs])

    for variant, net in (("det_sync", det_sync), ("det_full", det_full)):
        frames = predict_deterministic(net, content, style, templates).numpy()
        for (rec, _), clip in zip(pairs, frames):
            rows.extend(_metric_rows(manifest, clip, rec, probe, variant, "motion", 1.0, seed))

    cell_seed = int(derive_rng(seed, 0xDE71).integers(2**31))
    frames = generate_batch(model, schedule, content, style, templates, weight, cell_seed).numpy()
    for (rec, _), clip in zip(pairs, frames):
        rows.extend(_metric_rows(manifest, clip, rec, probe, "diffusion", "motion", weight, seed))

    per_variant = _aggregate(rows, ("variant",))
    summary = {"per_variant": per_variant, "weight": weight, "seed": seed}
    return rows, summary


def write_rows_csv(path: str | Path, rows: list[dict]) -> None:
    """One row per (sample, metric); fixed column order and formatting."""
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_COLUMNS)
        for row in rows:
            writer.writerow(
                [
                    row["sample"],
                    row["variant"],
                    row["modality"],
                    f"{row['weight']:g}",
                    row["seed"],
                    row["metric"],
                    f"{row['value']:.10g}",
                ]
            )


def write_summary_json(path: str | Path, summary: dict) -> None:
    Path(path).write_text(json.dumps(summary, sort_keys=True, indent=1))


def plot_metric_curves(csv_path: str | Path, out_png: str | Path, x_column: str = "weight") -> None:
    """Line plot of per-metric means against a swept column of an emitted CSV."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    rows = read_rows_csv(csv_path)
    metrics = sorted({r["metric"] for r in rows})
    fig, axes = plt.subplots(1, len(metrics), figsize=(4 * len(metrics), 3.2))
    if len(metrics) == 1:
        axes = [axes]
    for ax, metric in zip(axes, metrics):
        xs = sorted({float(r[x_column]) for r in rows if r["metric"] == metric})
        means = [
            np.mean([r["value"] for r in rows if r["metric"] == metric and float(r[x_column]) == x])
            for x in xs
        ]
        ax.plot(xs, means, marker="o")
        ax.set_xlabel(x_column)
        ax.set_title(metric)
        ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_png, dpi=120)
    plt.close(fig)


def read_rows_csv(path: str | Path) -> list[dict]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        rows = []
        for raw in reader:
            rows.append(
                {
                    "sample": int(raw["sample"]),
                    "variant": raw["variant"],
                    "modality": raw["modality"],
                    "weight": float(raw["weight"]),
                    "seed": int(raw["seed"]),
                    "metric": raw["metric"],
                    "value": float(raw["value"]),
                }
            )
    return rows
