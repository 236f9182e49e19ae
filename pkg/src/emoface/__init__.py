"""Emotion-controllable facial expression sequence synthesis.

Two cooperating pieces: a multimodal emotion embedding bank (motion, audio,
text, and label prompts bound into one space) and an emotion-conditioned
denoising diffusion generator over expression-coefficient sequences, plus a
fully synthetic oracle corpus that makes every evaluation metric checkable
against ground truth.
"""

from .binding import (
    ContrastiveBatch,
    EmotionBank,
    evaluate_retrieval,
    info_nce,
    maxpool_aggregate,
    train_binding,
)
from .denoiser import (
    DenoiserConfig,
    ExpressionDenoiser,
    diagonal_mask,
    masked_attention,
)
from .diffusion import (
    DiffusionSchedule,
    cfg_combine,
    forward_marginal,
    make_schedule,
    predict_x0,
    reverse_step,
    sample_loop,
)
from .errors import DecodeError, NotTrainedError, TrainingDiverged
from .harness import (
    StylePrompt,
    TrainConfig,
    evaluate_generation,
    generate,
    run_ablation_deterministic,
    run_ablation_weights,
    train_diffusion,
)
from .losses import (
    LossWeights,
    SyncExpert,
    diffusion_mse,
    emo_loss,
    sync_loss,
    total_loss,
    train_sync_expert,
)
from .metrics import (
    EmotionProbe,
    metric_au_std,
    metric_blink_rate,
    metric_emo_sim,
    metric_lip_dist,
    train_probe,
)
from .seqio import (
    ContentTrack,
    CorpusManifest,
    ExpressionSequence,
    generate_corpus,
    load_manifest,
    read_sequence,
    read_track,
    write_sequence,
    write_track,
)

__version__ = "0.1.0"
