"""The two-stage parameter-transfer protocol.

Text-to-speech route: (A.1) train a text-encoder/speech-decoder model,
(A.2) train a speech encoder as an autoencoder against the frozen A.1
decoder. Recognition route: (B.1) train a speech-encoder/text-decoder
model, (B.2) train a speech decoder (initialized from A.1's decoder) as an
autoencoder against the frozen B.1 encoder. The final conversion model is
initialized with one pretrained encoder and one pretrained decoder.

Freezing is enforced by excluding frozen paths from the optimizer and
auditing bit-identity after every step.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

from .checkpoint import Checkpoint, checkpoint_of
from .data import Corpus
from .errors import ContractError
from .losses import LossWeights
from .models import ModelConfig, Seq2SeqModel, build_model
from .optim import OptimizerConfig
from .training import FitResult, TrainSettings, fit, pairs_for_task

STAGES = ("tts_dec", "tts_enc", "asr_enc", "asr_dec", "vc")
FROZEN_BY_STAGE = {
    "tts_dec": (),
    "tts_enc": ("decoder.",),
    "asr_enc": (),
    "asr_dec": ("encoder.",),
    "vc": (),
}


@dataclass
class StagePlan:
    stage: str
    steps: int = 2000
    frozen: tuple = None  # default per stage
    weights: LossWeights = field(default_factory=LossWeights)
    seed: int = 0

    def __post_init__(self):
        if self.stage not in STAGES:
            raise ContractError(f"unknown stage {self.stage!r}")
        if self.frozen is None:
            self.frozen = FROZEN_BY_STAGE[self.stage]
        if self.steps < 0:
            raise ContractError("stage step budget must be >= 0")


@dataclass
class StageResult:
    model: Seq2SeqModel
    checkpoint: Checkpoint
    fit: FitResult


def _text_vocab(corpus: Corpus) -> int:
    # inventory symbols plus begin/end-of-sequence
    return corpus.inventory.size + 2


def _stage_config(base: ModelConfig, task: str, corpus: Corpus) -> ModelConfig:
    cfg = dataclasses.replace(base, task=task,
                              vocab_size=_text_vocab(corpus) if task != "vc" else None,
                              feat_dim=corpus.feat_dim)
    return cfg.validate()


def _run_stage(model, corpus, kind, plan: StagePlan, opt_cfg, settings,
               speaker=None, source=None, target=None, enforce_freeze=True):
    train = pairs_for_task(corpus, kind, "train", source or speaker, target)
    try:
        val = pairs_for_task(corpus, kind, "validation", source or speaker, target)
    except ContractError:
        val = []
    result = fit(model, train, val, steps=plan.steps, weights=plan.weights,
                 opt_cfg=opt_cfg, settings=settings, seed=plan.seed,
                 frozen_prefixes=plan.frozen, enforce_freeze=enforce_freeze)
    return StageResult(model, checkpoint_of(model, step=result.steps), result)


def run_tts_decoder_stage(tts_corpus: Corpus, base_cfg: ModelConfig,
                          plan: StagePlan, opt_cfg: OptimizerConfig,
                          settings: TrainSettings, model_seed: int) -> StageResult:
    """A.1: text encoder + speech decoder trained on the synthesis corpus."""
    cfg = _stage_config(base_cfg, "tts", tts_corpus)
    model = build_model(cfg, model_seed)
    return _run_stage(model, tts_corpus, "tts", plan, opt_cfg, settings)


def run_tts_encoder_stage(tts_corpus: Corpus, dec_ckpt: Checkpoint,
                          base_cfg: ModelConfig, plan: StagePlan,
                          opt_cfg: OptimizerConfig, settings: TrainSettings,
                          model_seed: int, enforce_freeze=True) -> StageResult:
    """A.2: speech-to-speech autoencoder with the decoder frozen at A.1."""
    cfg = _stage_config(base_cfg, "vc", tts_corpus)
    model = build_model(cfg, model_seed)
    model.params.load_values(dec_ckpt.params, prefix="decoder.")
    return _run_stage(model, tts_corpus, "ae", plan, opt_cfg, settings,
                      enforce_freeze=enforce_freeze)


def run_asr_encoder_stage(asr_corpus: Corpus, base_cfg: ModelConfig,
                          plan: StagePlan, opt_cfg: OptimizerConfig,
                          settings: TrainSettings, model_seed: int) -> StageResult:
    """B.1: speech encoder + text decoder trained on the recognition corpus."""
    cfg = _stage_config(base_cfg, "asr", asr_corpus)
    model = build_model(cfg, model_seed)
    return _run_stage(model, asr_corpus, "asr", plan, opt_cfg, settings)


def run_asr_decoder_stage(tts_corpus: Corpus, asr_enc_ckpt: Checkpoint,
                          tts_dec_ckpt: Checkpoint, base_cfg: ModelConfig,
                          plan: StagePlan, opt_cfg: OptimizerConfig,
                          settings: TrainSettings, model_seed: int,
                          enforce_freeze=True) -> StageResult:
    """B.2: autoencoder on the synthesis corpus speech; encoder frozen at
    B.1, decoder initialized from A.1."""
    cfg = _stage_config(base_cfg, "vc", tts_corpus)
    model = build_model(cfg, model_seed)
    model.params.load_values(asr_enc_ckpt.params, prefix="encoder.")
    model.params.load_values(tts_dec_ckpt.params, prefix="decoder.")
    return _run_stage(model, tts_corpus, "ae", plan, opt_cfg, settings,
                      enforce_freeze=enforce_freeze)


def transfer_init(vc_config: ModelConfig, enc_ckpt: Checkpoint,
                  dec_ckpt: Checkpoint, seed: int) -> Seq2SeqModel:
    """Conversion model with encoder and decoder subtrees copied from the
    given checkpoints; mixing sources across prefixes is the point."""
    model = build_model(vc_config.validate(), seed)
    model.params.load_values(enc_ckpt.params, prefix="encoder.")
    model.params.load_values(dec_ckpt.params, prefix="decoder.")
    return model


def run_vc_stage(vc_corpus: Corpus, base_cfg: ModelConfig, plan: StagePlan,
                 opt_cfg: OptimizerConfig, settings: TrainSettings,
                 model_seed: int, source: str, target: str,
                 enc_ckpt: Checkpoint | None = None,
                 dec_ckpt: Checkpoint | None = None) -> StageResult:
    """Final conversion training, optionally transfer-initialized."""
    cfg = _stage_config(base_cfg, "vc", vc_corpus)
    if enc_ckpt is not None and dec_ckpt is not None:
        model = transfer_init(cfg, enc_ckpt, dec_ckpt, model_seed)
    else:
        model = build_model(cfg, model_seed)
        if enc_ckpt is not None:
            model.params.load_values(enc_ckpt.params, prefix="encoder.")
        if dec_ckpt is not None:
            model.params.load_values(dec_ckpt.params, prefix="decoder.")
    return _run_stage(model, vc_corpus, "vc", plan, opt_cfg, settings,
                      source=source, target=target)
