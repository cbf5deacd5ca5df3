"""seqvc: desk-scale sequence-to-sequence voice conversion with TTS/ASR
parameter-transfer pretraining."""

from .autodiff import Tensor, backward, grad_check, no_grad
from .checkpoint import Checkpoint, checkpoint_of, load_checkpoint, save_checkpoint
from .config import RunConfig, derive_seed, load_config
from .data import (Corpus, CorpusGenSpec, Inventory, SpeakerProfile, Utterance,
                   extract_mel, generate_corpus, load_corpus, render_utterance)
from .errors import ContractError, NumericError
from .losses import LossWeights, compose_total, guided_attention_loss, recon_loss, stop_loss
from .metrics import (McdConfig, cluster_score, diagonality, dtw_align,
                      error_rate, mcd, trim_silence)
from .models import (DecodeResult, ModelConfig, Seq2SeqModel, build_model,
                     decode_autoregressive, decode_teacher_forced, decode_text,
                     encode, toy_config)
from .optim import AdamOptimizer, LambOptimizer, OptimizerConfig, lamb_step
from .params import ParamTree
from .pretrain import (StagePlan, run_asr_decoder_stage, run_asr_encoder_stage,
                       run_tts_decoder_stage, run_tts_encoder_stage, run_vc_stage,
                       transfer_init)
from .training import Example, FitResult, TrainSettings, fit, pairs_for_task

__version__ = "0.1.0"
