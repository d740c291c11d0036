"""Momentum-contrast video representation learning with temporally
adversarial frame dropout and a decaying key dictionary."""

from .config import (AblationConfig, AugmentConfig, DataConfig, EvalConfig,
                     ExperimentConfig, OcclusionConfig, TrainConfig,
                     config_from_dict, dump_config, load_config, run_id,
                     save_config)
from .data import (AugmentParams, ClipRecord, SpriteSceneSpec, augment,
                   augment_batch, build_dataset, direction_class, occlude,
                   read_manifest, render_record, render_split, sample_subclip,
                   synth_clip, write_manifest)
from .evaluation import (PredictionReport, ProbeHead, accuracy, attention_map,
                         embed_clips, entropy, finetune, occlusion_report,
                         predict_video, subclip_starts, train_linear_probe)
from .losses import (ContrastiveBatch, decayed_infonce,
                     discriminator_objective, generator_objective, infonce)
from .memqueue import DecayedQueue, decay_weight
from .models import (ClipEncoder, FrameScorer, apply_mask, build_encoder,
                     build_generator, clone_as_key_encoder, generate_query,
                     make_mask, momentum_update, random_mask)
from .training import (TrainState, TrainingDiverged, adversarial_step,
                       encoder_from_checkpoint, init_state, latest_checkpoint,
                       load_checkpoint, run_pretrain, save_checkpoint,
                       warmup_step)

__version__ = "0.1.0"
