from .loop import (TELEMETRY_HEADER, BatchStream, StepTelemetry, TokenizedPreference, TrainConfig, TrainResult,
                   dpo_train_loop, train_loop)
from .losses import (DPOConfig, PreferencePair, completion_logprobs, dpo_loss,
                     dpo_loss_from_ratios, load_balancing_loss, sft_loss)
from .optim import AdamW, AdamWSpec
from .schedules import (CosineScheduleSpec, MultiStepScheduleSpec, cosine_lr_at, lr_at,
                        schedule_fn)
