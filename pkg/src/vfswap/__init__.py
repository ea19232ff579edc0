"""Desk-scale video face swapping with a latent video diffusion model,
fine-grained attribute learning, and detailed identity tokens."""

__version__ = "0.1.0"

from .videodata import (SourceFace, SyntheticDataset, SyntheticFactors,
                        VideoClip, generate_synthetic_clip, load_clip,
                        mask_face_region, sample_training_pair, save_clip)
from .latentcodec import IdentityCodec, LatentClip, LearnedCodec, load_codec
from .edm import (SamplerSchedule, SigmaDistribution, cfg_combine, denoise,
                  dsm_loss, edm_sample, precondition, temporal_codenoise)
from .denoiser import (ConditioningBundle, DenoiserConfig, EdmDenoiser,
                       SpatioTemporalUNet)
from .fal import (AttributeBundle, AttributeDecoder, AttributeEncoder,
                  Discriminator, FALConfig, FALLossWeights,
                  adversarial_losses, attr_consistency_loss, fal_total_loss,
                  reconstruction_loss, triplet_identity_loss)
from .dil import (DetailedIdentityTokenizer, IdentityEncoder, identity_loss,
                  load_identity_encoder, pretrain_identity_encoder,
                  save_identity_encoder)
from .metrics import (EvalReport, FactorRegressor, VideoFeatureExtractor,
                      attribute_errors, build_gallery, fvd, id_retrieval,
                      id_similarity, train_factor_regressor, vidd)
from .trainer import (NanAbortError, SwapModel, Trainer, build_model,
                      load_model, swap)
from .config import ConfigError, RunConfig, apply_overrides, from_dict, to_dict
