"""Constrained image splicing detection and localization.

Given a probe and a potential donor image, the matcher outputs a pair of
soft masks marking the spliced region in each, plus a detection score.
The package bundles the numpy-backed autodiff engine the networks run on,
the adversarial training framework, a synthetic pair generator with exact
ground truth, and the evaluation metrics.
"""

from .autodiff import (SpectralState, Tensor, avgpool2d, batchnorm2d,
                       bilinear_upsample, conv2d, gradcheck, leaky_relu,
                       linear, maxpool2d, no_grad, relu, softmax_channels,
                       spectral_normalize)
from .adversary import (DetectionNet, Discriminator, LossWeights, det_loss_d,
                        det_loss_g, dis_loss_d, dis_loss_g, mask_image,
                        matcher_loss, pair_labels, pool_image, spatial_ce)
from .datagen import (PairDataset, PairRecord, SetManifest, SourceImage,
                      TransformSpec, apply_transform, classify_difficulty,
                      dataset_from_manifest, generate_set, ingest_annotations,
                      make_overfit_pairs, make_toy_dataset, make_triplet,
                      sample_transform, synth_base_image)
from .matching import (AsppHead, AtrousBackbone, BackboneConfig,
                       CorrelationStack, FeaturePyramid, MaskPair,
                       SpliceMatcher, correlate, correlate_naive,
                       correlate_skip, upsample_mask)
from .metrics import (ConfusionCounts, MetricsReport, binarize, confusion,
                      detection_score, eer, evaluate_set, iou, mcc, nmm,
                      precision_recall_f1, roc_auc, roc_curve, trapezoid_auc)
from .training import (Adadelta, Adam, Checkpoint, TrainConfig, TrainResult,
                       adadelta_step, adam_step, adversarial_train,
                       load_checkpoint, matcher_from_checkpoint, pretrain,
                       save_checkpoint)

__version__ = "0.1.0"

__all__ = [name for name in dir() if not name.startswith("_")]
