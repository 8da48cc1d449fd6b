"""Image-set classification defence against adversarial attacks.

Train small dropout-bearing classifiers, generate FGSM/PGD/DeepFool
adversarial examples, mix clean and perturbed images into test sets at a
configurable attack ratio, and classify each set from Monte-Carlo dropout
posteriors with majority, soft, or exponential weighted voting.
"""

from .attacks import AttackConfig, AdversarialRecord, deepfool, fgsm, pgd, perturb_galleries
from .data import (Corpus, Gallery, Image, ImageSet, TrainingPool, digit_glyph_corpus,
                   flatten_training_pool, load_idx_corpus, normalize_corpus, normalize_set,
                   synthesize_corpus)
from .model import Model
from .network import (LayerSpec, LossValue, ModelParameters, Network,
                      default_architecture)
from .optim import AdamState, adam_step
from .pipeline import (AdversarialTrainResult, McConfig, McPosterior, MixedTestSet,
                       ResultRow, TrainConfig, adversarial_train, evaluate_defence,
                       mc_predict_set, mix_test_set, single_shot_eval, train_model)
from .voting import VoteOutcome, VotingConfig, exp_weighted_vote, majority_vote, soft_vote, vote

__all__ = [name for name in dir() if not name.startswith("_")]
