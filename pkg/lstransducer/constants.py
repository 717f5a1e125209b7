"""
LS-Transducer toolkit - Constants Configuration

This module centralizes all default values used throughout the toolkit.
Each constant is documented with its purpose and acceptable value ranges.
The config dataclasses in config.py take their defaults from here, and every
value can be overridden from a key=value config file or the command line.
"""

# ==============================================================================
# VOCABULARY
# ==============================================================================

# Reserved token ids. Normal tokens are 3..V-1.
# blank is only emitted by the CTC branch; the LS-Transducer path never emits it.
# Start-of-sentence and end-of-sentence share one id: the prediction network
# consumes it as [sos], the joint network emits it as [eos].
BLANK_ID = 0
UNK_ID = 1
SOS_ID = 2
EOS_ID = 2
NUM_RESERVED_TOKENS = 3

# Toy vocabulary size (blank, unk, sos/eos + 17 normal tokens)
# Must be >= 4 so at least one normal token exists.
VOCAB_SIZE = 20


# ==============================================================================
# MODEL DIMENSIONS
# ==============================================================================

# Input feature dimension F of every frame
FEAT_DIM = 16

# Encoder output dimension d. The last column is the AIF weight channel (alpha),
# the one before it is the auxiliary phone channel (w), the remaining d-2
# columns are the content used by AIF and the CTC classifier. Must be >= 4.
ENCODER_DIM = 32

# Hidden width of the causal self-attention stacks (encoder and prediction network)
MODEL_DIM = 32

# Feed-forward width inside each self-attention block
FF_DIM = 64

# Number of causal self-attention layers in the toy encoder
ENCODER_LAYERS = 2

# Number of past frames (including the current one) stacked at the encoder input.
# 3 = frames t, t-1, t-2. Purely causal: never looks ahead.
ENCODER_CONTEXT = 3

# Prediction network depth and the layer after which the AIF query is tapped.
# Depth 4 with tap 2 mirrors "first half fixed" during adaptation.
PRED_LAYERS = 4
PRED_TAP_LAYER = 2

# Query/key dimension of AIF attention (output width of the key/value projection)
QUERY_DIM = 32

# Standard deviation of the Gaussian weight initialisation
INIT_STD = 0.1

# Standard deviation used for output classifiers so an untrained model starts
# close to a uniform posterior (perplexity ~ V)
CLASSIFIER_INIT_STD = 0.02

# Layer-norm epsilon
LAYER_NORM_EPS = 1e-5

# Scale AIF dot products by 1/sqrt(d_q) before the softmax.
# The plain dot product of the published formula is available with False.
AIF_SCALE_QK = True

# Share the joint network's prediction-side classifier with the LM classifier.
# Kept separate by default; the tied variant is untested against published results.
TIE_JOINT_LM = False

# Alignment mechanism feeding the joint network: "aif" or "cif"
ALIGNMENT_MODE = "aif"


# ==============================================================================
# NUMERICS
# ==============================================================================

# Log-space "minus infinity" used where arithmetic must stay finite:
# masked attention logits, masked blank logits and the forbidden [eos] branch of
# the online CTC prefix score. -1e30 * (1 - beta) + finite stays finite, so
# score differences never produce NaN.
LOG_SENTINEL = -1e30

# Tolerance used when counting full CIF fires: floor(sum(alpha) + eps)
CIF_FIRE_EPS = 1e-9

# Largest path space the brute-force CTC oracle will enumerate (V ** T)
ORACLE_MAX_PATHS = 10 ** 7

# Enumerated (T, V) path tables the oracle keeps, least recently used dropped first
ORACLE_PATH_CACHE_SIZE = 16


# ==============================================================================
# TRAINING (composite loss and the optimiser loop)
# ==============================================================================

# CTC weight gamma in L = gamma*L_ctc + (1-gamma)*L_ce + mu*L_qua*L  (0.0 - 1.0)
CTC_WEIGHT = 0.5

# Quantity-loss weight mu (>= 0)
QUANTITY_WEIGHT = 0.05

# Train an extra joint position targeting [eos] with boundary T
TRAIN_EOS = True

# Adaptive-moment optimiser settings
LEARNING_RATE = 2e-3
ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.98
ADAM_EPS = 1e-9

# Linear warmup length in optimiser steps; the rate then decays as 1/sqrt(step)
WARMUP_STEPS = 200

# Global gradient-norm clip (0 disables clipping)
GRAD_CLIP = 5.0

# Utterances per optimiser step
BATCH_SIZE = 16

# Passes over the training set
EPOCHS = 30

# Passes over the text corpus for LM pretraining and for adaptation
LM_EPOCHS = 10
ADAPT_EPOCHS = 5

# Default seed for every named random stream
SEED = 0


# ==============================================================================
# DECODING (joint scoring and shallow fusion)
# ==============================================================================

# Beam width
BEAM_SIZE = 10

# Online CTC weight beta in S = beta*S_ctc + (1-beta)*S_lst  (0.0 - 1.0)
# 0.3 is the general setting; 0.4 was used for lecture-style speech.
DECODE_CTC_WEIGHT = 0.3

# External LM weight for shallow fusion. 0.0 disables fusion;
# 0.2 is the recommended value when a target-domain LM is available.
LM_WEIGHT = 0.0
FUSION_LM_WEIGHT = 0.2

# Hard cap on the number of emitted labels (including [eos])
MAX_OUTPUT_LENGTH = 64

# Extra labels allowed beyond ceil(sum(alpha)) before decoding stops
LENGTH_CAP_MARGIN = 5

# Apply the [eos] modification of the online CTC prefix score
# (forbid [eos] before every frame has been read)
ONLINE_EOS_RULE = True


# ==============================================================================
# SYNTHETIC TASK
# ==============================================================================

# Sub-unit ("phone") inventory size; each token owns 1-3 sub-units
NUM_PHONES = 40
MIN_PHONES_PER_TOKEN = 1
MAX_PHONES_PER_TOKEN = 3

# Target length range N (inclusive)
MIN_TOKENS = 3
MAX_TOKENS = 10

# Frames emitted per token (inclusive range)
MIN_DURATION = 2
MAX_DURATION = 6

# Standard deviation of the Gaussian frame noise
FEATURE_NOISE = 0.3

# Successors favoured by each Markov chain row, and the probability mass
# left for all other successors
PREFERRED_SUCCESSORS = 3
OFF_PREFERENCE_MASS = 0.1

# Number of utterances produced by `synth` when --count is not given
DEFAULT_UTTERANCE_COUNT = 2000


# ==============================================================================
# GRADIENT CHECKS
# ==============================================================================

# Finite-difference steps: primitives use a fourth-order central stencil,
# the full training loss a second-order one
PRIMITIVE_FD_STEP = 1e-3
LOSS_FD_STEP = 1e-5

# Pass thresholds on the largest entrywise relative error,
# |a - b| / max(|a|, |b|, floor)
PRIMITIVE_REL_TOLERANCE = 1e-5
LOSS_REL_TOLERANCE = 1e-4
REL_ERROR_FLOOR = 1e-8

# Parameters sampled by the loss gradient check, and the smallest analytic
# gradient magnitude a sampled entry may have (keeps round-off out of the ratio)
LOSS_CHECK_PARAMS = 20
LOSS_CHECK_MIN_GRAD = 1e-3


# ==============================================================================
# FILE FORMATS AND EXIT CODES
# ==============================================================================

# Checkpoint header
CHECKPOINT_MAGIC = b"LSTK"
CHECKPOINT_VERSION = 1

# Names used inside a run directory
MODEL_CONFIG_NAME = "model.cfg"
FINAL_CHECKPOINT_NAME = "final.lstk"
METRICS_LOG_NAME = "metrics.csv"

EXIT_SUCCESS = 0
EXIT_USAGE = 2
EXIT_DATA_ERROR = 3
EXIT_NUMERIC_FAILURE = 4
