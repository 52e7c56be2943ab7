"""
Configuration and constants for the patchalign toolkit
"""

# Joint objective weights
LAMBDA_PAL = 0.5
ALPHA_NCE = 0.3
BETA_OT = 0.5

# Attention pooling
TAU_ATTN = 1.0
RHO = 0.5
LAST_K = 2
RETENTION_MODES = ("mass", "count")
DEFAULT_RETENTION_MODE = "mass"

# Contrastive / transport
NCE_TEMP = 0.07
OT_EPS = 0.05
OT_ITERS = 30
LP_ORACLE_MAX_DIM = 8

# Reproducibility
DEFAULT_SEED = 42

# Numerical floors
NORM_FLOOR = 1e-12          # below this a norm is treated as zero (hard error)
ROW_SUM_TOLERANCE = 1e-6    # attention rows must sum to 1 within this
LOG_ZERO = -1e4             # finite stand-in for log(0) inside unrolled Sinkhorn
MASK_FILL = -1e9            # additive mask for excluded attention / contrastive entries
GRAD_CHECK_FLOOR = 1e-3     # denominator floor for relative gradient errors

# Toy captioner
IMAGE_GRID = 16             # pixels per side
PATCH_SIZE = 4              # pixels per patch side -> 16 patches
IMAGE_CHANNELS = 3
ENCODER_WIDTH = 24          # C
MODEL_WIDTH = 32            # D
NUM_LAYERS = 2
NUM_HEADS = 2
FFN_WIDTH = 64
VOCAB_SIZE = 64
MAX_CAPTION_LEN = 12
PAD_ID = 0
BOS_ID = 1
EOS_ID = 2
UNK_ID = 3

# Optimiser / schedule (no published values; chosen for toy-scale stability)
BATCH_SIZE = 8
PEAK_LR = 3e-3
FINAL_LR = 1e-5
WARMUP_FRAC = 0.1
WEIGHT_DECAY = 0.01
ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8
CLIP_NORM = 1.0
ACCUMULATION_STEPS = 1
UNFREEZE_FRACTIONS = (1 / 6, 2 / 6)
DEFAULT_EPOCHS = 6

# Sensitivity sweep: (lambda_pal, tau_attn, rho) settings run by default
SWEEP_POINTS = (
    (0.3, 0.7, 0.5),
    (0.5, 0.7, 0.1),
    (0.5, 1.0, 0.5),
    (0.5, 1.3, 0.5),
)

# Decoding
BEAMS = 1
NO_REPEAT_NGRAM = 0
LENGTH_PENALTY = 1.0

# Data pipeline
VERIFY_THRESHOLD = 0.55
PROMPT_TEMPLATE = "A photo of: {en}. In Bengali: {bn}"
PROMPT_TOKEN_CAP = 77
EN_TOKEN_BUDGET = 37
BN_TOKEN_BUDGET = 40
SIDECAR_SEED = 42
NEGATIVE_PROMPT = "low quality, bad anatomy, watermark"
RECORD_FIELDS = ("caption_id", "image_id", "text_en", "text_bn", "similarity", "valid")
SHARD_WORKERS = 4

# Diagnostics
MAX_BLEU_ORDER = 4
AUC_SKIP_FRAC = 0.1

# Output
RESULTS_DIR = "results"
LOG_LEVEL_ENV = "PATCHALIGN_LOG_LEVEL"
