import os

from slotgate.foundations import (
    Anything,
    SLOTGATE_DATA_DIR,
)

APP_NAME = 'slotgate'
APP_VERSION = '0.4.2'

DEFAULTS_FILENAME = os.path.join(SLOTGATE_DATA_DIR, 'defaults.yaml')

ExitCodes = Anything()
ExitCodes.OK        = 0
ExitCodes.FAILURE   = 1
ExitCodes.CONFIG    = 2
ExitCodes.NUMERICAL = 3
ExitCodes.IO        = 4

# ——————————————————————————————————————————————————————————————— numerics

L2_NORMALIZE_EPSILON = 1e-12
COSINE_DEGENERATE_NORM = 1e-12
TOKEN_AXIS_EPSILON = 1e-9
BCE_CLAMP = 1e-7
MINMAX_DEGENERATE_RANGE = 1e-9

# Additive attention mask value. Finite so tensors stay contract-valid.
MASKED_SCORE = -1e30

# ——————————————————————————————————————————————————————— Ablation switches

GATING_MODES = ('off', 'query-agnostic', 'query-dependent')
GATING_SOURCES = ('before-down', 'after-down', 'after-reconstruction')
LAYER_SELECTIONS = ('all', 'last')
RECONSTRUCTIONS = ('attention-reuse', 'cross-attention')
RECONSTRUCTION_MAPS = ('slot-axis', 'token-axis')
BOTTLENECKS = ('slot', 'self-attention')
PLACEMENTS = ('decoder', 'pre-decoder')
EBD_MAPS = ('slot-axis', 'token-axis')

NOISE_TARGETS = ('gt_interval', 'random_interval', 'non_gt_all')

# ———————————————————————————————————————————————————————————— Vocabulary

SPECIAL_TOKENS = ('<pad>', '<boa>', '<eoa>', '<sep>')
DIGIT_TOKENS = tuple(str(digit) for digit in range(10))

# Answer vocabulary: rows of the embedding table trained during adaptation.
ANSWER_TOKENS = ('<boa>', '<eoa>', '<sep>') + DIGIT_TOKENS

ENTITY_WORDS = (
    'man', 'woman', 'child', 'dog', 'cat', 'ball', 'chair', 'table',
    'door', 'cup', 'book', 'phone', 'car', 'bike', 'box', 'bag',
    'lamp', 'bed', 'window', 'shoe',
)

VERB_WORDS = (
    'holds', 'opens', 'throws', 'sits', 'walks',
    'takes', 'puts', 'looks', 'pushes', 'carries',
)

# Fixed concepts for query-agnostic gating.
GENERIC_SUBJECT_WORD = 'person'
GENERIC_OBJECT_WORD = 'object'

QUERY_WORDS = ENTITY_WORDS + VERB_WORDS + (
    GENERIC_SUBJECT_WORD, GENERIC_OBJECT_WORD)

TIMESTAMP_RANGE = 100

# Answer: <boa> up-to-3 digits <sep> up-to-3 digits <eoa>
MAX_ANSWER_TOKENS = 9

# —————————————————————————————————————————————————————————— Store formats

TENSOR_DTYPE = 'f64'
DATASET_FORMAT_VERSION = 1
CHECKPOINT_FORMAT_VERSION = 1

MANIFEST_FILENAME = 'manifest.json'
SAMPLES_FILENAME = 'samples.jsonl'
CONCEPTS_FILENAME = 'concepts'
VIDEOS_DIRNAME = 'videos'

RESOLVED_CONFIG_FILENAME = 'resolved_config.json'
METRICS_LOG_FILENAME = 'metrics.jsonl'
METRICS_FILENAME = 'metrics.json'
PREDICTIONS_FILENAME = 'predictions.jsonl'
DATA_DIRNAME = 'data'
CHECKPOINT_DIRNAME = 'checkpoint'
ABLATION_DIRNAME = 'ablation'
DIAGNOSTICS_DIRNAME = 'diagnostics'
LOGS_DIRNAME = 'logs'
LOG_FILENAME = 'slotgate.log'

LOG_FILE_MAX_BYTES = 1048576
LOG_FILE_BACKUPS = 5

RECALL_THRESHOLDS = (0.3, 0.5, 0.7)

SPLITS = ('train', 'id_eval', 'ood_eval')
EVAL_SPLITS = ('id_eval', 'ood_eval')
