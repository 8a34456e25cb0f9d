"""
Default constants for the depth-forge pipeline.

This file centralizes the numeric defaults used by augmentation, marker
rendering, question generation, evaluation and reward computation. The
pipeline config file and CLI flags override these values per run; the
values here are what a run gets when nothing is overridden.
"""

# Intrinsic-Conditioned Augmentation
# ----------------------------------
# Every image is resized so its focal length equals a shared constant, which
# removes the camera-scale ambiguity between datasets.

# Unified focal length in pixels. Smaller models with tighter memory limits
# have been trained with 750.
F_UNI = 1000.0

# Inclusive ranges for the random crop applied to training images after the
# focal length has been unified. Evaluation images are never cropped.
CROP_WIDTH_RANGE = (1000, 1400)
CROP_HEIGHT_RANGE = (700, 1200)

# Guard against very large images after focal unification (e.g. a wide-angle
# 4K frame with a tiny focal length). Set to None in parity runs.
MAX_DIMENSION = 4096


# Visual Markers
# --------------
# A marker around 5 pixels wide is enough for a VLM to recognise it.

MARKER_STYLE = "arrow"
MARKER_STROKE_WIDTH = 5
MARKER_SIZE = 40
MARKER_COLOR = (255, 0, 0)
MARKER_LABEL_MAX_CHARS = 8


# Tasks
# -----

# Number of labeled pixels drawn per image when preparing training samples.
PIXELS_PER_IMAGE = 1

# Given-value ranges for the reasoning tasks. Values are drawn uniformly and
# rounded to one decimal before they appear in the question.
GIVEN_TIME_RANGE_S = (2.0, 20.0)
GIVEN_SPEED_RANGE_MPS = (0.5, 10.0)

# Camera displacement accepted for pose pairs (meters).
POSE_DISPLACEMENT_RANGE_M = (0.5, 50.0)

# How many times an invalid query pixel is redrawn before giving up.
MAX_PIXEL_RESAMPLES = 16


# Data
# ----

# Depth readings above this many meters are masked invalid.
MAX_DEPTH_M = 300.0

# Default depth encoding: 16-bit PNG storing millimeters.
DEFAULT_DEPTH_ENCODING = "png16"
DEFAULT_DEPTH_SCALE = 0.001

# Datasets sampled with a reduced weight in the training mixture because
# they contain few scenes. Everything else defaults to weight 1.
DOWNWEIGHTED_DATASETS = {"matterport3d": 0.1}

# Version stamped into every manifest, SFT and report record.
SCHEMA_VERSION = "1"


# Evaluation
# ----------

# Random samples evaluated per dataset; larger counts change results
# negligibly.
EVAL_SAMPLES_PER_DATASET = 8192

# Threshold of the standard depth accuracy metric.
DELTA1_THRESHOLD = 1.25

# The naive baseline always answers this many meters.
CONSTANT_BASELINE_M = 2.0

# Abort an evaluation when more than this fraction of queries failed at the
# transport level.
TRANSPORT_FAILURE_ABORT_RATIO = 0.5


# GRPO Rewards
# ------------

GRPO_GROUP_SIZE = 8
GRPO_BETA = 0.0
GRPO_FORMAT_FAIL_REWARD = -10.0


# Inference Endpoint
# ------------------

ENDPOINT_MAX_CONCURRENCY = 8
ENDPOINT_REQUEST_TIMEOUT_S = 120.0
ENDPOINT_MAX_RETRIES = 3
ENDPOINT_TEMPERATURE = 0.0
BACKOFF_BASE_S = 1.0
BACKOFF_FACTOR = 2.0
# Upper bound of the uniform jitter added to every backoff delay, as a
# fraction of that delay.
BACKOFF_JITTER = 0.1


# Point Clouds
# ------------

# Pixels queried per image, spread on a uniform lattice.
POINTCLOUD_GRID_PIXELS = 10000
