import os
from pathlib import Path

PROJECT_ROOT = Path(__file__).resolve().parent.parent

TOOL_VERSION = "1.0.0"

CACHE_DIR  = Path(os.getenv("TRIPLAN_CACHE_DIR", PROJECT_ROOT / "cache"))
OUTPUT_DIR = Path(os.getenv("TRIPLAN_OUTPUT_DIR", PROJECT_ROOT / "output"))

PIPELINE_LOG_NAME = "pipeline.log"

# --- Artifact names written by the `run` pipeline ---
BEST_PLAN_FILE = "best_plan.json"
SCHEDULE_FILE  = "schedule.json"
TRACE_FILE     = "trace.json"
REPORT_FILE    = "report.json"

# --- Memory model ---
BYTES_PER_PARAM      = 16          # fp16 weight + grad, fp32 Adam states
ACTIVATION_CONSTANT  = 34          # bytes per token-hidden unit per layer
BUFFER_BYTES         = 256 * 2**20 # temporary buffers counted in M_r
BOUNDARY_FRACTION    = 1 / 34      # checkpointed block input vs full block activation
RECOMPUTE_STEP       = 0.05        # alpha_1 probing grid

# --- Search defaults ---
GPUS_PER_NODE          = 4
MICROBATCH_CANDIDATES  = (1, 2, 4, 8)
DEFAULT_POLICY         = "scp"
DEFAULT_SEQ_LEN        = 1024

# --- Cost template (one time unit is a millisecond) ---
TIME_PER_PARAM_SAMPLE  = 2e-8      # ~2k FLOPs per parameter-token at ~100 TFLOP/s
# bytes per millisecond; None means free transfers
P2P_BANDWIDTH          = 50e6      # InfiniBand between nodes, 50 GB/s
DP_BANDWIDTH           = 50e6
TMP_BANDWIDTH          = 900e6     # NVLink inside a node, 900 GB/s

# --- Sub-pipelined TMP ---
SUB_MICROBATCHES       = 2
SMALL_BATCH_PENALTY    = {1: 1.2}  # T_m multiplier per sub-microbatch size

# Chrome trace: microseconds per simulated time unit
TRACE_US_PER_UNIT = 1000
