"""Branch-parallel block diffusion decoding with a deterministic synthetic
denoiser, confidence-gated merging, leader sync, periodic KV refresh, and
vector-space cache diagnostics."""

from .decoding import (DecodeConfig, GenerationResult, NfeCounter, TraceEvent,
                       confidence_transition, single_branch_decode,
                       vanilla_decode)
from .model import (BlockWindow, DenoiseOutput, KvCache, ModelDims,
                    ModelParams, SequenceRow, Task, Vocab, block_forward,
                    build_model, full_forward, kv_vectorize, make_task)
from .scheduler import (SchedulerConfig, merge_sync, read_trace,
                        run_blockbatch, write_trace)

__version__ = "0.1.0"
