"""Categorical user-sequence compression for generative recommendation."""
from .compressor import Bucket, BucketPlan, compress, group_by_category, select_buckets
from .datalog import (Interaction, ItemCatalog, SplitSpec, SynthConfig, UserSequence, generate_synthetic,
                      load_events, partition_history_recent, split, write_events)
from .model import CauseModel, ModelConfig, assemble_sequence
from .training import TrainConfig, train

__version__ = "0.1.0"
