"""splitfed: deterministic desk-scale split federated learning lab."""

from .config import ExperimentConfig, config_from_dict, parse_config
from .data import (Dataset, Partition, gen_synthetic, load_idx, minibatch_stream,
                   partition_dirichlet, partition_iid, round_batches)
from .engine import (Adam, Conv2D, Dense, Flatten, LayeredModel, Relu, Sgd,
                     SoftmaxOutput, cross_entropy, grad_check, make_optimizer)
from .estimator import SplitFedClassifier
from .models import build_conv, build_mlp, engine_cut
from .protocols import (ClientState, CommLedger, RoundConfig, TrainingServerState,
                        aggregate_weighted, comm_cost, evaluate, init_protocol,
                        run_centralized_round, run_fedavg_round, run_round,
                        run_sflv1_round, run_sflv2_round, run_sl_round)
from .runner import (checkpoint_load, checkpoint_save, diagnose, emit_metrics,
                     oracle_v1, run_experiment, run_sweep)
from .split import (CutPayloadProfile, SplitModel, client_backward, client_forward,
                    payload_profile, server_forward_backward, split, stitch)

__version__ = "0.1.0"
