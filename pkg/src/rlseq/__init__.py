"""rlseq: a two-level multi-agent PPO leaf sequencer.

Turns a 2D target fluence map into a machine-deliverable sequence of
multileaf-collimator positions and monitor units, with the training
environment, rewards, normalization, classical baseline, and metrics needed
to train and evaluate it end to end on synthetic data.
"""

from .baseline import sweep_sequencer
from .core import (
    FluenceGrid,
    LeafPair,
    MachineState,
    PlanSequence,
    accumulate,
    aperture_area_perimeter,
    unit_fluence,
)
from .dataio import (
    SynthConfig,
    gen_fluence,
    read_fluence,
    read_manifest,
    read_plan,
    write_fluence,
    write_manifest,
    write_plan,
)
from .env import (
    EnvConfig,
    EnvState,
    LeafAction,
    LeafObservation,
    MuAction,
    MuObservation,
    enforce,
    observe_leaf,
    observe_mu,
    reset,
    step_cp,
)
from .errors import ContractError, DataError, NumericError, ParseError, UsageError
from .metrics import leaf_speed_stats, mnse, reconstruct
from .normalize import (
    CropBox,
    crop_and_resize,
    detect_roi,
    make_crop,
    map_positions_back,
    merge_control_points,
)
from .ppo import (
    RolloutBuffer,
    TrainConfig,
    Transition,
    collect_rollouts,
    compute_gae,
    policy_loss,
    probability_ratio,
    random_sequence,
    sequence,
    train,
    value_loss,
)
from .refine import RidgeConfig, ridge_refine
from .rewards import (
    RewardBreakdown,
    RewardWeights,
    reward1,
    reward2,
    reward3,
    reward4,
    reward5,
    total_reward,
)

__version__ = "0.1.0"
