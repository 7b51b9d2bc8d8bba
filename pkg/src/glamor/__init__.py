"""Goal-conditioned planning with inverse-dynamics and action-prior sequence models."""
from .agent import (EpsilonSchedule, EvalReport, GCSLActor, GlamorTrainConfig,
                    TabularGCSLPolicy, build_eval_goal_set, evaluate, gcsl_exact_map,
                    gcsl_train, glamor_train)
from .env import DieEnv, GridEnv, SimonSaysEnv, make_env
from .planner import GlamorActor, PlannerConfig, ScoredPlan, plan, score_sequence, z_scores
from .replay import ReplayBuffer, Trajectory, relabel
from .seqmodel import make_models, train_batch

__version__ = "0.1.0"
