"""Information limits of continuously monitored open quantum sensors.

Propagates replica master equations (dense oracle and folded tensor-network
TEBD), assembles Bargmann invariants into a monotone information series, and
ships model builders for driven emitters, cascaded photon sources and
pseudomode embeddings of structured environments.
"""

__version__ = "0.1.0"

from .bargmann import BargmannSeries, ReplicaPattern, time_grid
from .errors import (ConfigError, ModelError, NumericsError,
                     PropagationError, ReplicaQfiError, ResourceLimitError)
from .model import (Channel, PseudomodeSpec, SensorModel, SourceSpec,
                    attach_pseudomodes, build_dlevel, build_liouvillian_L0,
                    build_tls, cascade_with_source,
                    check_pseudomode_truncation, fit_lorentzians,
                    lorentzian_spectrum, retag_monitored,
                    single_photon_source)
from .qfi import (EngineConfig, MutualInformationResult, QfiEvaluator,
                  QfiResult, coeff_D, compute_fm, compute_lambda,
                  evaluate_pattern, mutual_information, qfi_series,
                  renyi_entropy)
from .reference import (BinnedFieldState, analytic_decay_qfi,
                        collision_field_state, exact_qfi_eigen,
                        fm_from_states)
from .registry import build_model, describe_models
from .replica_dense import (ReplicaStateDense, bargmann_dense,
                            build_replica_generator, initial_replica_state,
                            propagate_dense)
from .replica_tebd import (ReplicaMPS, TrotterGate, bargmann_tebd,
                           bond_entropy_profile, build_gate, fold_index_map,
                           tebd_step)

__all__ = [name for name in dir() if not name.startswith("_")]
