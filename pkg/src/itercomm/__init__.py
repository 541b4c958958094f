"""Communication kernel for synchronous and asynchronous parallel iterations."""
from .comm import ASYNC, OVERLAP, TRIVIAL, CommMode, CommStats, Communicator, run_scheme
from .convergence import (NormAccumulator, NormSpec, SnapshotDetector, TreeReduction,
                          local_accumulate, tree_norm)
from .errors import (ChannelOverflowError, ConfigurationError, DiscretizationError,
                     InfeasiblePartitionError, IterCommError, NonConvergenceError,
                     ProtocolDeadlockError, ProtocolError, UsageError)
from .harness import RunConfig, RunReport, emit_report, parse_config, run_experiment
from .solver import (DiscreteSystem, LocalBlock, ProblemSpec, discretize, jacobi_local_step,
                     sequential_oracle, time_step_loop)
from .topology import (CommGraph, Partition3D, SpanningTree, build_partition,
                       build_spanning_tree, partition_to_graph)
from .transport import DelayModel, Envelope, SimNetwork, SocketNetwork, Tag, open_channels

__version__ = "0.1.0"
