"""closim: flow-level simulator for multi-tenant GPU training clusters
on Leaf-Spine fabrics, with contention-free source routing and reserved
virtual-Clos placement (optionally OCS-assisted)."""

from .topology import ClusterConfig, PhysicalCluster, VirtualClos, build_cluster
from .patterns import Algo, CommSchedule, CommStep, Flow, make_schedule
from .placement import JobRequest, NoFit, place
from .simulator import Job, JobProfile, SimReport, run, synthesize_trace

__version__ = "0.1.0"

__all__ = [
    "ClusterConfig", "PhysicalCluster", "VirtualClos", "build_cluster",
    "Algo", "CommSchedule", "CommStep", "Flow", "make_schedule",
    "JobRequest", "NoFit", "place",
    "Job", "JobProfile", "SimReport", "run", "synthesize_trace",
    "__version__",
]
