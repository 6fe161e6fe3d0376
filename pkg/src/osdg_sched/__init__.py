"""Adaptive hardest-domain scheduling for open-set domain generalization,
end to end on seeded synthetic multi-domain datasets."""

from .autodiff import Tensor, backward, gaussian_gram, new_graph, no_grad, sgd_step
from .config import RunConfig
from .datasets import DomainDataset, generate, load, sample_batch, save
from .networks import ArchConfig, FollowerNetwork, MainNetwork, init_networks
from .scheduling import ScheduleState, SchedulerKind, domain_reliability, select_hardest
from .training import MetaBatch, TrainConfig, build_meta_batch, meta_step, train

__version__ = "0.1.0"
