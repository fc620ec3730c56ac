"""Executor backends sharing one submit/poll contract."""

from .base import (DESCRIPTORS, NULL_EPSILON, AlreadyTerminal, BackendDescriptor, BackendEvent, BackendFamily,
                   BackendInstance, BackendParams, EventKind, Lifecycle, Rejected, SimBackend,
                   SubState, Submission, UnknownSubmission)
from .capped import CappedBackend, CapState
from .hierarchical import (HierarchicalBackend, InstanceQueue, JobDescription, QueuePolicy,
                           deserialize_job, schedule_step, serialize_job)
from .workerpool import CompletionRecord, DispatchRule, WorkerPool, WorkerPoolBackend

SIM_CLASSES = {
    BackendFamily.CAPPED: CappedBackend,
    BackendFamily.HIERARCHICAL: HierarchicalBackend,
    BackendFamily.WORKERPOOL: WorkerPoolBackend,
}

__all__ = [
    "AlreadyTerminal", "BackendDescriptor", "BackendEvent", "BackendFamily", "BackendInstance",
    "BackendParams", "CapState", "CappedBackend", "CompletionRecord", "DESCRIPTORS", "DispatchRule",
    "EventKind", "HierarchicalBackend", "InstanceQueue", "JobDescription", "Lifecycle", "NULL_EPSILON",
    "QueuePolicy", "Rejected", "SIM_CLASSES", "SimBackend", "SubState", "Submission",
    "UnknownSubmission", "WorkerPool", "WorkerPoolBackend", "deserialize_job", "schedule_step",
    "serialize_job"
]
