"""Layered distribute / synchronize / step protocol and the training stack built on it."""

from .node import AsyncHandle, LayerNode, WorkerFailure, distribute, inprocess_node, step, synchronize
from .protocol import Envelope, Layer, ProtocolError, Verb, shard

__all__ = [
    "AsyncHandle",
    "Envelope",
    "Layer",
    "LayerNode",
    "ProtocolError",
    "Verb",
    "WorkerFailure",
    "distribute",
    "inprocess_node",
    "shard",
    "step",
    "synchronize",
]
