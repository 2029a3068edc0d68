"""rimbus: a layered pub/sub middleware for multi-chip vehicle computers, with a desk-scale testbed."""

from rimbus.core import (ConfigError, EncodingError, MessageEnvelope, RimbusError, Scope, SizeClass,
                         SystemConfig, TopicKey, checksum, decode_envelope, encode_envelope,
                         load_config)
from rimbus.discovery import RouteUnavailable, Transport, select_transport
from rimbus.node import (Delivery, DuplicateNode, NoProvider, RemoteError, create_node,
                         service_call, service_register)

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "Delivery", "DuplicateNode", "EncodingError", "MessageEnvelope", "NoProvider",
    "RemoteError", "RimbusError", "RouteUnavailable", "Scope", "SizeClass", "SystemConfig",
    "TopicKey", "Transport", "checksum", "create_node", "decode_envelope", "encode_envelope",
    "load_config", "select_transport", "service_call", "service_register",
]
