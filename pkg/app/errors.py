from __future__ import annotations

from typing import Optional


class SDFLMQError(Exception):
    """Root of every error raised by this package."""


class ProtocolError(SDFLMQError):
    """A peer sent a message that violates the session protocol."""


# ----------------------------------------
# TRANSPORT
# ----------------------------------------
class TransportError(SDFLMQError):
    pass


class TopicValidationError(SDFLMQError, ValueError):
    pass


# ----------------------------------------
# FLEET CONTROL
# ----------------------------------------
class FleetControlError(SDFLMQError):
    pass


class BindingError(FleetControlError):
    pass


class PayloadSizeError(FleetControlError, ValueError):
    pass


class EnvelopeParseError(FleetControlError, ValueError):
    pass


class IntegrityError(FleetControlError):
    pass


# ----------------------------------------
# MODEL CORE
# ----------------------------------------
class ModelCoreError(SDFLMQError):
    pass


class ParamsParseError(ModelCoreError, ValueError):
    pass


class AggregationError(ModelCoreError):
    pass


class EmptyAggregationError(AggregationError, ValueError):
    pass


class SchemaError(ModelCoreError, ValueError):
    pass


class TrainingDivergenceError(ModelCoreError):
    pass


class DatasetError(ModelCoreError, ValueError):
    pass


# ----------------------------------------
# COORDINATOR
# ----------------------------------------
class CoordinatorError(SDFLMQError):
    pass


class SessionRejected(CoordinatorError):
    def __init__(self, reason: str, detail: Optional[str] = None):
        super().__init__(detail or reason)
        self.reason = reason


class ConfigurationError(CoordinatorError, ValueError):
    pass


class TopologyError(CoordinatorError, ValueError):
    pass


# ----------------------------------------
# CLIENT
# ----------------------------------------
class ClientError(SDFLMQError):
    pass


class ConnectivityError(ClientError):
    pass


class ClientStateError(ClientError):
    pass


class RoundTimeoutError(ClientError, TimeoutError):
    pass


class SessionTerminated(ClientError):
    pass

