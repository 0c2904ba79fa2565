"""Exception hierarchy shared by every layer of the store.

The CLI maps each family onto an exit code, so new exceptions should derive
from one of the family bases rather than from ``StoreError`` directly.
"""


class StoreError(Exception):
    exit_code = 1


class ConfigError(StoreError, ValueError):
    exit_code = 2


class SpaceExhausted(StoreError):
    exit_code = 3


class ReplicationLost(StoreError):
    exit_code = 4


class CorruptionError(StoreError):
    exit_code = 5


# device
class OutOfPhysicalSpace(SpaceExhausted):
    pass


class Unmapped(StoreError, KeyError):
    pass


class Unrepresentable(StoreError, ValueError):
    pass


class CorruptImage(CorruptionError):
    pass


# codec
class CorruptPayload(CorruptionError):
    pass


class OutOfRange(StoreError, IndexError):
    pass


# space / index
class OutOfLogicalSpace(SpaceExhausted):
    pass


class OutOfLogSpace(SpaceExhausted):
    pass


class DoubleFree(StoreError):
    pass


class NotFound(StoreError, KeyError):
    pass


class CorruptWal(CorruptionError):
    pass


# chunk store
class FutureLsn(StoreError, ValueError):
    pass


class StaleLsn(StoreError, ValueError):
    pass


# scheduler
class IllegalMove(StoreError):
    pass


class ClusterFull(SpaceExhausted):
    pass


# cli / workload
class AlreadyInitialized(StoreError):
    exit_code = 2


class MissingCorpus(StoreError, FileNotFoundError):
    exit_code = 2


class SimulatedCrash(Exception):
    """Raised by fault-injection hooks; deliberately not a StoreError."""
