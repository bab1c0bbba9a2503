"""Exception hierarchy shared by every edgeflow module."""


class EdgeflowError(Exception):
    """Base class for all edgeflow errors."""


# -- templates ---------------------------------------------------------------


class TemplateError(EdgeflowError):
    line: int | None = None


class TemplateSyntaxError(TemplateError):
    def __init__(self, line: int, message: str = "malformed line"):
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownKey(TemplateError):
    def __init__(self, key: str, line: int | None = None):
        super().__init__(f"unknown key {key!r}")
        self.key = key
        self.line = line


class DuplicateKey(TemplateError):
    def __init__(self, key: str, line: int | None = None):
        super().__init__(f"duplicate key {key!r}")
        self.key = key
        self.line = line


class MissingKey(TemplateError):
    def __init__(self, key: str):
        super().__init__(f"missing required key {key!r}")
        self.key = key


class InvalidValue(TemplateError):
    def __init__(self, key: str, value: str, line: int | None = None):
        super().__init__(f"invalid value for {key!r}: {value!r}")
        self.key = key
        self.value = value
        self.line = line


class InvalidRef(TemplateError):
    def __init__(self, value: str, line: int | None = None):
        super().__init__(f"invalid storage reference {value!r} (expected backend://key)")
        self.value = value
        self.line = line


class InvalidCron(TemplateError):
    def __init__(self, value: str, line: int | None = None, reason: str = ""):
        msg = f"invalid cron value {value!r}"
        super().__init__(f"{msg}: {reason}" if reason else msg)
        self.value = value
        self.line = line


class IndexMismatch(TemplateError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(message)
        self.line = line


# -- graph -------------------------------------------------------------------


class GraphError(EdgeflowError):
    pass


class DuplicateFunction(GraphError):
    def __init__(self, name: str):
        super().__init__(f"function {name!r} defined more than once")
        self.name = name


class UnknownSuccessor(GraphError):
    def __init__(self, source: str, target: str):
        super().__init__(f"{source!r} names unknown next_function {target!r}")
        self.source = source
        self.target = target


class CycleDetected(GraphError):
    def __init__(self, path: list[str]):
        super().__init__("cycle: " + " -> ".join(path))
        self.path = path


class MultipleEntries(GraphError):
    def __init__(self, names: list[str]):
        super().__init__(f"workflow has more than one entry: {', '.join(names)}")
        self.names = names


class Unreachable(GraphError):
    def __init__(self, names: list[str]):
        super().__init__(f"functions unreachable from entry: {', '.join(names)}")
        self.names = names


class NoBranchMatch(GraphError):
    def __init__(self, function: str, data_name: str):
        super().__init__(f"{function!r} produced {data_name!r}, which matches no declared output")
        self.function = function
        self.data_name = data_name


# -- storage -----------------------------------------------------------------


class StorageError(EdgeflowError):
    pass


class UnknownBackend(StorageError):
    def __init__(self, name: str):
        super().__init__(f"no backend registered as {name!r}")
        self.name = name


class BackendUnavailable(StorageError):
    def __init__(self, name: str, cause: object):
        super().__init__(f"backend {name!r} unavailable: {cause}")
        self.name = name
        self.cause = cause


class CapacityExceeded(StorageError):
    def __init__(self, budget: int, requested: int):
        super().__init__(f"store of {requested} bytes exceeds the {budget}-byte budget")
        self.budget = budget
        self.requested = requested


class NotFound(StorageError):
    def __init__(self, ref: object):
        super().__init__(f"no object at {ref}")
        self.ref = ref


# -- runtime / gateway -------------------------------------------------------


class ExecutionError(EdgeflowError):
    pass


class DuplicateHandler(ExecutionError):
    def __init__(self, handler_id: str):
        super().__init__(f"handler {handler_id!r} already registered")
        self.handler_id = handler_id


class StartupValidation(ExecutionError):
    def __init__(self, problems: list[str]):
        super().__init__("startup validation failed: " + "; ".join(problems))
        self.problems = problems


class HandlerPanic(ExecutionError):
    def __init__(self, function: str, cause: object):
        super().__init__(f"handler of {function!r} failed: {cause!r}")
        self.function = function
        self.cause = cause


class InputMissing(ExecutionError):
    def __init__(self, ref: object):
        super().__init__(f"input {ref} not found")
        self.ref = ref


class DownstreamFailure(ExecutionError):
    def __init__(self, function: str, tier: str, cause: object = None):
        super().__init__(f"downstream {function!r} on tier {tier!r} failed: {cause}")
        self.function = function
        self.tier = tier
        self.cause = cause


class UnknownFunction(ExecutionError):
    def __init__(self, name: str):
        super().__init__(f"function {name!r} is not served here")
        self.name = name


class TierUnreachable(ExecutionError):
    def __init__(self, tier: str, cause: object = None):
        super().__init__(f"tier {tier!r} unreachable" + (f": {cause}" if cause else ""))
        self.tier = tier
        self.cause = cause


class InvokeTimeout(ExecutionError):
    def __init__(self, tier: str, budget_ms: float):
        super().__init__(f"invocation on tier {tier!r} exceeded {budget_ms:g} ms")
        self.tier = tier
        self.budget_ms = budget_ms


class BindError(ExecutionError):
    def __init__(self, addr: str, cause: object):
        super().__init__(f"cannot bind {addr}: {cause}")
        self.addr = addr


# -- metrics / scheduler -----------------------------------------------------


class EmptySamples(EdgeflowError, ValueError):
    def __init__(self):
        super().__init__("percentile of an empty sample set")


class ScenarioError(EdgeflowError):
    def __init__(self, message: str, line: int | None = None):
        super().__init__(f"line {line}: {message}" if line else message)
        self.line = line
