"""Ground-truth access audit.

The defender never sees which samples were poisoned or what the target class
is. Code on the defense path runs inside :func:`defense_path`; any read of
``LabeledDataset.poison_mask`` or ``LabeledDataset.target_class`` there raises
:class:`MaskAccessViolation` unless it is wrapped in :func:`instrumentation`
(per-subset curves that are recorded but never fed back into training).
"""
import threading
from contextlib import contextmanager


class MaskAccessViolation(RuntimeError):
    pass


_state = threading.local()
violations: list[str] = []


def _depth(name):
    return getattr(_state, name, 0)


@contextmanager
def _nested(name):
    setattr(_state, name, _depth(name) + 1)
    try:
        yield
    finally:
        setattr(_state, name, _depth(name) - 1)


def defense_path():
    return _nested("defense")


def instrumentation():
    return _nested("instrumentation")


def in_defense_path() -> bool:
    return _depth("defense") > 0 and _depth("instrumentation") == 0


def check(field: str) -> None:
    if in_defense_path():
        msg = f"defense path read ground-truth field {field!r}"
        violations.append(msg)
        raise MaskAccessViolation(msg)
