"""
Thread-safe singleton decorator.
"""

import functools
import threading


def singleton(origin_cls):
    """
    Make every construction of ``origin_cls`` return one shared instance.

    ``__init__`` runs on the first construction only. The decorated class gains a
    ``reset_instance()`` classmethod that drops the shared instance, so the next
    construction re-initializes it.
    """
    origin_new = origin_cls.__new__
    origin_init = origin_cls.__init__
    lock = threading.Lock()
    state = {"instance": None, "initialized": False}

    @functools.wraps(origin_cls.__new__)
    def __new__(cls, *args, **kwargs):
        with lock:
            if state["instance"] is None:
                if origin_new is object.__new__:
                    state["instance"] = origin_new(cls)
                else:
                    state["instance"] = origin_new(cls, *args, **kwargs)
        return state["instance"]

    @functools.wraps(origin_cls.__init__)
    def __init__(self, *args, **kwargs):
        with lock:
            if state["initialized"]:
                return
            state["initialized"] = True
        origin_init(self, *args, **kwargs)

    def reset_instance(cls):
        with lock:
            state["instance"] = None
            state["initialized"] = False

    origin_cls.__new__ = __new__
    origin_cls.__init__ = __init__
    origin_cls.reset_instance = classmethod(reset_instance)
    return origin_cls
