import math
import zlib

import numpy as np
from pydash import clone_deep, merge, merge_with, omit_by


# --------------------------------------------------------------------------------------------------
# Decorators
# --------------------------------------------------------------------------------------------------
class class_or_instance_method:  # noqa
    """This decorator allows you to make a method act on a class or an
    instance. So:

    >>> class Counter(object):
    ...     hits = 0
    ...     @class_or_instance_method
    ...     def bump(cls_or_self, by):
    ...         cls_or_self.hits = cls_or_self.hits + by
    ...         return cls_or_self.hits
    >>> Counter.bump(2)
    2
    >>> inst = Counter()
    >>> inst.bump(3)
    5
    >>> Counter.hits
    2
    """

    def __init__(self, func):
        self._func = func

    def __get__(self, obj, cls):
        target = obj if obj is not None else cls

        def class_or_instance_wrapper(*args, **kwargs):
            return self._func(target, *args, **kwargs)

        return class_or_instance_wrapper


# --------------------------------------------------------------------------------------------------
# Descriptors
# --------------------------------------------------------------------------------------------------
class MergedClassProperty:
    """Deep-merges a dict class attribute down the MRO, so subclasses only state what they change.

    >>> class Base:
    ...     options = {'a': 1, 'nested': {'x': 1}}
    ...     resolved = MergedClassProperty('options')
    >>> class Child(Base):
    ...     options = {'nested': {'y': 2}}
    >>> Child.resolved == {'a': 1, 'nested': {'x': 1, 'y': 2}}
    True
    """

    def __init__(self, class_property):
        self.class_property = class_property
        self.class_cache_property = f'__{class_property}_cache'

    def __get__(self, instance, cls):
        # need to get it direct in case a superclass has it set differently
        cached_result = cls.__dict__.get(self.class_cache_property)
        if cached_result is not None:
            return cached_result

        merged_prop = merge(
            {},
            *(
                clone_deep(getattr(super_class, self.class_property, {}))
                for super_class in cls.__mro__[-1::-1]
            ),
        )
        setattr(cls, self.class_cache_property, merged_prop)
        return merged_prop


# --------------------------------------------------------------------------------------------------
# Functions
# --------------------------------------------------------------------------------------------------
def cn(obj):
    if isinstance(obj, type):
        return obj.__name__
    return type(obj).__name__


def merge_layers(*layers):
    """Merge configuration layers left to right; `None` values in a layer never override and lists
    are replaced whole.

    >>> merge_layers({'train': {'lr': 0.001, 'tau': 0.8}}, {'train': {'lr': None, 'tau': 0.9}})
    {'train': {'lr': 0.001, 'tau': 0.9}}
    >>> merge_layers({'channels': [16, 32, 64]}, {'channels': [8, 8]})
    {'channels': [8, 8]}
    """
    return merge_with({}, *(_drop_nones(layer) for layer in layers if layer), _replace_sequences)


def _replace_sequences(current, incoming, *args):
    if isinstance(incoming, (list, tuple)):
        return list(incoming)
    return None


def _drop_nones(layer):
    if not isinstance(layer, dict):
        return layer
    return {k: _drop_nones(v) for k, v in omit_by(layer, lambda v: v is None).items()}


def round_half_up(value):
    """Round to the nearest integer with halves going up (python's `round` goes to even).

    >>> round_half_up(2.5), round(2.5)
    (3, 2)
    """
    return int(math.floor(value + 0.5))


def seeded_rng(seed, stream):
    """Independent, reproducible generator for a named purpose (`'init'`, `'shuffle'`, ...)."""
    return np.random.default_rng([int(seed), zlib.crc32(stream.encode('utf-8'))])
