import logging
from collections import OrderedDict
from collections.abc import Callable, Iterable
from contextlib import contextmanager
from inspect import getfullargspec
from io import StringIO, TextIOBase
from pathlib import Path
from threading import local

import pandas as pd
from pydash import clone_deep, get, pick

from ._utils import MergedClassProperty, class_or_instance_method, cn


__all__ = ['DataFrameRecordConverter', 'NOS', 'RecordConverter', 'ValueRequired']

log = logging.getLogger(__name__)
# Use in place of a from attribute to indicate this value is Not On the Source
# record and the default (or an extra attribute) supplies it.
NOS = '--Not On Source--'
_SENTRY = type('RecordSentry', (), {})()


class ValueRequired(ValueError):
    def __init__(self, value_name, msg=None):
        if msg is None:
            msg = f'{value_name!r} required but not found in the record'

        self.value_name = value_name
        super().__init__(msg)


class RecordConverter:
    """Declarative converter turning flat records (manifest rows, log lines) into domain objects and back.

    ## Basics

    Subclass and list the attributes to copy in `conversions`:

        >>> class Pair:
        ...     def __init__(self, left, right):
        ...         self.left, self.right = left, right
        >>> class PairConverter(RecordConverter):
        ...     to_class = Pair
        ...     conversions = [
        ...         ('left', 'l', int),                  # to.left = int(from['l'])
        ...         ('right', 'r', {'default': 0}),      # from['r'], or 0 when missing/blank
        ...     ]
        >>> pair = PairConverter.convert({'l': '3', 'r': ''})
        >>> pair.left, pair.right
        (3, 0)

    Every entry normalizes to `(to_attr, from_attr, options)`; the accepted shorthands are
    `'attr'`, `('to', 'from')`, `('attr', converter)`, `('attr', {options})`,
    `('to', NOS, default)` and `('to', 'from', converter | {options})`.

    ## Options

    - `'converter'`: callable or the name of a converter registered with
      `register_converter_for_name`. Callables receive the value, and additionally `source` and/or
      `context` when their signature names them.
    - `'default'`: used when the value is missing, `None` or blank; callables are called.
    - `'required'`: raise `ValueRequired` when the value is missing; a callable is a condition the
      value must satisfy.

    ## Extra attributes and context

    Keyword arguments to `convert` override (or add) attributes, and `context=` is visible to every
    converter running inside this conversion, including nested ones:

        >>> class ScaledConverter(RecordConverter):
        ...     conversions = [('value', 'v', lambda value, context: float(value) * context['scale'])]
        >>> ScaledConverter.convert({'v': '2'}, context={'scale': 0.5}, tag='x')
        {'value': 1.0, 'tag': 'x'}
    """

    from_class = object
    to_class = dict

    # Map of shape: { 'converter_name': callable }
    named_converters = {}
    converter_options = {
        'include_nones': True,
        'strip_strings': True,
    }

    # ----------------------------------------------------------------------------------------------
    # Class methods
    # ----------------------------------------------------------------------------------------------
    @classmethod
    def register_converter_for_name(cls, converter, name):
        cls.named_converters[name] = converter

    @classmethod
    def unregister_converter(cls, name):
        """Drop a converter added with `register_converter_for_name`; unknown names raise KeyError."""
        del cls.named_converters[name]

    @classmethod
    def normalize_single_copy_attr(cls, field):
        if isinstance(field, str):
            return (field, field, {})

        if isinstance(field, Iterable):
            if len(field) == 1:
                return (field[0], field[0], {})

            if len(field) == 2:
                if field[1] is NOS:
                    return (field[0], NOS, {})
                if isinstance(field[1], str):
                    return (field[0], field[1], {})
                if isinstance(field[1], Callable):
                    return (field[0], field[0], {'converter': field[1]})
                return (field[0], field[0], dict(field[1]))

            if len(field) == 3:
                to_attr, from_attr, third = field
                if not isinstance(to_attr, str):
                    raise TypeError(f'{cn(cls)} conversion "to" field {to_attr!r} is invalid')
                if from_attr is not NOS and not isinstance(from_attr, str):
                    raise TypeError(f'{cn(cls)} conversion "from" field {from_attr!r} is invalid')
                if isinstance(third, dict):
                    return (to_attr, from_attr, dict(third))
                if from_attr is NOS:
                    return (to_attr, from_attr, {'default': third})
                if not isinstance(third, (Callable, str)):
                    raise TypeError(f'{cn(cls)} converter for {to_attr} is invalid: {third!r}')
                return (to_attr, from_attr, {'converter': third})

        raise TypeError(f'Conversion spec is not valid: {field!r}')

    # ----------------------------------------------------------------------------------------------
    # Instance methods
    # ----------------------------------------------------------------------------------------------
    def __init__(self, source, *, context=None, **extra_attrs):
        if not isinstance(source, self.from_class):
            raise TypeError(
                f'{cn(self)} source is not an instance of {self.from_class.__name__}: {source!r}'
            )
        self.source = source
        self.extra_attrs = extra_attrs
        self._context = context
        self._normalized_attrs = self.dynamic_copy_attrs()

    def dynamic_copy_attrs(self):
        """Returns list of form [(to_attr_name, from_attr_name, opts)]"""
        attrs = [
            self.normalize_single_copy_attr(field)
            for field in clone_deep(getattr(self, 'conversions', []))
        ]
        for key, value in self.extra_attrs.items():
            match = next((a for a in attrs if a[0] == key), None)
            if match is None:
                attrs.append((key, NOS, {'_kwarg_override': value}))
            else:
                match[2]['_kwarg_override'] = value
        return attrs

    @property
    def context(self):
        return getattr(RecordConverter._context_local, 'context', {})

    @context.setter
    def context(self, value):
        RecordConverter._context_local.context = value

    def from_getter(self, src, attr, default):
        if attr == 'self':
            return src
        return get(src, attr, default)

    @class_or_instance_method
    def convert(self, *args, **kwargs):
        # this supports being called as a class method...
        if isinstance(self, type):
            return self(*args, **kwargs).convert()

        with self._updated_context():
            return self.instance_convert()

    def instance_convert(self):
        params = OrderedDict()
        for to_attr, from_attr, opts in self._normalized_attrs:
            val = self._normalize_value(to_attr, from_attr, opts)
            if val is _SENTRY:
                continue
            params[to_attr] = val
        inst = self.instantiate(params)
        post_convert = getattr(self, 'post_convert', None)
        if post_convert is not None:
            inst = post_convert(inst)
        return inst

    def instantiate(self, params):
        return self.to_class(**params)

    # ----------------------------------------------------------------------------------------------
    # Private methods
    # ----------------------------------------------------------------------------------------------
    _context_local = local()
    _resolved_converter_options = MergedClassProperty('converter_options')

    def _normalize_value(self, to_attr, from_attr, opts):
        val = self._get_value(from_attr, opts)
        requirement = opts.get('required', False)

        if val is _SENTRY:
            if requirement:
                raise ValueRequired(from_attr if from_attr is not NOS else to_attr)
            return _SENTRY

        if callable(requirement) and not requirement(val):
            raise ValueRequired(
                from_attr, f'{from_attr!r} value {val!r} does not satisfy requirement condition'
            )

        val = self._convert_child(opts, val)
        if val is None and not self._resolved_converter_options['include_nones']:
            return _SENTRY
        return val

    def _get_value(self, from_attr, opts):
        if '_kwarg_override' in opts:
            return opts['_kwarg_override']
        val = _SENTRY if from_attr is NOS else self.from_getter(self.source, from_attr, _SENTRY)
        if isinstance(val, str) and self._resolved_converter_options['strip_strings']:
            val = val.strip()

        blank = val is None or (isinstance(val, str) and val == '')
        if val is _SENTRY or blank:
            default = opts.get('default', _SENTRY)
            if default is not _SENTRY:
                return default() if isinstance(default, Callable) else default
            if blank:
                # present but blank with no default: treat as missing
                return _SENTRY
        return val

    def _convert_child(self, opts, val):
        converter = opts.get('converter')
        if converter is None:
            return val
        if isinstance(converter, str):
            try:
                converter = self.named_converters[converter]
            except KeyError:
                raise ValueError(f'{cn(self)}: no converter registered as {converter!r}') from None
        if isinstance(converter, type) and issubclass(converter, RecordConverter):
            return converter.convert(val)
        try:
            spec = getfullargspec(converter)
        except TypeError:
            # builtins such as int / float
            return converter(val)
        names = spec.args[1:] if spec.args and spec.args[0] in ('self', 'cls') else spec.args
        if len(names) <= 1:
            return converter(val)
        return converter(val, **pick({'source': self.source, 'context': self.context}, names[1:]))

    @contextmanager
    def _updated_context(self):
        old_context = self.context or {}
        self.context = {**old_context, **(self._context or {})}
        try:
            yield
        finally:
            self.context = old_context


class DataFrameRecordConverter(RecordConverter):
    """Convert
    rows of a CSV (as pandas series) into domain objects.

        >>> class RowConverter(DataFrameRecordConverter):
        ...     conversions = [('a', int), ('b', {'default': 'none'})]
        >>> RowConverter.convert_csv('a,b\\n1,x\\n2,\\n')
        [{'a': 1, 'b': 'x'}, {'a': 2, 'b': 'none'}]

    Every column is read as a string; pandas type detection would make a column's type depend on
    its data, so converters decide the types.
    """

    from_class = pd.Series

    # ----------------------------------------------------------------------------------------------
    # Convenience methods
    # ----------------------------------------------------------------------------------------------
    @classmethod
    def read_csv(cls, csv):
        if isinstance(csv, str) and '\n' in csv:
            csv = StringIO(csv)
        elif isinstance(csv, (str, Path)):
            csv = Path(csv)
        elif not isinstance(csv, TextIOBase):
            raise TypeError('Unknown CSV type')
        return pd.read_csv(csv, dtype=str, keep_default_na=False, encoding='utf-8')

    @classmethod
    def convert_csv(cls, csv, **kwargs):
        return cls.convert_dataframe_of_rows(cls.read_csv(csv), **kwargs)

    @classmethod
    def convert_dataframe_of_rows(cls, df, **kwargs) -> list:
        return [cls.convert(row, **kwargs) for _, row in df.iterrows()]

    def from_getter(self, src, attr, default):
        if attr == 'self':
            return src
        if attr not in src.index:
            return default
        return src[attr]
