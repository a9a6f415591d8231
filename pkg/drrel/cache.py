from functools import wraps


class cached_property(object):
    """
    A property that is only computed once per instance and then replaces itself
    with an ordinary attribute. Deleting the attribute resets the property.

    Writes go straight to the instance ``__dict__``, so it also works on frozen
    dataclasses.
    """

    def __init__(self, func):
        self.__doc__ = getattr(func, "__doc__")
        self.func = func

    def __get__(self, obj, cls):
        if obj is None:
            return self
        value = obj.__dict__[self.func.__name__] = self.func(obj)
        return value


def memoized_method(func):
    '''Decorator. Caches a method's return value per instance and argument tuple.

    The cache lives on the instance, so it dies with it. Unhashable arguments
    bypass the cache.
    '''
    cache_name = '_memo_{}'.format(func.__name__)

    @wraps(func)
    def wrapper(self, *args):
        cache = self.__dict__.get(cache_name)
        if cache is None:
            cache = self.__dict__[cache_name] = {}
        try:
            return cache[args]
        except KeyError:
            value = cache[args] = func(self, *args)
            return value
        except TypeError:
            return func(self, *args)

    def cache_clear(instance):
        instance.__dict__.pop(cache_name, None)

    wrapper.cache_clear = cache_clear
    return wrapper
